#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fidlab/model.hpp"

namespace fidlab {

// Checkpoint file layout (little-endian throughout):
//   magic "FIDL" | u32 format version | u32 config length | config JSON |
//   u32 array count | per array: u32 name length, name bytes,
//   u32 rank, u32 dims[rank], float32 data.
// The config JSON carries the model config, the vocabulary, and run metadata.

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    uint64_t seed = 0;
    int64_t step = -1;       // training step the snapshot was taken at
    double dev_em = -1.0;    // dev exact match at that step
    std::string train_env;   // human-readable environment description
};

struct Checkpoint {
    ModelConfig config;
    Vocab vocab;
    CheckpointMeta meta;
    // name -> float32 tensor, in a stable order
    std::vector<std::pair<std::string, Tensor<float>>> arrays;

    static Checkpoint from_model(const FidModel& model, CheckpointMeta meta);
    FidModel to_model() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fidlab
