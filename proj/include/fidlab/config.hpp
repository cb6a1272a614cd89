#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fidlab/corpus.hpp"
#include "fidlab/harness.hpp"
#include "fidlab/model.hpp"
#include "fidlab/train.hpp"

namespace fidlab {

inline constexpr const char* kToolVersion = "0.1.0";

// One JSON document drives every subcommand; every field has a default
// except the seed and file paths. Unknown keys are rejected.
struct SplitConfig {
    double train_frac = 0.6;
    double dev_frac = 0.2;
    uint64_t salt = 1;
};

struct PathsConfig {
    std::string corpus;
    std::string labels;
    std::string checkpoint;
    std::vector<std::string> checkpoints;
};

struct EvalConfig {
    int n_passage_sets = 5;
    std::string em = "synthetic-exact";
    std::vector<EnvSpec> envs;  // defaults to the train env when empty
    int threads = 2;
};

struct SweepConfig {
    std::vector<int> n = {10};
    std::vector<int> n_plus = {1, 3};
    std::vector<double> k = {1, 5, 20};
    int seeds = 3;
    int workers = 2;
};

struct AdaptConfig {
    std::vector<double> grid = {0.125, 0.25, 0.5, 1, 2, 4, 8};
    uint64_t fold_salt = 17;
    EnvSpec env{3, 7};
};

struct InterveneConfig {
    std::vector<double> r = {1.0, 0.1, 0.0};
};

struct AnnotateConfig {
    double eval_frac = 0.2;
    double dev_frac = 0.125;
    int min_half_size = 4;
    bool dual_setting = false;  // intersect All- and Pos-trained annotations
    int ctx_size = 6;           // context size for annotator training
    int64_t max_steps = 800;
};

struct RunConfig {
    std::optional<uint64_t> seed;
    PathsConfig paths;
    CorpusSpec corpus;
    ModelConfig model;  // vocab_size is derived at runtime, not configured
    SplitConfig split;
    TrainHyperparams train;
    EnvSpec env{1, 9};
    std::vector<EnvSpec> mixture;  // nonempty: train on the uniform mixture
    EvalConfig eval;
    SweepConfig sweep;
    AdaptConfig adapt;
    InterveneConfig intervene;
    AnnotateConfig annotate;

    // Parses and validates a user JSON document over the defaults.
    void apply_json(const nlohmann::json& doc);
    static RunConfig from_file(const std::filesystem::path& path);

    nlohmann::json to_json() const;  // fully resolved

    uint64_t require_seed() const;
    std::variant<EnvSpec, MixtureSpec> train_env() const;
    EmConfig em_config() const;

    // Echoes the resolved config (with tool version and seed) into out_dir.
    void write_resolved(const std::filesystem::path& out_dir) const;
};

}  // namespace fidlab
