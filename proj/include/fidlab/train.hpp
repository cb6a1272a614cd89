#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <variant>
#include <vector>

#include "fidlab/checkpoint.hpp"
#include "fidlab/corpus.hpp"
#include "fidlab/environments.hpp"
#include "fidlab/model.hpp"

namespace fidlab {

// Desk-scale defaults; the original trainer's schedule (5e-5, warmup 1000,
// 15k steps) remains reachable through configuration.
struct TrainHyperparams {
    double base_lr = 3e-4;
    int64_t warmup_steps = 100;
    double weight_decay = 0.01;
    double max_grad_norm = 1.0;
    int64_t max_steps = 2000;
    int64_t eval_every = 100;  // dev EM cadence == checkpoint cadence
    int batch_size = 8;
    TargetMode target_mode = TargetMode::first_gold;
    EmConfig em;
};

struct TrainRun {
    std::variant<EnvSpec, MixtureSpec> env;
    TrainHyperparams hp;
    uint64_t seed = 0;
    std::string name;  // recorded in checkpoint metadata

    std::string env_desc() const;
};

// Optional override of per-step context sampling (used by the annotator
// trainer, which samples from unlabeled pools).
using ContextProvider = std::function<Context(const Question&, uint64_t step)>;

struct TrainResult {
    Checkpoint best;  // highest dev EM; ties resolved toward the earliest step
    double best_dev_em = 0.0;
    int64_t best_step = 0;
    bool aborted_nan = false;
    std::string abort_reason;
    std::vector<std::pair<int64_t, double>> dev_curve;  // (step, dev EM)
    std::vector<std::pair<int64_t, double>> loss_curve;  // (step, batch mean CE)
};

// Trains one run: per-step context resampling, cross-entropy on the picked
// target answer, AdamW with warmup, periodic dev-EM checkpointing. A NaN/inf
// loss or gradient aborts the run and retains the best checkpoint so far.
TrainResult train(const TrainRun& run, const Corpus& corpus, const SplitIds& split,
                  const ModelConfig& model_cfg, const Vocab& vocab,
                  const ContextProvider* provider = nullptr, std::ostream* log = nullptr);

// Dev-EM of a model under the run's environment (mixtures are averaged over
// their components, each with a fixed per-question dev context).
double dev_exact_match(const FidModel& model, const Corpus& corpus,
                       const std::vector<size_t>& dev_ids,
                       const std::variant<EnvSpec, MixtureSpec>& env, uint64_t seed,
                       const EmConfig& em);

// Mean teacher-forced cross-entropy of the model over fixed probe contexts;
// used to measure training progress against the initialization.
double probe_loss(const FidModel& model, const Corpus& corpus, const std::vector<size_t>& ids,
                  const std::variant<EnvSpec, MixtureSpec>& env, uint64_t seed,
                  TargetMode target_mode);

}  // namespace fidlab
