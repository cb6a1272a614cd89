#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fidlab/attention_control.hpp"
#include "fidlab/checkpoint.hpp"
#include "fidlab/environments.hpp"
#include "fidlab/train.hpp"

namespace fidlab {

// ---- evaluation protocol ----

struct EvalOptions {
    int n_passage_sets = 5;  // resampled passage sets per evaluation
    uint64_t eval_seed = 0;
    EmConfig em;
    int n_threads = 2;
};

// Anything that maps (question, context) to an answer. Models are wrapped
// into this; tests can pass oracles.
using Answerer = std::function<std::string(const Question&, const Context&)>;

// Builds the (possibly context-dependent) attention transform for one
// evaluation context; the intervention needs the context's relevance mask.
using TransformFactory = std::function<PassageAttnTransform<float>(const Context&)>;

struct QuestionRecord {
    std::string question_id;
    int seed_index = 0;  // which answerer/checkpoint
    int set_index = 0;
    std::string prediction;
    bool em = false;
};

// EM statistics for one evaluation environment: questions are averaged first,
// then passage sets; mean/std are taken across seeds (the declared
// replication axis).
struct EvalResult {
    EnvSpec env;
    std::vector<std::vector<double>> em_by_seed_set;  // [seed][set]
    std::vector<QuestionRecord> records;
    size_t n_questions = 0;

    double seed_mean(size_t seed) const;
    double mean() const;
    double stddev() const;  // population std across seeds
};

// "69.8_{0.7}" -- EM percent with the seed std as a lower subscript.
std::string format_em(double mean, double stddev);

EvalResult evaluate_answerers(std::span<const Answerer> answerers, const EnvSpec& env,
                              const Corpus& corpus, const std::vector<size_t>& ids,
                              const EvalOptions& opts);

EvalResult evaluate_models(std::span<const FidModel* const> models, const EnvSpec& env,
                           const Corpus& corpus, const std::vector<size_t>& ids,
                           const EvalOptions& opts, const TransformFactory* transform = nullptr);

// Mixture reporting rule: evaluate each component environment and average.
struct MixtureEvalResult {
    std::vector<EvalResult> per_component;
    double mean() const;
    double stddev() const;  // across seeds of the component-averaged EM
};

MixtureEvalResult evaluate_models_mixture(std::span<const FidModel* const> models,
                                          const MixtureSpec& mix, const Corpus& corpus,
                                          const std::vector<size_t>& ids, const EvalOptions& opts,
                                          const TransformFactory* transform = nullptr);

// ---- sweeps ----

struct SweepOptions {
    int seeds = 3;
    uint64_t seed_base = 0;  // run seeds are seed_base + seed index
    int n_workers = 2;       // parallel training runs
    TrainHyperparams hp;
    EvalOptions eval;
};

struct SweepCell {
    std::string train_desc;
    EnvSpec eval_env;
    EvalResult result;
};

struct SkippedCell {
    std::string desc;
    std::string reason;
};

struct SweepResult {
    std::vector<SweepCell> cells;
    std::vector<SkippedCell> skipped;

    const SweepCell* find(const std::string& train_desc, const EnvSpec& eval_env) const;
};

// Trained models are kept so later analyses (probes, interventions,
// temperature search) can reuse them without retraining.
struct TrainedGroup {
    std::string desc;  // training environment description
    std::variant<EnvSpec, MixtureSpec> env;
    std::vector<Checkpoint> seeds;
};

std::vector<TrainedGroup> train_groups(const std::vector<std::variant<EnvSpec, MixtureSpec>>& envs,
                                       const Corpus& corpus, const SplitIds& split,
                                       const ModelConfig& model_cfg, const Vocab& vocab,
                                       const SweepOptions& opts);

// One model per (n, n_plus) at matched quantity; evaluated on every cell.
SweepResult quality_sweep(const std::vector<int>& n_values, const std::vector<int>& n_plus_values,
                          const Corpus& corpus, const SplitIds& split, const ModelConfig& model_cfg,
                          const Vocab& vocab, const SweepOptions& opts,
                          std::vector<TrainedGroup>* out_groups = nullptr);

// One model per (k, n_plus) at matched quality 1/(1+k); infeasible cells
// (k*n_plus exceeding the guaranteed irrelevant pool) are skipped and logged.
SweepResult quantity_sweep(const std::vector<double>& k_values,
                           const std::vector<int>& n_plus_values, const Corpus& corpus,
                           const SplitIds& split, const ModelConfig& model_cfg, const Vocab& vocab,
                           const SweepOptions& opts, std::vector<TrainedGroup>* out_groups = nullptr);

// One model per nonempty subset of the component environments; each is
// evaluated on every subset with the component-averaging rule.
struct MixtureCell {
    std::string train_desc;
    std::string eval_desc;
    double em_mean = 0.0;
    double em_std = 0.0;
};

struct MixtureResult {
    std::vector<MixtureCell> cells;
};

MixtureResult mixture_experiment(const std::vector<EnvSpec>& components, const Corpus& corpus,
                                 const SplitIds& split, const ModelConfig& model_cfg,
                                 const Vocab& vocab, const SweepOptions& opts,
                                 std::vector<TrainedGroup>* out_groups = nullptr);

// ---- cross-attention analyses ----

struct AttentionMassRecord {
    int layer = 0;
    bool relevant = false;
    double mass = 0.0;  // aggregated first-token mass of one passage
};

struct AttentionReport {
    std::vector<double> relevant_mass_pct;    // per decoder layer, in percent
    std::vector<double> irrelevant_mass_pct;  // complement, kept for the 100% check
    std::vector<AttentionMassRecord> records;
    size_t n_samples = 0;  // questions x passage sets
};

AttentionReport attention_analysis(const FidModel& model, const EnvSpec& env, const Corpus& corpus,
                                   const std::vector<size_t>& ids, const EvalOptions& opts);

// ---- intervention experiment ----

struct InterventionRow {
    std::string train_desc;
    std::optional<double> r;  // nullopt = no intervention
    double em_mean = 0.0;
    double em_std = 0.0;
};

struct InterventionResult {
    EnvSpec env;
    std::vector<InterventionRow> rows;
    // max-min spread of seed-mean EM across training groups, per r
    double spread_baseline = 0.0;
    std::vector<std::pair<double, double>> spread_by_r;  // (r, spread)
};

InterventionResult intervention_experiment(std::span<const TrainedGroup> groups, const EnvSpec& env,
                                           const std::vector<double>& r_values,
                                           const Corpus& corpus, const std::vector<size_t>& ids,
                                           const EvalOptions& opts);

// ---- cross-validated temperature search ----

struct TemperatureFold {
    double t_star = 1.0;
    double selection_em = 0.0;   // best grid EM on the selection fold
    double adapted_em = 0.0;     // EM at t_star on the held-out fold
    double unadapted_em = 0.0;   // no-transform EM on the held-out fold
    size_t n_heldout_questions = 0;
    std::vector<std::pair<double, double>> grid_em;  // (T, selection-fold EM)
};

struct TemperatureSearchResult {
    std::array<TemperatureFold, 2> folds;
    double combined_adapted_em = 0.0;  // question-weighted over held-out folds
    double combined_unadapted_em = 0.0;
};

inline const std::vector<double>& default_temperature_grid() {
    static const std::vector<double> grid = {0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};
    return grid;
}

// 2-fold CV: split eval questions by id hash, pick T* on one fold (ties go to
// the smaller T), report adapted EM on the other.
TemperatureSearchResult temperature_search(const FidModel& model, const EnvSpec& env,
                                           const Corpus& corpus, const std::vector<size_t>& ids,
                                           const std::vector<double>& grid, uint64_t fold_salt,
                                           const EvalOptions& opts);

// ---- report writers ----

void write_eval_csv(const std::vector<SweepCell>& cells, const std::filesystem::path& path);
void write_records_jsonl(const EvalResult& result, const std::string& train_desc,
                         const std::filesystem::path& path, bool append = false);
void write_quality_figure_csv(const SweepResult& r, const std::filesystem::path& path);
void write_quantity_figure_csv(const SweepResult& r, const std::filesystem::path& path);
void write_attention_figure_csv(const std::vector<std::pair<std::string, AttentionReport>>& reports,
                                const std::filesystem::path& path);
void write_intervention_figure_csv(const std::vector<InterventionResult>& results,
                                   const std::filesystem::path& path);
void write_mixture_csv(const MixtureResult& r, const std::filesystem::path& path);

// Simple index-parallel loop used for independent evaluation cells.
void parallel_for(size_t n, int n_threads, const std::function<void(size_t)>& fn);

}  // namespace fidlab
