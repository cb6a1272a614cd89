#include "fidlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fidlab/error.hpp"
#include "fidlab/rng.hpp"

namespace fidlab {

void parallel_for(size_t n, int n_threads, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    int workers = std::max(1, std::min<int>(n_threads, static_cast<int>(n)));
    if (workers == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr first_error = nullptr;
    std::mutex err_mu;
    auto work = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

double EvalResult::seed_mean(size_t seed) const {
    const auto& sets = em_by_seed_set[seed];
    double s = 0.0;
    for (double v : sets) s += v;
    return sets.empty() ? 0.0 : s / static_cast<double>(sets.size());
}

double EvalResult::mean() const {
    if (em_by_seed_set.empty()) return 0.0;
    double s = 0.0;
    for (size_t i = 0; i < em_by_seed_set.size(); ++i) s += seed_mean(i);
    return s / static_cast<double>(em_by_seed_set.size());
}

double EvalResult::stddev() const {
    size_t n = em_by_seed_set.size();
    if (n < 2) return 0.0;
    double mu = mean(), s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double d = seed_mean(i) - mu;
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(n));
}

std::string format_em(double mean, double stddev) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << mean * 100.0 << "_{" << stddev * 100.0 << "}";
    return os.str();
}

EvalResult evaluate_answerers(std::span<const Answerer> answerers, const EnvSpec& env,
                              const Corpus& corpus, const std::vector<size_t>& ids,
                              const EvalOptions& opts) {
    if (answerers.empty()) throw std::invalid_argument("evaluate: no answerers");
    if (ids.empty()) throw DataError("evaluate: empty question set");
    EvalResult res;
    res.env = env;
    res.n_questions = ids.size();
    size_t n_seeds = answerers.size();
    size_t n_sets = static_cast<size_t>(opts.n_passage_sets);
    res.em_by_seed_set.assign(n_seeds, std::vector<double>(n_sets, 0.0));
    res.records.resize(n_seeds * n_sets * ids.size());

    size_t total = n_seeds * n_sets * ids.size();
    parallel_for(total, opts.n_threads, [&](size_t task) {
        size_t qi = task % ids.size();
        size_t rest = task / ids.size();
        size_t set = rest % n_sets;
        size_t seed_idx = rest / n_sets;
        const Question& q = corpus.questions[ids[qi]];
        Context ctx = sample_context(q, env, opts.eval_seed, set);
        std::string pred = answerers[seed_idx](q, ctx);
        bool hit = exact_match(pred, q.gold_answers, opts.em);
        res.records[task] = {q.id, static_cast<int>(seed_idx), static_cast<int>(set), pred, hit};
    });

    for (size_t seed_idx = 0; seed_idx < n_seeds; ++seed_idx)
        for (size_t set = 0; set < n_sets; ++set) {
            double hits = 0;
            for (size_t qi = 0; qi < ids.size(); ++qi)
                hits += res.records[(seed_idx * n_sets + set) * ids.size() + qi].em ? 1 : 0;
            res.em_by_seed_set[seed_idx][set] = hits / static_cast<double>(ids.size());
        }
    return res;
}

namespace {

std::vector<Answerer> wrap_models(std::span<const FidModel* const> models,
                                  const TransformFactory* transform) {
    std::vector<Answerer> out;
    for (const FidModel* m : models) {
        out.push_back([m, transform](const Question& q, const Context& ctx) {
            if (transform && *transform) {
                auto t = (*transform)(ctx);
                return greedy_decode(*m, q.text, ctx, &t);
            }
            return greedy_decode(*m, q.text, ctx);
        });
    }
    return out;
}

}  // namespace

EvalResult evaluate_models(std::span<const FidModel* const> models, const EnvSpec& env,
                           const Corpus& corpus, const std::vector<size_t>& ids,
                           const EvalOptions& opts, const TransformFactory* transform) {
    auto answerers = wrap_models(models, transform);
    return evaluate_answerers(answerers, env, corpus, ids, opts);
}

double MixtureEvalResult::mean() const {
    double s = 0.0;
    for (const auto& r : per_component) s += r.mean();
    return per_component.empty() ? 0.0 : s / static_cast<double>(per_component.size());
}

double MixtureEvalResult::stddev() const {
    if (per_component.empty() || per_component[0].em_by_seed_set.size() < 2) return 0.0;
    size_t n_seeds = per_component[0].em_by_seed_set.size();
    std::vector<double> seed_avgs(n_seeds, 0.0);
    for (const auto& r : per_component)
        for (size_t s = 0; s < n_seeds; ++s) seed_avgs[s] += r.seed_mean(s);
    double mu = 0.0;
    for (auto& v : seed_avgs) {
        v /= static_cast<double>(per_component.size());
        mu += v;
    }
    mu /= static_cast<double>(n_seeds);
    double acc = 0.0;
    for (double v : seed_avgs) acc += (v - mu) * (v - mu);
    return std::sqrt(acc / static_cast<double>(n_seeds));
}

MixtureEvalResult evaluate_models_mixture(std::span<const FidModel* const> models,
                                          const MixtureSpec& mix, const Corpus& corpus,
                                          const std::vector<size_t>& ids, const EvalOptions& opts,
                                          const TransformFactory* transform) {
    MixtureEvalResult out;
    for (const auto& comp : mix.components)
        out.per_component.push_back(evaluate_models(models, comp, corpus, ids, opts, transform));
    return out;
}

const SweepCell* SweepResult::find(const std::string& train_desc, const EnvSpec& eval_env) const {
    for (const auto& c : cells)
        if (c.train_desc == train_desc && c.eval_env == eval_env) return &c;
    return nullptr;
}

std::vector<TrainedGroup> train_groups(const std::vector<std::variant<EnvSpec, MixtureSpec>>& envs,
                                       const Corpus& corpus, const SplitIds& split,
                                       const ModelConfig& model_cfg, const Vocab& vocab,
                                       const SweepOptions& opts) {
    std::vector<TrainedGroup> groups(envs.size());
    struct Task {
        size_t group;
        int seed_idx;
    };
    std::vector<Task> tasks;
    for (size_t gi = 0; gi < envs.size(); ++gi) {
        groups[gi].env = envs[gi];
        groups[gi].seeds.resize(static_cast<size_t>(opts.seeds));
        TrainRun probe;
        probe.env = envs[gi];
        groups[gi].desc = probe.env_desc();
        for (int s = 0; s < opts.seeds; ++s) tasks.push_back({gi, s});
    }
    parallel_for(tasks.size(), opts.n_workers, [&](size_t ti) {
        TrainRun run;
        run.env = envs[tasks[ti].group];
        run.hp = opts.hp;
        run.seed = opts.seed_base + static_cast<uint64_t>(tasks[ti].seed_idx);
        run.name = groups[tasks[ti].group].desc;
        auto res = train(run, corpus, split, model_cfg, vocab);
        if (res.aborted_nan)
            throw NumericError("training aborted (" + res.abort_reason + ") for " + run.name);
        groups[tasks[ti].group].seeds[static_cast<size_t>(tasks[ti].seed_idx)] = std::move(res.best);
    });
    return groups;
}

namespace {

std::vector<FidModel> materialize(const TrainedGroup& g) {
    std::vector<FidModel> models;
    models.reserve(g.seeds.size());
    for (const auto& ck : g.seeds) models.push_back(ck.to_model());
    return models;
}

std::vector<const FidModel*> pointers(const std::vector<FidModel>& models) {
    std::vector<const FidModel*> out;
    for (const auto& m : models) out.push_back(&m);
    return out;
}

SweepResult evaluate_groups_on(const std::vector<TrainedGroup>& groups,
                               const std::vector<EnvSpec>& eval_envs, const Corpus& corpus,
                               const std::vector<size_t>& eval_ids, const EvalOptions& opts) {
    SweepResult out;
    for (const auto& g : groups) {
        auto models = materialize(g);
        auto ptrs = pointers(models);
        for (const auto& env : eval_envs)
            out.cells.push_back({g.desc, env, evaluate_models(ptrs, env, corpus, eval_ids, opts)});
    }
    return out;
}

size_t min_irrelevant_pool(const Corpus& corpus) {
    size_t m = SIZE_MAX;
    for (const auto& q : corpus.questions) m = std::min(m, q.irrelevant_pool.size());
    return m == SIZE_MAX ? 0 : m;
}

}  // namespace

SweepResult quality_sweep(const std::vector<int>& n_values, const std::vector<int>& n_plus_values,
                          const Corpus& corpus, const SplitIds& split, const ModelConfig& model_cfg,
                          const Vocab& vocab, const SweepOptions& opts,
                          std::vector<TrainedGroup>* out_groups) {
    std::vector<std::variant<EnvSpec, MixtureSpec>> envs;
    std::vector<EnvSpec> eval_envs;
    for (int n : n_values)
        for (int np : n_plus_values) {
            if (np > n) throw ConfigError("quality sweep: n_plus > n");
            EnvSpec e{np, n - np};
            envs.push_back(e);
            eval_envs.push_back(e);
        }
    auto groups = train_groups(envs, corpus, split, model_cfg, vocab, opts);
    auto res = evaluate_groups_on(groups, eval_envs, corpus, split.eval, opts.eval);
    if (out_groups) *out_groups = std::move(groups);
    return res;
}

SweepResult quantity_sweep(const std::vector<double>& k_values,
                           const std::vector<int>& n_plus_values, const Corpus& corpus,
                           const SplitIds& split, const ModelConfig& model_cfg, const Vocab& vocab,
                           const SweepOptions& opts, std::vector<TrainedGroup>* out_groups) {
    size_t pool_floor = min_irrelevant_pool(corpus);
    SweepResult out;
    std::vector<std::variant<EnvSpec, MixtureSpec>> envs;
    std::vector<EnvSpec> eval_envs;
    for (double k : k_values)
        for (int np : n_plus_values) {
            int nm = static_cast<int>(std::llround(k * np));
            if (static_cast<size_t>(nm) > pool_floor) {
                std::ostringstream os;
                os << "(n+=" << np << ",k=" << k << ")";
                out.skipped.push_back({os.str(), "k*n_plus = " + std::to_string(nm) +
                                                     " exceeds the guaranteed irrelevant pool (" +
                                                     std::to_string(pool_floor) + ")"});
                continue;
            }
            EnvSpec e{np, nm};
            envs.push_back(e);
            eval_envs.push_back(e);
        }
    auto groups = train_groups(envs, corpus, split, model_cfg, vocab, opts);
    auto res = evaluate_groups_on(groups, eval_envs, corpus, split.eval, opts.eval);
    out.cells = std::move(res.cells);
    if (out_groups) *out_groups = std::move(groups);
    return out;
}

MixtureResult mixture_experiment(const std::vector<EnvSpec>& components, const Corpus& corpus,
                                 const SplitIds& split, const ModelConfig& model_cfg,
                                 const Vocab& vocab, const SweepOptions& opts,
                                 std::vector<TrainedGroup>* out_groups) {
    if (components.empty() || components.size() > 8)
        throw ConfigError("mixture experiment: need 1..8 components");
    std::vector<MixtureSpec> subsets;
    for (uint32_t mask = 1; mask < (1u << components.size()); ++mask) {
        MixtureSpec mix;
        for (size_t i = 0; i < components.size(); ++i)
            if (mask & (1u << i)) mix.components.push_back(components[i]);
        subsets.push_back(std::move(mix));
    }
    std::vector<std::variant<EnvSpec, MixtureSpec>> envs;
    for (const auto& s : subsets) {
        if (s.components.size() == 1)
            envs.push_back(s.components[0]);  // singleton mixtures reduce to plain environments
        else
            envs.push_back(s);
    }
    auto groups = train_groups(envs, corpus, split, model_cfg, vocab, opts);
    MixtureResult out;
    for (const auto& g : groups) {
        auto models = materialize(g);
        auto ptrs = pointers(models);
        for (const auto& s : subsets) {
            auto r = evaluate_models_mixture(ptrs, s, corpus, split.eval, opts.eval);
            TrainRun probe;
            probe.env = s.components.size() == 1
                            ? std::variant<EnvSpec, MixtureSpec>(s.components[0])
                            : std::variant<EnvSpec, MixtureSpec>(s);
            out.cells.push_back({g.desc, probe.env_desc(), r.mean(), r.stddev()});
        }
    }
    if (out_groups) *out_groups = std::move(groups);
    return out;
}

AttentionReport attention_analysis(const FidModel& model, const EnvSpec& env, const Corpus& corpus,
                                   const std::vector<size_t>& ids, const EvalOptions& opts) {
    if (ids.empty()) throw DataError("attention_analysis: empty question set");
    AttentionReport rep;
    int n_layers = model.cfg.decoder_layers;
    rep.relevant_mass_pct.assign(static_cast<size_t>(n_layers), 0.0);
    rep.irrelevant_mass_pct.assign(static_cast<size_t>(n_layers), 0.0);
    size_t n_sets = static_cast<size_t>(opts.n_passage_sets);

    struct Sample {
        std::vector<AttentionMassRecord> records;
        std::vector<double> rel_mass;  // per layer
    };
    std::vector<Sample> samples(ids.size() * n_sets);
    parallel_for(samples.size(), opts.n_threads, [&](size_t task) {
        size_t qi = task % ids.size();
        size_t set = task / ids.size();
        const Question& q = corpus.questions[ids[qi]];
        Context ctx = sample_context(q, env, opts.eval_seed, set);
        AttentionTensor attn;
        greedy_decode(model, q.text, ctx, nullptr, &attn);
        auto agg = aggregate_first_token(attn);
        Sample s;
        s.rel_mass.assign(static_cast<size_t>(n_layers), 0.0);
        for (int k = 0; k < n_layers; ++k)
            for (int i = 0; i < agg.n_passages; ++i) {
                bool rel = ctx.relevance_mask[static_cast<size_t>(i)];
                s.records.push_back({k, rel, agg.at(k, i)});
                if (rel) s.rel_mass[static_cast<size_t>(k)] += agg.at(k, i);
            }
        samples[task] = std::move(s);
    });

    for (auto& s : samples) {
        for (int k = 0; k < n_layers; ++k) rep.relevant_mass_pct[static_cast<size_t>(k)] += s.rel_mass[static_cast<size_t>(k)];
        rep.records.insert(rep.records.end(), s.records.begin(), s.records.end());
    }
    rep.n_samples = samples.size();
    for (int k = 0; k < n_layers; ++k) {
        rep.relevant_mass_pct[static_cast<size_t>(k)] *= 100.0 / static_cast<double>(rep.n_samples);
        rep.irrelevant_mass_pct[static_cast<size_t>(k)] = 100.0 - rep.relevant_mass_pct[static_cast<size_t>(k)];
    }
    return rep;
}

InterventionResult intervention_experiment(std::span<const TrainedGroup> groups, const EnvSpec& env,
                                           const std::vector<double>& r_values,
                                           const Corpus& corpus, const std::vector<size_t>& ids,
                                           const EvalOptions& opts) {
    InterventionResult out;
    out.env = env;
    std::vector<std::vector<FidModel>> models;
    std::vector<std::vector<const FidModel*>> ptrs;
    for (const auto& g : groups) {
        models.push_back(materialize(g));
        ptrs.push_back(pointers(models.back()));
    }

    auto spread_of = [](const std::vector<double>& vals) {
        auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
        return *hi - *lo;
    };

    std::vector<double> baseline_means;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        auto r = evaluate_models(ptrs[gi], env, corpus, ids, opts);
        out.rows.push_back({groups[gi].desc, std::nullopt, r.mean(), r.stddev()});
        baseline_means.push_back(r.mean());
    }
    out.spread_baseline = spread_of(baseline_means);

    for (double rv : r_values) {
        TransformFactory factory = [rv](const Context& ctx) {
            InterventionSpec spec;
            spec.r = rv;
            spec.relevance_mask = ctx.relevance_mask;
            return make_intervention_transform<float>(std::move(spec));
        };
        std::vector<double> means;
        for (size_t gi = 0; gi < groups.size(); ++gi) {
            auto r = evaluate_models(ptrs[gi], env, corpus, ids, opts, &factory);
            out.rows.push_back({groups[gi].desc, rv, r.mean(), r.stddev()});
            means.push_back(r.mean());
        }
        out.spread_by_r.push_back({rv, spread_of(means)});
    }
    return out;
}

TemperatureSearchResult temperature_search(const FidModel& model, const EnvSpec& env,
                                           const Corpus& corpus, const std::vector<size_t>& ids,
                                           const std::vector<double>& grid, uint64_t fold_salt,
                                           const EvalOptions& opts) {
    if (grid.empty()) throw ConfigError("temperature_search: empty grid");
    std::vector<size_t> fold_ids[2];
    for (size_t i : ids) fold_ids[question_bucket(corpus.questions[i].id, fold_salt, 2)].push_back(i);
    if (fold_ids[0].empty() || fold_ids[1].empty())
        throw DataError("temperature_search: a fold is empty; need more eval questions");

    std::vector<double> sorted_grid = grid;
    std::sort(sorted_grid.begin(), sorted_grid.end());

    const FidModel* mp = &model;
    std::span<const FidModel* const> one(&mp, 1);

    auto em_with_t = [&](double t, const std::vector<size_t>& qs) {
        TransformFactory factory = [t](const Context&) {
            TemperatureSpec spec;
            spec.temperature = t;
            return make_temperature_transform<float>(spec);
        };
        return evaluate_models(one, env, corpus, qs, opts, &factory).mean();
    };

    TemperatureSearchResult out;
    for (int f = 0; f < 2; ++f) {
        auto& fold = out.folds[static_cast<size_t>(f)];
        const auto& select_ids = fold_ids[f];
        const auto& heldout_ids = fold_ids[1 - f];
        fold.t_star = sorted_grid.front();
        fold.selection_em = -1.0;
        for (double t : sorted_grid) {
            double em = em_with_t(t, select_ids);
            fold.grid_em.push_back({t, em});
            if (em > fold.selection_em) {  // strict: ties keep the smaller T
                fold.selection_em = em;
                fold.t_star = t;
            }
        }
        fold.adapted_em = em_with_t(fold.t_star, heldout_ids);
        fold.unadapted_em = evaluate_models(one, env, corpus, heldout_ids, opts).mean();
        fold.n_heldout_questions = heldout_ids.size();
    }
    double n0 = static_cast<double>(out.folds[0].n_heldout_questions);
    double n1 = static_cast<double>(out.folds[1].n_heldout_questions);
    out.combined_adapted_em =
        (out.folds[0].adapted_em * n0 + out.folds[1].adapted_em * n1) / (n0 + n1);
    out.combined_unadapted_em =
        (out.folds[0].unadapted_em * n0 + out.folds[1].unadapted_em * n1) / (n0 + n1);
    return out;
}

// ---- report writers ----

namespace {

std::ofstream open_out(const std::filesystem::path& path, bool append = false) {
    std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
    if (!os) throw DataError("cannot write report file: " + path.string());
    return os;
}

}  // namespace

void write_eval_csv(const std::vector<SweepCell>& cells, const std::filesystem::path& path) {
    auto os = open_out(path);
    os << "train_env,eval_n_plus,eval_n_minus,em_mean,em_std,em_formatted,n_seeds,n_sets,n_questions\n";
    for (const auto& c : cells) {
        os << c.train_desc << "," << c.eval_env.n_plus << "," << c.eval_env.n_minus << ","
           << c.result.mean() << "," << c.result.stddev() << ","
           << format_em(c.result.mean(), c.result.stddev()) << "," << c.result.em_by_seed_set.size()
           << "," << (c.result.em_by_seed_set.empty() ? 0 : c.result.em_by_seed_set[0].size()) << ","
           << c.result.n_questions << "\n";
    }
}

void write_records_jsonl(const EvalResult& result, const std::string& train_desc,
                         const std::filesystem::path& path, bool append) {
    auto os = open_out(path, append);
    for (const auto& r : result.records) {
        nlohmann::json rec = {{"train_env", train_desc},
                              {"eval_env", to_string(result.env)},
                              {"question_id", r.question_id},
                              {"seed_index", r.seed_index},
                              {"set_index", r.set_index},
                              {"prediction", r.prediction},
                              {"em", r.em}};
        os << rec.dump() << "\n";
    }
}

void write_quality_figure_csv(const SweepResult& r, const std::filesystem::path& path) {
    auto os = open_out(path);
    os << "train_env,eval_n,eval_n_plus,eval_quality,em_mean,em_std\n";
    for (const auto& c : r.cells)
        os << c.train_desc << "," << c.eval_env.total() << "," << c.eval_env.n_plus << ","
           << c.eval_env.quality() << "," << c.result.mean() << "," << c.result.stddev() << "\n";
}

void write_quantity_figure_csv(const SweepResult& r, const std::filesystem::path& path) {
    auto os = open_out(path);
    os << "train_env,eval_n,eval_n_plus,eval_k,em_mean,em_std\n";
    for (const auto& c : r.cells) {
        double k = c.eval_env.n_plus ? static_cast<double>(c.eval_env.n_minus) / c.eval_env.n_plus : 0.0;
        os << c.train_desc << "," << c.eval_env.total() << "," << c.eval_env.n_plus << "," << k
           << "," << c.result.mean() << "," << c.result.stddev() << "\n";
    }
    if (!r.skipped.empty()) {
        auto skipped_path = path;
        skipped_path += ".skipped.txt";
        auto ss = open_out(skipped_path);
        for (const auto& s : r.skipped) ss << s.desc << ": " << s.reason << "\n";
    }
}

void write_attention_figure_csv(const std::vector<std::pair<std::string, AttentionReport>>& reports,
                                const std::filesystem::path& path) {
    auto os = open_out(path);
    os << "model,layer,relevant,mass\n";
    for (const auto& [desc, rep] : reports)
        for (const auto& rec : rep.records)
            os << desc << "," << rec.layer << "," << (rec.relevant ? 1 : 0) << "," << rec.mass
               << "\n";
    auto layers_path = path;
    layers_path += ".layers.csv";
    auto ls = open_out(layers_path);
    ls << "model,layer,relevant_mass_pct\n";
    for (const auto& [desc, rep] : reports)
        for (size_t k = 0; k < rep.relevant_mass_pct.size(); ++k)
            ls << desc << "," << k << "," << rep.relevant_mass_pct[k] << "\n";
}

void write_intervention_figure_csv(const std::vector<InterventionResult>& results,
                                   const std::filesystem::path& path) {
    auto os = open_out(path);
    os << "eval_n_plus,eval_n_minus,train_env,r,em_mean,em_std\n";
    for (const auto& res : results)
        for (const auto& row : res.rows) {
            os << res.env.n_plus << "," << res.env.n_minus << "," << row.train_desc << ",";
            if (row.r)
                os << *row.r;
            else
                os << "no";
            os << "," << row.em_mean << "," << row.em_std << "\n";
        }
}

void write_mixture_csv(const MixtureResult& r, const std::filesystem::path& path) {
    auto os = open_out(path);
    os << "train_mixture,eval_mixture,em_mean,em_std,em_formatted\n";
    for (const auto& c : r.cells)
        os << c.train_desc << "," << c.eval_desc << "," << c.em_mean << "," << c.em_std << ","
           << format_em(c.em_mean, c.em_std) << "\n";
}

}  // namespace fidlab
