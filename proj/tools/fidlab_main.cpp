// fidlab: desk-scale Fusion-in-Decoder laboratory CLI.
//
// Subcommands cover corpus generation/ingestion, relevance annotation,
// training, evaluation, the quality/quantity/mixture sweeps, attention
// probing, the attention intervention, and temperature adaptation.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fidlab/annotator.hpp"
#include "fidlab/attention_control.hpp"
#include "fidlab/config.hpp"
#include "fidlab/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fidlab;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_dir;
    std::optional<int> workers;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--seed", args.seed, "global seed (overrides the config)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--workers", args.workers, "parallel workers for sweeps/evaluation");
}

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = RunConfig::from_file(args.config_path);
    if (args.seed) cfg.seed = *args.seed;  // flags override config scalars
    if (args.workers) {
        cfg.sweep.workers = *args.workers;
        cfg.eval.threads = *args.workers;
    }
    return cfg;
}

fs::path require_out(const CommonArgs& args) {
    if (args.out_dir.empty()) throw ConfigError("--out <dir> is required for this command");
    fs::path out(args.out_dir);
    fs::create_directories(out);
    return out;
}

fs::path require_path(const std::string& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string("config paths.") + what + " is required");
    if (!fs::exists(p)) throw DataError(std::string(what) + " path does not exist: " + p);
    return p;
}

struct LoadedCorpus {
    RawCorpus raw;
    Corpus corpus;
    Vocab vocab;
    ModelConfig model_cfg;
};

// Loads corpus + labels and prepares the closed vocabulary and model config.
LoadedCorpus load_annotated(const RunConfig& cfg) {
    LoadedCorpus out;
    out.raw = load_fid_json(require_path(cfg.paths.corpus, "corpus"));
    auto labels = load_labels_jsonl(require_path(cfg.paths.labels, "labels"));
    out.corpus = assemble_corpus(out.raw, labels);
    out.vocab = build_vocab(cfg.corpus);
    out.model_cfg = cfg.model;
    out.model_cfg.vocab_size = out.vocab.size();
    return out;
}

SweepOptions sweep_options(const RunConfig& cfg) {
    SweepOptions o;
    o.seeds = cfg.sweep.seeds;
    o.seed_base = cfg.require_seed();
    o.n_workers = cfg.sweep.workers;
    o.hp = cfg.train;
    o.hp.em = cfg.em_config();
    o.eval.n_passage_sets = cfg.eval.n_passage_sets;
    o.eval.eval_seed = mix_key(cfg.require_seed(), "eval");
    o.eval.em = cfg.em_config();
    o.eval.n_threads = cfg.eval.threads;
    return o;
}

std::vector<EnvSpec> eval_envs_or(const RunConfig& cfg, std::vector<EnvSpec> fallback) {
    return cfg.eval.envs.empty() ? fallback : cfg.eval.envs;
}

void write_json(const json& doc, const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << doc.dump(1) << "\n";
}

// ---- subcommand bodies ----

int cmd_gen_corpus(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    CorpusSpec spec = cfg.corpus;
    spec.seed = cfg.require_seed();
    auto gen = generate_corpus(spec);
    save_fid_json(gen.raw, out / "corpus.json");
    save_labels_jsonl(gen.labels, out / "labels.jsonl");
    cfg.write_resolved(out);
    std::cout << "wrote " << gen.raw.questions.size() << " questions to " << (out / "corpus.json")
              << "\n";
    return 0;
}

int cmd_ingest(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    RawCorpus raw = load_fid_json(require_path(cfg.paths.corpus, "corpus"));
    size_t n_ctxs = 0, n_contains = 0;
    for (const auto& q : raw.questions) {
        n_ctxs += q.ctxs.size();
        for (const auto& p : q.ctxs)
            n_contains += contains_answer(p.text, q.answers) ? 1 : 0;
    }
    json stats = {{"questions", raw.questions.size()},
                  {"passages", n_ctxs},
                  {"contains_answer_passages", n_contains}};
    if (!cfg.paths.labels.empty()) {
        auto labels = load_labels_jsonl(require_path(cfg.paths.labels, "labels"));
        Corpus corpus = assemble_corpus(raw, labels);
        size_t min_rel = SIZE_MAX, min_irr = SIZE_MAX;
        for (const auto& q : corpus.questions) {
            min_rel = std::min(min_rel, q.relevant_pool.size());
            min_irr = std::min(min_irr, q.irrelevant_pool.size());
        }
        stats["min_relevant_pool"] = min_rel;
        stats["min_irrelevant_pool"] = min_irr;
    }
    write_json(stats, out / "ingest_stats.json");
    cfg.write_resolved(out);
    std::cout << stats.dump(1) << "\n";
    return 0;
}

int cmd_annotate(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    RawCorpus raw = load_fid_json(require_path(cfg.paths.corpus, "corpus"));

    AnnotatorOptions aopts;
    aopts.model = cfg.model;
    aopts.vocab = build_vocab(cfg.corpus);
    aopts.model.vocab_size = aopts.vocab.size();
    aopts.hp = cfg.train;
    aopts.hp.max_steps = cfg.annotate.max_steps;
    aopts.hp.em = cfg.em_config();
    aopts.seed = cfg.require_seed();
    aopts.ctx_size = cfg.annotate.ctx_size;
    aopts.dual_setting = cfg.annotate.dual_setting;
    aopts.em = cfg.em_config();

    CrossAnnotateOptions copts;
    copts.split_seed = cfg.require_seed();
    copts.eval_frac = cfg.annotate.eval_frac;
    copts.dev_frac = cfg.annotate.dev_frac;
    copts.min_half_size = static_cast<size_t>(cfg.annotate.min_half_size);
    copts.em = cfg.em_config();

    auto annotated = cross_annotate(raw, copts, make_fid_annotator_trainer(aopts));
    save_manifest_jsonl(annotated.manifest, out / "annotation_manifest.jsonl");
    save_labels_jsonl(annotated.manifest.records, out / "labels.jsonl");
    cfg.write_resolved(out);
    std::cout << "annotated " << annotated.corpus.questions.size() << " questions (halves "
              << annotated.manifest.d0_train << "/" << annotated.manifest.d0_dev << " and "
              << annotated.manifest.d1_train << "/" << annotated.manifest.d1_dev << ", eval "
              << annotated.manifest.d_eval << ")\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);

    TrainRun run;
    run.env = cfg.train_env();
    run.hp = cfg.train;
    run.hp.em = cfg.em_config();
    run.seed = cfg.require_seed();
    run.name = "train";
    auto res = train(run, data.corpus, split, data.model_cfg, data.vocab, nullptr, &std::cout);

    save_checkpoint(res.best, out / "checkpoint.fidl");
    std::ofstream log(out / "train_log.csv");
    log << "step,dev_em\n";
    for (auto [s, em] : res.dev_curve) log << s << "," << em << "\n";
    std::ofstream loss_log(out / "loss_log.csv");
    loss_log << "step,loss\n";
    for (auto [s, l] : res.loss_curve) loss_log << s << "," << l << "\n";
    cfg.write_resolved(out);
    if (res.aborted_nan) {
        std::cerr << "training aborted: " << res.abort_reason
                  << " (best checkpoint so far retained)\n";
        return 4;
    }
    std::cout << "best dev EM " << res.best_dev_em << " at step " << res.best_step << "\n";
    return 0;
}

std::vector<Checkpoint> load_checkpoints(const RunConfig& cfg) {
    std::vector<std::string> paths = cfg.paths.checkpoints;
    if (paths.empty() && !cfg.paths.checkpoint.empty()) paths.push_back(cfg.paths.checkpoint);
    if (paths.empty())
        throw ConfigError("config paths.checkpoint or paths.checkpoints is required");
    std::vector<Checkpoint> out;
    for (const auto& p : paths) out.push_back(load_checkpoint(require_path(p, "checkpoint")));
    return out;
}

int cmd_eval(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);
    auto ckpts = load_checkpoints(cfg);

    std::vector<FidModel> models;
    std::vector<const FidModel*> ptrs;
    for (const auto& c : ckpts) models.push_back(c.to_model());
    for (const auto& m : models) ptrs.push_back(&m);

    SweepOptions so = sweep_options(cfg);
    std::vector<SweepCell> cells;
    bool first = true;
    for (const auto& env : eval_envs_or(cfg, {cfg.env})) {
        auto r = evaluate_models(ptrs, env, data.corpus, split.eval, so.eval);
        std::cout << to_string(env) << " EM " << format_em(r.mean(), r.stddev()) << "\n";
        write_records_jsonl(r, ckpts.front().meta.train_env, out / "per_question.jsonl", !first);
        first = false;
        cells.push_back({ckpts.front().meta.train_env, env, std::move(r)});
    }
    write_eval_csv(cells, out / "eval.csv");
    cfg.write_resolved(out);
    return 0;
}

int cmd_sweep_quality(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);
    auto res = quality_sweep(cfg.sweep.n, cfg.sweep.n_plus, data.corpus, split, data.model_cfg,
                             data.vocab, sweep_options(cfg));
    write_eval_csv(res.cells, out / "sweep_quality.csv");
    write_quality_figure_csv(res, out / "figure1_data.csv");
    cfg.write_resolved(out);
    std::cout << "wrote " << res.cells.size() << " cells\n";
    return 0;
}

int cmd_sweep_quantity(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);
    auto res = quantity_sweep(cfg.sweep.k, cfg.sweep.n_plus, data.corpus, split, data.model_cfg,
                              data.vocab, sweep_options(cfg));
    write_eval_csv(res.cells, out / "sweep_quantity.csv");
    write_quantity_figure_csv(res, out / "figure2_data.csv");
    for (const auto& s : res.skipped)
        std::cout << "skipped " << s.desc << ": " << s.reason << "\n";
    cfg.write_resolved(out);
    std::cout << "wrote " << res.cells.size() << " cells (" << res.skipped.size() << " skipped)\n";
    return 0;
}

int cmd_mixture(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);
    std::vector<EnvSpec> comps = cfg.mixture;
    if (comps.empty()) throw ConfigError("mixture command requires a nonempty \"mixture\" list");
    auto res = mixture_experiment(comps, data.corpus, split, data.model_cfg, data.vocab,
                                  sweep_options(cfg));
    write_mixture_csv(res, out / "mixture.csv");
    cfg.write_resolved(out);
    std::cout << "wrote " << res.cells.size() << " mixture cells\n";
    return 0;
}

int cmd_probe_attention(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);
    auto ckpts = load_checkpoints(cfg);
    SweepOptions so = sweep_options(cfg);

    std::vector<std::pair<std::string, AttentionReport>> reports;
    for (const auto& ck : ckpts) {
        FidModel model = ck.to_model();
        for (const auto& env : eval_envs_or(cfg, {cfg.adapt.env})) {
            auto rep = attention_analysis(model, env, data.corpus, split.eval, so.eval);
            std::string desc = ck.meta.train_env + "@" + to_string(env) + "#s" +
                               std::to_string(ck.meta.seed);
            for (size_t k = 0; k < rep.relevant_mass_pct.size(); ++k)
                std::cout << desc << " layer " << k << " relevant mass "
                          << rep.relevant_mass_pct[k] << "%\n";
            reports.emplace_back(std::move(desc), std::move(rep));
        }
    }
    write_attention_figure_csv(reports, out / "figure3_data.csv");
    cfg.write_resolved(out);
    return 0;
}

int cmd_intervene(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);
    auto ckpts = load_checkpoints(cfg);
    SweepOptions so = sweep_options(cfg);

    // group checkpoints trained in the same environment (seeds of one model)
    std::vector<TrainedGroup> groups;
    for (auto& ck : ckpts) {
        TrainedGroup* g = nullptr;
        for (auto& existing : groups)
            if (existing.desc == ck.meta.train_env) g = &existing;
        if (!g) {
            groups.push_back({ck.meta.train_env, EnvSpec{}, {}});
            g = &groups.back();
        }
        g->seeds.push_back(std::move(ck));
    }

    std::vector<InterventionResult> results;
    for (const auto& env : eval_envs_or(cfg, {cfg.adapt.env})) {
        auto r = intervention_experiment(groups, env, cfg.intervene.r, data.corpus, split.eval,
                                         so.eval);
        std::cout << to_string(env) << " baseline spread " << r.spread_baseline << "\n";
        for (auto [rv, sp] : r.spread_by_r)
            std::cout << to_string(env) << " r=" << rv << " spread " << sp << "\n";
        results.push_back(std::move(r));
    }
    write_intervention_figure_csv(results, out / "figure4_data.csv");
    cfg.write_resolved(out);
    return 0;
}

int cmd_adapt_temperature(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    auto out = require_out(args);
    auto data = load_annotated(cfg);
    SplitIds split = split_corpus(data.corpus, cfg.split.salt, cfg.split.train_frac, cfg.split.dev_frac);
    auto ckpts = load_checkpoints(cfg);
    SweepOptions so = sweep_options(cfg);

    json all = json::array();
    json fig5 = json::array();
    for (const auto& ck : ckpts) {
        FidModel model = ck.to_model();
        auto res = temperature_search(model, cfg.adapt.env, data.corpus, split.eval,
                                      cfg.adapt.grid, cfg.adapt.fold_salt, so.eval);
        json folds = json::array();
        for (int f = 0; f < 2; ++f) {
            const auto& fold = res.folds[static_cast<size_t>(f)];
            json grid = json::array();
            for (auto [t, em] : fold.grid_em) grid.push_back({{"T", t}, {"em", em}});
            folds.push_back({{"fold", f},
                             {"t_star", fold.t_star},
                             {"selection_em", fold.selection_em},
                             {"adapted_em", fold.adapted_em},
                             {"unadapted_em", fold.unadapted_em},
                             {"n_heldout_questions", fold.n_heldout_questions},
                             {"grid", grid}});
        }
        all.push_back({{"train_env", ck.meta.train_env},
                       {"seed", ck.meta.seed},
                       {"eval_env", to_string(cfg.adapt.env)},
                       {"folds", folds},
                       {"combined_adapted_em", res.combined_adapted_em},
                       {"combined_unadapted_em", res.combined_unadapted_em}});
        std::cout << ck.meta.train_env << " seed " << ck.meta.seed << ": T*=["
                  << res.folds[0].t_star << "," << res.folds[1].t_star << "] adapted "
                  << res.combined_adapted_em << " unadapted " << res.combined_unadapted_em << "\n";
        for (int f = 0; f < 2; ++f)
            fig5.push_back({{"train_env", ck.meta.train_env},
                            {"seed", ck.meta.seed},
                            {"fold", f},
                            {"t_star", res.folds[static_cast<size_t>(f)].t_star},
                            {"adapted_em", res.folds[static_cast<size_t>(f)].adapted_em},
                            {"unadapted_em", res.folds[static_cast<size_t>(f)].unadapted_em}});
    }
    write_json(all, out / "temperature_search.json");
    write_json(fig5, out / "figure5_data.json");
    cfg.write_resolved(out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fidlab: desk-scale Fusion-in-Decoder laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    struct Sub {
        const char* name;
        const char* desc;
        int (*fn)(const CommonArgs&);
        CommonArgs args;
    };
    std::vector<Sub> subs = {
        {"gen-corpus", "generate the synthetic corpus with ground-truth labels", cmd_gen_corpus, {}},
        {"ingest", "validate and summarize a FiD-schema JSON corpus", cmd_ingest, {}},
        {"annotate", "two-model cross-annotation of passage relevance", cmd_annotate, {}},
        {"train", "train one model in a controlled environment or mixture", cmd_train, {}},
        {"eval", "evaluate checkpoints with repeated passage sampling", cmd_eval, {}},
        {"sweep-quality", "train/eval across context qualities at fixed n", cmd_sweep_quality, {}},
        {"sweep-quantity", "train/eval across context quantities at fixed k", cmd_sweep_quantity, {}},
        {"mixture", "train/eval across mixtures of environments", cmd_mixture, {}},
        {"probe-attention", "aggregated cross-attention analyses", cmd_probe_attention, {}},
        {"intervene", "attention intervention experiment over r values", cmd_intervene, {}},
        {"adapt-temperature", "2-fold cross-validated temperature search", cmd_adapt_temperature, {}},
    };
    for (auto& s : subs) add_common(app.add_subcommand(s.name, s.desc), s.args);

    CLI11_PARSE(app, argc, argv);

    for (auto& s : subs) {
        if (!app.get_subcommand(s.name)->parsed()) continue;
        try {
            return s.fn(s.args);
        } catch (const ConfigError& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return 2;
        } catch (const DataError& e) {
            std::cerr << "data error: " << e.what() << "\n";
            return 3;
        } catch (const NumericError& e) {
            std::cerr << "numerical abort: " << e.what() << "\n";
            return 4;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    return 1;
}
