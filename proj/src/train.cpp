#include "fidlab/train.hpp"

#include <cmath>

#include "fidlab/error.hpp"
#include "fidlab/numerics.hpp"
#include "fidlab/optim.hpp"
#include "fidlab/rng.hpp"

namespace fidlab {

namespace {

Context sample_for(const Question& q, const std::variant<EnvSpec, MixtureSpec>& env, uint64_t seed,
                   uint64_t step) {
    if (std::holds_alternative<EnvSpec>(env))
        return sample_context(q, std::get<EnvSpec>(env), seed, step);
    return sample_mixture(q, std::get<MixtureSpec>(env), seed, step);
}

// Decoder input [BOS, answer...] and shifted targets [answer..., EOS],
// truncated to the model's answer budget.
struct TeacherForced {
    std::vector<int> dec_input;
    std::vector<int> targets;
};

TeacherForced teacher_forced(const Vocab& vocab, const std::string& answer, int max_answer_len) {
    std::vector<int> ids = vocab.encode(answer);
    if (static_cast<int>(ids.size()) > max_answer_len) ids.resize(static_cast<size_t>(max_answer_len));
    TeacherForced out;
    out.dec_input.push_back(Vocab::bos_id);
    out.dec_input.insert(out.dec_input.end(), ids.begin(), ids.end());
    out.targets = ids;
    out.targets.push_back(Vocab::eos_id);
    return out;
}

std::vector<EnvSpec> components_of(const std::variant<EnvSpec, MixtureSpec>& env) {
    if (std::holds_alternative<EnvSpec>(env)) return {std::get<EnvSpec>(env)};
    return std::get<MixtureSpec>(env).components;
}

}  // namespace

std::string TrainRun::env_desc() const {
    if (std::holds_alternative<EnvSpec>(env)) return to_string(std::get<EnvSpec>(env));
    std::string out = "mix[";
    const auto& comps = std::get<MixtureSpec>(env).components;
    for (size_t i = 0; i < comps.size(); ++i) {
        if (i) out += ",";
        out += to_string(comps[i]);
    }
    return out + "]";
}

namespace {

// Step key reserved for fixed dev contexts drawn through a ContextProvider;
// training steps never reach it.
constexpr uint64_t kDevProviderStep = 0xFFFF'FFFF'0000'0000ull;

double dev_em_impl(const FidModel& model, const Corpus& corpus, const std::vector<size_t>& dev_ids,
                   const std::variant<EnvSpec, MixtureSpec>& env, uint64_t seed, const EmConfig& em,
                   const ContextProvider* provider) {
    if (dev_ids.empty()) return 0.0;
    auto comps = components_of(env);
    size_t n_comps = provider ? 1 : comps.size();
    uint64_t dev_seed = mix_key(seed, "dev-eval");
    double total = 0.0;
    for (size_t ci = 0; ci < n_comps; ++ci) {
        int hits = 0;
        for (size_t qi : dev_ids) {
            const Question& q = corpus.questions[qi];
            Context ctx = provider ? (*provider)(q, kDevProviderStep)
                                   : sample_context(q, comps[ci], dev_seed, ci);
            std::string pred = greedy_decode(model, q.text, ctx);
            hits += exact_match(pred, q.gold_answers, em) ? 1 : 0;
        }
        total += static_cast<double>(hits) / static_cast<double>(dev_ids.size());
    }
    return total / static_cast<double>(n_comps);
}

}  // namespace

double dev_exact_match(const FidModel& model, const Corpus& corpus,
                       const std::vector<size_t>& dev_ids,
                       const std::variant<EnvSpec, MixtureSpec>& env, uint64_t seed,
                       const EmConfig& em) {
    return dev_em_impl(model, corpus, dev_ids, env, seed, em, nullptr);
}

double probe_loss(const FidModel& model, const Corpus& corpus, const std::vector<size_t>& ids,
                  const std::variant<EnvSpec, MixtureSpec>& env, uint64_t seed,
                  TargetMode target_mode) {
    if (ids.empty()) return 0.0;
    uint64_t probe_seed = mix_key(seed, "probe-loss");
    double total = 0.0;
    auto& m = const_cast<FidModel&>(model);
    for (size_t qi : ids) {
        const Question& q = corpus.questions[qi];
        Context ctx = sample_for(q, env, probe_seed, 0);
        auto tstream = make_stream(probe_seed, "probe.target", fnv1a64(q.id));
        auto pick = pick_target_answer(q, ctx, tstream, target_mode);
        auto tf = teacher_forced(model.vocab, pick.answer, model.cfg.max_answer_len);
        Graph<float> g;
        auto fwd = fid_graph_forward(g, m, q.text, ctx, tf.dec_input, nullptr, nullptr,
                                     /*with_grad=*/false);
        total += static_cast<double>(g.val(g.cross_entropy(fwd.logits, tf.targets)).data[0]);
    }
    return total / static_cast<double>(ids.size());
}

TrainResult train(const TrainRun& run, const Corpus& corpus, const SplitIds& split,
                  const ModelConfig& model_cfg, const Vocab& vocab,
                  const ContextProvider* provider, std::ostream* log) {
    if (split.train.empty()) throw DataError("train: empty training split");
    ModelConfig cfg = model_cfg;
    cfg.seed = run.seed;
    FidModel model = FidModel::init(cfg, vocab);
    OptimizerConfig ocfg;
    ocfg.weight_decay = run.hp.weight_decay;
    ocfg.max_grad_norm = run.hp.max_grad_norm;
    Optimizer<float> opt(ocfg);

    TrainResult res;
    auto snapshot = [&](int64_t step, double em) {
        CheckpointMeta meta;
        meta.seed = run.seed;
        meta.step = step;
        meta.dev_em = em;
        meta.train_env = run.env_desc();
        return Checkpoint::from_model(model, meta);
    };
    auto eval_dev = [&] {
        return dev_em_impl(model, corpus, split.dev, run.env, run.seed, run.hp.em, provider);
    };

    res.best_dev_em = eval_dev();
    res.best_step = 0;
    res.best = snapshot(0, res.best_dev_em);
    res.dev_curve.push_back({0, res.best_dev_em});

    for (int64_t step = 0; step < run.hp.max_steps; ++step) {
        auto batch_stream = make_stream(run.seed, "train.batch", static_cast<uint64_t>(step));
        auto picks = sample_without_replacement(
            batch_stream, split.train.size(),
            std::min<size_t>(static_cast<size_t>(run.hp.batch_size), split.train.size()));

        model.params.zero_grads();
        double batch_loss = 0.0;
        bool bad_loss = false;
        for (size_t pi : picks) {
            const Question& q = corpus.questions[split.train[pi]];
            Context ctx = provider ? (*provider)(q, static_cast<uint64_t>(step))
                                   : sample_for(q, run.env, run.seed, static_cast<uint64_t>(step));
            auto tstream =
                make_stream(run.seed, "train.target", fnv1a64(q.id), static_cast<uint64_t>(step));
            auto pick = pick_target_answer(q, ctx, tstream, run.hp.target_mode);
            auto tf = teacher_forced(vocab, pick.answer, cfg.max_answer_len);

            Graph<float> g;
            auto fwd =
                fid_graph_forward(g, model, q.text, ctx, tf.dec_input, nullptr, nullptr, true);
            auto loss_node = g.cross_entropy(fwd.logits, tf.targets);
            double loss = static_cast<double>(g.val(loss_node).data[0]);
            if (!std::isfinite(loss)) {
                res.aborted_nan = true;
                res.abort_reason = "non-finite loss at step " + std::to_string(step);
                bad_loss = true;
                break;
            }
            batch_loss += loss;
            g.backward(loss_node);
        }
        if (bad_loss) break;
        batch_loss /= static_cast<double>(picks.size());
        model.params.scale_grads(1.0f / static_cast<float>(picks.size()));

        double lr = lr_at(opt.step_count(), run.hp.warmup_steps, run.hp.base_lr);
        try {
            opt.step(model.params, lr);
        } catch (const NumericError& e) {
            res.aborted_nan = true;
            res.abort_reason = e.what();
            break;
        }
        res.loss_curve.push_back({step, batch_loss});

        bool at_eval = (step + 1) % run.hp.eval_every == 0 || step + 1 == run.hp.max_steps;
        if (at_eval) {
            double em = eval_dev();
            res.dev_curve.push_back({step + 1, em});
            if (em > res.best_dev_em) {
                res.best_dev_em = em;
                res.best_step = step + 1;
                res.best = snapshot(step + 1, em);
            }
            if (log)
                (*log) << "step " << (step + 1) << " loss " << batch_loss << " dev_em " << em
                       << "\n";
        }
    }
    return res;
}

}  // namespace fidlab
