#include "fidlab/annotator.hpp"

#include <memory>

#include "fidlab/error.hpp"
#include "fidlab/rng.hpp"

namespace fidlab {

namespace {

// Pools here are a storage detail: contains-answer passages land in
// discarded_pool and the rest in irrelevant_pool (no labels exist yet).
Corpus unlabeled_corpus(const RawCorpus& raw) { return assemble_corpus(raw, {}); }

Context sample_unlabeled(const Question& q, int ctx_size, bool pos_only, uint64_t seed,
                         uint64_t step) {
    // answer-bearing passages are in discarded_pool (see unlabeled_corpus)
    const auto& with_answer = q.discarded_pool;
    const auto& without = q.irrelevant_pool;
    if (with_answer.empty())
        throw DataError("annotator: question " + q.id + " has no answer-bearing passage");
    uint64_t qh = fnv1a64(q.id);
    Context ctx;
    if (pos_only) {
        auto stream = make_stream(seed, "annot.pos", qh, step);
        size_t n = std::min<size_t>(static_cast<size_t>(ctx_size), with_answer.size());
        for (size_t idx : sample_without_replacement(stream, with_answer.size(), n)) {
            ctx.passages.push_back(with_answer[idx]);
            ctx.relevance_mask.push_back(true);
        }
        return ctx;
    }
    auto pos_stream = make_stream(seed, "annot.all.pos", qh, step);
    ctx.passages.push_back(with_answer[uniform_index(pos_stream, with_answer.size())]);
    ctx.relevance_mask.push_back(true);
    auto rest_stream = make_stream(seed, "annot.all.rest", qh, step);
    size_t n_rest = std::min<size_t>(static_cast<size_t>(ctx_size) - 1, without.size());
    for (size_t idx : sample_without_replacement(rest_stream, without.size(), n_rest)) {
        ctx.passages.push_back(without[idx]);
        ctx.relevance_mask.push_back(false);
    }
    return ctx;
}

FidModel train_annotator(const RawCorpus& train_half, const RawCorpus& dev_half,
                         const AnnotatorOptions& opts, bool pos_only, uint64_t seed) {
    Corpus combined = unlabeled_corpus(train_half);
    size_t n_train = combined.questions.size();
    {
        Corpus dev_c = unlabeled_corpus(dev_half);
        for (auto& q : dev_c.questions) combined.questions.push_back(std::move(q));
    }
    SplitIds split;
    for (size_t i = 0; i < n_train; ++i) split.train.push_back(i);
    for (size_t i = n_train; i < combined.questions.size(); ++i) split.dev.push_back(i);

    TrainRun run;
    run.env = EnvSpec{0, 1};  // placeholder; contexts come from the provider
    run.hp = opts.hp;
    run.seed = seed;
    run.name = pos_only ? "annotator-pos" : "annotator-all";

    ContextProvider provider = [opts, pos_only, seed](const Question& q, uint64_t step) {
        return sample_unlabeled(q, opts.ctx_size, pos_only, seed, step);
    };

    ModelConfig cfg = opts.model;
    cfg.vocab_size = opts.vocab.size();
    auto res = train(run, combined, split, cfg, opts.vocab, &provider);
    if (res.aborted_nan)
        throw NumericError("annotator training aborted: " + res.abort_reason);
    return res.best.to_model();
}

}  // namespace

AnnotatorTrainer make_fid_annotator_trainer(const AnnotatorOptions& opts) {
    return [opts](const RawCorpus& train_half, const RawCorpus& dev_half) -> QaPredict {
        uint64_t all_seed = mix_key(opts.seed, "annotator.all", fnv1a64(
            train_half.questions.empty() ? "" : train_half.questions.front().id));
        auto all_model = std::make_shared<FidModel>(
            train_annotator(train_half, dev_half, opts, /*pos_only=*/false, all_seed));

        auto predict_single = [](const FidModel& m, const Question& q, const Passage& p) {
            Context ctx;
            ctx.passages.push_back(p);
            ctx.relevance_mask.push_back(p.contains_answer);
            return greedy_decode(m, q.text, ctx);
        };

        if (!opts.dual_setting) {
            return [all_model, predict_single](const Question& q, const Passage& p) {
                return predict_single(*all_model, q, p);
            };
        }
        uint64_t pos_seed = mix_key(opts.seed, "annotator.pos", fnv1a64(
            train_half.questions.empty() ? "" : train_half.questions.front().id));
        auto pos_model = std::make_shared<FidModel>(
            train_annotator(train_half, dev_half, opts, /*pos_only=*/true, pos_seed));
        EmConfig em = opts.em;
        // Stricter criterion: relevant only when both settings reproduce a
        // gold answer; otherwise return a non-matching prediction.
        return [all_model, pos_model, predict_single, em](const Question& q, const Passage& p) {
            std::string a = predict_single(*all_model, q, p);
            std::string b = predict_single(*pos_model, q, p);
            if (exact_match(a, q.gold_answers, em) && exact_match(b, q.gold_answers, em)) return a;
            return std::string();
        };
    };
}

}  // namespace fidlab
