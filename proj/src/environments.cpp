#include "fidlab/environments.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "fidlab/error.hpp"
#include "fidlab/rng.hpp"

namespace fidlab {

PassagePartition classify_passages(const Question& q, std::span<const Passage> passages,
                                   const QaPredict& qa_predict, const EmConfig& em) {
    PassagePartition out;
    for (const auto& p : passages) {
        if (!contains_answer(p.text, q.gold_answers)) {
            auto cp = p;
            cp.contains_answer = false;
            out.irrelevant.push_back(std::move(cp));
            continue;
        }
        auto cp = p;
        cp.contains_answer = true;
        if (exact_match(qa_predict(q, p), q.gold_answers, em))
            out.relevant.push_back(std::move(cp));
        else
            out.discarded.push_back(std::move(cp));
    }
    return out;
}

namespace {

std::vector<Passage> draw(const std::vector<Passage>& pool, size_t n, std::mt19937_64& stream,
                          const std::string& pool_name, const Question& q) {
    if (pool.size() < n)
        throw DataError("insufficient " + pool_name + " pool for question " + q.id + ": need " +
                        std::to_string(n) + ", have " + std::to_string(pool.size()));
    std::vector<Passage> out;
    out.reserve(n);
    for (size_t idx : sample_without_replacement(stream, pool.size(), n))
        out.push_back(pool[idx]);
    return out;
}

}  // namespace

Context sample_context(const Question& q, const EnvSpec& spec, uint64_t seed, uint64_t step) {
    if (spec.n_plus < 0 || spec.n_minus < 0 || spec.total() < 1)
        throw std::invalid_argument("sample_context: invalid environment " + to_string(spec));
    uint64_t qh = fnv1a64(q.id);
    auto rel_stream = make_stream(seed, "env.rel", qh, step);
    auto irr_stream = make_stream(seed, "env.irr", qh, step);
    Context ctx;
    for (auto& p : draw(q.relevant_pool, static_cast<size_t>(spec.n_plus), rel_stream, "relevant", q)) {
        ctx.passages.push_back(std::move(p));
        ctx.relevance_mask.push_back(true);
    }
    for (auto& p : draw(q.irrelevant_pool, static_cast<size_t>(spec.n_minus), irr_stream, "irrelevant", q)) {
        ctx.passages.push_back(std::move(p));
        ctx.relevance_mask.push_back(false);
    }
    return ctx;
}

Context sample_mixture(const Question& q, const MixtureSpec& mix, uint64_t seed, uint64_t step) {
    if (mix.components.empty()) throw std::invalid_argument("sample_mixture: empty mixture");
    auto pick = make_stream(seed, "env.mix", fnv1a64(q.id), step);
    const EnvSpec& spec = mix.components[uniform_index(pick, mix.components.size())];
    return sample_context(q, spec, seed, step);
}

double context_quality(const Context& ctx) {
    if (ctx.passages.empty()) throw std::invalid_argument("context_quality: empty context");
    int n_rel = 0;
    for (bool b : ctx.relevance_mask) n_rel += b ? 1 : 0;
    return static_cast<double>(n_rel) / static_cast<double>(ctx.passages.size());
}

int context_quantity(const Context& ctx) {
    if (ctx.passages.empty()) throw std::invalid_argument("context_quantity: empty context");
    return static_cast<int>(ctx.passages.size());
}

uint32_t question_bucket(const std::string& question_id, uint64_t salt, uint32_t n_buckets) {
    return static_cast<uint32_t>(mix_key(salt, "split", fnv1a64(question_id)) % n_buckets);
}

SplitIds split_corpus(const Corpus& corpus, uint64_t salt, double train_frac, double dev_frac) {
    if (train_frac <= 0 || dev_frac < 0 || train_frac + dev_frac >= 1.0)
        throw ConfigError("split_corpus: fractions must satisfy 0 < train, 0 <= dev, train+dev < 1");
    SplitIds out;
    const uint32_t kBuckets = 10000;
    auto t_cut = static_cast<uint32_t>(train_frac * kBuckets);
    auto d_cut = static_cast<uint32_t>((train_frac + dev_frac) * kBuckets);
    for (size_t i = 0; i < corpus.questions.size(); ++i) {
        uint32_t b = question_bucket(corpus.questions[i].id, salt, kBuckets);
        if (b < t_cut)
            out.train.push_back(i);
        else if (b < d_cut)
            out.dev.push_back(i);
        else
            out.eval.push_back(i);
    }
    return out;
}

namespace {

// Annotate one set of questions with a predictor; contains-answer passages go
// through the prediction-match filter, the rest are irrelevant by rule.
void annotate_into(const RawCorpus& raw, const std::vector<size_t>& ids, const QaPredict& predict,
                   const EmConfig& em, Corpus& out, std::vector<LabelRecord>& records) {
    for (size_t i : ids) {
        const auto& rq = raw.questions[i];
        Question q;
        q.id = rq.id;
        q.text = rq.text;
        q.gold_answers = rq.answers;
        std::vector<Passage> passages;
        for (size_t j = 0; j < rq.ctxs.size(); ++j)
            passages.push_back({passage_id_of(rq.id, j), rq.ctxs[j].title, rq.ctxs[j].text, false});
        auto part = classify_passages(q, passages, predict, em);
        for (const auto& p : part.relevant) records.push_back({q.id, p.id, PassageLabel::relevant});
        for (const auto& p : part.irrelevant) records.push_back({q.id, p.id, PassageLabel::irrelevant});
        for (const auto& p : part.discarded) records.push_back({q.id, p.id, PassageLabel::discarded});
        q.relevant_pool = std::move(part.relevant);
        q.irrelevant_pool = std::move(part.irrelevant);
        q.discarded_pool = std::move(part.discarded);
        out.questions.push_back(std::move(q));
    }
}

RawCorpus subset(const RawCorpus& raw, const std::vector<size_t>& ids) {
    RawCorpus out;
    for (size_t i : ids) out.questions.push_back(raw.questions[i]);
    return out;
}

}  // namespace

CrossAnnotated cross_annotate(const RawCorpus& corpus, const CrossAnnotateOptions& opt,
                              const AnnotatorTrainer& trainer) {
    // eval questions are held out entirely; the rest are split into halves
    std::vector<size_t> eval_ids, half_ids[2];
    for (size_t i = 0; i < corpus.questions.size(); ++i) {
        uint32_t b = question_bucket(corpus.questions[i].id, opt.split_seed, 10000);
        if (b < static_cast<uint32_t>(opt.eval_frac * 10000)) {
            eval_ids.push_back(i);
        } else {
            uint32_t h = question_bucket(corpus.questions[i].id, opt.split_seed ^ 0x5eedu, 2);
            half_ids[h].push_back(i);
        }
    }
    // within-half train/dev split
    std::vector<size_t> train_ids[2], dev_ids[2];
    for (int h = 0; h < 2; ++h) {
        for (size_t i : half_ids[h]) {
            uint32_t b = question_bucket(corpus.questions[i].id, opt.split_seed ^ 0xd00du, 10000);
            if (b < static_cast<uint32_t>(opt.dev_frac * 10000))
                dev_ids[h].push_back(i);
            else
                train_ids[h].push_back(i);
        }
        if (train_ids[h].size() < opt.min_half_size)
            throw DataError("cross_annotate: half " + std::to_string(h) + " has only " +
                            std::to_string(train_ids[h].size()) + " training questions (need " +
                            std::to_string(opt.min_half_size) + ")");
    }

    QaPredict m0 = trainer(subset(corpus, train_ids[0]), subset(corpus, dev_ids[0]));
    QaPredict m1 = trainer(subset(corpus, train_ids[1]), subset(corpus, dev_ids[1]));

    CrossAnnotated out;
    out.manifest.d0_train = train_ids[0].size();
    out.manifest.d0_dev = dev_ids[0].size();
    out.manifest.d1_train = train_ids[1].size();
    out.manifest.d1_dev = dev_ids[1].size();
    out.manifest.d_eval = eval_ids.size();

    // each half is annotated by the model trained on the other half; the
    // held-out evaluation questions are annotated by model 0
    std::vector<size_t> side0 = train_ids[0];
    side0.insert(side0.end(), dev_ids[0].begin(), dev_ids[0].end());
    std::vector<size_t> side1 = train_ids[1];
    side1.insert(side1.end(), dev_ids[1].begin(), dev_ids[1].end());
    annotate_into(corpus, side0, m1, opt.em, out.corpus, out.manifest.records);
    annotate_into(corpus, side1, m0, opt.em, out.corpus, out.manifest.records);
    annotate_into(corpus, eval_ids, m0, opt.em, out.corpus, out.manifest.records);

    // restore the input question order
    std::unordered_map<std::string, size_t> rank;
    for (size_t i = 0; i < corpus.questions.size(); ++i) rank[corpus.questions[i].id] = i;
    std::sort(out.corpus.questions.begin(), out.corpus.questions.end(),
              [&](const Question& a, const Question& b) { return rank[a.id] < rank[b.id]; });
    return out;
}

void save_manifest_jsonl(const AnnotationManifest& m, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write manifest file: " + path.string());
    nlohmann::json head = {{"d0_train", m.d0_train}, {"d0_dev", m.d0_dev},   {"d1_train", m.d1_train},
                           {"d1_dev", m.d1_dev},     {"d_eval", m.d_eval}};
    os << head.dump() << "\n";
    for (const auto& r : m.records) {
        nlohmann::json rec = {{"question_id", r.question_id},
                              {"passage_id", r.passage_id},
                              {"label", to_string(r.label)}};
        os << rec.dump() << "\n";
    }
}

}  // namespace fidlab
