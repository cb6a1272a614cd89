#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fidlab/corpus.hpp"
#include "fidlab/metrics.hpp"
#include "fidlab/types.hpp"

namespace fidlab {

// ---- relevance classification ----

// Single-passage QA oracle: (question, passage) -> predicted answer text.
using QaPredict = std::function<std::string(const Question&, const Passage&)>;

struct PassagePartition {
    std::vector<Passage> relevant;
    std::vector<Passage> irrelevant;
    std::vector<Passage> discarded;
};

// Partition rules: contains-answer && prediction matches -> relevant;
// !contains-answer -> irrelevant (the predictor is not consulted);
// contains-answer && prediction mismatch -> discarded.
PassagePartition classify_passages(const Question& q, std::span<const Passage> passages,
                                   const QaPredict& qa_predict, const EmConfig& em = {});

// ---- controlled environment sampling ----

// Draws exactly n_plus relevant and n_minus irrelevant passages without
// replacement. Relevant and irrelevant picks use independent streams keyed by
// (seed, question id, step), so the relevant draw does not depend on n_minus
// and every training step resamples reproducibly.
Context sample_context(const Question& q, const EnvSpec& spec, uint64_t seed, uint64_t step);

// Uniformly picks a component, then samples it.
Context sample_mixture(const Question& q, const MixtureSpec& mix, uint64_t seed, uint64_t step);

double context_quality(const Context& ctx);
int context_quantity(const Context& ctx);

// ---- question splits (hash-based, order-independent) ----

// Stable assignment of a question to one of n_buckets.
uint32_t question_bucket(const std::string& question_id, uint64_t salt, uint32_t n_buckets);

struct SplitIds {
    std::vector<size_t> train, dev, eval;  // indices into corpus.questions
};

// Deterministic train/dev/eval split by question-id hash with the given
// fractions (eval gets the remainder).
SplitIds split_corpus(const Corpus& corpus, uint64_t salt, double train_frac, double dev_frac);

// ---- two-model cross-annotation ----

struct AnnotationManifest {
    // split bookkeeping, mirroring the four train/dev sets used to fit the
    // two annotator models plus the held-out evaluation set
    size_t d0_train = 0, d0_dev = 0, d1_train = 0, d1_dev = 0, d_eval = 0;
    std::vector<LabelRecord> records;
};

struct CrossAnnotateOptions {
    uint64_t split_seed = 0;
    double eval_frac = 0.2;    // held out from both halves, annotated by model 0
    double dev_frac = 0.125;   // within-half dev share
    size_t min_half_size = 4;  // below this a half cannot train a model
    EmConfig em;
};

// Trains an annotator on (train, dev) halves of the raw corpus and returns a
// single-passage QA predictor. Injected so the annotation logic stays
// independent of any particular trainer.
using AnnotatorTrainer =
    std::function<QaPredict(const RawCorpus& train_half, const RawCorpus& dev_half)>;

struct CrossAnnotated {
    Corpus corpus;  // all questions, pools filled from the cross annotations
    AnnotationManifest manifest;
};

// Appendix-C protocol: split the train pool into two halves, train a model
// per half, annotate each half with the other half's model, and annotate the
// held-out eval questions with model 0.
CrossAnnotated cross_annotate(const RawCorpus& corpus, const CrossAnnotateOptions& opt,
                              const AnnotatorTrainer& trainer);

void save_manifest_jsonl(const AnnotationManifest& m, const std::filesystem::path& path);

}  // namespace fidlab
