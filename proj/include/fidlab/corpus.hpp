#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fidlab/metrics.hpp"
#include "fidlab/tokenizer.hpp"
#include "fidlab/types.hpp"

namespace fidlab {

// Deterministic generator of a desk-scale extractive QA corpus with known
// relevance. The task is key -> value lookup: each question asks for the
// value of its key, relevant passages state it in an entailing frame, and
// decoy passages mention the answer in a weak frame attached to another key.
struct CorpusSpec {
    int n_questions = 120;
    int keys_per_question = 8;  // distinct distractor keys per question pool
    int key_vocab = 160;
    int value_vocab = 40;
    int title_vocab = 20;
    int filler_vocab = 8;
    int relevant_pool_size = 12;
    int irrelevant_pool_size = 70;
    // Fraction of the non-entailing pool that contains the answer string in a
    // non-entailing frame (ground-truth label: discarded).
    double decoy_rate = 0.05;
    uint64_t seed = 1;

    void validate() const;
};

struct GeneratedCorpus {
    RawCorpus raw;
    std::vector<LabelRecord> labels;
};

GeneratedCorpus generate_corpus(const CorpusSpec& spec);

// Closed vocabulary covering everything generate_corpus can emit.
Vocab build_vocab(const CorpusSpec& spec);

// ---- FiD JSON corpus schema + label sidecar ----
void save_fid_json(const RawCorpus& corpus, const std::filesystem::path& path);
RawCorpus load_fid_json(const std::filesystem::path& path);
void save_labels_jsonl(const std::vector<LabelRecord>& labels, const std::filesystem::path& path);
std::vector<LabelRecord> load_labels_jsonl(const std::filesystem::path& path);

// Stable passage id for the j-th ctx of a question.
std::string passage_id_of(const std::string& question_id, size_t ctx_index);

// Assembles annotated questions by partitioning each raw question's ctxs
// according to the label records. Passages without a label fall back to the
// contains-answer rule (contains -> discarded, else irrelevant).
Corpus assemble_corpus(const RawCorpus& raw, const std::vector<LabelRecord>& labels);

// ---- target answer selection (training supervision) ----
enum class TargetMode { first_gold, random_gold_in_context };

struct TargetPick {
    std::string answer;
    bool used_fallback = false;  // random mode found no in-context gold
};

TargetPick pick_target_answer(const Question& q, const Context& ctx, std::mt19937_64& stream,
                              TargetMode mode);

TargetMode target_mode_from_string(const std::string& s);
std::string to_string(TargetMode m);

}  // namespace fidlab
