#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fidlab {

// ---- raw corpus (FiD JSON schema) ----
// A list of {question, answers: [text], ctxs: [{title, text}]} records, as
// published for the open-domain QA datasets this layout mirrors.

struct RawPassage {
    std::string title;
    std::string text;
};

struct RawQuestion {
    std::string id;  // synthesized from the list index when absent in the JSON
    std::string text;
    std::vector<std::string> answers;
    std::vector<RawPassage> ctxs;
};

struct RawCorpus {
    std::vector<RawQuestion> questions;
};

enum class PassageLabel { relevant, irrelevant, discarded };

std::string to_string(PassageLabel l);
PassageLabel passage_label_from_string(const std::string& s);

struct LabelRecord {
    std::string question_id;
    std::string passage_id;
    PassageLabel label;
};

// ---- annotated corpus ----

struct Passage {
    std::string id;
    std::string title;
    std::string text;
    bool contains_answer = false;
};

struct Question {
    std::string id;
    std::string text;
    std::vector<std::string> gold_answers;
    std::vector<Passage> relevant_pool;    // R(q)
    std::vector<Passage> irrelevant_pool;  // R-bar(q)
    std::vector<Passage> discarded_pool;   // contains an answer, failed the filter
};

struct Corpus {
    std::vector<Question> questions;
};

// Ordered passages plus the per-passage relevance mask used by probes and
// the intervention transform.
struct Context {
    std::vector<Passage> passages;
    std::vector<bool> relevance_mask;
};

// A controlled sampling environment: n_plus relevant and n_minus irrelevant
// passages per question, resampled every training step.
struct EnvSpec {
    int n_plus = 0;
    int n_minus = 0;

    int total() const { return n_plus + n_minus; }
    double quality() const { return total() ? static_cast<double>(n_plus) / total() : 0.0; }
    bool operator==(const EnvSpec&) const = default;
};

struct MixtureSpec {
    std::vector<EnvSpec> components;  // uniform weights
};

std::string to_string(const EnvSpec& e);

}  // namespace fidlab
