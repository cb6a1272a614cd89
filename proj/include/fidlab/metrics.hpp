#pragma once

#include <span>
#include <string>
#include <vector>

namespace fidlab {

// Exact-match scoring. squad_style applies the standard open-domain answer
// normalization (lowercase, strip punctuation and articles, collapse
// whitespace); synthetic_exact only trims/collapses whitespace, which is the
// right unit for the closed-vocabulary synthetic task.
enum class EmNormalization { synthetic_exact, squad_style };

struct EmConfig {
    EmNormalization normalization = EmNormalization::synthetic_exact;
};

std::string normalize_answer(const std::string& s, EmNormalization mode);

// True iff the normalized prediction equals any normalized gold.
bool exact_match(const std::string& prediction, std::span<const std::string> golds,
                 const EmConfig& cfg);

// Normalized containment used for the contains-answer rule: the gold's token
// sequence (lowercased, punctuation stripped) must appear as a contiguous
// token run in the text.
bool contains_answer(const std::string& text, std::span<const std::string> golds);

EmNormalization em_normalization_from_string(const std::string& s);
std::string to_string(EmNormalization m);

}  // namespace fidlab
