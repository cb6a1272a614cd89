#include "fidlab/metrics.hpp"

#include <cctype>
#include <sstream>

#include "fidlab/error.hpp"

namespace fidlab {

namespace {

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

std::string join(const std::vector<std::string>& toks) {
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

std::vector<std::string> squad_tokens(const std::string& s, bool drop_articles) {
    std::string lowered;
    lowered.reserve(s.size());
    for (unsigned char c : s) {
        if (std::ispunct(c))
            lowered += ' ';
        else
            lowered += static_cast<char>(std::tolower(c));
    }
    auto toks = split_ws(lowered);
    if (!drop_articles) return toks;
    std::vector<std::string> out;
    for (auto& t : toks)
        if (!is_article(t)) out.push_back(std::move(t));
    return out;
}

}  // namespace

std::string normalize_answer(const std::string& s, EmNormalization mode) {
    if (mode == EmNormalization::synthetic_exact) return join(split_ws(s));
    return join(squad_tokens(s, /*drop_articles=*/true));
}

bool exact_match(const std::string& prediction, std::span<const std::string> golds,
                 const EmConfig& cfg) {
    if (golds.empty()) throw std::invalid_argument("exact_match: golds must be nonempty");
    std::string p = normalize_answer(prediction, cfg.normalization);
    for (const auto& g : golds)
        if (p == normalize_answer(g, cfg.normalization)) return true;
    return false;
}

bool contains_answer(const std::string& text, std::span<const std::string> golds) {
    auto text_toks = squad_tokens(text, /*drop_articles=*/false);
    for (const auto& g : golds) {
        auto gt = squad_tokens(g, /*drop_articles=*/false);
        if (gt.empty() || gt.size() > text_toks.size()) continue;
        for (size_t i = 0; i + gt.size() <= text_toks.size(); ++i) {
            bool hit = true;
            for (size_t j = 0; j < gt.size(); ++j)
                if (text_toks[i + j] != gt[j]) {
                    hit = false;
                    break;
                }
            if (hit) return true;
        }
    }
    return false;
}

EmNormalization em_normalization_from_string(const std::string& s) {
    if (s == "synthetic-exact") return EmNormalization::synthetic_exact;
    if (s == "squad-style") return EmNormalization::squad_style;
    throw ConfigError("unknown EM normalization mode: " + s);
}

std::string to_string(EmNormalization m) {
    return m == EmNormalization::synthetic_exact ? "synthetic-exact" : "squad-style";
}

}  // namespace fidlab
