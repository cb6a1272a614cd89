#include "fidlab/tokenizer.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "fidlab/error.hpp"

namespace fidlab {

Vocab Vocab::from_tokens(const std::vector<std::string>& words) {
    Vocab v;
    v.id_to_tok_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (const auto& w : words) v.id_to_tok_.push_back(w);
    for (size_t i = 0; i < v.id_to_tok_.size(); ++i) {
        auto [it, fresh] = v.tok_to_id_.emplace(v.id_to_tok_[i], static_cast<int>(i));
        if (!fresh) throw ConfigError("vocab: duplicate token '" + v.id_to_tok_[i] + "'");
    }
    return v;
}

Vocab Vocab::from_corpus(const RawCorpus& corpus, size_t max_size) {
    std::map<std::string, int64_t> freq;  // ordered map gives lexicographic ties
    auto count = [&](const std::string& text) {
        std::istringstream is(text);
        std::string tok;
        while (is >> tok) ++freq[tok];
    };
    for (const auto& q : corpus.questions) {
        count(q.text);
        for (const auto& a : q.answers) count(a);
        for (const auto& p : q.ctxs) {
            count(p.title);
            count(p.text);
        }
    }
    std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words;
    for (const auto& [tok, n] : ranked) {
        if (words.size() + 4 >= max_size) break;
        words.push_back(tok);
    }
    return from_tokens(words);
}

int Vocab::id_of(std::string_view tok) const {
    auto it = tok_to_id_.find(std::string(tok));
    return it == tok_to_id_.end() ? unk_id : it->second;
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> out;
    std::istringstream is{std::string(text)};
    std::string tok;
    while (is >> tok) out.push_back(id_of(tok));
    return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id == pad_id || id == bos_id || id == eos_id) continue;
        if (id < 0 || id >= size()) continue;
        if (!out.empty()) out += ' ';
        out += id_to_tok_[static_cast<size_t>(id)];
    }
    return out;
}

}  // namespace fidlab
