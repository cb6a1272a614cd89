#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fidlab/types.hpp"

namespace fidlab {

// Whitespace tokenizer over a closed vocabulary. Unknown symbols map to UNK.
class Vocab {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;

    // Builds specials + the given word list, in order.
    static Vocab from_tokens(const std::vector<std::string>& words);

    // Frequency-ranked vocabulary from an ingested corpus (ties broken
    // lexicographically), capped at max_size including the specials.
    static Vocab from_corpus(const RawCorpus& corpus, size_t max_size);

    int size() const { return static_cast<int>(id_to_tok_.size()); }
    int id_of(std::string_view tok) const;
    const std::string& token(int id) const { return id_to_tok_[static_cast<size_t>(id)]; }
    const std::vector<std::string>& tokens() const { return id_to_tok_; }

    std::vector<int> encode(std::string_view text) const;
    // Joins non-special tokens with single spaces.
    std::string decode(std::span<const int> ids) const;

private:
    std::vector<std::string> id_to_tok_;
    std::unordered_map<std::string, int> tok_to_id_;
};

}  // namespace fidlab
