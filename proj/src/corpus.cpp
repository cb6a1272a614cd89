#include "fidlab/corpus.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "fidlab/error.hpp"
#include "fidlab/rng.hpp"

namespace fidlab {

using nlohmann::json;

std::string to_string(PassageLabel l) {
    switch (l) {
        case PassageLabel::relevant: return "relevant";
        case PassageLabel::irrelevant: return "irrelevant";
        case PassageLabel::discarded: return "discarded";
    }
    return "?";
}

PassageLabel passage_label_from_string(const std::string& s) {
    if (s == "relevant") return PassageLabel::relevant;
    if (s == "irrelevant") return PassageLabel::irrelevant;
    if (s == "discarded") return PassageLabel::discarded;
    throw DataError("unknown passage label: " + s);
}

std::string to_string(const EnvSpec& e) {
    return "(n+=" + std::to_string(e.n_plus) + ",n-=" + std::to_string(e.n_minus) + ")";
}

void CorpusSpec::validate() const {
    if (n_questions <= 0) throw ConfigError("corpus: n_questions must be positive");
    if (key_vocab < n_questions)
        throw ConfigError("corpus: key vocabulary exhausted (key_vocab < n_questions)");
    if (value_vocab < 3) throw ConfigError("corpus: value_vocab must be >= 3");
    if (title_vocab < 1 || filler_vocab < 1) throw ConfigError("corpus: empty title/filler vocab");
    if (keys_per_question < 1 || keys_per_question >= key_vocab)
        throw ConfigError("corpus: keys_per_question out of range");
    if (relevant_pool_size < 1 || irrelevant_pool_size < 1)
        throw ConfigError("corpus: pool sizes must be positive");
    if (decoy_rate < 0.0 || decoy_rate >= 1.0) throw ConfigError("corpus: decoy_rate must be in [0,1)");
}

namespace {

std::string key_tok(int i) { return "k" + std::to_string(i); }
std::string val_tok(int i) { return "v" + std::to_string(i); }
std::string title_tok(int i) { return "t" + std::to_string(i); }
std::string fill_tok(int i) { return "f" + std::to_string(i); }

// Picks a value token index different from every index in `avoid`.
int pick_value_except(std::mt19937_64& rng, int value_vocab, const std::set<int>& avoid) {
    for (;;) {
        int v = static_cast<int>(uniform_index(rng, static_cast<size_t>(value_vocab)));
        if (!avoid.count(v)) return v;
    }
}

// Passage body: [filler]*p K has value V ; also D [filler...]
// The variable-length filler prefix keeps the answer slot from sitting at a
// fixed position in every passage.
std::string make_body(std::mt19937_64& rng, const CorpusSpec& spec, const std::string& key,
                      const std::string& value, const std::string& weak_mention) {
    int prefix = static_cast<int>(uniform_index(rng, 3));  // 0..2
    std::string body;
    for (int i = 0; i < prefix; ++i)
        body += fill_tok(static_cast<int>(uniform_index(rng, static_cast<size_t>(spec.filler_vocab)))) + " ";
    body += key + " has value " + value + " ; also " + weak_mention;
    for (int i = prefix; i < 2; ++i)
        body += " " + fill_tok(static_cast<int>(uniform_index(rng, static_cast<size_t>(spec.filler_vocab))));
    return body;
}

}  // namespace

GeneratedCorpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    GeneratedCorpus out;
    int n_decoys = static_cast<int>(spec.decoy_rate * spec.irrelevant_pool_size);
    for (int qi = 0; qi < spec.n_questions; ++qi) {
        RawQuestion q;
        q.id = "q" + std::to_string(qi);
        std::string key = key_tok(qi);
        auto vstream = make_stream(spec.seed, "corpus.value", static_cast<uint64_t>(qi));
        int gold_idx = static_cast<int>(uniform_index(vstream, static_cast<size_t>(spec.value_vocab)));
        std::string gold = val_tok(gold_idx);
        q.text = "value of " + key;
        q.answers = {gold};

        auto dstream = make_stream(spec.seed, "corpus.dkeys", static_cast<uint64_t>(qi));
        std::vector<std::string> distractor_keys;
        {
            // distractor keys drawn from the rest of the key vocabulary
            auto picks = sample_without_replacement(dstream, static_cast<size_t>(spec.key_vocab - 1),
                                                    static_cast<size_t>(spec.keys_per_question));
            for (size_t p : picks) {
                int k = static_cast<int>(p);
                if (k >= qi) ++k;  // skip the question's own key
                distractor_keys.push_back(key_tok(k));
            }
        }

        auto pstream = make_stream(spec.seed, "corpus.passages", static_cast<uint64_t>(qi));
        auto rand_title = [&] {
            return title_tok(static_cast<int>(uniform_index(pstream, static_cast<size_t>(spec.title_vocab))));
        };
        auto rand_distractor_key = [&] {
            return distractor_keys[uniform_index(pstream, distractor_keys.size())];
        };

        size_t ctx_index = 0;
        auto add_passage = [&](const std::string& title, const std::string& body, PassageLabel label) {
            q.ctxs.push_back({title, body});
            out.labels.push_back({q.id, passage_id_of(q.id, ctx_index), label});
            ++ctx_index;
        };

        for (int j = 0; j < spec.relevant_pool_size; ++j) {
            // entailing frame, weak slot holds a non-answer distractor value
            int d = pick_value_except(pstream, spec.value_vocab, {gold_idx});
            add_passage(rand_title(), make_body(pstream, spec, key, gold, val_tok(d)),
                        PassageLabel::relevant);
        }
        for (int j = 0; j < spec.irrelevant_pool_size - n_decoys; ++j) {
            int v = pick_value_except(pstream, spec.value_vocab, {gold_idx});
            int d = pick_value_except(pstream, spec.value_vocab, {gold_idx});
            add_passage(rand_title(), make_body(pstream, spec, rand_distractor_key(), val_tok(v), val_tok(d)),
                        PassageLabel::irrelevant);
        }
        for (int j = 0; j < n_decoys; ++j) {
            // contains the answer string in the weak slot of another key's
            // passage: contains-but-does-not-entail
            int v = pick_value_except(pstream, spec.value_vocab, {gold_idx});
            add_passage(rand_title(), make_body(pstream, spec, rand_distractor_key(), val_tok(v), gold),
                        PassageLabel::discarded);
        }
        out.raw.questions.push_back(std::move(q));
    }
    return out;
}

Vocab build_vocab(const CorpusSpec& spec) {
    std::vector<std::string> words = {"question:", "title:", "context:", "value", "of",
                                      "has", ";", "also"};
    for (int i = 0; i < spec.key_vocab; ++i) words.push_back(key_tok(i));
    for (int i = 0; i < spec.value_vocab; ++i) words.push_back(val_tok(i));
    for (int i = 0; i < spec.title_vocab; ++i) words.push_back(title_tok(i));
    for (int i = 0; i < spec.filler_vocab; ++i) words.push_back(fill_tok(i));
    return Vocab::from_tokens(words);
}

std::string passage_id_of(const std::string& question_id, size_t ctx_index) {
    return question_id + "_p" + std::to_string(ctx_index);
}

void save_fid_json(const RawCorpus& corpus, const std::filesystem::path& path) {
    json arr = json::array();
    for (const auto& q : corpus.questions) {
        json ctxs = json::array();
        for (const auto& p : q.ctxs) ctxs.push_back({{"title", p.title}, {"text", p.text}});
        arr.push_back({{"id", q.id}, {"question", q.text}, {"answers", q.answers}, {"ctxs", ctxs}});
    }
    std::ofstream os(path);
    if (!os) throw DataError("cannot write corpus file: " + path.string());
    os << arr.dump(1) << "\n";
}

RawCorpus load_fid_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read corpus file: " + path.string());
    json arr;
    try {
        is >> arr;
    } catch (const json::exception& e) {
        throw DataError("corpus JSON parse error in " + path.string() + ": " + e.what());
    }
    if (!arr.is_array()) throw DataError("corpus file must be a JSON list: " + path.string());
    RawCorpus out;
    size_t idx = 0;
    for (const auto& rec : arr) {
        RawQuestion q;
        if (!rec.contains("question") || !rec.contains("answers") || !rec.contains("ctxs"))
            throw DataError("corpus record " + std::to_string(idx) +
                            " missing question/answers/ctxs");
        q.id = rec.value("id", "q" + std::to_string(idx));
        q.text = rec.at("question").get<std::string>();
        for (const auto& a : rec.at("answers")) q.answers.push_back(a.get<std::string>());
        if (q.answers.empty())
            throw DataError("corpus record " + q.id + " has no ground-truth answers");
        for (const auto& c : rec.at("ctxs"))
            q.ctxs.push_back({c.value("title", ""), c.at("text").get<std::string>()});
        out.questions.push_back(std::move(q));
        ++idx;
    }
    return out;
}

void save_labels_jsonl(const std::vector<LabelRecord>& labels, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write labels file: " + path.string());
    for (const auto& r : labels) {
        json rec = {{"question_id", r.question_id},
                    {"passage_id", r.passage_id},
                    {"label", to_string(r.label)}};
        os << rec.dump() << "\n";
    }
}

std::vector<LabelRecord> load_labels_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read labels file: " + path.string());
    std::vector<LabelRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) throw DataError("labels JSONL parse error: " + line);
        out.push_back({rec.at("question_id").get<std::string>(),
                       rec.at("passage_id").get<std::string>(),
                       passage_label_from_string(rec.at("label").get<std::string>())});
    }
    return out;
}

Corpus assemble_corpus(const RawCorpus& raw, const std::vector<LabelRecord>& labels) {
    std::unordered_map<std::string, PassageLabel> by_id;
    for (const auto& r : labels) by_id.emplace(r.passage_id, r.label);
    Corpus out;
    for (const auto& rq : raw.questions) {
        Question q;
        q.id = rq.id;
        q.text = rq.text;
        q.gold_answers = rq.answers;
        for (size_t j = 0; j < rq.ctxs.size(); ++j) {
            Passage p;
            p.id = passage_id_of(rq.id, j);
            p.title = rq.ctxs[j].title;
            p.text = rq.ctxs[j].text;
            p.contains_answer = contains_answer(p.text, q.gold_answers);
            auto it = by_id.find(p.id);
            PassageLabel label;
            if (it != by_id.end()) {
                label = it->second;
            } else {
                label = p.contains_answer ? PassageLabel::discarded : PassageLabel::irrelevant;
            }
            switch (label) {
                case PassageLabel::relevant: q.relevant_pool.push_back(std::move(p)); break;
                case PassageLabel::irrelevant: q.irrelevant_pool.push_back(std::move(p)); break;
                case PassageLabel::discarded: q.discarded_pool.push_back(std::move(p)); break;
            }
        }
        out.questions.push_back(std::move(q));
    }
    return out;
}

TargetPick pick_target_answer(const Question& q, const Context& ctx, std::mt19937_64& stream,
                              TargetMode mode) {
    if (q.gold_answers.empty()) throw DataError("question " + q.id + " has no gold answers");
    if (mode == TargetMode::first_gold) return {q.gold_answers.front(), false};
    std::vector<std::string> in_ctx;
    for (const auto& g : q.gold_answers) {
        std::span<const std::string> one(&g, 1);
        for (const auto& p : ctx.passages)
            if (contains_answer(p.text, one)) {
                in_ctx.push_back(g);
                break;
            }
    }
    if (in_ctx.empty()) return {q.gold_answers.front(), true};
    return {in_ctx[uniform_index(stream, in_ctx.size())], false};
}

TargetMode target_mode_from_string(const std::string& s) {
    if (s == "first-gold") return TargetMode::first_gold;
    if (s == "random-gold-in-context") return TargetMode::random_gold_in_context;
    throw ConfigError("unknown target mode: " + s);
}

std::string to_string(TargetMode m) {
    return m == TargetMode::first_gold ? "first-gold" : "random-gold-in-context";
}

}  // namespace fidlab
