#include "fidlab/config.hpp"

#include <fstream>
#include <set>

#include "fidlab/error.hpp"

namespace fidlab {

using nlohmann::json;

namespace {

// Rejects keys not present in the whitelist; nested objects are validated by
// their own readers.
void check_keys(const json& obj, const std::set<std::string>& known, const std::string& where) {
    if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("unknown config key '" + where + "." + it.key() + "'");
}

template <class T>
void get_to(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            obj.at(key).get_to(out);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad value for config key '") + key + "': " + e.what());
        }
    }
}

EnvSpec env_from_json(const json& j, const std::string& where) {
    check_keys(j, {"n_plus", "n_minus"}, where);
    EnvSpec e;
    get_to(j, "n_plus", e.n_plus);
    get_to(j, "n_minus", e.n_minus);
    return e;
}

std::vector<EnvSpec> envs_from_json(const json& j, const std::string& where) {
    if (!j.is_array()) throw ConfigError("config '" + where + "' must be a list");
    std::vector<EnvSpec> out;
    for (size_t i = 0; i < j.size(); ++i)
        out.push_back(env_from_json(j[i], where + "[" + std::to_string(i) + "]"));
    return out;
}

json env_to_json(const EnvSpec& e) { return {{"n_plus", e.n_plus}, {"n_minus", e.n_minus}}; }

}  // namespace

void RunConfig::apply_json(const json& doc) {
    check_keys(doc, {"seed", "paths", "corpus", "model", "split", "train", "env", "mixture", "eval",
                     "sweep", "adapt", "intervene", "annotate"},
               "<root>");
    if (doc.contains("seed")) seed = doc.at("seed").get<uint64_t>();
    if (doc.contains("paths")) {
        const auto& p = doc.at("paths");
        check_keys(p, {"corpus", "labels", "checkpoint", "checkpoints"}, "paths");
        get_to(p, "corpus", paths.corpus);
        get_to(p, "labels", paths.labels);
        get_to(p, "checkpoint", paths.checkpoint);
        get_to(p, "checkpoints", paths.checkpoints);
    }
    if (doc.contains("corpus")) {
        const auto& c = doc.at("corpus");
        check_keys(c,
                   {"n_questions", "keys_per_question", "key_vocab", "value_vocab", "title_vocab",
                    "filler_vocab", "relevant_pool_size", "irrelevant_pool_size", "decoy_rate"},
                   "corpus");
        get_to(c, "n_questions", corpus.n_questions);
        get_to(c, "keys_per_question", corpus.keys_per_question);
        get_to(c, "key_vocab", corpus.key_vocab);
        get_to(c, "value_vocab", corpus.value_vocab);
        get_to(c, "title_vocab", corpus.title_vocab);
        get_to(c, "filler_vocab", corpus.filler_vocab);
        get_to(c, "relevant_pool_size", corpus.relevant_pool_size);
        get_to(c, "irrelevant_pool_size", corpus.irrelevant_pool_size);
        get_to(c, "decoy_rate", corpus.decoy_rate);
    }
    if (doc.contains("model")) {
        const auto& m = doc.at("model");
        check_keys(m,
                   {"d_model", "n_heads", "encoder_layers", "decoder_layers", "ff_dim",
                    "passage_len", "max_answer_len"},
                   "model");
        get_to(m, "d_model", model.d_model);
        get_to(m, "n_heads", model.n_heads);
        get_to(m, "encoder_layers", model.encoder_layers);
        get_to(m, "decoder_layers", model.decoder_layers);
        get_to(m, "ff_dim", model.ff_dim);
        get_to(m, "passage_len", model.passage_len);
        get_to(m, "max_answer_len", model.max_answer_len);
    }
    if (doc.contains("split")) {
        const auto& s = doc.at("split");
        check_keys(s, {"train_frac", "dev_frac", "salt"}, "split");
        get_to(s, "train_frac", split.train_frac);
        get_to(s, "dev_frac", split.dev_frac);
        get_to(s, "salt", split.salt);
    }
    if (doc.contains("train")) {
        const auto& t = doc.at("train");
        check_keys(t,
                   {"base_lr", "warmup_steps", "weight_decay", "max_grad_norm", "max_steps",
                    "eval_every", "batch_size", "target_mode"},
                   "train");
        get_to(t, "base_lr", train.base_lr);
        get_to(t, "warmup_steps", train.warmup_steps);
        get_to(t, "weight_decay", train.weight_decay);
        get_to(t, "max_grad_norm", train.max_grad_norm);
        get_to(t, "max_steps", train.max_steps);
        get_to(t, "eval_every", train.eval_every);
        get_to(t, "batch_size", train.batch_size);
        if (t.contains("target_mode"))
            train.target_mode = target_mode_from_string(t.at("target_mode").get<std::string>());
    }
    if (doc.contains("env")) env = env_from_json(doc.at("env"), "env");
    if (doc.contains("mixture")) mixture = envs_from_json(doc.at("mixture"), "mixture");
    if (doc.contains("eval")) {
        const auto& e = doc.at("eval");
        check_keys(e, {"n_passage_sets", "em", "envs", "threads"}, "eval");
        get_to(e, "n_passage_sets", eval.n_passage_sets);
        get_to(e, "em", eval.em);
        if (e.contains("envs")) eval.envs = envs_from_json(e.at("envs"), "eval.envs");
        get_to(e, "threads", eval.threads);
        em_normalization_from_string(eval.em);  // validate
    }
    if (doc.contains("sweep")) {
        const auto& s = doc.at("sweep");
        check_keys(s, {"n", "n_plus", "k", "seeds", "workers"}, "sweep");
        get_to(s, "n", sweep.n);
        get_to(s, "n_plus", sweep.n_plus);
        get_to(s, "k", sweep.k);
        get_to(s, "seeds", sweep.seeds);
        get_to(s, "workers", sweep.workers);
    }
    if (doc.contains("adapt")) {
        const auto& a = doc.at("adapt");
        check_keys(a, {"grid", "fold_salt", "env"}, "adapt");
        get_to(a, "grid", adapt.grid);
        get_to(a, "fold_salt", adapt.fold_salt);
        if (a.contains("env")) adapt.env = env_from_json(a.at("env"), "adapt.env");
    }
    if (doc.contains("intervene")) {
        const auto& i = doc.at("intervene");
        check_keys(i, {"r"}, "intervene");
        get_to(i, "r", intervene.r);
    }
    if (doc.contains("annotate")) {
        const auto& a = doc.at("annotate");
        check_keys(a, {"eval_frac", "dev_frac", "min_half_size", "dual_setting", "ctx_size",
                       "max_steps"},
                   "annotate");
        get_to(a, "eval_frac", annotate.eval_frac);
        get_to(a, "dev_frac", annotate.dev_frac);
        get_to(a, "min_half_size", annotate.min_half_size);
        get_to(a, "dual_setting", annotate.dual_setting);
        get_to(a, "ctx_size", annotate.ctx_size);
        get_to(a, "max_steps", annotate.max_steps);
    }
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file: " + path.string());
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw ConfigError("config JSON parse error in " + path.string() + ": " + e.what());
    }
    RunConfig cfg;
    cfg.apply_json(doc);
    return cfg;
}

json RunConfig::to_json() const {
    json doc;
    doc["seed"] = seed ? json(*seed) : json(nullptr);
    doc["paths"] = {{"corpus", paths.corpus},
                    {"labels", paths.labels},
                    {"checkpoint", paths.checkpoint},
                    {"checkpoints", paths.checkpoints}};
    doc["corpus"] = {{"n_questions", corpus.n_questions},
                     {"keys_per_question", corpus.keys_per_question},
                     {"key_vocab", corpus.key_vocab},
                     {"value_vocab", corpus.value_vocab},
                     {"title_vocab", corpus.title_vocab},
                     {"filler_vocab", corpus.filler_vocab},
                     {"relevant_pool_size", corpus.relevant_pool_size},
                     {"irrelevant_pool_size", corpus.irrelevant_pool_size},
                     {"decoy_rate", corpus.decoy_rate}};
    doc["model"] = {{"d_model", model.d_model},
                    {"n_heads", model.n_heads},
                    {"encoder_layers", model.encoder_layers},
                    {"decoder_layers", model.decoder_layers},
                    {"ff_dim", model.ff_dim},
                    {"passage_len", model.passage_len},
                    {"max_answer_len", model.max_answer_len}};
    doc["split"] = {{"train_frac", split.train_frac}, {"dev_frac", split.dev_frac}, {"salt", split.salt}};
    doc["train"] = {{"base_lr", train.base_lr},
                    {"warmup_steps", train.warmup_steps},
                    {"weight_decay", train.weight_decay},
                    {"max_grad_norm", train.max_grad_norm},
                    {"max_steps", train.max_steps},
                    {"eval_every", train.eval_every},
                    {"batch_size", train.batch_size},
                    {"target_mode", to_string(train.target_mode)}};
    doc["env"] = env_to_json(env);
    doc["mixture"] = json::array();
    for (const auto& e : mixture) doc["mixture"].push_back(env_to_json(e));
    doc["eval"] = {{"n_passage_sets", eval.n_passage_sets}, {"em", eval.em}, {"threads", eval.threads}};
    doc["eval"]["envs"] = json::array();
    for (const auto& e : eval.envs) doc["eval"]["envs"].push_back(env_to_json(e));
    doc["sweep"] = {{"n", sweep.n},
                    {"n_plus", sweep.n_plus},
                    {"k", sweep.k},
                    {"seeds", sweep.seeds},
                    {"workers", sweep.workers}};
    doc["adapt"] = {{"grid", adapt.grid}, {"fold_salt", adapt.fold_salt}, {"env", env_to_json(adapt.env)}};
    doc["intervene"] = {{"r", intervene.r}};
    doc["annotate"] = {{"eval_frac", annotate.eval_frac},
                       {"dev_frac", annotate.dev_frac},
                       {"min_half_size", annotate.min_half_size},
                       {"dual_setting", annotate.dual_setting},
                       {"ctx_size", annotate.ctx_size},
                       {"max_steps", annotate.max_steps}};
    return doc;
}

uint64_t RunConfig::require_seed() const {
    if (!seed) throw ConfigError("a seed is required: pass --seed or set \"seed\" in the config");
    return *seed;
}

std::variant<EnvSpec, MixtureSpec> RunConfig::train_env() const {
    if (!mixture.empty()) return MixtureSpec{mixture};
    return env;
}

EmConfig RunConfig::em_config() const {
    EmConfig cfg;
    cfg.normalization = em_normalization_from_string(eval.em);
    return cfg;
}

void RunConfig::write_resolved(const std::filesystem::path& out_dir) const {
    std::filesystem::create_directories(out_dir);
    json doc = to_json();
    doc["tool_version"] = kToolVersion;
    std::ofstream os(out_dir / "resolved_config.json");
    if (!os) throw DataError("cannot write resolved config in " + out_dir.string());
    os << doc.dump(1) << "\n";
}

}  // namespace fidlab
