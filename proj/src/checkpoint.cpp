#include "fidlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "fidlab/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace fidlab {

using nlohmann::json;

namespace {

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw DataError("checkpoint: truncated file");
    return v;
}

json config_to_json(const Checkpoint& c) {
    return json{{"model",
                 {{"vocab_size", c.config.vocab_size},
                  {"d_model", c.config.d_model},
                  {"n_heads", c.config.n_heads},
                  {"encoder_layers", c.config.encoder_layers},
                  {"decoder_layers", c.config.decoder_layers},
                  {"ff_dim", c.config.ff_dim},
                  {"passage_len", c.config.passage_len},
                  {"max_answer_len", c.config.max_answer_len},
                  {"seed", c.config.seed}}},
                {"vocab", c.vocab.tokens()},
                {"meta",
                 {{"seed", c.meta.seed},
                  {"step", c.meta.step},
                  {"dev_em", c.meta.dev_em},
                  {"train_env", c.meta.train_env}}}};
}

void config_from_json(const json& j, Checkpoint& c) {
    const auto& m = j.at("model");
    c.config.vocab_size = m.at("vocab_size").get<int>();
    c.config.d_model = m.at("d_model").get<int>();
    c.config.n_heads = m.at("n_heads").get<int>();
    c.config.encoder_layers = m.at("encoder_layers").get<int>();
    c.config.decoder_layers = m.at("decoder_layers").get<int>();
    c.config.ff_dim = m.at("ff_dim").get<int>();
    c.config.passage_len = m.at("passage_len").get<int>();
    c.config.max_answer_len = m.at("max_answer_len").get<int>();
    c.config.seed = m.at("seed").get<uint64_t>();
    std::vector<std::string> toks = j.at("vocab").get<std::vector<std::string>>();
    if (toks.size() < 4) throw DataError("checkpoint: vocab missing specials");
    c.vocab = Vocab::from_tokens({toks.begin() + 4, toks.end()});
    const auto& meta = j.at("meta");
    c.meta.seed = meta.at("seed").get<uint64_t>();
    c.meta.step = meta.at("step").get<int64_t>();
    c.meta.dev_em = meta.at("dev_em").get<double>();
    c.meta.train_env = meta.at("train_env").get<std::string>();
}

}  // namespace

Checkpoint Checkpoint::from_model(const FidModel& model, CheckpointMeta meta) {
    Checkpoint c;
    c.config = model.cfg;
    c.vocab = model.vocab;
    c.meta = std::move(meta);
    for (size_t i = 0; i < model.params.size(); ++i)
        c.arrays.emplace_back(model.params[i].name, model.params[i].value);
    return c;
}

FidModel Checkpoint::to_model() const {
    FidModel m = FidModel::init(config, vocab);
    if (arrays.size() != m.params.size())
        throw DataError("checkpoint: parameter count mismatch");
    for (const auto& [name, value] : arrays) {
        Param<float>* p = m.params.find(name);
        if (!p) throw DataError("checkpoint: unknown parameter '" + name + "'");
        if (p->value.shape != value.shape)
            throw DataError("checkpoint: shape mismatch for '" + name + "'");
        p->value = value;
    }
    return m;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path.string());
    os.write("FIDL", 4);
    write_u32(os, kCheckpointVersion);
    std::string cfg = config_to_json(ckpt).dump();
    write_u32(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    write_u32(os, static_cast<uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, t] : ckpt.arrays) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) write_u32(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!os) throw DataError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FIDL", 4) != 0)
        throw DataError("not a FIDL checkpoint: " + path.string());
    uint32_t version = read_u32(is);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    uint32_t cfg_len = read_u32(is);
    std::string cfg(cfg_len, '\0');
    is.read(cfg.data(), cfg_len);
    if (!is) throw DataError("checkpoint: truncated config block");
    Checkpoint c;
    try {
        config_from_json(json::parse(cfg), c);
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: bad config block: ") + e.what());
    }
    uint32_t n_arrays = read_u32(is);
    for (uint32_t i = 0; i < n_arrays; ++i) {
        uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t rank = read_u32(is);
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) d = static_cast<int64_t>(read_u32(is));
        Tensor<float> t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!is) throw DataError("checkpoint: truncated array '" + name + "'");
        c.arrays.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

}  // namespace fidlab
