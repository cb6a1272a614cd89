#pragma once

// Template implementation of the FiD model; included by model.hpp.

#include <algorithm>
#include <unordered_map>

#include "fidlab/error.hpp"
#include "fidlab/rng.hpp"

namespace fidlab {

template <class R>
FidModelT<R> FidModelT<R>::init(const ModelConfig& cfg, Vocab vocab) {
    cfg.validate();
    if (vocab.size() != cfg.vocab_size)
        throw std::invalid_argument("model init: vocab size " + std::to_string(vocab.size()) +
                                    " != config vocab_size " + std::to_string(cfg.vocab_size));
    FidModelT<R> m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    auto rng = make_stream(cfg.seed, "model.init");
    const R std02 = static_cast<R>(0.02);
    int64_t d = cfg.d_model, f = cfg.ff_dim, v = cfg.vocab_size;

    auto randn = [&](std::vector<int64_t> shape) { return Tensor<R>::randn(std::move(shape), std02, rng); };
    auto add_ln = [&](const std::string& prefix) {
        m.params.add(prefix + ".g", Tensor<R>::full({d}, R(1)));
        m.params.add(prefix + ".b", Tensor<R>::zeros({d}));
    };
    auto add_attn = [&](const std::string& prefix) {
        m.params.add(prefix + ".wq", randn({d, d}));
        m.params.add(prefix + ".wk", randn({d, d}));
        m.params.add(prefix + ".wv", randn({d, d}));
        m.params.add(prefix + ".wo", randn({d, d}));
    };
    auto add_ff = [&](const std::string& prefix) {
        m.params.add(prefix + ".w1", randn({d, f}));
        m.params.add(prefix + ".b1", Tensor<R>::zeros({f}));
        m.params.add(prefix + ".w2", randn({f, d}));
        m.params.add(prefix + ".b2", Tensor<R>::zeros({d}));
    };

    m.params.add("tok_embed", randn({v, d}));
    m.params.add("enc_pos", randn({cfg.passage_len, d}));
    m.params.add("dec_pos", randn({cfg.max_answer_len + 1, d}));
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        std::string p = "enc.l" + std::to_string(l);
        add_ln(p + ".attn_ln");
        add_attn(p + ".attn");
        add_ln(p + ".ff_ln");
        add_ff(p + ".ff");
    }
    add_ln("enc.final_ln");
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        std::string p = "dec.l" + std::to_string(l);
        add_ln(p + ".self_ln");
        add_attn(p + ".self");
        add_ln(p + ".cross_ln");
        add_attn(p + ".cross");
        add_ln(p + ".ff_ln");
        add_ff(p + ".ff");
    }
    add_ln("dec.final_ln");
    m.params.add("lm_head", randn({d, v}));
    return m;
}

template <class R>
std::vector<int> FidModelT<R>::render_passage(const std::string& question, const Passage& p) const {
    std::string rendered = "question: " + question + " title: " + p.title + " context: " + p.text;
    std::vector<int> ids = vocab.encode(rendered);
    ids.resize(static_cast<size_t>(cfg.passage_len), Vocab::pad_id);  // pad or truncate
    return ids;
}

namespace detail {

// Registers each parameter on the graph once per forward pass, as a
// trainable leaf or a plain input depending on with_grad.
template <class R>
struct ParamNodes {
    Graph<R>& g;
    ParamStore<R>& store;
    bool with_grad;
    std::unordered_map<std::string, typename Graph<R>::NodeId> cache;

    typename Graph<R>::NodeId operator()(const std::string& name) {
        auto it = cache.find(name);
        if (it != cache.end()) return it->second;
        Param<R>* p = store.find(name);
        if (!p) throw ContractError("missing parameter: " + name);
        auto id = with_grad ? g.param(*p) : g.input(p->value);
        cache.emplace(name, id);
        return id;
    }
};

template <class R>
typename Graph<R>::NodeId feed_forward(Graph<R>& g, ParamNodes<R>& P, const std::string& prefix,
                                       typename Graph<R>::NodeId x) {
    auto h = g.add_bias(g.matmul(x, P(prefix + ".w1")), P(prefix + ".b1"));
    return g.add_bias(g.matmul(g.relu(h), P(prefix + ".w2")), P(prefix + ".b2"));
}

template <class R>
typename Graph<R>::NodeId layer_norm(Graph<R>& g, ParamNodes<R>& P, const std::string& prefix,
                                     typename Graph<R>::NodeId x) {
    return g.layer_norm(x, P(prefix + ".g"), P(prefix + ".b"));
}

template <class R>
struct EncoderOutput {
    typename Graph<R>::NodeId node;
    std::vector<int64_t> passage_offsets;
};

template <class R>
EncoderOutput<R> build_encoder(Graph<R>& g, FidModelT<R>& model, const std::string& question,
                               const Context& ctx, ParamNodes<R>& P) {
    if (ctx.passages.empty()) throw std::invalid_argument("fid_forward: context must be nonempty");
    const auto& cfg = model.cfg;
    int64_t L = cfg.passage_len;
    int64_t n = static_cast<int64_t>(ctx.passages.size());

    std::vector<int> ids;
    std::vector<int> pos;
    ids.reserve(static_cast<size_t>(n * L));
    std::vector<AttnSegment> segments;
    std::vector<int64_t> offsets;
    for (int64_t p = 0; p < n; ++p) {
        auto toks = model.render_passage(question, ctx.passages[static_cast<size_t>(p)]);
        ids.insert(ids.end(), toks.begin(), toks.end());
        for (int64_t i = 0; i < L; ++i) pos.push_back(static_cast<int>(i));  // restart per passage
        segments.push_back({p * L, (p + 1) * L, p * L, (p + 1) * L});
        offsets.push_back(p * L);
    }

    auto x = g.add(g.gather_rows(P("tok_embed"), ids), g.gather_rows(P("enc_pos"), pos));
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        std::string pfx = "enc.l" + std::to_string(l);
        auto h = layer_norm(g, P, pfx + ".attn_ln", x);
        auto q = g.matmul(h, P(pfx + ".attn.wq"));
        auto k = g.matmul(h, P(pfx + ".attn.wk"));
        auto v = g.matmul(h, P(pfx + ".attn.wv"));
        auto a = g.attention(q, k, v, cfg.n_heads, segments, /*causal=*/false);
        x = g.add(x, g.matmul(a, P(pfx + ".attn.wo")));
        x = g.add(x, feed_forward(g, P, pfx + ".ff", layer_norm(g, P, pfx + ".ff_ln", x)));
    }
    x = layer_norm(g, P, "enc.final_ln", x);
    return {x, std::move(offsets)};
}

template <class R>
typename Graph<R>::NodeId build_decoder(Graph<R>& g, FidModelT<R>& model,
                                        typename Graph<R>::NodeId enc_out,
                                        const std::vector<int64_t>& offsets,
                                        std::span<const int> decoder_input,
                                        const PassageAttnTransform<R>* transform,
                                        AttentionTensorT<R>* capture, ParamNodes<R>& P) {
    const auto& cfg = model.cfg;
    int64_t m = static_cast<int64_t>(decoder_input.size());
    if (m < 1) throw std::invalid_argument("decoder input must be nonempty");
    if (m > cfg.max_answer_len + 1)
        throw std::invalid_argument("decoder input longer than max_answer_len + 1");
    int64_t n_keys = g.val(enc_out).rows();

    if (capture)
        *capture = AttentionTensorT<R>(cfg.decoder_layers, cfg.n_heads, static_cast<int>(m),
                                       static_cast<int>(n_keys), offsets);

    std::vector<int> ids(decoder_input.begin(), decoder_input.end());
    std::vector<int> pos(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) pos[static_cast<size_t>(i)] = static_cast<int>(i);
    auto y = g.add(g.gather_rows(P("tok_embed"), ids), g.gather_rows(P("dec_pos"), pos));

    std::vector<AttnSegment> self_seg = {{0, m, 0, m}};
    std::vector<AttnSegment> cross_seg = {{0, m, 0, n_keys}};
    std::span<const int64_t> off_view(offsets);

    for (int l = 0; l < cfg.decoder_layers; ++l) {
        std::string pfx = "dec.l" + std::to_string(l);
        {
            auto h = layer_norm(g, P, pfx + ".self_ln", y);
            auto q = g.matmul(h, P(pfx + ".self.wq"));
            auto k = g.matmul(h, P(pfx + ".self.wk"));
            auto v = g.matmul(h, P(pfx + ".self.wv"));
            auto a = g.attention(q, k, v, cfg.n_heads, self_seg, /*causal=*/true);
            y = g.add(y, g.matmul(a, P(pfx + ".self.wo")));
        }
        {
            auto h = layer_norm(g, P, pfx + ".cross_ln", y);
            auto q = g.matmul(h, P(pfx + ".cross.wq"));
            auto k = g.matmul(enc_out, P(pfx + ".cross.wk"));
            auto v = g.matmul(enc_out, P(pfx + ".cross.wv"));
            AttnHook<R> hook;
            if (transform || capture) {
                int layer = l;
                hook = [layer, transform, capture, off_view](const AttnHookCtx& c, R* probs) {
                    if (transform && *transform) {
                        // Renormalize only rows the transform changed, so an
                        // identity transform stays bitwise identical.
                        std::vector<R> before(probs, probs + c.n_heads * c.k_len);
                        (*transform)(layer, c.q_index, off_view, c.k_len, c.n_heads, probs);
                        for (int64_t h2 = 0; h2 < c.n_heads; ++h2) {
                            R* row = probs + h2 * c.k_len;
                            const R* prev = before.data() + h2 * c.k_len;
                            if (std::equal(row, row + c.k_len, prev)) continue;
                            double s = 0.0;
                            for (int64_t j = 0; j < c.k_len; ++j) s += static_cast<double>(row[j]);
                            if (std::abs(s - 1.0) > 1e-4)
                                throw ContractError(
                                    "attention transform returned a non-normalized row (sum " +
                                    std::to_string(s) + ")");
                            for (int64_t j = 0; j < c.k_len; ++j)
                                row[j] = static_cast<R>(static_cast<double>(row[j]) / s);
                        }
                    }
                    if (capture)
                        for (int64_t h2 = 0; h2 < c.n_heads; ++h2)
                            for (int64_t j = 0; j < c.k_len; ++j)
                                capture->at(layer, static_cast<int>(h2),
                                            static_cast<int>(c.q_index), j) = probs[h2 * c.k_len + j];
                };
            }
            auto a = g.attention(q, k, v, cfg.n_heads, cross_seg, /*causal=*/false,
                                 hook ? &hook : nullptr);
            y = g.add(y, g.matmul(a, P(pfx + ".cross.wo")));
        }
        y = g.add(y, feed_forward(g, P, pfx + ".ff", layer_norm(g, P, pfx + ".ff_ln", y)));
    }
    y = layer_norm(g, P, "dec.final_ln", y);
    return g.matmul(y, P("lm_head"));
}

}  // namespace detail

template <class R>
FidGraphOutput<R> fid_graph_forward(Graph<R>& g, FidModelT<R>& model, const std::string& question,
                                    const Context& ctx, std::span<const int> decoder_input,
                                    const PassageAttnTransform<R>* transform,
                                    AttentionTensorT<R>* capture, bool with_grad) {
    detail::ParamNodes<R> P{g, model.params, with_grad, {}};
    auto enc = detail::build_encoder(g, model, question, ctx, P);
    auto logits = detail::build_decoder(g, model, enc.node, enc.passage_offsets, decoder_input,
                                        transform, capture, P);
    return {logits, std::move(enc.passage_offsets)};
}

template <class R>
FidForwardResult<R> fid_forward(const FidModelT<R>& model, const std::string& question,
                                const Context& ctx, std::span<const int> decoder_input,
                                const PassageAttnTransform<R>* transform) {
    Graph<R> g;
    // forward-only: parameters are registered as plain inputs, nothing mutates
    auto& m = const_cast<FidModelT<R>&>(model);
    FidForwardResult<R> out;
    auto fwd = fid_graph_forward(g, m, question, ctx, decoder_input, transform, &out.attn,
                                 /*with_grad=*/false);
    out.logits = g.val(fwd.logits);
    return out;
}

template <class R>
FidSession<R>::FidSession(const FidModelT<R>& model, const std::string& question, const Context& ctx,
                          const PassageAttnTransform<R>* transform, bool capture)
    : model_(model), transform_(transform), capture_(capture) {
    Graph<R> g;
    auto& m = const_cast<FidModelT<R>&>(model);
    detail::ParamNodes<R> P{g, m.params, /*with_grad=*/false, {}};
    auto enc = detail::build_encoder(g, m, question, ctx, P);
    enc_out_ = g.val(enc.node);
    offsets_ = std::move(enc.passage_offsets);
}

template <class R>
Tensor<R> FidSession<R>::decode_logits(std::span<const int> decoder_input) {
    Graph<R> g;
    auto& m = const_cast<FidModelT<R>&>(model_);
    detail::ParamNodes<R> P{g, m.params, /*with_grad=*/false, {}};
    auto enc = g.input(enc_out_);
    auto logits = detail::build_decoder(g, m, enc, offsets_, decoder_input, transform_,
                                        capture_ ? &attn_ : nullptr, P);
    return g.val(logits);
}

template <class R>
std::vector<int> greedy_loop(const std::function<Tensor<R>(std::span<const int>)>& next_logits,
                             int eos_id, int bos_id, int max_len) {
    std::vector<int> prefix = {bos_id};
    std::vector<int> generated;
    for (int t = 0; t < max_len; ++t) {
        Tensor<R> logits = next_logits(prefix);
        int64_t vocab = logits.cols();
        std::span<const R> last(logits.data.data() + (logits.rows() - 1) * vocab,
                                static_cast<size_t>(vocab));
        int next = static_cast<int>(argmax_lowest(last));
        if (next == eos_id) break;
        generated.push_back(next);
        prefix.push_back(next);
    }
    return generated;
}

template <class R>
std::string greedy_decode(const FidModelT<R>& model, const std::string& question, const Context& ctx,
                          const PassageAttnTransform<R>* transform,
                          AttentionTensorT<R>* attn_out) {
    FidSession<R> session(model, question, ctx, transform, attn_out != nullptr);
    auto ids = greedy_loop<R>(
        [&](std::span<const int> prefix) { return session.decode_logits(prefix); }, Vocab::eos_id,
        Vocab::bos_id, model.cfg.max_answer_len);
    if (attn_out) *attn_out = session.attention();
    return model.vocab.decode(ids);
}

}  // namespace fidlab
