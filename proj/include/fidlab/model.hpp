#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fidlab/graph.hpp"
#include "fidlab/tokenizer.hpp"
#include "fidlab/types.hpp"

namespace fidlab {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int ff_dim = 128;
    int passage_len = 16;    // fixed token length of each rendered passage
    int max_answer_len = 4;  // generated tokens, excluding EOS
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 5) throw std::invalid_argument("model: vocab_size too small");
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
            throw std::invalid_argument("model: d_model must be a positive multiple of n_heads");
        if (d_model / n_heads > 64) throw std::invalid_argument("model: head dim > 64 unsupported");
        if (encoder_layers < 1 || decoder_layers < 1 || ff_dim < 1)
            throw std::invalid_argument("model: layer/ff sizes must be positive");
        if (passage_len < 1) throw std::invalid_argument("model: passage_len must be >= 1");
        if (max_answer_len < 1) throw std::invalid_argument("model: max_answer_len must be >= 1");
    }
};

// Captured cross-attention probabilities, indexed by
// (decoder layer, head, decoder position, encoder key position). Decoder
// position 0 is the first generated position (the step conditioned on BOS).
template <class R>
struct AttentionTensorT {
    int n_layers = 0, n_heads = 0, n_positions = 0, n_keys = 0;
    std::vector<int64_t> passage_offsets;  // start of each passage segment on the key axis
    std::vector<R> probs;

    AttentionTensorT() = default;
    AttentionTensorT(int layers, int heads, int positions, int keys, std::vector<int64_t> offsets)
        : n_layers(layers),
          n_heads(heads),
          n_positions(positions),
          n_keys(keys),
          passage_offsets(std::move(offsets)),
          probs(static_cast<size_t>(layers) * heads * positions * keys, R(0)) {}

    int n_passages() const { return static_cast<int>(passage_offsets.size()); }

    int64_t segment_begin(int i) const { return passage_offsets[static_cast<size_t>(i)]; }
    int64_t segment_end(int i) const {
        return i + 1 < n_passages() ? passage_offsets[static_cast<size_t>(i) + 1] : n_keys;
    }

    R& at(int layer, int head, int pos, int64_t key) {
        return probs[((static_cast<size_t>(layer) * n_heads + head) * n_positions + pos) * n_keys +
                     static_cast<size_t>(key)];
    }
    const R& at(int layer, int head, int pos, int64_t key) const {
        return const_cast<AttentionTensorT*>(this)->at(layer, head, pos, key);
    }
};

using AttentionTensor = AttentionTensorT<float>;

// Head-averaged first-position cross-attention mass per (layer, passage).
struct AggregatedAttention {
    int n_layers = 0, n_passages = 0;
    std::vector<double> mass;  // [layer][passage]

    double& at(int layer, int passage) {
        return mass[static_cast<size_t>(layer) * n_passages + passage];
    }
    double at(int layer, int passage) const {
        return mass[static_cast<size_t>(layer) * n_passages + passage];
    }
};

template <class R>
AggregatedAttention aggregate_first_token(const AttentionTensorT<R>& attn) {
    if (attn.n_positions < 1)
        throw std::invalid_argument("aggregate_first_token: no decoder positions captured");
    AggregatedAttention out;
    out.n_layers = attn.n_layers;
    out.n_passages = attn.n_passages();
    out.mass.assign(static_cast<size_t>(out.n_layers) * out.n_passages, 0.0);
    for (int k = 0; k < attn.n_layers; ++k)
        for (int i = 0; i < out.n_passages; ++i) {
            double m = 0.0;
            for (int h = 0; h < attn.n_heads; ++h)
                for (int64_t j = attn.segment_begin(i); j < attn.segment_end(i); ++j)
                    m += static_cast<double>(attn.at(k, h, 0, j));
            out.at(k, i) = m / attn.n_heads;
        }
    return out;
}

// Rewrites the per-head cross-attention rows of one (decoder layer, decoder
// position) in place; probs is [n_heads][n_keys] row-major and every row must
// still sum to 1 (within 1e-4) on return.
template <class R>
using PassageAttnTransform = std::function<void(int layer, int64_t pos,
                                                std::span<const int64_t> passage_offsets,
                                                int64_t n_keys, int64_t n_heads, R* probs)>;

// The toy Fusion-in-Decoder model: every passage is rendered through the
// fixed template, encoded independently (positions restart per passage), and
// the decoder cross-attends over the concatenation of all encoded passages.
// Cross-attention adds no positional signal over the key axis, which makes
// order insensitivity over passages exact rather than approximate.
template <class R>
struct FidModelT {
    ModelConfig cfg;
    Vocab vocab;
    ParamStore<R> params;

    static FidModelT init(const ModelConfig& cfg, Vocab vocab);

    std::vector<int> render_passage(const std::string& question, const Passage& p) const;
};

using FidModel = FidModelT<float>;

template <class R>
struct FidGraphOutput {
    typename Graph<R>::NodeId logits = -1;  // [decoder_len, vocab]
    std::vector<int64_t> passage_offsets;
};

// Full differentiable forward on the caller's graph. `with_grad` controls
// whether parameters are registered as trainable leaves. When `capture` is
// given it is (re)initialized and filled with post-transform cross-attention.
template <class R>
FidGraphOutput<R> fid_graph_forward(Graph<R>& g, FidModelT<R>& model, const std::string& question,
                                    const Context& ctx, std::span<const int> decoder_input,
                                    const PassageAttnTransform<R>* transform,
                                    AttentionTensorT<R>* capture, bool with_grad);

template <class R>
struct FidForwardResult {
    Tensor<R> logits;  // [decoder_len, vocab]
    AttentionTensorT<R> attn;
};

// One-shot inference forward (teacher-forced over decoder_input).
template <class R>
FidForwardResult<R> fid_forward(const FidModelT<R>& model, const std::string& question,
                                const Context& ctx, std::span<const int> decoder_input,
                                const PassageAttnTransform<R>* transform = nullptr);

// Precomputed encoder state for multi-step decoding of one (question, context).
template <class R>
class FidSession {
public:
    FidSession(const FidModelT<R>& model, const std::string& question, const Context& ctx,
               const PassageAttnTransform<R>* transform = nullptr, bool capture = false);

    // Logits for the given decoder prefix; recaptures attention when enabled.
    Tensor<R> decode_logits(std::span<const int> decoder_input);

    const AttentionTensorT<R>& attention() const { return attn_; }
    const std::vector<int64_t>& passage_offsets() const { return offsets_; }

private:
    const FidModelT<R>& model_;
    const PassageAttnTransform<R>* transform_;
    bool capture_;
    Tensor<R> enc_out_;
    std::vector<int64_t> offsets_;
    AttentionTensorT<R> attn_;
};

// Lowest index among maximal values (documented greedy tie-break).
template <class R>
int64_t argmax_lowest(std::span<const R> row) {
    int64_t best = 0;
    for (int64_t i = 1; i < static_cast<int64_t>(row.size()); ++i)
        if (row[static_cast<size_t>(i)] > row[static_cast<size_t>(best)]) best = i;
    return best;
}

// Argmax decoding loop over an arbitrary step function. `next_logits` maps the
// current decoder prefix (starting with BOS) to [prefix_len, vocab] logits.
// Stops at EOS or after max_len generated tokens.
template <class R>
std::vector<int> greedy_loop(const std::function<Tensor<R>(std::span<const int>)>& next_logits,
                             int eos_id, int bos_id, int max_len);

template <class R>
std::string greedy_decode(const FidModelT<R>& model, const std::string& question, const Context& ctx,
                          const PassageAttnTransform<R>* transform = nullptr,
                          AttentionTensorT<R>* attn_out = nullptr);

}  // namespace fidlab

#include "fidlab/model_impl.hpp"
