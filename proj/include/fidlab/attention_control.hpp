#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fidlab/error.hpp"
#include "fidlab/model.hpp"

namespace fidlab {

// Hard relevance intervention: impose a target irrelevant:relevant attention
// ratio r per passage. r=0 ignores irrelevant passages entirely, r=1 attends
// uniformly to all passages.
struct InterventionSpec {
    double r = 1.0;
    std::vector<bool> relevance_mask;  // per passage

    void validate() const {
        if (r < 0.0) throw std::invalid_argument("intervention: r must be >= 0");
    }
};

// Temperature recalibration of per-passage attention mass. Needs no
// relevance information.
struct TemperatureSpec {
    double temperature = 1.0;
    double epsilon_floor = 1e-12;  // applied to zero passage masses before the log

    void validate() const {
        if (!(temperature > 0.0)) throw std::invalid_argument("temperature: T must be > 0");
        if (!(epsilon_floor > 0.0)) throw std::invalid_argument("temperature: epsilon_floor must be > 0");
    }
};

// Per-passage weights w_i = 1/(n+ + r*n-) for relevant passages and
// r/(n+ + r*n-) for irrelevant ones; they sum to 1 by construction.
inline std::vector<double> intervention_weights(const InterventionSpec& spec, int n_plus,
                                                int n_minus) {
    spec.validate();
    if (n_plus < 0 || n_minus < 0 || n_plus + n_minus < 1)
        throw std::invalid_argument("intervention_weights: invalid passage counts");
    if (n_plus == 0 && spec.r == 0.0)
        throw std::invalid_argument("intervention_weights: degenerate denominator (n+ = 0 and r = 0)");
    if (static_cast<int>(spec.relevance_mask.size()) != n_plus + n_minus)
        throw std::invalid_argument("intervention_weights: mask length != n+ + n-");
    double denom = static_cast<double>(n_plus) + spec.r * static_cast<double>(n_minus);
    std::vector<double> w(spec.relevance_mask.size());
    for (size_t i = 0; i < w.size(); ++i)
        w[i] = (spec.relevance_mask[i] ? 1.0 : spec.r) / denom;
    return w;
}

// Eq.-2 rescaling of one per-head probability row: passage i's total mass
// becomes weights[i] while within-passage token proportions are preserved.
// A passage with zero mass but nonzero target weight receives its weight
// spread uniformly over its tokens.
template <class R>
void apply_passage_weights(R* row, int64_t n_keys, std::span<const int64_t> passage_offsets,
                           std::span<const double> weights) {
    size_t n = passage_offsets.size();
    if (weights.size() != n)
        throw std::invalid_argument("apply_passage_weights: weights/offsets length mismatch");
    for (size_t i = 0; i < n; ++i) {
        int64_t begin = passage_offsets[i];
        int64_t end = i + 1 < n ? passage_offsets[i + 1] : n_keys;
        double total = 0.0;
        for (int64_t j = begin; j < end; ++j) total += static_cast<double>(row[j]);
        if (total > 0.0) {
            double s = weights[i] / total;
            for (int64_t j = begin; j < end; ++j)
                row[j] = static_cast<R>(static_cast<double>(row[j]) * s);
        } else {
            double u = weights[i] / static_cast<double>(end - begin);
            for (int64_t j = begin; j < end; ++j) row[j] = static_cast<R>(u);
        }
    }
}

// Head-averaged per-passage attention mass at one (layer, decoder position).
template <class R>
std::vector<double> passage_totals(const AttentionTensorT<R>& attn, int layer, int pos) {
    std::vector<double> totals(static_cast<size_t>(attn.n_passages()), 0.0);
    for (int i = 0; i < attn.n_passages(); ++i) {
        double m = 0.0;
        for (int h = 0; h < attn.n_heads; ++h)
            for (int64_t j = attn.segment_begin(i); j < attn.segment_end(i); ++j)
                m += static_cast<double>(attn.at(layer, h, pos, j));
        totals[static_cast<size_t>(i)] = m / attn.n_heads;
    }
    return totals;
}

// Eq. 3: weights = softmax(log(totals)/T) over passages, i.e. totals^{1/T}
// renormalized. Zero totals are floored at epsilon before the log.
inline std::vector<double> temperature_weights_from_totals(std::span<const double> totals,
                                                           const TemperatureSpec& spec) {
    spec.validate();
    std::vector<double> logits(totals.size());
    for (size_t i = 0; i < totals.size(); ++i)
        logits[i] = std::log(std::max(totals[i], spec.epsilon_floor));
    return softmax(logits, spec.temperature);
}

template <class R>
std::vector<double> temperature_weights(const AttentionTensorT<R>& attn, int layer, int pos,
                                        const TemperatureSpec& spec) {
    auto totals = passage_totals(attn, layer, pos);
    return temperature_weights_from_totals(totals, spec);
}

// Transform applying Eq. 2 with fixed intervention weights at every decoder
// layer and position. Weights are shared across heads; each head is rescaled
// with its own within-passage normalizer.
template <class R>
PassageAttnTransform<R> make_intervention_transform(InterventionSpec spec) {
    spec.validate();
    return [spec = std::move(spec)](int /*layer*/, int64_t /*pos*/,
                                    std::span<const int64_t> offsets, int64_t n_keys,
                                    int64_t n_heads, R* probs) {
        if (offsets.size() != spec.relevance_mask.size())
            throw std::invalid_argument("intervention transform: mask length != passage count");
        int n_plus = 0;
        for (bool b : spec.relevance_mask) n_plus += b ? 1 : 0;
        int n_minus = static_cast<int>(spec.relevance_mask.size()) - n_plus;
        auto w = intervention_weights(spec, n_plus, n_minus);
        for (int64_t h = 0; h < n_heads; ++h)
            apply_passage_weights(probs + h * n_keys, n_keys, offsets, w);
    };
}

// Transform recomputing Eq.-3 temperature weights from the head-averaged
// per-passage totals of the current (layer, position) row block, then
// applying them through Eq. 2 per head.
template <class R>
PassageAttnTransform<R> make_temperature_transform(TemperatureSpec spec) {
    spec.validate();
    return [spec](int /*layer*/, int64_t /*pos*/, std::span<const int64_t> offsets, int64_t n_keys,
                  int64_t n_heads, R* probs) {
        size_t n = offsets.size();
        std::vector<double> totals(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            int64_t begin = offsets[i];
            int64_t end = i + 1 < n ? offsets[i + 1] : n_keys;
            double m = 0.0;
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t j = begin; j < end; ++j)
                    m += static_cast<double>(probs[h * n_keys + j]);
            totals[i] = m / static_cast<double>(n_heads);
        }
        auto w = temperature_weights_from_totals(totals, spec);
        for (int64_t h = 0; h < n_heads; ++h)
            apply_passage_weights(probs + h * n_keys, n_keys, offsets, w);
    };
}

}  // namespace fidlab
