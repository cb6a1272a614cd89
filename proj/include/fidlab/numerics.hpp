#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fidlab/error.hpp"

namespace fidlab {

// Temperature softmax with max-subtraction; the denominator accumulates in
// double so row sums stay within 1e-6 of 1 even for float inputs.
template <class R>
std::vector<R> softmax(const std::vector<R>& logits, R temperature) {
    if (!(static_cast<double>(temperature) > 0.0))
        throw std::invalid_argument("softmax: temperature must be > 0");
    for (R v : logits)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("softmax: non-finite logit");
    std::vector<R> out(logits.size());
    if (logits.empty()) return out;
    double t = static_cast<double>(temperature);
    double mx = -std::numeric_limits<double>::infinity();
    for (R v : logits) mx = std::max(mx, static_cast<double>(v) / t);
    double denom = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double e = std::exp(static_cast<double>(logits[i]) / t - mx);
        out[i] = static_cast<R>(e);
        denom += e;
    }
    for (auto& v : out) v = static_cast<R>(static_cast<double>(v) / denom);
    return out;
}

template <class R>
double log_sum_exp(const R* x, int64_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(x[i]));
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(x[i]) - mx);
    return mx + std::log(s);
}

// Mean of -log softmax(logits_row)[target] over unmasked positions.
// logits: row-major [n_positions, vocab]; targets[i] < 0 marks padding.
template <class R>
double cross_entropy(const std::vector<R>& logits, int64_t vocab, const std::vector<int>& targets) {
    if (vocab <= 0) throw std::invalid_argument("cross_entropy: vocab must be positive");
    if (logits.size() != targets.size() * static_cast<size_t>(vocab))
        throw std::invalid_argument("cross_entropy: logits/targets size mismatch");
    double total = 0.0;
    int64_t n_unmasked = 0;
    for (size_t i = 0; i < targets.size(); ++i) {
        int t = targets[i];
        if (t < 0) continue;
        if (t >= vocab)
            throw std::invalid_argument("cross_entropy: target id " + std::to_string(t) +
                                        " out of range for vocab " + std::to_string(vocab));
        const R* row = logits.data() + i * static_cast<size_t>(vocab);
        total += log_sum_exp(row, vocab) - static_cast<double>(row[t]);
        ++n_unmasked;
    }
    if (n_unmasked == 0) return 0.0;
    return total / static_cast<double>(n_unmasked);
}

// Linear ramp from 0 to base_lr over warmup_steps, constant afterwards.
inline double lr_at(int64_t step, int64_t warmup_steps, double base_lr) {
    if (warmup_steps <= 0) throw std::invalid_argument("lr_at: warmup_steps must be positive");
    if (step < 0) throw std::invalid_argument("lr_at: step must be nonnegative");
    if (step >= warmup_steps) return base_lr;
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

}  // namespace fidlab
