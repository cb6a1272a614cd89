#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fidlab/error.hpp"
#include "fidlab/graph.hpp"

namespace fidlab {

// Decoupled-weight-decay adaptive-moment optimizer with global-norm gradient
// clipping applied before the moment updates.
struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double max_grad_norm = 1.0;
};

template <class R>
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    int64_t step_count() const { return step_; }
    const OptimizerConfig& config() const { return cfg_; }

    // Clips grads in place, then applies one update at learning rate lr.
    // Throws NumericError naming the offending parameter on NaN gradients.
    void step(ParamStore<R>& params, double lr) {
        if (m_.empty()) init_state_(params);
        for (size_t i = 0; i < params.size(); ++i)
            for (R g : params[i].grad.data)
                if (!std::isfinite(static_cast<double>(g)))
                    throw NumericError("non-finite gradient in parameter '" + params[i].name +
                                       "' at optimizer step " + std::to_string(step_));
        clip_global_norm(params, cfg_.max_grad_norm);
        step_ += 1;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            auto& m = m_[i];
            auto& v = v_[i];
            for (int64_t j = 0; j < p.value.numel(); ++j) {
                double g = static_cast<double>(p.grad.data[j]);
                double mj = cfg_.beta1 * static_cast<double>(m.data[j]) + (1.0 - cfg_.beta1) * g;
                double vj = cfg_.beta2 * static_cast<double>(v.data[j]) + (1.0 - cfg_.beta2) * g * g;
                m.data[j] = static_cast<R>(mj);
                v.data[j] = static_cast<R>(vj);
                double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
                double w = static_cast<double>(p.value.data[j]);
                w -= lr * update + lr * cfg_.weight_decay * w;
                p.value.data[j] = static_cast<R>(w);
            }
        }
    }

    static double global_grad_norm(const ParamStore<R>& params) {
        double s = 0.0;
        for (size_t i = 0; i < params.size(); ++i)
            for (R g : params[i].grad.data) s += static_cast<double>(g) * static_cast<double>(g);
        return std::sqrt(s);
    }

    static double clip_global_norm(ParamStore<R>& params, double max_norm) {
        double norm = global_grad_norm(params);
        if (norm > max_norm && norm > 0.0) {
            R s = static_cast<R>(max_norm / norm);
            params.scale_grads(s);
        }
        return norm;
    }

private:
    void init_state_(const ParamStore<R>& params) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_.push_back(Tensor<R>::zeros(params[i].value.shape));
            v_.push_back(Tensor<R>::zeros(params[i].value.shape));
        }
    }

    OptimizerConfig cfg_;
    int64_t step_ = 0;
    std::vector<Tensor<R>> m_, v_;
};

}  // namespace fidlab
