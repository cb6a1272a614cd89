#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "fidlab/graph.hpp"

namespace fidlab {

// Finite-difference verification of the reverse-mode gradients, always in
// double precision. `build` constructs a scalar-valued node from one leaf.
struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t worst_coord = -1;
    double ad = 0.0, fd = 0.0;  // gradients at the worst coordinate
};

using ScalarGraphFn = std::function<Graph<double>::NodeId(Graph<double>&, Graph<double>::NodeId)>;

inline double eval_scalar_fn(const ScalarGraphFn& build, const Tensor<double>& point) {
    Graph<double> g;
    auto x = g.input(point);
    auto y = build(g, x);
    if (g.val(y).numel() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
    return g.val(y).data[0];
}

inline GradCheckReport grad_check(const ScalarGraphFn& build, const Tensor<double>& point,
                                  double step = 1e-5) {
    Graph<double> g;
    auto x = g.leaf_grad(point);
    auto y = build(g, x);
    if (g.val(y).numel() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
    g.backward(y);
    Tensor<double> g_ad = g.grad_of(x);
    if (g_ad.data.empty()) g_ad = Tensor<double>::zeros(point.shape);

    GradCheckReport rep;
    Tensor<double> p = point;
    for (int64_t i = 0; i < p.numel(); ++i) {
        if (!std::isfinite(g_ad.data[i]))
            throw NumericError("grad_check: non-finite reverse-mode gradient at coordinate " +
                               std::to_string(i));
        double orig = p.data[i];
        p.data[i] = orig + step;
        double fp = eval_scalar_fn(build, p);
        p.data[i] = orig - step;
        double fm = eval_scalar_fn(build, p);
        p.data[i] = orig;
        double g_fd = (fp - fm) / (2.0 * step);
        double rel = std::abs(g_ad.data[i] - g_fd) / std::max(1.0, std::abs(g_fd));
        if (rel >= rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_coord = i;
            rep.ad = g_ad.data[i];
            rep.fd = g_fd;
        }
    }
    return rep;
}

}  // namespace fidlab
