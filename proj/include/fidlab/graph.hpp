#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fidlab/error.hpp"
#include "fidlab/numerics.hpp"
#include "fidlab/tensor.hpp"

namespace fidlab {

// A named parameter with a gradient accumulator. Stored behind a stable
// address so graph nodes can reference it across batch elements.
template <class R>
struct Param {
    std::string name;
    Tensor<R> value;
    Tensor<R> grad;
};

template <class R>
class ParamStore {
public:
    Param<R>& add(std::string name, Tensor<R> init) {
        auto p = std::make_unique<Param<R>>();
        p->name = std::move(name);
        p->grad = Tensor<R>::zeros(init.shape);
        p->value = std::move(init);
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Param<R>* find(std::string_view name) {
        for (auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }
    const Param<R>* find(std::string_view name) const {
        for (const auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    size_t size() const { return params_.size(); }
    Param<R>& operator[](size_t i) { return *params_[i]; }
    const Param<R>& operator[](size_t i) const { return *params_[i]; }

    void zero_grads() {
        for (auto& p : params_)
            std::fill(p->grad.data.begin(), p->grad.data.end(), R(0));
    }

    void scale_grads(R s) {
        for (auto& p : params_)
            for (auto& g : p->grad.data) g *= s;
    }

    int64_t n_values() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

private:
    std::vector<std::unique_ptr<Param<R>>> params_;
};

// Attention block boundaries: query rows [q_begin,q_end) attend only to key
// rows [k_begin,k_end). The encoder passes one segment per passage, which is
// what keeps passages independent under Eq.-1-style encoding.
struct AttnSegment {
    int64_t q_begin, q_end, k_begin, k_end;
};

struct AttnHookCtx {
    int64_t q_index;   // query row within the op
    int64_t n_heads;
    int64_t k_len;     // keys visible to this row
    int64_t k_begin;   // first visible key row
};

// Called after softmax and before value mixing with all heads' probability
// rows for one query position, layout [n_heads][k_len]. The hook may rewrite
// the rows in place; each row must still sum to 1 within 1e-4.
template <class R>
using AttnHook = std::function<void(const AttnHookCtx&, R* probs)>;

// Reverse-mode tape over tensor-valued ops. Nodes are appended in execution
// order, so walking the tape backwards visits each node exactly once in
// reverse topological order. One Graph belongs to one logical thread.
template <class R>
class Graph {
public:
    using NodeId = int;

    const Tensor<R>& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor<R>& grad_of(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }
    size_t n_nodes() const { return nodes_.size(); }

    NodeId input(Tensor<R> t) { return push_(std::move(t), false, nullptr); }

    // Leaf that accumulates a gradient (used by grad_check and tests).
    NodeId leaf_grad(Tensor<R> t) { return push_(std::move(t), true, nullptr); }

    NodeId param(Param<R>& p) {
        Param<R>* pp = &p;
        NodeId id = push_(p.value, true, nullptr);
        node_(id).backward = [id, pp](Graph& g) {
            const auto& gr = g.node_(id).grad;
            for (size_t i = 0; i < gr.data.size(); ++i) pp->grad.data[i] += gr.data[i];
        };
        return id;
    }

    NodeId reshape(NodeId x, std::vector<int64_t> shape) {
        if (Tensor<R>::numel_of(shape) != val(x).numel())
            throw std::invalid_argument("reshape: element count mismatch");
        Tensor<R> out(std::move(shape), val(x).data);
        NodeId id = push_(std::move(out), needs_grad_(x), nullptr);
        node_(id).backward = [id, x](Graph& g) {
            g.accumulate_(x, g.node_(id).grad.data.data(), g.node_(id).grad.numel());
        };
        return id;
    }

    // Rows [begin, end) of a 2-D view of x.
    NodeId slice_rows(NodeId x, int64_t begin, int64_t end) {
        const auto& tx = val(x);
        int64_t c = tx.cols();
        if (begin < 0 || end > tx.rows() || begin >= end)
            throw std::invalid_argument("slice_rows: bad range");
        Tensor<R> out({end - begin, c});
        std::copy_n(tx.data.data() + begin * c, (end - begin) * c, out.data.data());
        NodeId id = push_(std::move(out), needs_grad_(x), nullptr);
        node_(id).backward = [id, x, begin, c](Graph& g) {
            if (!g.needs_grad_(x)) return;
            const auto& gr = g.node_(id).grad;
            auto& xg = g.grad_buf_(x);
            for (int64_t i = 0; i < gr.numel(); ++i) xg.data[begin * c + i] += gr.data[i];
        };
        return id;
    }

    NodeId add(NodeId a, NodeId b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch");
        Tensor<R> out = ta;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += tb.data[i];
        NodeId id = push_(std::move(out), needs_grad_(a) || needs_grad_(b), nullptr);
        node_(id).backward = [id, a, b](Graph& g) {
            const auto& gr = g.node_(id).grad;
            g.accumulate_(a, gr.data.data(), gr.numel());
            g.accumulate_(b, gr.data.data(), gr.numel());
        };
        return id;
    }

    // x: [rows, c], bias: [c] broadcast over rows.
    NodeId add_bias(NodeId x, NodeId bias) {
        const auto& tx = val(x);
        const auto& tb = val(bias);
        int64_t c = tx.cols();
        if (tb.numel() != c) throw std::invalid_argument("add_bias: bias size mismatch");
        Tensor<R> out = tx;
        int64_t rows = tx.rows();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j) out.data[r * c + j] += tb.data[j];
        NodeId id = push_(std::move(out), needs_grad_(x) || needs_grad_(bias), nullptr);
        node_(id).backward = [id, x, bias, rows, c](Graph& g) {
            const auto& gr = g.node_(id).grad;
            g.accumulate_(x, gr.data.data(), gr.numel());
            if (g.needs_grad_(bias)) {
                auto& bg = g.grad_buf_(bias);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < c; ++j) bg.data[j] += gr.data[r * c + j];
            }
        };
        return id;
    }

    NodeId scale(NodeId x, R s) {
        Tensor<R> out = val(x);
        for (auto& v : out.data) v *= s;
        NodeId id = push_(std::move(out), needs_grad_(x), nullptr);
        node_(id).backward = [id, x, s](Graph& g) {
            if (!g.needs_grad_(x)) return;
            const auto& gr = g.node_(id).grad;
            auto& xg = g.grad_buf_(x);
            for (int64_t i = 0; i < gr.numel(); ++i) xg.data[i] += s * gr.data[i];
        };
        return id;
    }

    NodeId relu(NodeId x) {
        Tensor<R> out = val(x);
        for (auto& v : out.data)
            if (v < R(0)) v = R(0);
        NodeId id = push_(std::move(out), needs_grad_(x), nullptr);
        node_(id).backward = [id, x](Graph& g) {
            if (!g.needs_grad_(x)) return;
            const auto& gr = g.node_(id).grad;
            const auto& tx = g.val(x);
            auto& xg = g.grad_buf_(x);
            for (int64_t i = 0; i < gr.numel(); ++i)
                if (tx.data[i] > R(0)) xg.data[i] += gr.data[i];
        };
        return id;
    }

    // a: [m,k] (any leading shape collapsed to rows), b: [k,n] -> [m,n].
    NodeId matmul(NodeId a, NodeId b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        int64_t m = ta.rows(), k = ta.cols(), k2 = tb.rows(), n = tb.cols();
        if (k != k2) throw std::invalid_argument("matmul: inner dimension mismatch " +
                                                 shape_str(ta.shape) + " x " + shape_str(tb.shape));
        Tensor<R> out({m, n});
        matmul_kernel_(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
        NodeId id = push_(std::move(out), needs_grad_(a) || needs_grad_(b), nullptr);
        node_(id).backward = [id, a, b, m, k, n](Graph& g) {
            const auto& gr = g.node_(id).grad;
            const auto& ta2 = g.val(a);
            const auto& tb2 = g.val(b);
            if (g.needs_grad_(a)) {
                // dA[i,l] += sum_j G[i,j] * B[l,j]
                auto& ag = g.grad_buf_(a);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t l = 0; l < k; ++l) {
                        R acc = R(0);
                        const R* grow = gr.data.data() + i * n;
                        const R* brow = tb2.data.data() + l * n;
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ag.data[i * k + l] += acc;
                    }
            }
            if (g.needs_grad_(b)) {
                // dB[l,j] += sum_i A[i,l] * G[i,j]
                auto& bg = g.grad_buf_(b);
                for (int64_t i = 0; i < m; ++i) {
                    const R* arow = ta2.data.data() + i * k;
                    const R* grow = gr.data.data() + i * n;
                    for (int64_t l = 0; l < k; ++l) {
                        R av = arow[l];
                        if (av == R(0)) continue;
                        R* brow = bg.data.data() + l * n;
                        for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        };
        return id;
    }

    // table: [V, d], ids: row indices -> [ids.size(), d].
    NodeId gather_rows(NodeId table, std::vector<int> ids) {
        const auto& tt = val(table);
        int64_t v = tt.rows(), d = tt.cols();
        for (int idx : ids)
            if (idx < 0 || idx >= v)
                throw std::invalid_argument("gather_rows: id out of range");
        Tensor<R> out({static_cast<int64_t>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy_n(tt.data.data() + static_cast<int64_t>(ids[i]) * d, d,
                        out.data.data() + static_cast<int64_t>(i) * d);
        NodeId id = push_(std::move(out), needs_grad_(table), nullptr);
        auto ids_ptr = std::make_shared<std::vector<int>>(std::move(ids));
        node_(id).backward = [id, table, d, ids_ptr](Graph& g) {
            if (!g.needs_grad_(table)) return;
            const auto& gr = g.node_(id).grad;
            auto& tg = g.grad_buf_(table);
            for (size_t i = 0; i < ids_ptr->size(); ++i) {
                const R* src = gr.data.data() + static_cast<int64_t>(i) * d;
                R* dst = tg.data.data() + static_cast<int64_t>((*ids_ptr)[i]) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
        return id;
    }

    // Row-wise layer norm with affine parameters gamma/beta of size [cols].
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
        const auto& tx = val(x);
        int64_t rows = tx.rows(), c = tx.cols();
        if (val(gamma).numel() != c || val(beta).numel() != c)
            throw std::invalid_argument("layer_norm: affine size mismatch");
        Tensor<R> out(tx.shape);
        auto xhat = std::make_shared<Tensor<R>>(tx.shape);
        auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
        const auto& gm = val(gamma);
        const auto& bt = val(beta);
        for (int64_t r = 0; r < rows; ++r) {
            const R* row = tx.data.data() + r * c;
            double mu = 0.0;
            for (int64_t j = 0; j < c; ++j) mu += static_cast<double>(row[j]);
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (int64_t j = 0; j < c; ++j) {
                double dv = static_cast<double>(row[j]) - mu;
                var += dv * dv;
            }
            var /= static_cast<double>(c);
            double is = 1.0 / std::sqrt(var + eps);
            (*inv_sigma)[static_cast<size_t>(r)] = is;
            for (int64_t j = 0; j < c; ++j) {
                double xh = (static_cast<double>(row[j]) - mu) * is;
                xhat->data[r * c + j] = static_cast<R>(xh);
                out.data[r * c + j] = static_cast<R>(xh * static_cast<double>(gm.data[j]) +
                                                     static_cast<double>(bt.data[j]));
            }
        }
        NodeId id = push_(std::move(out), needs_grad_(x) || needs_grad_(gamma) || needs_grad_(beta), nullptr);
        node_(id).backward = [id, x, gamma, beta, rows, c, xhat, inv_sigma](Graph& g) {
            const auto& gr = g.node_(id).grad;
            const auto& gm = g.val(gamma);
            for (int64_t r = 0; r < rows; ++r) {
                const R* grow = gr.data.data() + r * c;
                const R* xh = xhat->data.data() + r * c;
                if (g.needs_grad_(gamma)) {
                    auto& gg = g.grad_buf_(gamma);
                    for (int64_t j = 0; j < c; ++j) gg.data[j] += grow[j] * xh[j];
                }
                if (g.needs_grad_(beta)) {
                    auto& bg = g.grad_buf_(beta);
                    for (int64_t j = 0; j < c; ++j) bg.data[j] += grow[j];
                }
                if (g.needs_grad_(x)) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int64_t j = 0; j < c; ++j) {
                        double dxh = static_cast<double>(grow[j]) * static_cast<double>(gm.data[j]);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * static_cast<double>(xh[j]);
                    }
                    mean_dxhat /= static_cast<double>(c);
                    mean_dxhat_xhat /= static_cast<double>(c);
                    double is = (*inv_sigma)[static_cast<size_t>(r)];
                    auto& xg = g.grad_buf_(x);
                    for (int64_t j = 0; j < c; ++j) {
                        double dxh = static_cast<double>(grow[j]) * static_cast<double>(gm.data[j]);
                        xg.data[r * c + j] += static_cast<R>(
                            (dxh - mean_dxhat - static_cast<double>(xh[j]) * mean_dxhat_xhat) * is);
                    }
                }
            }
        };
        return id;
    }

    NodeId softmax_rows(NodeId x) {
        const auto& tx = val(x);
        int64_t rows = tx.rows(), c = tx.cols();
        Tensor<R> out(tx.shape);
        for (int64_t r = 0; r < rows; ++r)
            softmax_row_(tx.data.data() + r * c, out.data.data() + r * c, c);
        NodeId id = push_(std::move(out), needs_grad_(x), nullptr);
        node_(id).backward = [id, x, rows, c](Graph& g) {
            if (!g.needs_grad_(x)) return;
            const auto& gr = g.node_(id).grad;
            const auto& y = g.val(id);
            auto& xg = g.grad_buf_(x);
            for (int64_t r = 0; r < rows; ++r) {
                const R* yrow = y.data.data() + r * c;
                const R* grow = gr.data.data() + r * c;
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += static_cast<double>(grow[j]) * static_cast<double>(yrow[j]);
                for (int64_t j = 0; j < c; ++j)
                    xg.data[r * c + j] += static_cast<R>(static_cast<double>(yrow[j]) *
                                                         (static_cast<double>(grow[j]) - dot));
            }
        };
        return id;
    }

    NodeId sum(NodeId x) {
        double s = 0.0;
        for (R v : val(x).data) s += static_cast<double>(v);
        Tensor<R> out({1});
        out.data[0] = static_cast<R>(s);
        NodeId id = push_(std::move(out), needs_grad_(x), nullptr);
        node_(id).backward = [id, x](Graph& g) {
            if (!g.needs_grad_(x)) return;
            R gv = g.node_(id).grad.data[0];
            auto& xg = g.grad_buf_(x);
            for (auto& v : xg.data) v += gv;
        };
        return id;
    }

    // Mean of -log softmax(row)[target] over rows with target >= 0.
    NodeId cross_entropy(NodeId logits, std::vector<int> targets) {
        const auto& tl = val(logits);
        int64_t rows = tl.rows(), vocab = tl.cols();
        if (static_cast<int64_t>(targets.size()) != rows)
            throw std::invalid_argument("cross_entropy: one target per row required");
        double total = 0.0;
        int64_t n_unmasked = 0;
        for (int64_t r = 0; r < rows; ++r) {
            int t = targets[static_cast<size_t>(r)];
            if (t < 0) continue;
            if (t >= vocab) throw std::invalid_argument("cross_entropy: target id out of range");
            const R* row = tl.data.data() + r * vocab;
            total += log_sum_exp(row, vocab) - static_cast<double>(row[t]);
            ++n_unmasked;
        }
        Tensor<R> out({1});
        out.data[0] = static_cast<R>(n_unmasked ? total / static_cast<double>(n_unmasked) : 0.0);
        NodeId id = push_(std::move(out), needs_grad_(logits), nullptr);
        auto tg = std::make_shared<std::vector<int>>(std::move(targets));
        node_(id).backward = [id, logits, rows, vocab, n_unmasked, tg](Graph& g) {
            if (!g.needs_grad_(logits) || n_unmasked == 0) return;
            R gv = g.node_(id).grad.data[0];
            const auto& tl2 = g.val(logits);
            auto& lg = g.grad_buf_(logits);
            double inv_n = 1.0 / static_cast<double>(n_unmasked);
            std::vector<R> p(static_cast<size_t>(vocab));
            for (int64_t r = 0; r < rows; ++r) {
                int t = (*tg)[static_cast<size_t>(r)];
                if (t < 0) continue;
                softmax_row_(tl2.data.data() + r * vocab, p.data(), vocab);
                R* grow = lg.data.data() + r * vocab;
                for (int64_t j = 0; j < vocab; ++j)
                    grow[j] += static_cast<R>(static_cast<double>(gv) * inv_n *
                                              (static_cast<double>(p[static_cast<size_t>(j)]) - (j == t ? 1.0 : 0.0)));
            }
        };
        return id;
    }

    // Fused multi-head scaled-dot-product attention restricted to segments.
    // q, k, v: [rows, d_model] with d_model divisible by n_heads. Within a
    // segment, query row i sees keys [k_begin, k_end), or the causal prefix
    // when causal=true (which requires matching q/k segment lengths).
    // The hook observes and may rewrite post-softmax rows; hooked nodes are
    // inference-only (no backward pass).
    NodeId attention(NodeId q, NodeId k, NodeId v, int64_t n_heads,
                     std::vector<AttnSegment> segments, bool causal,
                     const AttnHook<R>* hook = nullptr) {
        const auto& tq = val(q);
        const auto& tk = val(k);
        const auto& tv = val(v);
        int64_t d = tq.cols();
        if (tk.cols() != d || tv.cols() != d)
            throw std::invalid_argument("attention: d_model mismatch");
        if (d % n_heads != 0) throw std::invalid_argument("attention: d_model % n_heads != 0");
        int64_t dh = d / n_heads;
        double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));

        Tensor<R> out({tq.rows(), d});
        // Post-softmax probabilities, stored per segment as
        // [q_len][n_heads][k_len] blocks for the backward pass and hooks.
        auto probs = std::make_shared<std::vector<R>>();
        auto seg_off = std::make_shared<std::vector<size_t>>();
        size_t total = 0;
        for (const auto& s : segments) {
            seg_off->push_back(total);
            total += static_cast<size_t>((s.q_end - s.q_begin) * n_heads * (s.k_end - s.k_begin));
        }
        probs->assign(total, R(0));

        std::vector<double> scores;
        for (size_t si = 0; si < segments.size(); ++si) {
            const auto& s = segments[si];
            int64_t klen_full = s.k_end - s.k_begin;
            for (int64_t qi = s.q_begin; qi < s.q_end; ++qi) {
                int64_t klen = causal ? std::min(klen_full, qi - s.q_begin + 1) : klen_full;
                R* prow_base = probs->data() +
                               (*seg_off)[si] +
                               static_cast<size_t>((qi - s.q_begin) * n_heads * klen_full);
                for (int64_t h = 0; h < n_heads; ++h) {
                    const R* qv = tq.data.data() + qi * d + h * dh;
                    scores.assign(static_cast<size_t>(klen), 0.0);
                    for (int64_t j = 0; j < klen; ++j) {
                        const R* kv = tk.data.data() + (s.k_begin + j) * d + h * dh;
                        double acc = 0.0;
                        for (int64_t t = 0; t < dh; ++t)
                            acc += static_cast<double>(qv[t]) * static_cast<double>(kv[t]);
                        scores[static_cast<size_t>(j)] = acc * scale_f;
                    }
                    // softmax over the visible prefix
                    double mx = scores[0];
                    for (double sv : scores) mx = std::max(mx, sv);
                    double denom = 0.0;
                    R* prow = prow_base + h * klen_full;
                    for (int64_t j = 0; j < klen; ++j) {
                        double e = std::exp(scores[static_cast<size_t>(j)] - mx);
                        prow[j] = static_cast<R>(e);
                        denom += e;
                    }
                    for (int64_t j = 0; j < klen; ++j)
                        prow[j] = static_cast<R>(static_cast<double>(prow[j]) / denom);
                }
                if (hook && *hook) {
                    AttnHookCtx ctx{qi, n_heads, klen, s.k_begin};
                    if (causal && klen != klen_full)
                        throw ContractError("attention: hooks on causal prefixes are unsupported");
                    (*hook)(ctx, prow_base);
                    for (int64_t h = 0; h < n_heads; ++h) {
                        const R* prow = prow_base + h * klen_full;
                        double rs = 0.0;
                        for (int64_t j = 0; j < klen; ++j) rs += static_cast<double>(prow[j]);
                        if (std::abs(rs - 1.0) > 1e-4)
                            throw ContractError("attention transform returned a non-normalized row (sum " +
                                                std::to_string(rs) + ")");
                    }
                }
                for (int64_t h = 0; h < n_heads; ++h) {
                    const R* prow = prow_base + h * klen_full;
                    R* orow = out.data.data() + qi * d + h * dh;
                    std::array<double, 64> acc{};  // dh <= 64 per config invariants
                    assert(dh <= 64);
                    for (int64_t j = 0; j < klen; ++j) {
                        double pj = static_cast<double>(prow[j]);
                        if (pj == 0.0) continue;
                        const R* vv = tv.data.data() + (s.k_begin + j) * d + h * dh;
                        for (int64_t t = 0; t < dh; ++t) acc[static_cast<size_t>(t)] += pj * static_cast<double>(vv[t]);
                    }
                    for (int64_t t = 0; t < dh; ++t) orow[t] = static_cast<R>(acc[static_cast<size_t>(t)]);
                }
            }
        }

        bool hooked = hook != nullptr && *hook;
        NodeId id = push_(std::move(out), !hooked && (needs_grad_(q) || needs_grad_(k) || needs_grad_(v)), nullptr);
        auto segs = std::make_shared<std::vector<AttnSegment>>(std::move(segments));
        node_(id).backward = [id, q, k, v, n_heads, dh, scale_f, causal, probs, seg_off, segs, hooked](Graph& g) {
            if (hooked) throw ContractError("attention: backward through a hooked node");
            if (!(g.needs_grad_(q) || g.needs_grad_(k) || g.needs_grad_(v))) return;
            const auto& gr = g.node_(id).grad;
            const auto& tq2 = g.val(q);
            const auto& tk2 = g.val(k);
            const auto& tv2 = g.val(v);
            int64_t d = dh * n_heads;
            auto& qg = g.grad_buf_(q);
            auto& kg = g.grad_buf_(k);
            auto& vg = g.grad_buf_(v);
            std::vector<double> dp;
            for (size_t si = 0; si < segs->size(); ++si) {
                const auto& s = (*segs)[si];
                int64_t klen_full = s.k_end - s.k_begin;
                for (int64_t qi = s.q_begin; qi < s.q_end; ++qi) {
                    int64_t klen = causal ? std::min(klen_full, qi - s.q_begin + 1) : klen_full;
                    const R* prow_base = probs->data() +
                                         (*seg_off)[si] +
                                         static_cast<size_t>((qi - s.q_begin) * n_heads * klen_full);
                    for (int64_t h = 0; h < n_heads; ++h) {
                        const R* prow = prow_base + h * klen_full;
                        const R* grow = gr.data.data() + qi * d + h * dh;
                        dp.assign(static_cast<size_t>(klen), 0.0);
                        double dot_dp_p = 0.0;
                        for (int64_t j = 0; j < klen; ++j) {
                            const R* vv = tv2.data.data() + (s.k_begin + j) * d + h * dh;
                            double acc = 0.0;
                            for (int64_t t = 0; t < dh; ++t)
                                acc += static_cast<double>(grow[t]) * static_cast<double>(vv[t]);
                            dp[static_cast<size_t>(j)] = acc;
                            dot_dp_p += acc * static_cast<double>(prow[j]);
                            // dV = P^T dO
                            R* vgrow = vg.data.data() + (s.k_begin + j) * d + h * dh;
                            double pj = static_cast<double>(prow[j]);
                            for (int64_t t = 0; t < dh; ++t)
                                vgrow[t] += static_cast<R>(pj * static_cast<double>(grow[t]));
                        }
                        const R* qv = tq2.data.data() + qi * d + h * dh;
                        R* qgrow = qg.data.data() + qi * d + h * dh;
                        for (int64_t j = 0; j < klen; ++j) {
                            double ds = static_cast<double>(prow[j]) * (dp[static_cast<size_t>(j)] - dot_dp_p) * scale_f;
                            if (ds == 0.0) continue;
                            const R* kv = tk2.data.data() + (s.k_begin + j) * d + h * dh;
                            R* kgrow = kg.data.data() + (s.k_begin + j) * d + h * dh;
                            for (int64_t t = 0; t < dh; ++t) {
                                qgrow[t] += static_cast<R>(ds * static_cast<double>(kv[t]));
                                kgrow[t] += static_cast<R>(ds * static_cast<double>(qv[t]));
                            }
                        }
                    }
                }
            }
        };
        return id;
    }

    // Read post-softmax probabilities of an attention node (capture path).
    // Layout per segment block: [q_len][n_heads][k_len].

    // Seeds d(loss)/d(loss)=1 and walks the tape in reverse creation order.
    void backward(NodeId loss) {
        auto& ln = node_(loss);
        if (ln.value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!ln.needs_grad) return;
        grad_buf_(loss).data[0] = R(1);
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            auto& n = nodes_[static_cast<size_t>(id)];
            if (!n.needs_grad || n.grad.data.empty() || !n.backward) continue;
            n.backward(*this);
        }
    }

private:
    struct Node {
        Tensor<R> value;
        Tensor<R> grad;  // lazily allocated
        bool needs_grad = false;
        std::function<void(Graph&)> backward;
    };

    Node& node_(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    bool needs_grad_(NodeId id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    Tensor<R>& grad_buf_(NodeId id) {
        auto& n = node_(id);
        if (n.grad.data.empty()) n.grad = Tensor<R>::zeros(n.value.shape);
        return n.grad;
    }

    void accumulate_(NodeId id, const R* g, int64_t n) {
        if (!needs_grad_(id)) return;
        auto& buf = grad_buf_(id);
        for (int64_t i = 0; i < n; ++i) buf.data[i] += g[i];
    }

    static void softmax_row_(const R* x, R* y, int64_t n) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(x[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double e = std::exp(static_cast<double>(x[j]) - mx);
            y[j] = static_cast<R>(e);
            denom += e;
        }
        for (int64_t j = 0; j < n; ++j) y[j] = static_cast<R>(static_cast<double>(y[j]) / denom);
    }

    static void matmul_kernel_(const R* __restrict a, const R* __restrict b, R* __restrict c,
                               int64_t m, int64_t k, int64_t n) {
        for (int64_t i = 0; i < m; ++i) {
            R* __restrict crow = c + i * n;
            const R* arow = a + i * k;
            for (int64_t l = 0; l < k; ++l) {
                R av = arow[l];
                const R* __restrict brow = b + l * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }

    NodeId push_(Tensor<R> value, bool needs_grad, std::function<void(Graph&)> back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

}  // namespace fidlab
