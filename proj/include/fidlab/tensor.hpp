#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fidlab/error.hpp"
#include "fidlab/rng.hpp"

namespace fidlab {

// Dense row-major tensor. Training uses Tensor<float>; gradient verification
// instantiates the same code with double.
template <class R>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<R> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), R(0));
    }
    Tensor(std::vector<int64_t> s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    // 2-D accessors; rows() is the product of all leading dimensions.
    int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
    int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    R& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    const R& at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (R v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, R v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor randn(std::vector<int64_t> s, R stddev, std::mt19937_64& rng) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = static_cast<R>(normal(rng)) * stddev;
        return t;
    }

    template <class R2>
    Tensor<R2> cast() const {
        Tensor<R2> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<R2>(data[i]);
        return t;
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace fidlab
