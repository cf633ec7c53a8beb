#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tkgqa/errors.hpp"

namespace tkgqa {

// Dense row-major tensor of 64-bit floats, rank 1 or 2.
// Invariant: product(shape) == data.size().
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(count(shape), fill);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> values)
        : shape(std::move(s)), data(std::move(values)) {
        if (count(shape) != data.size()) {
            throw ShapeError("tensor: shape " + shape_str() + " does not match " +
                             std::to_string(data.size()) + " values");
        }
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return s.empty() ? 0 : n;
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor vector_of(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
        return Tensor({r, c}, std::move(v));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

    bool is_scalar() const { return size() == 1; }

    double& operator()(std::size_t i) { return data[i]; }
    double operator()(std::size_t i) const { return data[i]; }
    double& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

// Bit-level comparison: distinguishes -0.0 from 0.0 and treats equal NaN
// payloads as equal, which is what determinism checks need.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    return a.size() == 0 ||
           std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace tkgqa
