#pragma once

// Dense row-major tensor of 64-bit floats. Rank 0..2 covers everything this
// project computes; all math stays in double so gradient checks at 1e-3
// tolerance are meaningful.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "meet/rng.hpp"

namespace meet {

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)) {
        v_.assign(checked_numel(shape_), 0.0);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (v_.size() != checked_numel(shape_)) {
            throw std::invalid_argument("Tensor: " + std::to_string(v_.size()) +
                                        " values for shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.v_) x = v;
        return t;
    }

    static Tensor gaussian(std::vector<std::size_t> shape, double stddev, SeededRng& rng) {
        Tensor t(std::move(shape));
        for (double& x : t.v_) x = stddev * rng.next_gaussian();
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return v_.size(); }

    std::size_t rows() const { return ndim() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return ndim() == 2 ? shape_[1] : numel(); }

    bool is_scalar() const { return numel() == 1; }

    double item() const {
        if (!is_scalar()) {
            throw std::invalid_argument("Tensor::item on non-scalar shape " + shape_str(shape_));
        }
        return v_[0];
    }

    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }

    double& at(std::size_t r, std::size_t c) { return v_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return v_[r * cols() + c]; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    const std::vector<double>& values() const { return v_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : v_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << 'x';
            os << s[i];
        }
        os << ')';
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape_); }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw std::invalid_argument("Tensor: zero dimension in shape " + shape_str(shape));
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> v_;
};

// ---- raw matrix kernels (no autodiff) --------------------------------------
// Inner loops are laid out so gcc vectorizes them; matrices here are small
// enough to live in L1/L2.

namespace detail {

// C[M x N] += or = A[M x K] * B[K x N]
inline void mm_nn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M x N] = A[M x K] * B^T where B is [N x K]
inline void mm_nt(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[K x N] = A^T * B where A is [M x K], B is [M x N]
inline void mm_tn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

// Plain C = A * B with optional transposes, outside any tape.
inline Tensor matmul_raw(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
    const std::size_t am = trans_a ? a.cols() : a.rows();
    const std::size_t ak = trans_a ? a.rows() : a.cols();
    const std::size_t bk = trans_b ? b.cols() : b.rows();
    const std::size_t bn = trans_b ? b.rows() : b.cols();
    if (ak != bk) {
        throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() + (trans_a ? "^T" : "") +
                                    " * " + b.shape_str() + (trans_b ? "^T" : ""));
    }
    Tensor c({am, bn});
    if (!trans_a && !trans_b) {
        detail::mm_nn(a.data(), b.data(), c.data(), am, ak, bn, false);
    } else if (!trans_a && trans_b) {
        detail::mm_nt(a.data(), b.data(), c.data(), am, ak, bn, false);
    } else if (trans_a && !trans_b) {
        detail::mm_tn(a.data(), b.data(), c.data(), a.rows(), am, bn, false);
    } else {
        // A^T * B^T = (B * A)^T; not needed on any hot path.
        Tensor ba = matmul_raw(b, a, false, false);
        for (std::size_t i = 0; i < am; ++i)
            for (std::size_t j = 0; j < bn; ++j) c.at(i, j) = ba.at(j, i);
    }
    return c;
}

} // namespace meet
