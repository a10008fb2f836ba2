#pragma once

// Dense linear algebra for second-order pruning: Gram matrices, Cholesky
// based inversion of symmetric positive-definite matrices, and principal
// submatrix extraction. Row-major doubles throughout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "diffes/error.hpp"

namespace diffes::linalg {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw Error(ErrorKind::InvalidShape, "matrix data length does not match rows*cols");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(std::span<const double> d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Symmetric positive-(semi)definite matrix, e.g. a layer Hessian XX^T.
struct SymPosDef {
    Matrix values;
    double damping = 0.0;

    std::size_t dim() const noexcept { return values.rows(); }
};

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw Error(ErrorKind::InvalidShape, "matmul inner dimensions differ");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

inline double frobenius_sq(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

/// H = X X^T for X of shape d_in x N. The upper triangle is computed and
/// mirrored, so the result is bitwise symmetric.
inline SymPosDef gram(const Matrix& x) {
    if (x.rows() == 0 || x.cols() == 0)
        throw Error(ErrorKind::InvalidShape, "gram of an empty matrix");
    const std::size_t d = x.rows();
    Matrix h(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        auto xi = x.row(i);
        for (std::size_t j = i; j < d; ++j) {
            auto xj = x.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < xi.size(); ++k) s += xi[k] * xj[k];
            h(i, j) = s;
            h(j, i) = s;
        }
    }
    return {std::move(h), 0.0};
}

/// In-place lower Cholesky factor of an SPD matrix. Returns false on a
/// non-positive pivot.
inline bool cholesky_in_place(Matrix& a) {
    const std::size_t n = a.rows();
    for (std::size_t j = 0; j < n; ++j) {
        double diag = a(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= a(j, k) * a(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag)) return false;
        const double ljj = std::sqrt(diag);
        a(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
            a(i, j) = s / ljj;
        }
        for (std::size_t k = j + 1; k < n; ++k) a(j, k) = 0.0;
    }
    return true;
}

/// Inverse of an SPD matrix through its Cholesky factor. The returned
/// matrix is exactly symmetric.
inline Matrix spd_inverse(const Matrix& a) {
    if (a.rows() != a.cols()) throw Error(ErrorKind::InvalidShape, "spd_inverse of a non-square matrix");
    const std::size_t n = a.rows();
    Matrix l = a;
    if (!cholesky_in_place(l))
        throw Error(ErrorKind::SingularHessian, "Cholesky factorization failed (matrix is not positive definite)");

    // L^{-1}, lower triangular.
    Matrix linv(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        linv(j, j) = 1.0 / l(j, j);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = j; k < i; ++k) s -= l(i, k) * linv(k, j);
            linv(i, j) = s / l(i, i);
        }
    }
    // A^{-1} = L^{-T} L^{-1}
    Matrix inv(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t k = i; k < n; ++k) s += linv(k, i) * linv(k, j);
            inv(i, j) = s;
            inv(j, i) = s;
        }
    }
    return inv;
}

inline double mean_diagonal(const Matrix& h) {
    if (h.rows() == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < h.rows(); ++i) s += h(i, i);
    return s / static_cast<double>(h.rows());
}

/// H + lambda I with lambda = lambda_frac * mean(diag(H)).
inline SymPosDef damp(const SymPosDef& h, double lambda_frac) {
    if (lambda_frac < 0.0) throw Error(ErrorKind::InvalidConfig, "lambda_frac must be non-negative");
    SymPosDef out = h;
    const double lambda = lambda_frac * mean_diagonal(h.values);
    for (std::size_t i = 0; i < out.dim(); ++i) out.values(i, i) += lambda;
    out.damping = h.damping + lambda;
    return out;
}

inline constexpr double kDefaultDampingFrac = 0.01;

/// (H + lambda I)^{-1}, lambda = lambda_frac * mean(diag(H)).
inline Matrix damped_inverse(const SymPosDef& h, double lambda_frac = kDefaultDampingFrac) {
    SymPosDef damped = damp(h, lambda_frac);
    if (lambda_frac > 0.0 && mean_diagonal(h.values) == 0.0) {
        // All-zero Hessian: relative damping is zero, fall back to unit damping.
        for (std::size_t i = 0; i < damped.dim(); ++i) damped.values(i, i) += lambda_frac;
    }
    return spd_inverse(damped.values);
}

inline void check_index_set(std::span<const std::size_t> idx, std::size_t n) {
    if (idx.empty()) throw Error(ErrorKind::InvalidInput, "empty index set");
    std::vector<std::size_t> sorted(idx.begin(), idx.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw Error(ErrorKind::InvalidInput, "index set contains duplicates");
    if (sorted.back() >= n) throw Error(ErrorKind::InvalidInput, "index out of range");
}

inline Matrix principal_submatrix(const Matrix& a, std::span<const std::size_t> idx) {
    Matrix s(idx.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < idx.size(); ++j) s(i, j) = a(idx[i], idx[j]);
    return s;
}

/// ((Hinv)_{M,M})^{-1}: inverse of the principal submatrix of Hinv selected by idx.
inline Matrix inverse_submatrix_inverse(const Matrix& hinv, std::span<const std::size_t> idx) {
    check_index_set(idx, hinv.rows());
    if (idx.size() == 1) {
        const double v = hinv(idx[0], idx[0]);
        if (!(v > 0.0)) throw Error(ErrorKind::SingularHessian, "non-positive diagonal in inverse Hessian");
        return Matrix(1, 1, std::vector<double>{1.0 / v});
    }
    return spd_inverse(principal_submatrix(hinv, idx));
}

}  // namespace diffes::linalg
