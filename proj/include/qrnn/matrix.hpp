#pragma once

// Dense row-major matrix of doubles. All training-time arithmetic in this
// library runs in 64-bit floats; this type is deliberately minimal.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include "qrnn/errors.hpp"

namespace qrnn {

class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
        std::size_t r = 0;
        for (const auto& row : rows) {
            if (row.size() != m.cols_) throw shape_error("from_rows: ragged initializer");
            std::copy(row.begin(), row.end(), m.data_.begin() + r * m.cols_);
            ++r;
        }
        return m;
    }

    static Matrix column(std::initializer_list<double> vals) {
        Matrix m(vals.size(), 1);
        std::copy(vals.begin(), vals.end(), m.data_.begin());
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw shape_error("matmul: inner dimensions differ");
    Matrix y(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) y(i, j) += aik * b(k, j);
        }
    }
    return y;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw shape_error("matmul_nt: inner dimensions differ");
    Matrix y(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
            y(i, j) = s;
        }
    return y;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw shape_error("matmul_tn: inner dimensions differ");
    Matrix y(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k)
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) y(i, j) += aki * b(k, j);
        }
    return y;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline bool all_finite(const Matrix& m) {
    for (double v : m.data())
        if (!std::isfinite(v)) return false;
    return true;
}

inline Matrix random_uniform(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double lo,
                             double hi) {
    Matrix m(rows, cols);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : m.data()) v = dist(rng);
    return m;
}

inline Matrix random_normal(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                            double mean = 0.0, double stddev = 1.0) {
    Matrix m(rows, cols);
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : m.data()) v = dist(rng);
    return m;
}

}  // namespace qrnn
