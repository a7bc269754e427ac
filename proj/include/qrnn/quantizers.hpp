#pragma once

// Uniform, min/max and balanced quantizers.
//
// The k-bit uniform quantizer maps [0,1] onto the grid {i/(2^k-1)} by
// round-half-up: Q_k(x) = floor((2^k-1)x + 1/2) / (2^k-1). Everything else
// here is an affine wrapper around Q_k:
//
//   min/max:   alpha = max-min, beta = min
//   symmetric: alpha = 2*max|X|, beta = -max|X|
//   balanced:  s = gamma*stat(|X|), x -> clip(x/s,-1/2,1/2)+1/2,
//              alpha = s, beta = -s/2
//
// The balanced form thresholds values by an order statistic of |X|, which
// spreads codes (near-)uniformly across the 2^k bins. For 1-bit weights the
// scale 2*mean|X| minimizes Frobenius reconstruction error.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qrnn/matrix.hpp"

namespace qrnn {

// Bit-width sentinel meaning "quantization disabled".
inline constexpr int kFullPrecisionBits = 32;

enum class ThresholdStat { mean_abs, median_abs };
enum class ActivationRange { unit01, symmetric };

struct QuantConfig {
    int weight_bits = 2;
    int activation_bits = 2;
    bool balanced = true;
    double gamma = 2.5;
    ThresholdStat threshold_stat = ThresholdStat::mean_abs;
    ActivationRange activation_range = ActivationRange::unit01;

    bool weights_enabled() const { return weight_bits != kFullPrecisionBits; }
    bool activations_enabled() const { return activation_bits != kFullPrecisionBits; }

    void validate() const {
        auto ok_bits = [](int k) { return (k >= 1 && k <= 8) || k == kFullPrecisionBits; };
        if (!ok_bits(weight_bits))
            throw config_error("quant.weight_bits must be in [1,8] or 32: got " +
                               std::to_string(weight_bits));
        if (!ok_bits(activation_bits))
            throw config_error("quant.activation_bits must be in [1,8] or 32: got " +
                               std::to_string(activation_bits));
        if (!(gamma > 0.0)) throw config_error("quant.gamma must be > 0");
    }
};

// Integer codes plus the affine map back to reals:
// value = alpha * code / (2^k - 1) + beta.
struct QuantizedMatrix {
    std::vector<std::uint8_t> codes;  // row-major
    std::size_t rows = 0, cols = 0;
    int bits = 0;
    double alpha = 0.0, beta = 0.0;

    std::size_t numel() const { return codes.size(); }
    double levels() const { return static_cast<double>((1u << bits) - 1); }

    double reconstruct_code(std::uint8_t c) const {
        return alpha * (static_cast<double>(c) / levels()) + beta;
    }

    Matrix reconstruct() const {
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < codes.size(); ++i) m[i] = reconstruct_code(codes[i]);
        return m;
    }
};

struct BalanceReport {
    std::vector<std::size_t> bin_counts;  // length 2^k
    double normalized_entropy = 0.0;      // in [0,1]
    double max_abs_error = 0.0;
};

namespace detail {

inline void check_bits(int k) {
    if (k < 1 || k > 8) throw std::invalid_argument("bit-width must be in [1,8]: got " + std::to_string(k));
}

inline std::uint8_t unit_code(double x, int k) {
    const double levels = static_cast<double>((1u << k) - 1);
    double c = std::floor(levels * x + 0.5);
    if (c < 0.0) c = 0.0;
    if (c > levels) c = levels;
    return static_cast<std::uint8_t>(c);
}

inline double mean_abs(const Matrix& x) {
    double s = 0.0;
    for (double v : x.data()) s += std::abs(v);
    return s / static_cast<double>(x.numel());
}

// Midpoint median of |X| (even length: average of the two middle order
// statistics). For symmetric inputs with distinct magnitudes this lands
// strictly between two attained values, which is what makes the k=2
// balancing argument exact.
inline double median_abs(const Matrix& x) {
    std::vector<double> a(x.numel());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(x[i]);
    const std::size_t n = a.size();
    auto mid = a.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(a.begin(), mid, a.end());
    if (n % 2 == 1) return *mid;
    double hi = *mid;
    double lo = *std::max_element(a.begin(), mid);
    return 0.5 * (lo + hi);
}

inline double stat_abs(const Matrix& x, ThresholdStat stat) {
    return stat == ThresholdStat::mean_abs ? mean_abs(x) : median_abs(x);
}

// Quantize with an explicit affine map: codes from (x-beta)/alpha, values
// from alpha*code/levels + beta.
inline std::pair<Matrix, QuantizedMatrix> affine_quantize(const Matrix& x, int k, double alpha,
                                                          double beta) {
    QuantizedMatrix q;
    q.rows = x.rows();
    q.cols = x.cols();
    q.bits = k;
    q.alpha = alpha;
    q.beta = beta;
    q.codes.resize(x.numel());
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        q.codes[i] = unit_code((x[i] - beta) / alpha, k);
        out[i] = q.reconstruct_code(q.codes[i]);
    }
    return {std::move(out), std::move(q)};
}

// Balanced quantization with the scale s given directly.
inline std::pair<Matrix, QuantizedMatrix> balanced_with_scale(const Matrix& x, int k, double s) {
    QuantizedMatrix q;
    q.rows = x.rows();
    q.cols = x.cols();
    q.bits = k;
    q.alpha = s;
    q.beta = -0.5 * s;
    q.codes.resize(x.numel());
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double xhat = std::clamp(x[i] / s, -0.5, 0.5) + 0.5;
        q.codes[i] = unit_code(xhat, k);
        out[i] = q.reconstruct_code(q.codes[i]);
    }
    return {std::move(out), std::move(q)};
}

}  // namespace detail

// Q_k on a matrix with entries in [0,1]. Entries outside the domain are the
// caller's bug: clip first.
inline Matrix quantize_unit(const Matrix& x, int k) {
    detail::check_bits(k);
    const double levels = static_cast<double>((1u << k) - 1);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = x[i];
        if (!(v >= 0.0 && v <= 1.0))
            throw std::domain_error("quantize_unit: entry " + std::to_string(v) +
                                    " outside [0,1]; clip before quantizing");
        out[i] = static_cast<double>(detail::unit_code(v, k)) / levels;
    }
    return out;
}

inline double quantize_unit_scalar(double x, int k) {
    detail::check_bits(k);
    if (!(x >= 0.0 && x <= 1.0))
        throw std::domain_error("quantize_unit: entry " + std::to_string(x) +
                                " outside [0,1]; clip before quantizing");
    return static_cast<double>(detail::unit_code(x, k)) / static_cast<double>((1u << k) - 1);
}

// Min/max quantization: alpha = max(X)-min(X), beta = min(X).
inline std::pair<Matrix, QuantizedMatrix> quantize_det(const Matrix& x, int k) {
    detail::check_bits(k);
    if (x.empty()) throw degenerate_input_error("quantize_det: empty matrix");
    auto [lo_it, hi_it] = std::minmax_element(x.data().begin(), x.data().end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo))
        throw degenerate_input_error("quantize_det: constant matrix (max == min == " +
                                     std::to_string(lo) + ")");
    return detail::affine_quantize(x, k, hi - lo, lo);
}

// Balanced quantization with threshold gamma * stat(|X|).
inline std::pair<Matrix, QuantizedMatrix> quantize_balanced(const Matrix& x, int k, double gamma,
                                                            ThresholdStat stat) {
    detail::check_bits(k);
    if (x.empty()) throw degenerate_input_error("quantize_balanced: empty matrix");
    const double s = gamma * detail::stat_abs(x, stat);
    if (!(s > 0.0))
        throw degenerate_input_error("quantize_balanced: threshold statistic of |X| is zero");
    return detail::balanced_with_scale(x, k, s);
}

// Weight quantizer: balanced with gamma*stat(|X|) (1-bit overrides the scale
// to 2*mean|X|), or the symmetric min/max baseline when cfg.balanced is off.
inline std::pair<Matrix, QuantizedMatrix> quantize_weights(const Matrix& x,
                                                           const QuantConfig& cfg) {
    cfg.validate();
    const int k = cfg.weight_bits;
    if (k == kFullPrecisionBits)
        throw config_error("quantize_weights: weight_bits=32 means quantization is disabled");
    if (x.empty()) throw degenerate_input_error("quantize_weights: empty matrix");
    if (cfg.balanced) {
        if (k == 1) {
            const double s = 2.0 * detail::mean_abs(x);
            if (!(s > 0.0))
                throw degenerate_input_error("quantize_weights: mean|X| is zero");
            return detail::balanced_with_scale(x, 1, s);
        }
        return quantize_balanced(x, k, cfg.gamma, cfg.threshold_stat);
    }
    double m = 0.0;
    for (double v : x.data()) m = std::max(m, std::abs(v));
    if (!(m > 0.0)) throw degenerate_input_error("quantize_weights: all-zero matrix");
    return detail::affine_quantize(x, k, 2.0 * m, -m);
}

// Activation quantizer. unit01: Q_k(X) on [0,1] (keeps exact zero in the
// codebook, which dropout needs). symmetric: Q_k(X+1/2)-1/2 on [-1/2,1/2]
// (codebook has no zero).
inline Matrix quantize_activation(const Matrix& x, int k, ActivationRange range) {
    detail::check_bits(k);
    if (range == ActivationRange::unit01) return quantize_unit(x, k);
    const double levels = static_cast<double>((1u << k) - 1);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = x[i];
        if (!(v >= -0.5 && v <= 0.5))
            throw std::domain_error("quantize_activation: entry " + std::to_string(v) +
                                    " outside [-0.5,0.5]; clip before quantizing");
        out[i] = static_cast<double>(detail::unit_code(v + 0.5, k)) / levels - 0.5;
    }
    return out;
}

// Histogram of codes, normalized bin entropy and worst reconstruction error
// against the original values.
inline BalanceReport balance_report(const QuantizedMatrix& q, const Matrix& original) {
    if (q.rows != original.rows() || q.cols != original.cols())
        throw shape_error("balance_report: shape mismatch");
    BalanceReport rep;
    rep.bin_counts.assign(1u << q.bits, 0);
    for (std::uint8_t c : q.codes) ++rep.bin_counts[c];
    const double n = static_cast<double>(q.codes.size());
    double entropy = 0.0;
    for (std::size_t count : rep.bin_counts) {
        if (count == 0) continue;
        const double p = static_cast<double>(count) / n;
        entropy -= p * std::log(p);
    }
    rep.normalized_entropy = entropy / (q.bits * std::log(2.0));
    for (std::size_t i = 0; i < q.codes.size(); ++i)
        rep.max_abs_error =
            std::max(rep.max_abs_error, std::abs(q.reconstruct_code(q.codes[i]) - original[i]));
    return rep;
}

}  // namespace qrnn
