#pragma once

// Bit-plane packing and popcount inner products.
//
// A k-bit code vector is stored as k bit planes: plane p holds bit p of every
// code, packed into 64-bit words with little-endian bit order (element i
// lives in word i/64, bit i%64; padding bits past n are zero). For 1-bit
// vectors the inner product is popcount(and(x, y)); multi-bit dots expand
// over plane pairs:
//
//   sum_i a_i * w_i = sum_{p<k_a} sum_{q<k_w} 2^(p+q) * popdot(a_p, w_q)
//
// Sign handling lives entirely in the (alpha, beta) affine terms plus cached
// code sums, so the 1-bit kernel applies verbatim.

#include <bit>
#include <chrono>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "qrnn/quantizers.hpp"

namespace qrnn {

struct BitPlanes {
    std::size_t n = 0;  // logical length
    int bits = 0;
    std::vector<std::uint64_t> words;  // plane-major, bits * words_per_plane()
    std::uint64_t code_sum = 0;        // sum of codes, cached at pack time

    std::size_t words_per_plane() const { return (n + 63) / 64; }
    std::span<const std::uint64_t> plane(int p) const {
        return std::span<const std::uint64_t>(words).subspan(p * words_per_plane(),
                                                             words_per_plane());
    }
};

inline BitPlanes pack(std::span<const std::uint8_t> codes, int bits) {
    detail::check_bits(bits);
    const std::uint32_t max_code = (1u << bits) - 1;
    BitPlanes bp;
    bp.n = codes.size();
    bp.bits = bits;
    bp.words.assign(static_cast<std::size_t>(bits) * bp.words_per_plane(), 0);
    const std::size_t wpp = bp.words_per_plane();
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const std::uint8_t c = codes[i];
        if (c > max_code)
            throw std::out_of_range("pack: code " + std::to_string(c) + " exceeds " +
                                    std::to_string(max_code));
        bp.code_sum += c;
        for (int p = 0; p < bits; ++p)
            if ((c >> p) & 1u) bp.words[p * wpp + i / 64] |= std::uint64_t{1} << (i % 64);
    }
    return bp;
}

inline std::vector<std::uint8_t> unpack(const BitPlanes& bp) {
    std::vector<std::uint8_t> codes(bp.n, 0);
    const std::size_t wpp = bp.words_per_plane();
    for (int p = 0; p < bp.bits; ++p)
        for (std::size_t i = 0; i < bp.n; ++i)
            if ((bp.words[p * wpp + i / 64] >> (i % 64)) & 1u)
                codes[i] |= static_cast<std::uint8_t>(1u << p);
    return codes;
}

namespace detail {

inline std::uint64_t popdot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    std::uint64_t acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::popcount(a[i] & b[i]);
    return acc;
}

}  // namespace detail

// 1-bit kernel: sum x_i*y_i for bit vectors, as popcount of the AND.
inline std::uint64_t dot_bits(const BitPlanes& x, const BitPlanes& y) {
    if (x.bits != 1 || y.bits != 1)
        throw std::invalid_argument("dot_bits: operands must be 1-bit planes");
    if (x.n != y.n) throw shape_error("dot_bits: length mismatch");
    return detail::popdot(x.plane(0), y.plane(0));
}

// Integer dot of two code vectors via plane-pair popcounts. Exact in 64-bit
// for n <= 2^20 and bits <= 8.
inline std::int64_t dot_multibit(const BitPlanes& a, const BitPlanes& w) {
    if (a.n != w.n) throw shape_error("dot_multibit: length mismatch");
    std::int64_t acc = 0;
    for (int p = 0; p < a.bits; ++p)
        for (int q = 0; q < w.bits; ++q)
            acc += static_cast<std::int64_t>(detail::popdot(a.plane(p), w.plane(q)))
                   << (p + q);
    return acc;
}

// Code matrix packed row by row.
struct PackedQuantMatrix {
    std::size_t rows = 0, cols = 0;
    int bits = 0;
    double alpha = 0.0, beta = 0.0;
    std::vector<BitPlanes> row_planes;

    static PackedQuantMatrix from(const QuantizedMatrix& q) {
        PackedQuantMatrix p;
        p.rows = q.rows;
        p.cols = q.cols;
        p.bits = q.bits;
        p.alpha = q.alpha;
        p.beta = q.beta;
        p.row_planes.reserve(q.rows);
        for (std::size_t r = 0; r < q.rows; ++r)
            p.row_planes.push_back(
                pack(std::span<const std::uint8_t>(q.codes).subspan(r * q.cols, q.cols), q.bits));
        return p;
    }

    QuantizedMatrix to_quantized() const {
        QuantizedMatrix q;
        q.rows = rows;
        q.cols = cols;
        q.bits = bits;
        q.alpha = alpha;
        q.beta = beta;
        q.codes.reserve(rows * cols);
        for (const BitPlanes& bp : row_planes) {
            auto row = unpack(bp);
            q.codes.insert(q.codes.end(), row.begin(), row.end());
        }
        return q;
    }
};

struct PackedQuantVector {
    BitPlanes planes;
    double alpha = 1.0, beta = 0.0;
};

// W_recon * a_recon computed on packed codes. With A = alpha_w/(2^kw-1) and
// C = alpha_a/(2^ka-1):
//   out[r] = A*C*dot(W_r,a) + A*beta_a*codesum(W_r)
//          + beta_w*C*codesum(a) + beta_w*beta_a*n
inline std::vector<double> qmatvec(const PackedQuantMatrix& w, const PackedQuantVector& a) {
    if (w.cols != a.planes.n) throw shape_error("qmatvec: W.cols != a.n");
    const double aw = w.alpha / static_cast<double>((1u << w.bits) - 1);
    const double aa = a.alpha / static_cast<double>((1u << a.planes.bits) - 1);
    const double n = static_cast<double>(w.cols);
    const double asum = static_cast<double>(a.planes.code_sum);
    std::vector<double> out(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const BitPlanes& row = w.row_planes[r];
        const double dot = static_cast<double>(dot_multibit(a.planes, row));
        out[r] = aw * aa * dot + aw * a.beta * static_cast<double>(row.code_sum) +
                 w.beta * aa * asum + w.beta * a.beta * n;
    }
    return out;
}

struct BenchReport {
    std::size_t rows = 0, cols = 0;
    int k_w = 0, k_a = 0;
    int repeats = 0;
    double packed_ops_per_sec = 0.0;
    double dense_ops_per_sec = 0.0;
    bool agreement = false;
};

// Times qmatvec against a dense real matvec on the reconstructed values.
// Same data on both paths; agreement is checked once up front.
inline BenchReport bench_qmatvec(std::size_t rows, std::size_t cols, int k_w, int k_a, int repeats,
                                 std::uint64_t seed = 42) {
    if (rows == 0 || cols == 0) throw shape_error("bench_qmatvec: dimensions must be positive");
    detail::check_bits(k_w);
    detail::check_bits(k_a);
    if (repeats < 1) repeats = 1;

    std::mt19937_64 rng(seed);
    QuantizedMatrix wq;
    wq.rows = rows;
    wq.cols = cols;
    wq.bits = k_w;
    wq.alpha = 1.5;
    wq.beta = -0.75;
    wq.codes.resize(rows * cols);
    std::uniform_int_distribution<int> wdist(0, (1 << k_w) - 1);
    for (auto& c : wq.codes) c = static_cast<std::uint8_t>(wdist(rng));

    std::vector<std::uint8_t> acodes(cols);
    std::uniform_int_distribution<int> adist(0, (1 << k_a) - 1);
    for (auto& c : acodes) c = static_cast<std::uint8_t>(adist(rng));
    PackedQuantVector a{pack(acodes, k_a), 1.0, 0.0};

    PackedQuantMatrix wp = PackedQuantMatrix::from(wq);
    Matrix wd = wq.reconstruct();
    Matrix ad(cols, 1);
    const double la = static_cast<double>((1u << k_a) - 1);
    for (std::size_t i = 0; i < cols; ++i)
        ad(i, 0) = a.alpha * (static_cast<double>(acodes[i]) / la) + a.beta;

    std::vector<double> packed_out = qmatvec(wp, a);
    Matrix dense_out = matmul(wd, ad);
    bool agree = true;
    for (std::size_t r = 0; r < rows; ++r) {
        const double ref = dense_out(r, 0);
        const double err = std::abs(packed_out[r] - ref);
        if (err > 1e-9 * std::max(1.0, std::abs(ref))) agree = false;
    }

    using clock = std::chrono::steady_clock;
    volatile double sink = 0.0;

    auto t0 = clock::now();
    int packed_passes = 0;
    do {
        for (int i = 0; i < repeats; ++i) {
            auto out = qmatvec(wp, a);
            sink = sink + out[0];
        }
        packed_passes += repeats;
    } while (clock::now() - t0 < std::chrono::milliseconds(20));
    const double packed_sec = std::chrono::duration<double>(clock::now() - t0).count();

    auto t1 = clock::now();
    int dense_passes = 0;
    do {
        for (int i = 0; i < repeats; ++i) {
            Matrix out = matmul(wd, ad);
            sink = sink + out(0, 0);
        }
        dense_passes += repeats;
    } while (clock::now() - t1 < std::chrono::milliseconds(20));
    const double dense_sec = std::chrono::duration<double>(clock::now() - t1).count();

    BenchReport rep;
    rep.rows = rows;
    rep.cols = cols;
    rep.k_w = k_w;
    rep.k_a = k_a;
    rep.repeats = repeats;
    rep.packed_ops_per_sec = packed_passes / packed_sec;
    rep.dense_ops_per_sec = dense_passes / dense_sec;
    rep.agreement = agree;
    return rep;
}

}  // namespace qrnn
