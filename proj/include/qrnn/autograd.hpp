#pragma once

// Minimal reverse-mode tape. Nodes are appended in topological order and hold
// their forward values; backward() runs one reverse sweep accumulating
// vector-Jacobian products. The primitive set is exactly what the quantized
// cells need, including the straight-through quantization node (forward
// quantizes, backward passes the upstream gradient through unchanged).

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qrnn/matrix.hpp"
#include "qrnn/quantizers.hpp"

namespace qrnn {

using NodeId = int;

enum class OpKind {
    constant,
    parameter,
    matmul,
    concat_rows,
    add,
    sub,
    mul,
    sigmoid,
    tanh_op,
    clip,
    gather,
    dropout,
    softmax_xent,
    ste_quant_weights,
    ste_quant_act,
};

struct Node {
    explicit Node(OpKind k, std::array<NodeId, 2> inputs = {-1, -1}) : kind(k), in(inputs) {}

    OpKind kind;
    std::array<NodeId, 2> in;
    Matrix value;
    // True when the value is a valid quantized-provenance tensor: the output
    // of a quantization node, an on-grid constant, or a structure-preserving
    // op (concat/clip/dropout) over such tensors.
    bool on_quant_grid = false;

    // op-specific payloads
    double lo = 0.0, hi = 0.0;       // clip
    std::vector<int> ids;            // gather rows / xent targets
    std::vector<double> mask;        // dropout (pre-scaled by 1/(1-p))
    Matrix softmax;                  // xent cache
    std::vector<double> col_weight;  // xent per-column weights
    QuantConfig qcfg;                // ste_quant_weights
    QuantizedMatrix qmeta;           // ste_quant_weights codes/affine
    int act_bits = 0;                // ste_quant_act
    ActivationRange act_range = ActivationRange::unit01;
};

struct Gradients {
    std::vector<Matrix> by_node;
    const Matrix& at(NodeId id) const { return by_node[static_cast<std::size_t>(id)]; }
};

class Tape {
  public:
    explicit Tape(std::mt19937_64* rng = nullptr) : rng_(rng) {}

    std::size_t size() const { return nodes_.size(); }
    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const Matrix& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    NodeId constant(Matrix v, bool on_grid = false) {
        Node n{OpKind::constant};
        n.value = std::move(v);
        n.on_quant_grid = on_grid;
        return push(std::move(n));
    }

    NodeId parameter(const Matrix& v) {
        Node n{OpKind::parameter};
        n.value = v;
        return push(std::move(n));
    }

    NodeId matmul(NodeId a, NodeId b) {
        Node n{OpKind::matmul, {a, b}};
        n.value = qrnn::matmul(value(a), value(b));
        return push(std::move(n));
    }

    NodeId concat_rows(NodeId a, NodeId b) {
        const Matrix &va = value(a), &vb = value(b);
        if (va.cols() != vb.cols()) throw shape_error("concat_rows: column count differs");
        Node n{OpKind::concat_rows, {a, b}};
        n.value = Matrix(va.rows() + vb.rows(), va.cols());
        for (std::size_t r = 0; r < va.rows(); ++r)
            for (std::size_t c = 0; c < va.cols(); ++c) n.value(r, c) = va(r, c);
        for (std::size_t r = 0; r < vb.rows(); ++r)
            for (std::size_t c = 0; c < vb.cols(); ++c) n.value(va.rows() + r, c) = vb(r, c);
        n.on_quant_grid = node(a).on_quant_grid && node(b).on_quant_grid;
        return push(std::move(n));
    }

    // Elementwise a+b; b may be a column [m x 1] broadcast across columns.
    NodeId add(NodeId a, NodeId b) { return binary_pm(a, b, +1.0); }
    NodeId sub(NodeId a, NodeId b) { return binary_pm(a, b, -1.0); }

    NodeId mul(NodeId a, NodeId b) {
        const Matrix &va = value(a), &vb = value(b);
        if (!va.same_shape(vb)) throw shape_error("mul: shape mismatch");
        Node n{OpKind::mul, {a, b}};
        n.value = Matrix(va.rows(), va.cols());
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] * vb[i];
        return push(std::move(n));
    }

    NodeId sigmoid(NodeId a) {
        Node n{OpKind::sigmoid, {a}};
        const Matrix& v = value(a);
        n.value = Matrix(v.rows(), v.cols());
        for (std::size_t i = 0; i < v.numel(); ++i) n.value[i] = qrnn::sigmoid(v[i]);
        return push(std::move(n));
    }

    NodeId tanh(NodeId a) {
        Node n{OpKind::tanh_op, {a}};
        const Matrix& v = value(a);
        n.value = Matrix(v.rows(), v.cols());
        for (std::size_t i = 0; i < v.numel(); ++i) n.value[i] = std::tanh(v[i]);
        return push(std::move(n));
    }

    // Derivative is 1 strictly inside (lo,hi), 0 at and outside the bounds.
    NodeId clip(NodeId a, double lo, double hi) {
        Node n{OpKind::clip, {a}};
        n.lo = lo;
        n.hi = hi;
        const Matrix& v = value(a);
        n.value = Matrix(v.rows(), v.cols());
        for (std::size_t i = 0; i < v.numel(); ++i) n.value[i] = std::clamp(v[i], lo, hi);
        n.on_quant_grid = node(a).on_quant_grid;
        return push(std::move(n));
    }

    // Embedding lookup: rows of table become columns of the output.
    // table [V x N], ids (B) -> value [N x B]; backward scatter-adds.
    NodeId gather(NodeId table, std::vector<int> ids) {
        const Matrix& t = value(table);
        Node n{OpKind::gather, {table}};
        n.value = Matrix(t.cols(), ids.size());
        for (std::size_t j = 0; j < ids.size(); ++j) {
            const int id = ids[j];
            if (id < 0 || static_cast<std::size_t>(id) >= t.rows())
                throw std::out_of_range("gather: id " + std::to_string(id) + " out of range [0," +
                                        std::to_string(t.rows()) + ")");
            for (std::size_t c = 0; c < t.cols(); ++c)
                n.value(c, j) = t(static_cast<std::size_t>(id), c);
        }
        n.ids = std::move(ids);
        n.on_quant_grid = node(table).on_quant_grid;
        return push(std::move(n));
    }

    // Inverted dropout: zero a fraction p at train time and scale survivors
    // by 1/(1-p); at eval time the op is the identity (no node).
    NodeId dropout(NodeId a, double p, bool train) {
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("dropout: p must be in [0,1]");
        if (!train || p == 0.0) return a;
        if (!rng_) throw std::logic_error("dropout: tape constructed without an RNG");
        Node n{OpKind::dropout, {a}};
        const Matrix& v = value(a);
        n.mask.resize(v.numel());
        const double keep_scale = p < 1.0 ? 1.0 / (1.0 - p) : 0.0;
        std::bernoulli_distribution drop(p);
        for (double& m : n.mask) m = drop(*rng_) ? 0.0 : keep_scale;
        n.value = Matrix(v.rows(), v.cols());
        for (std::size_t i = 0; i < v.numel(); ++i) n.value[i] = v[i] * n.mask[i];
        n.on_quant_grid = node(a).on_quant_grid;
        return push(std::move(n));
    }

    // Scalar sum_b w_b * crossentropy(softmax(logits[:,b]), targets[b]).
    NodeId softmax_xent(NodeId logits, std::vector<int> targets,
                        std::vector<double> weights = {}) {
        const Matrix& l = value(logits);
        if (targets.size() != l.cols()) throw shape_error("softmax_xent: one target per column");
        if (weights.empty()) weights.assign(l.cols(), 1.0);
        if (weights.size() != l.cols()) throw shape_error("softmax_xent: one weight per column");
        Node n{OpKind::softmax_xent, {logits}};
        n.softmax = Matrix(l.rows(), l.cols());
        double total = 0.0;
        for (std::size_t b = 0; b < l.cols(); ++b) {
            const int y = targets[b];
            if (y < 0 || static_cast<std::size_t>(y) >= l.rows())
                throw std::out_of_range("softmax_xent: target out of range");
            double mx = l(0, b);
            for (std::size_t c = 1; c < l.rows(); ++c) mx = std::max(mx, l(c, b));
            double z = 0.0;
            for (std::size_t c = 0; c < l.rows(); ++c) z += std::exp(l(c, b) - mx);
            for (std::size_t c = 0; c < l.rows(); ++c)
                n.softmax(c, b) = std::exp(l(c, b) - mx) / z;
            total += weights[b] *
                     (mx + std::log(z) - l(static_cast<std::size_t>(y), b));
        }
        n.ids = std::move(targets);
        n.col_weight = std::move(weights);
        n.value = Matrix(1, 1, total);
        return push(std::move(n));
    }

    // STE over the whole weight-quantizer expression: forward is the scaled
    // quantized value, backward is the identity.
    NodeId ste_quantize_weights(NodeId a, const QuantConfig& cfg) {
        Node n{OpKind::ste_quant_weights, {a}};
        auto [xq, meta] = quantize_weights(value(a), cfg);
        n.value = std::move(xq);
        n.qmeta = std::move(meta);
        n.qcfg = cfg;
        n.on_quant_grid = true;
        return push(std::move(n));
    }

    NodeId ste_quantize_activation(NodeId a, int bits, ActivationRange range) {
        Node n{OpKind::ste_quant_act, {a}};
        n.value = quantize_activation(value(a), bits, range);
        n.act_bits = bits;
        n.act_range = range;
        n.on_quant_grid = true;
        return push(std::move(n));
    }

    // Reverse accumulation from a scalar loss. Every node gets a gradient
    // matrix; leaves unreachable from the loss keep zeros.
    Gradients backward(NodeId loss) const {
        const Matrix& lv = value(loss);
        if (lv.rows() != 1 || lv.cols() != 1)
            throw std::invalid_argument("backward: loss must be a 1x1 scalar");
        Gradients g;
        g.by_node.reserve(nodes_.size());
        for (const Node& n : nodes_) g.by_node.emplace_back(n.value.rows(), n.value.cols());
        g.by_node[static_cast<std::size_t>(loss)](0, 0) = 1.0;

        for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            const Matrix& gy = g.by_node[static_cast<std::size_t>(id)];
            switch (n.kind) {
                case OpKind::constant:
                case OpKind::parameter:
                    break;
                case OpKind::matmul: {
                    const Matrix& a = value(n.in[0]);
                    const Matrix& b = value(n.in[1]);
                    accumulate(g, n.in[0], matmul_nt(gy, b));
                    accumulate(g, n.in[1], matmul_tn(a, gy));
                    break;
                }
                case OpKind::concat_rows: {
                    const std::size_t ra = value(n.in[0]).rows();
                    Matrix ga(ra, gy.cols());
                    Matrix gb(gy.rows() - ra, gy.cols());
                    for (std::size_t r = 0; r < ra; ++r)
                        for (std::size_t c = 0; c < gy.cols(); ++c) ga(r, c) = gy(r, c);
                    for (std::size_t r = 0; r < gb.rows(); ++r)
                        for (std::size_t c = 0; c < gy.cols(); ++c) gb(r, c) = gy(ra + r, c);
                    accumulate(g, n.in[0], std::move(ga));
                    accumulate(g, n.in[1], std::move(gb));
                    break;
                }
                case OpKind::add:
                case OpKind::sub: {
                    const double sign = n.kind == OpKind::add ? 1.0 : -1.0;
                    accumulate(g, n.in[0], gy);
                    const Matrix& b = value(n.in[1]);
                    if (b.same_shape(gy)) {
                        Matrix gb(gy.rows(), gy.cols());
                        for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] = sign * gy[i];
                        accumulate(g, n.in[1], std::move(gb));
                    } else {  // column broadcast
                        Matrix gb(b.rows(), 1);
                        for (std::size_t r = 0; r < gy.rows(); ++r) {
                            double s = 0.0;
                            for (std::size_t c = 0; c < gy.cols(); ++c) s += gy(r, c);
                            gb(r, 0) = sign * s;
                        }
                        accumulate(g, n.in[1], std::move(gb));
                    }
                    break;
                }
                case OpKind::mul: {
                    const Matrix& a = value(n.in[0]);
                    const Matrix& b = value(n.in[1]);
                    Matrix ga(gy.rows(), gy.cols()), gb(gy.rows(), gy.cols());
                    for (std::size_t i = 0; i < gy.numel(); ++i) {
                        ga[i] = gy[i] * b[i];
                        gb[i] = gy[i] * a[i];
                    }
                    accumulate(g, n.in[0], std::move(ga));
                    accumulate(g, n.in[1], std::move(gb));
                    break;
                }
                case OpKind::sigmoid: {
                    Matrix gx(gy.rows(), gy.cols());
                    for (std::size_t i = 0; i < gy.numel(); ++i)
                        gx[i] = gy[i] * n.value[i] * (1.0 - n.value[i]);
                    accumulate(g, n.in[0], std::move(gx));
                    break;
                }
                case OpKind::tanh_op: {
                    Matrix gx(gy.rows(), gy.cols());
                    for (std::size_t i = 0; i < gy.numel(); ++i)
                        gx[i] = gy[i] * (1.0 - n.value[i] * n.value[i]);
                    accumulate(g, n.in[0], std::move(gx));
                    break;
                }
                case OpKind::clip: {
                    const Matrix& x = value(n.in[0]);
                    Matrix gx(gy.rows(), gy.cols());
                    for (std::size_t i = 0; i < gy.numel(); ++i)
                        gx[i] = (x[i] > n.lo && x[i] < n.hi) ? gy[i] : 0.0;
                    accumulate(g, n.in[0], std::move(gx));
                    break;
                }
                case OpKind::gather: {
                    const Matrix& t = value(n.in[0]);
                    Matrix gt(t.rows(), t.cols());
                    for (std::size_t j = 0; j < n.ids.size(); ++j)
                        for (std::size_t c = 0; c < t.cols(); ++c)
                            gt(static_cast<std::size_t>(n.ids[j]), c) += gy(c, j);
                    accumulate(g, n.in[0], std::move(gt));
                    break;
                }
                case OpKind::dropout: {
                    Matrix gx(gy.rows(), gy.cols());
                    for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] = gy[i] * n.mask[i];
                    accumulate(g, n.in[0], std::move(gx));
                    break;
                }
                case OpKind::softmax_xent: {
                    const double gs = gy(0, 0);
                    Matrix gl(n.softmax.rows(), n.softmax.cols());
                    for (std::size_t b = 0; b < gl.cols(); ++b) {
                        const double wb = n.col_weight[b] * gs;
                        for (std::size_t c = 0; c < gl.rows(); ++c)
                            gl(c, b) = wb * n.softmax(c, b);
                        gl(static_cast<std::size_t>(n.ids[b]), b) -= wb;
                    }
                    accumulate(g, n.in[0], std::move(gl));
                    break;
                }
                case OpKind::ste_quant_weights:
                case OpKind::ste_quant_act:
                    accumulate(g, n.in[0], gy);
                    break;
            }
        }
        return g;
    }

    bool contains_nondifferentiable() const {
        for (const Node& n : nodes_)
            if (n.kind == OpKind::dropout || n.kind == OpKind::ste_quant_weights ||
                n.kind == OpKind::ste_quant_act)
                return true;
        return false;
    }

  private:
    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId binary_pm(NodeId a, NodeId b, double sign) {
        const Matrix &va = value(a), &vb = value(b);
        Node n{sign > 0 ? OpKind::add : OpKind::sub, {a, b}};
        if (va.same_shape(vb)) {
            n.value = Matrix(va.rows(), va.cols());
            for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] + sign * vb[i];
        } else if (vb.cols() == 1 && vb.rows() == va.rows()) {
            n.value = Matrix(va.rows(), va.cols());
            for (std::size_t r = 0; r < va.rows(); ++r)
                for (std::size_t c = 0; c < va.cols(); ++c)
                    n.value(r, c) = va(r, c) + sign * vb(r, 0);
        } else {
            throw shape_error("add/sub: shape mismatch (no general broadcasting)");
        }
        return push(std::move(n));
    }

    static void accumulate(Gradients& g, NodeId id, const Matrix& delta) {
        Matrix& dst = g.by_node[static_cast<std::size_t>(id)];
        for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += delta[i];
    }

    std::vector<Node> nodes_;
    std::mt19937_64* rng_;
};

// Compares backward() against central finite differences for a subgraph
// built over plain parameters. Returns the max relative error. The builder
// must not introduce quantize or dropout nodes.
template <typename BuildFn>
double grad_check(BuildFn&& build, const std::vector<Matrix>& inputs, double eps = 1e-5) {
    Tape tape;
    std::vector<NodeId> in_ids;
    in_ids.reserve(inputs.size());
    for (const Matrix& m : inputs) in_ids.push_back(tape.parameter(m));
    NodeId loss = build(tape, in_ids);
    if (tape.contains_nondifferentiable())
        throw std::logic_error("grad_check: subgraph contains quantize/dropout nodes");
    Gradients g = tape.backward(loss);

    auto eval = [&](const std::vector<Matrix>& pts) {
        Tape t;
        std::vector<NodeId> ids;
        ids.reserve(pts.size());
        for (const Matrix& m : pts) ids.push_back(t.parameter(m));
        return t.value(build(t, ids))(0, 0);
    };

    double max_rel = 0.0;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        for (std::size_t i = 0; i < inputs[p].numel(); ++i) {
            std::vector<Matrix> pts = inputs;
            pts[p][i] = inputs[p][i] + eps;
            const double fp = eval(pts);
            pts[p][i] = inputs[p][i] - eps;
            const double fm = eval(pts);
            const double fd = (fp - fm) / (2.0 * eps);
            const double ad = g.at(in_ids[p])[i];
            const double rel =
                std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-4});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace qrnn
