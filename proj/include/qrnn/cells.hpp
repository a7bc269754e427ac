#pragma once

// Quantized GRU/LSTM cells, embedding lookup and output projection, built as
// tape subgraphs.
//
// Cell structure notes:
//  - GRU gates and the candidate all use sigmoid, so every recurrent value
//    stays in [0,1] and quantizes with the unit01 activation quantizer. Two
//    activation-quantization nodes per step: one on r*h_prev, one on h_t.
//  - LSTM keeps its cell state C_t in full precision (only elementwise ops
//    touch it); the output squash is sigmoid(C_t) and h_t is quantized.
//  - Weight matrices are wrapped in straight-through weight-quantize nodes
//    once per unrolled graph; biases stay full precision.
//  - bits == 32 disables the corresponding quantizer and yields the
//    full-precision baseline cell.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qrnn/autograd.hpp"
#include "qrnn/data.hpp"

namespace qrnn {

enum class CellKind { gru, lstm, gru_fp, lstm_fp };

inline bool cell_is_gru(CellKind k) { return k == CellKind::gru || k == CellKind::gru_fp; }
inline bool cell_is_quantized(CellKind k) { return k == CellKind::gru || k == CellKind::lstm; }

struct ModelConfig {
    CellKind cell = CellKind::gru;
    std::size_t hidden = 16;
    std::size_t embed = 8;
    std::size_t vocab = 0;
    std::size_t num_classes = 0;  // 0 -> language model
    bool tied_head = false;       // LM head reuses the embedding matrix
    bool tanh_logits = false;     // range constraint on the FC output
    double dropout_embed = 0.0;
    double dropout_out = 0.0;
    QuantConfig quant;

    bool is_lm() const { return num_classes == 0; }
    std::size_t num_outputs() const { return is_lm() ? vocab : num_classes; }

    int weight_bits() const {
        return cell_is_quantized(cell) ? quant.weight_bits : kFullPrecisionBits;
    }
    int activation_bits() const {
        return cell_is_quantized(cell) ? quant.activation_bits : kFullPrecisionBits;
    }

    void validate() const {
        if (hidden == 0 || embed == 0 || vocab == 0)
            throw config_error("model: hidden/embed/vocab must be positive");
        if (!is_lm() && num_classes < 2)
            throw config_error("model: num_classes must be >= 2 for classification");
        if (tied_head && !is_lm()) throw config_error("model: tied_head requires an LM task");
        if (tied_head && hidden != embed)
            throw config_error("model: tied_head requires hidden == embed");
        if (dropout_embed < 0 || dropout_embed > 1 || dropout_out < 0 || dropout_out > 1)
            throw config_error("model: dropout probabilities must be in [0,1]");
        quant.validate();
        // The symmetric codebook has no zero, so dropped activations and the
        // all-zero initial state would fall off the grid.
        if (cell_is_quantized(cell) && quant.activation_range != ActivationRange::unit01)
            throw config_error("model: quantized cells require quant.activation_range=unit01");
    }
};

struct GRUParams {
    Matrix wz, wr, w;  // [hidden x (hidden+input)], no biases
};

struct LSTMParams {
    Matrix wf, wi, wc, wo;  // [hidden x (hidden+input)]
    Matrix bf, bi, bc, bo;  // [hidden x 1]
};

struct EmbeddingParams {
    Matrix e;  // [vocab x embed], entries kept in [0,1]
};

namespace detail {

inline void check_unit_domain(const Matrix& m, const char* what) {
    for (double v : m.data())
        if (!(v >= 0.0 && v <= 1.0))
            throw std::domain_error(std::string(what) + ": value " + std::to_string(v) +
                                    " outside [0,1]");
}

// Inverted dropout rescales survivors by 1/(1-p), which is a per-tensor
// constant folded into the quantization scale, not a domain violation. Check
// the pre-dropout values instead.
inline void check_unit_domain_node(const Tape& t, NodeId id, const char* what) {
    while (t.node(id).kind == OpKind::dropout) id = t.node(id).in[0];
    check_unit_domain(t.value(id), what);
}

}  // namespace detail

struct GruWeightNodes {
    NodeId wz, wr, w;
};

struct LstmWeightNodes {
    NodeId wf, wi, wc, wo;
    NodeId bf, bi, bc, bo;
};

// One quantized GRU step. h_prev and x_t must already lie in [0,1] (and on
// the activation grid when quantization is on); weight nodes must already be
// wrapped by the caller.
inline NodeId gru_step(Tape& t, const GruWeightNodes& wn, NodeId h_prev, NodeId x_t,
                       int act_bits) {
    detail::check_unit_domain(t.value(h_prev), "gru_step: h_prev");
    detail::check_unit_domain_node(t, x_t, "gru_step: x_t");
    const NodeId hx = t.concat_rows(h_prev, x_t);
    const NodeId z = t.sigmoid(t.matmul(wn.wz, hx));
    const NodeId r = t.sigmoid(t.matmul(wn.wr, hx));
    NodeId rh = t.mul(r, h_prev);
    if (act_bits != kFullPrecisionBits)
        rh = t.ste_quantize_activation(rh, act_bits, ActivationRange::unit01);
    const NodeId cand = t.sigmoid(t.matmul(wn.w, t.concat_rows(rh, x_t)));
    const Matrix& zv = t.value(z);
    const NodeId ones = t.constant(Matrix(zv.rows(), zv.cols(), 1.0));
    NodeId h = t.add(t.mul(t.sub(ones, z), h_prev), t.mul(z, cand));
    // convex combination; clip guards the last-ulp rounding case
    h = t.clip(h, 0.0, 1.0);
    if (act_bits != kFullPrecisionBits)
        h = t.ste_quantize_activation(h, act_bits, ActivationRange::unit01);
    return h;
}

// One quantized LSTM step; returns (h_t, c_t). c_prev/c_t are unbounded and
// stay in full precision.
inline std::pair<NodeId, NodeId> lstm_step(Tape& t, const LstmWeightNodes& wn, NodeId h_prev,
                                           NodeId c_prev, NodeId x_t, int act_bits) {
    detail::check_unit_domain(t.value(h_prev), "lstm_step: h_prev");
    detail::check_unit_domain_node(t, x_t, "lstm_step: x_t");
    const NodeId hx = t.concat_rows(h_prev, x_t);
    const NodeId f = t.sigmoid(t.add(t.matmul(wn.wf, hx), wn.bf));
    const NodeId i = t.sigmoid(t.add(t.matmul(wn.wi, hx), wn.bi));
    const NodeId ctilde = t.tanh(t.add(t.matmul(wn.wc, hx), wn.bc));
    const NodeId c = t.add(t.mul(f, c_prev), t.mul(i, ctilde));
    const NodeId o = t.sigmoid(t.add(t.matmul(wn.wo, hx), wn.bo));
    NodeId h = t.mul(o, t.sigmoid(c));
    if (act_bits != kFullPrecisionBits)
        h = t.ste_quantize_activation(h, act_bits, ActivationRange::unit01);
    return {h, c};
}

// Embedding rows behave like activations: gather then unit01-quantize.
// Gradient reaches the selected rows through the STE and scatter-add.
inline NodeId embed_lookup(Tape& t, NodeId table, const std::vector<int>& ids, int act_bits) {
    NodeId x = t.gather(table, ids);
    if (act_bits != kFullPrecisionBits)
        x = t.ste_quantize_activation(x, act_bits, ActivationRange::unit01);
    return x;
}

// logits = W_out * h + b, with optional tanh range constraint. Dropout on h,
// when wanted, is applied by the caller.
inline NodeId output_projection(Tape& t, NodeId h, NodeId w_out_q, NodeId b_out,
                                bool tanh_constraint) {
    NodeId logits = t.add(t.matmul(w_out_q, h), b_out);
    if (tanh_constraint) logits = t.tanh(logits);
    return logits;
}

enum class RunMode { train, eval };

class RnnModel {
  public:
    RnnModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t h = cfg_.hidden, in = cfg_.hidden + cfg_.embed;
        emb.e = random_uniform(rng, cfg_.vocab, cfg_.embed, 0.0, 1.0);
        if (cell_is_gru(cfg_.cell)) {
            gru.wz = random_uniform(rng, h, in, -kInitRange, kInitRange);
            gru.wr = random_uniform(rng, h, in, -kInitRange, kInitRange);
            gru.w = random_uniform(rng, h, in, -kInitRange, kInitRange);
        } else {
            lstm.wf = random_uniform(rng, h, in, -kInitRange, kInitRange);
            lstm.wi = random_uniform(rng, h, in, -kInitRange, kInitRange);
            lstm.wc = random_uniform(rng, h, in, -kInitRange, kInitRange);
            lstm.wo = random_uniform(rng, h, in, -kInitRange, kInitRange);
            lstm.bf = Matrix(h, 1, 1.0);  // standard forget-gate bias init
            lstm.bi = Matrix(h, 1, 0.0);
            lstm.bc = Matrix(h, 1, 0.0);
            lstm.bo = Matrix(h, 1, 0.0);
        }
        if (!cfg_.tied_head)
            w_out = random_uniform(rng, cfg_.num_outputs(), h, -kInitRange, kInitRange);
        b_out = Matrix(cfg_.num_outputs(), 1, 0.0);
    }

    const ModelConfig& config() const { return cfg_; }

    std::vector<std::pair<std::string, Matrix*>> parameters() {
        std::vector<std::pair<std::string, Matrix*>> p;
        p.emplace_back("emb.E", &emb.e);
        if (cell_is_gru(cfg_.cell)) {
            p.emplace_back("gru.Wz", &gru.wz);
            p.emplace_back("gru.Wr", &gru.wr);
            p.emplace_back("gru.W", &gru.w);
        } else {
            p.emplace_back("lstm.Wf", &lstm.wf);
            p.emplace_back("lstm.Wi", &lstm.wi);
            p.emplace_back("lstm.Wc", &lstm.wc);
            p.emplace_back("lstm.Wo", &lstm.wo);
            p.emplace_back("lstm.bf", &lstm.bf);
            p.emplace_back("lstm.bi", &lstm.bi);
            p.emplace_back("lstm.bc", &lstm.bc);
            p.emplace_back("lstm.bo", &lstm.bo);
        }
        if (!cfg_.tied_head) p.emplace_back("out.W", &w_out);
        p.emplace_back("out.b", &b_out);
        return p;
    }

    // Embedding entries must stay in [0,1]; called after every optimizer step.
    void clip_embedding() {
        for (double& v : emb.e.data()) v = std::clamp(v, 0.0, 1.0);
    }

    struct State {
        Matrix h;  // [hidden x batch]
        Matrix c;  // [hidden x batch], LSTM only
    };

    State zero_state(std::size_t batch) const {
        State s;
        s.h = Matrix(cfg_.hidden, batch, 0.0);
        if (!cell_is_gru(cfg_.cell)) s.c = Matrix(cfg_.hidden, batch, 0.0);
        return s;
    }

    struct Unrolled {
        NodeId mean_loss = -1;  // scalar, per-token (LM) / per-document mean
        NodeId sum_loss = -1;   // scalar sum of cross entropies in nats
        double sum_xent = 0.0;
        std::size_t token_count = 0;
        std::vector<NodeId> step_logits;
        State final_state;
        std::vector<std::pair<std::string, NodeId>> param_nodes;
    };

    // Builds the truncated-BPTT graph for one batch. The carried state enters
    // as a constant, so gradients stop at the batch boundary; the final state
    // is returned by value for the next contiguous batch.
    Unrolled unroll(Tape& t, const SequenceBatch& batch, RunMode mode,
                    const State* carried = nullptr) const {
        const bool train = mode == RunMode::train;
        const int ka = cfg_.activation_bits();
        Unrolled u;

        const NodeId e_node = t.parameter(emb.e);
        u.param_nodes.emplace_back("emb.E", e_node);

        GruWeightNodes gw{};
        LstmWeightNodes lw{};
        if (cell_is_gru(cfg_.cell)) {
            const NodeId wz = t.parameter(gru.wz), wr = t.parameter(gru.wr),
                         w = t.parameter(gru.w);
            u.param_nodes.emplace_back("gru.Wz", wz);
            u.param_nodes.emplace_back("gru.Wr", wr);
            u.param_nodes.emplace_back("gru.W", w);
            gw = {wrap_weight(t, wz), wrap_weight(t, wr), wrap_weight(t, w)};
        } else {
            const NodeId wf = t.parameter(lstm.wf), wi = t.parameter(lstm.wi),
                         wc = t.parameter(lstm.wc), wo = t.parameter(lstm.wo);
            const NodeId bf = t.parameter(lstm.bf), bi = t.parameter(lstm.bi),
                         bc = t.parameter(lstm.bc), bo = t.parameter(lstm.bo);
            u.param_nodes.emplace_back("lstm.Wf", wf);
            u.param_nodes.emplace_back("lstm.Wi", wi);
            u.param_nodes.emplace_back("lstm.Wc", wc);
            u.param_nodes.emplace_back("lstm.Wo", wo);
            u.param_nodes.emplace_back("lstm.bf", bf);
            u.param_nodes.emplace_back("lstm.bi", bi);
            u.param_nodes.emplace_back("lstm.bc", bc);
            u.param_nodes.emplace_back("lstm.bo", bo);
            lw = {wrap_weight(t, wf), wrap_weight(t, wi), wrap_weight(t, wc), wrap_weight(t, wo),
                  bf, bi, bc, bo};
        }
        NodeId w_out_node = -1;
        if (cfg_.tied_head) {
            w_out_node = e_node;
        } else {
            w_out_node = t.parameter(w_out);
            u.param_nodes.emplace_back("out.W", w_out_node);
        }
        const NodeId w_out_q = wrap_weight(t, w_out_node);
        const NodeId b_out_node = t.parameter(b_out);
        u.param_nodes.emplace_back("out.b", b_out_node);

        State init = carried ? *carried : zero_state(batch.batch);
        NodeId h = t.constant(init.h, /*on_grid=*/true);
        NodeId c = cell_is_gru(cfg_.cell) ? -1 : t.constant(init.c);

        NodeId total = -1;
        for (std::size_t step = 0; step < batch.time; ++step) {
            NodeId x = embed_lookup(t, e_node, batch.input_column(step), ka);
            x = t.dropout(x, cfg_.dropout_embed, train);
            if (cell_is_gru(cfg_.cell)) {
                h = gru_step(t, gw, h, x, ka);
            } else {
                auto [hn, cn] = lstm_step(t, lw, h, c, x, ka);
                h = hn;
                c = cn;
            }
            if (cfg_.is_lm()) {
                NodeId ho = t.dropout(h, cfg_.dropout_out, train);
                NodeId logits =
                    output_projection(t, ho, w_out_q, b_out_node, cfg_.tanh_logits);
                u.step_logits.push_back(logits);
                NodeId loss = t.softmax_xent(logits, batch.target_column(step));
                total = total < 0 ? loss : t.add(total, loss);
            }
        }
        if (!cfg_.is_lm()) {
            NodeId ho = t.dropout(h, cfg_.dropout_out, train);
            NodeId logits = output_projection(t, ho, w_out_q, b_out_node, cfg_.tanh_logits);
            u.step_logits.push_back(logits);
            total = t.softmax_xent(logits, batch.labels);
        }

        u.sum_loss = total;
        u.token_count = cfg_.is_lm() ? batch.batch * batch.time : batch.batch;
        u.sum_xent = t.value(total)(0, 0);
        u.mean_loss =
            t.mul(total, t.constant(Matrix(1, 1, 1.0 / static_cast<double>(u.token_count))));
        u.final_state.h = t.value(h);
        if (!cell_is_gru(cfg_.cell)) u.final_state.c = t.value(c);
        return u;
    }

    EmbeddingParams emb;
    GRUParams gru;
    LSTMParams lstm;
    Matrix w_out;  // [num_outputs x hidden]; unused when tied_head
    Matrix b_out;  // [num_outputs x 1]

    static constexpr double kInitRange = 0.08;

  private:
    NodeId wrap_weight(Tape& t, NodeId w) const {
        if (cfg_.weight_bits() == kFullPrecisionBits) return w;
        return t.ste_quantize_weights(w, cfg_.quant);
    }

    ModelConfig cfg_;
};

}  // namespace qrnn
