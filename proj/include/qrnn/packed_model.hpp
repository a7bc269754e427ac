#pragma once

// Inference on an exported quantized model. Weights stay bit-plane packed;
// every matrix-vector product runs through the popcount kernel. Activations
// are carried as integer codes on the unit01 grid and re-quantized after the
// elementwise gate arithmetic, mirroring the training graph's eval forward.

#include <cstdint>
#include <vector>

#include "qrnn/data.hpp"
#include "qrnn/modelio.hpp"

namespace qrnn {

class PackedRnnModel {
  public:
    explicit PackedRnnModel(QuantModel qm) : qm_(std::move(qm)) {
        if (qm_.k_a < 1 || qm_.k_a > 8 || qm_.k_w < 1 || qm_.k_w > 8)
            throw io_error("packed model: bad bit-widths");
        levels_a_ = static_cast<double>((1u << qm_.k_a) - 1);
        emb_codes_ = qm_.packed_tensor("emb.E").to_quantized().codes;
        if (emb_codes_.size() != static_cast<std::size_t>(qm_.vocab) * qm_.embed)
            throw io_error("packed model: embedding shape mismatch");
        if (is_gru()) {
            wz_ = &qm_.packed_tensor("gru.Wz");
            wr_ = &qm_.packed_tensor("gru.Wr");
            w_ = &qm_.packed_tensor("gru.W");
        } else {
            wf_ = &qm_.packed_tensor("lstm.Wf");
            wi_ = &qm_.packed_tensor("lstm.Wi");
            wc_ = &qm_.packed_tensor("lstm.Wc");
            wo_ = &qm_.packed_tensor("lstm.Wo");
            bf_ = &qm_.raw_tensor("lstm.bf");
            bi_ = &qm_.raw_tensor("lstm.bi");
            bc_ = &qm_.raw_tensor("lstm.bc");
            bo_ = &qm_.raw_tensor("lstm.bo");
        }
        w_out_ = &qm_.packed_tensor("out.W");
        b_out_ = &qm_.raw_tensor("out.b");
    }

    bool is_gru() const { return qm_.cell == 0; }
    const QuantModel& file() const { return qm_; }

    struct State {
        std::vector<std::uint8_t> h_codes;
        std::vector<double> c;
    };

    State zero_state() const {
        State s;
        s.h_codes.assign(qm_.hidden, 0);
        if (!is_gru()) s.c.assign(qm_.hidden, 0.0);
        return s;
    }

    std::vector<std::uint8_t> embed_codes(int token) const {
        if (token < 0 || static_cast<std::uint32_t>(token) >= qm_.vocab)
            throw std::out_of_range("packed model: token id out of range");
        const std::size_t off = static_cast<std::size_t>(token) * qm_.embed;
        return {emb_codes_.begin() + off, emb_codes_.begin() + off + qm_.embed};
    }

    void step(State& s, int token) const {
        const std::vector<std::uint8_t> x = embed_codes(token);
        std::vector<std::uint8_t> hx(s.h_codes);
        hx.insert(hx.end(), x.begin(), x.end());
        const PackedQuantVector a{pack(hx, qm_.k_a), 1.0, 0.0};
        if (is_gru()) {
            std::vector<double> z = qmatvec(*wz_, a);
            std::vector<double> r = qmatvec(*wr_, a);
            std::vector<std::uint8_t> rh(qm_.hidden);
            for (std::size_t i = 0; i < qm_.hidden; ++i) {
                const double h_real = s.h_codes[i] / levels_a_;
                rh[i] = detail::unit_code(sigmoid(r[i]) * h_real, qm_.k_a);
            }
            std::vector<std::uint8_t> rhx(rh);
            rhx.insert(rhx.end(), x.begin(), x.end());
            const PackedQuantVector a2{pack(rhx, qm_.k_a), 1.0, 0.0};
            std::vector<double> cand = qmatvec(*w_, a2);
            for (std::size_t i = 0; i < qm_.hidden; ++i) {
                const double zi = sigmoid(z[i]);
                const double h_real = s.h_codes[i] / levels_a_;
                double h_new = (1.0 - zi) * h_real + zi * sigmoid(cand[i]);
                h_new = std::clamp(h_new, 0.0, 1.0);
                s.h_codes[i] = detail::unit_code(h_new, qm_.k_a);
            }
        } else {
            std::vector<double> f = qmatvec(*wf_, a);
            std::vector<double> i_g = qmatvec(*wi_, a);
            std::vector<double> ct = qmatvec(*wc_, a);
            std::vector<double> o = qmatvec(*wo_, a);
            for (std::size_t i = 0; i < qm_.hidden; ++i) {
                const double fg = sigmoid(f[i] + bf_->data[i]);
                const double ig = sigmoid(i_g[i] + bi_->data[i]);
                const double cc = std::tanh(ct[i] + bc_->data[i]);
                const double og = sigmoid(o[i] + bo_->data[i]);
                s.c[i] = fg * s.c[i] + ig * cc;
                s.h_codes[i] = detail::unit_code(og * sigmoid(s.c[i]), qm_.k_a);
            }
        }
    }

    std::vector<double> logits(const State& s) const {
        const PackedQuantVector h{pack(s.h_codes, qm_.k_a), 1.0, 0.0};
        std::vector<double> out = qmatvec(*w_out_, h);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b_out_->data[i];
        if (qm_.flags & kQuantFlagTanhLogits)
            for (double& v : out) v = std::tanh(v);
        return out;
    }

  private:
    QuantModel qm_;
    double levels_a_ = 0.0;
    std::vector<std::uint8_t> emb_codes_;
    const PackedQuantMatrix *wz_ = nullptr, *wr_ = nullptr, *w_ = nullptr;
    const PackedQuantMatrix *wf_ = nullptr, *wi_ = nullptr, *wc_ = nullptr, *wo_ = nullptr;
    const PackedQuantMatrix* w_out_ = nullptr;
    const RawTensor *bf_ = nullptr, *bi_ = nullptr, *bc_ = nullptr, *bo_ = nullptr;
    const RawTensor* b_out_ = nullptr;
};

inline double xent_from_logits(const std::vector<double>& logits, int target) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return mx + std::log(z) - logits[static_cast<std::size_t>(target)];
}

// LM evaluation with per-stream state carry; returns (sum_xent, tokens).
inline std::pair<double, std::size_t> packed_eval_lm(const PackedRnnModel& model,
                                                     const std::vector<int>& ids,
                                                     std::size_t batch, std::size_t unroll) {
    const auto batches = lm_batches(ids, batch, unroll);
    std::vector<PackedRnnModel::State> streams(batch, model.zero_state());
    double sum_xent = 0.0;
    std::size_t tokens = 0;
    for (const SequenceBatch& sb : batches)
        for (std::size_t b = 0; b < sb.batch; ++b)
            for (std::size_t t = 0; t < sb.time; ++t) {
                model.step(streams[b], sb.input(b, t));
                sum_xent += xent_from_logits(model.logits(streams[b]), sb.target(b, t));
                ++tokens;
            }
    return {sum_xent, tokens};
}

// Final-state classification accuracy over padded documents.
inline double packed_eval_accuracy(const PackedRnnModel& model,
                                   const std::vector<std::vector<int>>& docs,
                                   const std::vector<int>& labels) {
    std::size_t correct = 0;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        PackedRnnModel::State s = model.zero_state();
        for (int tok : docs[d]) model.step(s, tok);
        const std::vector<double> l = model.logits(s);
        std::size_t arg = 0;
        for (std::size_t i = 1; i < l.size(); ++i)
            if (l[i] > l[arg]) arg = i;
        if (static_cast<int>(arg) == labels[d]) ++correct;
    }
    return docs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(docs.size());
}

}  // namespace qrnn
