#pragma once

// Optimizers (Adam, clipped SGD), perplexity, metrics logging, and the
// truncated-BPTT training loops for language modeling and classification.
//
// Determinism contract: a single mt19937_64 drives initialization, dropout
// and shuffling; evaluation never touches it. Identical seeds give bitwise
// identical metrics and checkpoints. Resume restarts at the epoch boundary
// the checkpoint was written at, which is also where hidden state resets,
// so a resumed run replays the uninterrupted one exactly.

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "qrnn/cells.hpp"
#include "qrnn/data.hpp"
#include "qrnn/modelio.hpp"

namespace qrnn {

enum class OptimizerKind { adam, sgd };

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    AdamHyper adam;
    double sgd_lr = 1.0;
    double clipnorm = 5.0;       // SGD gradient-norm clip; <=0 disables
    double lr_decay = 1.0;       // SGD staircase factor
    std::size_t decay_every = 0; // steps per decay stage; 0 disables
    std::size_t batch = 4;
    std::size_t unroll = 8;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // 0 = bounded by epochs only
    std::uint64_t seed = 1;
    double weight_decay = 0.0;
    std::size_t eval_every = 100;

    void validate() const {
        if (!(adam.lr > 0) || !(sgd_lr > 0)) throw config_error("train: learning rate must be > 0");
        if (unroll < 1) throw config_error("train: unroll must be >= 1");
        if (batch < 1) throw config_error("train: batch must be >= 1");
        if (eval_every < 1) throw config_error("train: eval_every must be >= 1");
        if (weight_decay < 0) throw config_error("train: weight_decay must be >= 0");
    }
};

struct AdamState {
    Matrix m, v;
};

// One bias-corrected Adam update for a single tensor.
inline void adam_update(Matrix& p, const Matrix& g, AdamState& st, const AdamHyper& h,
                        std::size_t t) {
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.numel(); ++i) {
        st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * g[i];
        st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        p[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
}

// Applies one optimizer step over named parameters. Weight decay is added to
// the gradient of weight matrices (embedding and biases excluded). Gradients
// must be finite; a NaN/Inf aborts with the parameter name.
class Optimizer {
  public:
    Optimizer(const TrainConfig& tc, const std::vector<std::pair<std::string, Matrix*>>& params)
        : tc_(tc), params_(params) {
        if (tc_.optimizer == OptimizerKind::adam) {
            states_.reserve(params_.size());
            for (auto& [name, p] : params_)
                states_.push_back({Matrix(p->rows(), p->cols()), Matrix(p->rows(), p->cols())});
        }
    }

    std::size_t steps_taken() const { return t_; }

    void step(const Gradients& grads,
              const std::vector<std::pair<std::string, NodeId>>& param_nodes) {
        if (param_nodes.size() != params_.size())
            throw std::logic_error("optimizer: parameter list mismatch");
        ++t_;
        std::vector<Matrix> g;
        g.reserve(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (param_nodes[i].first != params_[i].first)
                throw std::logic_error("optimizer: parameter order mismatch at " +
                                       params_[i].first);
            g.push_back(grads.at(param_nodes[i].second));
            if (!all_finite(g.back()))
                throw training_error("NaN/Inf gradient for " + params_[i].first + " at step " +
                                     std::to_string(t_));
            if (tc_.weight_decay > 0.0 && decays(params_[i].first)) {
                Matrix& gi = g.back();
                const Matrix& p = *params_[i].second;
                for (std::size_t k = 0; k < gi.numel(); ++k)
                    gi[k] += tc_.weight_decay * p[k];
            }
        }
        if (tc_.optimizer == OptimizerKind::adam) {
            for (std::size_t i = 0; i < params_.size(); ++i)
                adam_update(*params_[i].second, g[i], states_[i], tc_.adam, t_);
        } else {
            double lr = tc_.sgd_lr;
            if (tc_.decay_every > 0)
                lr *= std::pow(tc_.lr_decay,
                               static_cast<double>((t_ - 1) / tc_.decay_every));
            double scale = 1.0;
            if (tc_.clipnorm > 0.0) {
                double sq = 0.0;
                for (const Matrix& gi : g)
                    for (double v : gi.data()) sq += v * v;
                const double norm = std::sqrt(sq);
                if (norm > tc_.clipnorm) scale = tc_.clipnorm / norm;
            }
            for (std::size_t i = 0; i < params_.size(); ++i) {
                Matrix& p = *params_[i].second;
                const Matrix& gi = g[i];
                for (std::size_t k = 0; k < p.numel(); ++k) p[k] -= lr * scale * gi[k];
            }
        }
    }

    std::vector<std::pair<std::string, Matrix>> state_tensors() const {
        std::vector<std::pair<std::string, Matrix>> out;
        if (tc_.optimizer == OptimizerKind::adam)
            for (std::size_t i = 0; i < params_.size(); ++i) {
                out.emplace_back("adam.m." + params_[i].first, states_[i].m);
                out.emplace_back("adam.v." + params_[i].first, states_[i].v);
            }
        return out;
    }

    void restore(const Checkpoint& ck) {
        t_ = static_cast<std::size_t>(ck.scalar("optimizer.t"));
        if (tc_.optimizer == OptimizerKind::adam)
            for (std::size_t i = 0; i < params_.size(); ++i) {
                for (const auto& [name, m] : ck.opt_tensors) {
                    if (name == "adam.m." + params_[i].first) states_[i].m = m;
                    if (name == "adam.v." + params_[i].first) states_[i].v = m;
                }
            }
    }

  private:
    static bool decays(const std::string& name) {
        return name.find(".W") != std::string::npos;  // weight matrices only
    }

    TrainConfig tc_;
    std::vector<std::pair<std::string, Matrix*>> params_;
    std::vector<AdamState> states_;
    std::size_t t_ = 0;
};

// exp of average per-token cross entropy (nats).
inline double perplexity(double sum_xent, std::size_t token_count) {
    if (token_count == 0) throw std::invalid_argument("perplexity: token_count must be > 0");
    return std::exp(sum_xent / static_cast<double>(token_count));
}

struct MetricsRecord {
    std::size_t step = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
};

struct MetricsLog {
    std::vector<MetricsRecord> records;

    void add(std::size_t step, std::string split, std::string metric, double value) {
        if (!records.empty() && step < records.back().step)
            throw std::logic_error("metrics: step field must be non-decreasing");
        records.push_back({step, std::move(split), std::move(metric), value});
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "step,split,metric,value\n";
        out.precision(17);
        for (const MetricsRecord& r : records)
            out << r.step << ',' << r.split << ',' << r.metric << ',' << r.value << '\n';
        return out.str();
    }
};

// Eval-mode PPW over a token stream; never consumes training RNG.
inline double eval_lm_ppw(const RnnModel& model, const std::vector<int>& ids, std::size_t batch,
                          std::size_t unroll) {
    const auto batches = lm_batches(ids, batch, unroll);
    RnnModel::State state = model.zero_state(batch);
    double sum_xent = 0.0;
    std::size_t tokens = 0;
    for (const SequenceBatch& sb : batches) {
        Tape t;
        auto u = model.unroll(t, sb, RunMode::eval, &state);
        state = u.final_state;
        sum_xent += u.sum_xent;
        tokens += u.token_count;
    }
    return perplexity(sum_xent, tokens);
}

struct LabeledSample {
    std::vector<int> ids;  // already padded/cut to a fixed length
    int label = 0;
};

inline SequenceBatch make_classification_batch(const std::vector<LabeledSample>& samples,
                                               const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("classification batch: empty index set");
    SequenceBatch sb;
    sb.batch = idx.size();
    sb.time = samples[idx[0]].ids.size();
    sb.inputs.resize(sb.batch * sb.time);
    sb.mask.assign(sb.batch * sb.time, 1);
    sb.labels.resize(sb.batch);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const LabeledSample& s = samples[idx[b]];
        if (s.ids.size() != sb.time)
            throw shape_error("classification batch: ragged sample lengths");
        for (std::size_t t = 0; t < sb.time; ++t) {
            sb.inputs[b * sb.time + t] = s.ids[t];
            sb.mask[b * sb.time + t] = s.ids[t] != Vocab::pad_id;
        }
        sb.labels[b] = s.label;
    }
    return sb;
}

inline double eval_accuracy(const RnnModel& model, const std::vector<LabeledSample>& samples,
                            std::size_t batch) {
    std::size_t correct = 0, total = 0;
    for (std::size_t start = 0; start < samples.size(); start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(start + batch, samples.size()); ++i)
            idx.push_back(i);
        SequenceBatch sb = make_classification_batch(samples, idx);
        Tape t;
        auto u = model.unroll(t, sb, RunMode::eval);
        const Matrix& logits = t.value(u.step_logits.back());
        for (std::size_t b = 0; b < sb.batch; ++b) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < logits.rows(); ++c)
                if (logits(c, b) > logits(arg, b)) arg = c;
            correct += static_cast<int>(arg) == sb.labels[b];
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

struct TrainResult {
    MetricsLog log;
    double best_metric = 0.0;
    std::size_t steps_run = 0;
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
};

class Trainer {
  public:
    Trainer(RnnModel& model, const TrainConfig& tc)
        : model_(model), tc_(tc), params_(model.parameters()), opt_(tc, params_),
          rng_(tc.seed) {
        tc_.validate();
        best_ = model_.config().is_lm() ? std::numeric_limits<double>::infinity()
                                        : -std::numeric_limits<double>::infinity();
    }

    Checkpoint make_checkpoint() const {
        Checkpoint ck;
        ck.config = model_.config();
        for (const auto& [name, p] : params_) ck.tensors.emplace_back(name, *p);
        ck.opt_tensors = opt_.state_tensors();
        ck.scalars.emplace_back("step", static_cast<double>(step_));
        ck.scalars.emplace_back("epoch", static_cast<double>(epoch_));
        ck.scalars.emplace_back("optimizer.t", static_cast<double>(opt_.steps_taken()));
        ck.scalars.emplace_back("best_metric", best_);
        std::ostringstream rs;
        rs << rng_;
        ck.rng_state = rs.str();
        return ck;
    }

    void restore(const Checkpoint& ck) {
        load_model_params(model_, ck);
        opt_.restore(ck);
        step_ = static_cast<std::size_t>(ck.scalar("step"));
        epoch_ = static_cast<std::size_t>(ck.scalar("epoch"));
        best_ = ck.scalar("best_metric", best_);
        std::istringstream rs(ck.rng_state);
        rs >> rng_;
    }

    TrainResult train_lm(const std::vector<int>& train_ids, const std::vector<int>& valid_ids,
                         const std::filesystem::path& out_dir) {
        std::filesystem::create_directories(out_dir);
        const auto batches = lm_batches(train_ids, tc_.batch, tc_.unroll);
        TrainResult res;
        bool done = steps_exhausted();
        while (!done && epoch_ < tc_.epochs) {
            RnnModel::State state = model_.zero_state(tc_.batch);
            for (const SequenceBatch& sb : batches) {
                if ((done = steps_exhausted())) break;
                Tape t(&rng_);
                auto u = model_.unroll(t, sb, RunMode::train, &state);
                state = u.final_state;
                const double mean_xent = u.sum_xent / static_cast<double>(u.token_count);
                if (!std::isfinite(mean_xent)) throw diverged();
                Gradients g = t.backward(u.mean_loss);
                opt_.step(g, u.param_nodes);
                model_.clip_embedding();
                check_params_finite();
                ++step_;
                res.log.add(step_, "train", "xent", mean_xent);
                if (step_ % tc_.eval_every == 0) {
                    const double ppw = eval_lm_ppw(model_, valid_ids, tc_.batch, tc_.unroll);
                    res.log.add(step_, "valid", "ppw", ppw);
                    if (ppw < best_) {
                        best_ = ppw;
                        res.best_checkpoint = out_dir / "best.ckpt";
                        save_checkpoint(make_checkpoint(), res.best_checkpoint);
                    }
                }
            }
            if (!done) {
                ++epoch_;
                res.last_checkpoint = out_dir / "last.ckpt";
                save_checkpoint(make_checkpoint(), res.last_checkpoint);
            }
        }
        finish(res, out_dir);
        return res;
    }

    TrainResult train_classifier(const std::vector<LabeledSample>& train_samples,
                                 const std::vector<LabeledSample>& valid_samples,
                                 const std::filesystem::path& out_dir) {
        std::filesystem::create_directories(out_dir);
        TrainResult res;
        bool done = steps_exhausted();
        while (!done && epoch_ < tc_.epochs) {
            std::vector<std::size_t> order(train_samples.size());
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng_);
            for (std::size_t start = 0; start < order.size(); start += tc_.batch) {
                if ((done = steps_exhausted())) break;
                std::vector<std::size_t> idx(
                    order.begin() + start,
                    order.begin() + std::min(start + tc_.batch, order.size()));
                SequenceBatch sb = make_classification_batch(train_samples, idx);
                Tape t(&rng_);
                auto u = model_.unroll(t, sb, RunMode::train);
                const double mean_xent = u.sum_xent / static_cast<double>(u.token_count);
                if (!std::isfinite(mean_xent)) throw diverged();
                Gradients g = t.backward(u.mean_loss);
                opt_.step(g, u.param_nodes);
                model_.clip_embedding();
                check_params_finite();
                ++step_;
                res.log.add(step_, "train", "xent", mean_xent);
                if (step_ % tc_.eval_every == 0) {
                    const double acc = eval_accuracy(model_, valid_samples, tc_.batch);
                    res.log.add(step_, "valid", "accuracy", acc);
                    if (acc > best_) {
                        best_ = acc;
                        res.best_checkpoint = out_dir / "best.ckpt";
                        save_checkpoint(make_checkpoint(), res.best_checkpoint);
                    }
                }
            }
            if (!done) {
                ++epoch_;
                res.last_checkpoint = out_dir / "last.ckpt";
                save_checkpoint(make_checkpoint(), res.last_checkpoint);
            }
        }
        finish(res, out_dir);
        return res;
    }

    std::size_t step() const { return step_; }
    double best() const { return best_; }

  private:
    bool steps_exhausted() const { return tc_.max_steps > 0 && step_ >= tc_.max_steps; }

    training_error diverged() const {
        return training_error(
            "loss diverged (NaN/Inf) at step " + std::to_string(step_ + 1) +
            "; consider setting train.weight_decay > 0 or model.tanh_logits = true");
    }

    void check_params_finite() const {
        for (const auto& [name, p] : params_)
            if (!all_finite(*p))
                throw training_error("parameter " + name + " became NaN/Inf at step " +
                                     std::to_string(step_) +
                                     "; consider train.weight_decay > 0 or model.tanh_logits");
    }

    void finish(TrainResult& res, const std::filesystem::path& out_dir) {
        res.best_metric = best_;
        res.steps_run = step_;
        res.last_checkpoint = out_dir / "last.ckpt";
        save_checkpoint(make_checkpoint(), res.last_checkpoint);
        if (res.best_checkpoint.empty()) {
            res.best_checkpoint = out_dir / "best.ckpt";
            if (!std::filesystem::exists(res.best_checkpoint))
                save_checkpoint(make_checkpoint(), res.best_checkpoint);
        }
    }

    RnnModel& model_;
    TrainConfig tc_;
    std::vector<std::pair<std::string, Matrix*>> params_;
    Optimizer opt_;
    std::mt19937_64 rng_;
    std::size_t step_ = 0, epoch_ = 0;
    double best_ = 0.0;
};

}  // namespace qrnn
