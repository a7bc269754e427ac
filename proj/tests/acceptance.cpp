// Acceptance suite: one numbered check per run-level requirement, each
// printing a single PASS/FAIL line. Run with no arguments for all checks, or
// pass check numbers. Exit code 0 iff every requested check passed.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qrnn/packed_model.hpp"
#include "qrnn/qrnn.hpp"

using namespace qrnn;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("qrnn_accept_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<int> periodic_corpus(std::size_t len, int period) {
    std::vector<int> ids(len);
    for (std::size_t i = 0; i < len; ++i) ids[i] = static_cast<int>(i % period);
    return ids;
}

struct ToyLmResult {
    double best_ppw = 0.0;
    double final_ppw = 0.0;
};

ToyLmResult run_toy_lm(CellKind cell, bool balanced, std::uint64_t seed, std::size_t steps,
                       const std::string& tag) {
    const auto ids = periodic_corpus(600, 4);
    ModelConfig cfg;
    cfg.cell = cell;
    cfg.hidden = 16;
    cfg.embed = 8;
    cfg.vocab = 4;
    cfg.quant.weight_bits = 2;
    cfg.quant.activation_bits = 2;
    cfg.quant.balanced = balanced;
    RnnModel model(cfg, seed);
    TrainConfig tc;
    tc.adam.lr = 1e-3;
    tc.batch = 4;
    tc.unroll = 8;
    tc.epochs = 100000;
    tc.max_steps = steps;
    tc.eval_every = 200;
    tc.seed = seed;
    Trainer trainer(model, tc);
    auto res = trainer.train_lm(ids, ids, temp_dir(tag + std::to_string(seed)));
    ToyLmResult out;
    out.best_ppw = res.best_metric;
    out.final_ppw = eval_lm_ppw(model, ids, tc.batch, tc.unroll);
    return out;
}

// 1. Exact four-way balance for k=2, gamma=3, median threshold on symmetric
//    inputs with distinct magnitudes.
bool check_exact_balance() {
    std::mt19937_64 rng(101);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t half = 128;  // N = 256
        Matrix x(1, 2 * half);
        for (std::size_t i = 0; i < half; ++i) {
            double m = 0.0;
            while (m == 0.0) m = std::abs(normal(rng));
            x[2 * i] = m;
            x[2 * i + 1] = -m;
        }
        auto [xq, meta] = quantize_balanced(x, 2, 3.0, ThresholdStat::median_abs);
        auto rep = balance_report(meta, x);
        for (std::size_t c = 0; c < 4; ++c)
            if (rep.bin_counts[c] != half / 2) return false;
    }
    return true;
}

// 2. Near-balance with the mean threshold on N(0,1) draws; every bin within
//    5% relative of N/4 across 20 seeds.
bool check_half_normal_balance() {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed);
        Matrix x = random_normal(rng, 1, 100000);
        auto [xq, meta] = quantize_balanced(x, 2, 2.5, ThresholdStat::mean_abs);
        auto rep = balance_report(meta, x);
        const double expect = 100000.0 / 4.0;
        for (std::size_t c = 0; c < 4; ++c)
            if (std::abs(rep.bin_counts[c] - expect) > 0.05 * expect) return false;
    }
    return true;
}

// 3. dot_multibit exactly equals the naive integer dot on 1e4 random cases;
//    qmatvec matches the dense reconstructed matvec to 1e-9 relative.
bool check_bit_kernels() {
    std::mt19937_64 rng(103);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t n = rng() % 1025;
        const int ka = 1 + static_cast<int>(rng() % 4);
        const int kw = 1 + static_cast<int>(rng() % 4);
        std::vector<std::uint8_t> a(n), w(n);
        for (auto& c : a) c = static_cast<std::uint8_t>(rng() % (1u << ka));
        for (auto& c : w) c = static_cast<std::uint8_t>(rng() % (1u << kw));
        std::int64_t naive = 0;
        for (std::size_t i = 0; i < n; ++i)
            naive += static_cast<std::int64_t>(a[i]) * w[i];
        if (dot_multibit(pack(a, ka), pack(w, kw)) != naive) return false;
    }
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 1 + rng() % 48, cols = 1 + rng() % 96;
        const int kw = 1 + static_cast<int>(rng() % 4);
        const int ka = 1 + static_cast<int>(rng() % 4);
        std::uniform_real_distribution<double> s(0.05, 2.0);
        QuantizedMatrix wq;
        wq.rows = rows;
        wq.cols = cols;
        wq.bits = kw;
        wq.alpha = s(rng);
        wq.beta = -0.5 * wq.alpha;
        wq.codes.resize(rows * cols);
        for (auto& c : wq.codes) c = static_cast<std::uint8_t>(rng() % (1u << kw));
        std::vector<std::uint8_t> acodes(cols);
        for (auto& c : acodes) c = static_cast<std::uint8_t>(rng() % (1u << ka));
        PackedQuantVector a{pack(acodes, ka), s(rng), -0.3};
        auto out = qmatvec(PackedQuantMatrix::from(wq), a);
        Matrix wd = wq.reconstruct();
        const double la = (1u << ka) - 1;
        for (std::size_t r = 0; r < rows; ++r) {
            double ref = 0.0;
            for (std::size_t cidx = 0; cidx < cols; ++cidx)
                ref += wd(r, cidx) * (a.alpha * (acodes[cidx] / la) + a.beta);
            if (std::abs(out[r] - ref) > 1e-9 * std::max(1.0, std::abs(ref))) return false;
        }
    }
    return true;
}

// 4. Central finite differences across the differentiable primitives, and
//    exact straight-through gradients for the quantization node.
bool check_gradients() {
    std::mt19937_64 rng(104);
    auto sum_all = [](Tape& t, NodeId m) {
        const Matrix& v = t.value(m);
        NodeId left = t.constant(Matrix(1, v.rows(), 1.0));
        NodeId right = t.constant(Matrix(v.cols(), 1, 1.0));
        return t.matmul(t.matmul(left, m), right);
    };
    bool ok = true;

    ok &= grad_check(
              [&](Tape& t, const std::vector<NodeId>& in) {
                  return sum_all(t, t.sigmoid(t.matmul(in[0], in[1])));
              },
              {random_uniform(rng, 4, 5, -1, 1), random_uniform(rng, 5, 3, -1, 1)}) < 1e-4;
    ok &= grad_check(
              [&](Tape& t, const std::vector<NodeId>& in) {
                  NodeId m = t.mul(t.tanh(in[0]), t.sub(in[1], in[2]));
                  return sum_all(t, t.concat_rows(m, t.add(in[0], in[1])));
              },
              {random_uniform(rng, 3, 4, -1, 1), random_uniform(rng, 3, 4, -1, 1),
               random_uniform(rng, 3, 4, -1, 1)}) < 1e-4;
    ok &= grad_check(
              [&](Tape& t, const std::vector<NodeId>& in) {
                  return sum_all(t, t.clip(t.add(in[0], in[1]), -0.75, 0.75));
              },
              {random_uniform(rng, 4, 4, -0.5, 0.5), random_uniform(rng, 4, 1, -0.1, 0.1)}) <
          1e-4;
    ok &= grad_check(
              [&](Tape& t, const std::vector<NodeId>& in) {
                  return t.softmax_xent(t.matmul(in[1], t.tanh(t.gather(in[0], {0, 2, 1}))),
                                        {1, 0, 1});
              },
              {random_uniform(rng, 3, 4, -1, 1), random_uniform(rng, 2, 4, -1, 1)}) < 1e-4;

    // STE: gradient w.r.t. the quantizer input equals the upstream gradient
    for (int trial = 0; trial < 50 && ok; ++trial) {
        Tape t;
        Matrix p = random_normal(rng, 4, 4);
        QuantConfig cfg;
        cfg.weight_bits = 1 + static_cast<int>(rng() % 4);
        NodeId pid = t.parameter(p);
        NodeId q = t.ste_quantize_weights(pid, cfg);
        NodeId loss = sum_all(t, t.mul(q, t.tanh(q)));
        Gradients g = t.backward(loss);
        for (std::size_t i = 0; i < p.numel(); ++i)
            if (g.at(pid)[i] != g.at(q)[i]) ok = false;

        Tape t2;
        Matrix a = random_uniform(rng, 3, 3, 0, 1);
        NodeId aid = t2.parameter(a);
        NodeId aq = t2.ste_quantize_activation(aid, 2, ActivationRange::unit01);
        Gradients g2 = t2.backward(sum_all(t2, t2.mul(aq, aq)));
        for (std::size_t i = 0; i < a.numel(); ++i)
            if (g2.at(aid)[i] != g2.at(aq)[i]) ok = false;
    }
    return ok;
}

// 5. Quantizer contracts as 1e4-case property checks: idempotence,
//    monotonicity, the alpha/(2(2^k-1)) reconstruction bound, and scale
//    equivariance.
bool check_quantizer_contracts() {
    std::mt19937_64 rng(105);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int trial = 0; trial < 10000; ++trial) {
        const int k = 1 + static_cast<int>(rng() % 8);
        const double x = unit(rng), y = unit(rng);
        const double qx = quantize_unit_scalar(x, k);
        if (quantize_unit_scalar(qx, k) != qx) return false;
        if (x <= y && quantize_unit_scalar(x, k) > quantize_unit_scalar(y, k)) return false;
    }
    for (int trial = 0; trial < 10000; ++trial) {
        const int k = 1 + static_cast<int>(rng() % 8);
        Matrix x = random_uniform(rng, 2, 8, -4.0, 4.0);
        auto [xq, meta] = quantize_det(x, k);
        const double bound = meta.alpha / (2.0 * ((1u << k) - 1)) * (1.0 + 1e-12);
        for (std::size_t i = 0; i < x.numel(); ++i)
            if (std::abs(xq[i] - x[i]) > bound) return false;
    }
    for (int trial = 0; trial < 10000; ++trial) {
        const int k = 1 + static_cast<int>(rng() % 4);
        Matrix x = random_normal(rng, 3, 5);
        const double c = std::ldexp(1.0, static_cast<int>(rng() % 11) - 5);
        Matrix cx(3, 5);
        for (std::size_t i = 0; i < x.numel(); ++i) cx[i] = c * x[i];
        auto [q1, m1] = quantize_balanced(x, k, 2.5, ThresholdStat::mean_abs);
        auto [q2, m2] = quantize_balanced(cx, k, 2.5, ThresholdStat::mean_abs);
        for (std::size_t i = 0; i < x.numel(); ++i)
            if (q2[i] != c * q1[i]) return false;
    }
    return true;
}

// 6. 2-bit balanced GRU and LSTM each reach PPW < 1.5 on the period-4 toy
//    corpus within 2000 Adam steps at lr 1e-3, averaged over 3 seeds.
bool check_toy_convergence() {
    for (CellKind cell : {CellKind::gru, CellKind::lstm}) {
        double sum_best = 0.0;
        for (std::uint64_t seed : {1, 2, 3})
            sum_best += run_toy_lm(cell, true, seed, 2000,
                                   cell == CellKind::gru ? "c6_gru" : "c6_lstm")
                            .best_ppw;
        const double mean_best = sum_best / 3.0;
        std::printf("       %s mean best PPW over 3 seeds: %.4f\n",
                    cell == CellKind::gru ? "gru" : "lstm", mean_best);
        if (!(mean_best < 1.5)) return false;
    }
    return true;
}

// 7. Direction of the balanced-vs-unbalanced comparison at k_w=2 on a toy
//    LM: mean final PPW (3 seeds) balanced <= unbalanced.
//
//    The corpus pairs a stochastic successor chain (needs fine logit
//    resolution) with one deterministic anchor edge 7->0 (wants saturated
//    logits, so a few weights legitimately grow large). The growing extremes
//    drag the max-based unbalanced scale and coarsen everything else, while
//    the mean-based balanced scale stays put -- the regime where the
//    max-vs-mean scaling choice actually bites. On a trivially learnable
//    corpus both variants reach the PPW floor and the comparison is noise.
std::vector<int> anchored_markov_corpus(std::size_t len, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<int> ids(len);
    int cur = 0;
    for (std::size_t i = 0; i < len; ++i) {
        ids[i] = cur;
        if (cur == 7) cur = 0;
        else if (u(rng) < 0.7) cur = cur + 1;
        else cur = static_cast<int>(rng() % 7);
    }
    return ids;
}

double run_anchored_lm(bool balanced, std::uint64_t seed) {
    const auto ids = anchored_markov_corpus(2000, 99);
    ModelConfig cfg;
    cfg.cell = CellKind::gru;
    cfg.hidden = 16;
    cfg.embed = 8;
    cfg.vocab = 8;
    cfg.quant.weight_bits = 2;
    cfg.quant.activation_bits = 2;
    cfg.quant.balanced = balanced;
    RnnModel model(cfg, seed);
    TrainConfig tc;
    tc.adam.lr = 1e-3;
    tc.batch = 4;
    tc.unroll = 8;
    tc.epochs = 1000000;
    tc.max_steps = 8000;
    tc.eval_every = 1000;
    tc.seed = seed;
    Trainer trainer(model, tc);
    trainer.train_lm(ids, ids, temp_dir((balanced ? "c7_bal" : "c7_unbal") +
                                        std::to_string(seed)));
    return eval_lm_ppw(model, ids, tc.batch, tc.unroll);
}

bool check_balanced_direction() {
    double bal = 0.0, unbal = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
        bal += run_anchored_lm(true, seed);
        unbal += run_anchored_lm(false, seed);
    }
    std::printf("       mean final PPW: balanced %.4f vs unbalanced %.4f\n", bal / 3,
                unbal / 3);
    return bal <= unbal;
}

// 8. Packed-kernel inference from an exported file matches the training
//    graph's eval logits within 1e-5 on 100 random inputs, and the 2-bit
//    weight payload at reference scale (300 hidden units) respects the k/32
//    ratio (+2% overhead). Size is checked at reference scale because
//    per-row planes pad to 64-bit words; on toy matrices the padding, not
//    the codes, dominates.
bool check_export_parity_and_size() {
    {
        auto dir = temp_dir("c8_size");
        ModelConfig cfg;
        cfg.cell = CellKind::lstm;
        cfg.hidden = 300;
        cfg.embed = 60;
        cfg.vocab = 100;
        cfg.quant.weight_bits = 2;
        cfg.quant.activation_bits = 2;
        RnnModel model(cfg, 5);
        ExportStats stats =
            export_quantized(checkpoint_from_model(model), cfg.quant, dir / "m.qrnn");
        if (stats.weight_packed_bytes >
            stats.weight_float32_bytes * (2.0 / 32.0) + 0.02 * stats.weight_float32_bytes)
            return false;
    }
    for (CellKind cell : {CellKind::gru, CellKind::lstm}) {
        auto dir = temp_dir(cell == CellKind::gru ? "c8_gru" : "c8_lstm");
        ModelConfig cfg;
        cfg.cell = cell;
        cfg.hidden = 32;
        cfg.embed = 16;
        cfg.vocab = 24;
        cfg.quant.weight_bits = 2;
        cfg.quant.activation_bits = 2;
        RnnModel model(cfg, 42);
        Checkpoint ck = checkpoint_from_model(model);
        const auto path = dir / "m.qrnn";
        export_quantized(ck, cfg.quant, path);
        PackedRnnModel packed(load_quantized(path));

        std::mt19937_64 rng(43);
        for (int trial = 0; trial < 100; ++trial) {
            RnnModel::State st = model.zero_state(1);
            PackedRnnModel::State ps = packed.zero_state();
            for (std::size_t i = 0; i < cfg.hidden; ++i) {
                const int code = static_cast<int>(rng() % 4);
                st.h(i, 0) = code / 3.0;
                ps.h_codes[i] = static_cast<std::uint8_t>(code);
            }
            if (cell == CellKind::lstm)
                for (std::size_t i = 0; i < cfg.hidden; ++i) {
                    st.c(i, 0) = std::uniform_real_distribution<>(-1.5, 1.5)(rng);
                    ps.c[i] = st.c(i, 0);
                }
            const int tok = static_cast<int>(rng() % cfg.vocab);
            SequenceBatch sb;
            sb.batch = 1;
            sb.time = 1;
            sb.inputs = {tok};
            sb.targets = {0};
            sb.mask = {1};
            Tape t;
            auto u = model.unroll(t, sb, RunMode::eval, &st);
            const Matrix& graph_logits = t.value(u.step_logits.back());
            packed.step(ps, tok);
            auto packed_logits = packed.logits(ps);
            for (std::size_t i = 0; i < packed_logits.size(); ++i)
                if (std::abs(packed_logits[i] - graph_logits(i, 0)) >= 1e-5) return false;
        }
    }
    return true;
}

// 9. Two runs with identical seeds produce bitwise-identical metrics logs
//    and checkpoint files.
bool check_determinism() {
    auto run = [](const std::string& tag) {
        const auto ids = periodic_corpus(400, 4);
        ModelConfig cfg;
        cfg.cell = CellKind::lstm;
        cfg.hidden = 12;
        cfg.embed = 6;
        cfg.vocab = 4;
        cfg.dropout_embed = 0.1;
        cfg.quant.weight_bits = 2;
        cfg.quant.activation_bits = 2;
        RnnModel model(cfg, 7);
        TrainConfig tc;
        tc.seed = 7;
        tc.batch = 4;
        tc.unroll = 8;
        tc.epochs = 100000;
        tc.max_steps = 200;
        tc.eval_every = 50;
        Trainer trainer(model, tc);
        auto dir = temp_dir(tag);
        auto res = trainer.train_lm(ids, ids, dir);
        return std::pair{res.log.to_csv(), io::read_file(dir / "last.ckpt") +
                                               io::read_file(dir / "best.ckpt")};
    };
    auto [log1, ckpt1] = run("c9_a");
    auto [log2, ckpt2] = run("c9_b");
    return log1 == log2 && ckpt1 == ckpt2;
}

struct Criterion {
    int number;
    const char* name;
    std::function<bool()> body;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "exact four-way balance (k=2, gamma=3, median threshold)", check_exact_balance},
        {2, "half-normal near-balance (k=2, gamma=2.5, mean, 20 seeds)",
         check_half_normal_balance},
        {3, "bit-kernel oracle equivalence (dot_multibit, qmatvec)", check_bit_kernels},
        {4, "gradient suite (finite differences + exact STE pass-through)", check_gradients},
        {5, "quantizer contracts (idempotence/monotonicity/bound/equivariance)",
         check_quantizer_contracts},
        {6, "toy-LM convergence: 2-bit GRU and LSTM reach PPW < 1.5", check_toy_convergence},
        {7, "balanced <= unbalanced final PPW at k_w=2 (3 seeds)", check_balanced_direction},
        {8, "export parity (1e-5 logits) and k/32 payload size", check_export_parity_and_size},
        {9, "bitwise determinism of metrics and checkpoints", check_determinism},
    };

    std::vector<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));

    bool all_ok = true;
    for (const Criterion& c : criteria) {
        if (!wanted.empty() &&
            std::find(wanted.begin(), wanted.end(), c.number) == wanted.end())
            continue;
        bool ok = false;
        try {
            ok = c.body();
        } catch (const std::exception& e) {
            std::printf("       exception: %s\n", e.what());
            ok = false;
        }
        std::printf("%s %d. %s\n", ok ? "[PASS]" : "[FAIL]", c.number, c.name);
        all_ok &= ok;
    }
    return all_ok ? 0 : 1;
}
