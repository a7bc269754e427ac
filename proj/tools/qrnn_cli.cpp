// qrnn command line: train, eval, inspect, export, bench.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "qrnn/packed_model.hpp"
#include "qrnn/qrnn.hpp"

namespace fs = std::filesystem;
using namespace qrnn;

namespace {

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets,
                         std::optional<std::uint64_t> seed) {
    ConfigMap cm =
        config_path.empty() ? ConfigMap::parse_string("") : ConfigMap::parse_file(config_path);
    for (const std::string& kv : sets) cm.apply_override(kv);
    if (seed) cm.apply_override("train.seed=" + std::to_string(*seed));
    return RunConfig::from_map(cm);
}

struct LmData {
    Vocab vocab;
    std::vector<int> train, valid, test;
};

LmData load_lm_data(const RunConfig& rc) {
    if (rc.data.train_path.empty()) throw config_error("data.train is required");
    LmData d;
    const auto train_tokens = load_lm_tokens(rc.data.train_path);
    d.vocab = build_vocab(train_tokens, rc.data.max_vocab);
    d.train = encode(d.vocab, train_tokens);
    if (!rc.data.valid_path.empty())
        d.valid = encode(d.vocab, load_lm_tokens(rc.data.valid_path));
    if (!rc.data.test_path.empty()) d.test = encode(d.vocab, load_lm_tokens(rc.data.test_path));
    return d;
}

struct ClsData {
    Vocab vocab;
    std::vector<LabeledSample> train, valid, test;
};

std::vector<LabeledSample> encode_docs(const Vocab& v, const std::vector<LabeledDoc>& docs,
                                       std::size_t seq_len) {
    std::vector<LabeledSample> out;
    out.reserve(docs.size());
    for (const LabeledDoc& d : docs) {
        LabeledSample s;
        s.label = d.label;
        s.ids = pad_or_cut(encode(v, d.tokens), seq_len).first;
        out.push_back(std::move(s));
    }
    return out;
}

ClsData load_cls_data(const RunConfig& rc) {
    if (rc.data.train_path.empty()) throw config_error("data.train is required");
    ClsData d;
    const auto train_docs = load_labeled_docs(rc.data.train_path);
    std::vector<std::string> tokens;
    for (const LabeledDoc& doc : train_docs)
        tokens.insert(tokens.end(), doc.tokens.begin(), doc.tokens.end());
    d.vocab = build_vocab(tokens, rc.data.max_vocab);
    d.train = encode_docs(d.vocab, train_docs, rc.data.seq_len);
    if (!rc.data.valid_path.empty())
        d.valid = encode_docs(d.vocab, load_labeled_docs(rc.data.valid_path), rc.data.seq_len);
    if (!rc.data.test_path.empty())
        d.test = encode_docs(d.vocab, load_labeled_docs(rc.data.test_path), rc.data.seq_len);
    return d;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write " + path.string());
    out << text;
}

bool file_has_magic(const fs::path& path, const char magic[4]) {
    std::ifstream in(path, std::ios::binary);
    char head[4] = {};
    in.read(head, 4);
    return in && std::memcmp(head, magic, 4) == 0;
}

int cmd_train(const std::string& config_path, std::string out_dir,
              const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
              const std::string& resume_path) {
    RunConfig rc = resolve_config(config_path, sets, seed);
    if (out_dir.empty()) out_dir = "run";
    fs::create_directories(out_dir);

    TrainResult res;
    if (rc.data.format == "lm") {
        LmData data = load_lm_data(rc);
        if (rc.model.vocab == 0) rc.model.vocab = data.vocab.size();
        if (rc.model.vocab != data.vocab.size())
            throw config_error("model.vocab=" + std::to_string(rc.model.vocab) +
                               " does not match the corpus vocabulary (" +
                               std::to_string(data.vocab.size()) + ")");
        if (data.valid.empty()) throw config_error("data.valid is required for training");
        RnnModel model(rc.model, rc.train.seed);
        Trainer trainer(model, rc.train);
        if (!resume_path.empty()) trainer.restore(load_checkpoint(resume_path));
        write_text_file(fs::path(out_dir) / "config.toml", rc.to_toml());
        res = trainer.train_lm(data.train, data.valid, out_dir);
        std::printf("trained %zu steps; best valid ppw %.6g\n", res.steps_run,
                    res.best_metric);
    } else {
        ClsData data = load_cls_data(rc);
        if (rc.model.vocab == 0) rc.model.vocab = data.vocab.size();
        if (rc.model.num_classes == 0) rc.model.num_classes = 2;
        if (data.valid.empty()) throw config_error("data.valid is required for training");
        RnnModel model(rc.model, rc.train.seed);
        Trainer trainer(model, rc.train);
        if (!resume_path.empty()) trainer.restore(load_checkpoint(resume_path));
        write_text_file(fs::path(out_dir) / "config.toml", rc.to_toml());
        res = trainer.train_classifier(data.train, data.valid, out_dir);
        std::printf("trained %zu steps; best valid accuracy %.6g\n", res.steps_run,
                    res.best_metric);
    }
    write_text_file(fs::path(out_dir) / "metrics.csv", res.log.to_csv());
    std::printf("wrote %s/metrics.csv and checkpoints\n", out_dir.c_str());
    return 0;
}

int cmd_eval(const std::string& ckpt_path, std::string config_path, const std::string& split,
             const std::vector<std::string>& sets) {
    if (config_path.empty()) {
        const fs::path sibling = fs::path(ckpt_path).parent_path() / "config.toml";
        if (fs::exists(sibling)) config_path = sibling.string();
    }
    if (config_path.empty())
        throw config_error("--config is required (no config.toml found next to the model)");
    RunConfig rc = resolve_config(config_path, sets, std::nullopt);

    const bool packed = file_has_magic(ckpt_path, kQuantMagic);
    if (rc.data.format == "lm") {
        LmData data = load_lm_data(rc);
        const std::vector<int>* ids = nullptr;
        if (split == "train") ids = &data.train;
        else if (split == "valid") ids = &data.valid;
        else if (split == "test") ids = &data.test;
        else throw config_error("unknown split: " + split);
        if (ids->empty()) throw config_error("split '" + split + "' has no data path");
        double ppw = 0.0;
        if (packed) {
            PackedRnnModel model(load_quantized(ckpt_path));
            auto [sum_xent, tokens] = packed_eval_lm(model, *ids, rc.train.batch,
                                                     rc.train.unroll);
            ppw = perplexity(sum_xent, tokens);
        } else {
            Checkpoint ck = load_checkpoint(ckpt_path);
            RnnModel model(ck.config, 0);
            load_model_params(model, ck);
            ppw = eval_lm_ppw(model, *ids, rc.train.batch, rc.train.unroll);
        }
        std::printf("%s ppw %.6f\n", split.c_str(), ppw);
    } else {
        ClsData data = load_cls_data(rc);
        const std::vector<LabeledSample>* samples = nullptr;
        if (split == "train") samples = &data.train;
        else if (split == "valid") samples = &data.valid;
        else if (split == "test") samples = &data.test;
        else throw config_error("unknown split: " + split);
        if (samples->empty()) throw config_error("split '" + split + "' has no data path");
        double acc = 0.0;
        if (packed) {
            PackedRnnModel model(load_quantized(ckpt_path));
            std::vector<std::vector<int>> docs;
            std::vector<int> labels;
            for (const LabeledSample& s : *samples) {
                docs.push_back(s.ids);
                labels.push_back(s.label);
            }
            acc = packed_eval_accuracy(model, docs, labels);
        } else {
            Checkpoint ck = load_checkpoint(ckpt_path);
            RnnModel model(ck.config, 0);
            load_model_params(model, ck);
            acc = eval_accuracy(model, *samples, rc.train.batch);
        }
        std::printf("%s accuracy %.6f\n", split.c_str(), acc);
    }
    return 0;
}

int cmd_inspect(const std::string& ckpt_path, const std::string& out_csv,
                const std::vector<std::string>& sets) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    QuantConfig qc = ck.config.quant;
    {
        ConfigMap cm = ConfigMap::parse_string("");
        for (const std::string& kv : sets) cm.apply_override(kv);
        for (const auto& [key, value] : cm.values())
            if (key.rfind("quant.", 0) != 0)
                throw config_error("inspect only accepts quant.* overrides, got: " + key);
        qc.weight_bits = cm.get_int("quant.weight_bits", qc.weight_bits);
        qc.gamma = cm.get_double("quant.gamma", qc.gamma);
        const std::string stat = cm.get_string(
            "quant.threshold_stat",
            qc.threshold_stat == ThresholdStat::mean_abs ? "mean_abs" : "median_abs");
        qc.threshold_stat =
            stat == "median_abs" ? ThresholdStat::median_abs : ThresholdStat::mean_abs;
    }
    if (qc.weight_bits == kFullPrecisionBits)
        throw config_error("inspect: quant.weight_bits=32 has nothing to histogram");

    std::vector<std::string> names;
    if (cell_is_gru(ck.config.cell)) names = {"gru.Wz", "gru.Wr", "gru.W"};
    else names = {"lstm.Wf", "lstm.Wi", "lstm.Wc", "lstm.Wo"};
    if (!ck.config.tied_head) names.push_back("out.W");

    std::ostringstream csv;
    csv << "tensor,mode,bits,normalized_entropy,max_abs_error,bin_counts\n";
    std::printf("%-10s %-10s %6s %10s %12s  %s\n", "tensor", "mode", "bits", "entropy",
                "max_err", "bin_counts");
    for (const std::string& name : names) {
        const Matrix& w = ck.tensor(name);
        for (bool balanced : {true, false}) {
            QuantConfig variant = qc;
            variant.balanced = balanced;
            const char* mode = balanced ? "balanced" : "unbalanced";
            try {
                auto [wq, meta] = quantize_weights(w, variant);
                BalanceReport rep = balance_report(meta, w);
                std::string bins;
                for (std::size_t i = 0; i < rep.bin_counts.size(); ++i)
                    bins += (i ? ";" : "") + std::to_string(rep.bin_counts[i]);
                std::printf("%-10s %-10s %6d %10.4f %12.5g  [%s]\n", name.c_str(), mode,
                            variant.weight_bits, rep.normalized_entropy, rep.max_abs_error,
                            bins.c_str());
                csv << name << ',' << mode << ',' << variant.weight_bits << ','
                    << rep.normalized_entropy << ',' << rep.max_abs_error << ',' << bins
                    << '\n';
            } catch (const degenerate_input_error& e) {
                std::printf("%-10s %-10s %6d %10s %12s  degenerate: %s\n", name.c_str(), mode,
                            variant.weight_bits, "-", "-", e.what());
                csv << name << ',' << mode << ',' << variant.weight_bits
                    << ",degenerate,degenerate,\n";
            }
        }
    }
    if (!out_csv.empty()) {
        write_text_file(out_csv, csv.str());
        std::printf("wrote %s\n", out_csv.c_str());
    }
    return 0;
}

int cmd_export(const std::string& ckpt_path, const std::string& out_path,
               const std::vector<std::string>& sets) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    QuantConfig qc = ck.config.quant;
    {
        ConfigMap cm = ConfigMap::parse_string("");
        for (const std::string& kv : sets) cm.apply_override(kv);
        qc.weight_bits = cm.get_int("quant.weight_bits", qc.weight_bits);
        qc.activation_bits = cm.get_int("quant.activation_bits", qc.activation_bits);
        qc.balanced = cm.get_bool("quant.balanced", qc.balanced);
        qc.gamma = cm.get_double("quant.gamma", qc.gamma);
    }
    ExportStats stats = export_quantized(ck, qc, out_path);
    std::printf("wrote %s (%zu bytes)\n", out_path.c_str(), stats.file_bytes);
    std::printf("weight payload: %zu bytes packed vs %zu bytes float32 (ratio %.4f)\n",
                stats.weight_packed_bytes, stats.weight_float32_bytes,
                static_cast<double>(stats.weight_packed_bytes) /
                    static_cast<double>(stats.weight_float32_bytes));
    return 0;
}

int cmd_bench(std::size_t rows, std::size_t cols, int kw, int ka, int repeats,
              const std::string& out_csv) {
    std::ostringstream csv;
    csv << "k_w,k_a,rows,cols,packed_ops_s,dense_ops_s,agreement\n";
    auto emit = [&](const BenchReport& r) {
        csv << r.k_w << ',' << r.k_a << ',' << r.rows << ',' << r.cols << ','
            << r.packed_ops_per_sec << ',' << r.dense_ops_per_sec << ','
            << (r.agreement ? "true" : "false") << '\n';
    };
    if (kw > 0 && ka > 0) {
        emit(bench_qmatvec(rows, cols, kw, ka, repeats));
    } else {
        for (int w : {1, 2, 4})
            for (int a : {1, 2, 4}) emit(bench_qmatvec(rows, cols, w, a, repeats));
    }
    std::fputs(csv.str().c_str(), stdout);
    if (!out_csv.empty()) write_text_file(out_csv, csv.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantized RNN training and popcount-kernel inference"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, split = "valid", resume_path, out_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::size_t rows = 128, cols = 256;
    int kw = 0, ka = 0, repeats = 50;

    CLI::App* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "TOML config")->required();
    train->add_option("--out", out_dir, "output directory (default: run)");
    train->add_option("--seed", seed, "override train.seed");
    train->add_option("--set", sets, "dotted-key override, e.g. quant.weight_bits=2");
    train->add_option("--resume", resume_path, "resume from a checkpoint");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint or exported model");
    eval->add_option("--ckpt", ckpt_path, "checkpoint (.ckpt) or packed model (.qrnn)")
        ->required();
    eval->add_option("--config", config_path, "config (default: config.toml next to --ckpt)");
    eval->add_option("--split", split, "train|valid|test (default valid)");
    eval->add_option("--set", sets, "dotted-key override");

    CLI::App* inspect = app.add_subcommand("inspect", "per-matrix quantization balance report");
    inspect->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    inspect->add_option("--out", out_path, "also write the report as CSV");
    inspect->add_option("--set", sets, "quant.* overrides");

    CLI::App* exportc = app.add_subcommand("export", "write the packed quantized model");
    exportc->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    exportc->add_option("--out", out_path, "output .qrnn path")->required();
    exportc->add_option("--set", sets, "quant.* overrides");

    CLI::App* bench = app.add_subcommand("bench", "packed vs dense matvec throughput");
    bench->add_option("--rows", rows, "matrix rows");
    bench->add_option("--cols", cols, "matrix cols");
    bench->add_option("--kw", kw, "weight bits (with --ka: single run)");
    bench->add_option("--ka", ka, "activation bits");
    bench->add_option("--repeats", repeats, "matvec repetitions per timing pass");
    bench->add_option("--out", out_path, "also write CSV here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(config_path, out_dir, sets, seed, resume_path);
        if (*eval) return cmd_eval(ckpt_path, config_path, split, sets);
        if (*inspect) return cmd_inspect(ckpt_path, out_path, sets);
        if (*exportc) return cmd_export(ckpt_path, out_path, sets);
        if (*bench) return cmd_bench(rows, cols, kw, ka, repeats, out_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
