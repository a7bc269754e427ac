#pragma once

// TOML-style run configuration: [section] headers, key = value lines,
// # comments, plus dotted-path overrides from the command line. Unknown keys
// are rejected by name so typos fail loudly.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "qrnn/cells.hpp"
#include "qrnn/training.hpp"

namespace qrnn {

class ConfigMap {
  public:
    static ConfigMap parse_string(const std::string& text, const std::string& origin = "<string>") {
        ConfigMap cm;
        std::istringstream in(text);
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string s = strip_comment(line);
            const std::string t = trim(s);
            if (t.empty()) continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw config_error(origin + ":" + std::to_string(lineno) +
                                       ": malformed section header");
                section = trim(t.substr(1, t.size() - 2));
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw config_error(origin + ":" + std::to_string(lineno) +
                                   ": expected key = value");
            std::string key = trim(t.substr(0, eq));
            std::string value = unquote(trim(t.substr(eq + 1)));
            if (key.empty())
                throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
            if (!section.empty()) key = section + "." + key;
            cm.values_[key] = value;
        }
        return cm;
    }

    static ConfigMap parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw config_error("cannot open config file: " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse_string(ss.str(), path);
    }

    // "key=value" with a dotted key
    void apply_override(const std::string& keyval) {
        const auto eq = keyval.find('=');
        if (eq == std::string::npos || eq == 0)
            throw config_error("override must be key=value: " + keyval);
        values_[trim(keyval.substr(0, eq))] = unquote(trim(keyval.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error("config key " + key + ": not a number: " + it->second);
        }
    }

    std::size_t get_size(const std::string& key, std::size_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size() || v < 0) throw std::invalid_argument("");
            return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            throw config_error("config key " + key + ": not a non-negative integer: " +
                               it->second);
        }
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const int v = std::stoi(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error("config key " + key + ": not an integer: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true") return true;
        if (it->second == "false") return false;
        throw config_error("config key " + key + ": expected true/false: " + it->second);
    }

  private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }
    static std::string strip_comment(const std::string& s) {
        bool quoted = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') quoted = !quoted;
            if (s[i] == '#' && !quoted) return s.substr(0, i);
        }
        return s;
    }
    static std::string unquote(const std::string& s) {
        if (s.size() >= 2 && s.front() == '"' && s.back() == '"')
            return s.substr(1, s.size() - 2);
        return s;
    }

    std::map<std::string, std::string> values_;
};

struct DataConfig {
    std::string format = "lm";  // lm | classification
    std::string train_path, valid_path, test_path;
    std::size_t max_vocab = 10000;
    std::size_t seq_len = 500;  // classification pad/cut length
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;

    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys = {
            "model.cell", "model.hidden", "model.embed", "model.vocab", "model.num_classes",
            "model.tied_head", "model.tanh_logits", "model.dropout_embed", "model.dropout_out",
            "quant.weight_bits", "quant.activation_bits", "quant.balanced", "quant.gamma",
            "quant.threshold_stat", "quant.activation_range",
            "train.optimizer", "train.lr", "train.beta1", "train.beta2", "train.eps",
            "train.clipnorm", "train.lr_decay", "train.decay_every", "train.batch_size",
            "train.unroll", "train.epochs", "train.max_steps", "train.seed",
            "train.weight_decay", "train.eval_every",
            "data.format", "data.train", "data.valid", "data.test", "data.max_vocab",
            "data.seq_len",
        };
        return keys;
    }

    static RunConfig from_map(const ConfigMap& cm) {
        for (const auto& [key, value] : cm.values())
            if (!known_keys().count(key)) throw config_error("unknown config key: " + key);

        RunConfig rc;
        const std::string cell = cm.get_string("model.cell", "gru");
        if (cell == "gru") rc.model.cell = CellKind::gru;
        else if (cell == "lstm") rc.model.cell = CellKind::lstm;
        else if (cell == "gru_fp") rc.model.cell = CellKind::gru_fp;
        else if (cell == "lstm_fp") rc.model.cell = CellKind::lstm_fp;
        else throw config_error("model.cell must be gru|lstm|gru_fp|lstm_fp: " + cell);
        rc.model.hidden = cm.get_size("model.hidden", 16);
        rc.model.embed = cm.get_size("model.embed", 8);
        rc.model.vocab = cm.get_size("model.vocab", 0);  // 0 = derive from data
        rc.model.num_classes = cm.get_size("model.num_classes", 0);
        rc.model.tied_head = cm.get_bool("model.tied_head", false);
        rc.model.tanh_logits = cm.get_bool("model.tanh_logits", false);
        rc.model.dropout_embed = cm.get_double("model.dropout_embed", 0.0);
        rc.model.dropout_out = cm.get_double("model.dropout_out", 0.0);

        rc.model.quant.weight_bits = cm.get_int("quant.weight_bits", 2);
        rc.model.quant.activation_bits = cm.get_int("quant.activation_bits", 2);
        rc.model.quant.balanced = cm.get_bool("quant.balanced", true);
        rc.model.quant.gamma = cm.get_double("quant.gamma", 2.5);
        const std::string stat = cm.get_string("quant.threshold_stat", "mean_abs");
        if (stat == "mean_abs") rc.model.quant.threshold_stat = ThresholdStat::mean_abs;
        else if (stat == "median_abs") rc.model.quant.threshold_stat = ThresholdStat::median_abs;
        else throw config_error("quant.threshold_stat must be mean_abs|median_abs: " + stat);
        const std::string range = cm.get_string("quant.activation_range", "unit01");
        if (range == "unit01") rc.model.quant.activation_range = ActivationRange::unit01;
        else if (range == "symmetric")
            rc.model.quant.activation_range = ActivationRange::symmetric;
        else throw config_error("quant.activation_range must be unit01|symmetric: " + range);

        const std::string opt = cm.get_string("train.optimizer", "adam");
        if (opt == "adam") rc.train.optimizer = OptimizerKind::adam;
        else if (opt == "sgd") rc.train.optimizer = OptimizerKind::sgd;
        else throw config_error("train.optimizer must be adam|sgd: " + opt);
        const double lr = cm.get_double("train.lr", 1e-3);
        rc.train.adam.lr = lr;
        rc.train.sgd_lr = lr;
        rc.train.adam.beta1 = cm.get_double("train.beta1", 0.9);
        rc.train.adam.beta2 = cm.get_double("train.beta2", 0.999);
        rc.train.adam.eps = cm.get_double("train.eps", 1e-8);
        rc.train.clipnorm = cm.get_double("train.clipnorm", 5.0);
        rc.train.lr_decay = cm.get_double("train.lr_decay", 1.0);
        rc.train.decay_every = cm.get_size("train.decay_every", 0);
        rc.train.batch = cm.get_size("train.batch_size", 4);
        rc.train.unroll = cm.get_size("train.unroll", 8);
        rc.train.epochs = cm.get_size("train.epochs", 1);
        rc.train.max_steps = cm.get_size("train.max_steps", 0);
        rc.train.seed = cm.get_size("train.seed", 1);
        rc.train.weight_decay = cm.get_double("train.weight_decay", 0.0);
        rc.train.eval_every = cm.get_size("train.eval_every", 100);

        rc.data.format = cm.get_string("data.format", "lm");
        if (rc.data.format != "lm" && rc.data.format != "classification")
            throw config_error("data.format must be lm|classification: " + rc.data.format);
        rc.data.train_path = cm.get_string("data.train", "");
        rc.data.valid_path = cm.get_string("data.valid", "");
        rc.data.test_path = cm.get_string("data.test", "");
        rc.data.max_vocab = cm.get_size("data.max_vocab", 10000);
        rc.data.seq_len = cm.get_size("data.seq_len", 500);
        return rc;
    }

    std::string to_toml() const {
        std::ostringstream out;
        out.precision(17);
        out << "[model]\n";
        const char* cells[] = {"gru", "lstm", "gru_fp", "lstm_fp"};
        out << "cell = \"" << cells[static_cast<int>(model.cell)] << "\"\n";
        out << "hidden = " << model.hidden << "\n";
        out << "embed = " << model.embed << "\n";
        out << "vocab = " << model.vocab << "\n";
        out << "num_classes = " << model.num_classes << "\n";
        out << "tied_head = " << (model.tied_head ? "true" : "false") << "\n";
        out << "tanh_logits = " << (model.tanh_logits ? "true" : "false") << "\n";
        out << "dropout_embed = " << model.dropout_embed << "\n";
        out << "dropout_out = " << model.dropout_out << "\n\n";
        out << "[quant]\n";
        out << "weight_bits = " << model.quant.weight_bits << "\n";
        out << "activation_bits = " << model.quant.activation_bits << "\n";
        out << "balanced = " << (model.quant.balanced ? "true" : "false") << "\n";
        out << "gamma = " << model.quant.gamma << "\n";
        out << "threshold_stat = \""
            << (model.quant.threshold_stat == ThresholdStat::mean_abs ? "mean_abs" : "median_abs")
            << "\"\n";
        out << "activation_range = \""
            << (model.quant.activation_range == ActivationRange::unit01 ? "unit01" : "symmetric")
            << "\"\n\n";
        out << "[train]\n";
        out << "optimizer = \"" << (train.optimizer == OptimizerKind::adam ? "adam" : "sgd")
            << "\"\n";
        out << "lr = " << (train.optimizer == OptimizerKind::adam ? train.adam.lr : train.sgd_lr)
            << "\n";
        out << "beta1 = " << train.adam.beta1 << "\n";
        out << "beta2 = " << train.adam.beta2 << "\n";
        out << "eps = " << train.adam.eps << "\n";
        out << "clipnorm = " << train.clipnorm << "\n";
        out << "lr_decay = " << train.lr_decay << "\n";
        out << "decay_every = " << train.decay_every << "\n";
        out << "batch_size = " << train.batch << "\n";
        out << "unroll = " << train.unroll << "\n";
        out << "epochs = " << train.epochs << "\n";
        out << "max_steps = " << train.max_steps << "\n";
        out << "seed = " << train.seed << "\n";
        out << "weight_decay = " << train.weight_decay << "\n";
        out << "eval_every = " << train.eval_every << "\n\n";
        out << "[data]\n";
        out << "format = \"" << data.format << "\"\n";
        out << "train = \"" << data.train_path << "\"\n";
        out << "valid = \"" << data.valid_path << "\"\n";
        out << "test = \"" << data.test_path << "\"\n";
        out << "max_vocab = " << data.max_vocab << "\n";
        out << "seq_len = " << data.seq_len << "\n";
        return out.str();
    }
};

}  // namespace qrnn
