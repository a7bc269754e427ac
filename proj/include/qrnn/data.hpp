#pragma once

// Corpus ingestion: whitespace tokenization (PTB-style, <eos> per line),
// frequency vocabulary, contiguous LM batching with state-carry layout, and
// fixed-length padding for sequence classification.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "qrnn/errors.hpp"

namespace qrnn {

struct Vocab {
    static constexpr int pad_id = 0;
    static constexpr int unk_id = 1;
    static constexpr int eos_id = 2;

    std::vector<std::string> id_to_token{"<pad>", "<unk>", "<eos>"};
    std::unordered_map<std::string, int> token_to_id{
        {"<pad>", pad_id}, {"<unk>", unk_id}, {"<eos>", eos_id}};

    std::size_t size() const { return id_to_token.size(); }
    // Token types exclude the padding symbol, which is a batching artifact.
    std::size_t num_token_types() const { return id_to_token.size() - 1; }

    int encode_token(const std::string& t) const {
        auto it = token_to_id.find(t);
        return it == token_to_id.end() ? unk_id : it->second;
    }

    const std::string& decode_id(int id) const {
        return id_to_token.at(static_cast<std::size_t>(id));
    }
};

// Keeps the max_tokens most frequent non-special tokens, ties broken
// lexicographically. <pad>/<unk>/<eos> are always present.
inline Vocab build_vocab(const std::vector<std::string>& tokens, std::size_t max_tokens) {
    if (tokens.empty()) throw std::invalid_argument("build_vocab: empty token stream");
    std::unordered_map<std::string, std::size_t> freq;
    for (const std::string& t : tokens) ++freq[t];
    freq.erase("<pad>");
    freq.erase("<unk>");
    freq.erase("<eos>");

    std::vector<std::pair<std::string, std::size_t>> by_freq(freq.begin(), freq.end());
    std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (by_freq.size() > max_tokens) by_freq.resize(max_tokens);

    Vocab v;
    for (const auto& [tok, count] : by_freq) {
        v.token_to_id.emplace(tok, static_cast<int>(v.id_to_token.size()));
        v.id_to_token.push_back(tok);
    }
    return v;
}

inline std::vector<int> encode(const Vocab& v, const std::vector<std::string>& tokens) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(v.encode_token(t));
    return ids;
}

inline std::vector<std::string> decode(const Vocab& v, const std::vector<int>& ids) {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int id : ids) tokens.push_back(v.decode_id(id));
    return tokens;
}

// One training batch. LM: targets are inputs shifted by one. Classification:
// labels has one entry per row and targets is unused.
struct SequenceBatch {
    std::size_t batch = 0, time = 0;
    std::vector<int> inputs;         // row-major [batch x time]
    std::vector<int> targets;        // row-major [batch x time] (LM)
    std::vector<int> labels;         // [batch] (classification)
    std::vector<std::uint8_t> mask;  // row-major, 0 at <pad> positions

    int input(std::size_t b, std::size_t t) const { return inputs[b * time + t]; }
    int target(std::size_t b, std::size_t t) const { return targets[b * time + t]; }

    std::vector<int> input_column(std::size_t t) const {
        std::vector<int> col(batch);
        for (std::size_t b = 0; b < batch; ++b) col[b] = input(b, t);
        return col;
    }
    std::vector<int> target_column(std::size_t t) const {
        std::vector<int> col(batch);
        for (std::size_t b = 0; b < batch; ++b) col[b] = target(b, t);
        return col;
    }
};

// Splits the corpus into `batch` contiguous streams and walks them in
// unroll-sized windows; consecutive batches continue each stream, so carried
// hidden state stays valid. Yields floor((len/batch - 1)/unroll) batches.
inline std::vector<SequenceBatch> lm_batches(const std::vector<int>& ids, std::size_t batch,
                                             std::size_t unroll) {
    if (batch < 1 || unroll < 1) throw std::invalid_argument("lm_batches: batch/unroll >= 1");
    if (ids.size() < batch * (unroll + 1))
        throw std::invalid_argument("lm_batches: corpus too short for batch*(unroll+1) tokens");
    const std::size_t stream_len = ids.size() / batch;
    const std::size_t num_batches = (stream_len - 1) / unroll;
    std::vector<SequenceBatch> out;
    out.reserve(num_batches);
    for (std::size_t w = 0; w < num_batches; ++w) {
        SequenceBatch sb;
        sb.batch = batch;
        sb.time = unroll;
        sb.inputs.resize(batch * unroll);
        sb.targets.resize(batch * unroll);
        sb.mask.assign(batch * unroll, 1);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < unroll; ++t) {
                const std::size_t pos = b * stream_len + w * unroll + t;
                sb.inputs[b * unroll + t] = ids[pos];
                sb.targets[b * unroll + t] = ids[pos + 1];
            }
        out.push_back(std::move(sb));
    }
    return out;
}

// Fixed-length document window for final-state classification: keep the last
// L tokens of long documents and left-pad short ones, so the informative
// suffix always abuts the final state.
inline std::pair<std::vector<int>, std::vector<std::uint8_t>> pad_or_cut(
    const std::vector<int>& doc, std::size_t target_len, int pad_id = Vocab::pad_id) {
    std::vector<int> out(target_len, pad_id);
    std::vector<std::uint8_t> mask(target_len, 0);
    const std::size_t keep = std::min(doc.size(), target_len);
    std::copy(doc.end() - static_cast<std::ptrdiff_t>(keep), doc.end(),
              out.end() - static_cast<std::ptrdiff_t>(keep));
    std::fill(mask.end() - static_cast<std::ptrdiff_t>(keep), mask.end(), std::uint8_t{1});
    return {std::move(out), std::move(mask)};
}

struct LabeledDoc {
    int label = 0;
    std::vector<std::string> tokens;
};

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(std::move(tok));
    return out;
}

// Plain UTF-8 text, one sentence per line; <eos> appended per line.
inline std::vector<std::string> load_lm_tokens(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open corpus file: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        auto toks = split_ws(line);
        tokens.insert(tokens.end(), toks.begin(), toks.end());
        tokens.push_back("<eos>");
    }
    if (tokens.empty()) throw io_error("empty corpus file: " + path);
    return tokens;
}

// One `label<TAB>text` per line.
inline std::vector<LabeledDoc> load_labeled_docs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open labeled file: " + path);
    std::vector<LabeledDoc> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw io_error(path + ":" + std::to_string(lineno) + ": expected label<TAB>text");
        LabeledDoc d;
        try {
            d.label = std::stoi(line.substr(0, tab));
        } catch (const std::exception&) {
            throw io_error(path + ":" + std::to_string(lineno) + ": bad label");
        }
        d.tokens = split_ws(line.substr(tab + 1));
        docs.push_back(std::move(d));
    }
    if (docs.empty()) throw io_error("empty labeled file: " + path);
    return docs;
}

}  // namespace qrnn
