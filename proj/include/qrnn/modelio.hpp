#pragma once

// Checkpointing and the packed quantized export format.
//
// Checkpoint (.ckpt): full 64-bit training state: config, parameter
// tensors, optimizer tensors, RNG state, counters. Load reproduces training
// bit for bit. Single CRC32 over the payload.
//
// Quantized model (.qrnn): magic "BRNN", weights stored as bit-plane packed
// integer codes with f32 affine scales and per-row code sums. Weights are
// never dequantized at load; inference runs on the packed planes. The byte
// layout is documented in docs/quantized_model_format.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "qrnn/bitpack.hpp"
#include "qrnn/cells.hpp"

namespace qrnn {

static_assert(std::endian::native == std::endian::little,
              "serialized formats assume a little-endian host");

namespace io {

inline constexpr std::uint32_t kCrcPoly = 0xEDB88320u;

inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int b = 0; b < 8; ++b) c = (c >> 1) ^ ((c & 1u) ? kCrcPoly : 0u);
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = ~seed;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) crc = (crc >> 8) ^ table[(crc ^ p[i]) & 0xFFu];
    return ~crc;
}

struct ByteWriter {
    std::string buf;
    template <typename T>
    void raw(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void u8(std::uint8_t v) { raw(v); }
    void u16(std::uint16_t v) { raw(v); }
    void u32(std::uint32_t v) { raw(v); }
    void u64(std::uint64_t v) { raw(v); }
    void f32(float v) { raw(v); }
    void f64(double v) { raw(v); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf.append(s);
    }
    void matrix(const Matrix& m) {
        u64(m.rows());
        u64(m.cols());
        for (double v : m.data()) f64(v);
    }
};

struct ByteReader {
    const char* p;
    std::size_t len, pos = 0;
    ByteReader(const char* data, std::size_t n) : p(data), len(n) {}

    void need(std::size_t n) const {
        if (pos + n > len) throw io_error("truncated file: need " + std::to_string(n) +
                                          " bytes at offset " + std::to_string(pos));
    }
    template <typename T>
    T raw() {
        static_assert(std::is_trivially_copyable_v<T>);
        need(sizeof(T));
        T v;
        std::memcpy(&v, p + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::uint8_t u8() { return raw<std::uint8_t>(); }
    std::uint16_t u16() { return raw<std::uint16_t>(); }
    std::uint32_t u32() { return raw<std::uint32_t>(); }
    std::uint64_t u64() { return raw<std::uint64_t>(); }
    float f32() { return raw<float>(); }
    double f64() { return raw<double>(); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(p + pos, n);
        pos += n;
        return s;
    }
    Matrix matrix() {
        const std::uint64_t r = u64(), c = u64();
        need(r * c * sizeof(double));
        Matrix m(r, c);
        for (std::size_t i = 0; i < m.numel(); ++i) m[i] = f64();
        return m;
    }
    bool done() const { return pos == len; }
};

// temp + rename so readers never observe a partial file
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw io_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_config(ByteWriter& w, const ModelConfig& c) {
    w.u8(static_cast<std::uint8_t>(c.cell));
    w.u64(c.hidden);
    w.u64(c.embed);
    w.u64(c.vocab);
    w.u64(c.num_classes);
    w.u8(c.tied_head ? 1 : 0);
    w.u8(c.tanh_logits ? 1 : 0);
    w.f64(c.dropout_embed);
    w.f64(c.dropout_out);
    w.u32(static_cast<std::uint32_t>(c.quant.weight_bits));
    w.u32(static_cast<std::uint32_t>(c.quant.activation_bits));
    w.u8(c.quant.balanced ? 1 : 0);
    w.f64(c.quant.gamma);
    w.u8(static_cast<std::uint8_t>(c.quant.threshold_stat));
    w.u8(static_cast<std::uint8_t>(c.quant.activation_range));
}

inline ModelConfig read_config(ByteReader& r) {
    ModelConfig c;
    c.cell = static_cast<CellKind>(r.u8());
    c.hidden = r.u64();
    c.embed = r.u64();
    c.vocab = r.u64();
    c.num_classes = r.u64();
    c.tied_head = r.u8() != 0;
    c.tanh_logits = r.u8() != 0;
    c.dropout_embed = r.f64();
    c.dropout_out = r.f64();
    c.quant.weight_bits = static_cast<int>(r.u32());
    c.quant.activation_bits = static_cast<int>(r.u32());
    c.quant.balanced = r.u8() != 0;
    c.quant.gamma = r.f64();
    c.quant.threshold_stat = static_cast<ThresholdStat>(r.u8());
    c.quant.activation_range = static_cast<ActivationRange>(r.u8());
    return c;
}

}  // namespace io

struct Checkpoint {
    ModelConfig config;
    std::vector<std::pair<std::string, Matrix>> tensors;      // model parameters
    std::vector<std::pair<std::string, Matrix>> opt_tensors;  // optimizer moments
    std::vector<std::pair<std::string, double>> scalars;      // step, epoch, ...
    std::string rng_state;

    const Matrix& tensor(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return m;
        throw io_error("checkpoint missing tensor: " + name);
    }
    double scalar(const std::string& name, double fallback = 0.0) const {
        for (const auto& [n, v] : scalars)
            if (n == name) return v;
        return fallback;
    }
};

inline constexpr char kCheckpointMagic[4] = {'Q', 'R', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    io::ByteWriter payload;
    io::write_config(payload, ck.config);
    auto tensor_block = [&](const std::vector<std::pair<std::string, Matrix>>& ts) {
        payload.u32(static_cast<std::uint32_t>(ts.size()));
        for (const auto& [name, m] : ts) {
            payload.str(name);
            payload.matrix(m);
        }
    };
    tensor_block(ck.tensors);
    tensor_block(ck.opt_tensors);
    payload.u32(static_cast<std::uint32_t>(ck.scalars.size()));
    for (const auto& [name, v] : ck.scalars) {
        payload.str(name);
        payload.f64(v);
    }
    payload.str(ck.rng_state);

    io::ByteWriter file;
    file.buf.append(kCheckpointMagic, 4);
    file.u32(kCheckpointVersion);
    file.u64(payload.buf.size());
    file.buf.append(payload.buf);
    file.u32(io::crc32(payload.buf.data(), payload.buf.size()));
    io::write_file_atomic(path, file.buf);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    io::ByteReader r(bytes.data(), bytes.size());
    r.need(4);
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw io_error("not a checkpoint file (bad magic): " + path.string());
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw io_error("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t payload_len = r.u64();
    r.need(payload_len + 4);
    const std::uint32_t stored_crc =
        io::crc32(bytes.data() + r.pos, static_cast<std::size_t>(payload_len));
    io::ByteReader pr(bytes.data() + r.pos, static_cast<std::size_t>(payload_len));
    r.pos += payload_len;
    if (r.u32() != stored_crc) throw io_error("checkpoint checksum mismatch: " + path.string());

    Checkpoint ck;
    ck.config = io::read_config(pr);
    auto tensor_block = [&](std::vector<std::pair<std::string, Matrix>>& ts) {
        const std::uint32_t n = pr.u32();
        ts.reserve(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string name = pr.str();
            ts.emplace_back(std::move(name), pr.matrix());
        }
    };
    tensor_block(ck.tensors);
    tensor_block(ck.opt_tensors);
    const std::uint32_t ns = pr.u32();
    for (std::uint32_t i = 0; i < ns; ++i) {
        std::string name = pr.str();
        ck.scalars.emplace_back(std::move(name), pr.f64());
    }
    ck.rng_state = pr.str();
    return ck;
}

inline Checkpoint checkpoint_from_model(RnnModel& model) {
    Checkpoint ck;
    ck.config = model.config();
    for (auto& [name, m] : model.parameters()) ck.tensors.emplace_back(name, *m);
    return ck;
}

inline void load_model_params(RnnModel& model, const Checkpoint& ck) {
    for (auto& [name, m] : model.parameters()) {
        const Matrix& src = ck.tensor(name);
        if (!m->same_shape(src)) throw io_error("checkpoint tensor shape mismatch: " + name);
        *m = src;
    }
}

// ---- packed quantized export -------------------------------------------

inline constexpr char kQuantMagic[4] = {'B', 'R', 'N', 'N'};
inline constexpr std::uint32_t kQuantVersion = 1;
inline constexpr std::uint32_t kQuantFlagTanhLogits = 1u << 0;
inline constexpr std::uint32_t kQuantFlagTiedHead = 1u << 1;

struct RawTensor {
    std::size_t rows = 0, cols = 0;
    std::vector<float> data;
};

struct QuantModel {
    std::uint8_t cell = 0;  // 0 gru, 1 lstm
    int k_w = 0, k_a = 0;
    std::uint32_t hidden = 0, embed = 0, vocab = 0, num_outputs = 0, flags = 0;
    std::map<std::string, PackedQuantMatrix> packed;
    std::map<std::string, RawTensor> raw;

    const PackedQuantMatrix& packed_tensor(const std::string& name) const {
        auto it = packed.find(name);
        if (it == packed.end()) throw io_error("quantized model missing tensor: " + name);
        return it->second;
    }
    const RawTensor& raw_tensor(const std::string& name) const {
        auto it = raw.find(name);
        if (it == raw.end()) throw io_error("quantized model missing tensor: " + name);
        return it->second;
    }
};

struct ExportStats {
    std::size_t weight_packed_bytes = 0;   // planes + code sums + scales, weight matrices
    std::size_t weight_float32_bytes = 0;  // same matrices at 4 bytes/entry
    std::size_t file_bytes = 0;
};

namespace io {

inline void write_packed_record(ByteWriter& w, const std::string& name,
                                const PackedQuantMatrix& p) {
    ByteWriter rec;
    rec.u8(0);  // record kind: packed planes
    rec.u16(static_cast<std::uint16_t>(name.size()));
    rec.buf.append(name);
    rec.u32(static_cast<std::uint32_t>(p.rows));
    rec.u32(static_cast<std::uint32_t>(p.cols));
    rec.u8(static_cast<std::uint8_t>(p.bits));
    rec.f32(static_cast<float>(p.alpha));
    rec.f32(static_cast<float>(p.beta));
    for (const BitPlanes& bp : p.row_planes) rec.u32(static_cast<std::uint32_t>(bp.code_sum));
    for (const BitPlanes& bp : p.row_planes)
        for (std::uint64_t word : bp.words) rec.u64(word);
    w.buf.append(rec.buf);
    w.u32(crc32(rec.buf.data(), rec.buf.size()));
}

inline void write_raw_record(ByteWriter& w, const std::string& name, const Matrix& m) {
    ByteWriter rec;
    rec.u8(1);  // record kind: raw f32
    rec.u16(static_cast<std::uint16_t>(name.size()));
    rec.buf.append(name);
    rec.u32(static_cast<std::uint32_t>(m.rows()));
    rec.u32(static_cast<std::uint32_t>(m.cols()));
    for (double v : m.data()) rec.f32(static_cast<float>(v));
    w.buf.append(rec.buf);
    w.u32(crc32(rec.buf.data(), rec.buf.size()));
}

}  // namespace io

// Quantizes every weight matrix per `qc`, packs bit planes, and writes the
// BRNN container. The embedding is stored as k_a-bit activation codes.
// Refuses full-precision sentinels: this format only holds quantized models.
inline ExportStats export_quantized(const Checkpoint& ck, const QuantConfig& qc,
                                    const std::filesystem::path& path) {
    qc.validate();
    if (qc.weight_bits == kFullPrecisionBits || qc.activation_bits == kFullPrecisionBits)
        throw config_error("export_quantized: bits=32 is full precision; the packed format "
                           "only stores quantized models");
    const ModelConfig& cfg = ck.config;
    const bool is_gru = cell_is_gru(cfg.cell);

    std::vector<std::pair<std::string, PackedQuantMatrix>> packed;
    std::vector<std::pair<std::string, const Matrix*>> raws;

    // embedding: activation-style unit01 codes, alpha=1 beta=0
    {
        const Matrix& e = ck.tensor("emb.E");
        QuantizedMatrix q;
        q.rows = e.rows();
        q.cols = e.cols();
        q.bits = qc.activation_bits;
        q.alpha = 1.0;
        q.beta = 0.0;
        q.codes.resize(e.numel());
        for (std::size_t i = 0; i < e.numel(); ++i)
            q.codes[i] = detail::unit_code(std::clamp(e[i], 0.0, 1.0), qc.activation_bits);
        packed.emplace_back("emb.E", PackedQuantMatrix::from(q));
    }

    ExportStats stats;
    auto pack_weight = [&](const std::string& name, const Matrix& m) {
        auto [xq, meta] = quantize_weights(m, qc);
        (void)xq;
        PackedQuantMatrix p = PackedQuantMatrix::from(meta);
        stats.weight_packed_bytes += 1 + 8;  // bits byte + f32 alpha/beta
        stats.weight_packed_bytes += 4 * p.rows;
        for (const BitPlanes& bp : p.row_planes) stats.weight_packed_bytes += 8 * bp.words.size();
        stats.weight_float32_bytes += 4 * m.numel();
        packed.emplace_back(name, std::move(p));
    };

    if (is_gru) {
        pack_weight("gru.Wz", ck.tensor("gru.Wz"));
        pack_weight("gru.Wr", ck.tensor("gru.Wr"));
        pack_weight("gru.W", ck.tensor("gru.W"));
    } else {
        pack_weight("lstm.Wf", ck.tensor("lstm.Wf"));
        pack_weight("lstm.Wi", ck.tensor("lstm.Wi"));
        pack_weight("lstm.Wc", ck.tensor("lstm.Wc"));
        pack_weight("lstm.Wo", ck.tensor("lstm.Wo"));
        raws.emplace_back("lstm.bf", &ck.tensor("lstm.bf"));
        raws.emplace_back("lstm.bi", &ck.tensor("lstm.bi"));
        raws.emplace_back("lstm.bc", &ck.tensor("lstm.bc"));
        raws.emplace_back("lstm.bo", &ck.tensor("lstm.bo"));
    }
    pack_weight("out.W", cfg.tied_head ? ck.tensor("emb.E") : ck.tensor("out.W"));
    raws.emplace_back("out.b", &ck.tensor("out.b"));

    io::ByteWriter w;
    w.buf.append(kQuantMagic, 4);
    w.u32(kQuantVersion);
    w.u8(is_gru ? 0 : 1);
    w.u8(static_cast<std::uint8_t>(qc.weight_bits));
    w.u8(static_cast<std::uint8_t>(qc.activation_bits));
    w.u32(static_cast<std::uint32_t>(cfg.hidden));
    w.u32(static_cast<std::uint32_t>(cfg.embed));
    w.u32(static_cast<std::uint32_t>(cfg.vocab));
    w.u32(static_cast<std::uint32_t>(cfg.num_outputs()));
    std::uint32_t flags = 0;
    if (cfg.tanh_logits) flags |= kQuantFlagTanhLogits;
    if (cfg.tied_head) flags |= kQuantFlagTiedHead;
    w.u32(flags);
    w.u32(static_cast<std::uint32_t>(packed.size() + raws.size()));
    for (const auto& [name, p] : packed) io::write_packed_record(w, name, p);
    for (const auto& [name, m] : raws) io::write_raw_record(w, name, *m);

    io::write_file_atomic(path, w.buf);
    stats.file_bytes = w.buf.size();
    return stats;
}

inline QuantModel load_quantized(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    io::ByteReader r(bytes.data(), bytes.size());
    r.need(4);
    if (std::memcmp(bytes.data(), kQuantMagic, 4) != 0)
        throw io_error("not a quantized model file (bad magic): " + path.string());
    r.pos = 4;
    if (r.u32() != kQuantVersion) throw io_error("unsupported quantized model version");

    QuantModel qm;
    qm.cell = r.u8();
    qm.k_w = r.u8();
    qm.k_a = r.u8();
    qm.hidden = r.u32();
    qm.embed = r.u32();
    qm.vocab = r.u32();
    qm.num_outputs = r.u32();
    qm.flags = r.u32();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t rec_start = r.pos;
        const std::uint8_t kind = r.u8();
        const std::uint16_t name_len = r.u16();
        r.need(name_len);
        std::string name(bytes.data() + r.pos, name_len);
        r.pos += name_len;
        const std::uint32_t rows = r.u32(), cols = r.u32();
        if (kind == 0) {
            PackedQuantMatrix p;
            p.rows = rows;
            p.cols = cols;
            p.bits = r.u8();
            p.alpha = r.f32();
            p.beta = r.f32();
            std::vector<std::uint32_t> sums(rows);
            for (auto& s : sums) s = r.u32();
            p.row_planes.resize(rows);
            for (std::size_t row = 0; row < rows; ++row) {
                BitPlanes& bp = p.row_planes[row];
                bp.n = cols;
                bp.bits = p.bits;
                bp.code_sum = sums[row];
                bp.words.resize(static_cast<std::size_t>(p.bits) * bp.words_per_plane());
                for (auto& word : bp.words) word = r.u64();
            }
            const std::uint32_t crc = io::crc32(bytes.data() + rec_start, r.pos - rec_start);
            if (r.u32() != crc) throw io_error("record checksum mismatch: " + name);
            qm.packed.emplace(std::move(name), std::move(p));
        } else if (kind == 1) {
            RawTensor t;
            t.rows = rows;
            t.cols = cols;
            t.data.resize(rows * cols);
            for (auto& v : t.data) v = r.f32();
            const std::uint32_t crc = io::crc32(bytes.data() + rec_start, r.pos - rec_start);
            if (r.u32() != crc) throw io_error("record checksum mismatch: " + name);
            qm.raw.emplace(std::move(name), std::move(t));
        } else {
            throw io_error("unknown record kind " + std::to_string(kind));
        }
    }
    return qm;
}

}  // namespace qrnn
