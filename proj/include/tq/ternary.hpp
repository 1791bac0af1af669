#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tq/nn.hpp"
#include "tq/quant.hpp"
#include "tq/util.hpp"

namespace tq {

// 2-bit codes, low bits first within each byte: 00 = 0, 01 = +1, 10 = -1.
// Code 11 never appears. Rows pad to a byte boundary.
struct PackedTernaryMatrix {
    int rows = 0, cols = 0;
    std::vector<uint8_t> data;  // rows * ceil(cols/4)
    float w_scale = 1.f;

    size_t row_bytes() const { return size_t((cols + 3) / 4); }
};

inline PackedTernaryMatrix pack_ternary(const std::vector<float>& w_quant, int rows, int cols) {
    if (int64_t(w_quant.size()) != int64_t(rows) * int64_t(cols))
        throw usage_error("pack_ternary: size mismatch");
    PackedTernaryMatrix p;
    p.rows = rows;
    p.cols = cols;
    p.data.assign(size_t(rows) * p.row_bytes(), 0);
    for (int r = 0; r < rows; ++r) {
        uint8_t* row = p.data.data() + size_t(r) * p.row_bytes();
        for (int c = 0; c < cols; ++c) {
            float v = w_quant[size_t(r) * size_t(cols) + size_t(c)];
            uint8_t code;
            if (v == 0.f)
                code = 0b00;
            else if (v == 1.f)
                code = 0b01;
            else if (v == -1.f)
                code = 0b10;
            else
                throw data_error("pack_ternary: entry " + std::to_string(v) + " at (" + std::to_string(r) +
                                 "," + std::to_string(c) + ") is not ternary");
            row[c / 4] |= uint8_t(code << (2 * (c % 4)));
        }
    }
    return p;
}

inline std::vector<int8_t> unpack_ternary(const PackedTernaryMatrix& p) {
    std::vector<int8_t> out(size_t(p.rows) * size_t(p.cols));
    for (int r = 0; r < p.rows; ++r) {
        const uint8_t* row = p.data.data() + size_t(r) * p.row_bytes();
        for (int c = 0; c < p.cols; ++c) {
            uint8_t code = (row[c / 4] >> (2 * (c % 4))) & 0b11;
            if (code == 0b11) throw integrity_error("unpack_ternary: reserved code 11");
            out[size_t(r) * size_t(p.cols) + size_t(c)] = code == 0b01 ? 1 : (code == 0b10 ? -1 : 0);
        }
    }
    return out;
}

// ------------------------------------------------------------------ model file
enum class RtKind : uint8_t { bitlinear = 0, dense = 1 };
enum class RtActivation : uint8_t { none = 0, relu = 1 };

struct RtLayer {
    RtKind kind = RtKind::bitlinear;
    RtActivation act = RtActivation::none;
    int in_dim = 0, out_dim = 0;
    bool quantize_activations = true;
    bool use_layernorm = true;
    bool bias_after_rescale = false;
    int k = 8;
    float epsilon = 1e-5f;
    float w_scale = 1.f;
    PackedTernaryMatrix packed;    // bitlinear
    std::vector<float> dense_w;    // dense, row-major [out x in]
    std::optional<std::vector<float>> bias;
};

struct TernaryModel {
    static constexpr char magic[4] = {'T', 'Q', '5', '8'};
    static constexpr uint16_t version = 1;
    std::vector<RtLayer> layers;
};

inline std::string serialize_model(const TernaryModel& m) {
    ByteWriter w;
    w.raw(TernaryModel::magic, 4);
    w.u16(TernaryModel::version);
    w.u16(uint16_t(m.layers.size()));
    for (const RtLayer& l : m.layers) {
        w.u8(uint8_t(l.kind));
        w.u8(uint8_t(l.act));
        w.u32(uint32_t(l.in_dim));
        w.u32(uint32_t(l.out_dim));
        uint8_t flags = 0;
        if (l.quantize_activations) flags |= 1;
        if (l.use_layernorm) flags |= 2;
        if (l.bias_after_rescale) flags |= 4;
        if (l.bias) flags |= 8;
        w.u8(flags);
        w.u8(uint8_t(l.k));
        w.f32(l.epsilon);
        w.f32(l.w_scale);
        if (l.kind == RtKind::bitlinear) {
            w.raw(l.packed.data.data(), l.packed.data.size());
        } else {
            for (float v : l.dense_w) w.f32(v);
        }
        if (l.bias)
            for (float v : *l.bias) w.f32(v);
    }
    uint32_t crc = crc32(w.bytes.data(), w.bytes.size());
    w.u32(crc);
    return w.bytes;
}

inline TernaryModel deserialize_model(const std::string& bytes) {
    if (bytes.size() < 12) throw integrity_error("model file: too short");
    uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    uint32_t computed = crc32(bytes.data(), bytes.size() - 4);
    if (stored != computed) throw integrity_error("model file: CRC mismatch");

    ByteReader r(bytes.data(), bytes.size() - 4);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, TernaryModel::magic, 4) != 0) throw integrity_error("model file: bad magic");
    uint16_t version = r.u16();
    if (version != TernaryModel::version)
        throw integrity_error("model file: unsupported version " + std::to_string(version));
    uint16_t count = r.u16();
    TernaryModel m;
    for (int i = 0; i < count; ++i) {
        RtLayer l;
        l.kind = RtKind(r.u8());
        l.act = RtActivation(r.u8());
        l.in_dim = int(r.u32());
        l.out_dim = int(r.u32());
        uint8_t flags = r.u8();
        l.quantize_activations = flags & 1;
        l.use_layernorm = flags & 2;
        l.bias_after_rescale = flags & 4;
        bool has_bias = flags & 8;
        l.k = r.u8();
        l.epsilon = r.f32();
        l.w_scale = r.f32();
        if (l.kind == RtKind::bitlinear) {
            l.packed.rows = l.out_dim;
            l.packed.cols = l.in_dim;
            l.packed.w_scale = l.w_scale;
            l.packed.data.resize(size_t(l.out_dim) * l.packed.row_bytes());
            r.raw(l.packed.data.data(), l.packed.data.size());
            for (uint8_t b : l.packed.data)
                for (int sh = 0; sh < 8; sh += 2)
                    if (((b >> sh) & 0b11) == 0b11) throw integrity_error("model file: reserved weight code 11");
        } else if (l.kind == RtKind::dense) {
            l.dense_w.resize(size_t(l.out_dim) * size_t(l.in_dim));
            for (float& v : l.dense_w) v = r.f32();
        } else {
            throw integrity_error("model file: unknown layer kind");
        }
        if (has_bias) {
            std::vector<float> b(static_cast<size_t>(l.out_dim));
            for (float& v : b) v = r.f32();
            l.bias = std::move(b);
        }
        m.layers.push_back(std::move(l));
    }
    if (r.remaining() != 0) throw integrity_error("model file: trailing bytes");
    return m;
}

inline void save_model_file(const TernaryModel& m, const std::string& path) {
    write_file(path, serialize_model(m));
}

inline TernaryModel load_model_file(const std::string& path) { return deserialize_model(read_file(path)); }

// ------------------------------------------------------------------ export
inline RtLayer export_bitlinear(const BitLinear& l, RtActivation act) {
    if (!l.cfg.quantize_weights) {
        RtLayer r;
        r.kind = RtKind::dense;
        r.act = act;
        r.in_dim = l.in_dim;
        r.out_dim = l.out_dim;
        r.quantize_activations = l.cfg.quantize_activations;
        r.use_layernorm = l.cfg.use_layernorm;
        r.bias_after_rescale = l.cfg.bias_after_rescale;
        r.k = l.cfg.k;
        r.epsilon = l.cfg.epsilon;
        r.dense_w = l.weight.vals();
        if (l.bias) r.bias = l.bias->vals();
        return r;
    }
    WeightQuantResult q = absmeasure_quantize_weights(l.weight.vals(), l.cfg);
    RtLayer r;
    r.kind = RtKind::bitlinear;
    r.act = act;
    r.in_dim = l.in_dim;
    r.out_dim = l.out_dim;
    r.quantize_activations = l.cfg.quantize_activations;
    r.use_layernorm = l.cfg.use_layernorm;
    r.bias_after_rescale = l.cfg.bias_after_rescale;
    r.k = l.cfg.k;
    r.epsilon = l.cfg.epsilon;
    r.w_scale = q.w_scale;
    r.packed = pack_ternary(q.w_quant, l.out_dim, l.in_dim);
    r.packed.w_scale = q.w_scale;
    if (l.bias) r.bias = l.bias->vals();
    return r;
}

// Shadow weights are dropped: only ternary codes, scales, biases and the
// unquantized (embedding) layers as plain f32 arrays.
inline TernaryModel export_model(const Model& m) {
    TernaryModel out;
    if (const XorNet* net = std::get_if<XorNet>(&m)) {
        out.layers.push_back(export_bitlinear(net->l1, RtActivation::relu));
        out.layers.push_back(export_bitlinear(net->l2, RtActivation::none));
    } else if (const WideMlp* net = std::get_if<WideMlp>(&m)) {
        // mean-pooled embedding becomes a dense layer with W = E^T
        RtLayer emb;
        emb.kind = RtKind::dense;
        emb.act = RtActivation::relu;
        emb.in_dim = net->embedding.rows();
        emb.out_dim = net->embedding.cols();
        emb.quantize_activations = false;
        emb.use_layernorm = false;
        emb.k = net->out.cfg.k;
        emb.epsilon = net->out.cfg.epsilon;
        emb.dense_w.resize(net->embedding.vals().size());
        transpose(net->embedding.vals().data(), emb.dense_w.data(), emb.in_dim, emb.out_dim);
        out.layers.push_back(std::move(emb));
        out.layers.push_back(export_bitlinear(net->out, RtActivation::none));
    } else if (const Sgc* net = std::get_if<Sgc>(&m)) {
        out.layers.push_back(export_bitlinear(net->lin, RtActivation::none));
    } else if (std::get_if<Gcn>(&m)) {
        throw usage_error("export: graph convolution layers need the adjacency at inference "
                          "and are not exportable (layer 0: gcn)");
    } else {
        throw usage_error("export: transformer attention layers are not exportable (layer 0: attention)");
    }
    return out;
}

// ------------------------------------------------------------------ inference
// Integer-only accumulation over packed codes: 01 adds x_quant[k], 10
// subtracts, 00 skips. Bit-exact against the training-time quantized forward.
inline void ternary_rows_infer(const RtLayer& l, const std::vector<int32_t>& xq, int n, float x_scale,
                               float* out, int row_begin, int row_end) {
    size_t rb = l.packed.row_bytes();
    float denom = l.w_scale * x_scale;
    for (int i = 0; i < n; ++i) {
        const int32_t* x = xq.data() + size_t(i) * size_t(l.in_dim);
        for (int o = row_begin; o < row_end; ++o) {
            const uint8_t* row = l.packed.data.data() + size_t(o) * rb;
            int32_t acc = 0;
            for (int c = 0; c < l.in_dim; ++c) {
                uint8_t code = (row[size_t(c) / 4] >> (2 * (size_t(c) % 4))) & 0b11;
                if (code == 0b01)
                    acc += x[c];
                else if (code == 0b10)
                    acc -= x[c];
            }
            float v = float(acc);
            float y;
            if (l.bias && !l.bias_after_rescale)
                y = (v + (*l.bias)[size_t(o)]) / denom;
            else if (l.bias)
                y = v / denom + (*l.bias)[size_t(o)];
            else
                y = v / denom;
            out[size_t(i) * size_t(l.out_dim) + size_t(o)] = y;
        }
    }
}

inline std::vector<float> ternary_linear_infer(const std::vector<float>& x, int n, const RtLayer& l,
                                               int threads = 1) {
    if (int64_t(x.size()) != int64_t(n) * int64_t(l.in_dim))
        throw usage_error("infer: input size mismatch");
    if (l.in_dim >= (1 << 24))
        throw usage_error("infer: layer has " + std::to_string(l.in_dim) +
                          " columns; the 32-bit accumulator requires cols < 2^24");

    std::vector<float> work = x;
    if (l.use_layernorm)
        for (int i = 0; i < n; ++i)
            layer_norm_row(x.data() + size_t(i) * size_t(l.in_dim),
                           work.data() + size_t(i) * size_t(l.in_dim), l.in_dim, l.epsilon);

    if (l.kind == RtKind::dense) {
        // unquantized weights; activations may still be quantized
        float x_scale = 1.f;
        if (l.quantize_activations) {
            QuantConfig cfg;
            cfg.k = l.k;
            cfg.epsilon = l.epsilon;
            ActivationQuantResult aq = absmax_quantize_activations(work, cfg);
            x_scale = aq.x_scale;
            work = std::move(aq.x_quant);
        }
        std::vector<float> out(size_t(n) * size_t(l.out_dim), 0.f);
        mm_nt(work.data(), l.dense_w.data(), out.data(), n, l.in_dim, l.out_dim);
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < l.out_dim; ++o) {
                float v = out[size_t(i) * size_t(l.out_dim) + size_t(o)];
                float y;
                if (l.bias && !l.bias_after_rescale)
                    y = x_scale == 1.f ? v + (*l.bias)[size_t(o)] : (v + (*l.bias)[size_t(o)]) / x_scale;
                else if (l.bias)
                    y = (x_scale == 1.f ? v : v / x_scale) + (*l.bias)[size_t(o)];
                else
                    y = x_scale == 1.f ? v : v / x_scale;
                out[size_t(i) * size_t(l.out_dim) + size_t(o)] = y;
            }
        return out;
    }

    float x_scale = 1.f;
    std::vector<int32_t> xq(work.size());
    if (l.quantize_activations) {
        QuantConfig cfg;
        cfg.k = l.k;
        cfg.epsilon = l.epsilon;
        ActivationQuantResult aq = absmax_quantize_activations(work, cfg);
        x_scale = aq.x_scale;
        for (size_t i = 0; i < work.size(); ++i) xq[i] = int32_t(aq.x_quant[i]);
    } else {
        // unquantized activations against ternary weights: float adds in the
        // same ascending-k order the training matmul uses
        std::vector<float> out(size_t(n) * size_t(l.out_dim), 0.f);
        float denom = l.w_scale;
        size_t rb = l.packed.row_bytes();
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < l.out_dim; ++o) {
                const uint8_t* row = l.packed.data.data() + size_t(o) * rb;
                float acc = 0.f;
                for (int c = 0; c < l.in_dim; ++c) {
                    uint8_t code = (row[size_t(c) / 4] >> (2 * (size_t(c) % 4))) & 0b11;
                    if (code == 0b01)
                        acc += work[size_t(i) * size_t(l.in_dim) + size_t(c)];
                    else if (code == 0b10)
                        acc -= work[size_t(i) * size_t(l.in_dim) + size_t(c)];
                }
                float y;
                if (l.bias && !l.bias_after_rescale)
                    y = (acc + (*l.bias)[size_t(o)]) / denom;
                else if (l.bias)
                    y = acc / denom + (*l.bias)[size_t(o)];
                else
                    y = acc / denom;
                out[size_t(i) * size_t(l.out_dim) + size_t(o)] = y;
            }
        return out;
    }

    std::vector<float> out(size_t(n) * size_t(l.out_dim), 0.f);
    if (threads <= 1 || l.out_dim < 2) {
        ternary_rows_infer(l, xq, n, x_scale, out.data(), 0, l.out_dim);
    } else {
        int nt = std::min(threads, l.out_dim);
        std::vector<std::thread> pool;
        int chunk = (l.out_dim + nt - 1) / nt;
        for (int t = 0; t < nt; ++t) {
            int lo = t * chunk, hi = std::min(l.out_dim, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&, lo, hi] { ternary_rows_infer(l, xq, n, x_scale, out.data(), lo, hi); });
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

inline std::vector<float> model_infer(const TernaryModel& m, std::vector<float> x, int n, int threads = 1) {
    for (const RtLayer& l : m.layers) {
        x = ternary_linear_infer(x, n, l, threads);
        if (l.act == RtActivation::relu)
            for (float& v : x) v = v > 0.f ? v : 0.f;
    }
    return x;
}

// ------------------------------------------------------------------ sizes + bench
struct ModelSizes {
    uint64_t packed_weight_bytes = 0;
    uint64_t float_weight_bytes = 0;   // 32-bit equivalent of the ternary layers
    uint64_t dense_weight_bytes = 0;   // unquantized layers, stored as f32 either way
    double ratio = 0;                  // float/packed for the ternary layers
};

inline ModelSizes model_sizes(const TernaryModel& m) {
    ModelSizes s;
    for (const RtLayer& l : m.layers) {
        if (l.kind == RtKind::bitlinear) {
            s.packed_weight_bytes += uint64_t(l.packed.data.size());
            s.float_weight_bytes += uint64_t(l.in_dim) * uint64_t(l.out_dim) * 4;
        } else {
            s.dense_weight_bytes += uint64_t(l.dense_w.size()) * 4;
        }
    }
    if (s.packed_weight_bytes) s.ratio = double(s.float_weight_bytes) / double(s.packed_weight_bytes);
    return s;
}

struct BenchReport {
    int batch = 0, repeats = 0, threads = 1;
    double median_us = 0, p95_us = 0;
    ModelSizes sizes;
    uint32_t output_checksum = 0;

    std::vector<nlohmann::json> to_jsonl() const {
        std::vector<nlohmann::json> lines;
        lines.push_back({{"event", "size"},
                         {"packed_weight_bytes", sizes.packed_weight_bytes},
                         {"float_weight_bytes", sizes.float_weight_bytes},
                         {"dense_weight_bytes", sizes.dense_weight_bytes},
                         {"ratio", sizes.ratio}});
        if (repeats > 0)
            lines.push_back({{"event", "timing"},
                             {"batch", batch},
                             {"repeats", repeats},
                             {"threads", threads},
                             {"median_us", median_us},
                             {"p95_us", p95_us},
                             {"output_checksum", output_checksum}});
        return lines;
    }
};

inline BenchReport bench_model(const TernaryModel& m, int batch, int repeats, int threads = 1) {
    BenchReport r;
    r.batch = batch;
    r.repeats = repeats;
    r.threads = threads;
    r.sizes = model_sizes(m);
    if (repeats <= 0 || m.layers.empty()) return r;

    int in_dim = m.layers.front().in_dim;
    Rng rng(1234);
    std::vector<float> x(size_t(batch) * size_t(in_dim));
    for (float& v : x) v = rng.uniformf(-1.f, 1.f);

    std::vector<double> times(static_cast<size_t>(repeats));
    std::vector<float> out;
    for (int i = 0; i < repeats; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        out = model_infer(m, x, batch, threads);
        auto t1 = std::chrono::steady_clock::now();
        times[size_t(i)] = std::chrono::duration<double, std::micro>(t1 - t0).count();
    }
    std::sort(times.begin(), times.end());
    r.median_us = times[times.size() / 2];
    r.p95_us = times[std::min(times.size() - 1, size_t(double(times.size()) * 0.95))];
    r.output_checksum = crc32(out.data(), out.size() * 4);
    return r;
}

}  // namespace tq
