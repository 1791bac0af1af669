#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "tq/nn.hpp"
#include "tq/util.hpp"

namespace tq {

// Full-precision training checkpoint ("TQCP"): JSON header describing the
// spec + dims, followed by raw f32 parameter blobs, CRC32 trailer. This is
// the input to `tq export`; the packed TQ58 file is the inference artifact.

inline nlohmann::json quant_to_json(const QuantConfig& q) {
    return {{"k", q.k},
            {"epsilon", q.epsilon},
            {"measure", measure_name(q.measure)},
            {"quantize_weights", q.quantize_weights},
            {"quantize_activations", q.quantize_activations},
            {"use_layernorm", q.use_layernorm},
            {"bias_after_rescale", q.bias_after_rescale}};
}

inline QuantConfig quant_from_json(const nlohmann::json& j) {
    QuantConfig q;
    q.k = j.value("k", 8);
    q.epsilon = j.value("epsilon", 1e-5f);
    std::string m = j.value("measure", "mean");
    if (m == "mean")
        q.measure = Measure::mean;
    else if (m == "median")
        q.measure = Measure::median;
    else
        throw usage_error("config: quant.measure must be 'mean' or 'median', got '" + m + "'");
    q.quantize_weights = j.value("quantize_weights", true);
    q.quantize_activations = j.value("quantize_activations", true);
    q.use_layernorm = j.value("use_layernorm", true);
    q.bias_after_rescale = j.value("bias_after_rescale", false);
    return q;
}

inline Arch arch_from_string(const std::string& s) {
    if (s == "xor") return Arch::xor_net;
    if (s == "widemlp") return Arch::wide_mlp;
    if (s == "gcn") return Arch::gcn;
    if (s == "sgc") return Arch::sgc;
    if (s == "tinyenc") return Arch::tiny_encoder;
    if (s == "tinyencdec") return Arch::tiny_encdec;
    throw usage_error("config: unknown architecture '" + s +
                      "' (expected xor|widemlp|gcn|sgc|tinyenc|tinyencdec)");
}

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    return {{"architecture", arch_name(s.arch)},
            {"hidden_size", s.hidden},
            {"num_layers", s.num_layers},
            {"layer_kind", s.kind == LayerKind::b158 ? "b158" : "float"},
            {"quant", quant_to_json(s.quant)},
            {"dropout", s.dropout},
            {"heads", s.heads},
            {"seq_len", s.seq_len},
            {"ffn_mult", s.ffn_mult}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    if (!j.contains("architecture")) throw usage_error("config: missing field 'model.architecture'");
    s.arch = arch_from_string(j.at("architecture").get<std::string>());
    s.hidden = j.value("hidden_size", 8);
    s.num_layers = j.value("num_layers", s.arch == Arch::sgc ? 1 : 2);
    std::string kind = j.value("layer_kind", "b158");
    if (kind == "b158")
        s.kind = LayerKind::b158;
    else if (kind == "float")
        s.kind = LayerKind::float32;
    else
        throw usage_error("config: model.layer_kind must be 'float' or 'b158', got '" + kind + "'");
    if (j.contains("quant")) s.quant = quant_from_json(j.at("quant"));
    s.dropout = j.value("dropout", 0.f);
    s.heads = j.value("heads", 4);
    s.seq_len = j.value("seq_len", 32);
    s.ffn_mult = j.value("ffn_mult", 4);
    s.validate();
    return s;
}

inline void save_checkpoint(const Model& m, const ModelSpec& spec, const ModelDims& dims,
                            const std::string& path) {
    nlohmann::json hdr = {{"model", spec_to_json(spec)},
                          {"dims", {{"in_dim", dims.in_dim}, {"classes", dims.classes}, {"vocab", dims.vocab}}}};
    std::string hs = hdr.dump();
    ByteWriter w;
    w.raw("TQCP", 4);
    w.u16(1);
    w.u32(uint32_t(hs.size()));
    w.raw(hs.data(), hs.size());
    std::vector<Tensor> params = model_params(m);
    w.u32(uint32_t(params.size()));
    for (const Tensor& p : params) {
        w.u32(uint32_t(p.shape().size()));
        for (int d : p.shape()) w.u32(uint32_t(d));
        for (float v : p.vals()) w.f32(v);
    }
    w.u32(crc32(w.bytes.data(), w.bytes.size()));
    write_file(path, w.bytes);
}

struct Checkpoint {
    ModelSpec spec;
    ModelDims dims;
    Model model;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::string bytes = read_file(path);
    if (bytes.size() < 14) throw integrity_error("checkpoint: too short");
    uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (stored != crc32(bytes.data(), bytes.size() - 4)) throw integrity_error("checkpoint: CRC mismatch");
    ByteReader r(bytes.data(), bytes.size() - 4);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "TQCP", 4) != 0) throw integrity_error("checkpoint: bad magic");
    if (r.u16() != 1) throw integrity_error("checkpoint: unsupported version");
    uint32_t hlen = r.u32();
    std::string hs(hlen, '\0');
    r.raw(hs.data(), hlen);
    nlohmann::json hdr = nlohmann::json::parse(hs);

    ModelSpec spec = spec_from_json(hdr.at("model"));
    ModelDims dims{hdr.at("dims").at("in_dim").get<int>(), hdr.at("dims").at("classes").get<int>(),
                   hdr.at("dims").at("vocab").get<int>()};
    Rng rng(0);
    Checkpoint ck{spec, dims, build_model(spec, dims, rng)};
    std::vector<Tensor> params = model_params(ck.model);
    uint32_t count = r.u32();
    if (count != params.size()) throw integrity_error("checkpoint: parameter count mismatch");
    for (Tensor& p : params) {
        uint32_t nd = r.u32();
        Shape shape(nd);
        for (uint32_t i = 0; i < nd; ++i) shape[i] = int(r.u32());
        if (shape != p.shape()) throw integrity_error("checkpoint: parameter shape mismatch");
        for (float& v : p.vals()) v = r.f32();
    }
    return ck;
}

}  // namespace tq
