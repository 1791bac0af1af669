#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "tq/quant.hpp"
#include "tq/tensor.hpp"

namespace tq {

enum class Arch { xor_net, wide_mlp, gcn, sgc, tiny_encoder, tiny_encdec };
enum class LayerKind { float32, b158 };

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::xor_net: return "xor";
        case Arch::wide_mlp: return "widemlp";
        case Arch::gcn: return "gcn";
        case Arch::sgc: return "sgc";
        case Arch::tiny_encoder: return "tinyenc";
        case Arch::tiny_encdec: return "tinyencdec";
    }
    return "?";
}

struct ModelSpec {
    Arch arch = Arch::xor_net;
    int hidden = 8;
    int num_layers = 2;
    LayerKind kind = LayerKind::b158;
    QuantConfig quant;
    float dropout = 0.f;
    int heads = 4;
    int seq_len = 32;
    int ffn_mult = 4;

    QuantConfig effective_quant() const { return kind == LayerKind::float32 ? QuantConfig::off() : quant; }

    void validate() const {
        if (hidden < 1) throw usage_error("model: hidden_size must be positive");
        if (dropout < 0.f || dropout >= 1.f) throw usage_error("model: dropout must be in [0,1)");
        if (arch == Arch::gcn && num_layers != 2) throw usage_error("model: GCN is fixed at 2 layers");
        if (arch == Arch::sgc && num_layers != 1) throw usage_error("model: SGC has a single linear layer");
        if ((arch == Arch::tiny_encoder || arch == Arch::tiny_encdec) && hidden % heads != 0)
            throw usage_error("model: hidden_size must be divisible by heads");
        quant.validate();
    }
};

// Dataset-derived dimensions needed to materialize a spec.
struct ModelDims {
    int in_dim = 0;   // feature count (xor: 4, graphs: feature dim)
    int classes = 0;  // output classes
    int vocab = 0;    // token count including special tokens (sequence models, bow vocab+oov)
};

// ------------------------------------------------------------------ graph ops
// D^{-1/2} (A + I) D^{-1/2} with A symmetrized and D the degree of A+I.
inline SparsePtr normalize_adjacency(const std::vector<std::pair<int, int>>& edges, int n) {
    if (n < 1) throw data_error("normalize_adjacency: empty graph");
    std::vector<std::vector<int>> nbr(static_cast<size_t>(n));
    for (auto [i, j] : edges) {
        if (i < 0 || i >= n || j < 0 || j >= n)
            throw data_error("normalize_adjacency: edge (" + std::to_string(i) + "," + std::to_string(j) +
                             ") out of range for " + std::to_string(n) + " nodes");
        if (i == j) continue;  // self-loops are added uniformly below
        nbr[size_t(i)].push_back(j);
        nbr[size_t(j)].push_back(i);
    }
    std::vector<int> deg(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto& v = nbr[size_t(i)];
        v.push_back(i);  // self-loop
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        deg[size_t(i)] = int(v.size());
    }
    std::vector<std::vector<std::pair<int, float>>> rows(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        rows[size_t(i)].reserve(nbr[size_t(i)].size());
        for (int j : nbr[size_t(i)])
            rows[size_t(i)].push_back({j, 1.f / (std::sqrt(float(deg[size_t(i)])) * std::sqrt(float(deg[size_t(j)])))});
    }
    return std::make_shared<SparseMatrix>(SparseMatrix::from_rows(n, n, rows));
}

// adj^hops * X by repeated sparse-dense multiply; pure value computation.
inline Tensor sgc_precompute(SparsePtr adj, Tensor x, int hops) {
    if (hops < 0) throw usage_error("sgc_precompute: hops must be >= 0");
    for (int h = 0; h < hops; ++h) x = spmm(adj, x);
    return Tensor(x.shape(), x.vals(), false);
}

// Dropout over the values of a constant sparse matrix (inverted scaling).
inline SparsePtr sparse_dropout(SparsePtr s, float p, Rng& rng) {
    if (p <= 0.f) return s;
    auto out = std::make_shared<SparseMatrix>(*s);
    float scale = 1.f / (1.f - p);
    for (float& v : out->val) v = rng.uniform01() < double(p) ? 0.f : v * scale;
    return out;
}

// ------------------------------------------------------------------ optimizer
struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.f;
    bool decoupled = false;  // true = AdamW (lr * wd * w applied directly to weights)
};

// Adam with bias correction. Parameters whose gradients arrived only through
// row-scatter ops (embedding tables) are updated row-sparsely.
struct Adam {
    AdamConfig cfg;
    int64_t t = 0;
    std::vector<Tensor> params;
    std::vector<std::vector<float>> m, v;

    explicit Adam(std::vector<Tensor> ps, AdamConfig c = {}) : cfg(c), params(std::move(ps)) {
        m.resize(params.size());
        v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].vals().size(), 0.f);
            v[i].assign(params[i].vals().size(), 0.f);
        }
    }

    void update_range(size_t pi, size_t lo, size_t hi, float bc1, float bc2) {
        Tensor& p = params[pi];
        std::vector<float>& w = p.vals();
        std::vector<float>& g = p.d->grad;
        std::vector<float>& mi = m[pi];
        std::vector<float>& vi = v[pi];
        const float lr = cfg.lr, b1 = cfg.beta1, b2 = cfg.beta2, eps = cfg.eps, wd = cfg.weight_decay;
        for (size_t j = lo; j < hi; ++j) {
            float gj = g[j];
            if (wd != 0.f && !cfg.decoupled) gj += wd * w[j];
            mi[j] = b1 * mi[j] + (1.f - b1) * gj;
            vi[j] = b2 * vi[j] + (1.f - b2) * gj * gj;
            float mhat = mi[j] / bc1;
            float vhat = vi[j] / bc2;
            w[j] -= lr * (mhat / (std::sqrt(vhat) + eps));
            if (wd != 0.f && cfg.decoupled) w[j] -= lr * wd * w[j];
        }
    }

    void step() {
        ++t;
        float bc1 = float(1.0 - std::pow(double(cfg.beta1), double(t)));
        float bc2 = float(1.0 - std::pow(double(cfg.beta2), double(t)));
        for (size_t i = 0; i < params.size(); ++i) {
            TensorData& d = *params[i].d;
            if (d.grad.empty()) continue;  // never touched by backward
            if (!d.grad_rows_dense && !d.grad_rows.empty() && d.shape.size() == 2) {
                size_t width = size_t(d.shape[1]);
                std::sort(d.grad_rows.begin(), d.grad_rows.end());
                d.grad_rows.erase(std::unique(d.grad_rows.begin(), d.grad_rows.end()), d.grad_rows.end());
                for (int r : d.grad_rows)
                    update_range(i, size_t(r) * width, (size_t(r) + 1) * width, bc1, bc2);
            } else {
                update_range(i, 0, d.grad.size(), bc1, bc2);
            }
        }
    }

    void zero_grad() {
        for (Tensor& p : params) {
            TensorData& d = *p.d;
            if (!d.grad.empty()) {
                if (!d.grad_rows_dense && !d.grad_rows.empty() && d.shape.size() == 2) {
                    size_t width = size_t(d.shape[1]);
                    for (int r : d.grad_rows)
                        std::fill_n(d.grad.begin() + long(size_t(r) * width), width, 0.f);
                } else {
                    std::fill(d.grad.begin(), d.grad.end(), 0.f);
                }
            }
            d.clear_grad_marks();
        }
    }
};

// ------------------------------------------------------------------ models
struct XorNet {
    BitLinear l1, l2;

    XorNet(const ModelSpec& spec, Rng& rng)
        : l1(4, spec.hidden, true, spec.effective_quant(), rng),
          l2(spec.hidden, 2, true, spec.effective_quant(), rng) {}
    XorNet(BitLinear a, BitLinear b) : l1(std::move(a)), l2(std::move(b)) {}

    Tensor forward(const Tensor& x) const { return bitlinear_forward(relu(bitlinear_forward(x, l1)), l2); }

    std::vector<Tensor> params() const {
        auto p = l1.params();
        auto q = l2.params();
        p.insert(p.end(), q.begin(), q.end());
        return p;
    }
};

// Mean-pooled embedding (never quantized) -> ReLU -> dropout -> output layer.
struct WideMlp {
    Tensor embedding;  // [vocab x hidden]; last row is the OOV bucket
    BitLinear out;
    float drop;

    WideMlp(const ModelSpec& spec, const ModelDims& dims, Rng& rng)
        : out(spec.hidden, dims.classes, true, spec.effective_quant(), rng), drop(spec.dropout) {
        std::vector<float> e(size_t(dims.vocab) * size_t(spec.hidden));
        for (float& v : e) v = float(rng.normal(0.0, 0.02));
        // untrained OOV bucket starts at zero so unseen test tokens stay neutral
        std::fill(e.end() - spec.hidden, e.end(), 0.f);
        embedding = Tensor({dims.vocab, spec.hidden}, std::move(e), true);
    }

    // docs: rows of token counts normalized to sum 1 (mean pooling).
    Tensor forward(SparsePtr docs, Rng& rng, bool training) const {
        Tensor pooled = spmm(docs, embedding);
        Tensor h = dropout(relu(pooled), drop, rng, training);
        return bitlinear_forward(h, out);
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p{embedding};
        auto q = out.params();
        p.insert(p.end(), q.begin(), q.end());
        return p;
    }
};

// Two graph-conv layers adj*(X W^T) with ReLU between.
struct Gcn {
    BitLinear l1, l2;
    float drop;

    Gcn(const ModelSpec& spec, const ModelDims& dims, Rng& rng)
        : l1(dims.in_dim, spec.hidden, true, spec.effective_quant(), rng),
          l2(spec.hidden, dims.classes, true, spec.effective_quant(), rng),
          drop(spec.dropout) {}

    Tensor linear1(SparsePtr feats) const {
        if (l1.cfg.use_layernorm) {
            // layer norm densifies; only viable for small graphs
            Tensor dense({feats->rows, feats->cols}, feats->dense(), false);
            return bitlinear_forward(dense, l1);
        }
        return bitlinear_forward_sparse(feats, l1);
    }

    Tensor forward(SparsePtr adj, SparsePtr feats, Rng& rng, bool training) const {
        SparsePtr fin = training && drop > 0.f ? sparse_dropout(feats, drop, rng) : feats;
        Tensor h = relu(spmm(adj, linear1(fin)));
        h = dropout(h, drop, rng, training);
        return spmm(adj, bitlinear_forward(h, l2));
    }

    std::vector<Tensor> params() const {
        auto p = l1.params();
        auto q = l2.params();
        p.insert(p.end(), q.begin(), q.end());
        return p;
    }
};

// One linear layer over hop-precomputed features.
struct Sgc {
    BitLinear lin;
    int hops;

    Sgc(const ModelSpec& spec, const ModelDims& dims, Rng& rng, int hops_ = 2)
        : lin(dims.in_dim, dims.classes, true, spec.effective_quant(), rng), hops(hops_) {}

    Tensor forward(const Tensor& feats_precomputed) const { return bitlinear_forward(feats_precomputed, lin); }

    std::vector<Tensor> params() const { return lin.params(); }
};

// ------------------------------------------------------------------ transformer
inline Tensor sinusoidal_positions(int len, int d) {
    std::vector<float> p(size_t(len) * size_t(d));
    for (int t = 0; t < len; ++t)
        for (int i = 0; i < d; ++i) {
            double angle = double(t) / std::pow(10000.0, double(2 * (i / 2)) / double(d));
            p[size_t(t) * size_t(d) + size_t(i)] = float(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return Tensor({len, d}, std::move(p), false);
}

// Multi-head attention over a flattened [batch*len x d] layout. q may have a
// different sequence length than k/v (cross attention).
struct AttentionProj {
    BitLinear wq, wk, wv, wo;
    AttentionProj(int d, QuantConfig cfg, Rng& rng)
        : wq(d, d, true, cfg, rng), wk(d, d, true, cfg, rng), wv(d, d, true, cfg, rng), wo(d, d, true, cfg, rng) {}
    std::vector<Tensor> params() const {
        std::vector<Tensor> p;
        for (const BitLinear* l : {&wq, &wk, &wv, &wo}) {
            auto q = l->params();
            p.insert(p.end(), q.begin(), q.end());
        }
        return p;
    }
};

inline Tensor multihead_attention(const AttentionProj& proj, const Tensor& xq_in, const Tensor& xkv_in,
                                  int batch, int lq, int lk, int heads, bool causal) {
    int d = xq_in.cols();
    int dh = d / heads;
    float scale = 1.f / std::sqrt(float(dh));
    Tensor q = bitlinear_forward(xq_in, proj.wq);
    Tensor k = bitlinear_forward(xkv_in, proj.wk);
    Tensor v = bitlinear_forward(xkv_in, proj.wv);

    Tensor mask;
    if (causal) {
        std::vector<float> mv(size_t(lq) * size_t(lk), 0.f);
        for (int i = 0; i < lq; ++i)
            for (int j = i + 1; j < lk; ++j) mv[size_t(i) * size_t(lk) + size_t(j)] = -1e9f;
        mask = Tensor({lq, lk}, std::move(mv), false);
    }

    std::vector<Tensor> samples;
    samples.reserve(size_t(batch));
    for (int b = 0; b < batch; ++b) {
        Tensor qb = slice_rows(q, b * lq, (b + 1) * lq);
        Tensor kb = slice_rows(k, b * lk, (b + 1) * lk);
        Tensor vb = slice_rows(v, b * lk, (b + 1) * lk);
        std::vector<Tensor> headouts;
        headouts.reserve(size_t(heads));
        for (int h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(qb, h * dh, (h + 1) * dh);
            Tensor kh = slice_cols(kb, h * dh, (h + 1) * dh);
            Tensor vh = slice_cols(vb, h * dh, (h + 1) * dh);
            Tensor scores = scalar_mul(matmul_nt(qh, kh), scale);
            if (causal) scores = add(scores, mask);
            headouts.push_back(matmul(softmax(scores), vh));
        }
        samples.push_back(concat_cols(headouts));
    }
    return bitlinear_forward(concat_rows(samples), proj.wo);
}

struct FeedForward {
    BitLinear up, down;
    FeedForward(int d, int mult, QuantConfig cfg, Rng& rng)
        : up(d, d * mult, true, cfg, rng), down(d * mult, d, true, cfg, rng) {}
    Tensor forward(const Tensor& x) const { return bitlinear_forward(relu(bitlinear_forward(x, up)), down); }
    std::vector<Tensor> params() const {
        auto p = up.params();
        auto q = down.params();
        p.insert(p.end(), q.begin(), q.end());
        return p;
    }
};

struct EncoderBlock {
    AttentionProj attn;
    FeedForward ffn;
    EncoderBlock(int d, int mult, QuantConfig cfg, Rng& rng) : attn(d, cfg, rng), ffn(d, mult, cfg, rng) {}
    std::vector<Tensor> params() const {
        auto p = attn.params();
        auto q = ffn.params();
        p.insert(p.end(), q.begin(), q.end());
        return p;
    }
};

// Pre-norm encoder with sinusoidal positions and a weight-tied output head.
// Embedding and head stay unquantized; every affine projection follows the
// layer kind. The block layer norms are parameter-free.
struct TinyEncoder {
    int vocab, d, len, heads;
    float drop;
    float eps_ln;
    Tensor embedding;  // [vocab x d]
    Tensor pos;        // [len x d]
    std::vector<EncoderBlock> blocks;

    TinyEncoder(const ModelSpec& spec, const ModelDims& dims, Rng& rng)
        : vocab(dims.vocab), d(spec.hidden), len(spec.seq_len), heads(spec.heads), drop(spec.dropout),
          eps_ln(spec.quant.epsilon) {
        std::vector<float> e(size_t(vocab) * size_t(d));
        for (float& v : e) v = float(rng.normal(0.0, 0.02));
        embedding = Tensor({vocab, d}, std::move(e), true);
        pos = sinusoidal_positions(len, d);
        QuantConfig cfg = spec.effective_quant();
        for (int l = 0; l < spec.num_layers; ++l) blocks.emplace_back(d, spec.ffn_mult, cfg, rng);
    }

    Tensor embed(const std::vector<int>& tokens, int batch) const {
        Tensor h = gather_rows(embedding, tokens);
        std::vector<float> tiled(size_t(batch) * size_t(len) * size_t(d));
        for (int b = 0; b < batch; ++b)
            std::copy(pos.vals().begin(), pos.vals().end(), tiled.begin() + size_t(b) * size_t(len) * size_t(d));
        return add(h, Tensor({batch * len, d}, std::move(tiled), false));
    }

    Tensor encode(const std::vector<int>& tokens, int batch, Rng& rng, bool training) const {
        Tensor h = embed(tokens, batch);
        for (const EncoderBlock& blk : blocks) {
            Tensor a = multihead_attention(blk.attn, layer_norm(h, eps_ln), layer_norm(h, eps_ln), batch, len,
                                           len, heads, false);
            h = add(h, dropout(a, drop, rng, training));
            Tensor f = blk.ffn.forward(layer_norm(h, eps_ln));
            h = add(h, dropout(f, drop, rng, training));
        }
        return layer_norm(h, eps_ln);
    }

    Tensor logits(const Tensor& h) const { return matmul_nt(h, embedding); }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p{embedding};
        for (const EncoderBlock& b : blocks) {
            auto q = b.params();
            p.insert(p.end(), q.begin(), q.end());
        }
        return p;
    }
};

struct DecoderBlock {
    AttentionProj self_attn, cross_attn;
    FeedForward ffn;
    DecoderBlock(int d, int mult, QuantConfig cfg, Rng& rng)
        : self_attn(d, cfg, rng), cross_attn(d, cfg, rng), ffn(d, mult, cfg, rng) {}
    std::vector<Tensor> params() const {
        auto p = self_attn.params();
        auto q = cross_attn.params();
        auto r = ffn.params();
        p.insert(p.end(), q.begin(), q.end());
        p.insert(p.end(), r.begin(), r.end());
        return p;
    }
};

// Encoder-decoder with shared embedding, causal decoder self-attention and
// cross-attention into the encoder states.
struct TinyEncDec {
    TinyEncoder encoder;
    std::vector<DecoderBlock> dblocks;

    TinyEncDec(const ModelSpec& spec, const ModelDims& dims, Rng& rng) : encoder(spec, dims, rng) {
        QuantConfig cfg = spec.effective_quant();
        for (int l = 0; l < spec.num_layers; ++l)
            dblocks.emplace_back(spec.hidden, spec.ffn_mult, cfg, rng);
    }

    Tensor decode(const std::vector<int>& dec_tokens, const Tensor& enc_h, int batch, Rng& rng,
                  bool training) const {
        int len = encoder.len, heads = encoder.heads;
        float eps = encoder.eps_ln;
        Tensor h = encoder.embed(dec_tokens, batch);
        for (const DecoderBlock& blk : dblocks) {
            Tensor a = multihead_attention(blk.self_attn, layer_norm(h, eps), layer_norm(h, eps), batch, len,
                                           len, heads, true);
            h = add(h, dropout(a, encoder.drop, rng, training));
            Tensor c = multihead_attention(blk.cross_attn, layer_norm(h, eps), layer_norm(enc_h, eps), batch,
                                           len, len, heads, false);
            h = add(h, dropout(c, encoder.drop, rng, training));
            Tensor f = blk.ffn.forward(layer_norm(h, eps));
            h = add(h, dropout(f, encoder.drop, rng, training));
        }
        return layer_norm(h, eps);
    }

    std::vector<Tensor> params() const {
        auto p = encoder.params();
        for (const DecoderBlock& b : dblocks) {
            auto q = b.params();
            p.insert(p.end(), q.begin(), q.end());
        }
        return p;
    }
};

// ------------------------------------------------------------------ build + reports
using Model = std::variant<XorNet, WideMlp, Gcn, Sgc, TinyEncoder, TinyEncDec>;

inline Model build_model(const ModelSpec& spec, const ModelDims& dims, Rng& rng) {
    spec.validate();
    switch (spec.arch) {
        case Arch::xor_net: return XorNet(spec, rng);
        case Arch::wide_mlp: return WideMlp(spec, dims, rng);
        case Arch::gcn: return Gcn(spec, dims, rng);
        case Arch::sgc: return Sgc(spec, dims, rng);
        case Arch::tiny_encoder: return TinyEncoder(spec, dims, rng);
        case Arch::tiny_encdec: return TinyEncDec(spec, dims, rng);
    }
    throw usage_error("build_model: unknown architecture");
}

inline std::vector<Tensor> model_params(const Model& m) {
    return std::visit([](const auto& net) { return net.params(); }, m);
}

inline int64_t param_count(const Model& m) {
    int64_t n = 0;
    for (const Tensor& p : model_params(m)) n += p.size();
    return n;
}

// L1 norms of quantized weights, per layer; for the XOR net also split by
// input column groups (xor inputs 0,1 vs noise inputs 2,3).
struct L1Report {
    struct PerLayer {
        std::string name;
        double l1 = 0;
        int64_t weights = 0;
    };
    std::vector<PerLayer> layers;
    double xor_input_l1 = 0;
    double noise_input_l1 = 0;
    double output_l1 = 0;
};

inline std::vector<float> quantized_weights(const BitLinear& l) {
    return absmeasure_quantize_weights(l.weight.vals(), l.cfg).w_quant;
}

inline L1Report l1_norm_report(const XorNet& net) {
    L1Report r;
    std::vector<float> w1 = quantized_weights(net.l1);
    std::vector<float> w2 = quantized_weights(net.l2);
    double l1sum = 0;
    for (float v : w1) l1sum += std::fabs(v);
    r.layers.push_back({"input", l1sum, int64_t(w1.size())});
    double l2sum = 0;
    for (float v : w2) l2sum += std::fabs(v);
    r.layers.push_back({"output", l2sum, int64_t(w2.size())});
    r.output_l1 = l2sum;
    int in = net.l1.in_dim;
    for (int o = 0; o < net.l1.out_dim; ++o)
        for (int j = 0; j < in; ++j) {
            double a = std::fabs(w1[size_t(o) * size_t(in) + size_t(j)]);
            if (j < 2)
                r.xor_input_l1 += a;
            else
                r.noise_input_l1 += a;
        }
    return r;
}

}  // namespace tq
