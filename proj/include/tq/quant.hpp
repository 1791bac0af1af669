#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tq/tensor.hpp"

namespace tq {

enum class Measure { mean, median };

inline const char* measure_name(Measure m) { return m == Measure::mean ? "mean" : "median"; }

struct QuantConfig {
    int k = 8;                        // activation bit width
    float epsilon = 1e-5f;            // zero-division guard, shared with layer norm
    Measure measure = Measure::mean;  // weight-scale statistic
    bool quantize_weights = true;
    bool quantize_activations = true;
    bool use_layernorm = true;
    bool bias_after_rescale = false;  // default follows the formula order literally

    int qb() const { return 1 << (k - 1); }
    void validate() const {
        if (k < 2) throw usage_error("quant: k must be >= 2, got " + std::to_string(k));
        if (!(epsilon > 0.f)) throw usage_error("quant: epsilon must be positive");
    }
    static QuantConfig off() {
        QuantConfig c;
        c.quantize_weights = false;
        c.quantize_activations = false;
        c.use_layernorm = false;
        return c;
    }
};

struct ActivationQuantResult {
    std::vector<float> x_quant;  // integers in [-Qb, Qb-1], held exactly in f32
    float x_scale = 1.f;
};

struct WeightQuantResult {
    std::vector<float> w_quant;  // entries in {-1, 0, 1}
    float w_scale = 1.f;
};

// x_scale = Qb / (max|x| + eps); x_quant = clamp(round(x * x_scale), -Qb, Qb-1).
// One scale for the whole tensor.
inline ActivationQuantResult absmax_quantize_activations(const std::vector<float>& x, const QuantConfig& cfg) {
    cfg.validate();
    float qb = float(cfg.qb());
    float mx = 0.f;
    for (float v : x) {
        if (!std::isfinite(v)) throw numeric_error("absmax: non-finite activation");
        mx = std::max(mx, std::fabs(v));
    }
    ActivationQuantResult r;
    r.x_scale = qb / (mx + cfg.epsilon);
    r.x_quant.resize(x.size());
    float lo = -qb, hi = qb - 1.f;
    for (size_t i = 0; i < x.size(); ++i)
        r.x_quant[i] = clampf(round_half_even(x[i] * r.x_scale), lo, hi);
    return r;
}

// Median of an even count is the mean of the two middle order statistics.
inline float measure_abs(const std::vector<float>& w, Measure m) {
    if (w.empty()) throw data_error("measure_abs: empty weight matrix");
    if (m == Measure::mean) {
        double s = 0.0;
        for (float v : w) s += std::fabs(v);
        return float(s / double(w.size()));
    }
    std::vector<float> a(w.size());
    for (size_t i = 0; i < w.size(); ++i) a[i] = std::fabs(w[i]);
    size_t n = a.size();
    size_t hi = n / 2;
    std::nth_element(a.begin(), a.begin() + ptrdiff_t(hi), a.end());
    float vhi = a[hi];
    if (n % 2 == 1) return vhi;
    float vlo = *std::max_element(a.begin(), a.begin() + ptrdiff_t(hi));
    return 0.5f * (vlo + vhi);
}

// w_scale = 1 / (Measure(|W|) + eps); w_quant = clamp(round(W * w_scale), -1, 1).
inline WeightQuantResult absmeasure_quantize_weights(const std::vector<float>& w, const QuantConfig& cfg) {
    cfg.validate();
    WeightQuantResult r;
    r.w_scale = 1.f / (measure_abs(w, cfg.measure) + cfg.epsilon);
    r.w_quant.resize(w.size());
    for (size_t i = 0; i < w.size(); ++i)
        r.w_quant[i] = clampf(round_half_even(w[i] * r.w_scale), -1.f, 1.f);
    return r;
}

// Drop-in replacement for an affine layer. Shadow weights are the only
// trained state; quantized views are recomputed on every forward.
struct BitLinear {
    int in_dim = 0, out_dim = 0;
    Tensor weight;                // [out x in]
    std::optional<Tensor> bias;   // [out]
    QuantConfig cfg;

    BitLinear() = default;
    BitLinear(int in, int out, bool with_bias, QuantConfig c, Rng& rng) : in_dim(in), out_dim(out), cfg(c) {
        cfg.validate();
        float bound = 1.f / std::sqrt(float(in));
        std::vector<float> w(size_t(in) * size_t(out));
        for (float& v : w) v = rng.uniformf(-bound, bound);
        weight = Tensor({out, in}, std::move(w), true);
        if (with_bias) {
            std::vector<float> b(static_cast<size_t>(out));
            for (float& v : b) v = rng.uniformf(-bound, bound);
            bias = Tensor({out}, std::move(b), true);
        }
    }

    // Fixture construction from explicit weights.
    static BitLinear from_weights(std::vector<std::vector<float>> rows, QuantConfig c) {
        BitLinear l;
        l.cfg = c;
        l.out_dim = int(rows.size());
        l.in_dim = int(rows[0].size());
        std::vector<float> w;
        for (auto& r : rows) w.insert(w.end(), r.begin(), r.end());
        l.weight = Tensor({l.out_dim, l.in_dim}, std::move(w), true);
        return l;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p{weight};
        if (bias) p.push_back(*bias);
        return p;
    }
    int64_t param_count() const { return weight.size() + (bias ? bias->size() : 0); }
};

// Last computed scales, returned for inspection and for the export path.
struct BitLinearTrace {
    float x_scale = 1.f;
    float w_scale = 1.f;
};

// The five-step quantized forward:
//   1. x_hat = parameter-free layer norm of x        (optional)
//   2. AbsMax-quantize activations to k bits         (optional)
//   3. AbsMeasure-quantize weights to {-1,0,1}       (optional)
//   4. y_quant = x_quant * W_quant^T + b
//   5. y = y_quant / (w_scale * x_scale)
// Quantized tensors enter the graph through straight-through nodes, so
// gradients reach the shadow weights and the input unchanged.
inline Tensor bitlinear_forward(const Tensor& x, const BitLinear& layer, BitLinearTrace* trace = nullptr) {
    if (x.shape().size() != 2 || x.cols() != layer.in_dim)
        throw usage_error("bitlinear: input " + shape_str(x.shape()) + " incompatible with layer [" +
                          std::to_string(layer.out_dim) + "x" + std::to_string(layer.in_dim) + "]");
    const QuantConfig& cfg = layer.cfg;

    Tensor xh = cfg.use_layernorm ? layer_norm(x, cfg.epsilon) : x;

    float x_scale = 1.f;
    Tensor xq = xh;
    if (cfg.quantize_activations) {
        ActivationQuantResult aq = absmax_quantize_activations(xh.vals(), cfg);
        x_scale = aq.x_scale;
        xq = ste_passthrough(xh, std::move(aq.x_quant));
    }

    float w_scale = 1.f;
    Tensor wq = layer.weight;
    if (cfg.quantize_weights) {
        WeightQuantResult wr = absmeasure_quantize_weights(layer.weight.vals(), cfg);
        w_scale = wr.w_scale;
        wq = ste_passthrough(layer.weight, std::move(wr.w_quant));
    }

    if (trace) *trace = {x_scale, w_scale};

    Tensor yq = matmul_nt(xq, wq);
    float denom = w_scale * x_scale;
    if (layer.bias && !cfg.bias_after_rescale) yq = add_rowvec(yq, *layer.bias);
    Tensor y = (denom == 1.f) ? yq : scalar_div(yq, denom);
    if (layer.bias && cfg.bias_after_rescale) y = add_rowvec(y, *layer.bias);
    return y;
}

// Sparse-input variant for constant feature matrices (graph features,
// bag-of-words count rows). Quantizing a sparse tensor keeps its zeros, so
// the per-tensor AbsMax result is identical to the dense computation.
// Layer norm would densify the input and is rejected here.
inline Tensor bitlinear_forward_sparse(SparsePtr x, const BitLinear& layer,
                                       BitLinearTrace* trace = nullptr) {
    if (x->cols != layer.in_dim)
        throw usage_error("bitlinear: sparse input cols " + std::to_string(x->cols) +
                          " incompatible with layer in_dim " + std::to_string(layer.in_dim));
    const QuantConfig& cfg = layer.cfg;
    if (cfg.use_layernorm)
        throw usage_error("bitlinear: use_layernorm is not supported on sparse inputs; "
                          "disable it for this layer or densify the features");

    SparsePtr lhs = x;
    float x_scale = 1.f;
    if (cfg.quantize_activations) {
        ActivationQuantResult aq = absmax_quantize_activations(x->val, cfg);
        x_scale = aq.x_scale;
        auto xq = std::make_shared<SparseMatrix>(*x);
        xq->val = std::move(aq.x_quant);
        lhs = xq;
    }

    float w_scale = 1.f;
    Tensor wq = layer.weight;
    if (cfg.quantize_weights) {
        WeightQuantResult wr = absmeasure_quantize_weights(layer.weight.vals(), cfg);
        w_scale = wr.w_scale;
        wq = ste_passthrough(layer.weight, std::move(wr.w_quant));
    }
    if (trace) *trace = {x_scale, w_scale};

    Tensor yq = spmm_nt(lhs, wq);
    float denom = w_scale * x_scale;
    if (layer.bias && !cfg.bias_after_rescale) yq = add_rowvec(yq, *layer.bias);
    Tensor y = (denom == 1.f) ? yq : scalar_div(yq, denom);
    if (layer.bias && cfg.bias_after_rescale) y = add_rowvec(y, *layer.bias);
    return y;
}

// Hand-built two-hidden-unit ternary XOR network over inputs
// (x1, x2, noise, noise): h1 = relu(x1 - x2), h2 = relu(x2 - x1),
// class-1 logit = h1 + h2, class-0 logit = 0. No bias. Layer norm stays off:
// with two hidden units it maps [q, 0] to [1, -1] and collapses the class-1
// logit to a tie, which is not the construction the network encodes.
inline std::pair<BitLinear, BitLinear> ternary_solution_xor() {
    QuantConfig cfg;
    cfg.use_layernorm = false;
    BitLinear l1 = BitLinear::from_weights({{1, -1, 0, 0}, {-1, 1, 0, 0}}, cfg);
    BitLinear l2 = BitLinear::from_weights({{0, 0}, {1, 1}}, cfg);
    return {l1, l2};
}

}  // namespace tq
