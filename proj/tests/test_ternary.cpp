#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#define GOLDEN_TQ58_HEX                                                                  \
    "5451353801000200000104000000020000000108acc52737b0feff3f090600000200000002000000" \
    "0108acc52737b0feff3f000530970595"

#include <filesystem>

#include "test_support.hpp"
#include "tq/data.hpp"
#include "tq/ternary.hpp"
#include "tq/train.hpp"

using namespace tq;

TEST_CASE("packing fixtures") {
    SUBCASE("row [1,-1,0,1] packs to 0x49") {
        PackedTernaryMatrix p = pack_ternary({1, -1, 0, 1}, 1, 4);
        REQUIRE(p.data.size() == 1);
        CHECK(p.data[0] == 0x49);
    }
    SUBCASE("row of 5 zeros pads to two zero bytes") {
        PackedTernaryMatrix p = pack_ternary(std::vector<float>(5, 0.f), 1, 5);
        REQUIRE(p.data.size() == 2);
        CHECK(p.data[0] == 0x00);
        CHECK(p.data[1] == 0x00);
    }
    SUBCASE("non-ternary entry is rejected") {
        CHECK_THROWS_AS(pack_ternary({0.5f}, 1, 1), Error);
    }
}

TEST_CASE("pack/unpack round-trips on random ternary matrices") {
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        int rows = 1 + int(rng.below(64)), cols = 1 + int(rng.below(64));
        std::vector<float> w(size_t(rows) * size_t(cols));
        for (float& v : w) v = float(int(rng.below(3)) - 1);
        PackedTernaryMatrix p = pack_ternary(w, rows, cols);
        std::vector<int8_t> u = unpack_ternary(p);
        bool same = true;
        for (size_t i = 0; i < w.size(); ++i) same &= float(u[i]) == w[i];
        REQUIRE(same);
    }
}

TEST_CASE("model file round trip, size and integrity") {
    Rng rng(81);
    ModelSpec spec;
    spec.arch = Arch::xor_net;
    spec.hidden = 8;
    spec.kind = LayerKind::b158;
    XorNet net(spec, rng);
    TernaryModel m = export_model(Model(net));
    std::string bytes = serialize_model(m);

    SUBCASE("xor h=8 file is under 200 bytes") {
        CHECK(bytes.size() < 200);
    }
    SUBCASE("round trip preserves quantized weights and scales") {
        TernaryModel back = deserialize_model(bytes);
        REQUIRE(back.layers.size() == m.layers.size());
        for (size_t i = 0; i < m.layers.size(); ++i) {
            CHECK(back.layers[i].w_scale == m.layers[i].w_scale);
            CHECK(back.layers[i].packed.data == m.layers[i].packed.data);
            CHECK(back.layers[i].bias.has_value() == m.layers[i].bias.has_value());
            if (m.layers[i].bias) CHECK(*back.layers[i].bias == *m.layers[i].bias);
        }
    }
    SUBCASE("any flipped byte fails the CRC") {
        Rng r2(5);
        for (int trial = 0; trial < 20; ++trial) {
            std::string bad = bytes;
            size_t pos = size_t(r2.below(bad.size()));
            bad[pos] = char(bad[pos] ^ 0x10);
            CHECK_THROWS_AS(deserialize_model(bad), Error);
        }
    }
    SUBCASE("truncation fails integrity") {
        CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() - 7)), Error);
    }
    SUBCASE("export then accuracy via integer kernel matches the float quantized path") {
        XorDataset te = gen_xor(512, 9);
        Tensor logits = net.forward(te.feature_tensor());
        std::vector<float> rt = model_infer(m, te.features, te.n);
        CHECK(rt == logits.vals());
    }
}

TEST_CASE("integer kernel is bit-identical to the training-time quantized forward") {
    Rng rng(91);
    int checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        int in = 1 + int(rng.below(64)), out = 1 + int(rng.below(64)), n = 1 + int(rng.below(4));
        QuantConfig cfg;
        cfg.measure = rng.bernoulli(0.5) ? Measure::mean : Measure::median;
        cfg.use_layernorm = rng.bernoulli(0.5) && in > 1;
        cfg.bias_after_rescale = rng.bernoulli(0.25);
        cfg.quantize_weights = rng.bernoulli(0.8);  // false exports a dense layer
        BitLinear layer(in, out, rng.bernoulli(0.7), cfg, rng);
        for (float& w : layer.weight.vals()) w = float(rng.normal(0, 1));

        std::vector<float> x(size_t(n) * size_t(in));
        for (float& v : x) v = float(rng.normal(0, 2));

        Tensor ref = bitlinear_forward(Tensor({n, in}, x), layer);
        RtLayer rt = export_bitlinear(layer, RtActivation::none);
        std::vector<float> got = ternary_linear_infer(x, n, rt);
        REQUIRE(got == ref.vals());  // bitwise
        ++checked;
    }
    CHECK(checked == 1000);
}

TEST_CASE("row-parallel kernel agrees bitwise with sequential") {
    Rng rng(95);
    QuantConfig cfg;
    cfg.use_layernorm = true;
    BitLinear layer(48, 33, true, cfg, rng);
    std::vector<float> x(size_t(8) * 48);
    for (float& v : x) v = float(rng.normal(0, 1));
    RtLayer rt = export_bitlinear(layer, RtActivation::none);
    std::vector<float> seq = ternary_linear_infer(x, 8, rt, 1);
    std::vector<float> par = ternary_linear_infer(x, 8, rt, 4);
    CHECK(seq == par);
}

TEST_CASE("all-zero packed row yields bias over the scales") {
    QuantConfig cfg;
    cfg.use_layernorm = false;
    BitLinear layer = BitLinear::from_weights({{0, 0, 0}}, cfg);
    layer.bias = Tensor({1}, {2.5f}, true);
    RtLayer rt = export_bitlinear(layer, RtActivation::none);
    std::vector<float> x{0.5f, -1.f, 0.25f};
    std::vector<float> y = ternary_linear_infer(x, 1, rt);
    ActivationQuantResult aq = absmax_quantize_activations(x, cfg);
    CHECK(y[0] == 2.5f / (rt.w_scale * aq.x_scale));
}

TEST_CASE("accumulator width guard") {
    RtLayer l;
    l.kind = RtKind::bitlinear;
    l.in_dim = 1 << 24;
    l.out_dim = 1;
    CHECK_THROWS_AS(ternary_linear_infer({}, 0, l), Error);
}

TEST_CASE("wide mlp exports with dense embedding and runs") {
    Rng rng(99);
    ModelSpec spec;
    spec.arch = Arch::wide_mlp;
    spec.hidden = 12;
    spec.kind = LayerKind::b158;
    spec.quant.use_layernorm = false;
    ModelDims dims{0, 3, 20};
    WideMlp net(spec, dims, rng);
    TernaryModel m = export_model(Model(net));
    REQUIRE(m.layers.size() == 2);
    CHECK(m.layers[0].kind == RtKind::dense);
    CHECK(m.layers[1].kind == RtKind::bitlinear);

    // runtime on a normalized count row == eval-time forward
    std::vector<std::vector<std::pair<int, float>>> rows{{{2, 0.5f}, {7, 0.5f}}};
    auto sp = std::make_shared<SparseMatrix>(SparseMatrix::from_rows(1, 20, rows));
    Rng dummy(0);
    Tensor ref = net.forward(sp, dummy, false);
    std::vector<float> x(20, 0.f);
    x[2] = 0.5f;
    x[7] = 0.5f;
    std::vector<float> got = model_infer(m, x, 1);
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(ref.vals()[i]).epsilon(1e-6));
}

TEST_CASE("gcn and transformers refuse to export") {
    Rng rng(103);
    ModelSpec spec;
    spec.arch = Arch::gcn;
    spec.hidden = 4;
    spec.quant.use_layernorm = false;
    ModelDims dims{5, 2, 0};
    CHECK_THROWS_WITH_AS(export_model(build_model(spec, dims, rng)), doctest::Contains("gcn"), Error);

    ModelSpec enc;
    enc.arch = Arch::tiny_encoder;
    enc.hidden = 8;
    enc.heads = 2;
    enc.seq_len = 4;
    ModelDims edims{0, 0, 10};
    CHECK_THROWS_AS(export_model(build_model(enc, edims, rng)), Error);
}

TEST_CASE("bench reports sizes and a stable checksum") {
    SUBCASE("256x256 packed ratio is exactly 16") {
        Rng rng(107);
        QuantConfig cfg;
        BitLinear layer(256, 256, false, cfg, rng);
        TernaryModel m;
        m.layers.push_back(export_bitlinear(layer, RtActivation::none));
        ModelSizes s = model_sizes(m);
        CHECK(s.packed_weight_bytes == 256 * 64);
        CHECK(s.float_weight_bytes == 262144);
        CHECK(s.ratio == 16.0);
    }
    SUBCASE("repeats=0 emits a size-only report") {
        TernaryModel m;
        BenchReport r = bench_model(m, 4, 0);
        auto lines = r.to_jsonl();
        CHECK(lines.size() == 1);
        CHECK(lines[0]["event"] == "size");
    }
    SUBCASE("bench checksum equals the training-path oracle checksum") {
        Rng rng(109);
        ModelSpec spec;
        spec.arch = Arch::xor_net;
        spec.hidden = 8;
        XorNet net(spec, rng);
        TernaryModel m = export_model(Model(net));
        BenchReport r = bench_model(m, 16, 3);
        // oracle: the same input through the training-time quantized forward
        Rng in_rng(1234);
        std::vector<float> x(size_t(16) * 4);
        for (float& v : x) v = in_rng.uniformf(-1.f, 1.f);
        Tensor ref = net.forward(Tensor({16, 4}, x));
        CHECK(r.output_checksum == crc32(ref.vals().data(), ref.vals().size() * 4));
    }
}

// Golden bytes for the hand-built ternary XOR fixture; pins the on-disk
// layout. Regenerating this constant is a format break.
TEST_CASE("golden model file bytes") {
    auto [l1, l2] = ternary_solution_xor();
    XorNet net(std::move(l1), std::move(l2));
    std::string bytes = serialize_model(export_model(Model(net)));
    std::string hex;
    static const char* digits = "0123456789abcdef";
    for (unsigned char c : bytes) {
        hex.push_back(digits[c >> 4]);
        hex.push_back(digits[c & 0xF]);
    }
    CHECK(hex == std::string(GOLDEN_TQ58_HEX));
}
