#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "tq/tensor.hpp"

using namespace tq;
using tqtest::close_rel;
using tqtest::fd_grad;
using tqtest::grads_match;
using tqtest::random_tensor;

TEST_CASE("matmul identity and hand-evaluated product") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(a, eye);
    CHECK(c.vals() == std::vector<float>{1, 2, 3, 4});

    Tensor ones({2, 1}, {1, 1});
    Tensor d = matmul(a, ones);
    CHECK(d.vals() == std::vector<float>{3, 7});
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a({2, 3}, std::vector<float>(6, 0.f));
    Tensor b({2, 2}, std::vector<float>(4, 0.f));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), Error);
}

TEST_CASE("grad of sum(A*B) wrt A equals row-sums of B, and matches finite differences") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({4, 2}, rng, false);

    Tensor loss = sum(matmul(a, b));
    backward(loss);

    // Analytic expectation: dA[i,k] = sum_j B[k,j].
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 4; ++k) {
            double rs = 0;
            for (int j = 0; j < 2; ++j) rs += b.vals()[size_t(k) * 2 + size_t(j)];
            CHECK(close_rel(a.grad()[size_t(i) * 4 + size_t(k)], rs, 1e-5));
        }

    auto fd = fd_grad(a, [&] { return double(sum(matmul(a, b)).item()); });
    CHECK(grads_match(a.grad(), fd, 1e-3));
}

TEST_CASE("layer_norm fixed points") {
    SUBCASE("constant row maps to zeros") {
        Tensor x({1, 3}, {5, 5, 5});
        Tensor y = layer_norm(x, 1e-5f);
        for (float v : y.vals()) CHECK(v == doctest::Approx(0.f));
    }
    SUBCASE("two-point row") {
        Tensor x({1, 2}, {1, 3});
        Tensor y = layer_norm(x, 1e-5f);
        float expect = 1.0f / std::sqrt(1.f + 1e-5f);
        CHECK(y.vals()[0] == doctest::Approx(-expect).epsilon(1e-6));
        CHECK(y.vals()[1] == doctest::Approx(expect).epsilon(1e-6));
    }
    SUBCASE("rows have mean 0 and variance 1") {
        Rng rng(3);
        Tensor x = random_tensor({8, 16}, rng, false, -3.f, 3.f);
        Tensor y = layer_norm(x, 1e-5f);
        for (int r = 0; r < 8; ++r) {
            double mu = 0, var = 0;
            for (int k = 0; k < 16; ++k) mu += y.vals()[size_t(r) * 16 + size_t(k)];
            mu /= 16;
            for (int k = 0; k < 16; ++k) {
                double t = y.vals()[size_t(r) * 16 + size_t(k)] - mu;
                var += t * t;
            }
            var /= 16;
            CHECK(std::fabs(mu) < 1e-6);
            CHECK(std::fabs(var - 1.0) < 1e-4);
        }
    }
}

TEST_CASE("layer_norm gradient vs finite differences") {
    Rng rng(11);
    Tensor x = random_tensor({4, 6}, rng, true);
    Tensor w = random_tensor({4, 6}, rng, false);
    auto f = [&] { return double(sum(mul(layer_norm(x, 1e-5f), w)).item()); };
    Tensor loss = sum(mul(layer_norm(x, 1e-5f), w));
    backward(loss);
    CHECK(grads_match(x.grad(), fd_grad(x, f), 1e-3));
}

TEST_CASE("detach blocks gradients completely") {
    Tensor x({2, 2}, {1, 2, 3, 4}, true);
    Tensor d = detach(x);
    CHECK(d.vals() == x.vals());
    CHECK_FALSE(d.requires_grad());
    CHECK(d.d->parents.empty());

    // loss depends on x only via detach(x): gradient is exactly zero.
    Tensor loss = sum(mul(d, d));
    backward(loss);
    CHECK_FALSE(loss.requires_grad());
    for (float g : x.grad()) CHECK(g == 0.f);
}

TEST_CASE("STE composite q = x + detach(round(x) - x) has unit gradient") {
    Rng rng(5);
    Tensor x = random_tensor({3, 3}, rng, true, -2.f, 2.f);
    std::vector<float> rounded(x.vals().size());
    for (size_t i = 0; i < rounded.size(); ++i) rounded[i] = round_half_even(x.vals()[i]);

    SUBCASE("generic composite from add/detach/sub") {
        Tensor q = add(x, detach(sub(Tensor(x.shape(), rounded), x)));
        Tensor loss = sum(q);
        backward(loss);
        for (float g : x.grad()) CHECK(g == 1.f);
        for (size_t i = 0; i < rounded.size(); ++i)
            CHECK(q.vals()[i] == doctest::Approx(rounded[i]).epsilon(1e-6));
    }
    SUBCASE("fused passthrough node") {
        Tensor q = ste_passthrough(x, rounded);
        CHECK(q.vals() == rounded);  // forward takes the quantized bits exactly
        Tensor loss = sum(q);
        backward(loss);
        for (float g : x.grad()) CHECK(g == 1.f);
    }
}

TEST_CASE("relu and cross-entropy") {
    SUBCASE("uniform logits cost ln 2") {
        Tensor logits({1, 2}, {0, 0}, true);
        Tensor loss = softmax_cross_entropy(logits, {0});
        CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    }
    SUBCASE("extreme logits do not overflow") {
        Tensor logits({1, 2}, {1000, 0});
        Tensor loss = softmax_cross_entropy(logits, {0});
        CHECK(std::isfinite(loss.item()));
        CHECK(loss.item() == doctest::Approx(0.f).epsilon(1e-6));
    }
    SUBCASE("label out of range raises a data error") {
        Tensor logits({1, 2}, {0, 0});
        CHECK_THROWS_AS(softmax_cross_entropy(logits, {2}), Error);
    }
    SUBCASE("relu subgradient is 0 at 0") {
        Tensor x({1, 3}, {-1, 0, 2}, true);
        backward(sum(relu(x)));
        CHECK(x.grad() == std::vector<float>{0, 0, 1});
    }
    SUBCASE("cross-entropy gradient vs finite differences") {
        Rng rng(13);
        Tensor logits = random_tensor({5, 4}, rng, true);
        std::vector<int> labels{0, 3, 1, 2, 2};
        auto f = [&] { return double(softmax_cross_entropy(logits, labels).item()); };
        backward(softmax_cross_entropy(logits, labels));
        CHECK(grads_match(logits.grad(), fd_grad(logits, f), 1e-3));
    }
}

TEST_CASE("backward contract") {
    SUBCASE("loss = sum(x) gives all-ones gradient") {
        Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
        backward(sum(x));
        for (float g : x.grad()) CHECK(g == 1.f);
    }
    SUBCASE("non-scalar loss is a usage error") {
        Tensor x({2, 2}, {1, 2, 3, 4}, true);
        CHECK_THROWS_AS(backward(add(x, x)), Error);
    }
    SUBCASE("diamond graph sums gradients across both paths") {
        // y = x*x + x  =>  dy/dx = 2x + 1
        Tensor x({1, 3}, {1, 2, -3}, true);
        Tensor y = add(mul(x, x), x);
        backward(sum(y));
        CHECK(x.grad()[0] == doctest::Approx(3.f));
        CHECK(x.grad()[1] == doctest::Approx(5.f));
        CHECK(x.grad()[2] == doctest::Approx(-5.f));
    }
    SUBCASE("second backward without zeroing doubles grads") {
        Tensor x({1, 2}, {1, 2}, true);
        backward(sum(x));
        backward(sum(x));
        for (float g : x.grad()) CHECK(g == 2.f);
    }
}

TEST_CASE("softmax rows sum to one and gradient checks out") {
    Rng rng(17);
    Tensor x = random_tensor({4, 5}, rng, true);
    Tensor w = random_tensor({4, 5}, rng, false);
    Tensor y = softmax(x);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int k = 0; k < 5; ++k) s += y.vals()[size_t(r) * 5 + size_t(k)];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    auto f = [&] { return double(sum(mul(softmax(x), w)).item()); };
    backward(sum(mul(softmax(x), w)));
    CHECK(grads_match(x.grad(), fd_grad(x, f), 1e-3));
}

TEST_CASE("slice/concat/gather round trips and gradients") {
    Rng rng(19);
    Tensor x = random_tensor({6, 8}, rng, true);

    SUBCASE("slices reassemble") {
        Tensor top = slice_rows(x, 0, 3), bot = slice_rows(x, 3, 6);
        Tensor back = concat_rows({top, bot});
        CHECK(back.vals() == x.vals());
        Tensor l = slice_cols(x, 0, 5), r = slice_cols(x, 5, 8);
        Tensor back2 = concat_cols({l, r});
        CHECK(back2.vals() == x.vals());
    }
    SUBCASE("gather_rows gradient scatters") {
        std::vector<int> idx{1, 1, 4};
        Tensor g = gather_rows(x, idx);
        backward(sum(g));
        for (int j = 0; j < 8; ++j) {
            CHECK(x.grad()[1 * 8 + size_t(j)] == 2.f);  // row used twice
            CHECK(x.grad()[4 * 8 + size_t(j)] == 1.f);
            CHECK(x.grad()[0 * 8 + size_t(j)] == 0.f);
        }
        CHECK_FALSE(x.d->grad_rows_dense);
    }
    SUBCASE("sliced matmul gradient vs finite differences") {
        Tensor w = random_tensor({3, 4}, rng, true);
        auto f = [&] {
            Tensor part = slice_cols(slice_rows(x, 1, 4), 2, 6);
            return double(sum(matmul_nt(part, w)).item());
        };
        Tensor part = slice_cols(slice_rows(x, 1, 4), 2, 6);
        backward(sum(matmul_nt(part, w)));
        CHECK(grads_match(x.grad(), fd_grad(x, f), 1e-3));
        CHECK(grads_match(w.grad(), fd_grad(w, f), 1e-3));
    }
}

TEST_CASE("sparse ops agree with dense computation") {
    Rng rng(23);
    auto sp = std::make_shared<SparseMatrix>(SparseMatrix::from_rows(
        3, 4, {{{0, 2.f}, {3, -1.f}}, {}, {{1, 0.5f}, {2, 1.5f}, {3, 1.f}}}));
    Tensor dense_s({3, 4}, sp->dense());
    Tensor d = random_tensor({4, 5}, rng, true);

    Tensor y1 = spmm(sp, d);
    Tensor y2 = matmul(dense_s, d);
    for (size_t i = 0; i < y1.vals().size(); ++i)
        CHECK(y1.vals()[i] == doctest::Approx(y2.vals()[i]).epsilon(1e-6));

    auto f = [&] { return double(sum(spmm(sp, d)).item()); };
    backward(sum(spmm(sp, d)));
    CHECK(grads_match(d.grad(), fd_grad(d, f), 1e-3));

    Tensor w = random_tensor({6, 4}, rng, true);
    Tensor z1 = spmm_nt(sp, w);
    Tensor z2 = matmul_nt(dense_s, w);
    for (size_t i = 0; i < z1.vals().size(); ++i)
        CHECK(z1.vals()[i] == doctest::Approx(z2.vals()[i]).epsilon(1e-6));
    auto g = [&] { return double(sum(spmm_nt(sp, w)).item()); };
    backward(sum(spmm_nt(sp, w)));
    CHECK(grads_match(w.grad(), fd_grad(w, g), 1e-3));
}

TEST_CASE("dropout scales kept activations and blocks dropped ones") {
    Rng rng(29);
    Tensor x({1, 1000}, std::vector<float>(1000, 1.f), true);
    Tensor y = dropout(x, 0.25f, rng, true);
    int kept = 0;
    for (float v : y.vals()) {
        if (v != 0.f) {
            CHECK(v == doctest::Approx(1.f / 0.75f));
            ++kept;
        }
    }
    CHECK(kept > 650);
    CHECK(kept < 850);
    backward(sum(y));
    for (size_t i = 0; i < x.grad().size(); ++i)
        CHECK(x.grad()[i] == (y.vals()[i] == 0.f ? 0.f : doctest::Approx(1.f / 0.75f)));

    Rng r2(29);
    Tensor z = dropout(x, 0.25f, r2, false);
    CHECK(z.d.get() == x.d.get());  // eval mode is the identity
}

TEST_CASE("rng determinism and fork independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng base(7);
    Rng f1 = base.fork(1);
    uint64_t before = base.state;
    (void)f1.next_u64();
    CHECK(base.state == before);
    CHECK(base.fork(1).next_u64() == Rng(7).fork(1).next_u64());
    CHECK(base.fork(1).next_u64() != base.fork(2).next_u64());
}

TEST_CASE("finite differences across all differentiable ops, random instances") {
    Rng rng(101);
    int checked = 0;
    for (int trial = 0; trial < 20; ++trial) {
        tqtest::FdInstance in = tqtest::fd_instance(rng);
        auto f = [&] { return in.loss(); };
        backward(in.loss_node());
        CHECK(grads_match(in.a.grad(), fd_grad(in.a, f), 1e-3));
        CHECK(grads_match(in.b.grad(), fd_grad(in.b, f), 1e-3));
        CHECK(grads_match(in.c.grad(), fd_grad(in.c, f), 1e-3));
        CHECK(grads_match(in.bias.grad(), fd_grad(in.bias, f), 1e-3));
        ++checked;
    }
    CHECK(checked == 20);
}
