#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "keytailor/autodiff.hpp"
#include "keytailor/errors.hpp"
#include "keytailor/nn.hpp"

using namespace kt;

namespace {
constexpr double kTol = 1e-4;
}

TEST_CASE("matmul forward matches hand computation") {
    Tensor a(Shape{2, 2}, {1, 2, 3, 4});
    Tensor b(Shape{2, 2}, {5, 6, 7, 8});
    Tensor c = matmul_plain(a, b);
    CHECK(c.data == std::vector<double>{19, 22, 43, 50});
    Tensor ct = matmul_plain(a, b, true, false);
    CHECK(ct.data == std::vector<double>{26, 30, 38, 44});
    Tensor cbt = matmul_plain(a, b, false, true);
    CHECK(cbt.data == std::vector<double>{17, 23, 39, 53});
    CHECK_THROWS_AS(matmul_plain(a, Tensor(Shape{3, 2})), shape_error);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Tensor x(Shape{2, 3}, {1, 2, 3, 1001, 1002, 1003});
    Tensor p = softmax_rows(x);
    for (size_t r = 0; r < 2; ++r) {
        double s = 0;
        for (size_t j = 0; j < 3; ++j) s += p.at2(r, j);
        CHECK(s == doctest::Approx(1.0));
    }
    for (size_t j = 0; j < 3; ++j) CHECK(p.at2(0, j) == doctest::Approx(p.at2(1, j)));
}

TEST_CASE("gelu known values") {
    Tape t;
    Var x = t.constant(Tensor(Shape{3}, {0.0, 1.0, -1.0}));
    Var y = gelu(x);
    CHECK(y.value().data[0] == doctest::Approx(0.0));
    CHECK(y.value().data[1] == doctest::Approx(0.8413447460685429));
    CHECK(y.value().data[2] == doctest::Approx(-0.15865525393145707));
}

TEST_CASE("backward requires a scalar and refuses a second sweep") {
    Tape t;
    Parameter p("p", Tensor(Shape{2, 2}, {1, 2, 3, 4}));
    Var v = t.param(p);
    CHECK_THROWS_AS(t.backward(v), usage_error);
    Var loss = sum_all(v);
    t.backward(loss);
    CHECK(p.grad.data == std::vector<double>{1, 1, 1, 1});
    CHECK_THROWS_AS(t.backward(loss), usage_error);
}

TEST_CASE("conv3d output geometry uses ceil(in/stride)") {
    auto o = conv3d_output_extent({3, 16, 64, 64}, {32, 3, 3, 3, 3}, {1, 2, 2});
    CHECK(o == std::array<size_t, 3>{16, 32, 32});
    auto o2 = conv3d_output_extent({96, 16, 16, 16}, {192, 96, 3, 3, 3}, {2, 2, 2});
    CHECK(o2 == std::array<size_t, 3>{8, 8, 8});
    auto o3 = conv3d_output_extent({1, 5, 5, 5}, {1, 1, 3, 3, 3}, {2, 2, 2});
    CHECK(o3 == std::array<size_t, 3>{3, 3, 3});
}

TEST_CASE("conv3d identity kernel reproduces the input") {
    // 1x1x1 kernel of weight 1, stride 1: exact copy.
    Tape t;
    SeededRng rng(3);
    Var x = t.constant(Tensor::gaussian(Shape{1, 2, 3, 3}, rng));
    Var w = t.constant(Tensor::full(Shape{1, 1, 1, 1, 1}, 1.0));
    Var b = t.constant(Tensor(Shape{1}));
    Var y = conv3d(x, w, b, {1, 1, 1});
    CHECK(bit_equal(y.value(), x.value()));
}

TEST_CASE("conv3d zero padding at the borders") {
    // 3x3x3 averaging kernel over a constant input: interior sites see 27
    // ones, corner sites only 8.
    Tape t;
    Var x = t.constant(Tensor::full(Shape{1, 3, 3, 3}, 1.0));
    Var w = t.constant(Tensor::full(Shape{1, 1, 3, 3, 3}, 1.0));
    Var b = t.constant(Tensor(Shape{1}));
    Var y = conv3d(x, w, b, {1, 1, 1});
    CHECK(y.value().at4(0, 1, 1, 1) == doctest::Approx(27.0));
    CHECK(y.value().at4(0, 0, 0, 0) == doctest::Approx(8.0));
}

TEST_CASE("patchify round trip and token layout") {
    SeededRng rng(5);
    Tensor x = Tensor::gaussian(Shape{2, 4, 4, 4}, rng);
    Tape t;
    Var xv = t.constant(x);
    Var tok = patchify(xv, {2, 2, 2});
    CHECK(tok.shape() == Shape{8, 16});
    // First token is the (0,0,0) block; its first entries walk channel 0's
    // 2x2x2 corner in (dt,dh,dw) order.
    CHECK(tok.value().at2(0, 0) == x.at4(0, 0, 0, 0));
    CHECK(tok.value().at2(0, 1) == x.at4(0, 0, 0, 1));
    CHECK(tok.value().at2(0, 2) == x.at4(0, 0, 1, 0));
    CHECK(tok.value().at2(0, 4) == x.at4(0, 1, 0, 0));
    CHECK(tok.value().at2(0, 8) == x.at4(1, 0, 0, 0));
    // Token index walks (t-block, h-block, w-block) row-major.
    CHECK(tok.value().at2(1, 0) == x.at4(0, 0, 0, 2));
    CHECK(tok.value().at2(2, 0) == x.at4(0, 0, 2, 0));
    CHECK(tok.value().at2(4, 0) == x.at4(0, 2, 0, 0));
    Var back = unpatchify(tok, {2, 4, 4, 4}, {2, 2, 2});
    CHECK(bit_equal(back.value(), x));
}

TEST_CASE("upsample2x nearest neighbour") {
    Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    Tape t;
    Var y = upsample2x_hw(t.constant(x));
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    CHECK(y.value().at4(0, 0, 0, 0) == 1);
    CHECK(y.value().at4(0, 0, 0, 1) == 1);
    CHECK(y.value().at4(0, 0, 1, 1) == 1);
    CHECK(y.value().at4(0, 0, 0, 2) == 2);
    CHECK(y.value().at4(0, 0, 3, 3) == 4);
}

TEST_CASE("layernorm normalizes rows") {
    Tape t;
    Var x = t.constant(Tensor(Shape{1, 4}, {1, 2, 3, 4}));
    Var g = t.constant(Tensor::full(Shape{4}, 1.0));
    Var b = t.constant(Tensor(Shape{4}));
    Var y = layernorm(x, g, b);
    double mean = 0, var = 0;
    for (size_t j = 0; j < 4; ++j) mean += y.value().data[j];
    mean /= 4;
    for (size_t j = 0; j < 4; ++j) var += (y.value().data[j] - mean) * (y.value().data[j] - mean);
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(var / 4 == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("lora delta is zero at init") {
    SeededRng rng(11);
    LoraLinear l("l", 6, 4, 2, rng, 0.2, 0.02);
    Tensor x = Tensor::gaussian(Shape{3, 6}, rng);
    Tape t;
    Var y = l.apply(t, t.constant(x));
    Tensor base = matmul_plain(x, l.w0.value, false, true);
    CHECK(bit_equal(y.value(), base));
}

TEST_CASE("guider head output is exactly zero at init") {
    SeededRng rng(13);
    GuiderNet g("g", 3, 8, rng);
    Tensor x = Tensor::gaussian(Shape{3, 4, 16, 16}, rng);
    Tape t;
    Var y = g.apply(t, t.constant(x));
    CHECK(y.shape() == Shape{8, 1, 2, 2});
    CHECK(y.value().min() == 0.0);
    CHECK(y.value().max() == 0.0);
}

// ---- gradient checks ------------------------------------------------------

TEST_CASE("gradcheck: elementwise, reductions, matmul") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        SeededRng rng(seed);
        Parameter a("a", Tensor::gaussian(Shape{3, 4}, rng));
        Parameter b("b", Tensor::gaussian(Shape{3, 4}, rng));
        Parameter w("w", Tensor::gaussian(Shape{5, 4}, rng));
        auto build = [&](Tape& t) {
            Var av = t.param(a), bv = t.param(b);
            Var h = mul(add(av, bv), sub(av, scale(bv, 0.3)));
            Var y = matmul(gelu(h), t.param(w), false, true);
            return mse(y, t.constant(Tensor::full(Shape{3, 5}, 0.1)));
        };
        SeededRng pick(seed + 100);
        double err = finite_diff_check(build, {&a, &b, &w}, 6, 1e-5, pick);
        CHECK(err < kTol);
    }
}

TEST_CASE("gradcheck: layernorm + attention + lora") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        SeededRng rng(seed * 7 + 1);
        Parameter q("q", Tensor::gaussian(Shape{4, 8}, rng));
        Parameter k("k", Tensor::gaussian(Shape{6, 8}, rng));
        Parameter v("v", Tensor::gaussian(Shape{6, 8}, rng));
        LayerNormLayer ln("ln", 8);
        LoraLinear lo("lo", 8, 8, 2, rng, 0.3, 0.1);
        // LoRA B starts at zero; give it signal so its gradient path is live.
        lo.bdown.value = Tensor::gaussian(Shape{8, 2}, rng, 0.1);
        auto build = [&](Tape& t) {
            Var attn = attention(t.param(q), t.param(k), t.param(v), 2);
            Var y = lo.apply(t, ln.apply(t, attn));
            return mse(y, t.constant(Tensor::full(Shape{4, 8}, 0.05)));
        };
        ParamList ps{&q, &k, &v, &ln.gain, &ln.bias, &lo.a, &lo.bdown};
        SeededRng pick(seed + 200);
        double err = finite_diff_check(build, ps, 5, 1e-5, pick);
        CHECK(err < kTol);
    }
}

TEST_CASE("gradcheck: conv3d, conv1x1, patchify, upsample, broadcast") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        SeededRng rng(seed * 13 + 5);
        Parameter x("x", Tensor::gaussian(Shape{2, 4, 6, 6}, rng));
        Parameter w("w", Tensor::gaussian(Shape{3, 2, 3, 3, 3}, rng, 0.3));
        Parameter b("b", Tensor::gaussian(Shape{3}, rng, 0.1));
        Parameter pw("pw", Tensor::gaussian(Shape{2, 3}, rng, 0.3));
        Parameter pb("pb", Tensor::gaussian(Shape{2}, rng, 0.1));
        auto build = [&](Tape& t) {
            Var h = conv3d(t.param(x), t.param(w), t.param(b), {2, 2, 2});  // [3,2,3,3]
            h = gelu(h);
            h = conv1x1(h, t.param(pw), t.param(pb));  // [2,2,3,3]
            h = upsample2x_hw(h);                      // [2,2,6,6]
            Var tok = patchify(h, {2, 3, 3});          // [4 x 36]
            return mean_all(mul(tok, tok));
        };
        SeededRng pick(seed + 300);
        double err = finite_diff_check(build, {&x, &w, &b, &pw, &pb}, 5, 1e-5, pick);
        CHECK(err < kTol);
    }
}

TEST_CASE("gradcheck: assembly ops") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        SeededRng rng(seed * 3 + 2);
        Parameter a("a", Tensor::gaussian(Shape{3, 4}, rng));
        Parameter b("b", Tensor::gaussian(Shape{3, 2}, rng));
        Parameter c("c", Tensor::gaussian(Shape{2, 5, 5}, rng));
        Parameter vrow("vrow", Tensor::gaussian(Shape{6}, rng));
        auto build = [&](Tape& t) {
            Var cat = concat_cols(t.param(a), t.param(b));           // [3 x 6]
            cat = add_rowvec(cat, t.param(vrow));
            cat = add_cols(cat, t.param(b), 1);
            Var ct = transpose2d(cat);                               // [6 x 3]
            Var bt = broadcast_time(t.param(c), 3);                  // [2,3,5,5]
            Var btok = reshape(bt, Shape{6, 25});
            Var y = matmul(ct, btok, true, false);                   // [3 x 25]
            return mse(y, t.constant(Tensor::full(Shape{3, 25}, 0.2)));
        };
        SeededRng pick(seed + 400);
        double err = finite_diff_check(build, {&a, &b, &c, &vrow}, 5, 1e-5, pick);
        CHECK(err < kTol);
    }
}

TEST_CASE("adamw moves a single weight as hand-computed") {
    Parameter p("p", Tensor::scalar(1.0));
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    AdamW opt({&p}, cfg);
    p.grad.data[0] = 0.5;
    opt.step();
    // First step: mhat = g, vhat = g^2, update = lr * g/(|g|+eps) = lr (sign).
    CHECK(p.value.data[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("adamw decoupled weight decay acts without gradient") {
    Parameter p("p", Tensor::scalar(2.0));
    AdamWConfig cfg;
    cfg.lr = 0.5;
    cfg.weight_decay = 0.1;
    AdamW opt({&p}, cfg);
    p.zero_grad();
    opt.step();
    CHECK(p.value.data[0] == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0));
}

TEST_CASE("adamw training loop shrinks a quadratic") {
    SeededRng rng(21);
    Parameter p("p", Tensor::gaussian(Shape{8}, rng));
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;
    AdamW opt({&p}, cfg);
    double first = 0.0, last = 0.0;
    for (int it = 0; it < 200; ++it) {
        opt.zero_grad();
        Tape t;
        Var loss = mean_all(mul(t.param(p), t.param(p)));
        if (it == 0) first = loss.value().data[0];
        last = loss.value().data[0];
        t.backward(loss);
        opt.step();
    }
    CHECK(last < first * 0.01);
}
