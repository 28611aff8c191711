#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "keytailor/errors.hpp"
#include "keytailor/metrics.hpp"
#include "keytailor/pipeline.hpp"

using namespace kt;
namespace fs = std::filesystem;

namespace {

ConditionBundle small_bundle(uint64_t seed, const AblationConfig& abl = {}) {
    SyntheticSample sample = generate_scene(default_scene_spec(seed, 8, 32));
    InstructionTargets targets;
    targets.views = {"front", "back"};
    SamplerConfig sampler;
    return build_bundle(sample, targets, sampler, abl, seed);
}

Tensor forward_once(KeyTailorModel& model, const ConditionBundle& bundle, const Tensor& x_t,
                    double t, const AblationConfig& abl = {}) {
    Tape tape;
    return predict_velocity(tape, model, bundle, tape.constant(x_t), t, abl).value();
}

}  // namespace

TEST_CASE("flow interpolation and target velocity") {
    Tensor x0 = Tensor::full(Shape{2, 2}, 1.0);
    Tensor x1 = Tensor::full(Shape{2, 2}, 5.0);
    CHECK(flow_interpolate(x0, x1, 0.0).data[0] == 1.0);
    CHECK(flow_interpolate(x0, x1, 1.0).data[0] == 5.0);
    CHECK(flow_interpolate(x0, x1, 0.25).data[0] == doctest::Approx(2.0));
    CHECK(target_velocity(x0, x1).data[0] == 4.0);
    CHECK_THROWS_AS(flow_interpolate(x0, x1, -0.01), usage_error);
    CHECK_THROWS_AS(flow_interpolate(x0, x1, 1.01), usage_error);
    CHECK_THROWS_AS(target_velocity(x0, Tensor(Shape{2, 3})), shape_error);
}

TEST_CASE("timestep sampling is a logistic-normal in (0,1)") {
    SeededRng rng(5);
    size_t below = 0;
    const size_t n = 2000;
    for (size_t i = 0; i < n; ++i) {
        double t = sample_timestep(rng);
        CHECK(t > 0.0);
        CHECK(t < 1.0);
        if (t < 0.5) ++below;
    }
    // Median of sigmoid(gaussian) is 0.5.
    CHECK(std::abs(static_cast<double>(below) / n - 0.5) < 0.05);
}

TEST_CASE("model construction is seed-deterministic") {
    ModelConfig cfg;
    KeyTailorModel a(cfg, 123), b(cfg, 123), c(cfg, 124);
    ParamList pa, pb, pc;
    a.collect_all(pa);
    b.collect_all(pb);
    c.collect_all(pc);
    REQUIRE(pa.size() == pb.size());
    bool all_same = true, any_diff = false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (!bit_equal(pa[i]->value, pb[i]->value)) all_same = false;
        if (!bit_equal(pa[i]->value, pc[i]->value)) any_diff = true;
    }
    CHECK(all_same);
    CHECK(any_diff);
}

TEST_CASE("adapter deltas are exact no-ops at initialization") {
    ModelConfig cfg;
    KeyTailorModel model(cfg, 7);
    ConditionBundle bundle = small_bundle(7);
    SeededRng rng(8);
    Tensor x_t = Tensor::gaussian(bundle.x1.shape, rng);

    Tensor base = forward_once(model, bundle, x_t, 0.4);

    // Perturb every LoRA up-matrix and the keyframe query up-matrix. With the
    // zero down-matrices these must not change a single bit of the output.
    for (DiTBlock& blk : model.blocks) {
        for (LoraLinear* l : {&blk.sq, &blk.sk, &blk.sv, &blk.so, &blk.cq, &blk.ck, &blk.cv,
                              &blk.co, &blk.f1, &blk.f2})
            for (double& v : l->a.value.data) v += rng.gaussian();
        for (double& v : blk.a_key.value.data) v += rng.gaussian();
    }
    Tensor same = forward_once(model, bundle, x_t, 0.4);
    CHECK(bit_equal(base, same));

    // Making one down-matrix nonzero does change the output.
    model.blocks[0].sq.bdown.value.data[0] = 0.5;
    Tensor changed = forward_once(model, bundle, x_t, 0.4);
    CHECK_FALSE(bit_equal(base, changed));
}

TEST_CASE("training touches only trainable parameters") {
    ModelConfig cfg;
    KeyTailorModel model(cfg, 11);
    ConditionBundle bundle = small_bundle(11);
    uint64_t frozen_before = model.base_checksum();

    ParamList trainable;
    model.collect_trainable(trainable);
    for (Parameter* p : trainable) CHECK(p->trainable);
    ParamList all;
    model.collect_all(all);
    CHECK(all.size() > trainable.size());

    AdamW opt(trainable);
    SeededRng rng(12);
    for (int i = 0; i < 3; ++i) {
        double loss = train_step(model, opt, bundle, rng, {});
        CHECK(std::isfinite(loss));
        CHECK(loss > 0.0);
    }
    CHECK(model.base_checksum() == frozen_before);
    CHECK(opt.step_count() == 3);
}

TEST_CASE("euler integration reproduces closed-form fields") {
    SeededRng rng(13);
    Tensor x0 = Tensor::gaussian(Shape{4, 3}, rng);
    Tensor x1 = Tensor::gaussian(Shape{4, 3}, rng);
    // Constant field x1 - x0 lands exactly on x1 for any step count.
    for (size_t steps : {1u, 5u, 25u}) {
        Tensor got = denoise_with_field(x0, [&](const Tensor&, double) {
            return target_velocity(x0, x1);
        }, steps);
        for (size_t i = 0; i < got.size(); ++i)
            CHECK(got.data[i] == doctest::Approx(x1.data[i]).epsilon(1e-12));
    }
    // Linear decay u = -x: Euler gives x0 * (1 - dt)^k.
    const size_t steps = 10;
    Tensor got = denoise_with_field(x0, [](const Tensor& x, double) {
        Tensor u(x.shape);
        for (size_t i = 0; i < x.size(); ++i) u.data[i] = -x.data[i];
        return u;
    }, steps);
    double factor = std::pow(1.0 - 1.0 / steps, steps);
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(got.data[i] == doctest::Approx(x0.data[i] * factor).epsilon(1e-12));
}

TEST_CASE("denoising is deterministic in the seed") {
    ModelConfig cfg;
    KeyTailorModel model(cfg, 21);
    ConditionBundle bundle = small_bundle(21);
    Tensor a = denoise(model, bundle, 2, 99, {});
    Tensor b = denoise(model, bundle, 2, 99, {});
    CHECK(bit_equal(a, b));
    Tensor c = denoise(model, bundle, 2, 100, {});
    CHECK_FALSE(bit_equal(a, c));
    CHECK(a.shape == bundle.x1.shape);
    CHECK_THROWS_AS(denoise(model, bundle, 0, 99, {}), config_error);
}

TEST_CASE("checkpoint round trip restores every parameter bit") {
    fs::path dir = fs::temp_directory_path() / "kt_ckpt_test";
    fs::create_directories(dir);
    std::string path = (dir / "model.ktcp").string();

    ModelConfig cfg;
    KeyTailorModel model(cfg, 31);
    // Make the trainable state non-trivial before saving.
    ParamList trainable;
    model.collect_trainable(trainable);
    SeededRng rng(32);
    for (Parameter* p : trainable)
        for (double& v : p->value.data) v += 0.01 * rng.gaussian();
    // Persistence is f32; quantize in place so the round trip is bit-exact.
    ParamList everything;
    model.collect_all(everything);
    for (Parameter* p : everything) p->value.quantize_f32();

    std::string fp = cfg.fingerprint_text();
    save_checkpoint(path, model, fp);

    KeyTailorModel other(cfg, 31);
    load_checkpoint(path, other, fp);
    ParamList pa, pb;
    model.collect_all(pa);
    other.collect_all(pb);
    for (size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(pa[i]->value, pb[i]->value));

    // Fingerprint mismatch is rejected.
    KeyTailorModel third(cfg, 31);
    CHECK_THROWS_AS(load_checkpoint(path, third, fp + ";extra"), format_error);

    // A differently-sized model is rejected by the parameter count.
    ModelConfig small = cfg;
    small.blocks = 1;
    KeyTailorModel tiny(small, 31);
    CHECK_THROWS_AS(load_checkpoint(path, tiny, fp), format_error);

    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ktcp").string(), model, fp), io_error);
    fs::remove_all(dir);
}

TEST_CASE("ablation tags and probed activations") {
    AblationConfig abl;
    CHECK(abl.tag() == "full");
    abl.no_cbdo = true;
    abl.keyframes_1 = true;
    CHECK(abl.tag() == "no-cbdo,keyframes-1");

    ModelConfig cfg;
    KeyTailorModel model(cfg, 41);
    ConditionBundle bundle = small_bundle(41);
    SeededRng rng(42);
    Tensor x_t = Tensor::gaussian(bundle.x1.shape, rng);
    ActivationProbe probe;
    {
        Tape tape;
        predict_velocity(tape, model, bundle, tape.constant(x_t), 0.3, {}, &probe);
    }
    for (const char* key : {"l_p", "l_bg", "lbar_g", "lbar_bg", "guidance", "G", "u"})
        CHECK(probe.count(key) == 1);

    // no-keybg collapses lbar_bg onto l_bg.
    ActivationProbe p2;
    AblationConfig nk;
    nk.no_keybg = true;
    {
        Tape tape;
        predict_velocity(tape, model, bundle, tape.constant(x_t), 0.3, nk, &p2);
    }
    CHECK(bit_equal(p2["lbar_bg"], p2["l_bg"]));
    CHECK_FALSE(bit_equal(probe["lbar_bg"], probe["l_bg"]));

    // no-qkey changes the prediction; the guidance tokens are unaffected.
    ActivationProbe p3;
    AblationConfig nq;
    nq.no_qkey = true;
    {
        Tape tape;
        predict_velocity(tape, model, bundle, tape.constant(x_t), 0.3, nq, &p3);
    }
    CHECK(bit_equal(p3["guidance"], probe["guidance"]));
}

TEST_CASE("bundle ablations alter the keyframe choice") {
    SyntheticSample sample = generate_scene(default_scene_spec(51, 8, 32));
    InstructionTargets targets;
    targets.views = {"front", "back"};
    SamplerConfig sampler;

    AblationConfig k1;
    k1.keyframes_1 = true;
    ConditionBundle b1 = build_bundle(sample, targets, sampler, k1, 51);
    REQUIRE(b1.keyframes.selected.size() == 1);
    CHECK(b1.keyframes.selected[0].index == 0);

    AblationConfig ni;
    ni.no_iks = true;
    ConditionBundle b2 = build_bundle(sample, targets, sampler, ni, 51);
    ConditionBundle b2b = build_bundle(sample, targets, sampler, ni, 51);
    CHECK(b2.keyframes.indices() == b2b.keyframes.indices());
    CHECK(b2.keyframes.selected.size() <= sampler.k_max);

    AblationConfig ng;
    ng.no_gdde = true;
    ConditionBundle b3 = build_bundle(sample, targets, sampler, ng, 51);
    CHECK(bit_equal(b3.l_g, encode_image(sample.garment_ref)));
    ConditionBundle full = build_bundle(sample, targets, sampler, {}, 51);
    CHECK_FALSE(bit_equal(full.l_g, b3.l_g));
}

TEST_CASE("model gradients agree with finite differences") {
    ModelConfig cfg;
    KeyTailorModel model(cfg, 61);
    ConditionBundle bundle = small_bundle(61);
    // Put the adapters in a generic state so their gradients are non-trivial.
    ParamList trainable;
    model.collect_trainable(trainable);
    SeededRng nudge(62);
    for (Parameter* p : trainable)
        for (double& v : p->value.data) v += 0.02 * nudge.gaussian();

    SeededRng rng(63);
    double t = 0.35;
    Tensor x0 = Tensor::gaussian(bundle.x1.shape, rng);
    Tensor x_t = flow_interpolate(x0, bundle.x1, t);
    Tensor v = target_velocity(x0, bundle.x1);
    size_t C = v.shape[0], sites = v.size() / C;
    Tensor v_tok(Shape{sites, C});
    for (size_t c = 0; c < C; ++c)
        for (size_t s = 0; s < sites; ++s) v_tok.at2(s, c) = v.data[c * sites + s];

    // Representative slice of the trainable surface: adapters, the keyframe
    // query, a guider, distillation, and fusion.
    ParamList sample_params{&model.blocks[0].sq.a,    &model.blocks[0].sq.bdown,
                            &model.blocks[1].f2.bdown, &model.blocks[0].a_key,
                            &model.blocks[0].b_key,    &model.pose_guider.head_w,
                            &model.mask_guider.c1.w,   &model.distill.w1,
                            &model.fusion.r};
    SeededRng check(64);
    double err = finite_diff_check(
        [&](Tape& tape) {
            Var u = predict_velocity(tape, model, bundle, tape.constant(x_t), t, {});
            return mse(u, tape.constant(v_tok));
        },
        sample_params, 2, 1e-4, check);
    CHECK(err < 1e-3);
}
