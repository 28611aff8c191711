#include "keytailor/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "keytailor/errors.hpp"

namespace kt {
namespace {

constexpr double kCbdoAlpha = 0.3;

// Velocity preconditioning floor: the model predicts a clean-sample estimate
// G, and the velocity is (G - x_t) / max(1 - t, kSigmaFloor).
constexpr double kSigmaFloor = 0.05;

Tensor grid_tokens(const Tensor& grid) {
    size_t C = grid.shape[0], sites = grid.size() / C;
    Tensor tok(Shape{sites, C});
    for (size_t c = 0; c < C; ++c)
        for (size_t s = 0; s < sites; ++s) tok.at2(s, c) = grid.data[c * sites + s];
    return tok;
}

Tensor tokens_grid(const Tensor& tok, const Shape& grid_shape) {
    size_t C = grid_shape[0], sites = shape_numel(grid_shape) / C;
    if (tok.shape != Shape{sites, C})
        throw shape_error("tokens_grid: tokens " + shape_str(tok.shape) + " do not match grid " +
                          shape_str(grid_shape));
    Tensor grid(grid_shape);
    for (size_t c = 0; c < C; ++c)
        for (size_t s = 0; s < sites; ++s) grid.data[c * sites + s] = tok.at2(s, c);
    return grid;
}

Tensor sinusoid_embedding(double t, size_t d) {
    Tensor e(Shape{d});
    double pos = t * 1000.0;
    size_t half = d / 2;
    for (size_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                               static_cast<double>(half));
        e.data[2 * i] = std::sin(pos * freq);
        e.data[2 * i + 1] = std::cos(pos * freq);
    }
    return e;
}

Tensor frame_of(const Tensor& video, size_t f) {
    size_t T = video.shape[1], H = video.shape[2], W = video.shape[3];
    Tensor out(Shape{3, H, W});
    for (size_t c = 0; c < 3; ++c)
        std::copy_n(video.data.data() + (c * T + f) * H * W, H * W, out.data.data() + c * H * W);
    return out;
}

}  // namespace

ConditionBundle build_bundle(const SyntheticSample& sample, const InstructionTargets& targets,
                             const SamplerConfig& sampler, const AblationConfig& abl,
                             uint64_t seed) {
    ConditionBundle b;
    const std::vector<Frame>& frames = sample.frames;
    std::vector<SkeletonPose> anchors;
    for (const std::string& t : targets.all()) anchors.push_back(anchor_pose(t));

    if (abl.keyframes_1) {
        b.keyframes.selected.push_back(frame_score(frames.front(), anchors, targets, sampler));
    } else if (abl.no_iks) {
        // Seeded random pick of up to k_max distinct frames.
        SeededRng rng(seed ^ 0xABBAull);
        std::vector<size_t> pool(frames.size());
        for (size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        for (size_t k = 0; k < sampler.k_max && !pool.empty(); ++k) {
            size_t pick = rng.below(pool.size());
            b.keyframes.selected.push_back(
                frame_score(frames[pool[pick]], anchors, targets, sampler));
            pool.erase(pool.begin() + static_cast<long>(pick));
        }
    } else {
        b.keyframes = select_keyframes(frames, targets, sampler);
        if (b.keyframes.selected.empty())
            // Every frame was occlusion-filtered; fall back to the first frame
            // so the pipeline still has a conditioning anchor.
            b.keyframes.selected.push_back(frame_score(frames.front(), anchors, targets, sampler));
    }

    b.pose_maps = sample.pose_maps;
    b.agnostic = sample.agnostic;
    b.l_m = pooled_mask_latent(sample.garment_masks);
    if (abl.no_gdde) {
        b.l_g = encode_image(sample.garment_ref);
    } else {
        Tensor tryon = first_frame_tryon(frame_of(sample.agnostic, 0), sample.garment_ref,
                                         sample.frames.front().garment_mask);
        b.l_g = encode_image(tryon);
    }
    b.keyframe_garment_latents = extract_keyframe_garment_latents(b.keyframes, frames);
    b.l_bg_video = encode_video(sample.agnostic);
    b.l_key_max = background_keyframe_latent(b.keyframes, frames);

    Tensor mean(b.keyframe_garment_latents.front().shape);
    for (const Tensor& k : b.keyframe_garment_latents)
        for (size_t i = 0; i < mean.size(); ++i) mean.data[i] += k.data[i];
    for (double& v : mean.data) v /= static_cast<double>(b.keyframe_garment_latents.size());
    size_t C = mean.shape[0], sites = mean.size() / C;
    b.pooled_key = Tensor(Shape{C});
    for (size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (size_t s = 0; s < sites; ++s) acc += mean.data[c * sites + s];
        b.pooled_key.data[c] = acc / static_cast<double>(sites);
    }

    b.x1 = encode_video(sample.video);
    return b;
}

Var predict_velocity(Tape& tape, KeyTailorModel& model, const ConditionBundle& bundle,
                     Var x_t, double t, const AblationConfig& abl, ActivationProbe* probe) {
    auto record = [&](const char* name, const Var& v) {
        if (probe) (*probe)[name] = v.value();
    };

    Var l_p = model.pose_guider.apply(tape, tape.constant(bundle.pose_maps));
    record("l_p", l_p);
    Var l_bg = add(tape.constant(bundle.l_bg_video),
                   model.mask_guider.apply(tape, tape.constant(bundle.agnostic)));
    record("l_bg", l_bg);

    Var lbar_g = (abl.no_distill || abl.no_gdde)
                     ? tape.constant(bundle.l_g)
                     : gdde_distill(tape, model.distill, tape.constant(bundle.l_g),
                                    bundle.keyframe_garment_latents);
    record("lbar_g", lbar_g);

    size_t Tp = bundle.l_bg_video.shape[1];
    Var lbar_bg = l_bg;
    if (!abl.no_keybg) {
        Var key = broadcast_time(tape.constant(bundle.l_key_max), Tp);
        lbar_bg = add(scale(l_bg, kCbdoAlpha), scale(key, 1.0 - kCbdoAlpha));
    }
    record("lbar_bg", lbar_bg);

    Var l_m = tape.constant(bundle.l_m);
    Var proj = abl.no_fusion ? tape.param(model.fixed_fusion) : tape.param(model.fusion.r);
    Var guidance = fuse_tokens(tape, proj, l_p, l_m, lbar_g, x_t, lbar_bg, abl.no_cbdo);
    record("guidance", guidance);

    Var h = model.embed.apply(tape, guidance);  // [N x d]
    Tensor te_in = sinusoid_embedding(t, model.cfg.width);
    Tensor te = matmul_plain(Tensor(Shape{1, model.cfg.width}, std::move(te_in.data)),
                             model.time_w.value, false, true);
    for (size_t i = 0; i < te.size(); ++i) te.data[i] += model.time_b.value.data[i];
    h = add_rowvec(h, tape.constant(Tensor(Shape{model.cfg.width}, std::move(te.data))));

    const Shape& gs = lbar_g.shape();  // [C,h,w]
    Var g_tokens = patchify(reshape(lbar_g, Shape{gs[0], 1, gs[1], gs[2]}), {1, 1, 1});
    std::optional<Var> pooled;
    if (!abl.no_qkey) pooled = tape.constant(bundle.pooled_key);

    for (DiTBlock& blk : model.blocks)
        h = blk.apply(tape, h, g_tokens, pooled, model.cfg.heads);

    Var G = add_rowvec(matmul(h, tape.param(model.head_w), false, true),
                       tape.param(model.head_b));
    record("G", G);

    Var x_tokens = patchify(x_t, {1, 1, 1});
    Var u = scale(sub(G, x_tokens), 1.0 / std::max(1.0 - t, kSigmaFloor));
    record("u", u);
    return u;
}

double train_step(KeyTailorModel& model, AdamW& opt, const ConditionBundle& bundle,
                  SeededRng& rng, const AblationConfig& abl) {
    double t = sample_timestep(rng);
    Tensor x0 = Tensor::gaussian(bundle.x1.shape, rng);
    Tensor x_t = flow_interpolate(x0, bundle.x1, t);
    Tensor v_tokens = grid_tokens(target_velocity(x0, bundle.x1));

    Tape tape;
    Var u = predict_velocity(tape, model, bundle, tape.constant(x_t), t, abl);
    Var loss = mse(u, tape.constant(v_tokens));
    double value = loss.value().data[0];
    if (!std::isfinite(value)) throw numeric_error("train_step: non-finite loss");
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    return value;
}

Tensor denoise(KeyTailorModel& model, const ConditionBundle& bundle, size_t steps, uint64_t seed,
               const AblationConfig& abl) {
    if (steps < 1) throw config_error("denoise: steps must be >= 1");
    SeededRng rng(seed);
    Tensor x = Tensor::gaussian(bundle.x1.shape, rng);
    double dt = 1.0 / static_cast<double>(steps);
    for (size_t i = 0; i < steps; ++i) {
        double t = static_cast<double>(i) * dt;
        Tape tape;
        Var u = predict_velocity(tape, model, bundle, tape.constant(x), t, abl);
        Tensor ugrid = tokens_grid(u.value(), x.shape);
        for (size_t j = 0; j < x.size(); ++j) x.data[j] += dt * ugrid.data[j];
    }
    if (!x.all_finite()) throw numeric_error("denoise: non-finite latent");
    return x;
}

Tensor denoise_with_field(const Tensor& x0,
                          const std::function<Tensor(const Tensor&, double)>& field, size_t steps) {
    Tensor x = x0;
    double dt = 1.0 / static_cast<double>(steps);
    for (size_t i = 0; i < steps; ++i) {
        Tensor u = field(x, static_cast<double>(i) * dt);
        require_same_shape(u, x, "denoise_with_field");
        for (size_t j = 0; j < x.size(); ++j) x.data[j] += dt * u.data[j];
    }
    return x;
}

}  // namespace kt
