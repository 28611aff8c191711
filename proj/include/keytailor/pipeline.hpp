#pragma once

#include <functional>
#include <map>
#include <string>

#include "keytailor/dit.hpp"
#include "keytailor/synth.hpp"

namespace kt {

/// Everything about one sample the model conditions on; fixed across
/// training steps and denoising steps.
struct ConditionBundle {
    KeyframeSet keyframes;
    Tensor pose_maps;         // [3,T,H,W] guider input
    Tensor agnostic;          // [3,T,H,W] guider + encoder input
    Tensor l_m;               // [1,T',h,w] pooled garment masks
    Tensor l_g;               // [C,h,w] garment condition latent
    std::vector<Tensor> keyframe_garment_latents;
    Tensor l_bg_video;        // [C,T',h,w] encoded agnostic video
    Tensor l_key_max;         // [C,h,w] best-background keyframe latent
    Tensor pooled_key;        // [C] pooled mean keyframe garment latent
    Tensor x1;                // [C,T',h,w] target latent (encoded source video)
};

/// Builds the bundle from a sample, honouring the sampling ablations
/// (no-iks, keyframes-1) and the conditioning ablations (no-gdde, no-keybg).
ConditionBundle build_bundle(const SyntheticSample& sample, const InstructionTargets& targets,
                             const SamplerConfig& sampler, const AblationConfig& abl,
                             uint64_t seed);

/// Optional probe: when set, every named intermediate activation is recorded
/// (used by the ablation activation-diff checks).
using ActivationProbe = std::map<std::string, Tensor>;

/// Full differentiable forward pass: returns the predicted velocity tokens
/// u [N x C] for the noised latent x_t at time t.
Var predict_velocity(Tape& tape, KeyTailorModel& model, const ConditionBundle& bundle,
                     Var x_t, double t, const AblationConfig& abl,
                     ActivationProbe* probe = nullptr);

/// One optimizer step on one sample; returns the flow-matching loss.
double train_step(KeyTailorModel& model, AdamW& opt, const ConditionBundle& bundle,
                  SeededRng& rng, const AblationConfig& abl);

/// Euler integration from seeded noise; deterministic given the seed.
Tensor denoise(KeyTailorModel& model, const ConditionBundle& bundle, size_t steps, uint64_t seed,
               const AblationConfig& abl);

/// Hook for testing denoise against the closed-form linear field:
/// u(x, t) = x1 - x0 regardless of the model.
Tensor denoise_with_field(const Tensor& x0,
                          const std::function<Tensor(const Tensor&, double)>& field, size_t steps);

}  // namespace kt
