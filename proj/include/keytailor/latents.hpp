#pragma once

#include <vector>

#include "keytailor/keyframe.hpp"
#include "keytailor/nn.hpp"
#include "keytailor/tensor.hpp"

namespace kt {

// Resolution contract: images at /8 spatial with C = 3*8*8 = 192 latent
// channels (orthonormal patch projection, exactly invertible); videos keep
// every 4th frame, so T' = ceil(T/4). Guiders reach /16 spatial and upsample
// back to /8 so every latent feeding fusion shares one grid.
inline constexpr size_t kLatentChannels = 192;
inline constexpr size_t kSpatialPatch = 8;
inline constexpr size_t kFrameStride = 4;

Tensor encode_image(const Tensor& image);    // [3,H,W] -> [192,H/8,W/8]
Tensor decode_image(const Tensor& latent);   // exact inverse
Tensor encode_video(const Tensor& video);    // [3,T,H,W] -> [192,T',H/8,W/8]
Tensor decode_video(const Tensor& latent);   // -> [3,T',H,W] (kept frames)

/// Subsample every kFrameStride-th frame: [*,T,H,W] -> [*,T',H,W].
Tensor subsample_frames(const Tensor& video);

/// Feathered mask composite: garment over agnostic with a 2-pixel linear
/// ramp outside the mask boundary.
Tensor first_frame_tryon(const Tensor& agnostic_frame, const Tensor& garment_image,
                         const Tensor& garment_mask);

/// Masks averaged onto the latent grid: [T,H,W] -> [1,T',H/8,W/8].
Tensor pooled_mask_latent(const Tensor& masks);

/// Convex fusion of the video background latent with the best keyframe
/// background latent (broadcast over time).
Tensor cbdo_fuse(const Tensor& l_bg, const Tensor& l_key_max, double alpha = 0.3);

std::vector<Tensor> extract_keyframe_garment_latents(const KeyframeSet& keyframes,
                                                     const std::vector<Frame>& frames);

/// Encodes the background (human region blanked) of the keyframe with the
/// highest background-integrity score; ties break to the lowest index.
Tensor background_keyframe_latent(const KeyframeSet& keyframes, const std::vector<Frame>& frames);

/// Two 1x1 convolutions then a channel layernorm, mapping
/// concat(L_g, mean of keyframe latents) back to the L_g shape.
struct DistillComponent {
    Parameter w1, b1, w2, b2;
    LayerNormLayer ln;

    DistillComponent() = default;
    explicit DistillComponent(size_t channels);

    Var apply(Tape& tape, Var l_g, Var mean_keyframes);
    void collect(ParamList& out);
};

/// Convenience: mean of keyframe latents then DistillComponent.
Var gdde_distill(Tape& tape, DistillComponent& d, Var l_g, const std::vector<Tensor>& keyframe_latents);

/// Three-step guidance fusion. The projection is bias-free, initialized as
/// identity on the pose-latent sub-block and small gaussian elsewhere.
struct FusionComponent {
    Parameter r;  // [C x (C + 1 + C)]

    FusionComponent() = default;
    FusionComponent(size_t channels, SeededRng& rng);

    /// l_p [C,T',h,w], l_m [1,T',h,w], lbar_g [C,h,w], noise [C,T',h,w],
    /// lbar_bg [C,T',h,w] -> guidance tokens [N x 2C], N = T'*h*w.
    Var apply(Tape& tape, Var l_p, Var l_m, Var lbar_g, Var noise, Var lbar_bg);
    void collect(ParamList& out);
};

/// Fusion with an explicit projection (used for the frozen w/o-fusion path)
/// and an optional bypass of the background addto step.
Var fuse_tokens(Tape& tape, Var proj, Var l_p, Var l_m, Var lbar_g, Var noise, Var lbar_bg,
                bool skip_addto);

}  // namespace kt
