#include "keytailor/latents.hpp"

#include <algorithm>
#include <cmath>

#include "keytailor/errors.hpp"

namespace kt {
namespace {

// Fixed orthonormal projection for the toy codec, built once by Gram-Schmidt
// over a seeded gaussian matrix. Rows are orthonormal, so the codec is exact.
const Tensor& codec_projection() {
    static const Tensor q = [] {
        const size_t n = kLatentChannels;
        SeededRng rng(0xC0DEC);
        Tensor m = Tensor::gaussian(Shape{n, n}, rng);
        for (size_t i = 0; i < n; ++i) {
            double* row = m.data.data() + i * n;
            for (size_t j = 0; j < i; ++j) {
                const double* prev = m.data.data() + j * n;
                double dot = 0.0;
                for (size_t k = 0; k < n; ++k) dot += row[k] * prev[k];
                for (size_t k = 0; k < n; ++k) row[k] -= dot * prev[k];
            }
            double norm = 0.0;
            for (size_t k = 0; k < n; ++k) norm += row[k] * row[k];
            norm = std::sqrt(norm);
            if (norm < 1e-8) throw numeric_error("codec projection: degenerate row");
            for (size_t k = 0; k < n; ++k) row[k] /= norm;
        }
        return m;
    }();
    return q;
}

Tensor image_tokens(const Tensor& image) {
    // [3,H,W] viewed as [3,1,H,W], patchified to [H/8*W/8 x 192].
    size_t H = image.shape[1], W = image.shape[2];
    size_t hb = H / kSpatialPatch, wb = W / kSpatialPatch;
    Tensor tok(Shape{hb * wb, kLatentChannels});
    for (size_t bh = 0; bh < hb; ++bh)
        for (size_t bw = 0; bw < wb; ++bw) {
            size_t n = bh * wb + bw;
            size_t j = 0;
            for (size_t c = 0; c < 3; ++c)
                for (size_t dh = 0; dh < kSpatialPatch; ++dh)
                    for (size_t dw = 0; dw < kSpatialPatch; ++dw, ++j)
                        tok.at2(n, j) = image.at3(c, bh * kSpatialPatch + dh, bw * kSpatialPatch + dw);
        }
    return tok;
}

Tensor tokens_to_image(const Tensor& tok, size_t H, size_t W) {
    size_t hb = H / kSpatialPatch, wb = W / kSpatialPatch;
    Tensor img(Shape{3, H, W});
    for (size_t bh = 0; bh < hb; ++bh)
        for (size_t bw = 0; bw < wb; ++bw) {
            size_t n = bh * wb + bw;
            size_t j = 0;
            for (size_t c = 0; c < 3; ++c)
                for (size_t dh = 0; dh < kSpatialPatch; ++dh)
                    for (size_t dw = 0; dw < kSpatialPatch; ++dw, ++j)
                        img.at3(c, bh * kSpatialPatch + dh, bw * kSpatialPatch + dw) = tok.at2(n, j);
        }
    return img;
}

}  // namespace

Tensor encode_image(const Tensor& image) {
    if (image.ndim() != 3 || image.shape[0] != 3 || image.shape[1] % kSpatialPatch != 0 ||
        image.shape[2] % kSpatialPatch != 0)
        throw shape_error("encode_image: need [3,H,W] with H,W divisible by 8, got " +
                          shape_str(image.shape));
    size_t h = image.shape[1] / kSpatialPatch, w = image.shape[2] / kSpatialPatch;
    Tensor lat_tok = matmul_plain(image_tokens(image), codec_projection(), false, true);
    Tensor latent(Shape{kLatentChannels, h, w});
    for (size_t s = 0; s < h * w; ++s)
        for (size_t c = 0; c < kLatentChannels; ++c) latent.data[c * h * w + s] = lat_tok.at2(s, c);
    return latent;
}

Tensor decode_image(const Tensor& latent) {
    if (latent.ndim() != 3 || latent.shape[0] != kLatentChannels)
        throw shape_error("decode_image: need [192,h,w], got " + shape_str(latent.shape));
    size_t h = latent.shape[1], w = latent.shape[2];
    Tensor lat_tok(Shape{h * w, kLatentChannels});
    for (size_t s = 0; s < h * w; ++s)
        for (size_t c = 0; c < kLatentChannels; ++c) lat_tok.at2(s, c) = latent.data[c * h * w + s];
    Tensor tok = matmul_plain(lat_tok, codec_projection(), false, false);
    return tokens_to_image(tok, h * kSpatialPatch, w * kSpatialPatch);
}

Tensor subsample_frames(const Tensor& video) {
    if (video.ndim() != 4) throw shape_error("subsample_frames: need 4-D, got " + shape_str(video.shape));
    size_t C = video.shape[0], T = video.shape[1], H = video.shape[2], W = video.shape[3];
    size_t Tp = (T + kFrameStride - 1) / kFrameStride;
    Tensor out(Shape{C, Tp, H, W});
    for (size_t c = 0; c < C; ++c)
        for (size_t f = 0; f < Tp; ++f)
            std::copy_n(video.data.data() + (c * T + f * kFrameStride) * H * W, H * W,
                        out.data.data() + (c * Tp + f) * H * W);
    return out;
}

Tensor encode_video(const Tensor& video) {
    Tensor sub = subsample_frames(video);
    size_t Tp = sub.shape[1], H = sub.shape[2], W = sub.shape[3];
    size_t h = H / kSpatialPatch, w = W / kSpatialPatch;
    Tensor out(Shape{kLatentChannels, Tp, h, w});
    for (size_t f = 0; f < Tp; ++f) {
        Tensor frame(Shape{3, H, W});
        for (size_t c = 0; c < 3; ++c)
            std::copy_n(sub.data.data() + (c * Tp + f) * H * W, H * W,
                        frame.data.data() + c * H * W);
        Tensor lat = encode_image(frame);
        for (size_t c = 0; c < kLatentChannels; ++c)
            std::copy_n(lat.data.data() + c * h * w, h * w,
                        out.data.data() + (c * Tp + f) * h * w);
    }
    return out;
}

Tensor decode_video(const Tensor& latent) {
    if (latent.ndim() != 4 || latent.shape[0] != kLatentChannels)
        throw shape_error("decode_video: need [192,T',h,w], got " + shape_str(latent.shape));
    size_t Tp = latent.shape[1], h = latent.shape[2], w = latent.shape[3];
    size_t H = h * kSpatialPatch, W = w * kSpatialPatch;
    Tensor out(Shape{3, Tp, H, W});
    for (size_t f = 0; f < Tp; ++f) {
        Tensor lat(Shape{kLatentChannels, h, w});
        for (size_t c = 0; c < kLatentChannels; ++c)
            std::copy_n(latent.data.data() + (c * Tp + f) * h * w, h * w,
                        lat.data.data() + c * h * w);
        Tensor frame = decode_image(lat);
        for (size_t c = 0; c < 3; ++c)
            std::copy_n(frame.data.data() + c * H * W, H * W,
                        out.data.data() + (c * Tp + f) * H * W);
    }
    return out;
}

Tensor first_frame_tryon(const Tensor& agnostic_frame, const Tensor& garment_image,
                         const Tensor& garment_mask) {
    require_same_shape(agnostic_frame, garment_image, "first_frame_tryon");
    if (garment_mask.ndim() != 2 || garment_mask.shape[0] != agnostic_frame.shape[1] ||
        garment_mask.shape[1] != agnostic_frame.shape[2])
        throw shape_error("first_frame_tryon: mask " + shape_str(garment_mask.shape) +
                          " does not match image " + shape_str(agnostic_frame.shape));
    size_t H = garment_mask.shape[0], W = garment_mask.shape[1];
    Tensor weight(Shape{H, W});
    for (long y = 0; y < static_cast<long>(H); ++y)
        for (long x = 0; x < static_cast<long>(W); ++x) {
            if (garment_mask.at2(y, x) > 0.5) {
                weight.at2(y, x) = 1.0;
                continue;
            }
            // Outside: linear 2-pixel feather from the nearest mask pixel.
            double best = 1e9;
            for (long dy = -2; dy <= 2; ++dy)
                for (long dx = -2; dx <= 2; ++dx) {
                    long ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<long>(H) || nx >= static_cast<long>(W))
                        continue;
                    if (garment_mask.at2(ny, nx) > 0.5)
                        best = std::min(best, std::sqrt(static_cast<double>(dy * dy + dx * dx)));
                }
            weight.at2(y, x) = std::max(0.0, 1.0 - best / 2.0);
        }
    Tensor out(agnostic_frame.shape);
    for (size_t c = 0; c < 3; ++c)
        for (size_t i = 0; i < H * W; ++i) {
            double w = weight.data[i];
            out.data[c * H * W + i] =
                w * garment_image.data[c * H * W + i] + (1.0 - w) * agnostic_frame.data[c * H * W + i];
        }
    return out;
}

Tensor pooled_mask_latent(const Tensor& masks) {
    if (masks.ndim() != 3) throw shape_error("pooled_mask_latent: need [T,H,W], got " + shape_str(masks.shape));
    size_t T = masks.shape[0], H = masks.shape[1], W = masks.shape[2];
    size_t Tp = (T + kFrameStride - 1) / kFrameStride;
    size_t h = H / kSpatialPatch, w = W / kSpatialPatch;
    Tensor out(Shape{1, Tp, h, w});
    for (size_t f = 0; f < Tp; ++f)
        for (size_t bh = 0; bh < h; ++bh)
            for (size_t bw = 0; bw < w; ++bw) {
                double acc = 0.0;
                for (size_t dh = 0; dh < kSpatialPatch; ++dh)
                    for (size_t dw = 0; dw < kSpatialPatch; ++dw)
                        acc += masks.at3(f * kFrameStride, bh * kSpatialPatch + dh,
                                         bw * kSpatialPatch + dw);
                out.at4(0, f, bh, bw) = acc / static_cast<double>(kSpatialPatch * kSpatialPatch);
            }
    return out;
}

Tensor cbdo_fuse(const Tensor& l_bg, const Tensor& l_key_max, double alpha) {
    if (l_bg.ndim() != 4 || l_key_max.ndim() != 3 || l_bg.shape[0] != l_key_max.shape[0] ||
        l_bg.shape[2] != l_key_max.shape[1] || l_bg.shape[3] != l_key_max.shape[2])
        throw shape_error("cbdo_fuse: cannot broadcast " + shape_str(l_key_max.shape) + " over " +
                          shape_str(l_bg.shape));
    size_t C = l_bg.shape[0], Tp = l_bg.shape[1], hw = l_bg.shape[2] * l_bg.shape[3];
    Tensor out(l_bg.shape);
    for (size_t c = 0; c < C; ++c)
        for (size_t f = 0; f < Tp; ++f)
            for (size_t s = 0; s < hw; ++s)
                out.data[(c * Tp + f) * hw + s] = alpha * l_bg.data[(c * Tp + f) * hw + s] +
                                                  (1.0 - alpha) * l_key_max.data[c * hw + s];
    return out;
}

std::vector<Tensor> extract_keyframe_garment_latents(const KeyframeSet& keyframes,
                                                     const std::vector<Frame>& frames) {
    if (keyframes.selected.empty())
        throw usage_error("extract_keyframe_garment_latents: empty keyframe set");
    std::vector<Tensor> out;
    for (const FrameScore& s : keyframes.selected) {
        const Frame& f = frames.at(static_cast<size_t>(s.index));
        Tensor masked(f.pixels.shape);
        size_t hw = f.garment_mask.size();
        for (size_t c = 0; c < 3; ++c)
            for (size_t i = 0; i < hw; ++i)
                masked.data[c * hw + i] = f.pixels.data[c * hw + i] * f.garment_mask.data[i];
        out.push_back(encode_image(masked));
    }
    return out;
}

Tensor background_keyframe_latent(const KeyframeSet& keyframes, const std::vector<Frame>& frames) {
    if (keyframes.selected.empty())
        throw usage_error("background_keyframe_latent: empty keyframe set");
    int best_index = -1;
    double best_score = -1.0;
    for (const FrameScore& s : keyframes.selected) {
        const Frame& f = frames.at(static_cast<size_t>(s.index));
        double score = background_integrity_score(f);
        if (score > best_score || (score == best_score && s.index < best_index)) {
            best_score = score;
            best_index = s.index;
        }
    }
    const Frame& f = frames.at(static_cast<size_t>(best_index));
    Tensor bg(f.pixels.shape);
    size_t hw = f.human_mask.size();
    for (size_t c = 0; c < 3; ++c)
        for (size_t i = 0; i < hw; ++i)
            bg.data[c * hw + i] = f.pixels.data[c * hw + i] * (1.0 - f.human_mask.data[i]);
    return encode_image(bg);
}

// ---- GDDE -----------------------------------------------------------------

DistillComponent::DistillComponent(size_t channels)
    : w1("distill.w1", Tensor(Shape{channels, 2 * channels})),
      b1("distill.b1", Tensor(Shape{channels})),
      w2("distill.w2", Tensor(Shape{channels, channels})),
      b2("distill.b2", Tensor(Shape{channels})),
      ln("distill.ln", channels) {
    // Identity-flavoured start: first conv averages the two inputs, second is
    // the identity, so the distilled latent begins close to L_g.
    for (size_t c = 0; c < channels; ++c) {
        w1.value.at2(c, c) = 0.5;
        w1.value.at2(c, channels + c) = 0.5;
        w2.value.at2(c, c) = 1.0;
    }
}

Var DistillComponent::apply(Tape& tape, Var l_g, Var mean_keyframes) {
    require_same_shape(l_g.value(), mean_keyframes.value(), "gdde_distill");
    Var cat = concat_channels(l_g, mean_keyframes);  // [2C,h,w]
    Var h = conv1x1(cat, tape.param(w1), tape.param(b1));
    h = conv1x1(h, tape.param(w2), tape.param(b2));
    // Channel layernorm: move channels to the last axis, normalize, move back.
    const Shape& s = h.shape();  // [C,h,w]
    size_t C = s[0], sites = s[1] * s[2];
    Var flat = reshape(h, Shape{C, sites});
    Var t = transpose2d(flat);  // [sites x C]
    t = ln.apply(tape, t);
    Var back = transpose2d(t);
    return reshape(back, s);
}

void DistillComponent::collect(ParamList& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
    ln.collect(out);
}

Var gdde_distill(Tape& tape, DistillComponent& d, Var l_g,
                 const std::vector<Tensor>& keyframe_latents) {
    if (keyframe_latents.empty()) throw usage_error("gdde_distill: empty keyframe latent list");
    Tensor mean(keyframe_latents.front().shape);
    for (const Tensor& k : keyframe_latents) {
        require_same_shape(mean, k, "gdde_distill");
        for (size_t i = 0; i < mean.size(); ++i) mean.data[i] += k.data[i];
    }
    for (double& v : mean.data) v /= static_cast<double>(keyframe_latents.size());
    return d.apply(tape, l_g, tape.constant(std::move(mean)));
}

// ---- fusion ---------------------------------------------------------------

FusionComponent::FusionComponent(size_t channels, SeededRng& rng)
    : r("fusion.r", Tensor::gaussian(Shape{channels, 2 * channels + 1}, rng, 0.02)) {
    // Identity on the pose-latent sub-block so fusion starts as a pass-through.
    for (size_t c = 0; c < channels; ++c) r.value.at2(c, c) = 1.0;
}

Var FusionComponent::apply(Tape& tape, Var l_p, Var l_m, Var lbar_g, Var noise, Var lbar_bg) {
    return fuse_tokens(tape, tape.param(r), l_p, l_m, lbar_g, noise, lbar_bg, false);
}

Var fuse_tokens(Tape& tape, Var proj, Var l_p, Var l_m, Var lbar_g, Var noise, Var lbar_bg,
                bool skip_addto) {
    const Shape& sp = l_p.shape();  // [C,T',h,w]
    if (sp.size() != 4) throw shape_error("fuse_guidance: L_p must be [C,T',h,w], got " + shape_str(sp));
    size_t C = sp[0], Tp = sp[1], h = sp[2], w = sp[3];
    auto check = [&](const Var& v, Shape want, const char* name) {
        if (v.shape() != want)
            throw shape_error(std::string("fuse_guidance: ") + name + " has shape " +
                              shape_str(v.shape()) + ", expected " + shape_str(want));
    };
    check(l_m, Shape{1, Tp, h, w}, "L_m");
    check(lbar_g, Shape{C, h, w}, "L_bar_g");
    check(noise, Shape{C, Tp, h, w}, "noise");
    check(lbar_bg, Shape{C, Tp, h, w}, "L_bar_bg");

    // Step 1: channel-concat pose and mask latents, patchify per site, and
    // project together with the (time-broadcast) garment latent tokens.
    Var t_inp = patchify(concat_channels(l_p, l_m), {1, 1, 1});           // [N x C+1]
    Var g_tokens = patchify(broadcast_time(lbar_g, Tp), {1, 1, 1});       // [N x C]
    Var l = matmul(concat_cols(t_inp, g_tokens), proj, false, true);      // [N x C]

    // Step 2: widen with the noise tokens.
    Var lbar = concat_cols(l, patchify(noise, {1, 1, 1}));  // [N x 2C]

    // Step 3: "addto" — the patchified background latent lands on the fused
    // (non-noise) column block.
    if (skip_addto) return lbar;
    return add_cols(lbar, patchify(lbar_bg, {1, 1, 1}), 0);
}

void FusionComponent::collect(ParamList& out) { out.push_back(&r); }

}  // namespace kt
