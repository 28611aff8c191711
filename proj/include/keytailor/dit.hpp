#pragma once

#include <optional>
#include <string>
#include <vector>

#include "keytailor/latents.hpp"
#include "keytailor/nn.hpp"

namespace kt {

struct ModelConfig {
    size_t blocks = 2;
    size_t width = 192;  // matches the latent channel count so the frozen
                         // output head spans the velocity space
    size_t heads = 4;
    size_t rank = 4;

    std::string fingerprint_text() const;
};

struct AblationConfig {
    bool no_iks = false;
    bool no_distill = false;
    bool no_qkey = false;
    bool no_keybg = false;
    bool no_fusion = false;
    bool no_cbdo = false;
    bool no_gdde = false;
    bool keyframes_1 = false;

    std::string tag() const;  // short text form for configs and logs
};

/// Pre-LN transformer block: LoRA-adapted self-attention with an optional
/// keyframe query bias, cross-attention over garment tokens, and a GELU FFN.
struct DiTBlock {
    LayerNormLayer ln1, ln2, ln3;  // frozen
    LoraLinear sq, sk, sv, so;     // self-attention
    LoraLinear cq, ck, cv, co;     // cross-attention
    LoraLinear f1, f2;             // FFN
    Parameter a_key, b_key;        // keyframe query adapter

    DiTBlock() = default;
    DiTBlock(const std::string& name, const ModelConfig& cfg, SeededRng& rng);

    /// h [N x d], garment tokens g [M x d], pooled keyframe latent (optional).
    Var apply(Tape& tape, Var h, Var g, const std::optional<Var>& pooled, size_t heads);
    void collect_trainable(ParamList& out);
    void collect_all(ParamList& out);
};

struct KeyTailorModel {
    ModelConfig cfg;
    Linear embed;                  // frozen, token width 2C -> d
    Parameter time_w, time_b;      // frozen timestep projection d -> d
    std::vector<DiTBlock> blocks;
    Parameter head_w, head_b;      // frozen output head d -> C
    GuiderNet mask_guider, pose_guider;
    DistillComponent distill;
    FusionComponent fusion;
    Parameter fixed_fusion;        // frozen projection for the w/o-fusion path

    KeyTailorModel() = default;
    KeyTailorModel(const ModelConfig& cfg, uint64_t seed);

    void collect_trainable(ParamList& out);
    void collect_all(ParamList& out);
    uint64_t base_checksum() const;  // over frozen parameters only
};

// ---- flow matching --------------------------------------------------------

Tensor flow_interpolate(const Tensor& x0, const Tensor& x1, double t);
Tensor target_velocity(const Tensor& x0, const Tensor& x1);
double sample_timestep(SeededRng& rng);

// ---- checkpoint -----------------------------------------------------------

void save_checkpoint(const std::string& path, KeyTailorModel& model, const std::string& config_fp);
/// Loads into an already-constructed model; validates names, shapes,
/// trainable flags, and the config fingerprint.
void load_checkpoint(const std::string& path, KeyTailorModel& model, const std::string& config_fp);

uint64_t fingerprint_hash(const std::string& text);

}  // namespace kt
