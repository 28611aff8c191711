#pragma once

#include <array>
#include <functional>
#include <vector>

#include "keytailor/autodiff.hpp"
#include "keytailor/rng.hpp"

namespace kt {

using ParamList = std::vector<Parameter*>;

/// y = x.W^T + b for row-major token matrices x [n x in], W [out x in].
struct Linear {
    Parameter w, b;

    Linear() = default;
    Linear(const std::string& name, size_t in, size_t out, SeededRng& rng, double sigma,
           bool trainable = true);

    Var apply(Tape& tape, Var x);
    void collect(ParamList& out);
};

/// Frozen base projection plus a trainable low-rank delta:
/// y = x.W0^T + (x.B).A^T, with A gaussian(sigma) and B zero at init.
struct LoraLinear {
    Parameter w0, b0;  // frozen
    Parameter a, bdown;

    LoraLinear() = default;
    LoraLinear(const std::string& name, size_t in, size_t out, size_t rank, SeededRng& rng,
               double base_sigma, double lora_sigma);

    Var apply(Tape& tape, Var x);
    void collect(ParamList& out);
};

struct Conv3dLayer {
    Parameter w, b;
    std::array<size_t, 3> stride{1, 1, 1};

    Conv3dLayer() = default;
    Conv3dLayer(const std::string& name, size_t in, size_t out, std::array<size_t, 3> kernel,
                std::array<size_t, 3> stride, SeededRng& rng, double sigma);

    Var apply(Tape& tape, Var x);
    void collect(ParamList& out);
};

struct LayerNormLayer {
    Parameter gain, bias;

    LayerNormLayer() = default;
    LayerNormLayer(const std::string& name, size_t width, bool trainable = true);

    Var apply(Tape& tape, Var x);
    void collect(ParamList& out);
};

/// Spatiotemporal condition encoder: four strided 3-D convolutions with GELU
/// in between, a 2x spatial upsample, and a zero-initialized pointwise head,
/// so the guider contributes exactly nothing before training.
struct GuiderNet {
    Conv3dLayer c1, c2, c3, c4;
    Parameter head_w, head_b;  // pointwise, zero at init

    GuiderNet() = default;
    GuiderNet(const std::string& name, size_t in_channels, size_t out_channels, SeededRng& rng);

    Var apply(Tape& tape, Var x);
    void collect(ParamList& out);
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled weight decay Adam over a fixed, ordered parameter list.
class AdamW {
  public:
    AdamW(ParamList params, AdamWConfig cfg = {});
    void step();
    void zero_grad();
    size_t step_count() const { return t_; }
    const ParamList& params() const { return params_; }

  private:
    ParamList params_;
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    size_t t_ = 0;
};

/// Central-difference gradient check. `build` must reconstruct the loss graph
/// from the parameters' current values on every call. Returns the worst
/// relative error over up to `samples` coordinates per parameter.
double finite_diff_check(const std::function<Var(Tape&)>& build, ParamList params, size_t samples,
                         double step, SeededRng& rng);

}  // namespace kt
