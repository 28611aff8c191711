#include "keytailor/nn.hpp"

#include <cmath>

#include "keytailor/errors.hpp"

namespace kt {

// ---- Linear ---------------------------------------------------------------

Linear::Linear(const std::string& name, size_t in, size_t out, SeededRng& rng, double sigma,
               bool trainable)
    : w(name + ".w", Tensor::gaussian(Shape{out, in}, rng, sigma), trainable),
      b(name + ".b", Tensor(Shape{out}), trainable) {}

Var Linear::apply(Tape& tape, Var x) {
    return add_rowvec(matmul(x, tape.param(w), false, true), tape.param(b));
}

void Linear::collect(ParamList& out) {
    out.push_back(&w);
    out.push_back(&b);
}

// ---- LoraLinear -----------------------------------------------------------

LoraLinear::LoraLinear(const std::string& name, size_t in, size_t out, size_t rank, SeededRng& rng,
                       double base_sigma, double lora_sigma)
    : w0(name + ".w0", Tensor::gaussian(Shape{out, in}, rng, base_sigma), false),
      b0(name + ".b0", Tensor(Shape{out}), false),
      a(name + ".lora_a", Tensor::gaussian(Shape{out, rank}, rng, lora_sigma), true),
      bdown(name + ".lora_b", Tensor(Shape{in, rank}), true) {}

Var LoraLinear::apply(Tape& tape, Var x) {
    Var base = add_rowvec(matmul(x, tape.param(w0), false, true), tape.param(b0));
    Var down = matmul(x, tape.param(bdown), false, false);    // [n x r]
    Var up = matmul(down, tape.param(a), false, true);        // [n x out]
    return add(base, up);
}

void LoraLinear::collect(ParamList& out) {
    out.push_back(&a);
    out.push_back(&bdown);
}

// ---- Conv3dLayer ----------------------------------------------------------

Conv3dLayer::Conv3dLayer(const std::string& name, size_t in, size_t out,
                         std::array<size_t, 3> kernel, std::array<size_t, 3> stride_,
                         SeededRng& rng, double sigma)
    : w(name + ".w", Tensor::gaussian(Shape{out, in, kernel[0], kernel[1], kernel[2]}, rng, sigma)),
      b(name + ".b", Tensor(Shape{out})),
      stride(stride_) {}

Var Conv3dLayer::apply(Tape& tape, Var x) {
    return conv3d(x, tape.param(w), tape.param(b), stride);
}

void Conv3dLayer::collect(ParamList& out) {
    out.push_back(&w);
    out.push_back(&b);
}

// ---- LayerNormLayer -------------------------------------------------------

LayerNormLayer::LayerNormLayer(const std::string& name, size_t width, bool trainable)
    : gain(name + ".gain", Tensor::full(Shape{width}, 1.0), trainable),
      bias(name + ".bias", Tensor(Shape{width}), trainable) {}

Var LayerNormLayer::apply(Tape& tape, Var x) {
    return layernorm(x, tape.param(gain), tape.param(bias));
}

void LayerNormLayer::collect(ParamList& out) {
    out.push_back(&gain);
    out.push_back(&bias);
}

// ---- GuiderNet ------------------------------------------------------------

namespace {
double fan_in_sigma(size_t in, std::array<size_t, 3> k) {
    return 1.0 / std::sqrt(static_cast<double>(in * k[0] * k[1] * k[2]));
}
}  // namespace

GuiderNet::GuiderNet(const std::string& name, size_t in_channels, size_t out_channels,
                     SeededRng& rng)
    : c1(name + ".c1", in_channels, 32, {3, 3, 3}, {1, 2, 2}, rng,
         fan_in_sigma(in_channels, {3, 3, 3})),
      c2(name + ".c2", 32, 96, {3, 3, 3}, {1, 2, 2}, rng, fan_in_sigma(32, {3, 3, 3})),
      c3(name + ".c3", 96, 192, {3, 3, 3}, {2, 2, 2}, rng, fan_in_sigma(96, {3, 3, 3})),
      c4(name + ".c4", 192, 256, {3, 3, 3}, {2, 2, 2}, rng, fan_in_sigma(192, {3, 3, 3})),
      head_w(name + ".head.w", Tensor(Shape{out_channels, 256})),
      head_b(name + ".head.b", Tensor(Shape{out_channels})) {}

Var GuiderNet::apply(Tape& tape, Var x) {
    Var h = gelu(c1.apply(tape, x));
    h = gelu(c2.apply(tape, h));
    h = gelu(c3.apply(tape, h));
    h = gelu(c4.apply(tape, h));
    h = upsample2x_hw(h);
    return conv1x1(h, tape.param(head_w), tape.param(head_b));
}

void GuiderNet::collect(ParamList& out) {
    c1.collect(out);
    c2.collect(out);
    c3.collect(out);
    c4.collect(out);
    out.push_back(&head_w);
    out.push_back(&head_b);
}

// ---- AdamW ----------------------------------------------------------------

AdamW::AdamW(ParamList params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter* p : params_) {
        m_.emplace_back(p->value.shape);
        v_.emplace_back(p->value.shape);
    }
}

void AdamW::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter& p = *params_[pi];
        if (!p.trainable) continue;
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (size_t i = 0; i < p.value.size(); ++i) {
            double g = p.grad.data[i];
            m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g;
            v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = m.data[i] / bc1;
            double vhat = v.data[i] / bc2;
            p.value.data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                          cfg_.weight_decay * p.value.data[i]);
        }
        if (!p.value.all_finite()) throw numeric_error("AdamW: non-finite update in " + p.name);
    }
}

void AdamW::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

// ---- gradient check -------------------------------------------------------

double finite_diff_check(const std::function<Var(Tape&)>& build, ParamList params, size_t samples,
                         double step, SeededRng& rng) {
    for (Parameter* p : params) p->zero_grad();
    double base;
    {
        Tape tape;
        Var loss = build(tape);
        base = loss.value().data[0];
        tape.backward(loss);
    }
    auto eval = [&]() {
        Tape tape;
        return build(tape).value().data[0];
    };
    double worst = 0.0;
    for (Parameter* p : params) {
        if (!p->trainable || p->value.size() == 0) continue;
        size_t n = p->value.size();
        size_t take = std::min(samples, n);
        for (size_t s = 0; s < take; ++s) {
            size_t i = (take == n) ? s : rng.below(n);
            double saved = p->value.data[i];
            p->value.data[i] = saved + step;
            double up = eval();
            p->value.data[i] = saved - step;
            double down = eval();
            p->value.data[i] = saved + 2.0 * step;
            double up2 = eval();
            p->value.data[i] = saved - 2.0 * step;
            double down2 = eval();
            p->value.data[i] = saved;
            // Richardson-extrapolated central difference: O(step^4) truncation.
            double numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            double analytic = p->grad.data[i];
            double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
    }
    (void)base;
    return worst;
}

}  // namespace kt
