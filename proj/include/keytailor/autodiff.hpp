#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "keytailor/tensor.hpp"

namespace kt {

/// Weight or bias with its gradient accumulator. Non-trainable parameters
/// never receive gradient updates; they still participate in forward passes.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape), trainable(train) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    const Shape& shape() const;
};

/// Topologically ordered record of one forward pass. Nodes are appended in
/// creation order, so a single reverse sweep visits each node exactly once.
class Tape {
  public:
    Var constant(Tensor t);
    Var input(Tensor t);  // gradient-tracked leaf (for checks against inputs)
    Var param(Parameter& p);

    const Tensor& value(int id) const { return nodes_[id].value; }
    const Tensor& grad(int id) const { return nodes_[id].grad; }
    bool requires_grad(int id) const { return nodes_[id].tracked; }

    /// Accumulate `g` into the gradient of node `id` (no-op if not tracked).
    void accumulate(int id, const Tensor& g);
    Tensor& grad_buffer(int id);

    int add_node(Tensor value, std::vector<int> inputs,
                 std::function<void(Tape&, int)> back, bool tracked);

    /// Reverse sweep from a scalar loss. A second call without a fresh tape
    /// is a usage error.
    void backward(const Var& loss);

    size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily
        std::vector<int> inputs;
        std::function<void(Tape&, int)> back;
        Parameter* param = nullptr;
        bool tracked = false;
    };
    std::vector<Node> nodes_;
    bool backward_done_ = false;
    friend struct Var;
};

// ---- differentiable operations -------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);

/// Matrix product with optional operand transposes; inputs are 2-D.
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);

/// Pointwise channel mixing: x is [C_in, ...sites], w is [C_out x C_in].
Var conv1x1(Var x, Var w, Var b);

/// 3-D cross-correlation with same-style padding: pad_total = kernel-1 per
/// axis, split floor/ceil at the low/high ends; output extent = ceil(in/stride).
Var conv3d(Var x, Var w, Var b, std::array<size_t, 3> stride);

/// Normalization over the last dimension, then affine with gain/bias.
Var layernorm(Var x, Var gain, Var bias, double eps = 1e-5);

/// Multi-head scaled-dot-product attention; q [n x d], k,v [m x d].
Var attention(Var q, Var k, Var v, size_t heads);

Var gelu(Var x);

Var patchify(Var x, std::array<size_t, 3> patch);
Var unpatchify(Var tokens, Shape cthw, std::array<size_t, 3> patch);

Var reshape(Var x, Shape s);
Var transpose2d(Var x);
Var concat_cols(Var a, Var b);
Var concat_channels(Var a, Var b);
/// Adds y [n x wy] into columns [col0, col0+wy) of x [n x w].
Var add_cols(Var x, Var y, size_t col0);
/// Broadcast-add a width-d vector to every row of x [n x d].
Var add_rowvec(Var x, Var v);
Var broadcast_time(Var chw, size_t T);
Var upsample2x_hw(Var x);

Var sum_all(Var x);
Var mean_all(Var x);
Var mse(Var a, Var b);

// ---- plain helpers --------------------------------------------------------

Tensor matmul_plain(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor softmax_rows(const Tensor& x);
std::array<size_t, 3> conv3d_output_extent(const Shape& in, const Shape& kernel,
                                           std::array<size_t, 3> stride);

}  // namespace kt
