#include "keytailor/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "keytailor/errors.hpp"
#include "keytailor/threads.hpp"

namespace kt {

// ---- Var / Tape -----------------------------------------------------------

const Tensor& Var::value() const { return tape->value(id); }
const Shape& Var::shape() const { return tape->value(id).shape; }

Var Tape::constant(Tensor t) {
    int id = add_node(std::move(t), {}, nullptr, false);
    return {this, id};
}

Var Tape::input(Tensor t) {
    int id = add_node(std::move(t), {}, nullptr, true);
    return {this, id};
}

Var Tape::param(Parameter& p) {
    Parameter* pp = &p;
    int id = add_node(p.value, {},
                      [pp](Tape& tape, int self) {
                          const Tensor& g = tape.grad(self);
                          for (size_t i = 0; i < g.size(); ++i) pp->grad.data[i] += g.data[i];
                      },
                      p.trainable);
    nodes_[id].param = pp;
    return {this, id};
}

void Tape::accumulate(int id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.tracked) return;
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
    for (size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
}

Tensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
}

int Tape::add_node(Tensor value, std::vector<int> inputs,
                   std::function<void(Tape&, int)> back, bool tracked) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(inputs), std::move(back), nullptr,
                          tracked});
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const Var& loss) {
    if (backward_done_) throw usage_error("backward: tape already consumed; build a fresh graph");
    if (loss.tape != this || loss.id < 0 || loss.id >= static_cast<int>(nodes_.size()))
        throw usage_error("backward: loss does not belong to this tape");
    if (value(loss.id).size() != 1) throw usage_error("backward: loss must be a scalar tensor");
    backward_done_ = true;
    grad_buffer(loss.id).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.back || n.grad.data.empty()) continue;
        n.back(*this, id);
    }
}

// ---- helpers --------------------------------------------------------------

namespace {

Tensor transpose_plain(const Tensor& a) {
    size_t m = a.shape[0], n = a.shape[1];
    Tensor r(Shape{n, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) r.data[j * m + i] = a.data[i * n + j];
    return r;
}

void check2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw shape_error(std::string(op) + ": expected 2-D, got " + shape_str(t.shape));
}

// y[n x d] broadcast against rows handled by callers.

// Dense GEMM kernel over rows [i0, i1). Kept as a free function with
// __restrict parameters so writes through C cannot be assumed to alias the
// loop bounds or the other operands.
void mm_kernel(const double* __restrict A, const double* __restrict B, double* __restrict C,
               size_t i0, size_t i1, size_t k, size_t n) {
    size_t i = i0;
    // 4-row x 2-k register tile: amortizes the C-row read/write traffic that
    // dominates the plain axpy form.
    for (; i + 4 <= i1; i += 4) {
        double* __restrict c0 = C + i * n;
        double* __restrict c1 = c0 + n;
        double* __restrict c2 = c1 + n;
        double* __restrict c3 = c2 + n;
        const double* a0r = A + i * k;
        const double* a1r = a0r + k;
        const double* a2r = a1r + k;
        const double* a3r = a2r + k;
        size_t kk = 0;
        for (; kk + 2 <= k; kk += 2) {
            double p00 = a0r[kk], p01 = a0r[kk + 1], p10 = a1r[kk], p11 = a1r[kk + 1];
            double p20 = a2r[kk], p21 = a2r[kk + 1], p30 = a3r[kk], p31 = a3r[kk + 1];
            const double* __restrict b0 = B + kk * n;
            const double* __restrict b1 = b0 + n;
            for (size_t j = 0; j < n; ++j) {
                double v0 = b0[j], v1 = b1[j];
                c0[j] += p00 * v0 + p01 * v1;
                c1[j] += p10 * v0 + p11 * v1;
                c2[j] += p20 * v0 + p21 * v1;
                c3[j] += p30 * v0 + p31 * v1;
            }
        }
        for (; kk < k; ++kk) {
            double p0 = a0r[kk], p1 = a1r[kk], p2 = a2r[kk], p3 = a3r[kk];
            const double* __restrict br = B + kk * n;
            for (size_t j = 0; j < n; ++j) {
                c0[j] += p0 * br[j];
                c1[j] += p1 * br[j];
                c2[j] += p2 * br[j];
                c3[j] += p3 * br[j];
            }
        }
    }
    for (; i < i1; ++i) {
        double* __restrict crow = C + i * n;
        const double* arow = A + i * k;
        for (size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* __restrict brow = B + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul_plain(const Tensor& a0, const Tensor& b0, bool trans_a, bool trans_b) {
    check2d(a0, "matmul");
    check2d(b0, "matmul");
    const Tensor a = trans_a ? transpose_plain(a0) : a0;
    const Tensor b = trans_b ? transpose_plain(b0) : b0;
    size_t m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
    if (k != k2)
        throw shape_error("matmul: inner extents differ, " + shape_str(a.shape) + " x " +
                          shape_str(b.shape));
    Tensor c(Shape{m, n});
    const double* A = a.data.data();
    const double* B = b.data.data();
    double* C = c.data.data();
    parallel_for(m, [&](size_t ib, size_t ie) { mm_kernel(A, B, C, ib, ie, k, n); });
    return c;
}

Tensor softmax_rows(const Tensor& x) {
    check2d(x, "softmax");
    size_t n = x.shape[0], m = x.shape[1];
    Tensor y(x.shape);
    for (size_t i = 0; i < n; ++i) {
        const double* row = x.data.data() + i * m;
        double* out = y.data.data() + i * m;
        double mx = row[0];
        for (size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (size_t j = 0; j < m; ++j) {
            out[j] = std::exp(row[j] - mx);
            s += out[j];
        }
        double inv = 1.0 / s;
        for (size_t j = 0; j < m; ++j) out[j] *= inv;
    }
    return y;
}

// ---- elementwise ops ------------------------------------------------------

Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor y = a.value();
    for (size_t i = 0; i < y.size(); ++i) y.data[i] += b.value().data[i];
    int ia = a.id, ib = b.id;
    int id = a.tape->add_node(std::move(y), {ia, ib},
                              [ia, ib](Tape& t, int self) {
                                  t.accumulate(ia, t.grad(self));
                                  t.accumulate(ib, t.grad(self));
                              },
                              a.tape->requires_grad(ia) || a.tape->requires_grad(ib));
    return {a.tape, id};
}

Var sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor y = a.value();
    for (size_t i = 0; i < y.size(); ++i) y.data[i] -= b.value().data[i];
    int ia = a.id, ib = b.id;
    int id = a.tape->add_node(std::move(y), {ia, ib},
                              [ia, ib](Tape& t, int self) {
                                  const Tensor& g = t.grad(self);
                                  t.accumulate(ia, g);
                                  if (t.requires_grad(ib)) {
                                      Tensor ng = g;
                                      for (double& v : ng.data) v = -v;
                                      t.accumulate(ib, ng);
                                  }
                              },
                              a.tape->requires_grad(ia) || a.tape->requires_grad(ib));
    return {a.tape, id};
}

Var mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor y = a.value();
    for (size_t i = 0; i < y.size(); ++i) y.data[i] *= b.value().data[i];
    int ia = a.id, ib = b.id;
    int id = a.tape->add_node(std::move(y), {ia, ib},
                              [ia, ib](Tape& t, int self) {
                                  const Tensor& g = t.grad(self);
                                  if (t.requires_grad(ia)) {
                                      Tensor ga = g;
                                      const Tensor& bv = t.value(ib);
                                      for (size_t i = 0; i < ga.size(); ++i) ga.data[i] *= bv.data[i];
                                      t.accumulate(ia, ga);
                                  }
                                  if (t.requires_grad(ib)) {
                                      Tensor gb = g;
                                      const Tensor& av = t.value(ia);
                                      for (size_t i = 0; i < gb.size(); ++i) gb.data[i] *= av.data[i];
                                      t.accumulate(ib, gb);
                                  }
                              },
                              a.tape->requires_grad(ia) || a.tape->requires_grad(ib));
    return {a.tape, id};
}

Var scale(Var a, double c) {
    Tensor y = a.value();
    for (double& v : y.data) v *= c;
    int ia = a.id;
    int id = a.tape->add_node(std::move(y), {ia},
                              [ia, c](Tape& t, int self) {
                                  Tensor g = t.grad(self);
                                  for (double& v : g.data) v *= c;
                                  t.accumulate(ia, g);
                              },
                              a.tape->requires_grad(ia));
    return {a.tape, id};
}

// ---- matmul ---------------------------------------------------------------

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
    Tensor y = matmul_plain(a.value(), b.value(), trans_a, trans_b);
    int ia = a.id, ib = b.id;
    int id = a.tape->add_node(
        std::move(y), {ia, ib},
        [ia, ib, trans_a, trans_b](Tape& t, int self) {
            const Tensor& g = t.grad(self);
            const Tensor& av = t.value(ia);
            const Tensor& bv = t.value(ib);
            if (t.requires_grad(ia)) {
                // dA = dC.B^T (or transposed variants)
                Tensor da = trans_a ? matmul_plain(bv, g, trans_b, true)
                                    : matmul_plain(g, bv, false, !trans_b);
                t.accumulate(ia, da);
            }
            if (t.requires_grad(ib)) {
                Tensor db = trans_b ? matmul_plain(g, av, true, trans_a)
                                    : matmul_plain(av, g, !trans_a, false);
                t.accumulate(ib, db);
            }
        },
        a.tape->requires_grad(ia) || a.tape->requires_grad(ib));
    return {a.tape, id};
}

// ---- pointwise channel mixing --------------------------------------------

Var conv1x1(Var x, Var w, Var b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.ndim() < 2) throw shape_error("conv1x1: input must have channel + site dims");
    check2d(wv, "conv1x1 weight");
    size_t ci = xv.shape[0];
    size_t sites = xv.size() / ci;
    size_t co = wv.shape[0];
    if (wv.shape[1] != ci)
        throw shape_error("conv1x1: channel mismatch, weight " + shape_str(wv.shape) + " vs input " +
                          shape_str(xv.shape));
    if (bv.size() != co)
        throw shape_error("conv1x1: bias length " + std::to_string(bv.size()) + " != C_out " +
                          std::to_string(co));
    Shape out_shape = xv.shape;
    out_shape[0] = co;
    Tensor y(out_shape);
    parallel_for(co, [&](size_t ob, size_t oe) {
        for (size_t o = ob; o < oe; ++o) {
            double* yrow = y.data.data() + o * sites;
            for (size_t s = 0; s < sites; ++s) yrow[s] = bv.data[o];
            for (size_t c = 0; c < ci; ++c) {
                double wv_oc = wv.data[o * ci + c];
                if (wv_oc == 0.0) continue;
                const double* xrow = xv.data.data() + c * sites;
                for (size_t s = 0; s < sites; ++s) yrow[s] += wv_oc * xrow[s];
            }
        }
    });
    int ix = x.id, iw = w.id, ibias = b.id;
    int id = x.tape->add_node(
        std::move(y), {ix, iw, ibias},
        [ix, iw, ibias, ci, co, sites](Tape& t, int self) {
            const Tensor& g = t.grad(self);
            const Tensor& xv2 = t.value(ix);
            const Tensor& wv2 = t.value(iw);
            if (t.requires_grad(iw)) {
                Tensor dw(Shape{co, ci});
                for (size_t o = 0; o < co; ++o)
                    for (size_t c = 0; c < ci; ++c) {
                        const double* grow = g.data.data() + o * sites;
                        const double* xrow = xv2.data.data() + c * sites;
                        double acc = 0.0;
                        for (size_t s = 0; s < sites; ++s) acc += grow[s] * xrow[s];
                        dw.data[o * ci + c] = acc;
                    }
                t.accumulate(iw, dw);
            }
            if (t.requires_grad(ibias)) {
                Tensor db(t.value(ibias).shape);
                for (size_t o = 0; o < co; ++o) {
                    const double* grow = g.data.data() + o * sites;
                    double acc = 0.0;
                    for (size_t s = 0; s < sites; ++s) acc += grow[s];
                    db.data[o] = acc;
                }
                t.accumulate(ibias, db);
            }
            if (t.requires_grad(ix)) {
                Tensor dx(xv2.shape);
                for (size_t c = 0; c < ci; ++c) {
                    double* xrow = dx.data.data() + c * sites;
                    for (size_t o = 0; o < co; ++o) {
                        double wv_oc = wv2.data[o * ci + c];
                        if (wv_oc == 0.0) continue;
                        const double* grow = g.data.data() + o * sites;
                        for (size_t s = 0; s < sites; ++s) xrow[s] += wv_oc * grow[s];
                    }
                }
                t.accumulate(ix, dx);
            }
        },
        x.tape->requires_grad(ix) || x.tape->requires_grad(iw) || x.tape->requires_grad(ibias));
    return {x.tape, id};
}

// ---- conv3d ---------------------------------------------------------------

std::array<size_t, 3> conv3d_output_extent(const Shape& in, const Shape& kernel,
                                           std::array<size_t, 3> stride) {
    std::array<size_t, 3> out;
    for (int a = 0; a < 3; ++a) {
        if (stride[a] == 0) throw config_error("conv3d: stride of zero");
        size_t n = in[1 + a];
        out[a] = (n + stride[a] - 1) / stride[a];
        if (kernel[2 + a] > n + kernel[2 + a] - 1)
            throw shape_error("conv3d: kernel does not fit padded input");
    }
    return out;
}

namespace {

struct Conv3dGeom {
    size_t ci, co, kt, kh, kw;
    size_t it, ih, iw;
    size_t ot, oh, ow;
    std::array<size_t, 3> stride;
    std::array<size_t, 3> pad_lo;
    size_t sites() const { return ot * oh * ow; }
    size_t cols() const { return ci * kt * kh * kw; }
};

Conv3dGeom conv3d_geom(const Tensor& x, const Tensor& w, std::array<size_t, 3> stride) {
    if (x.ndim() != 4) throw shape_error("conv3d: input must be [C,T,H,W], got " + shape_str(x.shape));
    if (w.ndim() != 5)
        throw shape_error("conv3d: weight must be [Co,Ci,kt,kh,kw], got " + shape_str(w.shape));
    if (w.shape[1] != x.shape[0])
        throw shape_error("conv3d: channel mismatch, weight " + shape_str(w.shape) + " vs input " +
                          shape_str(x.shape));
    Conv3dGeom g;
    g.ci = x.shape[0];
    g.co = w.shape[0];
    g.kt = w.shape[2];
    g.kh = w.shape[3];
    g.kw = w.shape[4];
    g.it = x.shape[1];
    g.ih = x.shape[2];
    g.iw = x.shape[3];
    g.stride = stride;
    auto out = conv3d_output_extent(x.shape, w.shape, stride);
    g.ot = out[0];
    g.oh = out[1];
    g.ow = out[2];
    g.pad_lo = {(g.kt - 1) / 2, (g.kh - 1) / 2, (g.kw - 1) / 2};
    return g;
}

Tensor im2col(const Tensor& x, const Conv3dGeom& g) {
    Tensor col(Shape{g.sites(), g.cols()});
    parallel_for(g.ot, [&](size_t tb, size_t te) {
        for (size_t to = tb; to < te; ++to)
            for (size_t ho = 0; ho < g.oh; ++ho)
                for (size_t wo = 0; wo < g.ow; ++wo) {
                    size_t site = (to * g.oh + ho) * g.ow + wo;
                    double* row = col.data.data() + site * g.cols();
                    size_t j = 0;
                    for (size_t c = 0; c < g.ci; ++c)
                        for (size_t dt = 0; dt < g.kt; ++dt)
                            for (size_t dh = 0; dh < g.kh; ++dh)
                                for (size_t dw = 0; dw < g.kw; ++dw, ++j) {
                                    long ti = static_cast<long>(to * g.stride[0] + dt) -
                                              static_cast<long>(g.pad_lo[0]);
                                    long hi = static_cast<long>(ho * g.stride[1] + dh) -
                                              static_cast<long>(g.pad_lo[1]);
                                    long wi = static_cast<long>(wo * g.stride[2] + dw) -
                                              static_cast<long>(g.pad_lo[2]);
                                    if (ti < 0 || hi < 0 || wi < 0 || ti >= static_cast<long>(g.it) ||
                                        hi >= static_cast<long>(g.ih) || wi >= static_cast<long>(g.iw))
                                        row[j] = 0.0;
                                    else
                                        row[j] = x.data[((c * g.it + ti) * g.ih + hi) * g.iw + wi];
                                }
                }
    });
    return col;
}

void col2im_accumulate(const Tensor& dcol, const Conv3dGeom& g, Tensor& dx) {
    for (size_t to = 0; to < g.ot; ++to)
        for (size_t ho = 0; ho < g.oh; ++ho)
            for (size_t wo = 0; wo < g.ow; ++wo) {
                size_t site = (to * g.oh + ho) * g.ow + wo;
                const double* row = dcol.data.data() + site * g.cols();
                size_t j = 0;
                for (size_t c = 0; c < g.ci; ++c)
                    for (size_t dt = 0; dt < g.kt; ++dt)
                        for (size_t dh = 0; dh < g.kh; ++dh)
                            for (size_t dw = 0; dw < g.kw; ++dw, ++j) {
                                long ti = static_cast<long>(to * g.stride[0] + dt) -
                                          static_cast<long>(g.pad_lo[0]);
                                long hi = static_cast<long>(ho * g.stride[1] + dh) -
                                          static_cast<long>(g.pad_lo[1]);
                                long wi = static_cast<long>(wo * g.stride[2] + dw) -
                                          static_cast<long>(g.pad_lo[2]);
                                if (ti < 0 || hi < 0 || wi < 0 || ti >= static_cast<long>(g.it) ||
                                    hi >= static_cast<long>(g.ih) || wi >= static_cast<long>(g.iw))
                                    continue;
                                dx.data[((c * g.it + ti) * g.ih + hi) * g.iw + wi] += row[j];
                            }
            }
}

}  // namespace

Var conv3d(Var x, Var w, Var b, std::array<size_t, 3> stride) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    Conv3dGeom g = conv3d_geom(xv, wv, stride);
    if (bv.size() != g.co)
        throw shape_error("conv3d: bias length " + std::to_string(bv.size()) + " != C_out " +
                          std::to_string(g.co));
    Tensor col = im2col(xv, g);
    Tensor wmat(Shape{g.co, g.cols()}, std::vector<double>(wv.data));
    Tensor ymat = matmul_plain(col, wmat, false, true);  // [sites x Co]
    Tensor y(Shape{g.co, g.ot, g.oh, g.ow});
    size_t sites = g.sites();
    for (size_t s = 0; s < sites; ++s)
        for (size_t o = 0; o < g.co; ++o) y.data[o * sites + s] = ymat.data[s * g.co + o] + bv.data[o];
    int ix = x.id, iw = w.id, ibias = b.id;
    int id = x.tape->add_node(
        std::move(y), {ix, iw, ibias},
        [ix, iw, ibias, g](Tape& t, int self) {
            const Tensor& gy = t.grad(self);
            size_t sites = g.sites();
            Tensor gmat(Shape{sites, g.co});
            for (size_t s = 0; s < sites; ++s)
                for (size_t o = 0; o < g.co; ++o) gmat.data[s * g.co + o] = gy.data[o * sites + s];
            // col is regathered from the saved input instead of being stored.
            Tensor col = im2col(t.value(ix), g);
            if (t.requires_grad(iw)) {
                Tensor dwmat = matmul_plain(gmat, col, true, false);  // [Co x K]
                Tensor dw(t.value(iw).shape, std::move(dwmat.data));
                t.accumulate(iw, dw);
            }
            if (t.requires_grad(ibias)) {
                Tensor db(t.value(ibias).shape);
                for (size_t o = 0; o < g.co; ++o) {
                    double acc = 0.0;
                    for (size_t s = 0; s < sites; ++s) acc += gy.data[o * sites + s];
                    db.data[o] = acc;
                }
                t.accumulate(ibias, db);
            }
            if (t.requires_grad(ix)) {
                Tensor wmat(Shape{g.co, g.cols()}, std::vector<double>(t.value(iw).data));
                Tensor dcol = matmul_plain(gmat, wmat, false, false);  // [sites x K]
                Tensor dx(t.value(ix).shape);
                col2im_accumulate(dcol, g, dx);
                t.accumulate(ix, dx);
            }
        },
        x.tape->requires_grad(ix) || x.tape->requires_grad(iw) || x.tape->requires_grad(ibias));
    return {x.tape, id};
}

// ---- layernorm ------------------------------------------------------------

Var layernorm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    if (xv.ndim() < 1) throw shape_error("layernorm: scalar input");
    size_t d = xv.shape.back();
    if (gv.size() != d || bv.size() != d)
        throw shape_error("layernorm: gain/bias length must equal last extent " + std::to_string(d));
    size_t rows = xv.size() / d;
    Tensor y(xv.shape);
    Tensor xhat(xv.shape);
    Tensor rstd(Shape{rows});
    for (size_t r = 0; r < rows; ++r) {
        const double* row = xv.data.data() + r * d;
        double mean = 0.0;
        for (size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + eps);
        rstd.data[r] = rs;
        for (size_t j = 0; j < d; ++j) {
            double xh = (row[j] - mean) * rs;
            xhat.data[r * d + j] = xh;
            y.data[r * d + j] = gv.data[j] * xh + bv.data[j];
        }
    }
    int ix = x.id, ig = gain.id, ib = bias.id;
    int id = x.tape->add_node(
        std::move(y), {ix, ig, ib},
        [ix, ig, ib, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, int self) {
            const Tensor& gy = t.grad(self);
            const Tensor& gv2 = t.value(ig);
            if (t.requires_grad(ig)) {
                Tensor dg(t.value(ig).shape);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < d; ++j) dg.data[j] += gy.data[r * d + j] * xhat.data[r * d + j];
                t.accumulate(ig, dg);
            }
            if (t.requires_grad(ib)) {
                Tensor db(t.value(ib).shape);
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < d; ++j) db.data[j] += gy.data[r * d + j];
                t.accumulate(ib, db);
            }
            if (t.requires_grad(ix)) {
                Tensor dx(t.value(ix).shape);
                for (size_t r = 0; r < rows; ++r) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        double dxh = gy.data[r * d + j] * gv2.data[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat.data[r * d + j];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    for (size_t j = 0; j < d; ++j) {
                        double dxh = gy.data[r * d + j] * gv2.data[j];
                        dx.data[r * d + j] = rstd.data[r] * (dxh - mean_dxhat -
                                                             xhat.data[r * d + j] * mean_dxhat_xhat);
                    }
                }
                t.accumulate(ix, dx);
            }
        },
        x.tape->requires_grad(ix) || x.tape->requires_grad(ig) || x.tape->requires_grad(ib));
    return {x.tape, id};
}

// ---- attention ------------------------------------------------------------

Var attention(Var q, Var k, Var v, size_t heads) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    check2d(qv, "attention");
    check2d(kv, "attention");
    check2d(vv, "attention");
    size_t n = qv.shape[0], d = qv.shape[1], m = kv.shape[0];
    if (kv.shape[1] != d || vv.shape[1] != d || vv.shape[0] != m)
        throw shape_error("attention: q " + shape_str(qv.shape) + ", k " + shape_str(kv.shape) +
                          ", v " + shape_str(vv.shape) + " are incompatible");
    if (heads == 0 || d % heads != 0)
        throw config_error("attention: head count " + std::to_string(heads) +
                           " does not divide width " + std::to_string(d));
    size_t dh = d / heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor y(Shape{n, d});
    // Per-head softmax matrices are saved for backward.
    std::vector<Tensor> probs(heads);
    for (size_t h = 0; h < heads; ++h) {
        Tensor scores(Shape{n, m});
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < m; ++j) {
                double acc = 0.0;
                const double* qrow = qv.data.data() + i * d + h * dh;
                const double* krow = kv.data.data() + j * d + h * dh;
                for (size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
                scores.data[i * m + j] = acc * inv_sqrt;
            }
        Tensor p = softmax_rows(scores);
        for (size_t i = 0; i < n; ++i)
            for (size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (size_t j = 0; j < m; ++j)
                    acc += p.data[i * m + j] * vv.data[j * d + h * dh + c];
                y.data[i * d + h * dh + c] = acc;
            }
        probs[h] = std::move(p);
    }
    int iq = q.id, ik = k.id, iv = v.id;
    int id = q.tape->add_node(
        std::move(y), {iq, ik, iv},
        [iq, ik, iv, heads, n, m, d, dh, inv_sqrt, probs = std::move(probs)](Tape& t, int self) {
            const Tensor& gy = t.grad(self);
            const Tensor& qv2 = t.value(iq);
            const Tensor& kv2 = t.value(ik);
            const Tensor& vv2 = t.value(iv);
            Tensor dq(qv2.shape), dk(kv2.shape), dv(vv2.shape);
            for (size_t h = 0; h < heads; ++h) {
                const Tensor& p = probs[h];
                // dV += P^T dO
                for (size_t j = 0; j < m; ++j)
                    for (size_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (size_t i = 0; i < n; ++i)
                            acc += p.data[i * m + j] * gy.data[i * d + h * dh + c];
                        dv.data[j * d + h * dh + c] += acc;
                    }
                // dS = P o (dP - rowsum(dP o P)), dP = dO V^T
                Tensor ds(Shape{n, m});
                for (size_t i = 0; i < n; ++i) {
                    double rowdot = 0.0;
                    for (size_t j = 0; j < m; ++j) {
                        double dp = 0.0;
                        for (size_t c = 0; c < dh; ++c)
                            dp += gy.data[i * d + h * dh + c] * vv2.data[j * d + h * dh + c];
                        ds.data[i * m + j] = dp;
                        rowdot += dp * p.data[i * m + j];
                    }
                    for (size_t j = 0; j < m; ++j)
                        ds.data[i * m + j] = p.data[i * m + j] * (ds.data[i * m + j] - rowdot);
                }
                for (size_t i = 0; i < n; ++i)
                    for (size_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (size_t j = 0; j < m; ++j)
                            acc += ds.data[i * m + j] * kv2.data[j * d + h * dh + c];
                        dq.data[i * d + h * dh + c] += acc * inv_sqrt;
                    }
                for (size_t j = 0; j < m; ++j)
                    for (size_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (size_t i = 0; i < n; ++i)
                            acc += ds.data[i * m + j] * qv2.data[i * d + h * dh + c];
                        dk.data[j * d + h * dh + c] += acc * inv_sqrt;
                    }
            }
            t.accumulate(iq, dq);
            t.accumulate(ik, dk);
            t.accumulate(iv, dv);
        },
        q.tape->requires_grad(iq) || q.tape->requires_grad(ik) || q.tape->requires_grad(iv));
    return {q.tape, id};
}

// ---- gelu -----------------------------------------------------------------

Var gelu(Var x) {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Tensor y = x.value();
    for (double& v : y.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    int ix = x.id;
    int id = x.tape->add_node(std::move(y), {ix},
                              [ix](Tape& t, int self) {
                                  const Tensor& g = t.grad(self);
                                  const Tensor& xv = t.value(ix);
                                  Tensor dx(xv.shape);
                                  for (size_t i = 0; i < xv.size(); ++i) {
                                      double v = xv.data[i];
                                      double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                                      double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                                      dx.data[i] = g.data[i] * (cdf + v * pdf);
                                  }
                                  t.accumulate(ix, dx);
                              },
                              x.tape->requires_grad(ix));
    return {x.tape, id};
}

// ---- patchify -------------------------------------------------------------

namespace {

void check_patch(const Shape& s, std::array<size_t, 3> p) {
    if (s.size() != 4) throw shape_error("patchify: input must be [C,T,H,W], got " + shape_str(s));
    for (int a = 0; a < 3; ++a) {
        if (p[a] == 0 || s[1 + a] % p[a] != 0)
            throw shape_error("patchify: patch extent " + std::to_string(p[a]) +
                              " does not divide input " + shape_str(s));
    }
}

// Token order: (t-block, h-block, w-block) row-major; width order: (c, dt, dh, dw).
void patchify_scatter(const Tensor& src, Tensor& dst, const Shape& cthw, std::array<size_t, 3> p,
                      bool to_tokens) {
    size_t C = cthw[0], T = cthw[1], H = cthw[2], W = cthw[3];
    size_t tb = T / p[0], hb = H / p[1], wb = W / p[2];
    size_t width = C * p[0] * p[1] * p[2];
    for (size_t n = 0; n < tb * hb * wb; ++n) {
        size_t bt = n / (hb * wb);
        size_t bh = (n / wb) % hb;
        size_t bw = n % wb;
        size_t j = 0;
        for (size_t c = 0; c < C; ++c)
            for (size_t dt = 0; dt < p[0]; ++dt)
                for (size_t dh = 0; dh < p[1]; ++dh)
                    for (size_t dw = 0; dw < p[2]; ++dw, ++j) {
                        size_t grid = ((c * T + bt * p[0] + dt) * H + bh * p[1] + dh) * W +
                                      bw * p[2] + dw;
                        size_t tok = n * width + j;
                        if (to_tokens)
                            dst.data[tok] = src.data[grid];
                        else
                            dst.data[grid] = src.data[tok];
                    }
    }
}

}  // namespace

Var patchify(Var x, std::array<size_t, 3> patch) {
    const Tensor& xv = x.value();
    check_patch(xv.shape, patch);
    Shape cthw = xv.shape;
    size_t tokens = (cthw[1] / patch[0]) * (cthw[2] / patch[1]) * (cthw[3] / patch[2]);
    size_t width = cthw[0] * patch[0] * patch[1] * patch[2];
    Tensor y(Shape{tokens, width});
    patchify_scatter(xv, y, cthw, patch, true);
    int ix = x.id;
    int id = x.tape->add_node(std::move(y), {ix},
                              [ix, cthw, patch](Tape& t, int self) {
                                  if (!t.requires_grad(ix)) return;
                                  Tensor dx(cthw);
                                  patchify_scatter(t.grad(self), dx, cthw, patch, false);
                                  t.accumulate(ix, dx);
                              },
                              x.tape->requires_grad(ix));
    return {x.tape, id};
}

Var unpatchify(Var tokens, Shape cthw, std::array<size_t, 3> patch) {
    const Tensor& tv = tokens.value();
    check_patch(cthw, patch);
    size_t ntok = (cthw[1] / patch[0]) * (cthw[2] / patch[1]) * (cthw[3] / patch[2]);
    size_t width = cthw[0] * patch[0] * patch[1] * patch[2];
    if (tv.ndim() != 2 || tv.shape[0] != ntok || tv.shape[1] != width)
        throw shape_error("unpatchify: tokens " + shape_str(tv.shape) + " do not match grid " +
                          shape_str(cthw));
    Tensor y(cthw);
    patchify_scatter(tv, y, cthw, patch, false);
    int it = tokens.id;
    int id = tokens.tape->add_node(std::move(y), {it},
                                   [it, cthw, patch, ntok, width](Tape& t, int self) {
                                       if (!t.requires_grad(it)) return;
                                       Tensor dt(Shape{ntok, width});
                                       patchify_scatter(t.grad(self), dt, cthw, patch, true);
                                       t.accumulate(it, dt);
                                   },
                                   tokens.tape->requires_grad(it));
    return {tokens.tape, id};
}

// ---- shape & assembly ops -------------------------------------------------

Var reshape(Var x, Shape s) {
    const Tensor& xv = x.value();
    if (shape_numel(s) != xv.size())
        throw shape_error("reshape: cannot view " + shape_str(xv.shape) + " as " + shape_str(s));
    Tensor y(s, std::vector<double>(xv.data));
    int ix = x.id;
    int id = x.tape->add_node(std::move(y), {ix},
                              [ix](Tape& t, int self) {
                                  if (!t.requires_grad(ix)) return;
                                  Tensor dx(t.value(ix).shape, std::vector<double>(t.grad(self).data));
                                  t.accumulate(ix, dx);
                              },
                              x.tape->requires_grad(ix));
    return {x.tape, id};
}

Var transpose2d(Var x) {
    const Tensor& xv = x.value();
    check2d(xv, "transpose");
    Tensor yt(Shape{xv.shape[1], xv.shape[0]});
    for (size_t i = 0; i < xv.shape[0]; ++i)
        for (size_t j = 0; j < xv.shape[1]; ++j) yt.data[j * xv.shape[0] + i] = xv.data[i * xv.shape[1] + j];
    int ix = x.id;
    int id = x.tape->add_node(std::move(yt), {ix},
                              [ix](Tape& t, int self) {
                                  if (!t.requires_grad(ix)) return;
                                  const Tensor& g = t.grad(self);
                                  size_t m = g.shape[0], n = g.shape[1];
                                  Tensor dx(Shape{n, m});
                                  for (size_t i = 0; i < m; ++i)
                                      for (size_t j = 0; j < n; ++j)
                                          dx.data[j * m + i] = g.data[i * n + j];
                                  t.accumulate(ix, dx);
                              },
                              x.tape->requires_grad(ix));
    return {x.tape, id};
}

Var concat_cols(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    check2d(av, "concat_cols");
    check2d(bv, "concat_cols");
    if (av.shape[0] != bv.shape[0])
        throw shape_error("concat_cols: row mismatch " + shape_str(av.shape) + " vs " +
                          shape_str(bv.shape));
    size_t n = av.shape[0], wa = av.shape[1], wb = bv.shape[1];
    Tensor y(Shape{n, wa + wb});
    for (size_t i = 0; i < n; ++i) {
        std::copy_n(av.data.data() + i * wa, wa, y.data.data() + i * (wa + wb));
        std::copy_n(bv.data.data() + i * wb, wb, y.data.data() + i * (wa + wb) + wa);
    }
    int ia = a.id, ib = b.id;
    int id = a.tape->add_node(std::move(y), {ia, ib},
                              [ia, ib, n, wa, wb](Tape& t, int self) {
                                  const Tensor& g = t.grad(self);
                                  if (t.requires_grad(ia)) {
                                      Tensor da(Shape{n, wa});
                                      for (size_t i = 0; i < n; ++i)
                                          std::copy_n(g.data.data() + i * (wa + wb), wa,
                                                      da.data.data() + i * wa);
                                      t.accumulate(ia, da);
                                  }
                                  if (t.requires_grad(ib)) {
                                      Tensor db(Shape{n, wb});
                                      for (size_t i = 0; i < n; ++i)
                                          std::copy_n(g.data.data() + i * (wa + wb) + wa, wb,
                                                      db.data.data() + i * wb);
                                      t.accumulate(ib, db);
                                  }
                              },
                              a.tape->requires_grad(ia) || a.tape->requires_grad(ib));
    return {a.tape, id};
}

Var concat_channels(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != bv.ndim() || av.ndim() < 1)
        throw shape_error("concat_channels: rank mismatch " + shape_str(av.shape) + " vs " +
                          shape_str(bv.shape));
    for (size_t i = 1; i < av.ndim(); ++i)
        if (av.shape[i] != bv.shape[i])
            throw shape_error("concat_channels: trailing extents differ, " + shape_str(av.shape) +
                              " vs " + shape_str(bv.shape));
    Shape s = av.shape;
    s[0] += bv.shape[0];
    Tensor y(s);
    std::copy(av.data.begin(), av.data.end(), y.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), y.data.begin() + av.size());
    int ia = a.id, ib = b.id;
    size_t na = av.size();
    int id = a.tape->add_node(std::move(y), {ia, ib},
                              [ia, ib, na](Tape& t, int self) {
                                  const Tensor& g = t.grad(self);
                                  if (t.requires_grad(ia)) {
                                      Tensor da(t.value(ia).shape);
                                      std::copy_n(g.data.data(), na, da.data.data());
                                      t.accumulate(ia, da);
                                  }
                                  if (t.requires_grad(ib)) {
                                      Tensor db(t.value(ib).shape);
                                      std::copy_n(g.data.data() + na, db.size(), db.data.data());
                                      t.accumulate(ib, db);
                                  }
                              },
                              a.tape->requires_grad(ia) || a.tape->requires_grad(ib));
    return {a.tape, id};
}

Var add_cols(Var x, Var y, size_t col0) {
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    check2d(xv, "add_cols");
    check2d(yv, "add_cols");
    if (xv.shape[0] != yv.shape[0] || col0 + yv.shape[1] > xv.shape[1])
        throw shape_error("add_cols: cannot add " + shape_str(yv.shape) + " into " +
                          shape_str(xv.shape) + " at column " + std::to_string(col0));
    size_t n = xv.shape[0], w = xv.shape[1], wy = yv.shape[1];
    Tensor out = xv;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < wy; ++j) out.data[i * w + col0 + j] += yv.data[i * wy + j];
    int ix = x.id, iy = y.id;
    int id = x.tape->add_node(std::move(out), {ix, iy},
                              [ix, iy, n, w, wy, col0](Tape& t, int self) {
                                  const Tensor& g = t.grad(self);
                                  t.accumulate(ix, g);
                                  if (t.requires_grad(iy)) {
                                      Tensor dy(Shape{n, wy});
                                      for (size_t i = 0; i < n; ++i)
                                          for (size_t j = 0; j < wy; ++j)
                                              dy.data[i * wy + j] = g.data[i * w + col0 + j];
                                      t.accumulate(iy, dy);
                                  }
                              },
                              x.tape->requires_grad(ix) || x.tape->requires_grad(iy));
    return {x.tape, id};
}

Var add_rowvec(Var x, Var v) {
    const Tensor& xv = x.value();
    const Tensor& vv = v.value();
    check2d(xv, "add_rowvec");
    size_t n = xv.shape[0], d = xv.shape[1];
    if (vv.size() != d)
        throw shape_error("add_rowvec: vector length " + std::to_string(vv.size()) +
                          " != row width " + std::to_string(d));
    Tensor y = xv;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) y.data[i * d + j] += vv.data[j];
    int ix = x.id, iv = v.id;
    int id = x.tape->add_node(std::move(y), {ix, iv},
                              [ix, iv, n, d](Tape& t, int self) {
                                  const Tensor& g = t.grad(self);
                                  t.accumulate(ix, g);
                                  if (t.requires_grad(iv)) {
                                      Tensor dv(t.value(iv).shape);
                                      for (size_t i = 0; i < n; ++i)
                                          for (size_t j = 0; j < d; ++j) dv.data[j] += g.data[i * d + j];
                                      t.accumulate(iv, dv);
                                  }
                              },
                              x.tape->requires_grad(ix) || x.tape->requires_grad(iv));
    return {x.tape, id};
}

Var broadcast_time(Var chw, size_t T) {
    const Tensor& xv = chw.value();
    if (xv.ndim() != 3)
        throw shape_error("broadcast_time: expected [C,H,W], got " + shape_str(xv.shape));
    size_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    Tensor y(Shape{C, T, H, W});
    for (size_t c = 0; c < C; ++c)
        for (size_t t = 0; t < T; ++t)
            std::copy_n(xv.data.data() + c * H * W, H * W, y.data.data() + (c * T + t) * H * W);
    int ix = chw.id;
    int id = chw.tape->add_node(std::move(y), {ix},
                                [ix, C, T, H, W](Tape& t, int self) {
                                    if (!t.requires_grad(ix)) return;
                                    const Tensor& g = t.grad(self);
                                    Tensor dx(Shape{C, H, W});
                                    for (size_t c = 0; c < C; ++c)
                                        for (size_t tt = 0; tt < T; ++tt)
                                            for (size_t s = 0; s < H * W; ++s)
                                                dx.data[c * H * W + s] +=
                                                    g.data[(c * T + tt) * H * W + s];
                                    t.accumulate(ix, dx);
                                },
                                chw.tape->requires_grad(ix));
    return {chw.tape, id};
}

Var upsample2x_hw(Var x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4)
        throw shape_error("upsample2x: expected [C,T,H,W], got " + shape_str(xv.shape));
    size_t C = xv.shape[0], T = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tensor y(Shape{C, T, 2 * H, 2 * W});
    for (size_t c = 0; c < C; ++c)
        for (size_t t = 0; t < T; ++t)
            for (size_t h = 0; h < 2 * H; ++h)
                for (size_t w = 0; w < 2 * W; ++w)
                    y.data[((c * T + t) * 2 * H + h) * 2 * W + w] =
                        xv.data[((c * T + t) * H + h / 2) * W + w / 2];
    int ix = x.id;
    int id = x.tape->add_node(std::move(y), {ix},
                              [ix, C, T, H, W](Tape& t, int self) {
                                  if (!t.requires_grad(ix)) return;
                                  const Tensor& g = t.grad(self);
                                  Tensor dx(Shape{C, T, H, W});
                                  for (size_t c = 0; c < C; ++c)
                                      for (size_t tt = 0; tt < T; ++tt)
                                          for (size_t h = 0; h < 2 * H; ++h)
                                              for (size_t w = 0; w < 2 * W; ++w)
                                                  dx.data[((c * T + tt) * H + h / 2) * W + w / 2] +=
                                                      g.data[((c * T + tt) * 2 * H + h) * 2 * W + w];
                                  t.accumulate(ix, dx);
                              },
                              x.tape->requires_grad(ix));
    return {x.tape, id};
}

// ---- reductions -----------------------------------------------------------

Var sum_all(Var x) {
    Tensor y = Tensor::scalar(x.value().sum());
    int ix = x.id;
    int id = x.tape->add_node(std::move(y), {ix},
                              [ix](Tape& t, int self) {
                                  if (!t.requires_grad(ix)) return;
                                  double g = t.grad(self).data[0];
                                  Tensor dx = Tensor::full(t.value(ix).shape, g);
                                  t.accumulate(ix, dx);
                              },
                              x.tape->requires_grad(ix));
    return {x.tape, id};
}

Var mean_all(Var x) {
    double n = static_cast<double>(x.value().size());
    return scale(sum_all(x), 1.0 / n);
}

Var mse(Var a, Var b) {
    Var d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace kt
