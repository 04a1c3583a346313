#include "ecgsynth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "ecgsynth/errors.hpp"

namespace ecgsynth::tensor {

namespace {

thread_local bool g_recording = true;

[[noreturn]] void shape_fail(const char* op, const std::vector<int>& a,
                             const std::vector<int>& b) {
    throw NumericError(std::string(op) + ": shape mismatch " + shape_str(a) +
                       " vs " + shape_str(b));
}

[[noreturn]] void no_double_backward(const char* op) {
    throw ConfigError(std::string(op) +
                      ": double-backward is not supported for this op "
                      "(supported subset: dense/matmul, conv1d, LeakyReLU, "
                      "instance-norm, elementwise add/mul and reductions)");
}

TensorPtr make_node(const char* op, std::vector<int> shape,
                    std::vector<double> value, std::vector<TensorPtr> inputs,
                    Node::BackwardFn fn) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool track = g_recording &&
                 std::any_of(inputs.begin(), inputs.end(),
                             [](const TensorPtr& t) { return t->requires_grad; });
    if (track) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward_fn = std::move(fn);
    }
    return n;
}

int axis_dim(const TensorPtr& x, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(x->shape.size()))
        throw NumericError(std::string(op) + ": axis " + std::to_string(axis) +
                           " out of range for " + shape_str(x->shape));
    return x->shape[axis];
}

// outer/mid/inner decomposition around one axis
void split_axis(const std::vector<int>& shape, int axis, std::size_t& outer,
                std::size_t& mid, std::size_t& inner) {
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    mid = shape[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

// ---------------- raw kernels ----------------

int conv_out_len(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

void kern_conv1d(const double* x, int B, int Ci, int Li, const double* w,
                 int Co, int K, int s, int p, double* out, int Lo) {
    std::fill(out, out + static_cast<std::size_t>(B) * Co * Lo, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xr = x + (static_cast<std::size_t>(b) * Ci + ci) * Li;
                const double* wr = w + (static_cast<std::size_t>(co) * Ci + ci) * K;
                double* orow = out + (static_cast<std::size_t>(b) * Co + co) * Lo;
                for (int o = 0; o < Lo; ++o) {
                    double acc = 0.0;
                    int base = o * s - p;
                    for (int k = 0; k < K; ++k) {
                        int i = base + k;
                        if (i >= 0 && i < Li) acc += xr[i] * wr[k];
                    }
                    orow[o] += acc;
                }
            }
}

void kern_conv1d_dgrad(const double* gy, int B, int Co, int Lo, const double* w,
                       int Ci, int K, int s, int p, double* gx, int Li) {
    std::fill(gx, gx + static_cast<std::size_t>(B) * Ci * Li, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci) {
                const double* gyr = gy + (static_cast<std::size_t>(b) * Co + co) * Lo;
                const double* wr = w + (static_cast<std::size_t>(co) * Ci + ci) * K;
                double* gxr = gx + (static_cast<std::size_t>(b) * Ci + ci) * Li;
                for (int o = 0; o < Lo; ++o) {
                    int base = o * s - p;
                    double g = gyr[o];
                    for (int k = 0; k < K; ++k) {
                        int i = base + k;
                        if (i >= 0 && i < Li) gxr[i] += g * wr[k];
                    }
                }
            }
}

void kern_conv1d_wgrad(const double* x, int B, int Ci, int Li, const double* gy,
                       int Co, int Lo, int s, int p, int K, double* gw) {
    std::fill(gw, gw + static_cast<std::size_t>(Co) * Ci * K, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xr = x + (static_cast<std::size_t>(b) * Ci + ci) * Li;
                const double* gyr = gy + (static_cast<std::size_t>(b) * Co + co) * Lo;
                double* gwr = gw + (static_cast<std::size_t>(co) * Ci + ci) * K;
                for (int o = 0; o < Lo; ++o) {
                    int base = o * s - p;
                    double g = gyr[o];
                    for (int k = 0; k < K; ++k) {
                        int i = base + k;
                        if (i >= 0 && i < Li) gwr[k] += g * xr[i];
                    }
                }
            }
}

void kern_conv2d(const double* x, int B, int Ci, int H, int W, const double* w,
                 int Co, int Kh, int Kw, int s, int p, double* out, int Ho,
                 int Wo) {
    std::fill(out, out + static_cast<std::size_t>(B) * Co * Ho * Wo, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xp = x + (static_cast<std::size_t>(b) * Ci + ci) * H * W;
                const double* wp =
                    w + (static_cast<std::size_t>(co) * Ci + ci) * Kh * Kw;
                double* op_ = out + (static_cast<std::size_t>(b) * Co + co) * Ho * Wo;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        double acc = 0.0;
                        for (int kh = 0; kh < Kh; ++kh) {
                            int ih = oh * s - p + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < Kw; ++kw) {
                                int iw = ow * s - p + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += xp[ih * W + iw] * wp[kh * Kw + kw];
                            }
                        }
                        op_[oh * Wo + ow] += acc;
                    }
            }
}

void kern_conv2d_dgrad(const double* gy, int B, int Co, int Ho, int Wo,
                       const double* w, int Ci, int Kh, int Kw, int s, int p,
                       double* gx, int H, int W) {
    std::fill(gx, gx + static_cast<std::size_t>(B) * Ci * H * W, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci) {
                const double* gyp =
                    gy + (static_cast<std::size_t>(b) * Co + co) * Ho * Wo;
                const double* wp =
                    w + (static_cast<std::size_t>(co) * Ci + ci) * Kh * Kw;
                double* gxp = gx + (static_cast<std::size_t>(b) * Ci + ci) * H * W;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        double g = gyp[oh * Wo + ow];
                        for (int kh = 0; kh < Kh; ++kh) {
                            int ih = oh * s - p + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < Kw; ++kw) {
                                int iw = ow * s - p + kw;
                                if (iw < 0 || iw >= W) continue;
                                gxp[ih * W + iw] += g * wp[kh * Kw + kw];
                            }
                        }
                    }
            }
}

void kern_conv2d_wgrad(const double* x, int B, int Ci, int H, int W,
                       const double* gy, int Co, int Ho, int Wo, int s, int p,
                       int Kh, int Kw, double* gw) {
    std::fill(gw, gw + static_cast<std::size_t>(Co) * Ci * Kh * Kw, 0.0);
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xp = x + (static_cast<std::size_t>(b) * Ci + ci) * H * W;
                const double* gyp =
                    gy + (static_cast<std::size_t>(b) * Co + co) * Ho * Wo;
                double* gwp =
                    gw + (static_cast<std::size_t>(co) * Ci + ci) * Kh * Kw;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        double g = gyp[oh * Wo + ow];
                        for (int kh = 0; kh < Kh; ++kh) {
                            int ih = oh * s - p + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int kw = 0; kw < Kw; ++kw) {
                                int iw = ow * s - p + kw;
                                if (iw < 0 || iw >= W) continue;
                                gwp[kh * Kw + kw] += g * xp[ih * W + iw];
                            }
                        }
                    }
            }
}

TensorPtr pad_axis(const TensorPtr& x, int axis, int before, int full_len);

}  // namespace

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool grad_recording() { return g_recording; }

NoGradGuard::NoGradGuard() : prev_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = prev_; }

// ---------------- leaves ----------------

TensorPtr make_leaf(std::vector<int> shape, std::vector<double> data,
                    bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw NumericError("make_leaf: data length " +
                           std::to_string(data.size()) + " does not match " +
                           shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

TensorPtr zeros(std::vector<int> shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr full(std::vector<int> shape, double v, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, v), requires_grad);
}

TensorPtr scalar(double v) { return make_leaf({1}, {v}); }

TensorPtr randn(std::vector<int> shape, Rng& rng, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    for (auto& d : data) d = rng.gaussian();
    return make_leaf(std::move(shape), std::move(data), requires_grad);
}

TensorPtr detach(const TensorPtr& x) {
    return make_leaf(x->shape, x->value, false);
}

// ---------------- elementwise ----------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) shape_fail("add", a->shape, b->shape);
    std::vector<double> v(a->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + b->value[i];
    return make_node("add", a->shape, std::move(v), {a, b},
                     [](const TensorPtr&, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> { return {g, g}; });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) shape_fail("sub", a->shape, b->shape);
    std::vector<double> v(a->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] - b->value[i];
    return make_node("sub", a->shape, std::move(v), {a, b},
                     [](const TensorPtr&, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         return {g, smul(g, -1.0)};
                     });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) shape_fail("mul", a->shape, b->shape);
    std::vector<double> v(a->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * b->value[i];
    return make_node("mul", a->shape, std::move(v), {a, b},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         return {mul(g, self->inputs[1]), mul(g, self->inputs[0])};
                     });
}

TensorPtr smul(const TensorPtr& x, double c) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x->value[i] * c;
    return make_node("smul", x->shape, std::move(v), {x},
                     [c](const TensorPtr&, const TensorPtr& g,
                         bool) -> std::vector<TensorPtr> { return {smul(g, c)}; });
}

TensorPtr sadd(const TensorPtr& x, double c) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x->value[i] + c;
    return make_node("sadd", x->shape, std::move(v), {x},
                     [](const TensorPtr&, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> { return {g}; });
}

TensorPtr neg(const TensorPtr& x) { return smul(x, -1.0); }

TensorPtr relu(const TensorPtr& x) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
    return make_node("relu", x->shape, std::move(v), {x},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         const auto& xv = self->inputs[0]->value;
                         std::vector<double> mask(xv.size());
                         for (std::size_t i = 0; i < xv.size(); ++i)
                             mask[i] = xv[i] > 0.0 ? 1.0 : 0.0;
                         // the mask is piecewise constant in x: no grad path
                         return {mul(g, make_leaf(self->shape, std::move(mask)))};
                     });
}

TensorPtr leaky_relu(const TensorPtr& x, double slope) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = x->value[i] > 0.0 ? x->value[i] : slope * x->value[i];
    return make_node("leaky_relu", x->shape, std::move(v), {x},
                     [slope](const TensorPtr& self, const TensorPtr& g,
                             bool) -> std::vector<TensorPtr> {
                         const auto& xv = self->inputs[0]->value;
                         std::vector<double> mask(xv.size());
                         for (std::size_t i = 0; i < xv.size(); ++i)
                             mask[i] = xv[i] > 0.0 ? 1.0 : slope;
                         return {mul(g, make_leaf(self->shape, std::move(mask)))};
                     });
}

TensorPtr sigmoid(const TensorPtr& x) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double xi = x->value[i];
        if (xi >= 0.0) {
            v[i] = 1.0 / (1.0 + std::exp(-xi));
        } else {
            double e = std::exp(xi);
            v[i] = e / (1.0 + e);
        }
    }
    return make_node("sigmoid", x->shape, std::move(v), {x},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         // y(1-y), with y kept in the graph
                         auto one_minus = sadd(smul(self, -1.0), 1.0);
                         return {mul(g, mul(self, one_minus))};
                     });
}

TensorPtr silu(const TensorPtr& x) { return mul(x, sigmoid(x)); }

TensorPtr tanh_(const TensorPtr& x) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(x->value[i]);
    return make_node("tanh", x->shape, std::move(v), {x},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         auto d = sadd(smul(mul(self, self), -1.0), 1.0);
                         return {mul(g, d)};
                     });
}

TensorPtr exp_(const TensorPtr& x) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(x->value[i]);
    return make_node("exp", x->shape, std::move(v), {x},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> { return {mul(g, self)}; });
}

TensorPtr log_(const TensorPtr& x) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(x->value[i]);
    return make_node("log", x->shape, std::move(v), {x},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         return {mul(g, pow_scalar(self->inputs[0], -1.0))};
                     });
}

TensorPtr sqrt_(const TensorPtr& x) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(x->value[i]);
    return make_node("sqrt", x->shape, std::move(v), {x},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         return {mul(g, smul(pow_scalar(self, -1.0), 0.5))};
                     });
}

TensorPtr square(const TensorPtr& x) { return mul(x, x); }

TensorPtr pow_scalar(const TensorPtr& x, double p) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::pow(x->value[i], p);
    return make_node("pow_scalar", x->shape, std::move(v), {x},
                     [p](const TensorPtr& self, const TensorPtr& g,
                         bool) -> std::vector<TensorPtr> {
                         return {mul(g, smul(pow_scalar(self->inputs[0], p - 1.0), p))};
                     });
}

TensorPtr softplus(const TensorPtr& x) {
    std::vector<double> v(x->numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double xi = x->value[i];
        v[i] = std::max(xi, 0.0) + std::log1p(std::exp(-std::abs(xi)));
    }
    return make_node("softplus", x->shape, std::move(v), {x},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         return {mul(g, sigmoid(self->inputs[0]))};
                     });
}

// ---------------- reductions / broadcast ----------------

TensorPtr sum_all(const TensorPtr& x) {
    double acc = 0.0;
    for (double v : x->value) acc += v;
    std::vector<int> in_shape = x->shape;
    return make_node("sum_all", {1}, {acc}, {x},
                     [in_shape](const TensorPtr&, const TensorPtr& g,
                                bool) -> std::vector<TensorPtr> {
                         auto flat = broadcast_to(
                             reshape(g, std::vector<int>(in_shape.size(), 1)),
                             in_shape);
                         return {flat};
                     });
}

TensorPtr mean_all(const TensorPtr& x) {
    return smul(sum_all(x), 1.0 / static_cast<double>(x->numel()));
}

TensorPtr sum_axes(const TensorPtr& x, const std::vector<bool>& reduce) {
    if (reduce.size() != x->shape.size())
        throw NumericError("sum_axes: reduce mask rank mismatch for " +
                           shape_str(x->shape));
    std::vector<int> out_shape = x->shape;
    for (std::size_t i = 0; i < reduce.size(); ++i)
        if (reduce[i]) out_shape[i] = 1;

    std::vector<double> out(shape_numel(out_shape), 0.0);
    const int rank = static_cast<int>(x->shape.size());
    std::vector<std::size_t> in_strides(rank, 1), out_strides(rank, 1);
    for (int i = rank - 2; i >= 0; --i)
        in_strides[i] = in_strides[i + 1] * x->shape[i + 1];
    for (int i = rank - 2; i >= 0; --i)
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

    std::vector<int> idx(rank, 0);
    for (std::size_t flat = 0; flat < x->numel(); ++flat) {
        std::size_t oflat = 0;
        for (int d = 0; d < rank; ++d)
            if (!reduce[d]) oflat += static_cast<std::size_t>(idx[d]) * out_strides[d];
        out[oflat] += x->value[flat];
        for (int d = rank - 1; d >= 0; --d) {
            if (++idx[d] < x->shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<int> in_shape = x->shape;
    return make_node("sum_axes", std::move(out_shape), std::move(out), {x},
                     [in_shape](const TensorPtr&, const TensorPtr& g,
                                bool) -> std::vector<TensorPtr> {
                         return {broadcast_to(g, in_shape)};
                     });
}

TensorPtr mean_axes(const TensorPtr& x, const std::vector<bool>& reduce) {
    std::size_t count = 1;
    for (std::size_t i = 0; i < reduce.size(); ++i)
        if (reduce[i]) count *= static_cast<std::size_t>(x->shape[i]);
    return smul(sum_axes(x, reduce), 1.0 / static_cast<double>(count));
}

TensorPtr broadcast_to(const TensorPtr& x, const std::vector<int>& shape) {
    if (x->shape.size() != shape.size())
        shape_fail("broadcast_to", x->shape, shape);
    const int rank = static_cast<int>(shape.size());
    for (int i = 0; i < rank; ++i)
        if (x->shape[i] != shape[i] && x->shape[i] != 1)
            shape_fail("broadcast_to", x->shape, shape);
    if (x->shape == shape) return x;

    std::vector<std::size_t> in_strides(rank, 1);
    for (int i = rank - 2; i >= 0; --i)
        in_strides[i] = in_strides[i + 1] * x->shape[i + 1];
    // zero stride on broadcast axes
    std::vector<std::size_t> strides(rank);
    for (int i = 0; i < rank; ++i)
        strides[i] = x->shape[i] == 1 ? 0 : in_strides[i];

    std::vector<double> out(shape_numel(shape));
    std::vector<int> idx(rank, 0);
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        std::size_t iflat = 0;
        for (int d = 0; d < rank; ++d)
            iflat += static_cast<std::size_t>(idx[d]) * strides[d];
        out[flat] = x->value[iflat];
        for (int d = rank - 1; d >= 0; --d) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<int> in_shape = x->shape;
    std::vector<int> out_shape = shape;
    return make_node("broadcast_to", out_shape, std::move(out), {x},
                     [in_shape, out_shape](const TensorPtr&, const TensorPtr& g,
                                           bool) -> std::vector<TensorPtr> {
                         std::vector<bool> reduce(in_shape.size());
                         for (std::size_t i = 0; i < in_shape.size(); ++i)
                             reduce[i] = in_shape[i] == 1 && out_shape[i] != 1;
                         return {sum_axes(g, reduce)};
                     });
}

// ---------------- shape ----------------

TensorPtr reshape(const TensorPtr& x, std::vector<int> shape) {
    if (shape_numel(shape) != x->numel())
        shape_fail("reshape", x->shape, shape);
    std::vector<int> in_shape = x->shape;
    return make_node("reshape", std::move(shape), x->value, {x},
                     [in_shape](const TensorPtr&, const TensorPtr& g,
                                bool) -> std::vector<TensorPtr> {
                         return {reshape(g, in_shape)};
                     });
}

TensorPtr transpose2d(const TensorPtr& x) {
    if (x->shape.size() != 2)
        throw NumericError("transpose2d: expected rank 2, got " +
                           shape_str(x->shape));
    int m = x->shape[0], n = x->shape[1];
    std::vector<double> v(x->numel());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            v[static_cast<std::size_t>(j) * m + i] =
                x->value[static_cast<std::size_t>(i) * n + j];
    return make_node("transpose2d", {n, m}, std::move(v), {x},
                     [](const TensorPtr&, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> { return {transpose2d(g)}; });
}

TensorPtr concat(const std::vector<TensorPtr>& parts, int axis) {
    if (parts.empty()) throw NumericError("concat: no inputs");
    const auto& ref = parts[0]->shape;
    axis_dim(parts[0], axis, "concat");
    int total = 0;
    for (const auto& p : parts) {
        if (p->shape.size() != ref.size()) shape_fail("concat", ref, p->shape);
        for (std::size_t d = 0; d < ref.size(); ++d)
            if (static_cast<int>(d) != axis && p->shape[d] != ref[d])
                shape_fail("concat", ref, p->shape);
        total += p->shape[axis];
    }
    std::vector<int> out_shape = ref;
    out_shape[axis] = total;

    std::size_t outer, mid, inner;
    split_axis(out_shape, axis, outer, mid, inner);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t pmid = p->shape[axis];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < pmid; ++m)
                std::copy_n(p->value.data() + (o * pmid + m) * inner, inner,
                            out.data() + (o * mid + off + m) * inner);
        off += pmid;
    }

    std::vector<int> sizes;
    for (const auto& p : parts) sizes.push_back(p->shape[axis]);
    return make_node("concat", std::move(out_shape), std::move(out), parts,
                     [axis, sizes](const TensorPtr&, const TensorPtr& g,
                                   bool) -> std::vector<TensorPtr> {
                         std::vector<TensorPtr> gs;
                         int start = 0;
                         for (int sz : sizes) {
                             gs.push_back(narrow(g, axis, start, sz));
                             start += sz;
                         }
                         return gs;
                     });
}

TensorPtr narrow(const TensorPtr& x, int axis, int start, int len) {
    int dim = axis_dim(x, axis, "narrow");
    if (start < 0 || len <= 0 || start + len > dim)
        throw NumericError("narrow: range [" + std::to_string(start) + "," +
                           std::to_string(start + len) + ") out of bounds for " +
                           shape_str(x->shape));
    std::vector<int> out_shape = x->shape;
    out_shape[axis] = len;
    std::size_t outer, mid, inner;
    split_axis(x->shape, axis, outer, mid, inner);
    std::vector<double> out(shape_numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o)
        for (int m = 0; m < len; ++m)
            std::copy_n(x->value.data() + (o * mid + start + m) * inner, inner,
                        out.data() + (o * len + m) * inner);
    int full = dim;
    return make_node("narrow", std::move(out_shape), std::move(out), {x},
                     [axis, start, full](const TensorPtr&, const TensorPtr& g,
                                         bool) -> std::vector<TensorPtr> {
                         return {pad_axis(g, axis, start, full)};
                     });
}

namespace {

// zero-pad x along axis so the original slice sits at [before, before+len)
TensorPtr pad_axis(const TensorPtr& x, int axis, int before, int full_len) {
    int len = x->shape[axis];
    std::vector<int> out_shape = x->shape;
    out_shape[axis] = full_len;
    std::size_t outer, mid, inner;
    split_axis(x->shape, axis, outer, mid, inner);
    (void)mid;
    std::vector<double> out(shape_numel(out_shape), 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (int m = 0; m < len; ++m)
            std::copy_n(x->value.data() + (o * len + m) * inner, inner,
                        out.data() + (o * full_len + before + m) * inner);
    int start = before, sz = len;
    return make_node("pad_axis", std::move(out_shape), std::move(out), {x},
                     [axis, start, sz](const TensorPtr&, const TensorPtr& g,
                                       bool) -> std::vector<TensorPtr> {
                         return {narrow(g, axis, start, sz)};
                     });
}

}  // namespace

// ---------------- linear algebra ----------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        shape_fail("matmul", a->shape, b->shape);
    int m = a->shape[0], k = a->shape[1], n = b->shape[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a->value.data() + static_cast<std::size_t>(i) * k;
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            const double* brow = b->value.data() + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_node("matmul", {m, n}, std::move(out), {a, b},
                     [](const TensorPtr& self, const TensorPtr& g,
                        bool) -> std::vector<TensorPtr> {
                         return {matmul(g, transpose2d(self->inputs[1])),
                                 matmul(transpose2d(self->inputs[0]), g)};
                     });
}

// ---------------- convolutions ----------------

TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, int stride, int pad) {
    if (x->shape.size() != 3 || w->shape.size() != 3 || x->shape[1] != w->shape[1])
        shape_fail("conv1d", x->shape, w->shape);
    int B = x->shape[0], Ci = x->shape[1], Li = x->shape[2];
    int Co = w->shape[0], K = w->shape[2];
    int Lo = conv_out_len(Li, K, stride, pad);
    if (Lo <= 0)
        throw NumericError("conv1d: non-positive output length for input " +
                           shape_str(x->shape));
    std::vector<double> out(static_cast<std::size_t>(B) * Co * Lo);
    kern_conv1d(x->value.data(), B, Ci, Li, w->value.data(), Co, K, stride, pad,
                out.data(), Lo);
    return make_node("conv1d", {B, Co, Lo}, std::move(out), {x, w},
                     [stride, pad, Li, K](const TensorPtr& self, const TensorPtr& g,
                                          bool) -> std::vector<TensorPtr> {
                         return {conv1d_data_grad(g, self->inputs[1], stride, pad, Li),
                                 conv1d_weight_grad(self->inputs[0], g, stride, pad, K)};
                     });
}

TensorPtr conv1d_data_grad(const TensorPtr& gy, const TensorPtr& w, int stride,
                           int pad, int in_len) {
    if (gy->shape.size() != 3 || w->shape.size() != 3 || gy->shape[1] != w->shape[0])
        shape_fail("conv1d_data_grad", gy->shape, w->shape);
    int B = gy->shape[0], Co = gy->shape[1], Lo = gy->shape[2];
    int Ci = w->shape[1], K = w->shape[2];
    std::vector<double> out(static_cast<std::size_t>(B) * Ci * in_len);
    kern_conv1d_dgrad(gy->value.data(), B, Co, Lo, w->value.data(), Ci, K,
                      stride, pad, out.data(), in_len);
    return make_node("conv1d_data_grad", {B, Ci, in_len}, std::move(out), {gy, w},
                     [stride, pad, K](const TensorPtr& self, const TensorPtr& g,
                                      bool) -> std::vector<TensorPtr> {
                         return {conv1d(g, self->inputs[1], stride, pad),
                                 conv1d_weight_grad(g, self->inputs[0], stride, pad, K)};
                     });
}

TensorPtr conv1d_weight_grad(const TensorPtr& x, const TensorPtr& gy, int stride,
                             int pad, int kernel) {
    if (x->shape.size() != 3 || gy->shape.size() != 3 || x->shape[0] != gy->shape[0])
        shape_fail("conv1d_weight_grad", x->shape, gy->shape);
    int B = x->shape[0], Ci = x->shape[1], Li = x->shape[2];
    int Co = gy->shape[1], Lo = gy->shape[2];
    std::vector<double> out(static_cast<std::size_t>(Co) * Ci * kernel);
    kern_conv1d_wgrad(x->value.data(), B, Ci, Li, gy->value.data(), Co, Lo,
                      stride, pad, kernel, out.data());
    int in_len = Li;
    return make_node("conv1d_weight_grad", {Co, Ci, kernel}, std::move(out),
                     {x, gy},
                     [stride, pad, in_len](const TensorPtr& self, const TensorPtr& g,
                                           bool) -> std::vector<TensorPtr> {
                         return {conv1d_data_grad(self->inputs[1], g, stride, pad, in_len),
                                 conv1d(self->inputs[0], g, stride, pad)};
                     });
}

TensorPtr conv_transpose1d(const TensorPtr& x, const TensorPtr& w, int stride,
                           int pad) {
    if (x->shape.size() != 3 || w->shape.size() != 3 || x->shape[1] != w->shape[0])
        shape_fail("conv_transpose1d", x->shape, w->shape);
    int B = x->shape[0], Ci = x->shape[1], Li = x->shape[2];
    int Co = w->shape[1], K = w->shape[2];
    int Lo = (Li - 1) * stride - 2 * pad + K;
    if (Lo <= 0)
        throw NumericError("conv_transpose1d: non-positive output length for " +
                           shape_str(x->shape));
    // adjoint of conv1d: reuse the dgrad kernel with w viewed as [Co',Ci',K]
    std::vector<double> out(static_cast<std::size_t>(B) * Co * Lo);
    kern_conv1d_dgrad(x->value.data(), B, Ci, Li, w->value.data(), Co, K, stride,
                      pad, out.data(), Lo);
    return make_node(
        "conv_transpose1d", {B, Co, Lo}, std::move(out), {x, w},
        [stride, pad, K](const TensorPtr& self, const TensorPtr& g,
                         bool create_graph) -> std::vector<TensorPtr> {
            if (create_graph) no_double_backward("conv_transpose1d");
            const auto& x_ = self->inputs[0];
            const auto& w_ = self->inputs[1];
            int B_ = x_->shape[0], Ci_ = x_->shape[1], Li_ = x_->shape[2];
            int Co_ = w_->shape[1], K_ = w_->shape[2];
            int Lo_ = self->shape[2];
            std::vector<double> gx(static_cast<std::size_t>(B_) * Ci_ * Li_);
            kern_conv1d(g->value.data(), B_, Co_, Lo_, w_->value.data(), Ci_, K_,
                        stride, pad, gx.data(), Li_);
            std::vector<double> gw(static_cast<std::size_t>(Ci_) * Co_ * K_);
            kern_conv1d_wgrad(g->value.data(), B_, Co_, Lo_, x_->value.data(),
                              Ci_, Li_, stride, pad, K_, gw.data());
            return {make_leaf(x_->shape, std::move(gx)),
                    make_leaf(w_->shape, std::move(gw))};
        });
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int stride, int pad) {
    if (x->shape.size() != 4 || w->shape.size() != 4 || x->shape[1] != w->shape[1])
        shape_fail("conv2d", x->shape, w->shape);
    int B = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
    int Co = w->shape[0], Kh = w->shape[2], Kw = w->shape[3];
    int Ho = conv_out_len(H, Kh, stride, pad);
    int Wo = conv_out_len(W, Kw, stride, pad);
    if (Ho <= 0 || Wo <= 0)
        throw NumericError("conv2d: non-positive output size for input " +
                           shape_str(x->shape));
    std::vector<double> out(static_cast<std::size_t>(B) * Co * Ho * Wo);
    kern_conv2d(x->value.data(), B, Ci, H, W, w->value.data(), Co, Kh, Kw,
                stride, pad, out.data(), Ho, Wo);
    return make_node(
        "conv2d", {B, Co, Ho, Wo}, std::move(out), {x, w},
        [stride, pad](const TensorPtr& self, const TensorPtr& g,
                      bool create_graph) -> std::vector<TensorPtr> {
            if (create_graph) no_double_backward("conv2d");
            const auto& x_ = self->inputs[0];
            const auto& w_ = self->inputs[1];
            int B_ = x_->shape[0], Ci_ = x_->shape[1], H_ = x_->shape[2],
                W_ = x_->shape[3];
            int Co_ = w_->shape[0], Kh_ = w_->shape[2], Kw_ = w_->shape[3];
            int Ho_ = self->shape[2], Wo_ = self->shape[3];
            std::vector<double> gx(x_->numel());
            kern_conv2d_dgrad(g->value.data(), B_, Co_, Ho_, Wo_,
                              w_->value.data(), Ci_, Kh_, Kw_, stride, pad,
                              gx.data(), H_, W_);
            std::vector<double> gw(w_->numel());
            kern_conv2d_wgrad(x_->value.data(), B_, Ci_, H_, W_, g->value.data(),
                              Co_, Ho_, Wo_, stride, pad, Kh_, Kw_, gw.data());
            return {make_leaf(x_->shape, std::move(gx)),
                    make_leaf(w_->shape, std::move(gw))};
        });
}

TensorPtr avg_pool1d(const TensorPtr& x, int kernel, int stride) {
    if (x->shape.size() != 3)
        throw NumericError("avg_pool1d: expected [B,C,L], got " +
                           shape_str(x->shape));
    int B = x->shape[0], C = x->shape[1], L = x->shape[2];
    int Lo = (L - kernel) / stride + 1;
    if (Lo <= 0)
        throw NumericError("avg_pool1d: non-positive output length for " +
                           shape_str(x->shape));
    std::vector<double> out(static_cast<std::size_t>(B) * C * Lo, 0.0);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xr = x->value.data() + (static_cast<std::size_t>(b) * C + c) * L;
            double* orow = out.data() + (static_cast<std::size_t>(b) * C + c) * Lo;
            for (int o = 0; o < Lo; ++o) {
                double acc = 0.0;
                for (int k = 0; k < kernel; ++k) acc += xr[o * stride + k];
                orow[o] = acc / kernel;
            }
        }
    return make_node(
        "avg_pool1d", {B, C, Lo}, std::move(out), {x},
        [kernel, stride](const TensorPtr& self, const TensorPtr& g,
                         bool create_graph) -> std::vector<TensorPtr> {
            if (create_graph) no_double_backward("avg_pool1d");
            const auto& x_ = self->inputs[0];
            int B_ = x_->shape[0], C_ = x_->shape[1], L_ = x_->shape[2];
            int Lo_ = self->shape[2];
            std::vector<double> gx(x_->numel(), 0.0);
            for (int b = 0; b < B_; ++b)
                for (int c = 0; c < C_; ++c) {
                    const double* gr =
                        g->value.data() + (static_cast<std::size_t>(b) * C_ + c) * Lo_;
                    double* gxr =
                        gx.data() + (static_cast<std::size_t>(b) * C_ + c) * L_;
                    for (int o = 0; o < Lo_; ++o)
                        for (int k = 0; k < kernel; ++k)
                            gxr[o * stride + k] += gr[o] / kernel;
                }
            return {make_leaf(x_->shape, std::move(gx))};
        });
}

// ---------------- autodiff drivers ----------------

namespace {

std::vector<TensorPtr> topo_order(const TensorPtr& root) {
    std::vector<TensorPtr> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<TensorPtr, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto node = stack.back().first;
        auto& idx = stack.back().second;
        if (idx < node->inputs.size()) {
            TensorPtr child = node->inputs[idx++];
            if (!visited.count(child.get())) {
                visited.insert(child.get());
                stack.emplace_back(std::move(child), 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // children before parents
}

void run_reverse(const std::vector<TensorPtr>& order,
                 std::unordered_map<Node*, TensorPtr>& grads,
                 bool create_graph) {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const TensorPtr& node = *it;
        if (!node->backward_fn) continue;
        auto git = grads.find(node.get());
        if (git == grads.end()) continue;
        auto gins = node->backward_fn(node, git->second, create_graph);
        if (gins.size() != node->inputs.size())
            throw NumericError(std::string(node->op) +
                               ": backward returned wrong arity");
        for (std::size_t i = 0; i < gins.size(); ++i) {
            const TensorPtr& input = node->inputs[i];
            if (!input->requires_grad || !gins[i]) continue;
            if (gins[i]->shape != input->shape)
                shape_fail(node->op, gins[i]->shape, input->shape);
            auto est = grads.find(input.get());
            if (est == grads.end())
                grads.emplace(input.get(), gins[i]);
            else
                est->second = add(est->second, gins[i]);
        }
    }
}

}  // namespace

void backward(const TensorPtr& loss) {
    if (loss->numel() != 1)
        throw NumericError("backward: loss must be scalar, got " +
                           shape_str(loss->shape));
    auto order = topo_order(loss);
    std::unordered_map<Node*, TensorPtr> grads;
    {
        NoGradGuard guard;  // plain value math only
        grads[loss.get()] = full(loss->shape, 1.0);
        run_reverse(order, grads, /*create_graph=*/false);
    }
    for (const auto& node : order) {
        if (!node->is_leaf() || !node->requires_grad) continue;
        auto git = grads.find(node.get());
        if (git == grads.end()) continue;
        node->ensure_grad();
        const auto& gv = git->second->value;
        for (std::size_t i = 0; i < gv.size(); ++i) node->grad[i] += gv[i];
    }
}

std::vector<TensorPtr> grad_of(const TensorPtr& loss,
                               const std::vector<TensorPtr>& wrt) {
    if (loss->numel() != 1)
        throw NumericError("grad_of: loss must be scalar, got " +
                           shape_str(loss->shape));
    if (!g_recording)
        throw NumericError("grad_of: grad recording is off");
    auto order = topo_order(loss);
    std::unordered_map<Node*, TensorPtr> grads;
    grads[loss.get()] = full(loss->shape, 1.0);
    run_reverse(order, grads, /*create_graph=*/true);
    std::vector<TensorPtr> result;
    result.reserve(wrt.size());
    for (const auto& t : wrt) {
        auto git = grads.find(t.get());
        result.push_back(git != grads.end() ? git->second : zeros(t->shape));
    }
    return result;
}

TensorPtr input_gradient(const TensorPtr& y, const TensorPtr& x) {
    if (y->shape.empty() || y->numel() != static_cast<std::size_t>(y->shape[0]))
        throw NumericError(
            "input_gradient: output must be one scalar per batch element, got " +
            shape_str(y->shape));
    auto total = sum_all(y);
    return grad_of(total, {x})[0];
}

}  // namespace ecgsynth::tensor
