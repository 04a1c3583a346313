#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ecgsynth/rng.hpp"

namespace ecgsynth::tensor {

class Node;
using TensorPtr = std::shared_ptr<Node>;

// Dense 64-bit float tensor participating in a define-by-run reverse-mode
// graph. Leaves own persistent `grad` buffers (populated by backward());
// interior nodes keep links to their inputs plus a backward function that
// expresses the input gradients in terms of graph ops, which is what makes
// second-order differentiation possible on the supported op subset.
class Node {
public:
    using BackwardFn = std::function<std::vector<TensorPtr>(
        const TensorPtr& self, const TensorPtr& grad_out, bool create_graph)>;

    std::vector<int> shape;
    std::vector<double> value;
    bool requires_grad = false;

    std::vector<TensorPtr> inputs;   // empty for leaves
    BackwardFn backward_fn;          // null for leaves
    const char* op = "leaf";

    // Accumulated gradient for leaves; empty until first backward().
    std::vector<double> grad;

    std::size_t numel() const { return value.size(); }
    bool is_leaf() const { return !backward_fn; }
    void zero_grad() { grad.assign(value.size(), 0.0); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Ambient tape switch. Ops record provenance only while recording is on and
// at least one input requires grad. Sampling loops and finite-difference
// probes run under NoGradGuard to avoid graph buildup.
bool grad_recording();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- leaf constructors ----
TensorPtr make_leaf(std::vector<int> shape, std::vector<double> data,
                    bool requires_grad = false);
TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
TensorPtr full(std::vector<int> shape, double v, bool requires_grad = false);
TensorPtr scalar(double v);
TensorPtr randn(std::vector<int> shape, Rng& rng, bool requires_grad = false);
/// Leaf sharing x's value but cut from the graph.
TensorPtr detach(const TensorPtr& x);

// ---- elementwise (equal shapes) ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr smul(const TensorPtr& x, double c);
TensorPtr sadd(const TensorPtr& x, double c);
TensorPtr neg(const TensorPtr& x);

// ---- elementwise unary ----
TensorPtr relu(const TensorPtr& x);
TensorPtr leaky_relu(const TensorPtr& x, double slope);
TensorPtr silu(const TensorPtr& x);
TensorPtr tanh_(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr exp_(const TensorPtr& x);
TensorPtr log_(const TensorPtr& x);
TensorPtr sqrt_(const TensorPtr& x);
TensorPtr square(const TensorPtr& x);
/// x^p elementwise; x must be positive when p is non-integral.
TensorPtr pow_scalar(const TensorPtr& x, double p);
/// log(1+e^x), evaluated stably. First-order only.
TensorPtr softplus(const TensorPtr& x);

// ---- reductions / broadcast ----
TensorPtr sum_all(const TensorPtr& x);    // -> [1]
TensorPtr mean_all(const TensorPtr& x);   // -> [1]
/// Sum over the axes where `reduce[axis]` is true, keeping them as size 1.
TensorPtr sum_axes(const TensorPtr& x, const std::vector<bool>& reduce);
TensorPtr mean_axes(const TensorPtr& x, const std::vector<bool>& reduce);
/// Repeat size-1 axes of x out to `shape` (ranks must match).
TensorPtr broadcast_to(const TensorPtr& x, const std::vector<int>& shape);

// ---- shape ----
TensorPtr reshape(const TensorPtr& x, std::vector<int> shape);
TensorPtr transpose2d(const TensorPtr& x);
TensorPtr concat(const std::vector<TensorPtr>& parts, int axis);
/// Slice `len` indices starting at `start` along `axis`.
TensorPtr narrow(const TensorPtr& x, int axis, int start, int len);

// ---- linear algebra ----
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);  // [m,k]x[k,n]

// ---- convolutions ----
// conv1d: x [B,Ci,L], w [Co,Ci,K]. Full double-backward support (the
// critic's gradient-penalty path runs through these three ops).
TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, int stride, int pad);
TensorPtr conv1d_data_grad(const TensorPtr& gy, const TensorPtr& w, int stride,
                           int pad, int in_len);
TensorPtr conv1d_weight_grad(const TensorPtr& x, const TensorPtr& gy,
                             int stride, int pad, int kernel);

// conv_transpose1d: x [B,Ci,L], w [Ci,Co,K]; out length (L-1)*stride-2*pad+K.
// First-order only (generator path).
TensorPtr conv_transpose1d(const TensorPtr& x, const TensorPtr& w, int stride,
                           int pad);

// conv2d: x [B,Ci,H,W], w [Co,Ci,Kh,Kw]; square stride/pad. First-order only
// (denoiser path).
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int stride, int pad);

/// Average pooling over the last axis of [B,C,L]. First-order only.
TensorPtr avg_pool1d(const TensorPtr& x, int kernel, int stride);

// ---- autodiff drivers ----

/// Reverse pass from a scalar loss; accumulates into the `grad` buffer of
/// every reachable leaf with requires_grad (repeat calls accumulate).
void backward(const TensorPtr& loss);

/// Symbolic gradients of a scalar w.r.t. `wrt`, left in the graph so a later
/// backward() can differentiate through them. Does not touch leaf `grad`
/// buffers. Throws if the path crosses an op without double-backward support.
std::vector<TensorPtr> grad_of(const TensorPtr& loss,
                               const std::vector<TensorPtr>& wrt);

/// Gradient of the per-sample scalar outputs w.r.t. x, batched: y must be
/// [B] or [B,1] and each element may depend only on its own batch slice.
/// Kept in the graph (used to build the gradient penalty).
TensorPtr input_gradient(const TensorPtr& y, const TensorPtr& x);

}  // namespace ecgsynth::tensor
