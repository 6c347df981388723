#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// Every op returns a new tensor whose node remembers its inputs and a backward
// closure. backward() sorts the reachable graph once and runs each closure exactly
// once in reverse topological order. Leaves (parameters, constants) accumulate
// gradients across backward() calls; intermediate gradients are reset per call.
//
// The engine is instantiated for float (training) and double (gradient checks).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dynaquant/errors.hpp"
#include "dynaquant/rng.hpp"

namespace dynaquant {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class BasicTensor;

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    const char* op = "leaf";

    bool is_leaf() const { return !backward; }

    /// Gradient buffer of a node, allocated on first use; nullptr when the node
    /// does not take gradients.
    T* grad_buffer() {
        if (!requires_grad) return nullptr;
        if (grad.empty()) grad.assign(value.size(), T{0});
        return grad.data();
    }
};

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value, std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward, const char* op);

}  // namespace detail

/// Thread-local switch: while a guard is alive no op records backward closures.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool grad_enabled();

private:
    bool previous_;
};

template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T{0}, requires_grad); }
    static BasicTensor scalar(T value, bool requires_grad = false) { return full({1}, value, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    /// Direct write access for initializers and optimizers; never call while a
    /// graph that depends on this tensor still needs its forward values.
    std::span<T> mutable_data() { return node_->value; }
    T item() const;
    T at(std::size_t flat_index) const { return node_->value.at(flat_index); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool has_grad() const { return !node_->grad.empty(); }
    /// Empty span until a backward pass has reached this tensor.
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    /// Same values, cut from the graph.
    BasicTensor detach() const;
    const char* op_name() const { return node_->op; }

    const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
    explicit BasicTensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Runs reverse accumulation from a scalar root. Returns the number of graph nodes
/// visited (each reachable node exactly once).
template <typename T>
std::size_t backward(const BasicTensor<T>& root);

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style broadcasting.

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T c);
template <typename T> BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T c);
template <typename T> BasicTensor<T> neg(const BasicTensor<T>& a) { return mul_scalar(a, T{-1}); }

template <typename T> BasicTensor<T> exp(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> log(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> softplus(const BasicTensor<T>& a);
/// Not differentiable: the result never requires grad.
template <typename T> BasicTensor<T> floor(const BasicTensor<T>& a);
/// Identity gradient inside [lo, hi], zero outside.
template <typename T> BasicTensor<T> clip(const BasicTensor<T>& a, T lo, T hi);
template <typename T> BasicTensor<T> leaky_relu(const BasicTensor<T>& a, T slope);

// ---------------------------------------------------------------------------
// Reductions and shape manipulation.

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);
/// mean((a - b)^2) over all elements; shapes must match exactly.
template <typename T> BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
/// Picks index `index` along `axis` and drops that axis.
template <typename T> BasicTensor<T> select(const BasicTensor<T>& a, std::size_t axis, std::size_t index);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
/// Window [top, top+height) x [left, left+width) of the two trailing axes.
template <typename T>
BasicTensor<T> crop2d(const BasicTensor<T>& a, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Network layers.

/// (m, k) x (k, n) -> (m, n).
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// x (batch, in), weight (out, in), optional bias (out) -> (batch, out).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// x (N, C, H, W), weight (O, C, kh, kw), optional bias (O). Zero padding.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dOptions options = {});
template <typename T> BasicTensor<T> upsample_nearest2d(const BasicTensor<T>& x, std::size_t factor);
/// PyTorch bin convention: bin i spans [floor(i*H/oh), ceil((i+1)*H/oh)).
template <typename T>
BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);
/// Inverted dropout: kept activations scaled by 1/(1-p) when training, identity otherwise.
template <typename T> BasicTensor<T> dropout(const BasicTensor<T>& x, double p, bool train, Rng& rng);

// ---------------------------------------------------------------------------
// Custom gradients.

/// Shape + values of a forward result.
template <typename T>
struct Array {
    Shape shape;
    std::vector<T> values;
};

/// An op whose forward value comes from `forward` verbatim and whose backward
/// comes from `backward` verbatim, bypassing autodiff of the forward function.
template <typename T>
class CustomOp {
public:
    using Forward = std::function<Array<T>(std::span<const BasicTensor<T>> inputs)>;
    /// Maps (inputs, forward output, upstream gradient) to one gradient buffer per
    /// input. An empty buffer means "no gradient for this input"; any other size must
    /// equal the input's element count.
    using Backward = std::function<std::vector<std::vector<T>>(
        std::span<const BasicTensor<T>> inputs, std::span<const T> output, std::span<const T> upstream)>;

    CustomOp(std::string name, Forward forward, Backward backward);

    BasicTensor<T> operator()(std::vector<BasicTensor<T>> inputs) const;
    const std::string& name() const { return *name_; }

private:
    std::shared_ptr<const std::string> name_;
    Forward forward_;
    Backward backward_;
};

template <typename T>
CustomOp<T> register_custom_gradient(std::string name, typename CustomOp<T>::Forward forward,
                                     typename CustomOp<T>::Backward backward) {
    return CustomOp<T>(std::move(name), std::move(forward), std::move(backward));
}

/// Forward: round half away from zero. Backward: identity (straight-through).
template <typename T> BasicTensor<T> round_ste(const BasicTensor<T>& x);

/// Forward value `hard` (same shape as `soft`); gradient passes to `soft` unchanged.
template <typename T>
BasicTensor<T> straight_through(std::vector<T> hard, const BasicTensor<T>& soft);

// Operator sugar.
template <typename T> BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <typename T> BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <typename T> BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }
template <typename T> BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) { return div(a, b); }
template <typename T> BasicTensor<T> operator+(const BasicTensor<T>& a, T c) { return add_scalar(a, c); }
template <typename T> BasicTensor<T> operator*(const BasicTensor<T>& a, T c) { return mul_scalar(a, c); }
template <typename T> BasicTensor<T> operator*(T c, const BasicTensor<T>& a) { return mul_scalar(a, c); }

}  // namespace dynaquant
