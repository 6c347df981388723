#include "dynaquant/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>
#include <utility>

#include "gemm.hpp"

namespace dynaquant {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

namespace {

thread_local bool t_grad_enabled = true;

void check_shape(const Shape& shape) {
    for (auto extent : shape)
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return t_grad_enabled; }

namespace detail {

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value, std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward, const char* op) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    const bool any_input_tracked =
        std::any_of(inputs.begin(), inputs.end(), [](const BasicTensor<T>& t) { return t.defined() && t.requires_grad(); });
    if (backward && any_input_tracked && NoGradGuard::grad_enabled()) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return BasicTensor<T>(std::move(node));
}

}  // namespace detail

using detail::make_result;
using detail::Node;

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    check_shape(shape);
    if (values.size() != shape_numel(shape))
        throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    check_shape(shape);
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
    if (axis >= ndim()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from(node_->shape, node_->value, false);
}

// ---------------------------------------------------------------------------
// backward

template <typename T>
std::size_t backward(const BasicTensor<T>& root) {
    if (!root.defined() || root.numel() != 1)
        throw ContractError("backward() needs a scalar root, got shape " +
                            (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
    if (!root.requires_grad()) throw ContractError("backward() root does not require grad");

    // Iterative post-order DFS gives a topological order (inputs before consumers).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order)
        if (!node->is_leaf()) node->grad.assign(node->value.size(), T{0});
    root.node()->grad_buffer()[0] += T{1};

    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->backward(**it);
    return order.size();
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops

namespace {

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> a_stride;
    std::vector<std::size_t> b_stride;
    bool same = false;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        plan.same = true;
        return plan;
    }
    const std::size_t nd = std::max(a.size(), b.size());
    plan.out.assign(nd, 1);
    plan.a_stride.assign(nd, 0);
    plan.b_stride.assign(nd, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t r = 0; r < nd; ++r) {
        const std::size_t i = nd - 1 - r;
        const std::size_t ea = r < a.size() ? a[a.size() - 1 - r] : 1;
        const std::size_t eb = r < b.size() ? b[b.size() - 1 - r] : 1;
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                             " (dimension " + std::to_string(i) + ": " + std::to_string(ea) + " vs " +
                             std::to_string(eb) + ")");
        plan.out[i] = std::max(ea, eb);
        plan.a_stride[i] = ea == 1 ? 0 : sa;
        plan.b_stride[i] = eb == 1 ? 0 : sb;
        sa *= ea;
        sb *= eb;
    }
    return plan;
}

/// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
    const std::size_t n = shape_numel(plan.out);
    if (plan.same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const std::size_t nd = plan.out.size();
    std::vector<std::size_t> idx(nd, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            ia += plan.a_stride[d];
            ib += plan.b_stride[d];
            if (idx[d] < plan.out[d]) break;
            ia -= plan.a_stride[d] * plan.out[d];
            ib -= plan.b_stride[d] * plan.out[d];
            idx[d] = 0;
        }
    }
}

enum class BinaryKind { Add, Sub, Mul, Div };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinaryKind kind, const char* op) {
    auto plan = plan_broadcast(a.shape(), b.shape(), op);
    std::vector<T> out(shape_numel(plan.out));
    const auto av = a.data();
    const auto bv = b.data();
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        switch (kind) {
            case BinaryKind::Add: out[i] = av[ia] + bv[ib]; break;
            case BinaryKind::Sub: out[i] = av[ia] - bv[ib]; break;
            case BinaryKind::Mul: out[i] = av[ia] * bv[ib]; break;
            case BinaryKind::Div: out[i] = av[ia] / bv[ib]; break;
        }
    });
    auto out_shape = plan.out;
    return make_result<T>(
        std::move(out_shape), std::move(out), {a, b},
        [plan = std::move(plan), kind](Node<T>& self) {
            auto& na = *self.inputs[0];
            auto& nb = *self.inputs[1];
            T* ga = na.grad_buffer();
            T* gb = nb.grad_buffer();
            const auto& g = self.grad;
            for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                switch (kind) {
                    case BinaryKind::Add:
                        if (ga) ga[ia] += g[i];
                        if (gb) gb[ib] += g[i];
                        break;
                    case BinaryKind::Sub:
                        if (ga) ga[ia] += g[i];
                        if (gb) gb[ib] -= g[i];
                        break;
                    case BinaryKind::Mul:
                        if (ga) ga[ia] += g[i] * nb.value[ib];
                        if (gb) gb[ib] += g[i] * na.value[ia];
                        break;
                    case BinaryKind::Div:
                        if (ga) ga[ia] += g[i] / nb.value[ib];
                        if (gb) gb[ib] -= g[i] * na.value[ia] / (nb.value[ib] * nb.value[ib]);
                        break;
                }
            });
        },
        op);
}

/// Elementwise unary op; `local_grad(x, y)` is dy/dx.
template <typename T, typename Fwd, typename Grad>
BasicTensor<T> unary(const BasicTensor<T>& a, Fwd fwd, Grad local_grad, const char* op) {
    const auto av = a.data();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_result<T>(
        a.shape(), std::move(out), {a},
        [local_grad](Node<T>& self) {
            auto& in = *self.inputs[0];
            T* gi = in.grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gi[i] += self.grad[i] * local_grad(in.value[i], self.value[i]);
        },
        op);
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary(a, b, BinaryKind::Add, "add");
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary(a, b, BinaryKind::Sub, "sub");
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary(a, b, BinaryKind::Mul, "mul");
}
template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary(a, b, BinaryKind::Div, "div");
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T c) {
    return unary(a, [c](T x) { return x + c; }, [](T, T) { return T{1}; }, "add_scalar");
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T c) {
    return unary(a, [c](T x) { return x * c; }, [c](T, T) { return c; }, "mul_scalar");
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& a) {
    return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; }, "log");
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
    return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; }, "tanh");
}

template <typename T>
BasicTensor<T> softplus(const BasicTensor<T>& a) {
    return unary(
        a, [](T x) { return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x))); },
        [](T x, T) { return T{1} / (T{1} + std::exp(-x)); }, "softplus");
}

template <typename T>
BasicTensor<T> floor(const BasicTensor<T>& a) {
    std::vector<T> out(a.numel());
    std::transform(a.data().begin(), a.data().end(), out.begin(), [](T x) { return std::floor(x); });
    return BasicTensor<T>::from(a.shape(), std::move(out));
}

template <typename T>
BasicTensor<T> clip(const BasicTensor<T>& a, T lo, T hi) {
    if (!(lo <= hi)) throw ParameterError("clip: lo must not exceed hi");
    return unary(
        a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; }, "clip");
}

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& a, T slope) {
    return unary(
        a, [slope](T x) { return x > T{0} ? x : slope * x; }, [slope](T x, T) { return x > T{0} ? T{1} : slope; },
        "leaky_relu");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    double total = 0.0;
    for (T v : a.data()) total += v;
    return make_result<T>(
        {1}, {static_cast<T>(total)}, {a},
        [](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gi[i] += self.grad[0];
        },
        "sum");
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    double total = 0.0;
    for (T v : a.data()) total += v;
    const T n = static_cast<T>(a.numel());
    return make_result<T>(
        {1}, {static_cast<T>(total / n)}, {a},
        [n](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gi[i] += self.grad[0] / n;
        },
        "mean");
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mse: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double total = 0.0;
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        total += d * d;
    }
    const T n = static_cast<T>(av.size());
    return make_result<T>(
        {1}, {static_cast<T>(total / n)}, {a, b},
        [n](Node<T>& self) {
            auto& na = *self.inputs[0];
            auto& nb = *self.inputs[1];
            T* ga = na.grad_buffer();
            T* gb = nb.grad_buffer();
            const T scale = T{2} * self.grad[0] / n;
            for (std::size_t i = 0; i < na.value.size(); ++i) {
                const T d = scale * (na.value[i] - nb.value[i]);
                if (ga) ga[i] += d;
                if (gb) gb[i] -= d;
            }
        },
        "mse");
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    check_shape(shape);
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " has " + std::to_string(a.numel()) +
                         " elements, target " + shape_str(shape) + " has " + std::to_string(shape_numel(shape)));
    return make_result<T>(
        std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), {a},
        [](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gi[i] += self.grad[i];
        },
        "reshape");
}

namespace {

struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
    s.extent = shape[axis];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
    return s;
}

}  // namespace

template <typename T>
BasicTensor<T> select(const BasicTensor<T>& a, std::size_t axis, std::size_t index) {
    if (axis >= a.ndim()) throw ShapeError("select: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
    if (index >= a.dim(axis))
        throw ShapeError("select: index " + std::to_string(index) + " out of range for dimension " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
    const auto s = split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    std::vector<T> out(s.outer * s.inner);
    const auto av = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] = av[(o * s.extent + index) * s.inner + i];
    return make_result<T>(
        std::move(out_shape), std::move(out), {a},
        [s, index](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t i = 0; i < s.inner; ++i)
                    gi[(o * s.extent + index) * s.inner + i] += self.grad[o * s.inner + i];
        },
        "select");
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        Shape a = p.shape();
        Shape b = first;
        if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
        a[axis] = b[axis] = 0;
        if (a != b) throw ShapeError("concat: shape " + shape_str(p.shape()) + " incompatible with " + shape_str(first));
        extents.push_back(p.dim(axis));
        out_shape[axis] += p.dim(axis);
    }
    const auto s = split_at(out_shape, axis);
    std::vector<T> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].data();
        const std::size_t ext = extents[k];
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * ext * s.inner), ext * s.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * s.extent + offset) * s.inner));
        offset += ext;
    }
    return make_result<T>(
        std::move(out_shape), std::move(out), parts,
        [s, extents](Node<T>& self) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < extents.size(); ++k) {
                const std::size_t ext = extents[k];
                if (T* gi = self.inputs[k]->grad_buffer()) {
                    for (std::size_t o = 0; o < s.outer; ++o)
                        for (std::size_t j = 0; j < ext * s.inner; ++j)
                            gi[o * ext * s.inner + j] += self.grad[(o * s.extent + offset) * s.inner + j];
                }
                offset += ext;
            }
        },
        "concat");
}

template <typename T>
BasicTensor<T> crop2d(const BasicTensor<T>& a, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    if (a.ndim() < 2) throw ShapeError("crop2d: needs at least 2 dimensions, got " + shape_str(a.shape()));
    const std::size_t h = a.dim(a.ndim() - 2);
    const std::size_t w = a.dim(a.ndim() - 1);
    if (height == 0 || width == 0 || top + height > h || left + width > w)
        throw ShapeError("crop2d: window exceeds " + shape_str(a.shape()));
    const std::size_t planes = a.numel() / (h * w);
    Shape out_shape = a.shape();
    out_shape[out_shape.size() - 2] = height;
    out_shape[out_shape.size() - 1] = width;
    std::vector<T> out(planes * height * width);
    const auto av = a.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x)
                out[(p * height + y) * width + x] = av[(p * h + top + y) * w + left + x];
    return make_result<T>(
        std::move(out_shape), std::move(out), {a},
        [=](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t y = 0; y < height; ++y)
                    for (std::size_t x = 0; x < width; ++x)
                        gi[(p * h + top + y) * w + left + x] += self.grad[(p * height + y) * width + x];
        },
        "crop2d");
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
    return make_result<T>(
        {m, n}, std::move(out), {a, b},
        [m, k, n](Node<T>& self) {
            auto& na = *self.inputs[0];
            auto& nb = *self.inputs[1];
            if (T* ga = na.grad_buffer()) detail::gemm(false, true, m, k, n, self.grad.data(), nb.value.data(), ga, true);
            if (T* gb = nb.grad_buffer()) detail::gemm(true, false, k, n, m, na.value.data(), self.grad.data(), gb, true);
        },
        "matmul");
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    if (x.ndim() != 2 || weight.ndim() != 2 || x.dim(1) != weight.dim(1))
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    const std::size_t batch = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != out_f))
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs " + std::to_string(out_f) + " outputs");
    std::vector<T> out(batch * out_f);
    detail::gemm(false, true, batch, out_f, in, x.data().data(), weight.data().data(), out.data(), false);
    if (has_bias)
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t o = 0; o < out_f; ++o) out[r * out_f + o] += bias.data()[o];
    std::vector<BasicTensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_result<T>(
        {batch, out_f}, std::move(out), std::move(inputs),
        [batch, in, out_f, has_bias](Node<T>& self) {
            auto& nx = *self.inputs[0];
            auto& nw = *self.inputs[1];
            const T* g = self.grad.data();
            if (T* gx = nx.grad_buffer()) detail::gemm(false, false, batch, in, out_f, g, nw.value.data(), gx, true);
            if (T* gw = nw.grad_buffer()) detail::gemm(true, false, out_f, in, batch, g, nx.value.data(), gw, true);
            if (has_bias)
                if (T* gb = self.inputs[2]->grad_buffer())
                    for (std::size_t r = 0; r < batch; ++r)
                        for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
        },
        "linear");
}

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
    std::size_t col_rows() const { return c * kh * kw; }
    std::size_t col_cols() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column xx*stride + k - pad falls inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, std::size_t stride,
                                                       std::size_t k, std::size_t pad) {
    std::size_t lo = 0;
    if (k < pad) lo = (pad - k + stride - 1) / stride;
    const std::size_t limit = extent + pad;  // need xx*stride + k < limit
    std::size_t hi = limit > k ? (limit - k + stride - 1) / stride : 0;
    hi = std::min(hi, out);
    return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col, std::size_t ld) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const auto [ylo, yhi] = valid_range(g.oh, g.h, g.stride, ky, g.pad);
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const auto [xlo, xhi] = valid_range(g.ow, g.w, g.stride, kx, g.pad);
                T* row = col + ((ci * g.kh + ky) * g.kw + kx) * ld;
                std::fill(row, row + ylo * g.ow, T{0});
                for (std::size_t y = ylo; y < yhi; ++y) {
                    T* dst = row + y * g.ow;
                    const T* src = x + (ci * g.h + y * g.stride + ky - g.pad) * g.w + static_cast<std::ptrdiff_t>(kx) -
                                   static_cast<std::ptrdiff_t>(g.pad);
                    std::fill(dst, dst + xlo, T{0});
                    if (g.stride == 1)
                        std::copy(src + xlo, src + xhi, dst + xlo);
                    else
                        for (std::size_t xx = xlo; xx < xhi; ++xx) dst[xx] = src[xx * g.stride];
                    std::fill(dst + xhi, dst + g.ow, T{0});
                }
                std::fill(row + yhi * g.ow, row + g.col_cols(), T{0});
            }
        }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* dx, std::size_t ld) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const auto [ylo, yhi] = valid_range(g.oh, g.h, g.stride, ky, g.pad);
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const auto [xlo, xhi] = valid_range(g.ow, g.w, g.stride, kx, g.pad);
                const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * ld;
                for (std::size_t y = ylo; y < yhi; ++y) {
                    const T* src = row + y * g.ow;
                    T* dst = dx + (ci * g.h + y * g.stride + ky - g.pad) * g.w + static_cast<std::ptrdiff_t>(kx) -
                             static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t xx = xlo; xx < xhi; ++xx) dst[xx * g.stride] += src[xx];
                }
            }
        }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dOptions options) {
    if (x.ndim() != 4 || weight.ndim() != 4)
        throw ShapeError("conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) + " and " +
                         shape_str(weight.shape()));
    if (x.dim(1) != weight.dim(1))
        throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) + " vs weight in-channels " +
                         std::to_string(weight.dim(1)));
    if (options.stride == 0) throw ParameterError("conv2d: stride must be positive");
    ConvGeometry g{};
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.o = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.stride = options.stride;
    g.pad = options.padding;
    if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
        throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(x.shape()));
    g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != g.o))
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(g.o) + " output channels");

    // Per-image GEMMs keep forward values independent of batch composition.
    const std::size_t P = g.col_cols();
    std::vector<T> out(g.n * g.o * P);
    std::vector<T> col(g.col_rows() * P);
    const T* xv = x.data().data();
    for (std::size_t b = 0; b < g.n; ++b) {
        im2col(g, xv + b * g.c * g.h * g.w, col.data(), P);
        T* ob = out.data() + b * g.o * P;
        detail::gemm(false, false, g.o, P, g.col_rows(), weight.data().data(), col.data(), ob, false);
        if (has_bias)
            for (std::size_t oc = 0; oc < g.o; ++oc)
                for (std::size_t p = 0; p < P; ++p) ob[oc * P + p] += bias.data()[oc];
    }
    std::vector<BasicTensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_result<T>(
        {g.n, g.o, g.oh, g.ow}, std::move(out), std::move(inputs),
        [g, has_bias](Node<T>& self) {
            auto& nx = *self.inputs[0];
            auto& nw = *self.inputs[1];
            T* gx = nx.grad_buffer();
            T* gw = nw.grad_buffer();
            T* gb = has_bias ? self.inputs[2]->grad_buffer() : nullptr;
            const std::size_t P = g.col_cols(), ld = g.n * P;
            std::vector<T> go(g.o * ld);
            for (std::size_t b = 0; b < g.n; ++b)
                for (std::size_t oc = 0; oc < g.o; ++oc)
                    std::copy_n(self.grad.data() + (b * g.o + oc) * P, P, go.data() + oc * ld + b * P);
            // The backward pass batches all images into one column matrix (column b * P + p).
            std::vector<T> col(g.col_rows() * ld);
            if (gw) {
                for (std::size_t b = 0; b < g.n; ++b)
                    im2col(g, nx.value.data() + b * g.c * g.h * g.w, col.data() + b * P, ld);
                detail::gemm(false, true, g.o, g.col_rows(), ld, go.data(), col.data(), gw, true);
            }
            if (gx) {
                detail::gemm(true, false, g.col_rows(), ld, g.o, nw.value.data(), go.data(), col.data(), false);
                for (std::size_t b = 0; b < g.n; ++b) col2im(g, col.data() + b * P, gx + b * g.c * g.h * g.w, ld);
            }
            if (gb)
                for (std::size_t oc = 0; oc < g.o; ++oc) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < ld; ++p) acc += go[oc * ld + p];
                    gb[oc] += static_cast<T>(acc);
                }
        },
        "conv2d");
}

template <typename T>
BasicTensor<T> upsample_nearest2d(const BasicTensor<T>& x, std::size_t factor) {
    if (x.ndim() != 4) throw ShapeError("upsample_nearest2d: expected 4-d input, got " + shape_str(x.shape()));
    if (factor == 0) throw ParameterError("upsample_nearest2d: factor must be positive");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h * factor, ow = w * factor;
    std::vector<T> out(planes * oh * ow);
    const auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
    return make_result<T>(
        {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
        [=](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t xx = 0; xx < ow; ++xx)
                        gi[(p * h + y / factor) * w + xx / factor] += self.grad[(p * oh + y) * ow + xx];
        },
        "upsample_nearest2d");
}

template <typename T>
BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.ndim() != 4) throw ShapeError("adaptive_avg_pool2d: expected 4-d input, got " + shape_str(x.shape()));
    if (out_h == 0 || out_w == 0) throw ParameterError("adaptive_avg_pool2d: target size must be positive");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto bin = [](std::size_t i, std::size_t in, std::size_t out) {
        return std::pair<std::size_t, std::size_t>{(i * in) / out, ((i + 1) * in + out - 1) / out};
    };
    std::vector<T> out(planes * out_h * out_w);
    const auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < out_h; ++i) {
            const auto [y0, y1] = bin(i, h, out_h);
            for (std::size_t j = 0; j < out_w; ++j) {
                const auto [x0, x1] = bin(j, w, out_w);
                T acc{0};
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t xx = x0; xx < x1; ++xx) acc += xv[(p * h + y) * w + xx];
                out[(p * out_h + i) * out_w + j] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
            }
        }
    return make_result<T>(
        {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
        [=](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t i = 0; i < out_h; ++i) {
                    const auto [y0, y1] = bin(i, h, out_h);
                    for (std::size_t j = 0; j < out_w; ++j) {
                        const auto [x0, x1] = bin(j, w, out_w);
                        const T g = self.grad[(p * out_h + i) * out_w + j] / static_cast<T>((y1 - y0) * (x1 - x0));
                        for (std::size_t y = y0; y < y1; ++y)
                            for (std::size_t xx = x0; xx < x1; ++xx) gi[(p * h + y) * w + xx] += g;
                    }
                }
        },
        "adaptive_avg_pool2d");
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
    if (axis >= x.ndim()) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const auto s = split_at(x.shape(), axis);
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            const auto at = [&](std::size_t k) { return (o * s.extent + k) * s.inner + i; };
            T peak = xv[at(0)];
            for (std::size_t k = 1; k < s.extent; ++k) peak = std::max(peak, xv[at(k)]);
            T total{0};
            for (std::size_t k = 0; k < s.extent; ++k) total += out[at(k)] = std::exp(xv[at(k)] - peak);
            for (std::size_t k = 0; k < s.extent; ++k) out[at(k)] /= total;
        }
    return make_result<T>(
        x.shape(), std::move(out), {x},
        [s](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            const auto& y = self.value;
            const auto& g = self.grad;
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const auto at = [&](std::size_t k) { return (o * s.extent + k) * s.inner + i; };
                    T dot{0};
                    for (std::size_t k = 0; k < s.extent; ++k) dot += g[at(k)] * y[at(k)];
                    for (std::size_t k = 0; k < s.extent; ++k) gi[at(k)] += y[at(k)] * (g[at(k)] - dot);
                }
        },
        "softmax");
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, bool train, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
    if (!train || p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = uniform_open01(rng) >= p ? keep_scale : T{0};
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    return make_result<T>(
        x.shape(), std::move(out), {x},
        [mask = std::move(mask)](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < mask.size(); ++i) gi[i] += self.grad[i] * mask[i];
        },
        "dropout");
}

// ---------------------------------------------------------------------------
// Custom gradients

template <typename T>
CustomOp<T>::CustomOp(std::string name, Forward forward, Backward backward)
    : name_(std::make_shared<const std::string>(std::move(name))),
      forward_(std::move(forward)),
      backward_(std::move(backward)) {
    if (!forward_ || !backward_) throw ContractError("custom op '" + *name_ + "' needs both forward and backward rules");
}

template <typename T>
BasicTensor<T> CustomOp<T>::operator()(std::vector<BasicTensor<T>> inputs) const {
    Array<T> result = forward_(std::span<const BasicTensor<T>>(inputs));
    check_shape(result.shape);
    if (result.values.size() != shape_numel(result.shape))
        throw ContractError("custom op '" + *name_ + "' forward returned " + std::to_string(result.values.size()) +
                            " values for shape " + shape_str(result.shape));
    return make_result<T>(
        std::move(result.shape), std::move(result.values), inputs,
        [backward = backward_, name = name_](Node<T>& self) {
            std::vector<BasicTensor<T>> ins;
            ins.reserve(self.inputs.size());
            for (const auto& n : self.inputs) ins.emplace_back(n);
            auto grads = backward(std::span<const BasicTensor<T>>(ins), self.value, self.grad);
            if (grads.size() != ins.size())
                throw ContractError("custom op '" + *name + "' backward returned " + std::to_string(grads.size()) +
                                    " gradients for " + std::to_string(ins.size()) + " inputs");
            for (std::size_t k = 0; k < ins.size(); ++k) {
                if (grads[k].empty()) continue;
                if (grads[k].size() != ins[k].numel())
                    throw ContractError("custom op '" + *name + "' backward gradient " + std::to_string(k) + " has " +
                                        std::to_string(grads[k].size()) + " elements, input has shape " +
                                        shape_str(ins[k].shape()));
                if (T* gi = self.inputs[k]->grad_buffer())
                    for (std::size_t i = 0; i < grads[k].size(); ++i) gi[i] += grads[k][i];
            }
        },
        name_->c_str());
}

template <typename T>
BasicTensor<T> round_ste(const BasicTensor<T>& x) {
    static const CustomOp<T> op = register_custom_gradient<T>(
        "round_ste",
        [](std::span<const BasicTensor<T>> in) {
            Array<T> out{in[0].shape(), std::vector<T>(in[0].numel())};
            std::transform(in[0].data().begin(), in[0].data().end(), out.values.begin(), [](T v) { return std::round(v); });
            return out;
        },
        [](std::span<const BasicTensor<T>>, std::span<const T>, std::span<const T> upstream) {
            return std::vector<std::vector<T>>{std::vector<T>(upstream.begin(), upstream.end())};
        });
    return op({x});
}

template <typename T>
BasicTensor<T> straight_through(std::vector<T> hard, const BasicTensor<T>& soft) {
    if (hard.size() != soft.numel())
        throw ShapeError("straight_through: " + std::to_string(hard.size()) + " hard values for soft shape " +
                         shape_str(soft.shape()));
    return make_result<T>(
        soft.shape(), std::move(hard), {soft},
        [](Node<T>& self) {
            T* gi = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gi[i] += self.grad[i];
        },
        "straight_through");
}

// ---------------------------------------------------------------------------
// Explicit instantiation

#define DYNAQUANT_INSTANTIATE(T)                                                                                  \
    template class BasicTensor<T>;                                                                                \
    template class CustomOp<T>;                                                                                   \
    template BasicTensor<T> detail::make_result<T>(Shape, std::vector<T>, std::vector<BasicTensor<T>>,           \
                                                   std::function<void(Node<T>&)>, const char*);                   \
    template std::size_t backward<T>(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> div<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> add_scalar<T>(const BasicTensor<T>&, T);                                             \
    template BasicTensor<T> mul_scalar<T>(const BasicTensor<T>&, T);                                             \
    template BasicTensor<T> exp<T>(const BasicTensor<T>&);                                                        \
    template BasicTensor<T> log<T>(const BasicTensor<T>&);                                                        \
    template BasicTensor<T> tanh<T>(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> softplus<T>(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> floor<T>(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> clip<T>(const BasicTensor<T>&, T, T);                                                 \
    template BasicTensor<T> leaky_relu<T>(const BasicTensor<T>&, T);                                              \
    template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                                        \
    template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> mse<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                                             \
    template BasicTensor<T> select<T>(const BasicTensor<T>&, std::size_t, std::size_t);                           \
    template BasicTensor<T> concat<T>(const std::vector<BasicTensor<T>>&, std::size_t);                           \
    template BasicTensor<T> crop2d<T>(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
    template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);       \
    template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,        \
                                      Conv2dOptions);                                                             \
    template BasicTensor<T> upsample_nearest2d<T>(const BasicTensor<T>&, std::size_t);                            \
    template BasicTensor<T> adaptive_avg_pool2d<T>(const BasicTensor<T>&, std::size_t, std::size_t);              \
    template BasicTensor<T> softmax<T>(const BasicTensor<T>&, std::size_t);                                       \
    template BasicTensor<T> dropout<T>(const BasicTensor<T>&, double, bool, Rng&);                                \
    template BasicTensor<T> round_ste<T>(const BasicTensor<T>&);                                                  \
    template BasicTensor<T> straight_through<T>(std::vector<T>, const BasicTensor<T>&);

DYNAQUANT_INSTANTIATE(float)
DYNAQUANT_INSTANTIATE(double)

#undef DYNAQUANT_INSTANTIATE

}  // namespace dynaquant
