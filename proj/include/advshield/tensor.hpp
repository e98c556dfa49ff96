#pragma once

// Dense tensors with dynamic, tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record their parents and a backward closure; operations on
// constant tensors record nothing, so frozen model weights never grow a graph.
// The graph lives exactly as long as the last handle to its root.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace advshield {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool consumed = false;  // a backward pass has already run through this node
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class Tensor {
   public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
        for (auto d : shape)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        if (shape_numel(shape) != values.size())
            throw ShapeError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor zeros(const Shape& shape) { return full(shape, 0.0); }
    static Tensor full(const Shape& shape, double v) {
        return Tensor(shape, std::vector<double>(shape_numel(shape), v));
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    // Writable view; only meaningful on leaves, where no graph depends on the values.
    std::span<double> mutable_data() {
        if (!node_->is_leaf()) throw std::logic_error("cannot mutate a non-leaf tensor in place");
        return node_->data;
    }
    std::vector<double> values() const { return node_->data; }

    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t i, std::size_t j) const { return node_->data[i * dim(1) + j]; }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->data[(i * dim(1) + j) * dim(2) + k];
    }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be set on leaves");
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    // Gradient of the last backward pass; zeros when none reached this tensor.
    std::vector<double> grad() const {
        if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
        return node_->grad;
    }
    Tensor grad_tensor() const { return Tensor(shape(), grad()); }
    void zero_grad() { node_->grad.clear(); }

    bool is_leaf() const { return node_->is_leaf(); }

    // New leaf holding a copy of the values, cut from any graph.
    Tensor detach() const { return Tensor(shape(), values()); }

    detail::Node& node() const { return *node_; }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

   private:
    std::shared_ptr<detail::Node> node_;
};

// Builds the result of an operation. The backward closure receives the result
// node (whose grad is populated) and must accumulate into the parents that
// require grad. When no parent requires grad the closure is dropped.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> backward_fn) {
    Tensor out(std::move(shape), std::move(values));
    bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
    if (any) {
        auto& n = out.node();
        n.requires_grad = true;
        for (auto& p : parents)
            if (p.defined()) n.parents.push_back(p.node_ptr());
        n.backward_fn = std::move(backward_fn);
    }
    return out;
}

enum class BackwardMode { reject_repeat, accumulate };

// Reverse topological accumulation from a scalar loss. Leaf gradients add onto
// whatever they already hold; running a second pass over the same graph is an
// error unless the caller opts into accumulation.
inline void backward(const Tensor& loss, BackwardMode mode = BackwardMode::reject_repeat) {
    if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
    seen.insert(&loss.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            detail::Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (auto* n : order) {
        if (n->is_leaf()) continue;
        if (n->consumed && mode == BackwardMode::reject_repeat)
            throw std::logic_error("backward() already ran through this graph; pass BackwardMode::accumulate");
        n->grad.assign(n->data.size(), 0.0);
    }
    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->is_leaf()) continue;
        n->backward_fn(*n);
        n->consumed = true;
    }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Bcast { same, right_scalar, left_scalar };

inline Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.numel() == 1) return Bcast::right_scalar;
    if (a.numel() == 1) return Bcast::left_scalar;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

// f(x, y) with partials dfx(x, y), dfy(x, y).
template <class F, class Dx, class Dy>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, Dx dfx, Dy dfy) {
    Bcast kind = broadcast_kind(a, b, name);
    const Shape& out_shape = kind == Bcast::left_scalar ? b.shape() : a.shape();
    std::size_t n = shape_numel(out_shape);
    auto ia = [kind](std::size_t i) { return kind == Bcast::left_scalar ? 0 : i; };
    auto ib = [kind](std::size_t i) { return kind == Bcast::right_scalar ? 0 : i; };
    std::vector<double> out(n);
    auto av = a.data(), bv = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ia(i)], bv[ib(i)]);
    return make_result(out_shape, std::move(out), {a, b}, [a, b, ia, ib, dfx, dfy, n](Node& self) {
        auto av = a.data(), bv = b.data();
        if (a.requires_grad()) {
            auto& g = a.node().grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[ia(i)] += self.grad[i] * dfx(av[ia(i)], bv[ib(i)]);
        }
        if (b.requires_grad()) {
            auto& g = b.node().grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[ib(i)] += self.grad[i] * dfy(av[ia(i)], bv[ib(i)]);
        }
    });
}

template <class F, class D>
Tensor unary(const Tensor& a, F f, D df) {
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return make_result(a.shape(), std::move(out), {a}, [a, df](Node& self) {
        auto av = a.data();
        auto& g = a.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(av[i], self.data[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Tensor add(const Tensor& a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, double s) { return add(a, -s); }
inline Tensor mul(const Tensor& a, double s) {
    return detail::unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline double sign_of(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

inline Tensor abs(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::fabs(x); }, [](double x, double) { return sign_of(x); });
}
// Piecewise constant: gradient is zero everywhere.
inline Tensor sign(const Tensor& a) {
    return detail::unary(a, sign_of, [](double, double) { return 0.0; });
}
inline Tensor square(const Tensor& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor sqrt(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}
inline Tensor tanh(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor exp(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& a) {
    auto av = a.data();
    double s = std::accumulate(av.begin(), av.end(), 0.0);
    return make_result({1}, {s}, {a}, [a](detail::Node& self) {
        auto& g = a.node().grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Same values, new shape. Gradient flows straight through.
inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    return make_result(std::move(shape), a.values(), {a}, [a](detail::Node& self) {
        auto& g = a.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor flatten(const Tensor& a) { return reshape(a, {a.numel()}); }

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel())
        throw ShapeError("dot: sizes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return sum(mul(flatten(a), flatten(b)));
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
    Shape s = a.shape();
    std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
    std::size_t batch = a.numel() / (r * c);
    std::swap(s[s.size() - 2], s[s.size() - 1]);
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
    return make_result(s, std::move(out), {a}, [a, batch, r, c](detail::Node& self) {
        auto& g = a.node().grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
    });
}

// Sub-tensor at index i of the leading axis.
inline Tensor select(const Tensor& a, std::size_t i) {
    if (a.rank() < 2 || i >= a.dim(0))
        throw ShapeError("select(" + std::to_string(i) + ") on " + shape_str(a.shape()));
    Shape s(a.shape().begin() + 1, a.shape().end());
    std::size_t n = shape_numel(s), off = i * n;
    std::vector<double> out(a.data().begin() + off, a.data().begin() + off + n);
    return make_result(s, std::move(out), {a}, [a, off, n](detail::Node& self) {
        auto& g = a.node().grad_buffer();
        for (std::size_t k = 0; k < n; ++k) g[off + k] += self.grad[k];
    });
}

// Splits `shape` around `axis` into (outer, n, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> axis_split(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    return {outer, shape[axis], inner};
}

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
    auto [outer, n, inner] = axis_split(a.shape(), axis);
    std::vector<double> out(a.numel());
    auto av = a.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * n * inner + in;
            double m = av[base];
            for (std::size_t j = 1; j < n; ++j) m = std::max(m, av[base + j * inner]);
            double z = 0;
            for (std::size_t j = 0; j < n; ++j) z += out[base + j * inner] = std::exp(av[base + j * inner] - m);
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    return make_result(a.shape(), std::move(out), {a}, [a, outer, n, inner](detail::Node& self) {
        auto& g = a.node().grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t base = o * n * inner + in;
                double s = 0;
                for (std::size_t j = 0; j < n; ++j) s += self.grad[base + j * inner] * self.data[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    std::size_t k = base + j * inner;
                    g[k] += self.data[k] * (self.grad[k] - s);
                }
            }
    });
}

// Population variance (1/n) along `axis`; the axis is removed from the shape.
inline Tensor variance(const Tensor& a, std::size_t axis) {
    auto [outer, n, inner] = axis_split(a.shape(), axis);
    Shape s = a.shape();
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    if (s.empty()) s = {1};
    std::vector<double> out(outer * inner), means(outer * inner);
    auto av = a.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * n * inner + in;
            double m = 0;
            for (std::size_t j = 0; j < n; ++j) m += av[base + j * inner];
            m /= static_cast<double>(n);
            double v = 0;
            for (std::size_t j = 0; j < n; ++j) {
                double d = av[base + j * inner] - m;
                v += d * d;
            }
            means[o * inner + in] = m;
            out[o * inner + in] = v / static_cast<double>(n);
        }
    return make_result(s, std::move(out), {a}, [a, outer, n, inner, means](detail::Node& self) {
        auto& g = a.node().grad_buffer();
        auto av = a.data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double gv = self.grad[o * inner + in] * 2.0 / static_cast<double>(n);
                double m = means[o * inner + in];
                std::size_t base = o * n * inner + in;
                for (std::size_t j = 0; j < n; ++j) g[base + j * inner] += gv * (av[base + j * inner] - m);
            }
    });
}

}  // namespace advshield
