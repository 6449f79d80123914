#pragma once

// Dense double-precision tensor with tape-free reverse-mode autodiff.
//
// A Tensor is a shared handle. Every op whose inputs require gradients (while
// grad mode is on) attaches a Node to its output holding the inputs and a
// backward closure; the graph is the DAG reachable from an output. backward()
// orders it topologically and runs the closures in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mlcvnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct TensorImpl;
using GradFn = std::function<void(std::span<const double> grad_out)>;

struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    GradFn backward;
    const char* op = "";
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    std::vector<double>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
        if (numel_of(shape) != data.size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " needs " +
                                        std::to_string(numel_of(shape)) + " values, got " +
                                        std::to_string(data.size()));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor full(Shape shape, double v) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    bool defined() const noexcept { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    std::vector<double>& values() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    /// Gradient buffer; empty until a backward pass reaches this tensor.
    std::span<const double> grad() const { return impl_->grad; }
    std::vector<double>& grad_buffer() { return impl_->grad_buffer(); }
    bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return !impl_->node; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
        return impl_->data[0];
    }
    double operator()(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape.back() + j]; }
    double& operator()(std::size_t i, std::size_t j) { return impl_->data[i * impl_->shape.back() + j]; }

    /// Deep copy of the values only (no grad, no graph).
    Tensor clone() const { return Tensor(shape(), values()); }
    /// Same storage, cut from the graph.
    Tensor detach() const { return clone(); }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline Tensor record(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                     const char* op, auto make_backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = make_backward();
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
    return out;
}

inline Tensor record_many(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                          const char* op, auto make_backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = make_backward();
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
    return out;
}

/// Grad buffer of `t` if it participates in differentiation, else nullptr.
inline double* grad_target(const std::shared_ptr<TensorImpl>& t) {
    return t->requires_grad ? t->grad_buffer().data() : nullptr;
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r)
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                                    shape_str(t.shape()));
}

// C[m,n] += A[m,k] B[k,n]. Accumulation over k is sequential per element, so
// a row's result never depends on which other rows are present.
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[k,m]^T B[k,n]
inline void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t k,
                    std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* __restrict bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            double* __restrict ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

inline std::vector<double> transposed(const double* a, std::size_t m, std::size_t n) {
    std::vector<double> t(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

// Splits `shape` around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// `b` broadcasts against `a` when equal or a suffix of a's shape.
// Calls f(i, i % period) for i in [0, n) without a division per element.
template <class F>
inline void for_periodic(std::size_t n, std::size_t period, F&& f) {
    for (std::size_t base = 0; base < n; base += period)
        for (std::size_t j = 0; j < period; ++j) f(base + j, j);
}

inline std::size_t broadcast_period(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
    if (!ok)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    return b.numel();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> c(m * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n);
    return detail::record({m, n}, std::move(c), {a, b}, "matmul", [ai = a.impl(), bi = b.impl(), m, k, n] {
        return [ai, bi, m, k, n](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai)) {
                auto bt = detail::transposed(bi->data.data(), k, n);
                detail::gemm_nn(g.data(), bt.data(), ga, m, n, k);
            }
            if (double* gb = detail::grad_target(bi)) detail::gemm_tn(ai->data.data(), g.data(), gb, m, k, n);
        };
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    return detail::record({n, m}, detail::transposed(a.data().data(), m, n), {a}, "transpose",
                          [ai = a.impl(), m, n] {
                              return [ai, m, n](std::span<const double> g) {
                                  if (double* ga = detail::grad_target(ai))
                                      for (std::size_t i = 0; i < m; ++i)
                                          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                              };
                          });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t period = detail::broadcast_period(a, b, "add");
    std::vector<double> out(a.values());
    const auto bd = b.data();
    detail::for_periodic(out.size(), period, [&](std::size_t i, std::size_t j) { out[i] += bd[j]; });
    return detail::record(a.shape(), std::move(out), {a, b}, "add", [ai = a.impl(), bi = b.impl(), period] {
        return [ai, bi, period](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            if (double* gb = detail::grad_target(bi))
                detail::for_periodic(g.size(), period, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
        };
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    const std::size_t period = detail::broadcast_period(a, b, "sub");
    std::vector<double> out(a.values());
    const auto bd = b.data();
    detail::for_periodic(out.size(), period, [&](std::size_t i, std::size_t j) { out[i] -= bd[j]; });
    return detail::record(a.shape(), std::move(out), {a, b}, "sub", [ai = a.impl(), bi = b.impl(), period] {
        return [ai, bi, period](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            if (double* gb = detail::grad_target(bi))
                detail::for_periodic(g.size(), period, [&](std::size_t i, std::size_t j) { gb[j] -= g[i]; });
        };
    });
}

/// Elementwise product; `b` may broadcast over leading axes of `a`.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t period = detail::broadcast_period(a, b, "mul");
    std::vector<double> out(a.values());
    const auto bd = b.data();
    detail::for_periodic(out.size(), period, [&](std::size_t i, std::size_t j) { out[i] *= bd[j]; });
    return detail::record(a.shape(), std::move(out), {a, b}, "mul", [ai = a.impl(), bi = b.impl(), period] {
        return [ai, bi, period](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                detail::for_periodic(g.size(), period, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bi->data[j]; });
            if (double* gb = detail::grad_target(bi))
                detail::for_periodic(g.size(), period, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * ai->data[i]; });
        };
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.values());
    for (auto& v : out) v *= s;
    return detail::record(a.shape(), std::move(out), {a}, "scale", [ai = a.impl(), s] {
        return [ai, s](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        };
    });
}

/// a * s where `s` is a one-element tensor (differentiable in both).
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("mul_scalar: factor has shape " + shape_str(s.shape()));
    const double k = s.item();
    std::vector<double> out(a.values());
    for (auto& v : out) v *= k;
    return detail::record(a.shape(), std::move(out), {a, s}, "mul_scalar", [ai = a.impl(), si = s.impl()] {
        return [ai, si](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * si->data[0];
            if (double* gs = detail::grad_target(si)) {
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ai->data[i];
                gs[0] += acc;
            }
        };
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    return detail::record(a.shape(), std::move(out), {a}, "relu", [ai = a.impl()] {
        return [ai](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (ai->data[i] > 0.0) ga[i] += g[i];
        };
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = std::exp(v);
    auto res = detail::record(a.shape(), out, {a}, "exp", [ai = a.impl(), out] {
        return [ai, out](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out[i];
        };
    });
    return res;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return detail::record(std::move(shape), a.values(), {a}, "reshape", [ai = a.impl()] {
        return [ai](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw std::invalid_argument("concat: axis out of range for shape " + shape_str(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
        if (!ok) throw std::invalid_argument("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    const auto split = detail::split_axis(out_shape, axis);
    std::vector<std::size_t> widths;  // contiguous run per outer index, per part
    for (const auto& p : parts) widths.push_back(p.shape()[axis] * split.inner);
    const std::size_t row = split.extent * split.inner;
    std::vector<double> out(numel_of(out_shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        for (std::size_t o = 0; o < split.outer; ++o)
            std::copy_n(src.data() + o * widths[k], widths[k], out.data() + o * row + offset);
        offset += widths[k];
    }
    return detail::record_many(std::move(out_shape), std::move(out), parts, "concat", [&parts, widths, split, row] {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        return [impls, widths, split, row](std::span<const double> g) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < impls.size(); ++k) {
                if (double* gk = detail::grad_target(impls[k]))
                    for (std::size_t o = 0; o < split.outer; ++o)
                        for (std::size_t t = 0; t < widths[k]; ++t) gk[o * widths[k] + t] += g[o * row + offset + t];
                offset += widths[k];
            }
        };
    });
}

struct MaxResult {
    Tensor values;
    std::vector<std::size_t> argmax;  // index along the reduced axis, per output element
};

/// Max over `axis` (axis removed). Backward routes to the first argmax.
inline MaxResult max_reduce_with_index(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw std::invalid_argument("max_reduce: axis out of range for shape " + shape_str(a.shape()));
    const auto s = detail::split_axis(a.shape(), axis);
    if (s.extent == 0) throw std::invalid_argument("max_reduce: empty axis in shape " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    const auto src = a.data();
    std::vector<double> out(s.outer * s.inner);
    std::vector<std::size_t> arg(out.size(), 0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        const double* base = src.data() + o * s.extent * s.inner;
        double* dst = out.data() + o * s.inner;
        std::size_t* adst = arg.data() + o * s.inner;
        std::copy_n(base, s.inner, dst);
        for (std::size_t e = 1; e < s.extent; ++e) {
            const double* r = base + e * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i)
                if (r[i] > dst[i]) {
                    dst[i] = r[i];
                    adst[i] = e;
                }
        }
    }
    auto values = detail::record(std::move(out_shape), std::move(out), {a}, "max_reduce", [ai = a.impl(), arg, s] {
        return [ai, arg, s](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t o = 0; o < s.outer; ++o)
                    for (std::size_t i = 0; i < s.inner; ++i) {
                        const std::size_t k = o * s.inner + i;
                        ga[(o * s.extent + arg[k]) * s.inner + i] += g[k];
                    }
        };
    });
    return {std::move(values), std::move(arg)};
}

inline Tensor max_reduce(const Tensor& a, std::size_t axis) { return max_reduce_with_index(a, axis).values; }

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return detail::record({1}, {acc}, {a}, "sum", [ai = a.impl()] {
        return [ai](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < ai->data.size(); ++i) ga[i] += g[0];
        };
    });
}

/// Sum whose value depends only on the multiset of entries: terms are added in
/// ascending order, so any permutation of the input gives the same bits.
inline Tensor sum_order_invariant(const Tensor& a) {
    std::vector<double> sorted(a.values());
    std::sort(sorted.begin(), sorted.end());
    double acc = 0.0;
    for (double v : sorted) acc += v;
    return detail::record({1}, {acc}, {a}, "sum_order_invariant", [ai = a.impl()] {
        return [ai](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < ai->data.size(); ++i) ga[i] += g[0];
        };
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Rows `index` of a rank-2 tensor, in order (repeats allowed).
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
    detail::require_rank(a, 2, "gather_rows");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(index.size() * cols);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= rows)
            throw std::invalid_argument("gather_rows: index " + std::to_string(index[r]) + " out of range for shape " +
                                        shape_str(a.shape()));
        std::copy_n(a.data().data() + index[r] * cols, cols, out.data() + r * cols);
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return detail::record({idx.size(), cols}, std::move(out), {a}, "gather_rows", [ai = a.impl(), idx, cols] {
        return [ai, idx, cols](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t c = 0; c < cols; ++c) ga[idx[r] * cols + c] += g[r * cols + c];
        };
    });
}

/// Columns [begin, end) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require_rank(a, 2, "slice_cols");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (begin > end || end > cols)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") invalid for shape " + shape_str(a.shape()));
    const std::size_t w = end - begin;
    std::vector<double> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data().data() + r * cols + begin, w, out.data() + r * w);
    return detail::record({rows, w}, std::move(out), {a}, "slice_cols", [ai = a.impl(), rows, cols, begin, w] {
        return [ai, rows, cols, begin, w](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < w; ++c) ga[r * cols + begin + c] += g[r * w + c];
        };
    });
}

/// out[r] = a[r, cols[r]]
inline Tensor pick(const Tensor& a, std::span<const std::size_t> cols) {
    detail::require_rank(a, 2, "pick");
    const std::size_t rows = a.dim(0), width = a.dim(1);
    if (cols.size() != rows)
        throw std::invalid_argument("pick: " + std::to_string(cols.size()) + " indices for shape " + shape_str(a.shape()));
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (cols[r] >= width) throw std::invalid_argument("pick: column out of range for shape " + shape_str(a.shape()));
        out[r] = a.data()[r * width + cols[r]];
    }
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    return detail::record({rows}, std::move(out), {a}, "pick", [ai = a.impl(), idx, width] {
        return [ai, idx, width](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t r = 0; r < idx.size(); ++r) ga[r * width + idx[r]] += g[r];
        };
    });
}

/// Elementwise smooth-L1 (Huber) with transition at `beta`.
inline Tensor smooth_l1(const Tensor& a, double beta) {
    std::vector<double> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double ax = std::abs(x[i]);
        out[i] = ax < beta ? 0.5 * x[i] * x[i] / beta : ax - 0.5 * beta;
    }
    return detail::record(a.shape(), std::move(out), {a}, "smooth_l1", [ai = a.impl(), beta] {
        return [ai, beta](std::span<const double> g) {
            if (double* ga = detail::grad_target(ai))
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double v = ai->data[i];
                    const double d = std::abs(v) < beta ? v / beta : (v > 0 ? 1.0 : -1.0);
                    ga[i] += g[i] * d;
                }
        };
    });
}

/// Row-wise log-softmax of a rank-2 tensor (no graph; helper for losses and decoding).
inline std::vector<double> log_softmax_rows(std::span<const double> logits, std::size_t rows, std::size_t cols) {
    std::vector<double> out(logits.begin(), logits.end());
    for (std::size_t r = 0; r < rows; ++r) {
        double* x = out.data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) x[c] -= lz;
    }
    return out;
}

/// Weighted mean cross-entropy: sum_r w_r * -log softmax(logits_r)[target_r] / sum_r w_r.
/// Zero total weight yields 0.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> weights) {
    detail::require_rank(logits, 2, "cross_entropy");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (targets.size() != rows || weights.size() != rows)
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                                    std::to_string(weights.size()) + " weights for logits " +
                                    shape_str(logits.shape()));
    auto lsm = log_softmax_rows(logits.data(), rows, cols);
    double wsum = 0.0, acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols) throw std::invalid_argument("cross_entropy: target class out of range");
        wsum += weights[r];
        acc -= weights[r] * lsm[r * cols + targets[r]];
    }
    const double norm = wsum > 0.0 ? 1.0 / wsum : 0.0;
    std::vector<std::size_t> t(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    return detail::record({1}, {acc * norm}, {logits}, "cross_entropy",
                          [li = logits.impl(), lsm = std::move(lsm), t, w, norm, rows, cols] {
                              return [li, lsm, t, w, norm, rows, cols](std::span<const double> g) {
                                  double* gl = detail::grad_target(li);
                                  if (!gl) return;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      const double k = g[0] * w[r] * norm;
                                      if (k == 0.0) continue;
                                      for (std::size_t c = 0; c < cols; ++c)
                                          gl[r * cols + c] += k * (std::exp(lsm[r * cols + c]) - (c == t[r] ? 1.0 : 0.0));
                                  }
                              };
                          });
}

/// out[r] = sum_j weight[r][j] * src[index[r][j]]; `index`/`weight` are R x k row-major.
/// Differentiable in `src` only.
inline Tensor weighted_gather(const Tensor& src, std::span<const std::size_t> index, std::span<const double> weight,
                              std::size_t k) {
    detail::require_rank(src, 2, "weighted_gather");
    if (k == 0 || index.size() != weight.size() || index.size() % k != 0)
        throw std::invalid_argument("weighted_gather: inconsistent index/weight sizes");
    const std::size_t rows = index.size() / k, cols = src.dim(1);
    std::vector<double> out(rows * cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t s = index[r * k + j];
            if (s >= src.dim(0)) throw std::invalid_argument("weighted_gather: index out of range");
            const double w = weight[r * k + j];
            const double* sp = src.data().data() + s * cols;
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += w * sp[c];
        }
    std::vector<std::size_t> idx(index.begin(), index.end());
    std::vector<double> wt(weight.begin(), weight.end());
    return detail::record({rows, cols}, std::move(out), {src}, "weighted_gather", [si = src.impl(), idx, wt, k, rows, cols] {
        return [si, idx, wt, k, rows, cols](std::span<const double> g) {
            if (double* gs = detail::grad_target(si))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < k; ++j) {
                        double* dst = gs + idx[r * k + j] * cols;
                        const double w = wt[r * k + j];
                        for (std::size_t c = 0; c < cols; ++c) dst[c] += w * g[r * cols + c];
                    }
        };
    });
}

// ---------------------------------------------------------------------------
// Batch normalization over rows of an R x C tensor.
// ---------------------------------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// `running_mean`/`running_var` are C-element buffers updated in training mode
/// as running = momentum * running + (1 - momentum) * batch.
inline Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                            Tensor& running_var, bool training) {
    detail::require_rank(x, 2, "batch_norm_1d");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gamma.numel() != cols || beta.numel() != cols || running_mean.numel() != cols || running_var.numel() != cols)
        throw std::invalid_argument("batch_norm_1d: parameter width mismatch for input " + shape_str(x.shape()));
    if (rows == 0) throw std::invalid_argument("batch_norm_1d: empty input");
    const double* __restrict xd = x.data().data();
    std::vector<double> mu(cols, 0.0), var(cols, 0.0);
    if (training) {
        double* __restrict m = mu.data();
        double* __restrict v = var.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) m[c] += xd[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) m[c] /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = xd[r * cols + c] - m[c];
                v[c] += d * d;
            }
        for (std::size_t c = 0; c < cols; ++c) {
            const double unbiased = rows > 1 ? var[c] / static_cast<double>(rows - 1) : var[c];
            var[c] /= static_cast<double>(rows);
            running_mean.data()[c] = kBatchNormMomentum * running_mean.data()[c] + (1.0 - kBatchNormMomentum) * mu[c];
            running_var.data()[c] = kBatchNormMomentum * running_var.data()[c] + (1.0 - kBatchNormMomentum) * unbiased;
        }
    } else {
        std::copy_n(running_mean.data().data(), cols, mu.data());
        std::copy_n(running_var.data().data(), cols, var.data());
    }
    std::vector<double> inv_std(cols);
    for (std::size_t c = 0; c < cols; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + kBatchNormEps);
    auto xhat = std::make_shared<std::vector<double>>(rows * cols);
    std::vector<double> out(rows * cols);
    {
        const double* __restrict gd = gamma.data().data();
        const double* __restrict bd = beta.data().data();
        const double* __restrict m = mu.data();
        const double* __restrict is = inv_std.data();
        double* __restrict xh = xhat->data();
        double* __restrict o = out.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                xh[i] = (xd[i] - m[c]) * is[c];
                o[i] = gd[c] * xh[i] + bd[c];
            }
    }
    return detail::record(
        {rows, cols}, std::move(out), {x, gamma, beta}, "batch_norm_1d",
        [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat, inv_std, rows, cols, training] {
            return [xi, gi, bi, xhat, inv_std, rows, cols, training](std::span<const double> gs) {
                const double* __restrict g = gs.data();
                const double* __restrict xh = xhat->data();
                std::vector<double> sum_g(cols, 0.0), sum_gx(cols, 0.0);
                double* __restrict sg = sum_g.data();
                double* __restrict sgx = sum_gx.data();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) {
                        sg[c] += g[r * cols + c];
                        sgx[c] += g[r * cols + c] * xh[r * cols + c];
                    }
                if (double* gg = detail::grad_target(gi))
                    for (std::size_t c = 0; c < cols; ++c) gg[c] += sum_gx[c];
                if (double* gb = detail::grad_target(bi))
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += sum_g[c];
                if (double* __restrict gx = detail::grad_target(xi)) {
                    const double n = static_cast<double>(rows);
                    std::vector<double> k(cols), mean_g(cols), mean_gx(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                        k[c] = gi->data[c] * inv_std[c];
                        mean_g[c] = sum_g[c] / n;
                        mean_gx[c] = sum_gx[c] / n;
                    }
                    const double* __restrict kp = k.data();
                    const double* __restrict mg = mean_g.data();
                    const double* __restrict mgx = mean_gx.data();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) {
                            const std::size_t i = r * cols + c;
                            gx[i] += training ? kp[c] * (g[i] - mg[c] - xh[i] * mgx[c]) : kp[c] * g[i];
                        }
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Populates grads of every tensor reachable from `output` that requires grad.
/// Leaf grads accumulate across calls; intermediate grads are recomputed.
inline void backward(const Tensor& output) {
    if (output.numel() != 1)
        throw std::invalid_argument("backward: output must be scalar, got shape " + shape_str(output.shape()));
    if (!output.requires_grad()) return;

    std::vector<TensorImpl*> order;  // post-order: inputs before consumers
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{output.impl().get(), 0}};
    seen.insert(output.impl().get());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        if (t->node && next < t->node->inputs.size()) {
            TensorImpl* in = t->node->inputs[next++].get();
            if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
            continue;
        }
        order.push_back(t);
        stack.pop_back();
    }
    for (TensorImpl* t : order)
        if (t->node) t->grad.assign(t->data.size(), 0.0);
    output.impl()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (t->node) t->node->backward(t->grad);
    }
    for (TensorImpl* t : order)
        if (t->node && t != output.impl().get()) std::vector<double>().swap(t->grad);
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckOptions {
    double eps = 1e-5;
    /// When nonzero, check only this many evenly spaced elements per input.
    std::size_t max_probes_per_input = 0;
    /// Lower bound on the relative-error denominator.
    double floor = 1e-8;
};

/// Max over checked elements of |a - n| / max(|a|, |n|, floor), where `a` is the
/// autodiff gradient of `f` and `n` the central finite difference.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, GradCheckOptions opt = {}) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.grad_buffer();
        t.zero_grad();
    }
    {
        Tensor y = f();
        backward(y);
    }
    double worst = 0.0;
    NoGradGuard no_grad;
    for (auto& t : inputs) {
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        const std::size_t n = t.numel();
        std::size_t stride = 1;
        if (opt.max_probes_per_input && n > opt.max_probes_per_input) stride = n / opt.max_probes_per_input;
        for (std::size_t i = 0; i < n; i += stride) {
            const double x0 = t.data()[i];
            t.data()[i] = x0 + opt.eps;
            const double fp = f().item();
            t.data()[i] = x0 - opt.eps;
            const double fm = f().item();
            t.data()[i] = x0;
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double a = analytic[i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace mlcvnet
