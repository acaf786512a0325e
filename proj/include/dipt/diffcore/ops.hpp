#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dipt/diffcore/tensor.hpp"

// Differentiable primitives. Each op computes its value eagerly and, when any
// operand requires grad, records a backward rule on the current tape.

namespace dipt {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <class T>
BasicTensor<T> make_output(Shape shape, std::vector<T> value, bool requires_grad) {
    return BasicTensor<T>(std::move(shape), std::move(value), requires_grad && grad_enabled());
}

template <class T>
void record(std::string_view op, const BasicTensor<T>& out, std::vector<NodePtr<T>> inputs,
            typename BasicTape<T>::BackwardFn fn) {
    BasicTape<T>::current().record(op, out.node(), std::move(inputs), std::move(fn));
}

// True when `suffix` equals the trailing dims of `shape`.
inline bool is_suffix(const Shape& shape, const Shape& suffix) {
    if (suffix.size() > shape.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), shape.rbegin());
}

inline void require_same(std::string_view op, const Shape& expected, const Shape& actual) {
    if (expected != actual) throw ShapeError(std::string(op), to_string(expected), actual);
}

}  // namespace detail

/// Batched matrix product. a: [..., M, K]; b: [K, N] (shared) or [..., K, N] (same batch dims).
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() < 2) throw ShapeError("matmul", "lhs of rank >= 2", a.shape());
    if (b.rank() < 2) throw ShapeError("matmul", "rhs of rank >= 2", b.shape());
    const std::size_t m = a.dim(a.rank() - 2);
    const std::size_t k = a.dim(a.rank() - 1);
    const std::size_t n = b.dim(b.rank() - 1);
    const bool shared_rhs = b.rank() == 2;
    if (b.dim(b.rank() - 2) != k) {
        throw ShapeError("matmul", "rhs with " + std::to_string(k) + " rows (lhs " + to_string(a.shape()) + ")",
                         b.shape());
    }
    if (!shared_rhs) {
        Shape a_batch(a.shape().begin(), a.shape().end() - 2);
        Shape b_batch(b.shape().begin(), b.shape().end() - 2);
        if (a_batch != b_batch) {
            throw ShapeError("matmul", "rhs batch dims " + to_string(a_batch), b.shape());
        }
    }
    const std::size_t batch = a.size() / (m * k);
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);

    std::vector<T> out(batch * m * n);
    using detail::ConstMatMap;
    using detail::MatMap;
    if (shared_rhs) {
        ConstMatMap<T> A(a.data().data(), batch * m, k);
        ConstMatMap<T> B(b.data().data(), k, n);
        MatMap<T>(out.data(), batch * m, n).noalias() = A * B;
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> A(a.data().data() + i * m * k, m, k);
            ConstMatMap<T> B(b.data().data() + i * k * n, k, n);
            MatMap<T>(out.data() + i * m * n, m, n).noalias() = A * B;
        }
    }
    auto result = detail::make_output<T>(std::move(out_shape), std::move(out), detail::any_requires_grad<T>({&a, &b}));
    if (result.requires_grad()) {
        detail::record<T>("matmul", result, {a.node(), b.node()},
                          [an = a.node(), bn = b.node(), batch, m, k, n, shared_rhs](const detail::Node<T>& o) {
                              if (an->requires_grad) {
                                  an->ensure_grad();
                                  if (shared_rhs) {
                                      ConstMatMap<T> G(o.grad.data(), batch * m, n);
                                      ConstMatMap<T> B(bn->value.data(), k, n);
                                      MatMap<T>(an->grad.data(), batch * m, k).noalias() += G * B.transpose();
                                  } else {
                                      for (std::size_t i = 0; i < batch; ++i) {
                                          ConstMatMap<T> G(o.grad.data() + i * m * n, m, n);
                                          ConstMatMap<T> B(bn->value.data() + i * k * n, k, n);
                                          MatMap<T>(an->grad.data() + i * m * k, m, k).noalias() += G * B.transpose();
                                      }
                                  }
                              }
                              if (bn->requires_grad) {
                                  bn->ensure_grad();
                                  if (shared_rhs) {
                                      ConstMatMap<T> G(o.grad.data(), batch * m, n);
                                      ConstMatMap<T> A(an->value.data(), batch * m, k);
                                      MatMap<T>(bn->grad.data(), k, n).noalias() += A.transpose() * G;
                                  } else {
                                      for (std::size_t i = 0; i < batch; ++i) {
                                          ConstMatMap<T> G(o.grad.data() + i * m * n, m, n);
                                          ConstMatMap<T> A(an->value.data() + i * m * k, m, k);
                                          MatMap<T>(bn->grad.data() + i * k * n, k, n).noalias() += A.transpose() * G;
                                      }
                                  }
                              }
                          });
    }
    return result;
}

/// a @ b^T over the last two axes. a: [..., M, K]; b: [..., N, K] with the same batch dims.
template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() < 2 || a.rank() != b.rank()) throw ShapeError("matmul_nt", "operands of equal rank >= 2", b.shape());
    const std::size_t m = a.dim(a.rank() - 2);
    const std::size_t k = a.dim(a.rank() - 1);
    const std::size_t n = b.dim(b.rank() - 2);
    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    if (a_batch != b_batch || b.dim(b.rank() - 1) != k) {
        Shape want = a_batch;
        want.push_back(n);
        want.push_back(k);
        throw ShapeError("matmul_nt", "rhs " + to_string(want), b.shape());
    }
    const std::size_t batch = a.size() / (m * k);
    Shape out_shape(a_batch);
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(batch * m * n);
    using detail::ConstMatMap;
    using detail::MatMap;
    for (std::size_t i = 0; i < batch; ++i) {
        ConstMatMap<T> A(a.data().data() + i * m * k, m, k);
        ConstMatMap<T> B(b.data().data() + i * n * k, n, k);
        MatMap<T>(out.data() + i * m * n, m, n).noalias() = A * B.transpose();
    }
    auto result = detail::make_output<T>(std::move(out_shape), std::move(out), detail::any_requires_grad<T>({&a, &b}));
    if (result.requires_grad()) {
        detail::record<T>("matmul_nt", result, {a.node(), b.node()},
                          [an = a.node(), bn = b.node(), batch, m, k, n](const detail::Node<T>& o) {
                              if (an->requires_grad) an->ensure_grad();
                              if (bn->requires_grad) bn->ensure_grad();
                              for (std::size_t i = 0; i < batch; ++i) {
                                  ConstMatMap<T> G(o.grad.data() + i * m * n, m, n);
                                  if (an->requires_grad) {
                                      ConstMatMap<T> B(bn->value.data() + i * n * k, n, k);
                                      MatMap<T>(an->grad.data() + i * m * k, m, k).noalias() += G * B;
                                  }
                                  if (bn->requires_grad) {
                                      ConstMatMap<T> A(an->value.data() + i * m * k, m, k);
                                      MatMap<T>(bn->grad.data() + i * n * k, n, k).noalias() += G.transpose() * A;
                                  }
                              }
                          });
    }
    return result;
}

namespace detail {

// Elementwise binary op where b's shape is a suffix of a's (b broadcast over leading dims).
template <class T, class Fwd, class GradA, class GradB>
BasicTensor<T> broadcast_binary(std::string_view name, const BasicTensor<T>& a, const BasicTensor<T>& b, Fwd fwd,
                                GradA grad_a, GradB grad_b) {
    if (!is_suffix(a.shape(), b.shape())) {
        throw ShapeError(std::string(name), "a trailing sub-shape of " + to_string(a.shape()), b.shape());
    }
    const std::size_t inner = b.size();
    const std::size_t outer = a.size() / inner;
    std::vector<T> out(a.size());
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (std::size_t i = 0; i < outer; ++i) {
        for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = fwd(av[i * inner + j], bv[j]);
    }
    auto result = make_output<T>(a.shape(), std::move(out), any_requires_grad<T>({&a, &b}));
    if (result.requires_grad()) {
        record<T>(name, result, {a.node(), b.node()},
                  [an = a.node(), bn = b.node(), inner, outer, grad_a, grad_b](const Node<T>& o) {
                      if (an->requires_grad) {
                          an->ensure_grad();
                          for (std::size_t i = 0; i < outer; ++i)
                              for (std::size_t j = 0; j < inner; ++j) {
                                  const auto idx = i * inner + j;
                                  an->grad[idx] += grad_a(o.grad[idx], an->value[idx], bn->value[j]);
                              }
                      }
                      if (bn->requires_grad) {
                          bn->ensure_grad();
                          for (std::size_t i = 0; i < outer; ++i)
                              for (std::size_t j = 0; j < inner; ++j) {
                                  const auto idx = i * inner + j;
                                  bn->grad[j] += grad_b(o.grad[idx], an->value[idx], bn->value[j]);
                              }
                      }
                  });
    }
    return result;
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx given input x and output y.
template <class T, class Fwd, class Deriv>
BasicTensor<T> unary(std::string_view name, const BasicTensor<T>& x, Fwd fwd, Deriv deriv) {
    std::vector<T> out(x.size());
    const T* xv = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    auto result = make_output<T>(x.shape(), std::move(out), x.requires_grad());
    if (result.requires_grad()) {
        record<T>(name, result, {x.node()}, [xn = x.node(), deriv](const Node<T>& o) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] * deriv(xn->value[i], o.value[i]);
        });
    }
    return result;
}

}  // namespace detail

/// a + b, with b broadcast over a's leading dims when its shape is a suffix of a's.
template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::broadcast_binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::broadcast_binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

/// Elementwise product with the same broadcasting rule as add().
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::broadcast_binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
        [](T g, T x, T) { return g * x; });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
    return detail::unary<T>(
        "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, T slope) {
    return detail::unary<T>(
        "leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

/// Exact (erf) GELU.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    const auto n = static_cast<Eigen::Index>(x.size());
    // Eigen peels scalar iterations up to the first aligned address, and the scalar and
    // packet erf/exp differ in the last bit. Owned arrays are always aligned, so the
    // split point, and with it the result, does not depend on where the heap put x.
    const Arr xv = Eigen::Map<const Arr>(x.data().data(), n);
    const Arr yv = T(0.5) * xv * (T(1) + (xv * inv_sqrt2).erf());
    std::vector<T> out(yv.data(), yv.data() + n);
    auto result = detail::make_output<T>(x.shape(), std::move(out), x.requires_grad());
    if (result.requires_grad()) {
        detail::record<T>("gelu", result, {x.node()}, [xn = x.node(), n, inv_sqrt2, inv_sqrt_2pi](const detail::Node<T>& o) {
            xn->ensure_grad();
            const Arr xs = Eigen::Map<const Arr>(xn->value.data(), n);
            const Arr g = Eigen::Map<const Arr>(o.grad.data(), n);
            const Arr d = g * (T(0.5) * (T(1) + (xs * inv_sqrt2).erf()) + xs * inv_sqrt_2pi * (T(-0.5) * xs.square()).exp());
            Eigen::Map<Arr>(xn->grad.data(), n) += d;
        });
    }
    return result;
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape", "a shape with " + std::to_string(x.size()) + " elements", shape);
    }
    auto result = detail::make_output<T>(std::move(shape), x.values(), x.requires_grad());
    if (result.requires_grad()) {
        detail::record<T>("reshape", result, {x.node()}, [xn = x.node()](const detail::Node<T>& o) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        });
    }
    return result;
}

namespace detail {

// Walks the output of a permutation in row-major order and calls
// visit(out_offset, in_offset, run) for each contiguous run of `run` elements.
template <class Visit>
void for_each_permuted_run(const Shape& out_shape, const std::vector<std::size_t>& src_strides, Visit&& visit) {
    const std::size_t r = out_shape.size();
    if (r == 0) {
        visit(0, 0, 1);
        return;
    }
    // The innermost axis is contiguous in the source only if its stride is 1.
    const std::size_t run = src_strides[r - 1] == 1 ? out_shape[r - 1] : 1;
    const std::size_t outer_rank = run > 1 ? r - 1 : r;
    std::vector<std::size_t> idx(outer_rank, 0);
    const std::size_t total = numel(out_shape);
    std::size_t src = 0;
    for (std::size_t out = 0; out < total; out += run) {
        visit(out, src, run);
        for (std::size_t ax = outer_rank; ax-- > 0;) {
            ++idx[ax];
            src += src_strides[ax];
            if (idx[ax] < out_shape[ax]) break;
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

}  // namespace detail

/// Reorders axes: output axis i is input axis perm[i].
template <class T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) throw ShapeError("permute", "a permutation of " + std::to_string(r) + " axes", Shape(perm));
    std::vector<bool> seen(r, false);
    for (auto p : perm) {
        if (p >= r || seen[p]) throw ShapeError("permute", "a permutation of 0.." + std::to_string(r - 1), Shape(perm));
        seen[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
    std::vector<std::size_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) src_strides[i] = in_strides[perm[i]];

    std::vector<T> out(x.size());
    const T* xv = x.data().data();
    detail::for_each_permuted_run(out_shape, src_strides, [&](std::size_t o, std::size_t s, std::size_t run) {
        std::copy_n(xv + s, run, out.data() + o);
    });
    auto result = detail::make_output<T>(out_shape, std::move(out), x.requires_grad());
    if (result.requires_grad()) {
        detail::record<T>("permute", result, {x.node()},
                          [xn = x.node(), out_shape, src_strides](const detail::Node<T>& o) {
                              xn->ensure_grad();
                              detail::for_each_permuted_run(out_shape, src_strides,
                                                            [&](std::size_t oo, std::size_t s, std::size_t run) {
                                                                for (std::size_t i = 0; i < run; ++i)
                                                                    xn->grad[s + i] += o.grad[oo + i];
                                                            });
                          });
    }
    return result;
}

/// Swaps the last two axes.
template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("transpose", "rank >= 2", x.shape());
    std::vector<std::size_t> perm(x.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
    return permute(x, perm);
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat", "at least one operand", Shape{});
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw ShapeError("concat", "axis < rank " + std::to_string(ref.size()), ref);
    std::size_t total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
        if (!ok) throw ShapeError("concat", "shape matching " + to_string(ref) + " off axis " + std::to_string(axis), s);
        total += s[axis];
        rg = rg || p.requires_grad();
    }
    const std::size_t outer = numel(Shape(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(axis)));
    const std::size_t inner = numel(Shape(ref.begin() + static_cast<std::ptrdiff_t>(axis) + 1, ref.end()));
    Shape out_shape = ref;
    out_shape[axis] = total;
    std::vector<T> out(numel(out_shape));
    std::vector<std::size_t> chunk(parts.size()), offset(parts.size());
    {
        std::size_t off = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            chunk[p] = parts[p].dim(axis) * inner;
            offset[p] = off;
            off += chunk[p];
        }
    }
    const std::size_t row = total * inner;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const T* src = parts[p].data().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src + o * chunk[p], chunk[p], out.data() + o * row + offset[p]);
    }
    auto result = detail::make_output<T>(std::move(out_shape), std::move(out), rg);
    if (result.requires_grad()) {
        std::vector<detail::NodePtr<T>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        detail::record<T>("concat", result, nodes, [nodes, chunk, offset, outer, row](const detail::Node<T>& o) {
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                auto& n = *nodes[p];
                if (!n.requires_grad) continue;
                n.ensure_grad();
                for (std::size_t r = 0; r < outer; ++r) {
                    const T* g = o.grad.data() + r * row + offset[p];
                    T* dst = n.grad.data() + r * chunk[p];
                    for (std::size_t i = 0; i < chunk[p]; ++i) dst[i] += g[i];
                }
            }
        });
    }
    return result;
}

/// Contiguous range [start, start + length) along `axis`.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= x.rank()) throw ShapeError("slice", "axis < rank", x.shape());
    if (start + length > x.dim(axis) || length == 0) {
        throw ShapeError("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                      ") inside axis " + std::to_string(axis),
                         x.shape());
    }
    const Shape& s = x.shape();
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
    const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
    const std::size_t in_row = s[axis] * inner;
    const std::size_t out_row = length * inner;
    Shape out_shape = s;
    out_shape[axis] = length;
    std::vector<T> out(outer * out_row);
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xv + o * in_row + start * inner, out_row, out.data() + o * out_row);
    auto result = detail::make_output<T>(std::move(out_shape), std::move(out), x.requires_grad());
    if (result.requires_grad()) {
        detail::record<T>("slice", result, {x.node()},
                          [xn = x.node(), outer, in_row, out_row, offset = start * inner](const detail::Node<T>& o) {
                              xn->ensure_grad();
                              for (std::size_t r = 0; r < outer; ++r)
                                  for (std::size_t i = 0; i < out_row; ++i)
                                      xn->grad[r * in_row + offset + i] += o.grad[r * out_row + i];
                          });
    }
    return result;
}

/// Stacks `count` copies of x along a new leading axis.
template <class T>
BasicTensor<T> tile(const BasicTensor<T>& x, std::size_t count) {
    if (count == 0) throw ShapeError("tile", "count >= 1", x.shape());
    Shape out_shape{count};
    out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
    std::vector<T> out(count * x.size());
    for (std::size_t c = 0; c < count; ++c) std::copy(x.data().begin(), x.data().end(), out.begin() + c * x.size());
    auto result = detail::make_output<T>(std::move(out_shape), std::move(out), x.requires_grad());
    if (result.requires_grad()) {
        detail::record<T>("tile", result, {x.node()}, [xn = x.node(), count](const detail::Node<T>& o) {
            xn->ensure_grad();
            const std::size_t n = xn->value.size();
            for (std::size_t c = 0; c < count; ++c)
                for (std::size_t i = 0; i < n; ++i) xn->grad[i] += o.grad[c * n + i];
        });
    }
    return result;
}

/// Softmax over the last axis.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
    if (x.rank() < 1) throw ShapeError("softmax", "rank >= 1", x.shape());
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const std::size_t d = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / d;
    std::vector<T> out(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < rows; ++r) {
        T* y = out.data() + r * d;
        const T mx = *std::max_element(y, y + d);
        for (std::size_t i = 0; i < d; ++i) y[i] -= mx;
    }
    // exp on an owned (aligned) array; see gelu.
    const Arr all = Eigen::Map<const Arr>(out.data(), static_cast<Eigen::Index>(out.size())).exp();
    std::copy(all.data(), all.data() + all.size(), out.begin());
    for (std::size_t r = 0; r < rows; ++r) {
        T* y = out.data() + r * d;
        T total = 0;
        for (std::size_t i = 0; i < d; ++i) total += y[i];
        const T inv = T(1) / total;
        for (std::size_t i = 0; i < d; ++i) y[i] *= inv;
    }
    auto result = detail::make_output<T>(x.shape(), std::move(out), x.requires_grad());
    if (result.requires_grad()) {
        detail::record<T>("softmax", result, {x.node()}, [xn = x.node(), d, rows](const detail::Node<T>& o) {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = o.value.data() + r * d;
                const T* g = o.grad.data() + r * d;
                T dot = 0;
                for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
                for (std::size_t i = 0; i < d; ++i) xn->grad[r * d + i] += y[i] * (g[i] - dot);
            }
        });
    }
    return result;
}

/// Layer normalization over the last axis with affine gamma/beta of that width.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5)) {
    if (x.rank() < 1) throw ShapeError("layer_norm", "rank >= 1", x.shape());
    const std::size_t d = x.dim(x.rank() - 1);
    detail::require_same("layer_norm", Shape{d}, gamma.shape());
    detail::require_same("layer_norm", Shape{d}, beta.shape());
    const std::size_t rows = x.size() / d;
    std::vector<T> out(x.size()), xhat(x.size()), rstd(rows);
    const T* xv = x.data().data();
    const T* gv = gamma.data().data();
    const T* bv = beta.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv + r * d;
        T mean = 0;
        for (std::size_t i = 0; i < d; ++i) mean += in[i];
        mean /= T(d);
        T var = 0;
        for (std::size_t i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
        var /= T(d);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) {
            const T h = (in[i] - mean) * rstd[r];
            xhat[r * d + i] = h;
            out[r * d + i] = h * gv[i] + bv[i];
        }
    }
    auto result = detail::make_output<T>(x.shape(), std::move(out), detail::any_requires_grad<T>({&x, &gamma, &beta}));
    if (result.requires_grad()) {
        detail::record<T>(
            "layer_norm", result, {x.node(), gamma.node(), beta.node()},
            [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat), rstd = std::move(rstd), d,
             rows](const detail::Node<T>& o) {
                if (gn->requires_grad) gn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                if (xn->requires_grad) xn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* g = o.grad.data() + r * d;
                    const T* h = xhat.data() + r * d;
                    if (gn->requires_grad)
                        for (std::size_t i = 0; i < d; ++i) gn->grad[i] += g[i] * h[i];
                    if (bn->requires_grad)
                        for (std::size_t i = 0; i < d; ++i) bn->grad[i] += g[i];
                    if (xn->requires_grad) {
                        T mean_dh = 0, mean_dh_h = 0;
                        for (std::size_t i = 0; i < d; ++i) {
                            const T dh = g[i] * gn->value[i];
                            mean_dh += dh;
                            mean_dh_h += dh * h[i];
                        }
                        mean_dh /= T(d);
                        mean_dh_h /= T(d);
                        for (std::size_t i = 0; i < d; ++i) {
                            const T dh = g[i] * gn->value[i];
                            xn->grad[r * d + i] += rstd[r] * (dh - mean_dh - h[i] * mean_dh_h);
                        }
                    }
                }
            });
    }
    return result;
}

/// Mean cross-entropy of logits [B, C] against integer labels in [0, C).
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy", "logits of rank 2 [batch, classes]", logits.shape());
    const std::size_t batch = logits.dim(0);
    const std::size_t classes = logits.dim(1);
    if (labels.size() != batch) {
        throw ShapeError("cross_entropy", std::to_string(labels.size()) + " rows to match labels", logits.shape());
    }
    std::vector<T> probs(logits.size());
    T loss = 0;
    const T* lv = logits.data().data();
    for (std::size_t r = 0; r < batch; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(classes) + ")");
        }
        const T* in = lv + r * classes;
        const T mx = *std::max_element(in, in + classes);
        T total = 0;
        for (std::size_t i = 0; i < classes; ++i) total += (probs[r * classes + i] = std::exp(in[i] - mx));
        for (std::size_t i = 0; i < classes; ++i) probs[r * classes + i] /= total;
        loss += -(in[y] - mx - std::log(total));
    }
    loss /= T(batch);
    auto result = detail::make_output<T>(Shape{}, std::vector<T>{loss}, logits.requires_grad());
    if (result.requires_grad()) {
        std::vector<int> ys(labels.begin(), labels.end());
        detail::record<T>("cross_entropy", result, {logits.node()},
                          [ln = logits.node(), probs = std::move(probs), ys = std::move(ys), batch,
                           classes](const detail::Node<T>& o) {
                              ln->ensure_grad();
                              const T g = o.grad[0] / T(batch);
                              for (std::size_t r = 0; r < batch; ++r)
                                  for (std::size_t i = 0; i < classes; ++i) {
                                      const T onehot = static_cast<int>(i) == ys[r] ? T(1) : T(0);
                                      ln->grad[r * classes + i] += g * (probs[r * classes + i] - onehot);
                                  }
                          });
    }
    return result;
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T total = 0;
    for (T v : x.data()) total += v;
    auto result = detail::make_output<T>(Shape{}, std::vector<T>{total}, x.requires_grad());
    if (result.requires_grad()) {
        detail::record<T>("sum", result, {x.node()}, [xn = x.node()](const detail::Node<T>& o) {
            xn->ensure_grad();
            for (auto& g : xn->grad) g += o.grad[0];
        });
    }
    return result;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    if (x.size() == 0) throw ShapeError("mean", "a non-empty tensor", x.shape());
    return scale(sum(x), T(1) / T(x.size()));
}

}  // namespace dipt
