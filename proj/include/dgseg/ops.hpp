#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <limits>

#include "dgseg/tensor.hpp"

namespace dgseg {

namespace detail {

inline Shape contiguous_strides(const Shape& s) {
    Shape st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

/// Visits every index of `shape` in row-major order and calls
/// fn(offsets) with one offset per operand, each advanced by its strides.
template <std::size_t N, typename Fn>
void strided_for_each(const Shape& shape, const std::array<Shape, N>& strides, Fn&& fn) {
    const std::size_t r = shape.size();
    std::array<std::size_t, N> off{};
    if (r == 0) {
        fn(off);
        return;
    }
    if (shape_numel(shape) == 0) return;
    const std::size_t inner = shape[r - 1];
    std::array<std::size_t, N> inner_stride{};
    for (std::size_t k = 0; k < N; ++k) inner_stride[k] = strides[k][r - 1];
    Shape idx(r, 0);
    while (true) {
        std::array<std::size_t, N> cur = off;
        for (std::size_t i = 0; i < inner; ++i) {
            fn(cur);
            for (std::size_t k = 0; k < N; ++k) cur[k] += inner_stride[k];
        }
        std::size_t d = r - 1;
        while (true) {
            if (d == 0) return;
            --d;
            ++idx[d];
            for (std::size_t k = 0; k < N; ++k) off[k] += strides[k][d];
            if (idx[d] < shape[d]) break;
            for (std::size_t k = 0; k < N; ++k) off[k] -= strides[k][d] * shape[d];
            idx[d] = 0;
        }
    }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

/// Strides that read `s` while iterating `out` (0 along broadcast axes).
inline Shape broadcast_strides(const Shape& s, const Shape& out) {
    const Shape own = contiguous_strides(s);
    Shape st(out.size(), 0);
    const std::size_t lead = out.size() - s.size();
    for (std::size_t i = 0; i < s.size(); ++i) {
        st[lead + i] = (s[i] == 1 && out[lead + i] != 1) ? 0 : own[i];
    }
    return st;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;

template <typename T>
using Map = Eigen::Map<RowMat<T>>;

inline void check_axis(std::size_t axis, std::size_t rank, std::string_view op) {
    if (axis >= rank) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) sizes.
inline std::array<std::size_t, 3> split_axis(const Shape& shape, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    return {outer, shape[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class BinaryKind { add, sub, mul, div };

template <typename T>
Tensor<T> elementwise(BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
    static constexpr std::array<std::string_view, 4> names{"add", "sub", "mul", "div"};
    const std::string_view name = names[static_cast<int>(kind)];
    const auto fwd = [kind](T x, T y) -> T {
        switch (kind) {
            case BinaryKind::add: return x + y;
            case BinaryKind::sub: return x - y;
            case BinaryKind::mul: return x * y;
            case BinaryKind::div: return x / y;
        }
        return T(0);
    };
    // Accumulates upstream g into ga/gb (either may be null).
    const auto bwd = [kind](T x, T y, T g, T* ga, T* gb) {
        switch (kind) {
            case BinaryKind::add:
                if (ga) *ga += g;
                if (gb) *gb += g;
                break;
            case BinaryKind::sub:
                if (ga) *ga += g;
                if (gb) *gb -= g;
                break;
            case BinaryKind::mul:
                if (ga) *ga += g * y;
                if (gb) *gb += g * x;
                break;
            case BinaryKind::div:
                if (ga) *ga += g / y;
                if (gb) *gb -= g * x / (y * y);
                break;
        }
    };

    if (a.shape() == b.shape()) {
        const auto ad = a.data();
        const auto bd = b.data();
        std::vector<T> out(ad.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
        return detail::make_result<T>(name, a.shape(), std::move(out), {&a, &b},
                                      [a, b, bwd](const TensorImpl<T>& o) {
                                          T* ga = detail::grad_ptr(a);
                                          T* gb = detail::grad_ptr(b);
                                          const auto ad = a.data();
                                          const auto bd = b.data();
                                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                              bwd(ad[i], bd[i], o.grad[i], ga ? ga + i : nullptr,
                                                  gb ? gb + i : nullptr);
                                          }
                                      });
    }

    Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), name);
    const std::array<Shape, 3> strides{detail::contiguous_strides(out_shape),
                                       detail::broadcast_strides(a.shape(), out_shape),
                                       detail::broadcast_strides(b.shape(), out_shape)};
    std::vector<T> out(shape_numel(out_shape));
    {
        const T* ad = a.data().data();
        const T* bd = b.data().data();
        detail::strided_for_each<3>(out_shape, strides, [&](const std::array<std::size_t, 3>& o) {
            out[o[0]] = fwd(ad[o[1]], bd[o[2]]);
        });
    }
    return detail::make_result<T>(
        name, out_shape, std::move(out), {&a, &b},
        [a, b, bwd, out_shape, strides](const TensorImpl<T>& o) {
            T* ga = detail::grad_ptr(a);
            T* gb = detail::grad_ptr(b);
            const T* ad = a.data().data();
            const T* bd = b.data().data();
            detail::strided_for_each<3>(out_shape, strides, [&](const std::array<std::size_t, 3>& k) {
                bwd(ad[k[1]], bd[k[2]], o.grad[k[0]], ga ? ga + k[1] : nullptr,
                    gb ? gb + k[2] : nullptr);
            });
        });
}

template <typename T>
Tensor<T> elementwise(BinaryKind kind, const Tensor<T>& a, T b) {
    return elementwise(kind, a, Tensor<T>::scalar(b));
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryKind::add, a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryKind::sub, a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryKind::mul, a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryKind::div, a, b); }

namespace detail {

template <typename T, typename F, typename D>
Tensor<T> unary(std::string_view name, const Tensor<T>& x, F f, D dfdx) {
    const auto xd = x.data();
    std::vector<T> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
    return make_result<T>(name, x.shape(), std::move(out), {&x}, [x, dfdx](const TensorImpl<T>& o) {
        T* g = grad_ptr(x);
        const auto xd = x.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * dfdx(xd[i], o.data[i]);
    });
}

}  // namespace detail

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary<T>("scale", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> operator*(const Tensor<T>& x, T c) { return scale(x, c); }
template <typename T>
Tensor<T> operator*(T c, const Tensor<T>& x) { return scale(x, c); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& x, T c) { return add_scalar(x, c); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& x, T c) { return add_scalar(x, -c); }
template <typename T>
Tensor<T> operator-(T c, const Tensor<T>& x) { return add_scalar(scale(x, T(-1)), c); }

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                            [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                            [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    return detail::make_result<T>("sum", Shape{1}, std::vector<T>{s}, {&x}, [x](const TensorImpl<T>& o) {
        T* g = detail::grad_ptr(x);
        for (std::size_t i = 0; i < x.numel(); ++i) g[i] += o.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sums over `axes`. With keepdim the reduced axes stay as size 1.
template <typename T>
Tensor<T> sum_axes(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
    if (axes.empty()) throw ShapeError("sum_axes: empty axis set");
    Shape kept = x.shape();
    for (auto ax : axes) {
        detail::check_axis(ax, x.rank(), "sum_axes");
        kept[ax] = 1;
    }
    Shape out_shape;
    if (keepdim) {
        out_shape = kept;
    } else {
        for (std::size_t i = 0; i < x.rank(); ++i) {
            if (std::find(axes.begin(), axes.end(), i) == axes.end()) out_shape.push_back(x.dim(i));
        }
        if (out_shape.empty()) out_shape = {1};
    }
    const std::array<Shape, 2> strides{detail::contiguous_strides(x.shape()),
                                       detail::broadcast_strides(kept, x.shape())};
    std::vector<T> out(shape_numel(kept), T(0));
    const T* xd = x.data().data();
    detail::strided_for_each<2>(x.shape(), strides,
                                [&](const std::array<std::size_t, 2>& k) { out[k[1]] += xd[k[0]]; });
    return detail::make_result<T>("sum_axes", out_shape, std::move(out), {&x},
                                  [x, strides](const TensorImpl<T>& o) {
                                      T* g = detail::grad_ptr(x);
                                      detail::strided_for_each<2>(
                                          x.shape(), strides, [&](const std::array<std::size_t, 2>& k) {
                                              g[k[0]] += o.grad[k[1]];
                                          });
                                  });
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
    std::size_t n = 1;
    for (auto ax : axes) {
        detail::check_axis(ax, x.rank(), "mean_axes");
        n *= x.dim(ax);
    }
    return scale(sum_axes(x, axes, keepdim), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&x},
                                  [x](const TensorImpl<T>& o) {
                                      T* g = detail::grad_ptr(x);
                                      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                                  });
}

/// out.dim(i) = x.dim(perm[i]).
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) throw ShapeError("permute: rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (auto p : perm) {
        if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(perm.size());
    const Shape in_strides = detail::contiguous_strides(x.shape());
    Shape read(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out_shape[i] = x.dim(perm[i]);
        read[i] = in_strides[perm[i]];
    }
    const std::array<Shape, 2> strides{detail::contiguous_strides(out_shape), read};
    std::vector<T> out(x.numel());
    const T* xd = x.data().data();
    detail::strided_for_each<2>(out_shape, strides,
                                [&](const std::array<std::size_t, 2>& k) { out[k[0]] = xd[k[1]]; });
    return detail::make_result<T>("permute", out_shape, std::move(out), {&x},
                                  [x, out_shape, strides](const TensorImpl<T>& o) {
                                      T* g = detail::grad_ptr(x);
                                      detail::strided_for_each<2>(
                                          out_shape, strides, [&](const std::array<std::size_t, 2>& k) {
                                              g[k[1]] += o.grad[k[0]];
                                          });
                                  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

/// Elements [start, start+len) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    detail::check_axis(axis, x.rank(), "slice");
    if (start + len > x.dim(axis)) throw ShapeError("slice: range exceeds " + shape_str(x.shape()));
    const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::vector<T> out(outer * len * inner);
    const T* xd = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xd + (o * extent + start) * inner, len * inner, out.data() + o * len * inner);
    }
    return detail::make_result<T>(
        "slice", out_shape, std::move(out), {&x},
        [x, outer = outer, extent = extent, inner = inner, start, len](const TensorImpl<T>& o) {
            T* g = detail::grad_ptr(x);
            for (std::size_t b = 0; b < outer; ++b) {
                const T* src = o.grad.data() + b * len * inner;
                T* dst = g + (b * extent + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    detail::check_axis(axis, ref.size(), "concat");
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < ref.size(); ++i) {
            if (i != axis && p.dim(i) != ref[i]) {
                throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(ref));
            }
        }
        out_shape[axis] += p.dim(axis);
    }
    const auto [outer, extent, inner] = detail::split_axis(out_shape, axis);
    std::vector<T> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(axis) * inner;
        const T* pd = p.data().data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pd + o * w, w, out.data() + o * extent * inner + offset);
        }
        offset += w;
    }
    // initializer_list cannot hold a runtime count; record through a wrapper.
    Tensor<T> result(out_shape, std::move(out), false);
    detail::check_finite("concat", result.impl()->data);
    Tape<T>* tape = active_tape<T>();
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (!tape || !any) return result;
    result.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl<T>>> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    TensorImpl<T>* raw = result.impl().get();
    tape->record("concat", std::move(ins), result.impl(),
                 [parts, raw, outer = outer, extent = extent, inner = inner, axis]() {
                     std::size_t offset = 0;
                     for (const auto& p : parts) {
                         const std::size_t w = p.dim(axis) * inner;
                         if (T* g = detail::grad_ptr(p)) {
                             for (std::size_t o = 0; o < outer; ++o) {
                                 const T* src = raw->grad.data() + o * extent * inner + offset;
                                 for (std::size_t i = 0; i < w; ++i) g[o * w + i] += src[i];
                             }
                         }
                         offset += w;
                     }
                 });
    return result;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    detail::Map<T>(out.data(), m, n).noalias() =
        detail::MapC<T>(a.data().data(), m, k) * detail::MapC<T>(b.data().data(), k, n);
    return detail::make_result<T>("matmul", Shape{m, n}, std::move(out), {&a, &b},
                                  [a, b, m, k, n](const TensorImpl<T>& o) {
                                      detail::MapC<T> g(o.grad.data(), m, n);
                                      if (T* ga = detail::grad_ptr(a)) {
                                          detail::Map<T>(ga, m, k).noalias() +=
                                              g * detail::MapC<T>(b.data().data(), k, n).transpose();
                                      }
                                      if (T* gb = detail::grad_ptr(b)) {
                                          detail::Map<T>(gb, k, n).noalias() +=
                                              detail::MapC<T>(a.data().data(), m, k).transpose() * g;
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    detail::check_axis(axis, x.rank(), "softmax");
    const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
    const T* xd = x.data().data();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
            T z = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const T e = std::exp(xd[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    return detail::make_result<T>(
        "softmax", x.shape(), std::move(out), {&x},
        [x, outer = outer, n = n, inner = inner](const TensorImpl<T>& o) {
            T* g = detail::grad_ptr(x);
            for (std::size_t b = 0; b < outer; ++b) {
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = b * n * inner + i;
                    T dot = 0;
                    for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * o.data[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t p = base + j * inner;
                        g[p] += o.data[p] * (o.grad[p] - dot);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    detail::check_axis(axis, x.rank(), "log_softmax");
    const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
    const T* xd = x.data().data();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
            T z = 0;
            for (std::size_t j = 0; j < n; ++j) z += std::exp(xd[base + j * inner] - mx);
            const T lse = mx + std::log(z);
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] = xd[base + j * inner] - lse;
        }
    }
    return detail::make_result<T>(
        "log_softmax", x.shape(), std::move(out), {&x},
        [x, outer = outer, n = n, inner = inner](const TensorImpl<T>& o) {
            T* g = detail::grad_ptr(x);
            for (std::size_t b = 0; b < outer; ++b) {
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = b * n * inner + i;
                    T gs = 0;
                    for (std::size_t j = 0; j < n; ++j) gs += o.grad[base + j * inner];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t p = base + j * inner;
                        g[p] += o.grad[p] - std::exp(o.data[p]) * gs;
                    }
                }
            }
        });
}

/// Zero-mean, unit-std normalization over `axes` for every index of the
/// remaining axes. Population variance; `eps` is added under the root.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const std::vector<std::size_t>& axes, T eps = T(1e-5)) {
    if (axes.empty()) throw ShapeError("instance_norm: empty axis set");
    Shape group_shape = x.shape();
    std::size_t n = 1;
    for (auto ax : axes) {
        detail::check_axis(ax, x.rank(), "instance_norm");
        group_shape[ax] = 1;
    }
    for (auto ax : axes) n *= x.dim(ax);
    const std::size_t groups = shape_numel(group_shape);
    const std::array<Shape, 2> strides{detail::contiguous_strides(x.shape()),
                                       detail::broadcast_strides(group_shape, x.shape())};
    // Trailing contiguous axes make each group a contiguous block.
    bool trailing = true;
    {
        std::vector<std::size_t> sorted = axes;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            trailing = trailing && sorted[i] == x.rank() - sorted.size() + i;
        }
    }
    const T* xd = x.data().data();
    std::vector<T> mu(groups, T(0)), inv_std(groups, T(0)), out(x.numel());
    const auto for_each = [&](auto&& fn) {
        if (trailing) {
            for (std::size_t g = 0; g < groups; ++g) {
                for (std::size_t i = 0; i < n; ++i) fn(g * n + i, g);
            }
        } else {
            detail::strided_for_each<2>(x.shape(), strides,
                                        [&](const std::array<std::size_t, 2>& k) { fn(k[0], k[1]); });
        }
    };
    for_each([&](std::size_t i, std::size_t g) { mu[g] += xd[i]; });
    for (auto& m : mu) m /= static_cast<T>(n);
    std::vector<T> var(groups, T(0));
    for_each([&](std::size_t i, std::size_t g) {
        const T d = xd[i] - mu[g];
        var[g] += d * d;
    });
    // An overflowed variance would otherwise zero the output silently.
    detail::check_finite("instance_norm", var);
    for (std::size_t g = 0; g < groups; ++g) inv_std[g] = T(1) / std::sqrt(var[g] / static_cast<T>(n) + eps);
    for_each([&](std::size_t i, std::size_t g) { out[i] = (xd[i] - mu[g]) * inv_std[g]; });
    return detail::make_result<T>(
        "instance_norm", x.shape(), std::move(out), {&x},
        [x, inv_std, groups, n, trailing, strides](const TensorImpl<T>& o) {
            T* gx = detail::grad_ptr(x);
            std::vector<T> gmean(groups, T(0)), gymean(groups, T(0));
            const auto for_each = [&](auto&& fn) {
                if (trailing) {
                    for (std::size_t g = 0; g < groups; ++g) {
                        for (std::size_t i = 0; i < n; ++i) fn(g * n + i, g);
                    }
                } else {
                    detail::strided_for_each<2>(x.shape(), strides,
                                                [&](const std::array<std::size_t, 2>& k) { fn(k[0], k[1]); });
                }
            };
            for_each([&](std::size_t i, std::size_t g) {
                gmean[g] += o.grad[i];
                gymean[g] += o.grad[i] * o.data[i];
            });
            const T inv_n = T(1) / static_cast<T>(n);
            for_each([&](std::size_t i, std::size_t g) {
                gx[i] += inv_std[g] * (o.grad[i] - gmean[g] * inv_n - o.data[i] * gymean[g] * inv_n);
            });
        });
}

/// Per-(batch, channel) style statistics of a B×C×H×W feature map.
template <typename T>
struct FeatureStats {
    Tensor<T> mu;     // B×C
    Tensor<T> sigma;  // B×C
};

/// mu = spatial mean, sigma = sqrt(population variance + eps); both differentiable.
template <typename T>
FeatureStats<T> channel_stats(const Tensor<T>& f, T eps = T(1e-5)) {
    if (f.rank() != 4) throw ShapeError("channel_stats: expected B×C×H×W, got " + shape_str(f.shape()));
    if (f.dim(2) * f.dim(3) == 0) throw ShapeError("channel_stats: empty spatial extent");
    const Shape bc{f.dim(0), f.dim(1)};
    Tensor<T> mu4 = mean_axes(f, {2, 3}, true);
    Tensor<T> var = mean_axes(square(f - mu4), {2, 3}, false);
    Tensor<T> sigma = sqrt(var + eps);
    return {reshape(mu4, bc), sigma};
}

// ---------------------------------------------------------------------------
// Convolution and resampling
// ---------------------------------------------------------------------------

namespace detail {

/// Per-thread im2col buffer, grown on demand and never shrunk.
template <typename T>
std::vector<T>& scratch(std::size_t n) {
    thread_local std::vector<T> buf;
    if (buf.size() < n) buf.resize(n);
    return buf;
}

/// Copies a C×H×W image into a zeroed C×(H+2p)×(W+2p) buffer.
template <typename T>
void pad_planes(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, T* out) {
    const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
    std::fill_n(out, c * hp * wp, T(0));
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t y = 0; y < h; ++y) {
            std::copy_n(x + (ci * h + y) * w, w, out + (ci * hp + y + pad) * wp + pad);
        }
    }
}

/// Column matrix (C·k·k)×(Ho·Wo) of an already padded C×Hp×Wp image.
template <typename T>
void im2col(const T* xp, std::size_t c, std::size_t hp, std::size_t wp, std::size_t k, std::size_t stride,
            std::size_t ho, std::size_t wo, T* cols) {
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const T* src = xp + (ci * hp + oy * stride + ky) * wp + kx;
                    T* dst = row + oy * wo;
                    if (stride == 1) {
                        std::copy_n(src, wo, dst);
                    } else {
                        for (std::size_t ox = 0; ox < wo; ++ox) dst[ox] = src[ox * stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters columns back into a padded C×Hp×Wp buffer.
template <typename T>
void col2im_add(const T* cols, std::size_t c, std::size_t hp, std::size_t wp, std::size_t k, std::size_t stride,
                std::size_t ho, std::size_t wo, T* xp) {
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    T* dst = xp + (ci * hp + oy * stride + ky) * wp + kx;
                    const T* src = row + oy * wo;
                    if (stride == 1) {
                        for (std::size_t ox = 0; ox < wo; ++ox) dst[ox] += src[ox];
                    } else {
                        for (std::size_t ox = 0; ox < wo; ++ox) dst[ox * stride] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation. x: B×Cin×H×W, w: Cout×Cin×k×k (square kernels).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride = 1, std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3)) {
        throw ShapeError("conv2d: incompatible input " + shape_str(x.shape()) + " and weight " +
                         shape_str(w.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (h + 2 * pad < k || wd + 2 * pad < k) throw ShapeError("conv2d: kernel larger than input");
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
    const std::size_t kk = cin * k * k, hw = ho * wo;
    std::vector<T> out(b * cout * hw);
    const std::size_t hp = h + 2 * pad, wp = wd + 2 * pad, plane = cin * hp * wp;
    std::vector<T>& work = detail::scratch<T>(kk * hw + plane);
    T* cols = work.data();
    T* xp = cols + kk * hw;
    detail::MapC<T> wm(w.data().data(), cout, kk);
    for (std::size_t n = 0; n < b; ++n) {
        detail::pad_planes(x.data().data() + n * cin * h * wd, cin, h, wd, pad, xp);
        detail::im2col(xp, cin, hp, wp, k, stride, ho, wo, cols);
        detail::Map<T>(out.data() + n * cout * hw, cout, hw).noalias() = wm * detail::MapC<T>(cols, kk, hw);
    }
    return detail::make_result<T>(
        "conv2d", Shape{b, cout, ho, wo}, std::move(out), {&x, &w},
        [x, w, b, cin, h, wd, cout, k, stride, pad, ho, wo, kk, hw](const TensorImpl<T>& o) {
            T* gx = detail::grad_ptr(x);
            T* gw = detail::grad_ptr(w);
            const std::size_t hp = h + 2 * pad, wp = wd + 2 * pad, plane = cin * hp * wp;
            std::vector<T>& work = detail::scratch<T>(kk * hw + plane);
            T* cols = work.data();
            T* xp = cols + kk * hw;
            detail::MapC<T> wm(w.data().data(), cout, kk);
            for (std::size_t n = 0; n < b; ++n) {
                detail::MapC<T> gy(o.grad.data() + n * cout * hw, cout, hw);
                if (gw) {
                    detail::pad_planes(x.data().data() + n * cin * h * wd, cin, h, wd, pad, xp);
                    detail::im2col(xp, cin, hp, wp, k, stride, ho, wo, cols);
                    detail::Map<T>(gw, cout, kk).noalias() += gy * detail::MapC<T>(cols, kk, hw).transpose();
                }
                if (gx) {
                    detail::Map<T>(cols, kk, hw).noalias() = wm.transpose() * gy;
                    std::fill_n(xp, plane, T(0));
                    detail::col2im_add(cols, cin, hp, wp, k, stride, ho, wo, xp);
                    T* g = gx + n * cin * h * wd;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        for (std::size_t y = 0; y < h; ++y) {
                            const T* src = xp + (ci * hp + y + pad) * wp + pad;
                            T* dst = g + (ci * h + y) * wd;
                            for (std::size_t xx = 0; xx < wd; ++xx) dst[xx] += src[xx];
                        }
                    }
                }
            }
        });
}

/// Nearest-neighbour 2× upsampling of B×C×H×W.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("upsample2x: expected rank 4, got " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<T> out(planes * 4 * h * w);
    const T* xd = x.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                out[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    return detail::make_result<T>("upsample2x", Shape{x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {&x},
                                  [x, planes, h, w](const TensorImpl<T>& o) {
                                      T* g = detail::grad_ptr(x);
                                      for (std::size_t p = 0; p < planes; ++p) {
                                          for (std::size_t y = 0; y < 2 * h; ++y) {
                                              for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                                                  g[(p * h + y / 2) * w + xx / 2] +=
                                                      o.grad[(p * 2 * h + y) * 2 * w + xx];
                                              }
                                          }
                                      }
                                  });
}

/// Index of the maximum along axis 1 of a B×K×H×W tensor, as B×H×W labels.
template <typename T>
std::vector<int> argmax_channels(const Tensor<T>& logits) {
    if (logits.rank() != 4) throw ShapeError("argmax_channels: expected rank 4");
    const std::size_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    const T* d = logits.data().data();
    std::vector<int> out(b * hw);
    for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t i = 0; i < hw; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c) {
                if (d[(n * k + c) * hw + i] > d[(n * k + best) * hw + i]) best = c;
            }
            out[n * hw + i] = static_cast<int>(best);
        }
    }
    return out;
}

}  // namespace dgseg
