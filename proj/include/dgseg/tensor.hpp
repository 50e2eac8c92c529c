#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dgseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Raised for shape or argument contract violations.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // sized like data iff requires_grad
    bool requires_grad = false;
};

template <typename T>
class Tape;

/// Dense row-major tensor handle. Copies share storage; operations never
/// write into their inputs, so a Tensor behaves as an immutable value.
/// Parameters are the one exception and are updated through mutable_data().
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("Tensor: shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        set_requires_grad(requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    std::span<const T> grad() const { return impl_->grad; }
    bool requires_grad() const { return impl_->requires_grad; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    T at(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != rank()) throw ShapeError("at(): rank mismatch");
        std::size_t off = 0;
        std::size_t i = 0;
        for (auto v : idx) {
            if (v >= impl_->shape[i]) throw ShapeError("at(): index out of range");
            off = off * impl_->shape[i] + v;
            ++i;
        }
        return impl_->data[off];
    }

    void set_requires_grad(bool on) {
        impl_->requires_grad = on;
        if (on) {
            impl_->grad.assign(impl_->data.size(), T(0));
        } else {
            impl_->grad.clear();
        }
    }

    // Parameter access for optimizers and checkpoint loading.
    std::span<T> mutable_data() { return impl_->data; }
    std::span<T> mutable_grad() { return impl_->grad; }
    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

    /// Copy of the values with no gradient tracking.
    Tensor detach() const { return Tensor(shape(), impl_->data, false); }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape(), std::vector<U>(impl_->data.begin(), impl_->data.end()), false);
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
class Tape {
public:
    using Impl = TensorImpl<T>;
    using BackwardFn = std::function<void()>;

    struct Record {
        std::string op;
        std::vector<std::shared_ptr<Impl>> inputs;
        std::shared_ptr<Impl> output;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::string op, std::vector<std::shared_ptr<Impl>> inputs,
                std::shared_ptr<Impl> output, BackwardFn fn) {
        records_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(fn)});
    }

    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }

    /// Seeds d(loss)/d(loss) = 1 and replays the records in reverse order.
    /// Leaf gradients accumulate; call zero_grad on parameters between steps.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) throw ShapeError("backward: loss does not require grad");
        loss.impl()->grad[0] += T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
        records_.clear();
    }

    void clear() { records_.clear(); }

private:
    std::vector<Record> records_;
};

namespace detail {
template <typename T>
inline thread_local Tape<T>* current_tape = nullptr;
}  // namespace detail

/// Makes `tape` the recording target for the current thread while alive.
/// Without an active tape, operations run untracked (inference mode).
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : previous_(detail::current_tape<T>) {
        detail::current_tape<T> = &tape;
    }
    ~TapeScope() { detail::current_tape<T> = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording for the current thread while alive.
template <typename T>
class NoGradScope {
public:
    NoGradScope() : previous_(detail::current_tape<T>) { detail::current_tape<T> = nullptr; }
    ~NoGradScope() { detail::current_tape<T> = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape() {
    return detail::current_tape<T>;
}

namespace detail {

template <typename T>
void check_finite(std::string_view op, const std::vector<T>& v) {
    // An all-ones exponent marks Inf or NaN: adding one to the exponent field
    // carries into the bit above it. Shifts, adds and ORs vectorize.
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr int mant = std::numeric_limits<T>::digits - 1;
    constexpr Bits field = sizeof(T) == 4 ? Bits(0xff) : Bits(0x7ff);
    Bits acc = 0;
    for (const T x : v) acc |= ((std::bit_cast<Bits>(x) >> mant) & field) + 1;
    if (acc & (field + 1)) throw NumericError(std::string(op) + ": non-finite value produced");
}

/// Wraps freshly computed values as an op result and, when any input
/// requires grad and a tape is active, records the backward rule.
/// `backward` receives (output impl) and accumulates into input grads.
template <typename T, typename Fn>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
    check_finite(op, values);
    Tensor<T> out(std::move(shape), std::move(values), false);
    Tape<T>* tape = dgseg::active_tape<T>();
    if (!tape) return out;
    bool any = false;
    for (const auto* in : inputs) any = any || in->requires_grad();
    if (!any) return out;
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl<T>>> in_impls;
    in_impls.reserve(inputs.size());
    for (const auto* in : inputs) in_impls.push_back(in->impl());
    auto out_impl = out.impl();
    TensorImpl<T>* raw_out = out_impl.get();
    tape->record(std::string(op), std::move(in_impls), std::move(out_impl),
                 [raw_out, fn = std::forward<Fn>(backward)]() { fn(*raw_out); });
    return out;
}

/// Grad buffer of an input, or nullptr when it does not require grad.
template <typename T>
T* grad_ptr(const Tensor<T>& t) {
    return t.requires_grad() ? t.impl()->grad.data() : nullptr;
}

}  // namespace detail

}  // namespace dgseg
