#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "hypermixer/errors.hpp"

namespace hmx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

inline std::string shape_string(const Shape& shape)
{
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Operation categories tracked by the instrumentation counter.
enum class OpKind : std::size_t {
    matmul,
    gelu,
    softmax,
    bias,         // bias additions of linear layers
    elementwise,  // residual adds, products, scaling
    normalization,
    reduction,
    transform,    // fixed linear transforms (DFT)
    count_
};

inline const char* op_kind_name(OpKind k)
{
    static constexpr std::array<const char*, static_cast<std::size_t>(OpKind::count_)> names = {
        "matmul", "gelu", "softmax", "bias", "elementwise", "normalization", "reduction", "transform"};
    return names[static_cast<std::size_t>(k)];
}

/// Floating-point operation counts per op kind, following the convention that
/// exp, tanh, sqrt and division each count as one operation.
class FlopCounter {
public:
    void add(OpKind kind, std::uint64_t n) { counts_[static_cast<std::size_t>(kind)] += n; }
    std::uint64_t operator[](OpKind kind) const { return counts_[static_cast<std::size_t>(kind)]; }

    std::uint64_t total() const
    {
        std::uint64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }

    /// Total excluding linear-layer bias additions.
    std::uint64_t bias_free() const { return total() - (*this)[OpKind::bias]; }

    void reset() { counts_.fill(0); }

    FlopCounter operator-(const FlopCounter& o) const
    {
        FlopCounter d;
        for (std::size_t i = 0; i < counts_.size(); ++i) d.counts_[i] = counts_[i] - o.counts_[i];
        return d;
    }

private:
    std::array<std::uint64_t, static_cast<std::size_t>(OpKind::count_)> counts_{};
};

/// Allocator whose value-less construction leaves scalars uninitialized.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;

    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>)
    {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args)
    {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <class T>
using Buffer = std::vector<T, DefaultInitAllocator<T>>;

/// Tag for tensors whose every element the caller overwrites.
struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

template <class T>
struct TensorStorage {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;  // empty until the first accumulation
    bool requires_grad = false;

    std::span<T> ensure_grad()
    {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

/// Dense row-major tensor with shared storage. Copies of a Tensor alias the same
/// buffer; use clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : s_(std::make_shared<TensorStorage<T>>())
    {
        s_->data.assign(shape_numel(shape), fill);
        s_->shape = std::move(shape);
        s_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, Uninitialized, bool requires_grad = false) : s_(std::make_shared<TensorStorage<T>>())
    {
        s_->data.resize(shape_numel(shape));
        s_->shape = std::move(shape);
        s_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : s_(std::make_shared<TensorStorage<T>>())
    {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        s_->shape = std::move(shape);
        s_->data.assign(values.begin(), values.end());
        s_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
    std::size_t numel() const { return s_->data.size(); }

    std::span<T> data() { return s_->data; }
    std::span<const T> data() const { return s_->data; }
    T* ptr() { return s_->data.data(); }
    const T* ptr() const { return s_->data.data(); }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool on) { s_->requires_grad = on; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const T> grad() const { return s_->grad; }
    std::span<T> mutable_grad() { return s_->ensure_grad(); }
    void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
    void clear_grad() { s_->grad.clear(); }

    T item() const
    {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
        return s_->data[0];
    }

    T& operator()(std::size_t i) { return s_->data[i]; }
    T operator()(std::size_t i) const { return s_->data[i]; }
    T& operator()(std::size_t i, std::size_t j) { return s_->data[i * s_->shape[1] + j]; }
    T operator()(std::size_t i, std::size_t j) const { return s_->data[i * s_->shape[1] + j]; }
    T& operator()(std::size_t b, std::size_t i, std::size_t j)
    {
        return s_->data[(b * s_->shape[1] + i) * s_->shape[2] + j];
    }
    T operator()(std::size_t b, std::size_t i, std::size_t j) const
    {
        return s_->data[(b * s_->shape[1] + i) * s_->shape[2] + j];
    }

    Tensor clone(bool requires_grad = false) const
    {
        Tensor t(s_->shape, uninitialized, requires_grad);
        std::copy(s_->data.begin(), s_->data.end(), t.s_->data.begin());
        return t;
    }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    TensorStorage<T>* storage() const { return s_.get(); }
    const std::shared_ptr<TensorStorage<T>>& handle() const { return s_; }

private:
    std::shared_ptr<TensorStorage<T>> s_;
};

/// Ordered record of executed operations with their backward rules, plus the
/// instrumentation counter. A tape belongs to one thread at a time.
template <class T>
class Tape {
public:
    using Handle = std::shared_ptr<TensorStorage<T>>;

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    FlopCounter& flops() { return flops_; }
    const FlopCounter& flops() const { return flops_; }

    std::size_t size() const { return entries_.size(); }

    /// True when an op over these inputs has to be recorded.
    template <class... Ts>
    bool wants_grad(const Ts&... inputs) const
    {
        return recording_ && (inputs.requires_grad() || ...);
    }

    void record(Tensor<T>& out, std::vector<Handle> inputs, std::function<void()> backward)
    {
        out.set_requires_grad(true);
        entries_.push_back(Entry{std::move(inputs), out.handle(), std::move(backward)});
    }

    /// Reverse pass from a scalar loss; gradients accumulate into existing grads.
    void backward(const Tensor<T>& loss)
    {
        if (loss.numel() != 1)
            throw UsageError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
        const T one = T(1);
        backward(loss, std::span<const T>(&one, 1));
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    void backward(const Tensor<T>& output, std::span<const T> seed)
    {
        if (seed.size() != output.numel())
            throw UsageError("backward seed has " + std::to_string(seed.size()) + " values for " +
                             std::to_string(output.numel()) + " outputs");
        auto g = output.storage()->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output->grad.empty()) continue;
            it->backward();
        }
    }

    /// Zeroes the gradients of every tensor touched by the tape.
    void zero_grads()
    {
        for (auto& e : entries_) {
            std::fill(e.output->grad.begin(), e.output->grad.end(), T(0));
            for (auto& in : e.inputs) std::fill(in->grad.begin(), in->grad.end(), T(0));
        }
    }

    void clear() { entries_.clear(); }

private:
    struct Entry {
        std::vector<Handle> inputs;
        Handle output;
        std::function<void()> backward;
    };

    std::vector<Entry> entries_;
    FlopCounter flops_;
    bool recording_ = true;
};

}  // namespace hmx
