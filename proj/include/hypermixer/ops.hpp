#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "hypermixer/fft.hpp"
#include "hypermixer/gemm.hpp"
#include "hypermixer/mask.hpp"
#include "hypermixer/tensor.hpp"

namespace hmx {

using Rng = std::mt19937_64;

#ifdef HMX_FAULT_INJECTION
namespace debug {
/// Test-build hook: perturbs the GELU backward rule so gradient checks must fail.
inline bool& corrupt_gelu_backward()
{
    static bool on = false;
    return on;
}
}  // namespace debug
#endif

namespace detail {

template <class T>
std::shared_ptr<TensorStorage<T>> h(const Tensor<T>& t)
{
    return t.handle();
}

inline void require(bool cond, const std::string& what)
{
    if (!cond) throw ShapeError(what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Matrix product of rank-2 or rank-3 operands, with optional transposition of
/// the trailing two axes. A rank-2 operand broadcasts across the batch of a
/// rank-3 one. Counts (M*P)*2K operations per batch entry.
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false)
{
    const auto ra = a.rank(), rb = b.rank();
    if ((ra != 2 && ra != 3) || (rb != 2 && rb != 3))
        throw ShapeError("matmul needs rank-2 or rank-3 operands, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    const std::size_t a_rows = a.dim(ra - 2), a_cols = a.dim(ra - 1);
    const std::size_t b_rows = b.dim(rb - 2), b_cols = b.dim(rb - 1);
    const std::size_t m = trans_a ? a_cols : a_rows;
    const std::size_t k = trans_a ? a_rows : a_cols;
    const std::size_t k2 = trans_b ? b_cols : b_rows;
    const std::size_t n = trans_b ? b_rows : b_cols;
    const std::size_t ba = ra == 3 ? a.dim(0) : 1;
    const std::size_t bb = rb == 3 ? b.dim(0) : 1;
    if (k != k2 || (ra == 3 && rb == 3 && ba != bb))
        throw ShapeError("matmul shape mismatch: " + shape_string(a.shape()) + (trans_a ? "^T" : "") + " x " +
                         shape_string(b.shape()) + (trans_b ? "^T" : ""));
    const std::size_t batch = std::max(ba, bb);
    const bool batched = ra == 3 || rb == 3;
    Tensor<T> out(batched ? Shape{batch, m, n} : Shape{m, n}, uninitialized);

    const std::size_t a_stride = ra == 3 ? a_rows * a_cols : 0;
    const std::size_t b_stride = rb == 3 ? b_rows * b_cols : 0;
    const std::size_t c_stride = m * n;
    // a rank-3 left operand times a shared rank-2 weight is one tall product
    const bool flat = ra == 3 && rb == 2 && !trans_a;

    if (flat) {
        kernel::gemm(false, trans_b, batch * m, n, k, a.ptr(), b.ptr(), out.ptr(), false);
    } else {
        for (std::size_t i = 0; i < batch; ++i)
            kernel::gemm(trans_a, trans_b, m, n, k, a.ptr() + i * a_stride, b.ptr() + i * b_stride,
                         out.ptr() + i * c_stride, false);
    }
    tape.flops().add(OpKind::matmul, static_cast<std::uint64_t>(batch) * m * n * 2 * k);

    if (tape.wants_grad(a, b)) {
        auto as = a.storage(), bs = b.storage(), cs = out.storage();
        tape.record(out, {detail::h(a), detail::h(b)}, [=] {
            const T* dc = cs->grad.data();
            if (flat) {
                if (as->requires_grad)
                    kernel::gemm(false, !trans_b, batch * m, k, n, dc, bs->data.data(), as->ensure_grad().data(),
                                 true);
                if (bs->requires_grad) {
                    T* db = bs->ensure_grad().data();
                    if (!trans_b)
                        kernel::gemm(true, false, k, n, batch * m, as->data.data(), dc, db, true);
                    else
                        kernel::gemm(true, false, n, k, batch * m, dc, as->data.data(), db, true);
                }
                return;
            }
            for (std::size_t i = 0; i < batch; ++i) {
                const T* ai = as->data.data() + i * a_stride;
                const T* bi = bs->data.data() + i * b_stride;
                const T* dci = dc + i * c_stride;
                if (as->requires_grad) {
                    T* da = as->ensure_grad().data() + i * a_stride;
                    if (!trans_a)
                        kernel::gemm(false, !trans_b, m, k, n, dci, bi, da, true);
                    else
                        kernel::gemm(trans_b, true, k, m, n, bi, dci, da, true);
                }
                if (bs->requires_grad) {
                    T* db = bs->ensure_grad().data() + i * b_stride;
                    if (!trans_b)
                        kernel::gemm(!trans_a, false, k, n, m, ai, dci, db, true);
                    else
                        kernel::gemm(true, trans_a, n, k, m, dci, ai, db, true);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require(a.shape() == b.shape(),
                    "add shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor<T> out(a.shape(), uninitialized);
    for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
    tape.flops().add(OpKind::elementwise, out.numel());
    if (tape.wants_grad(a, b)) {
        auto as = a.storage(), bs = b.storage(), cs = out.storage();
        tape.record(out, {detail::h(a), detail::h(b)}, [=] {
            for (auto* s : {as, bs}) {
                if (!s->requires_grad) continue;
                auto g = s->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require(a.shape() == b.shape(),
                    "sub shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor<T> out(a.shape(), uninitialized);
    for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
    tape.flops().add(OpKind::elementwise, out.numel());
    if (tape.wants_grad(a, b)) {
        auto as = a.storage(), bs = b.storage(), cs = out.storage();
        tape.record(out, {detail::h(a), detail::h(b)}, [=] {
            if (as->requires_grad) {
                auto g = as->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
            }
            if (bs->requires_grad) {
                auto g = bs->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= cs->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require(a.shape() == b.shape(),
                    "mul shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor<T> out(a.shape(), uninitialized);
    for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
    tape.flops().add(OpKind::elementwise, out.numel());
    if (tape.wants_grad(a, b)) {
        auto as = a.storage(), bs = b.storage(), cs = out.storage();
        tape.record(out, {detail::h(a), detail::h(b)}, [=] {
            if (as->requires_grad) {
                auto g = as->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i] * bs->data[i];
            }
            if (bs->requires_grad) {
                auto g = bs->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i] * as->data[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor)
{
    Tensor<T> out(x.shape(), uninitialized);
    for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] = x.ptr()[i] * factor;
    tape.flops().add(OpKind::elementwise, out.numel());
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=] {
            auto g = xs->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i] * factor;
        });
    }
    return out;
}

/// x + bias broadcast along the last axis.
template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias)
{
    const std::size_t d = x.shape().back();
    detail::require(bias.rank() == 1 && bias.dim(0) == d,
                    "bias " + shape_string(bias.shape()) + " does not match " + shape_string(x.shape()));
    Tensor<T> out(x.shape(), uninitialized);
    const std::size_t rows = x.numel() / d;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out.ptr()[r * d + j] = x.ptr()[r * d + j] + bias.ptr()[j];
    tape.flops().add(OpKind::bias, out.numel());
    if (tape.wants_grad(x, bias)) {
        auto xs = x.storage(), bs = bias.storage(), cs = out.storage();
        tape.record(out, {detail::h(x), detail::h(bias)}, [=] {
            if (xs->requires_grad) {
                auto g = xs->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
            }
            if (bs->requires_grad) {
                auto g = bs->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) g[j] += cs->grad[r * d + j];
            }
        });
    }
    return out;
}

/// x[b, i, c] + bias[i]: one bias per sequence position.
template <class T>
Tensor<T> add_row_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias)
{
    detail::require(x.rank() == 3 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
                    "row bias " + shape_string(bias.shape()) + " does not match " + shape_string(x.shape()));
    const std::size_t B = x.dim(0), n = x.dim(1), c = x.dim(2);
    Tensor<T> out(x.shape(), uninitialized);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) out(b, i, j) = x(b, i, j) + bias(i);
    tape.flops().add(OpKind::bias, out.numel());
    if (tape.wants_grad(x, bias)) {
        auto xs = x.storage(), bs = bias.storage(), cs = out.storage();
        tape.record(out, {detail::h(x), detail::h(bias)}, [=] {
            if (xs->requires_grad) {
                auto g = xs->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
            }
            if (bs->requires_grad) {
                auto g = bs->ensure_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j) g[i] += cs->grad[(b * n + i) * c + j];
            }
        });
    }
    return out;
}

namespace detail {
inline constexpr double gelu_c = 0.044715;
inline const double gelu_s = std::sqrt(2.0 / std::numbers::pi);
}  // namespace detail

/// Scalar tanh-approximation GELU.
inline double gelu_value(double x)
{
    return 0.5 * x * (1.0 + std::tanh(detail::gelu_s * (x + detail::gelu_c * x * x * x)));
}

/// Elementwise tanh-approximation GELU, 9 operations per element.
template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x)
{
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const T s = static_cast<T>(detail::gelu_s), c = static_cast<T>(detail::gelu_c);
    const Eigen::Index n = static_cast<Eigen::Index>(x.numel());
    Eigen::Map<const Arr> v(x.ptr(), n);
    auto th = std::make_shared<Arr>((s * (v + c * v * v * v)).tanh());
    Tensor<T> out(x.shape(), uninitialized);
    Eigen::Map<Arr>(out.ptr(), n) = T(0.5) * v * (T(1) + *th);
    tape.flops().add(OpKind::gelu, static_cast<std::uint64_t>(9) * out.numel());
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=] {
            auto g = xs->ensure_grad();
            T fudge = T(1);
#ifdef HMX_FAULT_INJECTION
            if (debug::corrupt_gelu_backward()) fudge = T(1.1);
#endif
            Eigen::Map<const Arr> xv(xs->data.data(), n), go(cs->grad.data(), n);
            const Arr& t = *th;
            const Arr dv = T(0.5) * (T(1) + t) + T(0.5) * xv * (T(1) - t * t) * s * (T(1) + T(3) * c * xv * xv);
            Eigen::Map<Arr>(g.data(), n) += go * dv * fudge;
        });
    }
    return out;
}

/// Row-wise softmax over the last axis, stabilised by the row maximum.
/// With a key mask, x is [B*heads, R, C] and column j of every row belonging to
/// batch entry b gets weight 0 when mask(b, j) is padding. Counts 3*C per row.
template <class T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x, const Mask* key_mask = nullptr, std::size_t heads = 1)
{
    const std::size_t C = x.shape().back();
    const std::size_t rows = x.numel() / C;
    std::size_t rows_per_batch = rows;
    if (key_mask) {
        detail::require(x.rank() == 3 && key_mask->length == C && x.dim(0) == key_mask->batch * heads,
                        "key mask does not match scores " + shape_string(x.shape()));
        rows_per_batch = x.dim(1) * heads;
    }
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(C);
    Tensor<T> out(x.shape(), uninitialized);
    std::vector<std::uint8_t> full;  // batch entries without padding take the unmasked path
    if (key_mask)
        for (std::size_t b = 0; b < key_mask->batch; ++b) full.push_back(key_mask->valid_count(b) == C);
    for (std::size_t r = 0; r < rows; ++r) {
        Eigen::Map<const Arr> in(x.ptr() + r * C, n);
        Eigen::Map<Arr> o(out.ptr() + r * C, n);
        const std::size_t b = r / rows_per_batch;
        const std::uint8_t* valid = key_mask && !full[b] ? key_mask->valid.data() + b * C : nullptr;
        T mx = -std::numeric_limits<T>::infinity();
        if (!valid) {
            mx = in.maxCoeff();
        } else {
            for (std::size_t j = 0; j < C; ++j)
                if (valid[j] && in[static_cast<Eigen::Index>(j)] > mx) mx = in[static_cast<Eigen::Index>(j)];
        }
        if (!std::isfinite(mx)) {
            o.setZero();
            continue;
        }
        o = (in - mx).exp();
        if (valid)
            for (std::size_t j = 0; j < C; ++j)
                if (!valid[j]) o[static_cast<Eigen::Index>(j)] = T(0);
        o /= o.sum();
    }
    tape.flops().add(OpKind::softmax, static_cast<std::uint64_t>(3) * rows * C);
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=] {
            auto g = xs->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                Eigen::Map<const Arr> y(cs->data.data() + r * C, n), dy(cs->grad.data() + r * C, n);
                const T dot = (y * dy).sum();
                Eigen::Map<Arr>(g.data() + r * C, n) += y * (dy - dot);
            }
        });
    }
    return out;
}

/// Normalises each vector over the last axis (eps = 1e-5), then applies gain and bias.
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5))
{
    const std::size_t d = x.shape().back();
    detail::require(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
                    "layer_norm parameters do not match " + shape_string(x.shape()));
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape(), uninitialized);
    std::vector<T> xhat(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.ptr() + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<T>(d);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (in[j] - mean) * inv_std[r];
            out.ptr()[r * d + j] = xhat[r * d + j] * gain.ptr()[j] + bias.ptr()[j];
        }
    }
    tape.flops().add(OpKind::normalization, static_cast<std::uint64_t>(rows) * (7 * d + 2));
    if (tape.wants_grad(x, gain, bias)) {
        auto xs = x.storage(), gs = gain.storage(), bs = bias.storage(), cs = out.storage();
        tape.record(out, {detail::h(x), detail::h(gain), detail::h(bias)},
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                        const T* dy = cs->grad.data();
                        if (gs->requires_grad) {
                            auto g = gs->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                        if (bs->requires_grad) {
                            auto g = bs->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j];
                        }
                        if (xs->requires_grad) {
                            auto g = xs->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r) {
                                T mean_dxhat = 0, mean_dxhat_xhat = 0;
                                for (std::size_t j = 0; j < d; ++j) {
                                    const T dxh = dy[r * d + j] * gs->data[j];
                                    mean_dxhat += dxh;
                                    mean_dxhat_xhat += dxh * xhat[r * d + j];
                                }
                                mean_dxhat /= static_cast<T>(d);
                                mean_dxhat_xhat /= static_cast<T>(d);
                                for (std::size_t j = 0; j < d; ++j) {
                                    const T dxh = dy[r * d + j] * gs->data[j];
                                    g[r * d + j] +=
                                        inv_std[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                                }
                            }
                        }
                    });
    }
    return out;
}

/// Inverted dropout: in training mode zeroes each element with probability p and
/// scales survivors by 1/(1-p); identity otherwise.
template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, bool training, Rng& rng)
{
    if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const T s = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> m(x.numel());
    Tensor<T> out(x.shape(), uninitialized);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = keep(rng) ? s : T(0);
        out.ptr()[i] = x.ptr()[i] * m[i];
    }
    tape.flops().add(OpKind::elementwise, out.numel());
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=, m = std::move(m)] {
            auto g = xs->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i] * m[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x)
{
    T s = 0;
    for (auto v : x.data()) s += v;
    Tensor<T> out(Shape{}, s);
    tape.flops().add(OpKind::reduction, x.numel());
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=] {
            auto g = xs->ensure_grad();
            for (auto& v : g) v += cs->grad[0];
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x)
{
    return scale(tape, sum(tape, x), T(1) / static_cast<T>(x.numel()));
}

/// Mean squared error against constant targets of the same shape.
template <class T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, std::span<const T> target)
{
    detail::require(target.size() == pred.numel(), "mse target size does not match " + shape_string(pred.shape()));
    const std::size_t n = pred.numel();
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (pred.ptr()[i] - target[i]) * (pred.ptr()[i] - target[i]);
    Tensor<T> out(Shape{}, s / static_cast<T>(n));
    tape.flops().add(OpKind::reduction, 3 * n);
    if (tape.wants_grad(pred)) {
        auto ps = pred.storage(), cs = out.storage();
        std::vector<T> t(target.begin(), target.end());
        tape.record(out, {detail::h(pred)}, [=, t = std::move(t)] {
            auto g = ps->ensure_grad();
            const T k = T(2) * cs->grad[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) g[i] += k * (ps->data[i] - t[i]);
        });
    }
    return out;
}

/// Mean cross-entropy of [B, C] logits against integer labels.
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> labels)
{
    detail::require(logits.rank() == 2 && logits.dim(0) == labels.size(),
                    "cross_entropy labels do not match " + shape_string(logits.shape()));
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    std::vector<T> prob(B * C);
    T loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C)
            throw DataError("label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(C) + ")");
        const T* z = logits.ptr() + b * C;
        T mx = *std::max_element(z, z + C);
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
        for (std::size_t c = 0; c < C; ++c) prob[b * C + c] = std::exp(z[c] - mx) / s;
        loss += -(z[labels[b]] - mx - std::log(s));
    }
    Tensor<T> out(Shape{}, loss / static_cast<T>(B));
    tape.flops().add(OpKind::softmax, 3 * B * C);
    if (tape.wants_grad(logits)) {
        auto ls = logits.storage(), cs = out.storage();
        std::vector<std::int32_t> y(labels.begin(), labels.end());
        tape.record(out, {detail::h(logits)}, [=, prob = std::move(prob), y = std::move(y)] {
            auto g = ls->ensure_grad();
            const T k = cs->grad[0] / static_cast<T>(B);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    g[b * C + c] += k * (prob[b * C + c] - (static_cast<std::int32_t>(c) == y[b] ? T(1) : T(0)));
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Masking, pooling and layout
// ---------------------------------------------------------------------------

namespace detail {
inline void require_mask(const Mask& mask, const Shape& s)
{
    require(s.size() == 3 && s[0] == mask.batch && s[1] == mask.length,
            "mask [" + std::to_string(mask.batch) + ", " + std::to_string(mask.length) + "] does not match " +
                shape_string(s));
}
}  // namespace detail

/// Zeroes rows x[b, j, :] at padding positions.
template <class T>
Tensor<T> mask_rows(Tape<T>& tape, const Tensor<T>& x, const Mask& mask)
{
    detail::require_mask(mask, x.shape());
    const std::size_t c = x.dim(2), rows = mask.batch * mask.length;
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        if (mask.valid[r]) std::copy_n(x.ptr() + r * c, c, out.ptr() + r * c);
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        std::vector<std::uint8_t> valid = mask.valid;
        tape.record(out, {detail::h(x)}, [=, valid = std::move(valid)] {
            auto g = xs->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                if (valid[r])
                    for (std::size_t j = 0; j < c; ++j) g[r * c + j] += cs->grad[r * c + j];
        });
    }
    return out;
}

/// Mean over valid positions: [B, N, d] -> [B, d].
template <class T>
Tensor<T> mean_pool(Tape<T>& tape, const Tensor<T>& x, const Mask& mask)
{
    detail::require_mask(mask, x.shape());
    const std::size_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
    Tensor<T> out(Shape{B, d});
    std::vector<T> inv(B, T(0));
    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t cnt = mask.valid_count(b);
        if (cnt == 0) continue;
        inv[b] = T(1) / static_cast<T>(cnt);
        for (std::size_t j = 0; j < N; ++j)
            if (mask(b, j))
                for (std::size_t f = 0; f < d; ++f) out(b, f) += x(b, j, f);
        for (std::size_t f = 0; f < d; ++f) out(b, f) *= inv[b];
    }
    tape.flops().add(OpKind::reduction, x.numel());
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        std::vector<std::uint8_t> valid = mask.valid;
        tape.record(out, {detail::h(x)}, [=, valid = std::move(valid), inv = std::move(inv)] {
            auto g = xs->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < N; ++j)
                    if (valid[b * N + j])
                        for (std::size_t f = 0; f < d; ++f) g[(b * N + j) * d + f] += cs->grad[b * d + f] * inv[b];
        });
    }
    return out;
}

/// Gathers rows of a [V, d] table for a [B, N] id matrix.
template <class T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids, std::size_t batch,
                    std::size_t length)
{
    detail::require(table.rank() == 2 && ids.size() == batch * length, "embedding ids do not match batch shape");
    const std::size_t V = table.dim(0), d = table.dim(1);
    for (auto id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= V)
            throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(V));
    Tensor<T> out(Shape{batch, length, d});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.ptr() + static_cast<std::size_t>(ids[r]) * d, d, out.ptr() + r * d);
    if (tape.wants_grad(table)) {
        auto ts = table.storage(), cs = out.storage();
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        tape.record(out, {detail::h(table)}, [=, idv = std::move(idv)] {
            auto g = ts->ensure_grad();
            for (std::size_t r = 0; r < idv.size(); ++r)
                for (std::size_t f = 0; f < d; ++f)
                    g[static_cast<std::size_t>(idv[r]) * d + f] += cs->grad[r * d + f];
        });
    }
    return out;
}

namespace detail {
/// Shared body of split/merge heads: a permutation copy with an index map.
template <class T, class Map>
Tensor<T> permute_copy(Tape<T>& tape, const Tensor<T>& x, Shape out_shape, Map map)
{
    Tensor<T> out(std::move(out_shape), uninitialized);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[map(i)] = x.ptr()[i];
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {h(x)}, [=] {
            auto g = xs->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) g[i] += cs->grad[map(i)];
        });
    }
    return out;
}
}  // namespace detail

/// [B, N, heads*e] -> [B*heads, N, e]
template <class T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads)
{
    detail::require(x.rank() == 3 && x.dim(2) % heads == 0, "split_heads: width not divisible by heads");
    const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2), e = D / heads;
    return detail::permute_copy(tape, x, Shape{B * heads, N, e}, [=](std::size_t i) {
        const std::size_t f = i % D, n = (i / D) % N, b = i / (D * N);
        const std::size_t hh = f / e, j = f % e;
        return ((b * heads + hh) * N + n) * e + j;
    });
}

/// [B*heads, N, e] -> [B, N, heads*e]
template <class T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads)
{
    detail::require(x.rank() == 3 && x.dim(0) % heads == 0, "merge_heads: batch not divisible by heads");
    const std::size_t BH = x.dim(0), N = x.dim(1), e = x.dim(2), B = BH / heads, D = heads * e;
    return detail::permute_copy(tape, x, Shape{B, N, D}, [=](std::size_t i) {
        const std::size_t j = i % e, n = (i / e) % N, bh = i / (e * N);
        const std::size_t b = bh / heads, hh = bh % heads;
        return (b * N + n) * D + hh * e + j;
    });
}

/// Columns [begin, end) of the last axis.
template <class T>
Tensor<T> slice_last(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end)
{
    const std::size_t D = x.shape().back();
    detail::require(begin < end && end <= D, "slice_last range out of bounds for " + shape_string(x.shape()));
    const std::size_t w = end - begin, rows = x.numel() / D;
    Shape s = x.shape();
    s.back() = w;
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * D + begin, w, out.ptr() + r * w);
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=] {
            auto g = xs->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < w; ++j) g[r * D + begin + j] += cs->grad[r * w + j];
        });
    }
    return out;
}

/// Leading block of a rank-1 or rank-2 tensor: t[:rows] or t[:rows, :cols].
template <class T>
Tensor<T> crop(Tape<T>& tape, const Tensor<T>& t, std::size_t rows, std::size_t cols = 0)
{
    if (t.rank() == 1) {
        detail::require(rows <= t.dim(0), "crop exceeds " + shape_string(t.shape()));
        if (rows == t.dim(0)) return t;
        Tensor<T> out(Shape{rows});
        std::copy_n(t.ptr(), rows, out.ptr());
        if (tape.wants_grad(t)) {
            auto ts = t.storage(), cs = out.storage();
            tape.record(out, {detail::h(t)}, [=] {
                auto g = ts->ensure_grad();
                for (std::size_t i = 0; i < rows; ++i) g[i] += cs->grad[i];
            });
        }
        return out;
    }
    detail::require(t.rank() == 2 && rows <= t.dim(0) && cols <= t.dim(1), "crop exceeds " + shape_string(t.shape()));
    if (rows == t.dim(0) && cols == t.dim(1)) return t;
    const std::size_t C = t.dim(1);
    Tensor<T> out(Shape{rows, cols});
    for (std::size_t i = 0; i < rows; ++i) std::copy_n(t.ptr() + i * C, cols, out.ptr() + i * cols);
    if (tape.wants_grad(t)) {
        auto ts = t.storage(), cs = out.storage();
        tape.record(out, {detail::h(t)}, [=] {
            auto g = ts->ensure_grad();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) g[i * C + j] += cs->grad[i * cols + j];
        });
    }
    return out;
}

/// Copies a [c] vector into every row of a [B, N, c] tensor.
template <class T>
Tensor<T> repeat_rows(Tape<T>& tape, const Tensor<T>& v, std::size_t batch, std::size_t length)
{
    detail::require(v.rank() == 1, "repeat_rows needs a vector");
    const std::size_t c = v.dim(0), rows = batch * length;
    Tensor<T> out(Shape{batch, length, c});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.ptr(), c, out.ptr() + r * c);
    if (tape.wants_grad(v)) {
        auto vs = v.storage(), cs = out.storage();
        tape.record(out, {detail::h(v)}, [=] {
            auto g = vs->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) g[j] += cs->grad[r * c + j];
        });
    }
    return out;
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape)
{
    detail::require(shape_numel(shape) == x.numel(),
                    "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
    Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=] {
            auto g = xs->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs->grad[i];
        });
    }
    return out;
}

/// Real part of the DFT along the token axis of [B, N, d], computed over the
/// valid prefix of each sequence; padding rows stay zero.
template <class T>
Tensor<T> dft_real(Tape<T>& tape, const Tensor<T>& x, const Mask& mask)
{
    detail::require_mask(mask, x.shape());
    if (!mask.is_prefix()) throw ShapeError("dft_real needs right-padded sequences");
    const std::size_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
    Tensor<T> out(x.shape());
    std::vector<std::size_t> lens(B);
    std::uint64_t ops = 0;
    for (std::size_t b = 0; b < B; ++b) {
        lens[b] = mask.valid_count(b);
        fft::real_dft_rows(x.ptr() + b * N * d, lens[b], d, out.ptr() + b * N * d);
        ops += static_cast<std::uint64_t>(lens[b]) * lens[b] * 2 * d;
    }
    tape.flops().add(OpKind::transform, ops);
    if (tape.wants_grad(x)) {
        auto xs = x.storage(), cs = out.storage();
        tape.record(out, {detail::h(x)}, [=, lens = std::move(lens)] {
            auto g = xs->ensure_grad();
            std::vector<T> tmp;
            for (std::size_t b = 0; b < B; ++b) {
                tmp.assign(lens[b] * d, T(0));
                fft::real_dft_rows(cs->grad.data() + b * N * d, lens[b], d, tmp.data());
                for (std::size_t i = 0; i < tmp.size(); ++i) g[b * N * d + i] += tmp[i];
            }
        });
    }
    return out;
}

}  // namespace hmx
