#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "hypermixer/ops.hpp"

namespace hmx {

enum class MixingKind {
    hypermixer_tied,
    hypermixer_untied,
    mlpmixer,
    gmlp,
    fnet,
    attention,
    shared_vector,
    identity,
};

inline constexpr std::array<MixingKind, 8> all_mixing_kinds = {
    MixingKind::hypermixer_tied, MixingKind::hypermixer_untied, MixingKind::mlpmixer,
    MixingKind::gmlp,            MixingKind::fnet,              MixingKind::attention,
    MixingKind::shared_vector,   MixingKind::identity,
};

inline std::string_view kind_name(MixingKind k)
{
    switch (k) {
    case MixingKind::hypermixer_tied: return "hypermixer_tied";
    case MixingKind::hypermixer_untied: return "hypermixer_untied";
    case MixingKind::mlpmixer: return "mlpmixer";
    case MixingKind::gmlp: return "gmlp";
    case MixingKind::fnet: return "fnet";
    case MixingKind::attention: return "attention";
    case MixingKind::shared_vector: return "shared_vector";
    case MixingKind::identity: return "identity";
    }
    return "?";
}

inline MixingKind parse_mixing_kind(std::string_view name)
{
    for (auto k : all_mixing_kinds)
        if (kind_name(k) == name) return k;
    if (name == "hypermixer") return MixingKind::hypermixer_tied;
    throw ParameterError("unknown token mixing kind '" + std::string(name) + "'");
}

inline bool is_fixed_length(MixingKind k) { return k == MixingKind::mlpmixer || k == MixingKind::gmlp; }
inline bool is_hypermixer(MixingKind k)
{
    return k == MixingKind::hypermixer_tied || k == MixingKind::hypermixer_untied;
}

/// Token-mixing variant together with its hyperparameters.
struct TokenMixingSpec {
    MixingKind kind = MixingKind::hypermixer_tied;
    std::size_t d = 256;
    std::size_t d_prime = 512;
    std::optional<std::size_t> n_max;  // mlpmixer and gmlp only
    std::size_t heads = 4;              // attention only
    bool reinject_positions = false;    // hypermixer only
    bool output_norm = false;           // hypermixer only: LayerNorm on the mixed tokens

    void validate() const
    {
        if (d == 0 || d_prime == 0) throw ParameterError("mixing widths must be positive");
        if (is_fixed_length(kind) != n_max.has_value())
            throw ParameterError(std::string(kind_name(kind)) +
                                 (n_max ? " does not take n_max" : " requires n_max (fixed mixing length)"));
        if (n_max && *n_max == 0) throw ParameterError("n_max must be positive");
        if (kind == MixingKind::attention && (heads == 0 || d % heads != 0))
            throw ParameterError("attention heads (" + std::to_string(heads) + ") must divide d (" +
                                 std::to_string(d) + ")");
        if (output_norm && !is_hypermixer(kind)) throw ParameterError("output_norm applies to hypermixer only");
        if (kind == MixingKind::gmlp && d_prime % 2 != 0)
            throw ParameterError("gmlp needs an even hidden width to split into gate halves");
    }
};

// ---------------------------------------------------------------------------
// Parameter blocks
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]
};

template <class T>
struct Norm {
    Tensor<T> gain;
    Tensor<T> bias;
};

/// Two linear layers with a GELU in between.
template <class T>
struct TwoLayerMlp {
    Linear<T> first;
    Linear<T> second;
};

template <class T>
struct HyperMixerParams {
    TwoLayerMlp<T> h1;                 // generates W1 (and W2 when tied)
    std::optional<TwoLayerMlp<T>> h2;  // untied only
    std::optional<Norm<T>> out_norm;
};

template <class T>
struct MlpMixerParams {
    Tensor<T> w1;  // [n_max, d']
    Tensor<T> w2;  // [n_max, d']
};

template <class T>
struct GmlpParams {
    Linear<T> in;            // d -> d'
    Norm<T> norm;            // over the gated half
    Tensor<T> spatial;       // [n_max, n_max]
    Tensor<T> spatial_bias;  // [n_max]
    Linear<T> out;           // d'/2 -> d
};

template <class T>
struct AttentionParams {
    Linear<T> q, k, v, o;
};

template <class T>
struct SharedVectorParams {
    Tensor<T> w1;  // [d']
    Tensor<T> w2;  // [d']
};

struct NoParams {};

template <class T>
using MixingParams = std::variant<NoParams, HyperMixerParams<T>, MlpMixerParams<T>, GmlpParams<T>,
                                  AttentionParams<T>, SharedVectorParams<T>>;

template <class T>
void append(std::vector<Tensor<T>>& out, const Linear<T>& l)
{
    out.push_back(l.weight);
    out.push_back(l.bias);
}

template <class T>
void append(std::vector<Tensor<T>>& out, const Norm<T>& n)
{
    out.push_back(n.gain);
    out.push_back(n.bias);
}

template <class T>
void append(std::vector<Tensor<T>>& out, const TwoLayerMlp<T>& m)
{
    append(out, m.first);
    append(out, m.second);
}

template <class T>
struct MixingLayerState {
    TokenMixingSpec spec;
    MixingParams<T> params;

    /// Learnable tensors in declaration order.
    std::vector<Tensor<T>> parameters() const
    {
        std::vector<Tensor<T>> out;
        std::visit(
            [&](const auto& p) {
                using P = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<P, HyperMixerParams<T>>) {
                    append(out, p.h1);
                    if (p.h2) append(out, *p.h2);
                    if (p.out_norm) append(out, *p.out_norm);
                } else if constexpr (std::is_same_v<P, MlpMixerParams<T>>) {
                    out.push_back(p.w1);
                    out.push_back(p.w2);
                } else if constexpr (std::is_same_v<P, GmlpParams<T>>) {
                    append(out, p.in);
                    append(out, p.norm);
                    out.push_back(p.spatial);
                    out.push_back(p.spatial_bias);
                    append(out, p.out);
                } else if constexpr (std::is_same_v<P, AttentionParams<T>>) {
                    append(out, p.q);
                    append(out, p.k);
                    append(out, p.v);
                    append(out, p.o);
                } else if constexpr (std::is_same_v<P, SharedVectorParams<T>>) {
                    out.push_back(p.w1);
                    out.push_back(p.w2);
                }
            },
            params);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng)
{
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> t(std::move(shape), T(0), true);
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
    return t;
}

/// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Linear<T> make_linear(std::size_t in, std::size_t out, Rng& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear<T> l;
    l.weight = uniform_tensor<T>({in, out}, bound, rng);
    l.bias = uniform_tensor<T>({out}, bound, rng);
    return l;
}

template <class T>
Norm<T> make_norm(std::size_t d)
{
    return Norm<T>{Tensor<T>({d}, T(1), true), Tensor<T>({d}, T(0), true)};
}

template <class T>
TwoLayerMlp<T> make_mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
{
    TwoLayerMlp<T> m;
    m.first = make_linear<T>(in, hidden, rng);
    m.second = make_linear<T>(hidden, out, rng);
    return m;
}

template <class T>
MixingLayerState<T> make_mixing_state(const TokenMixingSpec& spec, Rng& rng)
{
    spec.validate();
    const std::size_t d = spec.d, dp = spec.d_prime;
    MixingLayerState<T> s{spec, NoParams{}};
    switch (spec.kind) {
    case MixingKind::hypermixer_tied:
        s.params = HyperMixerParams<T>{make_mlp<T>(d, dp, dp, rng), std::nullopt, std::nullopt};
        break;
    case MixingKind::hypermixer_untied: {
        auto h1 = make_mlp<T>(d, dp, dp, rng);
        auto h2 = make_mlp<T>(d, dp, dp, rng);
        s.params = HyperMixerParams<T>{std::move(h1), std::move(h2), std::nullopt};
        break;
    }
    case MixingKind::mlpmixer: {
        const std::size_t n = *spec.n_max;
        MlpMixerParams<T> p;
        p.w1 = uniform_tensor<T>({n, dp}, 1.0 / std::sqrt(static_cast<double>(dp)), rng);
        p.w2 = uniform_tensor<T>({n, dp}, 1.0 / std::sqrt(static_cast<double>(n)), rng);
        s.params = std::move(p);
        break;
    }
    case MixingKind::gmlp: {
        const std::size_t n = *spec.n_max, half = dp / 2;
        GmlpParams<T> p;
        p.in = make_linear<T>(d, dp, rng);
        p.norm = make_norm<T>(half);
        p.spatial = uniform_tensor<T>({n, n}, 1e-3, rng);
        p.spatial_bias = Tensor<T>({n}, T(1), true);
        p.out = make_linear<T>(half, d, rng);
        s.params = std::move(p);
        break;
    }
    case MixingKind::attention: {
        AttentionParams<T> p;
        p.q = make_linear<T>(d, d, rng);
        p.k = make_linear<T>(d, d, rng);
        p.v = make_linear<T>(d, d, rng);
        p.o = make_linear<T>(d, d, rng);
        s.params = std::move(p);
        break;
    }
    case MixingKind::shared_vector: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(dp));
        s.params = SharedVectorParams<T>{uniform_tensor<T>({dp}, bound, rng), uniform_tensor<T>({dp}, bound, rng)};
        break;
    }
    case MixingKind::fnet:
    case MixingKind::identity: break;
    }
    if (spec.output_norm) std::get<HyperMixerParams<T>>(s.params).out_norm = make_norm<T>(d);
    return s;
}

/// Analytic number of learnable scalars in one token-mixing module.
inline std::size_t count_mixing_params(const TokenMixingSpec& spec)
{
    spec.validate();
    const std::size_t d = spec.d, dp = spec.d_prime;
    const std::size_t hypernet = d * dp + dp + dp * dp + dp;
    const std::size_t norm = spec.output_norm ? 2 * d : 0;
    switch (spec.kind) {
    case MixingKind::hypermixer_tied: return hypernet + norm;
    case MixingKind::hypermixer_untied: return 2 * hypernet + norm;
    case MixingKind::mlpmixer: return 2 * *spec.n_max * dp;
    case MixingKind::gmlp: {
        const std::size_t n = *spec.n_max, half = dp / 2;
        return d * dp + dp + 2 * half + n * n + n + half * d + d;
    }
    case MixingKind::attention: return 4 * (d * d + d);
    case MixingKind::shared_vector: return 2 * dp;
    case MixingKind::fnet:
    case MixingKind::identity: return 0;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Linear<T>& l)
{
    return add_bias(tape, matmul(tape, x, l.weight), l.bias);
}

template <class T>
Tensor<T> mlp_forward(Tape<T>& tape, const Tensor<T>& x, const TwoLayerMlp<T>& m)
{
    return linear(tape, gelu(tape, linear(tape, x, m.first)), m.second);
}

/// Standard sinusoidal absolute position table [n, d].
template <class T>
Tensor<T> sinusoidal_positions(std::size_t n, std::size_t d)
{
    Tensor<T> p(Shape{n, d});
    for (std::size_t pos = 0; pos < n; ++pos)
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double a = static_cast<double>(pos) * freq;
            p(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
        }
    return p;
}

/// Position table repeated over a batch: [batch, n, d].
template <class T>
Tensor<T> batch_positions(std::size_t batch, std::size_t n, std::size_t d)
{
    const auto p = sinusoidal_positions<T>(n, d);
    Tensor<T> out(Shape{batch, n, d});
    for (std::size_t b = 0; b < batch; ++b) std::copy(p.data().begin(), p.data().end(), out.ptr() + b * n * d);
    return out;
}

/// Per-batch-entry attention weights averaged over heads, [batch, N, N].
struct AttentionProbe {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<double> weights;
};

// ---------------------------------------------------------------------------
// Token mixing
// ---------------------------------------------------------------------------

/// The mixing MLP applied to every feature column: W1 * GELU(W2^T * X).
/// W1 and W2 are [B, N, d'] (or a shared [N, d']); X is [B, N, d].
template <class T>
Tensor<T> mlp1_forward(Tape<T>& tape, const Tensor<T>& w1, const Tensor<T>& w2, const Tensor<T>& x)
{
    auto hidden = gelu(tape, matmul(tape, w2, x, /*trans_a=*/true));
    return matmul(tape, w1, hidden);
}

/// Generates W1 (and W2) row by row: row j = MLP(x_j + p_j). P may be null.
/// The tied variant returns the same tensor twice.
template <class T>
std::pair<Tensor<T>, Tensor<T>> hypernet_generate(Tape<T>& tape, const Tensor<T>& x,
                                                  const Tensor<std::type_identity_t<T>>* positions,
                                                  const MixingLayerState<T>& state)
{
    const auto& p = std::get<HyperMixerParams<T>>(state.params);
    if (positions && positions->shape() != x.shape())
        throw ShapeError("position vectors " + shape_string(positions->shape()) + " do not match tokens " +
                         shape_string(x.shape()));
    const Tensor<T> in = positions ? add(tape, x, *positions) : x;
    auto w1 = mlp_forward(tape, in, p.h1);
    if (!p.h2) return {w1, w1};
    auto w2 = mlp_forward(tape, in, *p.h2);
    return {std::move(w1), std::move(w2)};
}

template <class T>
Tensor<T> hypermixer_mix(Tape<T>& tape, const MixingLayerState<T>& state, const Tensor<T>& x, const Mask& mask)
{
    Tensor<T> pos;
    if (state.spec.reinject_positions) pos = batch_positions<T>(x.dim(0), x.dim(1), x.dim(2));
    auto [w1, w2] = hypernet_generate(tape, x, state.spec.reinject_positions ? &pos : nullptr, state);
    const bool tied = w1.same_storage(w2);
    w1 = mask_rows(tape, w1, mask);
    w2 = tied ? w1 : mask_rows(tape, w2, mask);
    auto out = mlp1_forward(tape, w1, w2, x);
    const auto& norm = std::get<HyperMixerParams<T>>(state.params).out_norm;
    if (!norm) return out;
    return mask_rows(tape, layer_norm(tape, out, norm->gain, norm->bias), mask);
}

template <class T>
void check_capacity(const TokenMixingSpec& spec, std::size_t n)
{
    if (spec.n_max && n > *spec.n_max)
        throw CapacityError(std::string(kind_name(spec.kind)) + " holds weights for " + std::to_string(*spec.n_max) +
                            " tokens but received " + std::to_string(n));
}

template <class T>
Tensor<T> mlpmixer_mix(Tape<T>& tape, const MixingLayerState<T>& state, const Tensor<T>& x, const Mask& mask)
{
    const std::size_t n = x.dim(1);
    check_capacity<T>(state.spec, n);
    const auto& p = std::get<MlpMixerParams<T>>(state.params);
    const auto dp = state.spec.d_prime;
    auto w1 = crop(tape, p.w1, n, dp);
    auto w2 = crop(tape, p.w2, n, dp);
    auto xm = mask_rows(tape, x, mask);
    return mask_rows(tape, mlp1_forward(tape, w1, w2, xm), mask);
}

/// Spatial gating: Z = GELU(X U); gate = Z1 * (T * LN(Z2) + b); out = gate V.
template <class T>
Tensor<T> gmlp_mix(Tape<T>& tape, const MixingLayerState<T>& state, const Tensor<T>& x, const Mask& mask)
{
    const std::size_t n = x.dim(1);
    check_capacity<T>(state.spec, n);
    const auto& p = std::get<GmlpParams<T>>(state.params);
    const std::size_t half = state.spec.d_prime / 2;
    auto z = gelu(tape, linear(tape, x, p.in));
    auto z1 = slice_last(tape, z, 0, half);
    auto z2 = mask_rows(tape, layer_norm(tape, slice_last(tape, z, half, 2 * half), p.norm.gain, p.norm.bias), mask);
    auto spatial = matmul(tape, crop(tape, p.spatial, n, n), z2);
    auto gate = add_row_bias(tape, spatial, crop(tape, p.spatial_bias, n));
    return mask_rows(tape, linear(tape, mul(tape, z1, gate), p.out), mask);
}

template <class T>
Tensor<T> fnet_mix(Tape<T>& tape, const Tensor<T>& x, const Mask& mask)
{
    return dft_real(tape, x, mask);
}

template <class T>
Tensor<T> shared_vector_mix(Tape<T>& tape, const MixingLayerState<T>& state, const Tensor<T>& x, const Mask& mask)
{
    const auto& p = std::get<SharedVectorParams<T>>(state.params);
    auto w1 = mask_rows(tape, repeat_rows(tape, p.w1, x.dim(0), x.dim(1)), mask);
    auto w2 = mask_rows(tape, repeat_rows(tape, p.w2, x.dim(0), x.dim(1)), mask);
    return mlp1_forward(tape, w1, w2, x);
}

/// Multi-head self-attention: per head softmax(Q K^T / sqrt(d/h) + mask) V,
/// heads concatenated and projected. Padding keys get zero weight and padding
/// rows of the output are zeroed.
template <class T>
Tensor<T> attention_mix(Tape<T>& tape, const MixingLayerState<T>& state, const Tensor<T>& x, const Mask& mask,
                        AttentionProbe* probe = nullptr)
{
    const auto& p = std::get<AttentionParams<T>>(state.params);
    const std::size_t h = state.spec.heads, d = state.spec.d, B = x.dim(0), N = x.dim(1);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d / h));
    auto q = split_heads(tape, scale(tape, linear(tape, x, p.q), inv_sqrt), h);
    auto k = split_heads(tape, linear(tape, x, p.k), h);
    auto v = split_heads(tape, linear(tape, x, p.v), h);
    auto weights = softmax_rows(tape, matmul(tape, q, k, false, true), &mask, h);
    if (probe) {
        probe->batch = B;
        probe->length = N;
        probe->weights.assign(B * N * N, 0.0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t hh = 0; hh < h; ++hh)
                for (std::size_t i = 0; i < N * N; ++i)
                    probe->weights[b * N * N + i] += weights.ptr()[(b * h + hh) * N * N + i] / static_cast<double>(h);
    }
    auto ctx = merge_heads(tape, matmul(tape, weights, v), h);
    return mask_rows(tape, linear(tape, ctx, p.o), mask);
}

/// Dispatches to the configured variant. X is [B, N, d].
template <class T>
Tensor<T> token_mix(Tape<T>& tape, const MixingLayerState<T>& state, const Tensor<T>& x, const Mask& mask,
                    AttentionProbe* probe = nullptr)
{
    if (x.rank() != 3 || x.dim(2) != state.spec.d)
        throw ShapeError("token_mix expects [B, N, " + std::to_string(state.spec.d) + "], got " +
                         shape_string(x.shape()));
    detail::require_mask(mask, x.shape());
    switch (state.spec.kind) {
    case MixingKind::hypermixer_tied:
    case MixingKind::hypermixer_untied: return hypermixer_mix(tape, state, x, mask);
    case MixingKind::mlpmixer: return mlpmixer_mix(tape, state, x, mask);
    case MixingKind::gmlp: return gmlp_mix(tape, state, x, mask);
    case MixingKind::fnet: return fnet_mix(tape, x, mask);
    case MixingKind::attention: return attention_mix(tape, state, x, mask, probe);
    case MixingKind::shared_vector: return shared_vector_mix(tape, state, x, mask);
    case MixingKind::identity: return x;
    }
    return x;
}

/// Per-token two-layer perceptron d -> d' -> d.
template <class T>
Tensor<T> feature_mix(Tape<T>& tape, const TwoLayerMlp<T>& mlp, const Tensor<T>& x)
{
    return mlp_forward(tape, x, mlp);
}

}  // namespace hmx
