#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hypermixer/model.hpp"

namespace hmx {

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0;
    bool passed = false;
};

/// Worst per-tensor norm-wise relative error between autodiff and central
/// differences: ||ga - gn|| / max(||ga|| + ||gn||, 1e-3 ||g_all|| + 1e-12).
/// The floor keeps gradients that vanish exactly (e.g. a key bias) from
/// turning round-off into a large ratio.
inline double fd_relative_error(const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                                std::vector<Tensor<double>> params, double h = 1e-5)
{
    for (auto& p : params) p.clear_grad();
    {
        Tape<double> tape;
        tape.backward(loss_fn(tape));
    }
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(p.numel(), 0.0);
    }
    std::vector<std::vector<double>> numeric;
    double global = 0;
    for (auto& p : params) {
        std::vector<double> g(p.numel());
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double orig = p.data()[i];
            Tape<double> t;
            t.set_recording(false);
            p.data()[i] = orig + h;
            const double up = loss_fn(t).item();
            p.data()[i] = orig - h;
            const double down = loss_fn(t).item();
            p.data()[i] = orig;
            g[i] = (up - down) / (2 * h);
        }
        numeric.push_back(std::move(g));
    }
    for (const auto& a : analytic)
        for (double v : a) global += v * v;
    const double floor = 1e-3 * std::sqrt(global) + 1e-12;
    double worst = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        double diff = 0, na = 0, nn = 0;
        for (std::size_t i = 0; i < analytic[k].size(); ++i) {
            diff += (analytic[k][i] - numeric[k][i]) * (analytic[k][i] - numeric[k][i]);
            na += analytic[k][i] * analytic[k][i];
            nn += numeric[k][i] * numeric[k][i];
        }
        worst = std::max(worst, std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), floor));
    }
    return worst;
}

namespace detail {

inline Tensor<double> gc_tensor(Shape s, Rng& rng)
{
    return uniform_tensor<double>(std::move(s), 1.0, rng);
}

inline Batch gc_batch(std::size_t vocab)
{
    Batch b;
    b.size = 2;
    b.length = 5;
    b.tokens = {1, 4, 2, 7, 3, 5, 0, 6, 0, 0};
    for (auto& t : b.tokens) t %= static_cast<std::int32_t>(vocab);
    const std::size_t lens[] = {5, 3};
    b.mask = Mask::from_lengths(lens, 5);
    b.labels = {0, 2};
    return b;
}

}  // namespace detail

/// Finite-difference checks of the individual operations.
inline std::vector<GradcheckResult> op_gradchecks(double tol, std::uint64_t seed = 0)
{
    Rng rng(seed);
    std::vector<GradcheckResult> out;
    auto check = [&](const std::string& name, const std::function<Tensor<double>(Tape<double>&)>& f,
                     std::vector<Tensor<double>> params) {
        const double e = fd_relative_error(f, std::move(params));
        out.push_back({name, e, e < tol});
    };
    auto a = detail::gc_tensor({2, 3, 4}, rng), b = detail::gc_tensor({4, 5}, rng), c = detail::gc_tensor({2, 5, 4}, rng);
    auto w = detail::gc_tensor({2, 3, 4}, rng), mw = detail::gc_tensor({2, 3, 5}, rng);
    check("matmul", [&](Tape<double>& t) { return sum(t, mul(t, matmul(t, a, b), mw)); }, {a, b});
    check("matmul_transposed", [&](Tape<double>& t) { return sum(t, gelu(t, matmul(t, a, c, false, true))); }, {a, c});
    check("gelu", [&](Tape<double>& t) { return sum(t, mul(t, gelu(t, a), w)); }, {a});
    const std::size_t lens[] = {4, 2};
    const Mask m = Mask::from_lengths(lens, 4);
    auto s = detail::gc_tensor({2, 4, 4}, rng), sw = detail::gc_tensor({2, 4, 4}, rng);
    check("softmax_masked", [&](Tape<double>& t) { return sum(t, mul(t, softmax_rows(t, s, &m), sw)); }, {s});
    auto g = detail::gc_tensor({4}, rng), bias = detail::gc_tensor({4}, rng);
    check("layer_norm", [&](Tape<double>& t) { return sum(t, mul(t, layer_norm(t, a, g, bias), w)); }, {a, g, bias});
    auto logits = detail::gc_tensor({3, 4}, rng);
    const std::int32_t labels[] = {0, 3, 1};
    check("cross_entropy", [&](Tape<double>& t) { return cross_entropy(t, logits, std::span<const std::int32_t>(labels)); },
          {logits});
    const std::vector<double> target(24, 0.25);
    check("mse_loss", [&](Tape<double>& t) { return mse_loss(t, a, std::span<const double>(target)); }, {a});
    auto x = detail::gc_tensor({2, 6, 3}, rng), xw = detail::gc_tensor({2, 6, 3}, rng);
    const std::size_t lens6[] = {6, 4};
    const Mask m6 = Mask::from_lengths(lens6, 6);
    check("dft_real", [&](Tape<double>& t) { return sum(t, mul(t, dft_real(t, x, m6), xw)); }, {x});
    check("dropout", [&](Tape<double>& t) {
        Rng r(7);
        return sum(t, mul(t, dropout(t, a, 0.3, true, r), w));
    }, {a});
    return out;
}

/// End-to-end check of a small classifier with the given token mixing.
inline GradcheckResult model_gradcheck(const TokenMixingSpec& mixing, const std::string& name, double tol,
                                       std::uint64_t seed = 0)
{
    ModelConfig c;
    c.num_layers = 2;
    c.d = 4;
    c.d_prime = 6;
    c.vocab_size = 9;
    c.dropout_p = 0.0;
    c.num_classes = 3;
    c.token_mixing = mixing;
    if (mixing.kind == MixingKind::attention) c.token_mixing.heads = 2;
    if (is_fixed_length(mixing.kind) && !c.token_mixing.n_max) c.token_mixing.n_max = 8;
    Model<double> model(c, seed);
    const Batch batch = detail::gc_batch(c.vocab_size);
    const double e = fd_relative_error(
        [&](Tape<double>& t) { return cross_entropy(t, model.forward(t, batch), batch.labels); }, model.parameters());
    return {name, e, e < tol};
}

inline std::vector<GradcheckResult> variant_gradchecks(const std::vector<MixingKind>& kinds, double tol,
                                                       std::uint64_t seed = 0)
{
    std::vector<GradcheckResult> out;
    for (auto k : kinds) {
        TokenMixingSpec s;
        s.kind = k;
        out.push_back(model_gradcheck(s, "model/" + std::string(kind_name(k)), tol, seed));
        if (is_hypermixer(k)) {
            s.output_norm = true;
            out.push_back(model_gradcheck(s, "model/" + std::string(kind_name(k)) + "+output_norm", tol, seed));
        }
    }
    return out;
}

}  // namespace hmx
