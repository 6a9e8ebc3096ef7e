#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hypermixer/tensor.hpp"

namespace testutil {

using hmx::Tape;
using hmx::Tensor;

// Central differences against autodiff. Returns the worst per-tensor
// norm-wise relative error ||ga - gn|| / max(||ga|| + ||gn||, floor), where
// floor = 1e-3 * (global gradient norm) + 1e-12. The floor covers gradients
// that are exactly zero, e.g. a key bias under softmax.
inline double fd_max_rel_error(const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                               std::vector<Tensor<double>> params, double h = 1e-5)
{
    for (auto& p : params) p.clear_grad();
    {
        Tape<double> tape;
        auto loss = loss_fn(tape);
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic, numeric;
    double global = 0.0;
    for (auto& p : params) {
        std::vector<double> ga(p.numel(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), ga.begin());
        std::vector<double> gn(p.numel());
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double keep = p.data()[i];
            Tape<double> t;
            t.set_recording(false);
            p.data()[i] = keep + h;
            const double up = loss_fn(t).item();
            p.data()[i] = keep - h;
            const double down = loss_fn(t).item();
            p.data()[i] = keep;
            gn[i] = (up - down) / (2 * h);
        }
        for (double g : ga) global += g * g;
        analytic.push_back(std::move(ga));
        numeric.push_back(std::move(gn));
    }
    const double floor = 1e-3 * std::sqrt(global) + 1e-12;
    double worst = 0.0;
    for (std::size_t t = 0; t < analytic.size(); ++t) {
        double diff = 0, na = 0, nn = 0;
        for (std::size_t i = 0; i < analytic[t].size(); ++i) {
            const double a = analytic[t][i], n = numeric[t][i];
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        worst = std::max(worst, std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), floor));
    }
    return worst;
}

// Deterministic pseudo-random fill in [-1, 1].
inline Tensor<double> random_tensor(hmx::Shape shape, unsigned seed, bool rg = true)
{
    Tensor<double> t(std::move(shape), 0.0, rg);
    std::uint64_t s = 0x9E3779B97F4A7C15ull * (seed + 1);
    for (auto& v : t.data()) {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        v = static_cast<double>(s % 2000001) / 1000000.0 - 1.0;
    }
    return t;
}

}  // namespace testutil
