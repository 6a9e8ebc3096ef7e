#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hypermixer/mixing.hpp"

namespace hmx {

using u64 = std::uint64_t;

/// [N x d] times [d x M].
inline u64 flops_matmul(u64 n, u64 m, u64 d) { return n * m * 2 * d; }

/// One input vector through a bias-free linear layer.
inline u64 flops_linear(u64 in, u64 out) { return 2 * in * out; }

inline u64 flops_gelu(u64 elements) { return 9 * elements; }

/// Per input vector, d -> d' -> d.
inline u64 flops_mlp_equal(u64 d, u64 dp) { return 4 * d * dp + dp * 9; }

/// Per input vector, d -> d' -> d''.
inline u64 flops_mlp_unequal(u64 d, u64 dp, u64 dpp) { return 2 * d * dp + 2 * (dp * dpp) + dp * 9; }

/// One softmax row of length n.
inline u64 flops_softmax(u64 n) { return 3 * n; }

/// Tied hypernetwork: every token through d -> d' -> d'.
inline u64 flops_hypernet_tied(u64 n, u64 d, u64 dp) { return n * (2 * d * dp + 2 * dp * dp + 9 * dp); }

/// W1 GELU(W2^T X) for all d feature columns; "9'" read as 9 d'.
inline u64 flops_mixing_mlp(u64 n, u64 d, u64 dp) { return d * (4 * n * dp + 9 * dp); }

inline u64 flops_hypermixer(u64 n, u64 d, u64 dp)
{
    if (n == 0 || d == 0 || dp == 0) throw ParameterError("flops_hypermixer needs positive N, d, d'");
    return flops_mixing_mlp(n, d, dp) + flops_hypernet_tied(n, d, dp);
}

enum class AttentionCount {
    as_printed,  // projection term without a factor N, exactly as written
    corrected,   // projections for every token, softmax over every row
};

inline u64 flops_attention(u64 n, u64 d, u64 h, AttentionCount mode = AttentionCount::as_printed)
{
    if (n == 0 || d == 0) throw ParameterError("flops_attention needs positive N and d");
    if (h == 0 || d % h != 0) throw ParameterError("attention heads must divide d");
    const u64 e = d / h;
    if (mode == AttentionCount::as_printed) return h * 3 * 2 * e * e + h * ((n * n) * 2 * e) + 3 * n + (n * n * d * 2);
    return 3 * n * 2 * d * d + h * (n * n * 2 * e) + h * n * flops_softmax(n) + n * n * d * 2;
}

/// Closed-form counts for one configuration, with instrumented counts
/// filled in by instrumented_report().
struct FlopReport {
    u64 n = 0, d = 0, d_prime = 0, d_second = 0, heads = 0;
    u64 matmul = 0;  // [N x d] [d x d']
    u64 linear = 0;  // one vector d -> d'
    u64 gelu = 0;    // N x d' activations
    u64 mlp_eq = 0;
    u64 mlp_neq = 0;
    u64 softmax = 0;  // one row of length N
    u64 hypernet_tied = 0;
    u64 mixing_mlp = 0;
    u64 hypermixer_total = 0;
    u64 attention_total = 0;
    std::optional<u64> measured_mixing_mlp;
    std::optional<u64> measured_hypernet_tied;
    std::optional<u64> measured_feature_mix;  // all N tokens
    std::optional<u64> measured_softmax;      // one row
};

inline FlopReport flop_report(u64 n, u64 d, u64 dp, u64 dpp, u64 h)
{
    FlopReport r;
    r.n = n;
    r.d = d;
    r.d_prime = dp;
    r.d_second = dpp;
    r.heads = h;
    r.matmul = flops_matmul(n, dp, d);
    r.linear = flops_linear(d, dp);
    r.gelu = flops_gelu(n * dp);
    r.mlp_eq = flops_mlp_equal(d, dp);
    r.mlp_neq = flops_mlp_unequal(d, dp, dpp);
    r.softmax = flops_softmax(n);
    r.hypernet_tied = flops_hypernet_tied(n, d, dp);
    r.mixing_mlp = flops_mixing_mlp(n, d, dp);
    r.hypermixer_total = flops_hypermixer(n, d, dp);
    r.attention_total = flops_attention(n, d, h);
    return r;
}

/// Runs the real ops on one random example and reads the bias-free
/// instrumentation counter.
inline FlopReport instrumented_report(u64 n, u64 d, u64 dp, u64 dpp, u64 h, std::uint64_t seed = 1)
{
    FlopReport r = flop_report(n, d, dp, dpp, h);
    Rng rng(seed);
    auto x = uniform_tensor<double>({1, n, d}, 1.0, rng);
    {
        Tape<double> t;
        auto w1 = uniform_tensor<double>({1, n, dp}, 1.0, rng), w2 = uniform_tensor<double>({1, n, dp}, 1.0, rng);
        mlp1_forward(t, w1, w2, x);
        r.measured_mixing_mlp = t.flops().bias_free();
    }
    {
        TokenMixingSpec spec;
        spec.d = d;
        spec.d_prime = dp;
        auto st = make_mixing_state<double>(spec, rng);
        Tape<double> t;
        hypernet_generate(t, x, nullptr, st);
        r.measured_hypernet_tied = t.flops().bias_free();
    }
    {
        auto mlp = make_mlp<double>(d, dp, d, rng);
        Tape<double> t;
        feature_mix(t, mlp, x);
        r.measured_feature_mix = t.flops().bias_free();
    }
    {
        Tape<double> t;
        softmax_rows(t, uniform_tensor<double>({1, n}, 1.0, rng));
        r.measured_softmax = t.flops().bias_free();
    }
    return r;
}

/// CSV with columns N, flops_hypermixer, flops_attention, ratio.
inline void emit_complexity_table(const std::vector<u64>& n_list, u64 d, u64 dp, u64 h, const std::string& path)
{
    if (n_list.empty()) throw ParameterError("complexity table needs at least one N");
    std::ostringstream os;
    os << "N,flops_hypermixer,flops_attention,ratio\n";
    for (u64 n : n_list) {
        const u64 hm = flops_hypermixer(n, d, dp), at = flops_attention(n, d, h);
        os << n << ',' << hm << ',' << at << ',' << std::setprecision(9)
           << static_cast<double>(at) / static_cast<double>(hm) << '\n';
    }
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << os.str();
    if (!f) throw IoError("failed writing " + path);
}

}  // namespace hmx
