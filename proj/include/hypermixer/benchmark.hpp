#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "hypermixer/flops.hpp"
#include "hypermixer/text.hpp"

namespace hmx {

struct TimingRecord {
    std::string variant;
    std::size_t n = 0, d = 0, d_prime = 0, heads = 0;
    std::size_t repetitions = 0;
    double median_seconds = 0, p10_seconds = 0, p90_seconds = 0;
    std::string precision;
    u64 flops = 0;
    std::string flops_source;  // closed_form or instrumented
};

struct TimingRequest {
    MixingKind kind = MixingKind::hypermixer_tied;
    std::size_t n = 512;
    std::size_t d = 256;
    std::size_t d_prime = 512;
    std::size_t heads = 4;
    std::size_t repetitions = 100;
    std::optional<std::size_t> n_max;  // fixed-length kinds; defaults to the text length cap
    std::uint64_t seed = 0;
};

template <class T>
constexpr const char* precision_name()
{
    return std::is_same_v<T, float> ? "float32" : "float64";
}

/// Linear interpolation between order statistics, q in [0, 1].
inline double quantile(std::vector<double> v, double q)
{
    if (v.empty()) throw ParameterError("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline void require_single_thread()
{
    if (Eigen::nbThreads() > 1)
        throw UsageError("benchmarks must run single-threaded; Eigen uses " + std::to_string(Eigen::nbThreads()) +
                         " threads");
}

/// Closed-form count where one exists, otherwise the instrumented count of one pass.
inline std::pair<u64, const char*> mixing_flops(const TokenMixingSpec& spec, std::size_t n, u64 instrumented)
{
    switch (spec.kind) {
    case MixingKind::hypermixer_tied: return {flops_hypermixer(n, spec.d, spec.d_prime), "closed_form"};
    case MixingKind::hypermixer_untied:
        return {flops_mixing_mlp(n, spec.d, spec.d_prime) + 2 * flops_hypernet_tied(n, spec.d, spec.d_prime),
                "closed_form"};
    case MixingKind::mlpmixer: return {flops_mixing_mlp(n, spec.d, spec.d_prime), "closed_form"};
    case MixingKind::attention: return {flops_attention(n, spec.d, spec.heads), "closed_form"};
    default: return {instrumented, "instrumented"};
    }
}

/// Times the token-mixing block alone on one example, evaluation mode, no
/// tape recording. Inputs and parameters are allocated before the timed loop.
template <class T = float>
TimingRecord time_mixing(const TimingRequest& r)
{
    require_single_thread();
    if (r.repetitions == 0) throw ParameterError("repetitions must be at least 1");
    if (r.n == 0) throw ParameterError("N must be positive");
    TokenMixingSpec spec;
    spec.kind = r.kind;
    spec.d = r.d;
    spec.d_prime = r.d_prime;
    spec.heads = r.heads;
    if (is_fixed_length(r.kind)) spec.n_max = r.n_max ? *r.n_max : default_n_cap(r.kind);
    spec.validate();
    if (spec.n_max && r.n > *spec.n_max)
        throw CapacityError(std::string(kind_name(r.kind)) + " holds weights for " + std::to_string(*spec.n_max) +
                            " tokens but N = " + std::to_string(r.n));

    Rng rng(r.seed);
    const auto state = make_mixing_state<T>(spec, rng);
    auto x = uniform_tensor<T>({1, r.n, r.d}, 1.0, rng);
    x.set_requires_grad(false);
    const Mask mask = Mask::all_valid(1, r.n);

    u64 instrumented = 0;
    volatile double sink = 0;
    auto once = [&] {
        Tape<T> tape;
        tape.set_recording(false);
        auto out = token_mix(tape, state, x, mask);
        sink = sink + static_cast<double>(out.ptr()[0]);
        instrumented = tape.flops().bias_free();
    };
    const std::size_t warmup = std::max<std::size_t>(10, r.repetitions / 10);
    for (std::size_t i = 0; i < warmup; ++i) once();
    std::vector<double> times;
    times.reserve(r.repetitions);
    for (std::size_t i = 0; i < r.repetitions; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        once();
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }

    TimingRecord rec;
    rec.variant = kind_name(r.kind);
    rec.n = r.n;
    rec.d = r.d;
    rec.d_prime = r.d_prime;
    rec.heads = r.heads;
    rec.repetitions = r.repetitions;
    rec.median_seconds = quantile(times, 0.5);
    rec.p10_seconds = quantile(times, 0.1);
    rec.p90_seconds = quantile(times, 0.9);
    rec.precision = precision_name<T>();
    const auto [f, src] = mixing_flops(spec, r.n, instrumented);
    rec.flops = f;
    rec.flops_source = src;
    return rec;
}

/// Least-squares slope of log(median) against log(N).
inline double scaling_exponent(const std::vector<TimingRecord>& records)
{
    std::vector<std::size_t> ns;
    for (const auto& r : records) {
        if (!(r.median_seconds > 0)) throw ParameterError("scaling fit needs positive median times");
        ns.push_back(r.n);
    }
    std::sort(ns.begin(), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    if (ns.size() < 4 || ns.back() < 8 * ns.front())
        throw ParameterError("scaling fit needs at least 4 distinct N spanning at least 8x");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double m = static_cast<double>(records.size());
    for (const auto& r : records) {
        const double x = std::log(static_cast<double>(r.n)), y = std::log(r.median_seconds);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

inline constexpr const char* benchmark_csv_header =
    "variant,n,d,d_prime,heads,repetitions,median_seconds,p10_seconds,p90_seconds,precision,flops,flops_source";

/// One row per record; the first line is a '#' comment with run metadata.
inline void emit_benchmark_csv(const std::vector<TimingRecord>& records, const std::string& path,
                               const std::string& metadata = "")
{
    std::ostringstream os;
    os << "# threads=" << Eigen::nbThreads();
    if (!metadata.empty()) os << ' ' << metadata;
    os << '\n' << benchmark_csv_header << '\n' << std::setprecision(9);
    for (const auto& r : records)
        os << r.variant << ',' << r.n << ',' << r.d << ',' << r.d_prime << ',' << r.heads << ',' << r.repetitions
           << ',' << r.median_seconds << ',' << r.p10_seconds << ',' << r.p90_seconds << ',' << r.precision << ','
           << r.flops << ',' << r.flops_source << '\n';
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << os.str();
    if (!f) throw IoError("failed writing " + path);
}

inline std::vector<TimingRecord> read_benchmark_csv(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::vector<TimingRecord> out;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != benchmark_csv_header) throw DataError(path + ": unexpected header");
            header = true;
            continue;
        }
        std::stringstream ss(line);
        std::vector<std::string> c;
        std::string cell;
        while (std::getline(ss, cell, ',')) c.push_back(cell);
        if (c.size() != 12) throw DataError(path + ": line " + std::to_string(lineno) + ": expected 12 columns");
        try {
            TimingRecord r;
            r.variant = c[0];
            r.n = std::stoull(c[1]);
            r.d = std::stoull(c[2]);
            r.d_prime = std::stoull(c[3]);
            r.heads = std::stoull(c[4]);
            r.repetitions = std::stoull(c[5]);
            r.median_seconds = std::stod(c[6]);
            r.p10_seconds = std::stod(c[7]);
            r.p90_seconds = std::stod(c[8]);
            r.precision = c[9];
            r.flops = std::stoull(c[10]);
            r.flops_source = c[11];
            out.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw DataError(path + ": line " + std::to_string(lineno) + ": bad number");
        }
    }
    return out;
}

}  // namespace hmx
