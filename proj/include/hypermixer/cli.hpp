#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hypermixer/benchmark.hpp"
#include "hypermixer/gradcheck.hpp"
#include "hypermixer/text_run.hpp"

namespace hmx::cli {

enum ExitCode : int { ok = 0, failed = 1, usage = 2, io = 3 };

/// Held-out stream for attention-map sequences, disjoint from train/validation/test.
inline constexpr std::uint64_t map_stream_offset = 3'000'000'000ull;
inline constexpr std::size_t num_map_sequences = 4;

namespace detail {

inline void write_json(const json& j, const std::filesystem::path& p)
{
    std::ofstream f(p);
    if (!f) throw IoError("cannot write " + p.string());
    f << j.dump(2) << '\n';
    if (!f) throw IoError("failed writing " + p.string());
}

struct GradcheckArgs {
    std::string variant;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out)
{
    std::vector<GradcheckResult> results;
    if (a.variant.empty()) {
        results = op_gradchecks(a.tolerance, a.seed);
        const std::vector<MixingKind> kinds(all_mixing_kinds.begin(), all_mixing_kinds.end());
        for (auto& r : variant_gradchecks(kinds, a.tolerance, a.seed)) results.push_back(r);
    } else {
        results = variant_gradchecks({parse_mixing_kind(a.variant)}, a.tolerance, a.seed);
    }
    bool all = true;
    for (const auto& r : results) {
        out << std::left << std::setw(36) << r.name << ' ' << std::scientific << std::setprecision(3)
            << r.max_rel_error << ' ' << (r.passed ? "PASS" : "FAIL") << '\n';
        all = all && r.passed;
    }
    out << (all ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << a.tolerance << ")\n";
    return all ? ok : failed;
}

struct SynthArgs {
    std::string config;
    std::string variant = "hypermixer";
    std::size_t examples = 5000;
    std::uint64_t seed = 0;
    std::string out = "synth_out";
    std::size_t d = 32, d_prime = 64;
    std::size_t steps = 2000, rounds = 10;
    std::size_t validation = 500, test = 10000;
    bool output_norm = true;
    std::string precision = "float32";
};

template <class T>
int synth_impl(const SyntheticConfig& c, const std::filesystem::path& dir, std::ostream& out)
{
    std::filesystem::create_directories(dir);
    auto r = train_synthetic<T>(c);
    json mse{{"variant", variant_name(c.variant)},
             {"examples", c.num_train},
             {"seed", c.seed},
             {"test_mse", r.test_mse},
             {"task_floor", r.task_floor},
             {"above_floor", r.test_mse > r.task_floor},
             {"optimizer_steps", r.training.steps},
             {"best_round", r.training.best_epoch},
             {"validation_mse", r.training.best_score},
             {"config", hmx::detail::synthetic_to_json(c)}};
    const auto mse_path = dir / "mse.json";
    write_json(mse, mse_path);
    out << variant_name(c.variant) << " test_mse " << std::setprecision(6) << r.test_mse << " task_floor "
        << r.task_floor << " (" << std::fixed << std::setprecision(1) << r.seconds << " s)\n"
        << std::defaultfloat;
    out << "wrote " << mse_path.string() << '\n';

    if (c.variant == SyntheticVariant::none) {
        out << "no token mixing: attention maps skipped\n";
        return ok;
    }
    const auto seqs = generate(c.seed, num_map_sequences, map_stream_offset, c.generator);
    write_dataset_csv(seqs, (dir / "map_sequences.csv").string());
    json maps = json::array();
    for (std::size_t k = 0; k < seqs.size(); ++k) {
        const auto pm = pseudo_attention(r.model, seqs[k].input);
        const std::string stem = "map_" + std::to_string(k);
        export_map(pm, (dir / (stem + ".pgm")).string(), MapFormat::pgm);
        export_map(pm, (dir / (stem + ".csv")).string(), MapFormat::csv);
        const auto mass = shape_mass(pm, seqs[k]);
        json entry{{"index", k}, {"provenance", "pseudo"}, {"same_shape_mass", mass.same},
                   {"different_shape_mass", mass.different}};
        if (c.variant == SyntheticVariant::attention) {
            const auto tm = true_attention(r.model, seqs[k].input);
            export_map(tm, (dir / ("true_" + stem + ".pgm")).string(), MapFormat::pgm);
            export_map(tm, (dir / ("true_" + stem + ".csv")).string(), MapFormat::csv);
            const auto tmass = shape_mass(tm, seqs[k]);
            entry["true_same_shape_mass"] = tmass.same;
            entry["true_different_shape_mass"] = tmass.different;
            entry["top1_agreement"] = top1_agreement(pm, tm);
            entry["top1_agreement_off_diagonal"] = top1_agreement(pm, tm, true);
        }
        maps.push_back(entry);
        out << "wrote " << (dir / (stem + ".pgm")).string() << '\n';
    }
    write_json(maps, dir / "maps.json");
    out << "wrote " << (dir / "maps.json").string() << '\n';
    return ok;
}

inline int cmd_synth(const SynthArgs& a, std::ostream& out)
{
    SyntheticConfig c;
    std::filesystem::path dir = a.out;
    Precision precision = a.precision == "float64" ? Precision::float64 : Precision::float32;
    if (a.precision != "float32" && a.precision != "float64")
        throw ParameterError("precision must be float32 or float64");
    if (!a.config.empty()) {
        const RunConfig rc = load_run_config(a.config);
        if (rc.task != RunTask::synthetic) throw ConfigError(a.config + ": task is not synthetic");
        c = rc.synthetic;
        dir = rc.output_dir;
        precision = rc.precision;
    } else {
        c.variant = parse_synthetic_variant(a.variant);
        c.num_train = a.examples;
        c.seed = a.seed;
        c.d = a.d;
        c.d_prime = a.d_prime;
        c.steps = a.steps;
        c.rounds = a.rounds;
        c.num_validation = a.validation;
        c.num_test = a.test;
        c.hypermixer_output_norm = a.output_norm;
    }
    return precision == Precision::float32 ? synth_impl<float>(c, dir, out) : synth_impl<double>(c, dir, out);
}

struct BenchArgs {
    std::vector<std::string> variants{"hypermixer_tied", "attention"};
    std::vector<std::size_t> n_grid{512, 1024, 2048, 4096, 8192};
    std::size_t d = 256, d_prime = 512, heads = 4, reps = 100;
    std::size_t n_max = 0;
    std::string precision = "float32";
    std::string out = "bench_out";
};

inline int cmd_bench(const BenchArgs& a, std::ostream& out)
{
    if (a.precision != "float32" && a.precision != "float64")
        throw ParameterError("precision must be float32 or float64");
    for (const auto& v : a.variants) {
        const MixingKind k = parse_mixing_kind(v);
        const std::size_t cap = a.n_max ? a.n_max : default_n_cap(k);
        for (std::size_t n : a.n_grid)
            if (is_fixed_length(k) && n > cap)
                throw CapacityError(v + " holds weights for " + std::to_string(cap) + " tokens but N = " +
                                    std::to_string(n) + " was requested");
    }
    std::vector<TimingRecord> all;
    for (const auto& v : a.variants) {
        std::vector<TimingRecord> recs;
        for (std::size_t n : a.n_grid) {
            TimingRequest q;
            q.kind = parse_mixing_kind(v);
            q.n = n;
            q.d = a.d;
            q.d_prime = a.d_prime;
            q.heads = a.heads;
            q.repetitions = a.reps;
            if (a.n_max) q.n_max = a.n_max;
            recs.push_back(a.precision == "float32" ? time_mixing<float>(q) : time_mixing<double>(q));
            const auto& r = recs.back();
            out << r.variant << " N=" << r.n << " median " << std::setprecision(4) << r.median_seconds * 1e3
                << " ms (p10 " << r.p10_seconds * 1e3 << ", p90 " << r.p90_seconds * 1e3 << ")\n";
        }
        std::optional<double> slope;
        try {
            slope = scaling_exponent(recs);
        } catch (const ParameterError&) {
        }
        if (slope) out << v << " fitted exponent " << std::setprecision(3) << *slope << '\n';
        all.insert(all.end(), recs.begin(), recs.end());
    }
    std::filesystem::create_directories(a.out);
    const auto path = (std::filesystem::path(a.out) / "bench.csv").string();
    emit_benchmark_csv(all, path);
    out << "wrote " << path << '\n';
    return ok;
}

struct FlopsArgs {
    std::vector<std::size_t> n_grid{64, 128, 256, 512, 1024, 2048, 4096};
    std::size_t d = 256, d_prime = 512, heads = 4;
    std::string out = "complexity.csv";
};

inline int cmd_flops(const FlopsArgs& a, std::ostream& out)
{
    std::vector<u64> ns(a.n_grid.begin(), a.n_grid.end());
    const auto parent = std::filesystem::path(a.out).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    emit_complexity_table(ns, a.d, a.d_prime, a.heads, a.out);
    out << std::setw(8) << "N" << std::setw(18) << "hypermixer" << std::setw(18) << "attention" << std::setw(10)
        << "ratio" << '\n';
    for (u64 n : ns) {
        const u64 hm = flops_hypermixer(n, a.d, a.d_prime), at = flops_attention(n, a.d, a.heads);
        out << std::setw(8) << n << std::setw(18) << hm << std::setw(18) << at << std::setw(10) << std::setprecision(4)
            << static_cast<double>(at) / static_cast<double>(hm) << '\n';
    }
    out << "wrote " << a.out << '\n';
    return ok;
}

template <class T>
int train_text_impl(const RunConfig& c, std::ostream& out)
{
    const auto r = run_text<T>(c);
    const auto& best = r.search.records[r.search.best];
    out << "vocabulary " << r.vocab_size << " tokens, " << r.train_examples << " training examples, " << r.truncated
        << " truncated\n";
    out << r.search.records.size() << " trial(s); best score " << std::setprecision(4) << best.score << " (lr "
        << best.learning_rate << ", dropout " << best.dropout_p << ")\n";
    if (r.train_accuracy) out << "train accuracy " << *r.train_accuracy << '\n';
    out << "wrote " << r.trials_path << '\n' << "wrote " << r.summary_path << '\n';
    if (!r.checkpoint_path.empty()) out << "wrote " << r.checkpoint_path << '\n';
    return ok;
}

inline int cmd_train_text(const std::string& config, std::ostream& out)
{
    const RunConfig c = load_run_config(config);
    if (c.task != RunTask::text) throw ConfigError(config + ": task is not text");
    return c.precision == Precision::float32 ? train_text_impl<float>(c, out) : train_text_impl<double>(c, out);
}

struct EvpArgs {
    std::string trials;
    std::vector<std::size_t> k_grid{1, 2, 5, 10, 20};
    std::string out = "evp.csv";
};

inline int cmd_evp(const EvpArgs& a, std::ostream& out)
{
    const auto records = read_trials_jsonl(a.trials);
    std::vector<double> scores;
    for (const auto& r : records) scores.push_back(r.score);
    std::ostringstream csv;
    csv << "k,expected_validation_performance\n" << std::setprecision(9);
    for (std::size_t k : a.k_grid) {
        const double e = expected_validation_performance(scores, k);
        csv << k << ',' << e << '\n';
        out << "k=" << k << " expected best " << std::setprecision(6) << e << '\n';
    }
    const auto parent = std::filesystem::path(a.out).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(a.out);
    if (!f) throw IoError("cannot write " + a.out);
    f << csv.str();
    if (!f) throw IoError("failed writing " + a.out);
    out << "wrote " << a.out << '\n';
    return ok;
}

}  // namespace detail

/// Entry point shared by the executable and the tests. Exit codes: 0 success,
/// 1 failed check or training error, 2 usage or configuration error, 3 I/O error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"HyperMixer reference implementation", "hypermixer"};
    app.require_subcommand(1);

    detail::GradcheckArgs ga;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every operation and variant");
    gc->add_option("--variant", ga.variant, "Check only this token-mixing kind");
    gc->add_option("--tolerance", ga.tolerance, "Maximum relative error")->check(CLI::PositiveNumber);
    gc->add_option("--seed", ga.seed);
#ifdef HMX_FAULT_INJECTION
    bool corrupt = false;
    gc->add_flag("--corrupt-gelu-backward", corrupt, "Test build only: scale the GELU derivative by 1.1");
#endif

    detail::SynthArgs sa;
    auto* sy = app.add_subcommand("synth", "Train on the synthetic shape task and export attention maps");
    sy->add_option("--config", sa.config, "Run config JSON (task: synthetic); overrides the flags");
    sy->add_option("--variant", sa.variant, "none, mlpmixer, hypermixer or attention");
    sy->add_option("--examples", sa.examples, "Training sequences")->check(CLI::PositiveNumber);
    sy->add_option("--seed", sa.seed);
    sy->add_option("--out", sa.out, "Output directory");
    sy->add_option("--d", sa.d)->check(CLI::PositiveNumber);
    sy->add_option("--dprime", sa.d_prime)->check(CLI::PositiveNumber);
    sy->add_option("--steps", sa.steps, "Optimizer steps; 0 trains 20 full epochs");
    sy->add_option("--rounds", sa.rounds, "Validation rounds within the step budget");
    sy->add_option("--validation", sa.validation)->check(CLI::PositiveNumber);
    sy->add_option("--test", sa.test)->check(CLI::PositiveNumber);
    sy->add_option("--output-norm", sa.output_norm, "LayerNorm on the HyperMixer mixing output");
    sy->add_option("--precision", sa.precision)->check(CLI::IsMember({"float32", "float64"}));

    detail::BenchArgs ba;
    auto* be = app.add_subcommand("bench", "Time the token-mixing block against sequence length");
    be->add_option("--variants", ba.variants)->delimiter(',');
    be->add_option("--n-grid", ba.n_grid)->delimiter(',');
    be->add_option("--d", ba.d)->check(CLI::PositiveNumber);
    be->add_option("--dprime", ba.d_prime)->check(CLI::PositiveNumber);
    be->add_option("--heads", ba.heads)->check(CLI::PositiveNumber);
    be->add_option("--reps", ba.reps);
    be->add_option("--n-max", ba.n_max, "Weight capacity of mlpmixer/gmlp");
    be->add_option("--precision", ba.precision)->check(CLI::IsMember({"float32", "float64"}));
    be->add_option("--out", ba.out, "Output directory");

    detail::FlopsArgs fa;
    auto* fl = app.add_subcommand("flops", "Closed-form FLOP counts of HyperMixer and attention");
    fl->add_option("--n-grid", fa.n_grid)->delimiter(',');
    fl->add_option("--d", fa.d)->check(CLI::PositiveNumber);
    fl->add_option("--dprime", fa.d_prime)->check(CLI::PositiveNumber);
    fl->add_option("--heads", fa.heads)->check(CLI::PositiveNumber);
    fl->add_option("--out", fa.out, "CSV path");

    std::string text_config;
    auto* tt = app.add_subcommand("train-text", "Train a text classifier from a run config");
    tt->add_option("--config", text_config, "Run config JSON (task: text)")->required();

    detail::EvpArgs ea;
    auto* ev = app.add_subcommand("evp", "Expected validation performance from a trials file");
    ev->add_option("--trials", ea.trials, "JSONL trial records")->required();
    ev->add_option("--k-grid", ea.k_grid)->delimiter(',');
    ev->add_option("--out", ea.out, "CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage;
    }

#ifdef HMX_FAULT_INJECTION
    debug::corrupt_gelu_backward() = corrupt;
#endif
    try {
        if (gc->parsed()) return detail::cmd_gradcheck(ga, out);
        if (sy->parsed()) return detail::cmd_synth(sa, out);
        if (be->parsed()) return detail::cmd_bench(ba, out);
        if (fl->parsed()) return detail::cmd_flops(fa, out);
        if (tt->parsed()) return detail::cmd_train_text(text_config, out);
        if (ev->parsed()) return detail::cmd_evp(ea, out);
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return io;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return io;
    } catch (const CapacityError& e) {
        err << "capacity error: " << e.what() << '\n';
        return usage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return usage;
    } catch (const ParameterError& e) {
        err << "error: " << e.what() << '\n';
        return usage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return usage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return usage;
    } catch (const TrainingError& e) {
        err << "training diverged at epoch " << e.epoch() << ": " << e.what() << '\n';
        return failed;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return failed;
    }
    return usage;
}

}  // namespace hmx::cli
