#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "hypermixer/synthetic.hpp"
#include "hypermixer/text.hpp"
#include "hypermixer/trainer.hpp"

namespace hmx {

enum class RunTask { text, synthetic };
enum class SearchKind { single, grid, random };
enum class Precision { float32, float64 };

struct TextDataConfig {
    std::string train;                 // TSV path
    std::optional<std::string> validation;
    TsvSchema schema = TsvSchema::single;
    bool has_header = true;
    std::vector<std::string> labels{"0", "1"};
    std::size_t min_frequency = 1;
    std::optional<std::size_t> n_cap;  // unset: the default cap of the mixing kind
};

struct SearchConfig {
    SearchKind kind = SearchKind::single;
    std::vector<double> grid = default_lr_grid();
    std::size_t num_trials = 20;
    std::uint64_t seed = 0;
    LogBase log_base = LogBase::natural;
};

/// Everything one run needs. Relative paths are resolved against the
/// directory of the config file when loaded from disk.
struct RunConfig {
    RunTask task = RunTask::text;
    std::uint64_t seed = 0;
    std::string output_dir = "run";
    Precision precision = Precision::float32;
    ModelConfig model;
    TrainConfig train;
    TextDataConfig data;
    SearchConfig search;
    SyntheticConfig synthetic;
};

namespace detail {

template <class E>
E parse_enum(const json& j, const char* key, std::string_view where,
             std::initializer_list<std::pair<std::string_view, E>> options, E fallback)
{
    if (!j.contains(key)) return fallback;
    std::string s;
    read_opt(j, key, s, where);
    for (const auto& [name, v] : options)
        if (name == s) return v;
    throw ConfigError("key '" + std::string(key) + "' in " + std::string(where) + " has unknown value '" + s + "'");
}

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base)
{
    if (p.empty() || std::filesystem::path(p).is_absolute() || base.empty()) return p;
    return (base / p).lexically_normal().string();
}

inline SyntheticConfig synthetic_from_json(const json& j)
{
    constexpr std::string_view where = "synthetic";
    reject_unknown_keys(j, where,
                        {"variant", "examples", "validation", "test", "num_layers", "d", "d_prime", "heads",
                         "signal_window", "learning_rate", "batch_size", "epochs", "steps", "rounds", "output_norm",
                         "length"});
    SyntheticConfig c;
    std::string variant = variant_name(c.variant);
    read_opt(j, "variant", variant, where);
    try {
        c.variant = parse_synthetic_variant(variant);
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    read_opt(j, "examples", c.num_train, where);
    read_opt(j, "validation", c.num_validation, where);
    read_opt(j, "test", c.num_test, where);
    read_opt(j, "num_layers", c.num_layers, where);
    read_opt(j, "d", c.d, where);
    read_opt(j, "d_prime", c.d_prime, where);
    read_opt(j, "heads", c.heads, where);
    read_opt(j, "signal_window", c.signal_window, where);
    read_opt(j, "learning_rate", c.learning_rate, where);
    read_opt(j, "batch_size", c.batch_size, where);
    read_opt(j, "epochs", c.epochs, where);
    read_opt(j, "steps", c.steps, where);
    read_opt(j, "rounds", c.rounds, where);
    read_opt(j, "output_norm", c.hypermixer_output_norm, where);
    read_opt(j, "length", c.generator.length, where);
    return c;
}

inline json synthetic_to_json(const SyntheticConfig& c)
{
    return json{{"variant", variant_name(c.variant)},
                {"examples", c.num_train},
                {"validation", c.num_validation},
                {"test", c.num_test},
                {"num_layers", c.num_layers},
                {"d", c.d},
                {"d_prime", c.d_prime},
                {"heads", c.heads},
                {"signal_window", c.signal_window},
                {"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"epochs", c.epochs},
                {"steps", c.steps},
                {"rounds", c.rounds},
                {"output_norm", c.hypermixer_output_norm},
                {"length", c.generator.length}};
}

}  // namespace detail

/// Parses a run document. `base` is the directory relative paths refer to.
inline RunConfig run_config_from_json(const json& j, const std::filesystem::path& base = {})
{
    constexpr std::string_view where = "run config";
    detail::reject_unknown_keys(j, where,
                                {"task", "seed", "output_dir", "precision", "model", "train", "data", "search",
                                 "synthetic"});
    RunConfig c;
    c.task = detail::parse_enum<RunTask>(j, "task", where, {{"text", RunTask::text}, {"synthetic", RunTask::synthetic}},
                                         RunTask::text);
    detail::read_opt(j, "seed", c.seed, where);
    detail::read_opt(j, "output_dir", c.output_dir, where);
    c.output_dir = detail::resolve_path(c.output_dir, base);
    c.precision = detail::parse_enum<Precision>(
        j, "precision", where, {{"float32", Precision::float32}, {"float64", Precision::float64}}, Precision::float32);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (!j.contains("train") || !j.at("train").contains("seed")) c.train.seed = c.seed;

    if (j.contains("data")) {
        const json& d = j.at("data");
        constexpr std::string_view dw = "data";
        detail::reject_unknown_keys(d, dw,
                                    {"train", "validation", "schema", "has_header", "labels", "min_frequency", "n_cap"});
        detail::read_opt(d, "train", c.data.train, dw);
        c.data.train = detail::resolve_path(c.data.train, base);
        if (d.contains("validation")) {
            std::string v;
            detail::read_opt(d, "validation", v, dw);
            c.data.validation = detail::resolve_path(v, base);
        }
        c.data.schema = detail::parse_enum<TsvSchema>(d, "schema", dw,
                                                      {{"single", TsvSchema::single}, {"pair", TsvSchema::pair}},
                                                      TsvSchema::single);
        detail::read_opt(d, "has_header", c.data.has_header, dw);
        detail::read_opt(d, "labels", c.data.labels, dw);
        detail::read_opt(d, "min_frequency", c.data.min_frequency, dw);
        if (d.contains("n_cap")) {
            std::size_t n = 0;
            detail::read_opt(d, "n_cap", n, dw);
            c.data.n_cap = n;
        }
    }
    c.search.seed = c.seed;
    if (j.contains("search")) {
        const json& s = j.at("search");
        constexpr std::string_view sw = "search";
        detail::reject_unknown_keys(s, sw, {"kind", "grid", "num_trials", "seed", "log_base"});
        c.search.kind = detail::parse_enum<SearchKind>(
            s, "kind", sw, {{"single", SearchKind::single}, {"grid", SearchKind::grid}, {"random", SearchKind::random}},
            SearchKind::single);
        detail::read_opt(s, "grid", c.search.grid, sw);
        detail::read_opt(s, "num_trials", c.search.num_trials, sw);
        detail::read_opt(s, "seed", c.search.seed, sw);
        c.search.log_base = detail::parse_enum<LogBase>(s, "log_base", sw,
                                                        {{"natural", LogBase::natural}, {"ten", LogBase::ten}},
                                                        LogBase::natural);
    }
    if (j.contains("synthetic")) c.synthetic = detail::synthetic_from_json(j.at("synthetic"));
    c.synthetic.seed = c.seed;

    if (c.task == RunTask::text && c.data.train.empty()) throw ConfigError("text runs need data.train");
    if (c.task == RunTask::text && c.model.input != InputKind::tokens) throw ConfigError("text runs need token input");
    return c;
}

inline json run_config_to_json(const RunConfig& c)
{
    json j{{"task", c.task == RunTask::text ? "text" : "synthetic"},
           {"seed", c.seed},
           {"output_dir", c.output_dir},
           {"precision", c.precision == Precision::float32 ? "float32" : "float64"}};
    if (c.task == RunTask::synthetic) {
        j["synthetic"] = detail::synthetic_to_json(c.synthetic);
        return j;
    }
    j["model"] = model_config_to_json(c.model);
    j["train"] = train_config_to_json(c.train);
    json d{{"train", c.data.train},
           {"schema", c.data.schema == TsvSchema::single ? "single" : "pair"},
           {"has_header", c.data.has_header},
           {"labels", c.data.labels},
           {"min_frequency", c.data.min_frequency}};
    if (c.data.validation) d["validation"] = *c.data.validation;
    if (c.data.n_cap) d["n_cap"] = *c.data.n_cap;
    j["data"] = d;
    const char* kinds[] = {"single", "grid", "random"};
    j["search"] = json{{"kind", kinds[static_cast<int>(c.search.kind)]},
                       {"grid", c.search.grid},
                       {"num_trials", c.search.num_trials},
                       {"seed", c.search.seed},
                       {"log_base", c.search.log_base == LogBase::natural ? "natural" : "ten"}};
    return j;
}

inline RunConfig load_run_config(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return run_config_from_json(j, std::filesystem::path(path).parent_path());
}

}  // namespace hmx
