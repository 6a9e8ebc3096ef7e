#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"

#include "hypermixer/model.hpp"

namespace hmx {

using json = nlohmann::json;

namespace detail {

/// Throws ConfigError naming the first key of `j` outside `allowed`.
inline void reject_unknown_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed)
{
    if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("unknown key '" + it.key() + "' in " + std::string(where));
}

template <class V>
void read_opt(const json& j, const char* key, V& out, std::string_view where)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("key '" + std::string(key) + "' in " + std::string(where) + " has the wrong type");
    }
}

}  // namespace detail

inline json mixing_to_json(const TokenMixingSpec& s)
{
    json j{{"kind", kind_name(s.kind)}};
    if (s.n_max) j["n_max"] = *s.n_max;
    if (s.kind == MixingKind::attention) j["heads"] = s.heads;
    if (is_hypermixer(s.kind)) {
        j["reinject_positions"] = s.reinject_positions;
        j["output_norm"] = s.output_norm;
    }
    return j;
}

inline TokenMixingSpec mixing_from_json(const json& j)
{
    constexpr std::string_view where = "token_mixing";
    detail::reject_unknown_keys(j, where, {"kind", "n_max", "heads", "reinject_positions", "output_norm"});
    TokenMixingSpec s;
    std::string kind = "hypermixer_tied";
    detail::read_opt(j, "kind", kind, where);
    try {
        s.kind = parse_mixing_kind(kind);
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    if (j.contains("n_max")) {
        std::size_t n = 0;
        detail::read_opt(j, "n_max", n, where);
        s.n_max = n;
    }
    detail::read_opt(j, "heads", s.heads, where);
    detail::read_opt(j, "reinject_positions", s.reinject_positions, where);
    detail::read_opt(j, "output_norm", s.output_norm, where);
    return s;
}

inline json model_config_to_json(const ModelConfig& c)
{
    return json{
        {"num_layers", c.num_layers},
        {"d", c.d},
        {"d_prime", c.d_prime},
        {"token_mixing", mixing_to_json(c.token_mixing)},
        {"vocab_size", c.vocab_size},
        {"dropout_p", c.dropout_p},
        {"head", c.head == HeadKind::classifier ? "classifier" : "regressor"},
        {"num_classes", c.num_classes},
        {"pooling", c.pooling == Pooling::mean_over_valid ? "mean_over_valid" : "none"},
        {"input", c.input == InputKind::tokens ? "tokens" : "signal"},
        {"signal_window", c.signal_window},
        {"feature_mixing", c.feature_mixing},
        {"input_positions", c.input_positions},
    };
}

inline ModelConfig model_config_from_json(const json& j)
{
    constexpr std::string_view where = "model";
    detail::reject_unknown_keys(j, where,
                                {"num_layers", "d", "d_prime", "token_mixing", "vocab_size", "dropout_p", "head",
                                 "num_classes", "pooling", "input", "signal_window", "feature_mixing",
                                 "input_positions"});
    ModelConfig c;
    detail::read_opt(j, "num_layers", c.num_layers, where);
    detail::read_opt(j, "d", c.d, where);
    detail::read_opt(j, "d_prime", c.d_prime, where);
    if (j.contains("token_mixing")) c.token_mixing = mixing_from_json(j.at("token_mixing"));
    detail::read_opt(j, "vocab_size", c.vocab_size, where);
    detail::read_opt(j, "dropout_p", c.dropout_p, where);
    detail::read_opt(j, "num_classes", c.num_classes, where);
    detail::read_opt(j, "signal_window", c.signal_window, where);
    detail::read_opt(j, "feature_mixing", c.feature_mixing, where);
    detail::read_opt(j, "input_positions", c.input_positions, where);
    std::string head = "classifier", pooling, input = "tokens";
    detail::read_opt(j, "head", head, where);
    if (head != "classifier" && head != "regressor") throw ConfigError("head must be classifier or regressor");
    c.head = head == "classifier" ? HeadKind::classifier : HeadKind::regressor;
    pooling = c.head == HeadKind::classifier ? "mean_over_valid" : "none";
    detail::read_opt(j, "pooling", pooling, where);
    if (pooling != "mean_over_valid" && pooling != "none") throw ConfigError("pooling must be mean_over_valid or none");
    c.pooling = pooling == "none" ? Pooling::none : Pooling::mean_over_valid;
    detail::read_opt(j, "input", input, where);
    if (input != "tokens" && input != "signal") throw ConfigError("input must be tokens or signal");
    c.input = input == "tokens" ? InputKind::tokens : InputKind::signal;
    return c;
}

}  // namespace hmx
