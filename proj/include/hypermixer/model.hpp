#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hypermixer/batch.hpp"
#include "hypermixer/mixing.hpp"

namespace hmx {

enum class HeadKind { classifier, regressor };
enum class Pooling { mean_over_valid, none };
enum class InputKind { tokens, signal };

struct ModelConfig {
    std::size_t num_layers = 8;
    std::size_t d = 256;
    std::size_t d_prime = 512;
    TokenMixingSpec token_mixing;  // widths follow d and d_prime
    std::size_t vocab_size = 0;
    double dropout_p = 0.1;
    HeadKind head = HeadKind::classifier;
    std::size_t num_classes = 2;
    Pooling pooling = Pooling::mean_over_valid;
    InputKind input = InputKind::tokens;
    std::size_t signal_window = 1;  // cells seen by the scalar-signal lift
    bool feature_mixing = true;     // false only for the token-mixing-only ablation
    bool input_positions = true;    // sinusoidal positions added to the embeddings

    TokenMixingSpec mixing_spec() const
    {
        TokenMixingSpec s = token_mixing;
        s.d = d;
        s.d_prime = d_prime;
        return s;
    }

    void validate() const
    {
        if (num_layers == 0) throw ParameterError("num_layers must be at least 1");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ParameterError("dropout_p must lie in [0, 1)");
        mixing_spec().validate();
        if (head == HeadKind::classifier) {
            if (num_classes < 2) throw ParameterError("classifier needs at least 2 classes");
            if (pooling != Pooling::mean_over_valid) throw ParameterError("classifier head needs pooling");
        } else if (pooling != Pooling::none) {
            throw ParameterError("per-token regressor takes no pooling");
        }
        if (input == InputKind::tokens && vocab_size == 0) throw ParameterError("vocab_size must be positive");
        if (input == InputKind::signal && (signal_window == 0 || signal_window % 2 == 0))
            throw ParameterError("signal_window must be odd");
    }
};

template <class T>
struct LayerState {
    Norm<T> mix_norm;
    MixingLayerState<T> mixing;
    std::optional<Norm<T>> feat_norm;
    std::optional<TwoLayerMlp<T>> feature;
};

template <class T>
struct ModelState {
    Tensor<T> embedding;  // tokens: [vocab, d]; signal: [window, d]
    Tensor<T> lift_bias;  // signal only: [d]
    std::vector<LayerState<T>> layers;
    Linear<T> head;

    /// Every learnable tensor in declaration order.
    std::vector<Tensor<T>> parameters() const
    {
        std::vector<Tensor<T>> out{embedding};
        if (lift_bias.defined()) out.push_back(lift_bias);
        for (const auto& l : layers) {
            append(out, l.mix_norm);
            for (auto& t : l.mixing.parameters()) out.push_back(t);
            if (l.feat_norm) append(out, *l.feat_norm);
            if (l.feature) append(out, *l.feature);
        }
        append(out, head);
        return out;
    }
};

/// Analytic parameter count of a configuration.
inline std::size_t count_params(const ModelConfig& c)
{
    c.validate();
    const std::size_t d = c.d, dp = c.d_prime;
    std::size_t n = c.input == InputKind::tokens ? c.vocab_size * d : c.signal_window * d + d;
    std::size_t layer = 2 * d + count_mixing_params(c.mixing_spec());
    if (c.feature_mixing) layer += 2 * d + (d * dp + dp) + (dp * d + d);
    n += c.num_layers * layer;
    n += c.head == HeadKind::classifier ? d * c.num_classes + c.num_classes : d + 1;
    return n;
}

/// Number of scalars actually held by a state.
template <class T>
std::size_t enumerate_params(const ModelState<T>& s)
{
    std::size_t n = 0;
    for (const auto& t : s.parameters()) n += t.numel();
    return n;
}

/// Identity token mixing: each layer is a per-token MLP, followed by mean pooling.
inline ModelConfig feature_only_model(ModelConfig c)
{
    c.token_mixing = TokenMixingSpec{};
    c.token_mixing.kind = MixingKind::identity;
    if (c.head == HeadKind::classifier) c.pooling = Pooling::mean_over_valid;
    return c;
}

/// A single hypernetwork token-mixing layer without feature-mixing MLPs.
inline ModelConfig token_only_model(ModelConfig c)
{
    const bool reinject = c.token_mixing.reinject_positions;
    c.token_mixing = TokenMixingSpec{};
    c.token_mixing.kind = MixingKind::hypermixer_tied;
    c.token_mixing.reinject_positions = reinject;
    c.num_layers = 1;
    c.feature_mixing = false;
    return c;
}

template <class T>
ModelState<T> init_model_state(const ModelConfig& c, std::uint64_t seed)
{
    c.validate();
    Rng rng(seed);
    ModelState<T> s;
    if (c.input == InputKind::tokens) {
        s.embedding = uniform_tensor<T>({c.vocab_size, c.d}, 1.0, rng);
    } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(c.signal_window));
        s.embedding = uniform_tensor<T>({c.signal_window, c.d}, bound, rng);
        s.lift_bias = uniform_tensor<T>({c.d}, bound, rng);
    }
    const auto spec = c.mixing_spec();
    for (std::size_t i = 0; i < c.num_layers; ++i) {
        LayerState<T> l{make_norm<T>(c.d), make_mixing_state<T>(spec, rng), std::nullopt, std::nullopt};
        if (c.feature_mixing) {
            l.feat_norm = make_norm<T>(c.d);
            l.feature = make_mlp<T>(c.d, c.d_prime, c.d, rng);
        }
        s.layers.push_back(std::move(l));
    }
    s.head = make_linear<T>(c.d, c.head == HeadKind::classifier ? c.num_classes : 1, rng);
    return s;
}

/// Optional side outputs of a forward pass used by the analysis tools.
template <class T>
struct ForwardTrace {
    std::size_t layer = std::numeric_limits<std::size_t>::max();  // default: last layer
    Tensor<T> mix_input;  // normalized input of that layer's token mixing
    AttentionProbe probe;  // filled for attention mixing
};

template <class T>
class Model {
public:
    Model(ModelConfig config, std::uint64_t seed)
        : config_(std::move(config)), state_(init_model_state<T>(config_, seed))
    {
    }

    Model(ModelConfig config, ModelState<T> state) : config_(std::move(config)), state_(std::move(state))
    {
        config_.validate();
        if (enumerate_params(state_) != count_params(config_))
            throw ShapeError("model state does not match its configuration");
    }

    const ModelConfig& config() const { return config_; }
    ModelState<T>& state() { return state_; }
    const ModelState<T>& state() const { return state_; }
    std::vector<Tensor<T>> parameters() const { return state_.parameters(); }

    /// Classifier: logits [B, C]. Regressor: per-token outputs [B, N].
    /// `rng` is required when training with dropout.
    Tensor<T> forward(Tape<T>& tape, const Batch& batch, bool training = false, Rng* rng = nullptr,
                      ForwardTrace<T>* trace = nullptr) const
    {
        const std::size_t B = batch.size, N = batch.length, d = config_.d;
        if (batch.mask.batch != B || batch.mask.length != N) throw ShapeError("batch mask does not match batch");
        Tensor<T> x = embed(tape, batch);
        if (config_.input_positions) x = add(tape, x, batch_positions<T>(B, N, d));

        const std::size_t capture = trace && trace->layer < config_.num_layers ? trace->layer : config_.num_layers - 1;
        for (std::size_t li = 0; li < state_.layers.size(); ++li) {
            const auto& l = state_.layers[li];
            if (training && config_.dropout_p > 0) {
                if (!rng) throw UsageError("training forward with dropout needs an rng");
                x = dropout(tape, x, config_.dropout_p, true, *rng);
            }
            auto y = layer_norm(tape, x, l.mix_norm.gain, l.mix_norm.bias);
            AttentionProbe* probe = nullptr;
            if (trace && li == capture) {
                trace->mix_input = y;
                probe = &trace->probe;
            }
            x = add(tape, x, token_mix(tape, l.mixing, y, batch.mask, probe));
            if (l.feature) {
                auto z = layer_norm(tape, x, l.feat_norm->gain, l.feat_norm->bias);
                x = add(tape, x, feature_mix(tape, *l.feature, z));
            }
        }

        if (config_.head == HeadKind::classifier) return linear(tape, mean_pool(tape, x, batch.mask), state_.head);
        return reshape(tape, linear(tape, x, state_.head), Shape{B, N});
    }

private:
    Tensor<T> embed(Tape<T>& tape, const Batch& batch) const
    {
        const std::size_t B = batch.size, N = batch.length;
        if (config_.input == InputKind::tokens) {
            if (batch.tokens.size() != B * N) throw ShapeError("token matrix does not match batch shape");
            return embedding(tape, state_.embedding, batch.tokens, B, N);
        }
        if (batch.signal.size() != B * N) throw ShapeError("signal does not match batch shape");
        // each cell sees the valid cells within +-r of itself
        const std::size_t w = config_.signal_window, r = w / 2;
        Tensor<T> window(Shape{B, N, w});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < N; ++j)
                for (std::size_t k = 0; k < w; ++k) {
                    const auto src = static_cast<std::ptrdiff_t>(j + k) - static_cast<std::ptrdiff_t>(r);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(N)) continue;
                    const auto s = static_cast<std::size_t>(src);
                    if (batch.mask(b, s)) window(b, j, k) = static_cast<T>(batch.signal[b * N + s]);
                }
        return add_bias(tape, matmul(tape, window, state_.embedding), state_.lift_bias);
    }

    ModelConfig config_;
    ModelState<T> state_;
};

}  // namespace hmx
