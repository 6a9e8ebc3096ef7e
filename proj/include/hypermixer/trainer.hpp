#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hypermixer/config_json.hpp"
#include "hypermixer/model.hpp"

namespace hmx {

struct TrainConfig {
    double learning_rate = 1e-3;
    std::optional<double> dropout_p;  // overrides the model's dropout when set
    std::size_t batch_size = 32;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t max_steps = 0;  // 0: no cap on optimizer steps

    void validate() const
    {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw ParameterError("learning_rate must be finite and non-negative");
        if (batch_size == 0) throw ParameterError("batch_size must be positive");
        if (epochs == 0) throw ParameterError("epochs must be positive");
        if (dropout_p && !(*dropout_p >= 0.0 && *dropout_p < 1.0)) throw ParameterError("dropout_p must lie in [0, 1)");
    }
};

inline json train_config_to_json(const TrainConfig& c)
{
    json j{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
           {"seed", c.seed},                   {"beta1", c.beta1},           {"beta2", c.beta2},
           {"eps", c.eps},                     {"max_steps", c.max_steps}};
    if (c.dropout_p) j["dropout_p"] = *c.dropout_p;
    return j;
}

inline TrainConfig train_config_from_json(const json& j)
{
    constexpr std::string_view where = "train";
    detail::reject_unknown_keys(j, where,
                                {"learning_rate", "dropout_p", "batch_size", "epochs", "seed", "beta1", "beta2", "eps",
                                 "max_steps"});
    TrainConfig c;
    detail::read_opt(j, "learning_rate", c.learning_rate, where);
    if (j.contains("dropout_p")) {
        double p = 0;
        detail::read_opt(j, "dropout_p", p, where);
        c.dropout_p = p;
    }
    detail::read_opt(j, "batch_size", c.batch_size, where);
    detail::read_opt(j, "epochs", c.epochs, where);
    detail::read_opt(j, "seed", c.seed, where);
    detail::read_opt(j, "beta1", c.beta1, where);
    detail::read_opt(j, "beta2", c.beta2, where);
    detail::read_opt(j, "eps", c.eps, where);
    detail::read_opt(j, "max_steps", c.max_steps, where);
    return c;
}

template <class T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, double beta1, double beta2, double eps)
        : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps)
    {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step(double lr)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto w = p.data();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = b1_ * m[i] + (1 - b1_) * gi;
                v[i] = b2_ * v[i] + (1 - b2_) * gi * gi;
                w[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<double>> m_, v_;
    double b1_, b2_, eps_;
    std::uint64_t t_ = 0;
};

/// Source of training batches (reshuffled per epoch) and fixed validation batches.
struct TrainData {
    std::function<std::vector<Batch>(std::size_t epoch, std::uint64_t seed)> train_epoch;
    std::vector<Batch> validation;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0;
    double validation = 0;  // accuracy for classifiers, MSE for regressors
};

template <class T>
struct TrainResult {
    std::vector<EpochLog> history;
    std::size_t best_epoch = 0;
    double best_score = 0;
    double initial_loss = 0;  // loss of the first batch before any update
    std::size_t steps = 0;
};

inline bool higher_is_better(const ModelConfig& c) { return c.head == HeadKind::classifier; }

/// Cross-entropy for classifiers, MSE over valid positions for regressors.
template <class T>
Tensor<T> model_loss(Tape<T>& tape, const ModelConfig& c, const Tensor<T>& out, const Batch& batch)
{
    if (c.head == HeadKind::classifier) return cross_entropy(tape, out, batch.labels);
    const std::size_t n = batch.size * batch.length;
    if (batch.targets.size() != n) throw DataError("regression targets do not match batch shape");
    Tensor<T> m(Shape{batch.size, batch.length});
    std::vector<T> target(n);
    std::size_t valid = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool v = batch.mask.valid[i] != 0;
        m.ptr()[i] = v ? T(1) : T(0);
        target[i] = v ? static_cast<T>(batch.targets[i]) : T(0);
        valid += v;
    }
    if (valid == 0) throw DataError("regression batch has no valid positions");
    auto l = mse_loss(tape, mul(tape, out, m), std::span<const T>(target));
    return valid == n ? l : scale(tape, l, static_cast<T>(static_cast<double>(n) / static_cast<double>(valid)));
}

/// Accuracy (classifier) or MSE over valid positions (regressor), evaluation mode.
template <class T>
double evaluate(const Model<T>& model, const std::vector<Batch>& batches)
{
    Tape<T> tape;
    tape.set_recording(false);
    const bool cls = model.config().head == HeadKind::classifier;
    double num = 0, den = 0;
    for (const auto& b : batches) {
        auto out = model.forward(tape, b);
        if (cls) {
            const std::size_t C = out.dim(1);
            for (std::size_t i = 0; i < b.size; ++i) {
                const T* row = out.ptr() + i * C;
                const auto pred = static_cast<std::int32_t>(std::max_element(row, row + C) - row);
                num += pred == b.labels[i];
                den += 1;
            }
        } else {
            for (std::size_t i = 0; i < b.size * b.length; ++i) {
                if (!b.mask.valid[i]) continue;
                const double e = static_cast<double>(out.ptr()[i]) - b.targets[i];
                num += e * e;
                den += 1;
            }
        }
    }
    if (den == 0) throw DataError("evaluation set is empty");
    return num / den;
}

/// Adam training with best-epoch selection. On return the model holds the
/// parameters of the best validation epoch.
template <class T>
TrainResult<T> train(Model<T>& model, const TrainConfig& tc, const TrainData& data,
                     const std::function<void(const EpochLog&)>& on_epoch = {})
{
    tc.validate();
    ModelConfig mc = model.config();
    if (tc.dropout_p) mc.dropout_p = *tc.dropout_p;
    Model<T> runner(mc, model.state());  // shares parameter storage with `model`
    const bool maximize = higher_is_better(mc);
    auto params = model.parameters();
    Adam<T> opt(params, tc.beta1, tc.beta2, tc.eps);
    Rng rng(tc.seed ^ 0xD1B54A32D192ED03ull);

    TrainResult<T> res;
    std::vector<std::vector<T>> best;
    bool have_best = false;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        auto batches = data.train_epoch(epoch, tc.seed + epoch);
        double loss_sum = 0;
        std::size_t count = 0;
        for (const auto& b : batches) {
            if (tc.max_steps && res.steps >= tc.max_steps) break;
            Tape<T> tape;
            auto loss = model_loss(tape, mc, runner.forward(tape, b, true, &rng), b);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) throw TrainingError("loss became non-finite in epoch " + std::to_string(epoch), epoch);
            if (res.steps == 0) res.initial_loss = lv;
            for (auto& p : params) p.zero_grad();
            tape.backward(loss);
            opt.step(tc.learning_rate);
            loss_sum += lv;
            ++count;
            ++res.steps;
        }
        EpochLog log{epoch, count ? loss_sum / static_cast<double>(count) : 0.0, 0.0};
        // without a validation set the epoch is scored by its training loss
        const bool has_val = !data.validation.empty();
        log.validation = has_val ? evaluate(model, data.validation) : log.train_loss;
        res.history.push_back(log);
        if (on_epoch) on_epoch(log);
        const bool up = has_val && maximize;
        const bool better = !have_best || (up ? log.validation > res.best_score : log.validation < res.best_score);
        if (better) {
            have_best = true;
            res.best_score = log.validation;
            res.best_epoch = epoch;
            best.clear();
            for (const auto& p : params) best.emplace_back(p.data().begin(), p.data().end());
        }
        if (tc.max_steps && res.steps >= tc.max_steps) break;
    }
    for (std::size_t k = 0; k < params.size(); ++k) std::copy(best[k].begin(), best[k].end(), params[k].data().begin());
    return res;
}

// ---------------------------------------------------------------------------
// Hyperparameter search
// ---------------------------------------------------------------------------

struct TrialRecord {
    double learning_rate = 0;
    double dropout_p = 0;
    double score = 0;
    std::uint64_t seed = 0;
    double wall_seconds = 0;
    double initial_loss = 0;
    json config;  // model + train configuration of the trial
};

inline const std::vector<double>& default_lr_grid()
{
    static const std::vector<double> grid{1e-3, 5e-4, 2e-4, 1e-4, 5e-5, 2e-5, 1e-5};
    return grid;
}

template <class T>
TrialRecord run_trial(const ModelConfig& mc, const TrainConfig& tc, const TrainData& data)
{
    const auto start = std::chrono::steady_clock::now();
    Model<T> model(mc, tc.seed);  // fresh initialization for every trial
    auto res = train(model, tc, data);
    TrialRecord r;
    r.learning_rate = tc.learning_rate;
    r.dropout_p = tc.dropout_p.value_or(mc.dropout_p);
    r.score = res.best_score;
    r.seed = tc.seed;
    r.initial_loss = res.initial_loss;
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.config = json{{"model", model_config_to_json(mc)}, {"train", train_config_to_json(tc)}};
    return r;
}

inline std::size_t best_index(const std::vector<TrialRecord>& records, bool maximize)
{
    if (records.empty()) throw ParameterError("no trial records");
    std::size_t best = 0;
    for (std::size_t i = 1; i < records.size(); ++i)
        if (maximize ? records[i].score > records[best].score : records[i].score < records[best].score) best = i;
    return best;
}

struct SearchResult {
    std::vector<TrialRecord> records;
    std::size_t best = 0;
};

/// One trial per learning rate, all with the same seed.
template <class T>
SearchResult grid_search(const ModelConfig& mc, const TrainConfig& base, const std::vector<double>& grid,
                         const TrainData& data)
{
    if (grid.empty()) throw ParameterError("learning-rate grid is empty");
    SearchResult out;
    for (double lr : grid) {
        TrainConfig tc = base;
        tc.learning_rate = lr;
        out.records.push_back(run_trial<T>(mc, tc, data));
    }
    out.best = best_index(out.records, higher_is_better(mc));
    return out;
}

enum class LogBase { natural, ten };

struct SampledHyperparameters {
    double learning_rate;
    double dropout_p;
};

/// log(lr) ~ U(-8, -1), dropout ~ U(0, 0.5).
inline std::vector<SampledHyperparameters> sample_random_search(std::size_t num_trials, std::uint64_t seed,
                                                                LogBase base = LogBase::natural)
{
    if (num_trials == 0) throw ParameterError("num_trials must be at least 1");
    Rng rng(seed);
    std::uniform_real_distribution<double> log_lr(-8.0, -1.0), drop(0.0, 0.5);
    std::vector<SampledHyperparameters> out;
    for (std::size_t i = 0; i < num_trials; ++i) {
        const double l = log_lr(rng);
        const double lr = base == LogBase::natural ? std::exp(l) : std::pow(10.0, l);
        out.push_back({lr, drop(rng)});
    }
    return out;
}

template <class T>
SearchResult random_search(const ModelConfig& mc, const TrainConfig& base, std::size_t num_trials, std::uint64_t seed,
                           const TrainData& data, LogBase log_base = LogBase::natural)
{
    SearchResult out;
    for (const auto& s : sample_random_search(num_trials, seed, log_base)) {
        TrainConfig tc = base;
        tc.learning_rate = s.learning_rate;
        tc.dropout_p = s.dropout_p;
        out.records.push_back(run_trial<T>(mc, tc, data));
    }
    out.best = best_index(out.records, higher_is_better(mc));
    return out;
}

/// Expected maximum of k draws with replacement from the observed scores:
/// sum_i s_(i) [(i/n)^k - ((i-1)/n)^k] over the ascending order statistics.
inline double expected_validation_performance(std::vector<double> scores, std::size_t k)
{
    if (scores.empty()) throw ParameterError("expected validation performance needs at least one score");
    if (k == 0) throw ParameterError("k must be at least 1");
    std::sort(scores.begin(), scores.end());
    const double n = static_cast<double>(scores.size()), kk = static_cast<double>(k);
    double e = 0;
    for (std::size_t i = 1; i <= scores.size(); ++i)
        e += scores[i - 1] * (std::pow(static_cast<double>(i) / n, kk) - std::pow(static_cast<double>(i - 1) / n, kk));
    return e;
}

inline double relative_improvement(double score_a, double score_b)
{
    if (!(score_b > 0)) throw ParameterError("relative improvement needs a positive base score");
    return (score_a - score_b) / score_b;
}

inline json trial_to_json(const TrialRecord& r)
{
    return json{{"config", r.config},         {"score", r.score},
                {"seed", r.seed},             {"wall_seconds", r.wall_seconds},
                {"learning_rate", r.learning_rate}, {"dropout_p", r.dropout_p},
                {"initial_loss", r.initial_loss}};
}

inline void write_trials_jsonl(const std::vector<TrialRecord>& records, const std::string& path, bool append = false)
{
    std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    for (const auto& r : records) f << trial_to_json(r).dump() << '\n';
    if (!f) throw IoError("failed writing " + path);
}

inline std::vector<TrialRecord> read_trials_jsonl(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::vector<TrialRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = json::parse(line);
            TrialRecord r;
            r.score = j.at("score").get<double>();
            r.seed = j.value("seed", std::uint64_t{0});
            r.wall_seconds = j.value("wall_seconds", 0.0);
            r.learning_rate = j.value("learning_rate", 0.0);
            r.dropout_p = j.value("dropout_p", 0.0);
            r.initial_loss = j.value("initial_loss", 0.0);
            r.config = j.value("config", json::object());
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad trial record (" + e.what() + ")");
        }
    }
    return out;
}

}  // namespace hmx
