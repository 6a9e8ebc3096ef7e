#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "hypermixer/trainer.hpp"

using namespace hmx;

namespace {

ModelConfig small(MixingKind kind = MixingKind::hypermixer_tied)
{
    ModelConfig c;
    c.num_layers = 1;
    c.d = 8;
    c.d_prime = 12;
    c.vocab_size = 10;
    c.dropout_p = 0.0;
    c.token_mixing.kind = kind;
    if (is_fixed_length(kind)) c.token_mixing.n_max = 8;
    return c;
}

// Separable toy set: label 1 iff token 3 appears anywhere.
std::vector<Batch> toy_batches(std::size_t count, std::uint64_t seed, std::size_t batch_size = 10)
{
    Rng rng(seed);
    std::uniform_int_distribution<int> tok(4, 9), len(2, 6);
    std::vector<Batch> out;
    for (std::size_t start = 0; start < count; start += batch_size) {
        Batch b;
        b.size = std::min(batch_size, count - start);
        b.length = 6;
        b.tokens.assign(b.size * b.length, 0);
        std::vector<std::size_t> lens;
        for (std::size_t i = 0; i < b.size; ++i) {
            const auto n = static_cast<std::size_t>(len(rng));
            const int label = static_cast<int>((start + i) % 2);
            for (std::size_t j = 0; j < n; ++j) b.tokens[i * b.length + j] = tok(rng);
            if (label) b.tokens[i * b.length + static_cast<std::size_t>(rng() % n)] = 3;
            lens.push_back(n);
            b.labels.push_back(label);
        }
        b.mask = Mask::from_lengths(lens, b.length);
        out.push_back(std::move(b));
    }
    return out;
}

TrainData fixed_data(std::vector<Batch> train, std::vector<Batch> val = {})
{
    return TrainData{[train](std::size_t, std::uint64_t) { return train; }, std::move(val)};
}

// Independent estimate: mean of max over k draws with replacement.
double evp_monte_carlo(const std::vector<double>& s, std::size_t k, std::size_t trials)
{
    Rng rng(123);
    std::uniform_int_distribution<std::size_t> pick(0, s.size() - 1);
    double total = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        double m = -1e300;
        for (std::size_t i = 0; i < k; ++i) m = std::max(m, s[pick(rng)]);
        total += m;
    }
    return total / static_cast<double>(trials);
}

}  // namespace

TEST(TrainConfig, ValidationAndJson)
{
    TrainConfig c;
    c.learning_rate = -1;
    EXPECT_THROW(c.validate(), ParameterError);
    c = TrainConfig{};
    c.dropout_p = 1.0;
    EXPECT_THROW(c.validate(), ParameterError);
    c.dropout_p = 0.2;
    c.epochs = 3;
    auto back = train_config_from_json(train_config_to_json(c));
    EXPECT_EQ(back.epochs, 3u);
    EXPECT_DOUBLE_EQ(*back.dropout_p, 0.2);
    EXPECT_THROW(train_config_from_json(json{{"learning_rat", 1e-3}}), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged)
{
    Model<double> m(small(), 1);
    std::vector<std::vector<double>> before;
    for (auto& p : m.parameters()) before.emplace_back(p.data().begin(), p.data().end());
    TrainConfig tc;
    tc.learning_rate = 0;
    tc.epochs = 2;
    train(m, tc, fixed_data(toy_batches(20, 1)));
    auto params = m.parameters();
    for (std::size_t k = 0; k < params.size(); ++k)
        EXPECT_EQ(std::vector<double>(params[k].data().begin(), params[k].data().end()), before[k]);
}

TEST(Train, OverfitsSeparableSet)
{
    Model<double> m(small(), 3);
    auto data = toy_batches(50, 2);
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.epochs = 60;
    auto res = train(m, tc, fixed_data(data, data));
    EXPECT_GE(evaluate(m, data), 0.98);
    EXPECT_LT(res.history.back().train_loss, res.initial_loss);
    EXPECT_EQ(res.best_score, res.history[res.best_epoch].validation);
}

TEST(Train, DeterministicTrajectory)
{
    auto run = [] {
        ModelConfig c = small();
        c.dropout_p = 0.1;
        Model<double> m(c, 5);
        TrainConfig tc;
        tc.epochs = 3;
        tc.seed = 9;
        auto res = train(m, tc, fixed_data(toy_batches(30, 4)));
        std::vector<double> l;
        for (auto& e : res.history) l.push_back(e.train_loss);
        return l;
    };
    EXPECT_EQ(run(), run());
}

TEST(Train, MaxStepsAndDivergence)
{
    Model<double> m(small(), 1);
    TrainConfig tc;
    tc.epochs = 5;
    tc.max_steps = 3;
    auto res = train(m, tc, fixed_data(toy_batches(40, 1)));
    EXPECT_EQ(res.steps, 3u);

    Model<double> bad(small(), 1);
    bad.parameters()[0].data()[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(bad, tc, fixed_data(toy_batches(40, 1)));
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_EQ(e.epoch(), 0u);
    }
}

TEST(Train, RegressorLossIgnoresPadding)
{
    ModelConfig c = small();
    c.head = HeadKind::regressor;
    c.pooling = Pooling::none;
    Model<double> m(c, 2);
    auto b = toy_batches(4, 3, 4)[0];
    b.targets.assign(b.size * b.length, 0.5);
    Tape<double> t;
    auto out = m.forward(t, b);
    const double l1 = model_loss(t, c, out, b).item();
    for (std::size_t i = 0; i < b.targets.size(); ++i)
        if (!b.mask.valid[i]) b.targets[i] = 100.0;
    const double l2 = model_loss(t, c, out, b).item();
    EXPECT_DOUBLE_EQ(l1, l2);
    double ref = 0, n = 0;
    for (std::size_t i = 0; i < b.targets.size(); ++i)
        if (b.mask.valid[i]) {
            ref += (out.ptr()[i] - 0.5) * (out.ptr()[i] - 0.5);
            n += 1;
        }
    EXPECT_NEAR(l1, ref / n, 1e-12);
}

TEST(Train, TokenOnlyModelBeatsChance)
{
    ModelConfig c = token_only_model(small());
    Model<double> m(c, 11);
    auto data = toy_batches(60, 7);
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.epochs = 40;
    train(m, tc, fixed_data(data, data));
    EXPECT_GT(evaluate(m, data), 0.6);
}

TEST(Search, GridProducesOneRecordPerRate)
{
    TrainConfig tc;
    tc.epochs = 1;
    auto data = fixed_data(toy_batches(20, 1), toy_batches(10, 2));
    auto r = grid_search<double>(small(), tc, default_lr_grid(), data);
    ASSERT_EQ(r.records.size(), 7u);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_DOUBLE_EQ(r.records[i].learning_rate, default_lr_grid()[i]);
    EXPECT_EQ(r.best, best_index(r.records, true));
    // every trial starts from the same initialization
    for (const auto& rec : r.records) EXPECT_DOUBLE_EQ(rec.initial_loss, r.records[0].initial_loss);
}

TEST(Search, RandomSamplesInBoundsAndDeterministic)
{
    auto a = sample_random_search(200, 5), b = sample_random_search(200, 5);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].learning_rate, b[i].learning_rate);
        EXPECT_GE(a[i].learning_rate, std::exp(-8.0));
        EXPECT_LE(a[i].learning_rate, std::exp(-1.0));
        EXPECT_GE(a[i].dropout_p, 0.0);
        EXPECT_LT(a[i].dropout_p, 0.5);
    }
    for (const auto& s : sample_random_search(50, 5, LogBase::ten)) EXPECT_GE(s.learning_rate, 1e-8);
    EXPECT_THROW(sample_random_search(0, 1), ParameterError);
    TrainConfig tc;
    tc.epochs = 1;
    auto r = random_search<double>(small(), tc, 3, 5, fixed_data(toy_batches(10, 1), toy_batches(10, 2)));
    EXPECT_EQ(r.records.size(), 3u);
    EXPECT_DOUBLE_EQ(r.records[1].learning_rate, a[1].learning_rate);
}

TEST(Evp, ClosedFormAgainstMonteCarlo)
{
    EXPECT_NEAR(expected_validation_performance({0.2, 0.8}, 2), 0.65, 1e-12);
    const std::vector<double> s{0.61, 0.7, 0.55, 0.72, 0.69, 0.4};
    for (std::size_t k : {1u, 2u, 3u, 10u}) EXPECT_NEAR(expected_validation_performance(s, k), evp_monte_carlo(s, k, 400000), 2e-3);
    double mean = 0;
    for (double v : s) mean += v;
    EXPECT_NEAR(expected_validation_performance(s, 1), mean / 6, 1e-12);
    double prev = 0;
    for (std::size_t k = 1; k < 30; ++k) {
        const double e = expected_validation_performance(s, k);
        EXPECT_GE(e, prev - 1e-15);
        prev = e;
    }
    EXPECT_NEAR(prev, 0.72, 1e-3);
    EXPECT_THROW(expected_validation_performance({}, 1), ParameterError);
    EXPECT_THROW(expected_validation_performance({1.0}, 0), ParameterError);
}

TEST(Evp, RelativeImprovement)
{
    EXPECT_NEAR(relative_improvement(0.88, 0.80), 0.10, 1e-12);
    EXPECT_THROW(relative_improvement(0.5, 0.0), ParameterError);
}

TEST(TrialLog, JsonlRoundTripAndBadLine)
{
    const auto p = (std::filesystem::temp_directory_path() / "hmx_trials.jsonl").string();
    TrialRecord r;
    r.learning_rate = 1e-3;
    r.score = 0.75;
    r.seed = 4;
    r.config = json{{"model", model_config_to_json(small())}};
    write_trials_jsonl({r, r}, p);
    write_trials_jsonl({r}, p, true);
    auto back = read_trials_jsonl(p);
    ASSERT_EQ(back.size(), 3u);
    EXPECT_DOUBLE_EQ(back[2].score, 0.75);
    EXPECT_EQ(back[0].config, r.config);
    std::ofstream(p, std::ios::app) << "{not json\n";
    try {
        read_trials_jsonl(p);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(":4:"), std::string::npos);
    }
    std::filesystem::remove(p);
}
