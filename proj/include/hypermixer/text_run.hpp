#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "hypermixer/checkpoint.hpp"
#include "hypermixer/run_config.hpp"

namespace hmx {

struct TextRunResult {
    SearchResult search;
    std::optional<double> train_accuracy;  // single runs only
    std::size_t vocab_size = 0;
    std::size_t train_examples = 0;
    std::size_t truncated = 0;
    ModelConfig model;
    std::string trials_path, summary_path, checkpoint_path;
};

namespace detail {

inline TsvOptions tsv_options(const TextDataConfig& d)
{
    TsvOptions o;
    o.schema = d.schema;
    o.has_header = d.has_header;
    o.labels = d.labels;
    return o;
}

}  // namespace detail

/// Loads the TSV data, builds the vocabulary on the training split and runs
/// the configured search. Without a validation file, model selection and the
/// reported score use the training split.
template <class T>
TextRunResult run_text(const RunConfig& c)
{
    const auto opt = detail::tsv_options(c.data);
    const auto train_ex = load_tsv(c.data.train, opt);
    if (train_ex.empty()) throw DataError(c.data.train + ": no examples");
    const auto val_ex = c.data.validation ? load_tsv(*c.data.validation, opt) : train_ex;
    const Vocabulary vocab = build_vocab(train_ex, c.data.min_frequency);
    const bool pair = c.data.schema == TsvSchema::pair;

    TextRunResult r;
    r.vocab_size = vocab.size();
    r.train_examples = train_ex.size();
    ModelConfig mc = c.model;
    mc.input = InputKind::tokens;
    mc.head = HeadKind::classifier;
    mc.pooling = Pooling::mean_over_valid;
    mc.num_classes = std::max(mc.num_classes, c.data.labels.size());
    if (mc.vocab_size == 0) mc.vocab_size = vocab.size();
    if (mc.vocab_size < vocab.size())
        throw ConfigError("model.vocab_size " + std::to_string(mc.vocab_size) + " is smaller than the vocabulary (" +
                          std::to_string(vocab.size()) + ")");
    const std::size_t n_cap = c.data.n_cap.value_or(default_n_cap(mc.token_mixing.kind));
    if (is_fixed_length(mc.token_mixing.kind) && !mc.token_mixing.n_max) {
        if (n_cap == 0) throw ConfigError("fixed-length token mixing needs n_max or data.n_cap");
        mc.token_mixing.n_max = n_cap;
    }
    mc.validate();
    r.model = mc;

    const auto val = batch_iter(val_ex, vocab, 256, n_cap, std::nullopt, pair);
    TrainData data{[&](std::size_t, std::uint64_t s) {
                       auto b = batch_iter(train_ex, vocab, c.train.batch_size, n_cap, s, pair);
                       return b;
                   },
                   val};
    r.truncated = total_truncated(batch_iter(train_ex, vocab, c.train.batch_size, n_cap, std::nullopt, pair));

    std::filesystem::create_directories(c.output_dir);
    const std::filesystem::path out(c.output_dir);
    switch (c.search.kind) {
    case SearchKind::single: {
        const auto start = std::chrono::steady_clock::now();
        Model<T> model(mc, c.train.seed);
        const auto res = train(model, c.train, data);
        TrialRecord t;
        t.learning_rate = c.train.learning_rate;
        t.dropout_p = c.train.dropout_p.value_or(mc.dropout_p);
        t.score = res.best_score;
        t.seed = c.train.seed;
        t.initial_loss = res.initial_loss;
        t.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        t.config = json{{"model", model_config_to_json(mc)}, {"train", train_config_to_json(c.train)}};
        r.search.records.push_back(std::move(t));
        r.train_accuracy = evaluate(model, batch_iter(train_ex, vocab, 256, n_cap, std::nullopt, pair));
        r.checkpoint_path = (out / "model.ckpt").string();
        save_checkpoint(r.checkpoint_path, mc, model.state());
        break;
    }
    case SearchKind::grid: r.search = grid_search<T>(mc, c.train, c.search.grid, data); break;
    case SearchKind::random:
        r.search = random_search<T>(mc, c.train, c.search.num_trials, c.search.seed, data, c.search.log_base);
        break;
    }

    r.trials_path = (out / "trials.jsonl").string();
    write_trials_jsonl(r.search.records, r.trials_path);
    json summary{{"config", run_config_to_json(c)},
                 {"resolved_model", model_config_to_json(mc)},
                 {"vocab_size", r.vocab_size},
                 {"train_examples", r.train_examples},
                 {"truncated", r.truncated},
                 {"trials", r.search.records.size()},
                 {"best_trial", r.search.best},
                 {"best_score", r.search.records[r.search.best].score},
                 {"score_split", c.data.validation ? "validation" : "train"}};
    if (r.train_accuracy) summary["train_accuracy"] = *r.train_accuracy;
    r.summary_path = (out / "summary.json").string();
    std::ofstream f(r.summary_path);
    if (!f) throw IoError("cannot write " + r.summary_path);
    f << summary.dump(2) << '\n';
    if (!f) throw IoError("failed writing " + r.summary_path);
    return r;
}

}  // namespace hmx
