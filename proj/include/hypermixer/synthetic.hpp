#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hypermixer/trainer.hpp"

namespace hmx {

enum class ShapeKind { rectangle, triangle };

struct ShapeDescriptor {
    ShapeKind kind = ShapeKind::rectangle;
    std::size_t start = 0;
    std::size_t width = 0;
    double height = 0;
};

struct ShapeSequence {
    std::vector<double> input;
    std::vector<double> target;
    std::vector<ShapeDescriptor> shapes;  // empty when loaded from a CSV cache
};

struct GeneratorOptions {
    std::size_t length = 100;
    std::size_t per_kind = 2;
    std::size_t min_width = 5, max_width = 10;
    double min_height = 1, max_height = 10;
    std::size_t min_gap = 1;
    std::size_t max_retries = 10000;

    void validate() const
    {
        if (per_kind == 0) throw ParameterError("per_kind must be positive");
        if (min_width == 0 || min_width > max_width) throw ParameterError("invalid shape width range");
        if (!(min_height <= max_height)) throw ParameterError("invalid shape height range");
        if (2 * per_kind * (max_width + min_gap) > length + min_gap)
            throw ParameterError("shapes cannot fit into the sequence length");
    }
};

/// Relative height of cell t (0-based) of a shape of width w.
inline double shape_profile(ShapeKind kind, std::size_t t, std::size_t w)
{
    if (kind == ShapeKind::rectangle) return 1.0;
    const double c = static_cast<double>(w) - 1.0;
    return 1.0 - std::abs(2.0 * static_cast<double>(t) - c) / (static_cast<double>(w) + 1.0);
}

/// Input and target signals from descriptors; every shape's height is replaced
/// by the mean height of the shapes of its kind in the target.
inline void render(ShapeSequence& s, std::size_t length)
{
    s.input.assign(length, 0.0);
    s.target.assign(length, 0.0);
    double sum[2] = {0, 0};
    std::size_t count[2] = {0, 0};
    for (const auto& sh : s.shapes) {
        sum[static_cast<int>(sh.kind)] += sh.height;
        ++count[static_cast<int>(sh.kind)];
    }
    for (const auto& sh : s.shapes) {
        const int k = static_cast<int>(sh.kind);
        const double mean = sum[k] / static_cast<double>(count[k]);
        for (std::size_t t = 0; t < sh.width; ++t) {
            const double p = shape_profile(sh.kind, t, sh.width);
            s.input[sh.start + t] = p * sh.height;
            s.target[sh.start + t] = p * mean;
        }
    }
}

/// Sequence `index` of the stream for `seed`; independent of how many
/// sequences are generated around it.
inline ShapeSequence generate_one(std::uint64_t seed, std::uint64_t index, const GeneratorOptions& opt = {})
{
    std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    Rng rng(ss);
    std::uniform_int_distribution<std::size_t> width(opt.min_width, opt.max_width);
    std::uniform_real_distribution<double> height(opt.min_height, opt.max_height);
    ShapeSequence s;
    for (ShapeKind k : {ShapeKind::rectangle, ShapeKind::triangle})
        for (std::size_t i = 0; i < opt.per_kind; ++i) s.shapes.push_back({k, 0, width(rng), height(rng)});

    for (std::size_t attempt = 0;; ++attempt) {
        if (attempt == opt.max_retries)
            throw GenerationError("no non-overlapping placement after " + std::to_string(opt.max_retries) + " retries");
        std::vector<std::pair<std::size_t, std::size_t>> taken;
        bool ok = true;
        for (auto& sh : s.shapes) {
            sh.start = std::uniform_int_distribution<std::size_t>(0, opt.length - sh.width)(rng);
            for (auto [a, w] : taken)
                if (sh.start < a + w + opt.min_gap && a < sh.start + sh.width + opt.min_gap) ok = false;
            if (!ok) break;
            taken.emplace_back(sh.start, sh.width);
        }
        if (ok) break;
    }
    render(s, opt.length);
    return s;
}

inline std::vector<ShapeSequence> generate(std::uint64_t seed, std::size_t count, std::uint64_t first_index = 0,
                                           const GeneratorOptions& opt = {})
{
    if (count == 0) throw ParameterError("count must be at least 1");
    opt.validate();
    std::vector<ShapeSequence> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_one(seed, first_index + i, opt));
    return out;
}

/// Expected squared error of the best predictor that sees a shape but not its
/// partner: per cell profile^2 * Var(height) / 4, averaged over all cells.
inline double task_floor(const std::vector<ShapeSequence>& seqs, const GeneratorOptions& opt = {})
{
    const double range = opt.max_height - opt.min_height;
    const double var = range * range / 12.0;
    double sum = 0;
    std::size_t cells = 0;
    for (const auto& s : seqs) {
        if (s.shapes.empty()) throw DataError("task floor needs shape descriptors");
        cells += s.input.size();
        for (const auto& sh : s.shapes) {
            // the partner's height enters the mean with weight 1/per_kind
            const double w = 1.0 / static_cast<double>(opt.per_kind);
            for (std::size_t t = 0; t < sh.width; ++t) {
                const double p = shape_profile(sh.kind, t, sh.width);
                sum += p * p * var * w * w * static_cast<double>(opt.per_kind - 1);
            }
        }
    }
    return sum / static_cast<double>(cells);
}

inline void write_dataset_csv(const std::vector<ShapeSequence>& seqs, const std::string& path)
{
    if (seqs.empty()) throw ParameterError("empty dataset");
    const std::size_t L = seqs[0].input.size();
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "index";
    for (std::size_t i = 0; i < L; ++i) f << ",input_" << i;
    for (std::size_t i = 0; i < L; ++i) f << ",target_" << i;
    f << '\n' << std::setprecision(17);
    for (std::size_t k = 0; k < seqs.size(); ++k) {
        f << k;
        for (double v : seqs[k].input) f << ',' << v;
        for (double v : seqs[k].target) f << ',' << v;
        f << '\n';
    }
    if (!f) throw IoError("failed writing " + path);
}

inline std::vector<ShapeSequence> read_dataset_csv(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw DataError(path + ": missing header");
    const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (cols < 3 || (cols - 1) % 2) throw DataError(path + ": bad header");
    const std::size_t L = (cols - 1) / 2;
    std::vector<ShapeSequence> out;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(ss, cell, ',')) {
            try {
                v.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw DataError(path + ": line " + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
        }
        if (v.size() != cols) throw DataError(path + ": line " + std::to_string(lineno) + ": wrong column count");
        ShapeSequence s;
        s.input.assign(v.begin() + 1, v.begin() + 1 + static_cast<std::ptrdiff_t>(L));
        s.target.assign(v.begin() + 1 + static_cast<std::ptrdiff_t>(L), v.end());
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<Batch> synthetic_batches(const std::vector<ShapeSequence>& seqs, std::size_t batch_size,
                                            std::optional<std::uint64_t> shuffle_seed = std::nullopt)
{
    if (batch_size == 0) throw ParameterError("batch_size must be positive");
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle_seed) {
        Rng rng(*shuffle_seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        Batch b;
        b.size = std::min(batch_size, order.size() - start);
        b.length = seqs[order[start]].input.size();
        for (std::size_t k = 0; k < b.size; ++k) {
            const auto& s = seqs[order[start + k]];
            if (s.input.size() != b.length) throw ShapeError("synthetic sequences differ in length");
            b.signal.insert(b.signal.end(), s.input.begin(), s.input.end());
            b.targets.insert(b.targets.end(), s.target.begin(), s.target.end());
        }
        b.mask = Mask::all_valid(b.size, b.length);
        out.push_back(std::move(b));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class SyntheticVariant { none, mlpmixer, hypermixer, attention };

inline const char* variant_name(SyntheticVariant v)
{
    switch (v) {
    case SyntheticVariant::none: return "none";
    case SyntheticVariant::mlpmixer: return "mlpmixer";
    case SyntheticVariant::hypermixer: return "hypermixer";
    case SyntheticVariant::attention: return "attention";
    }
    return "?";
}

inline SyntheticVariant parse_synthetic_variant(const std::string& s)
{
    for (auto v : {SyntheticVariant::none, SyntheticVariant::mlpmixer, SyntheticVariant::hypermixer,
                   SyntheticVariant::attention})
        if (s == variant_name(v)) return v;
    throw ParameterError("unknown synthetic variant '" + s + "' (none, mlpmixer, hypermixer, attention)");
}

struct SyntheticConfig {
    SyntheticVariant variant = SyntheticVariant::hypermixer;
    std::size_t num_train = 5000;
    std::size_t num_validation = 1000;
    std::size_t num_test = 10000;
    std::uint64_t seed = 0;
    std::size_t num_layers = 2;
    std::size_t d = 64;
    std::size_t d_prime = 128;
    std::size_t heads = 4;
    std::size_t signal_window = 5;
    double learning_rate = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 20;
    std::size_t steps = 0;    // nonzero: fixed optimizer-step budget instead of epochs
    std::size_t rounds = 10;  // validation passes in step mode
    bool hypermixer_output_norm = true;
    GeneratorOptions generator;
};

inline ModelConfig synthetic_model_config(const SyntheticConfig& c)
{
    ModelConfig m;
    m.num_layers = c.num_layers;
    m.d = c.d;
    m.d_prime = c.d_prime;
    m.dropout_p = 0.0;
    m.head = HeadKind::regressor;
    m.pooling = Pooling::none;
    m.input = InputKind::signal;
    m.signal_window = c.signal_window;
    switch (c.variant) {
    case SyntheticVariant::none: m.token_mixing.kind = MixingKind::identity; break;
    case SyntheticVariant::mlpmixer:
        m.token_mixing.kind = MixingKind::mlpmixer;
        m.token_mixing.n_max = c.generator.length;
        break;
    case SyntheticVariant::hypermixer:
        m.token_mixing.kind = MixingKind::hypermixer_tied;
        m.token_mixing.output_norm = c.hypermixer_output_norm;
        break;
    case SyntheticVariant::attention:
        m.token_mixing.kind = MixingKind::attention;
        m.token_mixing.heads = c.heads;
        break;
    }
    m.validate();
    return m;
}

// Disjoint index ranges of the per-seed sequence stream.
inline constexpr std::uint64_t validation_stream_offset = 1'000'000'000ull;
inline constexpr std::uint64_t test_stream_offset = 2'000'000'000ull;

template <class T>
struct SyntheticResult {
    Model<T> model;
    TrainResult<T> training;
    double test_mse = 0;
    double task_floor = 0;
    double seconds = 0;
};

/// Trains a per-token regressor on the shape task and reports MSE on the
/// held-out test stream.
template <class T>
SyntheticResult<T> train_synthetic(const SyntheticConfig& c, const std::function<void(const EpochLog&)>& on_epoch = {})
{
    const auto start = std::chrono::steady_clock::now();
    const ModelConfig mc = synthetic_model_config(c);
    const auto train_set = generate(c.seed, c.num_train, 0, c.generator);
    const auto val = synthetic_batches(generate(c.seed, c.num_validation, validation_stream_offset, c.generator), 256);
    const auto test_seqs = generate(c.seed, c.num_test, test_stream_offset, c.generator);

    TrainConfig tc;
    tc.learning_rate = c.learning_rate;
    tc.batch_size = c.batch_size;
    tc.epochs = c.epochs;
    tc.seed = c.seed;
    TrainData data{[&](std::size_t, std::uint64_t s) { return synthetic_batches(train_set, c.batch_size, s); }, val};
    if (c.steps) {
        // rounds of steps/rounds batches each, walking through reshuffled passes over the data
        if (c.rounds == 0 || c.rounds > c.steps) throw ParameterError("rounds must lie in [1, steps]");
        tc.epochs = c.rounds;
        tc.max_steps = c.steps;
        const std::size_t per_round = (c.steps + c.rounds - 1) / c.rounds;
        data.train_epoch = [&, per_round, pass = std::size_t(-1), pass_batches = std::vector<Batch>{},
                            step = std::size_t{0}](std::size_t, std::uint64_t) mutable {
            std::vector<Batch> out;
            for (std::size_t i = 0; i < per_round; ++i, ++step) {
                const std::size_t bpe = (train_set.size() + c.batch_size - 1) / c.batch_size;
                if (step / bpe != pass) {
                    pass = step / bpe;
                    pass_batches = synthetic_batches(train_set, c.batch_size, c.seed + pass);
                }
                out.push_back(pass_batches[step % bpe]);
            }
            return out;
        };
    }

    SyntheticResult<T> r{Model<T>(mc, c.seed), {}, 0, 0, 0};
    r.training = train(r.model, tc, data, on_epoch);
    r.test_mse = evaluate(r.model, synthetic_batches(test_seqs, 256));
    r.task_floor = task_floor(test_seqs, c.generator);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

enum class MapProvenance { true_attention, pseudo };

struct AttentionMap {
    std::size_t n = 0;
    std::vector<double> values;  // row-major n x n
    MapProvenance provenance = MapProvenance::pseudo;

    double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

inline void normalize_rows(AttentionMap& m)
{
    for (std::size_t i = 0; i < m.n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < m.n; ++j) s += m.values[i * m.n + j];
        for (std::size_t j = 0; j < m.n; ++j)
            m.values[i * m.n + j] = s > 0 ? m.values[i * m.n + j] / s : 1.0 / static_cast<double>(m.n);
    }
}

inline Batch single_signal_batch(const std::vector<double>& signal)
{
    Batch b;
    b.size = 1;
    b.length = signal.size();
    b.signal = signal;
    b.mask = Mask::all_valid(1, b.length);
    return b;
}

namespace detail {

template <class T>
class FrozenParameters {
public:
    explicit FrozenParameters(std::vector<Tensor<T>> params) : params_(std::move(params))
    {
        for (auto& p : params_) {
            flags_.push_back(p.requires_grad());
            p.set_requires_grad(false);
        }
    }
    ~FrozenParameters()
    {
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(flags_[i]);
    }
    FrozenParameters(const FrozenParameters&) = delete;
    FrozenParameters& operator=(const FrozenParameters&) = delete;

private:
    std::vector<Tensor<T>> params_;
    std::vector<bool> flags_;
};

}  // namespace detail

/// Entry (i, j) = sum_f |d mix_out[i, f] / d mix_in[j, f]| for the last
/// token-mixing block, rows normalized to 1.
template <class T>
AttentionMap pseudo_attention(const Model<T>& model, const std::vector<double>& signal, std::size_t chunk = 128)
{
    const auto& cfg = model.config();
    if (cfg.token_mixing.kind == MixingKind::identity) throw AnalysisError("model has no token-mixing block");
    const Batch one = single_signal_batch(signal);
    ForwardTrace<T> trace;
    {
        Tape<T> tape;
        tape.set_recording(false);
        model.forward(tape, one, false, nullptr, &trace);
    }
    const std::size_t N = one.length, d = cfg.d;
    const auto& mixing = model.state().layers.back().mixing;
    detail::FrozenParameters<T> frozen(mixing.parameters());

    AttentionMap m;
    m.n = N;
    m.values.assign(N * N, 0.0);
    const std::size_t total = N * d;  // one backward seed per (i, f)
    for (std::size_t s0 = 0; s0 < total; s0 += chunk) {
        const std::size_t K = std::min(chunk, total - s0);
        Tensor<T> in(Shape{K, N, d}, T(0), true);
        for (std::size_t k = 0; k < K; ++k)
            std::copy(trace.mix_input.data().begin(), trace.mix_input.data().end(), in.ptr() + k * N * d);
        Tensor<T> seed(Shape{K, N, d});
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t i = (s0 + k) / d, f = (s0 + k) % d;
            seed(k, i, f) = T(1);
        }
        Tape<T> tape;
        auto out = token_mix(tape, mixing, in, Mask::all_valid(K, N));
        tape.backward(sum(tape, mul(tape, out, seed)));
        auto g = in.grad();
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t i = (s0 + k) / d, f = (s0 + k) % d;
            for (std::size_t j = 0; j < N; ++j)
                m.values[i * N + j] += std::abs(static_cast<double>(g[(k * N + j) * d + f]));
        }
    }
    normalize_rows(m);
    m.provenance = MapProvenance::pseudo;
    return m;
}

/// Head-averaged softmax weights of the last attention layer.
template <class T>
AttentionMap true_attention(const Model<T>& model, const std::vector<double>& signal)
{
    if (model.config().token_mixing.kind != MixingKind::attention)
        throw AnalysisError("true attention maps need an attention model");
    ForwardTrace<T> trace;
    Tape<T> tape;
    tape.set_recording(false);
    model.forward(tape, single_signal_batch(signal), false, nullptr, &trace);
    AttentionMap m;
    m.n = signal.size();
    m.values = trace.probe.weights;
    normalize_rows(m);
    m.provenance = MapProvenance::true_attention;
    return m;
}

/// Fraction of rows whose largest entry sits in the same column in both maps.
/// With exclude_diagonal the column j = i is ignored in both maps.
inline double top1_agreement(const AttentionMap& a, const AttentionMap& b, bool exclude_diagonal = false)
{
    if (a.n != b.n) throw ShapeError("attention maps differ in size");
    if (exclude_diagonal && a.n < 2) throw AnalysisError("off-diagonal agreement needs at least 2 positions");
    auto argmax = [&](const AttentionMap& m, std::size_t i) {
        std::size_t best = exclude_diagonal && i == 0 ? 1 : 0;
        for (std::size_t j = 0; j < m.n; ++j)
            if (!(exclude_diagonal && j == i) && m(i, j) > m(i, best)) best = j;
        return best;
    };
    std::size_t agree = 0;
    for (std::size_t i = 0; i < a.n; ++i) agree += argmax(a, i) == argmax(b, i);
    return static_cast<double>(agree) / static_cast<double>(a.n);
}

struct ShapeMass {
    double same = 0;       // mean weight on cells of shapes of the row's kind
    double different = 0;  // mean weight on cells of shapes of the other kind
};

/// Averages over rows that lie inside a shape; the row's own cell is excluded.
inline ShapeMass shape_mass(const AttentionMap& m, const ShapeSequence& s)
{
    std::vector<int> kind(m.n, -1);
    for (const auto& sh : s.shapes)
        for (std::size_t t = 0; t < sh.width; ++t) kind[sh.start + t] = static_cast<int>(sh.kind);
    double same = 0, diff = 0;
    std::size_t ns = 0, nd = 0;
    for (std::size_t i = 0; i < m.n; ++i) {
        if (kind[i] < 0) continue;
        for (std::size_t j = 0; j < m.n; ++j) {
            if (j == i || kind[j] < 0) continue;
            if (kind[j] == kind[i]) {
                same += m(i, j);
                ++ns;
            } else {
                diff += m(i, j);
                ++nd;
            }
        }
    }
    if (!ns || !nd) throw AnalysisError("sequence lacks shapes of both kinds");
    return {same / static_cast<double>(ns), diff / static_cast<double>(nd)};
}

enum class MapFormat { csv, pgm };

inline void export_map(const AttentionMap& m, const std::string& path, MapFormat format)
{
    if (m.values.size() != m.n * m.n || m.n == 0) throw ShapeError("attention map is not square");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    if (format == MapFormat::csv) {
        f << std::setprecision(9);
        for (std::size_t i = 0; i < m.n; ++i) {
            for (std::size_t j = 0; j < m.n; ++j) f << (j ? "," : "") << m(i, j);
            f << '\n';
        }
    } else {
        f << "P5\n" << m.n << ' ' << m.n << "\n255\n";
        for (std::size_t i = 0; i < m.n; ++i) {
            double mx = 0;
            for (std::size_t j = 0; j < m.n; ++j) mx = std::max(mx, m(i, j));
            for (std::size_t j = 0; j < m.n; ++j) {
                const double v = mx > 0 ? std::clamp(m(i, j) / mx, 0.0, 1.0) : 0.0;
                f.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
            }
        }
    }
    if (!f) throw IoError("failed writing " + path);
}

inline AttentionMap read_map_csv(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    AttentionMap m;
    std::string line;
    std::size_t rows = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) m.values.push_back(std::stod(cell));
        ++rows;
    }
    if (rows * rows != m.values.size()) throw DataError(path + ": map is not square");
    m.n = rows;
    return m;
}

}  // namespace hmx
