#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hypermixer/batch.hpp"
#include "hypermixer/mixing.hpp"

namespace hmx {

enum class TsvSchema { single, pair };

struct Example {
    std::string text_a;
    std::string text_b;  // pair schema only
    std::int32_t label = 0;
};

struct TsvOptions {
    TsvSchema schema = TsvSchema::single;
    bool has_header = true;
    std::vector<std::string> labels{"0", "1"};  // label string -> index
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return out;
}

}  // namespace detail

/// Reads (sentence, label) or (sentence1, sentence2, label) rows.
inline std::vector<Example> load_tsv(const std::string& path, const TsvOptions& opt = {})
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    const std::size_t cols = opt.schema == TsvSchema::single ? 2 : 3;
    std::vector<Example> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1 && opt.has_header) continue;
        if (line.empty()) continue;
        auto cells = detail::split_tabs(line);
        if (cells.size() != cols)
            throw DataError(path + ": line " + std::to_string(lineno) + ": expected " + std::to_string(cols) +
                            " tab-separated columns, found " + std::to_string(cells.size()));
        const auto it = std::find(opt.labels.begin(), opt.labels.end(), cells.back());
        if (it == opt.labels.end())
            throw DataError(path + ": line " + std::to_string(lineno) + ": unknown label '" + cells.back() + "'");
        Example e;
        e.text_a = cells[0];
        if (cols == 3) e.text_b = cells[1];
        e.label = static_cast<std::int32_t>(it - opt.labels.begin());
        out.push_back(std::move(e));
    }
    return out;
}

inline void write_tsv(const std::vector<Example>& examples, const std::string& path, const TsvOptions& opt = {})
{
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    if (opt.has_header) f << (opt.schema == TsvSchema::single ? "sentence\tlabel\n" : "sentence1\tsentence2\tlabel\n");
    for (const auto& e : examples) {
        f << e.text_a << '\t';
        if (opt.schema == TsvSchema::pair) f << e.text_b << '\t';
        f << opt.labels.at(static_cast<std::size_t>(e.label)) << '\n';
    }
    if (!f) throw IoError("failed writing " + path);
}

/// Lowercases, splits on whitespace, and makes every punctuation character its own token.
inline std::vector<std::string> tokenize(const std::string& text)
{
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

class Vocabulary {
public:
    static constexpr std::int32_t pad = 0, unk = 1, sep = 2;

    Vocabulary() : tokens_{"<pad>", "<unk>", "<sep>"} {}

    std::size_t size() const { return tokens_.size(); }
    std::size_t min_frequency() const { return min_frequency_; }
    const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    std::int32_t id(const std::string& token) const
    {
        const auto it = ids_.find(token);
        return it == ids_.end() ? unk : it->second;
    }

    std::vector<std::int32_t> encode(const std::string& text) const
    {
        std::vector<std::int32_t> out;
        for (const auto& t : tokenize(text)) out.push_back(id(t));
        return out;
    }

    /// Frequency descending, ties broken lexicographically; ids start after the specials.
    static Vocabulary build(const std::vector<Example>& examples, std::size_t min_frequency)
    {
        if (min_frequency == 0) throw ParameterError("min_frequency must be at least 1");
        std::map<std::string, std::size_t> counts;
        for (const auto& e : examples) {
            for (const auto& t : tokenize(e.text_a)) ++counts[t];
            for (const auto& t : tokenize(e.text_b)) ++counts[t];
        }
        std::vector<std::pair<std::string, std::size_t>> kept;
        for (auto& [tok, n] : counts)
            if (n >= min_frequency) kept.emplace_back(tok, n);
        std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocabulary v;
        v.min_frequency_ = min_frequency;
        for (auto& [tok, n] : kept) {
            v.ids_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
            v.tokens_.push_back(tok);
        }
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> ids_;
    std::size_t min_frequency_ = 1;
};

inline Vocabulary build_vocab(const std::vector<Example>& examples, std::size_t min_frequency)
{
    return Vocabulary::build(examples, min_frequency);
}

/// Sequence ids of one example: a, or a [SEP] b for pairs. Never empty.
inline std::vector<std::int32_t> encode_example(const Example& e, const Vocabulary& v, bool pair)
{
    auto ids = v.encode(e.text_a);
    if (pair) {
        ids.push_back(Vocabulary::sep);
        auto b = v.encode(e.text_b);
        ids.insert(ids.end(), b.begin(), b.end());
    }
    if (ids.empty()) ids.push_back(Vocabulary::unk);
    return ids;
}

/// Length cap matching the fixed mixing sizes: 250 for mlpmixer, 100 for gmlp, none otherwise.
inline std::size_t default_n_cap(MixingKind k)
{
    if (k == MixingKind::mlpmixer) return 250;
    if (k == MixingKind::gmlp) return 100;
    return 0;
}

/// Splits examples into padded batches. shuffle_seed reorders examples
/// deterministically; n_cap = 0 disables truncation.
inline std::vector<Batch> batch_iter(const std::vector<Example>& examples, const Vocabulary& vocab,
                                     std::size_t batch_size, std::size_t n_cap, std::optional<std::uint64_t> shuffle_seed,
                                     bool pair = false)
{
    if (batch_size == 0) throw ParameterError("batch_size must be positive");
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle_seed) {
        Rng rng(*shuffle_seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        std::vector<std::vector<std::int32_t>> rows;
        Batch b;
        for (std::size_t k = start; k < end; ++k) {
            const auto& e = examples[order[k]];
            auto ids = encode_example(e, vocab, pair);
            if (n_cap && ids.size() > n_cap) {
                ids.resize(n_cap);
                ++b.truncated;
            }
            rows.push_back(std::move(ids));
            b.labels.push_back(e.label);
        }
        b.size = rows.size();
        std::vector<std::size_t> lens;
        for (const auto& r : rows) {
            lens.push_back(r.size());
            b.length = std::max(b.length, r.size());
        }
        b.tokens.assign(b.size * b.length, Vocabulary::pad);
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(rows[i].begin(), rows[i].end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.length));
        b.mask = Mask::from_lengths(lens, b.length);
        out.push_back(std::move(b));
    }
    return out;
}

inline std::size_t total_truncated(const std::vector<Batch>& batches)
{
    std::size_t n = 0;
    for (const auto& b : batches) n += b.truncated;
    return n;
}

}  // namespace hmx
