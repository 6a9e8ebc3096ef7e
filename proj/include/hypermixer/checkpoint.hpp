#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hypermixer/config_json.hpp"

namespace hmx {

// Layout: "MIXK1" | u64 json byte length | canonical config JSON |
//         u64 scalar count | float64 values in declaration order.
// All integers and floats are little-endian.

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v)
{
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is)
{
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline constexpr char checkpoint_magic[] = "MIXK1";

template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& config, const ModelState<T>& state)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path);
    os.write(checkpoint_magic, 5);
    const std::string cfg = model_config_to_json(config).dump();
    detail::put_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    detail::put_u64(os, enumerate_params(state));
    for (const auto& t : state.parameters())
        for (T v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
    if (!os) throw IoError("failed writing checkpoint " + path);
}

template <class T>
Model<T> load_checkpoint(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, checkpoint_magic, 5) != 0)
        throw IoError(path + " is not a checkpoint (bad magic)");
    const auto len = detail::get_u64(is);
    std::string cfg(len, '\0');
    if (!is.read(cfg.data(), static_cast<std::streamsize>(len))) throw IoError("checkpoint truncated");
    ModelConfig config;
    try {
        config = model_config_from_json(json::parse(cfg));
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    auto state = init_model_state<T>(config, 0);
    if (detail::get_u64(is) != enumerate_params(state)) throw IoError("checkpoint parameter count mismatch");
    for (auto& t : state.parameters())
        for (auto& v : t.data()) v = static_cast<T>(std::bit_cast<double>(detail::get_u64(is)));
    return Model<T>(std::move(config), std::move(state));
}

}  // namespace hmx
