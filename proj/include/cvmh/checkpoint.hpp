#pragma once

// CVCK checkpoints (parameters and buffers as named f32 tensors) and the CVOP
// optimizer sidecar used to resume training exactly.

#include <map>
#include <string>
#include <vector>

#include "data_io.hpp"
#include "optim.hpp"

namespace cvmh {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kOptimizerVersion = 1;

struct NamedTensor {
    Shape shape;
    std::vector<float> values;
};

using TensorMap = std::map<std::string, NamedTensor>;

inline void write_tensor_map(const fs::path& path, const std::vector<std::pair<std::string, NamedTensor>>& entries) {
    std::string out = "CVCK";
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        if (name.size() > 0xFFFF) throw ConfigError("parameter name too long: " + name);
        if (t.shape.size() > 255) throw ConfigError("parameter rank too large: " + name);
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.shape.size()));
        for (auto d : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (float f : t.values) detail::put_f32(out, f);
    }
    detail::write_file(path, out);
}

inline TensorMap read_tensor_map(const fs::path& path) {
    const std::string s = detail::read_file(path);
    detail::ByteReader r(s, path.string());
    if (r.bytes(4) != "CVCK") throw IoError("bad checkpoint magic in " + path.string());
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    TensorMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint16_t>();
        std::string name = r.bytes(len);
        NamedTensor t;
        const auto rank = r.get<std::uint8_t>();
        for (std::size_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint32_t>());
        t.values.resize(numel(t.shape));
        for (auto& f : t.values) f = r.get_f32();
        if (!out.emplace(std::move(name), std::move(t)).second) throw IoError("duplicate entry in " + path.string());
    }
    if (!r.done()) throw IoError("trailing bytes in " + path.string());
    return out;
}

template <typename T>
void save_checkpoint(const fs::path& path, const ParamSet<T>& ps) {
    std::vector<std::pair<std::string, NamedTensor>> entries;
    for (const auto* p : ps.params)
        entries.push_back({p->name, {p->value.shape(), std::vector<float>(p->value.values().begin(), p->value.values().end())}});
    for (const auto& b : ps.buffers)
        entries.push_back({b.name, {{b.values->size()}, std::vector<float>(b.values->begin(), b.values->end())}});
    write_tensor_map(path, entries);
}

/// Loads every parameter and buffer of `ps`; missing entries or shape
/// mismatches are config errors, unknown extra entries are ignored.
template <typename T>
void load_checkpoint(const fs::path& path, ParamSet<T>& ps) {
    const auto map = read_tensor_map(path);
    auto find = [&](const std::string& name) -> const NamedTensor& {
        auto it = map.find(name);
        if (it == map.end()) throw ConfigError("checkpoint " + path.string() + " lacks entry " + name);
        return it->second;
    };
    for (auto* p : ps.params) {
        const auto& t = find(p->name);
        if (t.shape != p->value.shape())
            throw ConfigError("checkpoint entry " + p->name + " has shape " + shape_str(t.shape) + ", model expects " +
                              shape_str(p->value.shape()));
        std::copy(t.values.begin(), t.values.end(), p->value.values().begin());
    }
    for (auto& b : ps.buffers) {
        const auto& t = find(b.name);
        if (t.values.size() != b.values->size()) throw ConfigError("checkpoint buffer " + b.name + " has wrong size");
        std::copy(t.values.begin(), t.values.end(), b.values->begin());
    }
}

template <typename T>
void save_optimizer(const fs::path& path, AdamW<T>& opt, const ParamSet<T>& ps) {
    std::string out = "CVOP";
    detail::put_le<std::uint32_t>(out, kOptimizerVersion);
    detail::put_le<std::uint64_t>(out, opt.steps());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ps.params.size()));
    auto put_f64 = [&out](double d) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        detail::put_le(out, bits);
    };
    for (std::size_t i = 0; i < ps.params.size(); ++i) {
        const auto& name = ps.params[i]->name;
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        detail::put_le<std::uint64_t>(out, opt.first_moments()[i].size());
        for (double d : opt.first_moments()[i]) put_f64(d);
        for (double d : opt.second_moments()[i]) put_f64(d);
    }
    detail::write_file(path, out);
}

template <typename T>
void load_optimizer(const fs::path& path, AdamW<T>& opt, const ParamSet<T>& ps) {
    const std::string s = detail::read_file(path);
    detail::ByteReader r(s, path.string());
    if (r.bytes(4) != "CVOP") throw IoError("bad optimizer-state magic in " + path.string());
    if (r.get<std::uint32_t>() != kOptimizerVersion) throw IoError("unsupported optimizer-state version");
    const auto step = r.get<std::uint64_t>();
    const auto count = r.get<std::uint32_t>();
    if (count != ps.params.size()) throw ConfigError("optimizer state covers a different parameter set");
    auto get_f64 = [&r] {
        const auto bits = r.get<std::uint64_t>();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    };
    for (std::size_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.get<std::uint16_t>());
        if (name != ps.params[i]->name) throw ConfigError("optimizer state entry " + name + " out of order");
        const auto n = r.get<std::uint64_t>();
        if (n != opt.first_moments()[i].size()) throw ConfigError("optimizer state size mismatch for " + name);
        for (auto& d : opt.first_moments()[i]) d = get_f64();
        for (auto& d : opt.second_moments()[i]) d = get_f64();
    }
    if (!r.done()) throw IoError("trailing bytes in " + path.string());
    opt.set_steps(step);
}

}  // namespace cvmh
