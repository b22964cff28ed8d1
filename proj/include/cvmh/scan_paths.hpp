#pragma once

// Spatial scan orders over an H x W grid and the gather/scatter ops that move
// NCHW maps to and from directional sequences.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "ops.hpp"

namespace cvmh {

enum class ScanMode { SS2D, CS2D };

enum class Direction { Horizontal, Vertical, HorizontalReverse, VerticalReverse, Diagonal, AntiDiagonal };

inline const char* to_string(ScanMode m) { return m == ScanMode::SS2D ? "ss2d" : "cs2d"; }

inline ScanMode parse_scan_mode(const std::string& s) {
    if (s == "ss2d" || s == "SS2D") return ScanMode::SS2D;
    if (s == "cs2d" || s == "CS2D") return ScanMode::CS2D;
    throw ConfigError("unknown scan mode '" + s + "' (expected ss2d or cs2d)");
}

inline const char* to_string(Direction d) {
    switch (d) {
        case Direction::Horizontal: return "horizontal";
        case Direction::Vertical: return "vertical";
        case Direction::HorizontalReverse: return "horizontal-reverse";
        case Direction::VerticalReverse: return "vertical-reverse";
        case Direction::Diagonal: return "diagonal";
        case Direction::AntiDiagonal: return "anti-diagonal";
    }
    return "?";
}

/// perm[t] is the flat raster index (h*W + w) visited at sequence position t.
struct ScanOrder {
    std::size_t H = 0, W = 0;
    Direction direction = Direction::Horizontal;
    std::vector<std::uint32_t> perm;
    std::vector<std::uint32_t> inv;
};

using ScanPaths = std::array<ScanOrder, 4>;

inline std::array<Direction, 4> directions(ScanMode mode) {
    if (mode == ScanMode::SS2D)
        return {Direction::Horizontal, Direction::Vertical, Direction::HorizontalReverse, Direction::VerticalReverse};
    return {Direction::Horizontal, Direction::Vertical, Direction::Diagonal, Direction::AntiDiagonal};
}

inline ScanOrder make_order(std::size_t H, std::size_t W, Direction dir) {
    if (H == 0 || W == 0) throw ConfigError("scan path over empty grid " + std::to_string(H) + "x" + std::to_string(W));
    ScanOrder o;
    o.H = H;
    o.W = W;
    o.direction = dir;
    const std::size_t L = H * W;
    o.perm.reserve(L);
    auto push = [&](std::size_t h, std::size_t w) { o.perm.push_back(static_cast<std::uint32_t>(h * W + w)); };
    switch (dir) {
        case Direction::Horizontal:
        case Direction::HorizontalReverse:
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) push(h, w);
            break;
        case Direction::Vertical:
        case Direction::VerticalReverse:
            for (std::size_t w = 0; w < W; ++w)
                for (std::size_t h = 0; h < H; ++h) push(h, w);
            break;
        case Direction::Diagonal:
            // bands d = h + w, ascending h inside a band
            for (std::size_t d = 0; d + 1 < H + W; ++d)
                for (std::size_t h = 0; h < H; ++h)
                    if (d >= h && d - h < W) push(h, d - h);
            break;
        case Direction::AntiDiagonal:
            // bands d = h + (W-1-w), starting at the top-right corner
            for (std::size_t d = 0; d + 1 < H + W; ++d)
                for (std::size_t h = 0; h < H; ++h)
                    if (d >= h && d - h < W) push(h, W - 1 - (d - h));
            break;
    }
    if (dir == Direction::HorizontalReverse || dir == Direction::VerticalReverse)
        std::reverse(o.perm.begin(), o.perm.end());
    o.inv.assign(L, 0);
    for (std::size_t t = 0; t < L; ++t) o.inv[o.perm[t]] = static_cast<std::uint32_t>(t);
    return o;
}

inline ScanPaths build_paths(std::size_t H, std::size_t W, ScanMode mode) {
    const auto dirs = directions(mode);
    return {make_order(H, W, dirs[0]), make_order(H, W, dirs[1]), make_order(H, W, dirs[2]),
            make_order(H, W, dirs[3])};
}

/// Shared, immutable path table per (H, W, mode).
inline std::shared_ptr<const ScanPaths> cached_paths(std::size_t H, std::size_t W, ScanMode mode) {
    static std::mutex mu;
    static std::map<std::tuple<std::size_t, std::size_t, int>, std::shared_ptr<const ScanPaths>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_tuple(H, W, static_cast<int>(mode));
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    auto p = std::make_shared<const ScanPaths>(build_paths(H, W, mode));
    cache.emplace(key, p);
    return p;
}

/// [N,C,H,W] -> [N,C,L] with out[:,:,t] = x[:,:,perm[t]].
template <typename T>
Tensor<T> flatten_along(const Tensor<T>& x, const ScanOrder& order) {
    if (x.rank() != 4 || x.dim(2) != order.H || x.dim(3) != order.W)
        throw ConfigError("flatten_along: map " + shape_str(x.shape()) + " vs order " + std::to_string(order.H) + "x" +
                          std::to_string(order.W));
    auto flat = ops::reshape(x, {x.dim(0), x.dim(1), order.H * order.W});
    if (order.direction == Direction::Horizontal) return flat;
    return ops::gather_last(flat, std::span<const std::uint32_t>(order.perm));
}

/// Inverse of flatten_along: [N,C,L] -> [N,C,H,W].
template <typename T>
Tensor<T> unflatten_along(const Tensor<T>& y, const ScanOrder& order) {
    if (y.rank() != 3 || y.dim(2) != order.H * order.W)
        throw ConfigError("unflatten_along: sequence " + shape_str(y.shape()) + " vs order " +
                          std::to_string(order.H) + "x" + std::to_string(order.W));
    auto raster =
        order.direction == Direction::Horizontal ? y : ops::gather_last(y, std::span<const std::uint32_t>(order.inv));
    return ops::reshape(raster, {y.dim(0), y.dim(1), order.H, order.W});
}

/// Sum over directions of unflatten_along(ys[d], orders[d]), in order d = 0..3.
template <typename T>
Tensor<T> merge_directions(const std::vector<Tensor<T>>& ys, const ScanPaths& orders) {
    if (ys.size() != 4) throw ConfigError("merge_directions needs 4 sequences, got " + std::to_string(ys.size()));
    Tensor<T> out = unflatten_along(ys[0], orders[0]);
    for (std::size_t d = 1; d < 4; ++d) out = ops::add(out, unflatten_along(ys[d], orders[d]));
    return out;
}

}  // namespace cvmh
