#pragma once

// Images, labels and datasets: binary PPM/PGM, the CVTN raw tensor format,
// JSON manifests, tiling / stitching, flips and rotations, the synthetic
// shapes dataset, and colour prediction maps.

#include <array>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "module.hpp"

namespace cvmh {

namespace fs = std::filesystem;

/// 8-bit interleaved raster (1 or 3 channels).
struct Image {
    std::size_t width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }
};

namespace detail {

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

/// Next header token of a netpbm file, skipping whitespace and # comments.
inline std::string pnm_token(const std::string& s, std::size_t& pos, const std::string& file) {
    while (pos < s.size()) {
        if (std::isspace(static_cast<unsigned char>(s[pos]))) {
            ++pos;
        } else if (s[pos] == '#') {
            while (pos < s.size() && s[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    const std::size_t start = pos;
    while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (start == pos) throw IoError("truncated header in " + file);
    return s.substr(start, pos - start);
}

inline std::size_t pnm_number(const std::string& s, std::size_t& pos, const std::string& file) {
    const auto tok = pnm_token(s, pos, file);
    std::size_t v = 0;
    for (char c : tok) {
        if (c < '0' || c > '9') throw IoError("malformed header value '" + tok + "' in " + file);
        v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    return v;
}

}  // namespace detail

/// Reads a binary P6 (3 channels) or P5 (1 channel) file with maxval 255.
inline Image read_pnm(const fs::path& path) {
    const std::string file = path.string();
    const std::string s = detail::read_file(path);
    std::size_t pos = 0;
    const auto magic = detail::pnm_token(s, pos, file);
    if (magic != "P6" && magic != "P5") throw IoError("not a binary PPM/PGM (magic '" + magic + "'): " + file);
    Image img;
    img.channels = magic == "P6" ? 3 : 1;
    img.width = detail::pnm_number(s, pos, file);
    img.height = detail::pnm_number(s, pos, file);
    const std::size_t maxval = detail::pnm_number(s, pos, file);
    if (maxval != 255) throw IoError("only 8-bit (maxval 255) images supported: " + file);
    if (img.width == 0 || img.height == 0) throw IoError("zero image extent in " + file);
    if (pos >= s.size()) throw IoError("truncated file " + file);
    ++pos;  // single whitespace byte before the raster
    const std::size_t n = img.width * img.height * img.channels;
    if (s.size() - pos < n) throw IoError("truncated raster in " + file);
    img.pixels.assign(s.begin() + static_cast<std::ptrdiff_t>(pos), s.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return img;
}

inline void write_pnm(const fs::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw ConfigError("write_pnm: 1 or 3 channels only");
    std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
    out.append(img.pixels.begin(), img.pixels.end());
    detail::write_file(path, out);
}

// ---------------------------------------------------------------- CVTN

enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

struct RawTensor {
    Shape shape;
    DType dtype = DType::F32;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;

    std::size_t size() const { return numel(shape); }
    float value(std::size_t i) const { return dtype == DType::F32 ? f32[i] : static_cast<float>(u8[i]); }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_le(out, bits);
}

/// Bounds-checked little-endian reader.
class ByteReader {
   public:
    ByteReader(const std::string& data, std::string name) : data_(data), name_(std::move(name)) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    float get_f32() {
        const auto bits = get<std::uint32_t>();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

   private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw IoError("truncated file " + name_);
    }
    const std::string& data_;
    std::string name_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kCvtnVersion = 1;

inline void write_cvtn(const fs::path& path, const RawTensor& t) {
    std::string out = "CVTN";
    detail::put_le<std::uint32_t>(out, kCvtnVersion);
    if (t.shape.size() > 255) throw ConfigError("CVTN rank too large");
    out.push_back(static_cast<char>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.push_back(static_cast<char>(t.dtype));
    if (t.dtype == DType::F32) {
        if (t.f32.size() != t.size()) throw ConfigError("CVTN payload does not match shape");
        for (float f : t.f32) detail::put_f32(out, f);
    } else {
        if (t.u8.size() != t.size()) throw ConfigError("CVTN payload does not match shape");
        out.append(t.u8.begin(), t.u8.end());
    }
    detail::write_file(path, out);
}

inline RawTensor read_cvtn(const fs::path& path) {
    const std::string s = detail::read_file(path);
    detail::ByteReader r(s, path.string());
    if (r.bytes(4) != "CVTN") throw IoError("bad CVTN magic in " + path.string());
    const auto version = r.get<std::uint32_t>();
    if (version != kCvtnVersion) throw IoError("unsupported CVTN version " + std::to_string(version));
    RawTensor t;
    const auto rank = r.get<std::uint8_t>();
    for (std::size_t i = 0; i < rank; ++i) t.shape.push_back(r.get<std::uint32_t>());
    const auto code = r.get<std::uint8_t>();
    if (code > 1) throw IoError("unknown CVTN dtype code " + std::to_string(code) + " in " + path.string());
    t.dtype = static_cast<DType>(code);
    const std::size_t n = t.size();
    if (t.dtype == DType::F32) {
        t.f32.resize(n);
        for (auto& f : t.f32) f = r.get_f32();
    } else {
        const auto b = r.bytes(n);
        t.u8.assign(b.begin(), b.end());
    }
    if (!r.done()) throw IoError("trailing bytes in " + path.string());
    return t;
}

// ---------------------------------------------------------------- samples

/// Channel-first image in [0,1] (before normalization) and a label map.
struct Sample {
    std::size_t height = 0, width = 0;
    std::vector<float> image;          // [3,H,W]
    std::vector<std::int32_t> labels;  // [H,W]
};

inline bool has_ext(const fs::path& p, const char* ext) { return p.extension() == ext; }

inline Sample load_image(const fs::path& path) {
    Sample s;
    if (has_ext(path, ".cvtn")) {
        auto t = read_cvtn(path);
        if (t.shape.size() != 3 || t.shape[0] != 3) throw IoError("CVTN image must be [3,H,W]: " + path.string());
        s.height = t.shape[1];
        s.width = t.shape[2];
        s.image.resize(t.size());
        const float scale = t.dtype == DType::U8 ? 1.0f / 255.0f : 1.0f;
        for (std::size_t i = 0; i < t.size(); ++i) s.image[i] = t.value(i) * scale;
        return s;
    }
    auto img = read_pnm(path);
    if (img.channels != 3) throw IoError("image must be a P6 PPM: " + path.string());
    s.height = img.height;
    s.width = img.width;
    s.image.resize(3 * img.height * img.width);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x)
                s.image[(c * img.height + y) * img.width + x] = static_cast<float>(img.at(y, x, c)) / 255.0f;
    return s;
}

inline std::vector<std::int32_t> load_labels(const fs::path& path, std::size_t& H, std::size_t& W) {
    std::vector<std::int32_t> out;
    if (has_ext(path, ".cvtn")) {
        auto t = read_cvtn(path);
        if (t.shape.size() != 2) throw IoError("CVTN label map must be [H,W]: " + path.string());
        H = t.shape[0];
        W = t.shape[1];
        out.resize(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<std::int32_t>(std::lround(t.value(i)));
        return out;
    }
    auto img = read_pnm(path);
    if (img.channels != 1) throw IoError("label map must be a P5 PGM: " + path.string());
    H = img.height;
    W = img.width;
    out.assign(img.pixels.begin(), img.pixels.end());
    return out;
}

inline Sample load_pair(const fs::path& image, const fs::path& label) {
    Sample s = load_image(image);
    std::size_t H = 0, W = 0;
    s.labels = load_labels(label, H, W);
    if (H != s.height || W != s.width)
        throw IoError("size mismatch: " + image.string() + " is " + std::to_string(s.width) + "x" +
                      std::to_string(s.height) + " but " + label.string() + " is " + std::to_string(W) + "x" +
                      std::to_string(H));
    return s;
}

// ---------------------------------------------------------------- manifest

using Color = std::array<std::uint8_t, 3>;

struct DatasetManifest {
    fs::path root;
    std::vector<std::pair<fs::path, fs::path>> pairs;  // resolved paths
    std::size_t num_classes = 0;
    std::vector<std::string> class_names;
    std::vector<Color> palette;
    int ignore_index = -1;
    std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
    std::array<float, 3> std{0.25f, 0.25f, 0.25f};
};

inline DatasetManifest load_manifest(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = path.parent_path();
    try {
        if (j.contains("root")) m.root = m.root / j.at("root").get<std::string>();
        m.num_classes = j.at("num_classes").get<std::size_t>();
        for (const auto& p : j.at("pairs"))
            m.pairs.emplace_back(m.root / p.at("image").get<std::string>(), m.root / p.at("label").get<std::string>());
        if (j.contains("palette"))
            for (const auto& c : j.at("palette")) m.palette.push_back({c.at(0).get<std::uint8_t>(),
                                                                       c.at(1).get<std::uint8_t>(),
                                                                       c.at(2).get<std::uint8_t>()});
        if (j.contains("class_names")) m.class_names = j.at("class_names").get<std::vector<std::string>>();
        if (j.contains("ignore_index") && !j.at("ignore_index").is_null())
            m.ignore_index = j.at("ignore_index").get<int>();
        if (j.contains("mean")) m.mean = j.at("mean").get<std::array<float, 3>>();
        if (j.contains("std")) m.std = j.at("std").get<std::array<float, 3>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + path.string() + ": " + e.what());
    }
    if (m.num_classes == 0) throw ConfigError("manifest num_classes must be >= 1");
    if (!m.palette.empty() && m.palette.size() < m.num_classes)
        throw ConfigError("manifest palette covers fewer colours than classes");
    for (float s : m.std)
        if (!(s > 0)) throw ConfigError("manifest std must be positive");
    return m;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m, const std::vector<std::pair<std::string, std::string>>& rel_pairs) {
    nlohmann::json j;
    j["pairs"] = nlohmann::json::array();
    for (const auto& [img, lab] : rel_pairs) j["pairs"].push_back({{"image", img}, {"label", lab}});
    j["num_classes"] = m.num_classes;
    j["class_names"] = m.class_names;
    j["palette"] = nlohmann::json::array();
    for (const auto& c : m.palette) j["palette"].push_back({c[0], c[1], c[2]});
    j["ignore_index"] = m.ignore_index < 0 ? nlohmann::json(nullptr) : nlohmann::json(m.ignore_index);
    j["mean"] = m.mean;
    j["std"] = m.std;
    detail::write_file(path, j.dump(2) + "\n");
}

/// Loads and validates every pair of a manifest.
inline std::vector<Sample> load_dataset(const DatasetManifest& m) {
    std::vector<Sample> out;
    for (const auto& [img, lab] : m.pairs) {
        auto s = load_pair(img, lab);
        for (auto l : s.labels)
            if (l != m.ignore_index && (l < 0 || static_cast<std::size_t>(l) >= m.num_classes))
                throw ConfigError("label " + std::to_string(l) + " in " + lab.string() + " outside [0," +
                                  std::to_string(m.num_classes) + ")");
        out.push_back(std::move(s));
    }
    return out;
}

inline void normalize(std::vector<float>& image, std::size_t H, std::size_t W, const std::array<float, 3>& mean,
                      const std::array<float, 3>& stdev) {
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < H * W; ++i) image[c * H * W + i] = (image[c * H * W + i] - mean[c]) / stdev[c];
}

// ---------------------------------------------------------------- tiling

struct TileSpec {
    std::size_t size = 256;
    std::size_t stride = 256;

    void validate() const {
        if (size == 0 || size % 32) throw ConfigError("tile size must be a positive multiple of 32");
        if (stride == 0) throw ConfigError("tile stride must be positive");
    }
};

struct Tile {
    std::size_t y0 = 0, x0 = 0;
    Sample sample;  // size x size
};

/// Tile origins along one axis: raster steps of `stride`, padded so the last
/// tile reaches the end of the (zero-padded) extent.
inline std::vector<std::size_t> tile_origins(std::size_t extent, const TileSpec& spec) {
    std::vector<std::size_t> o{0};
    while (o.back() + spec.size < extent) o.push_back(o.back() + spec.stride);
    return o;
}

/// Raster-order tiles. Pixels beyond the image are zero with label ignore_index.
inline std::vector<Tile> tile(const Sample& s, const TileSpec& spec, int ignore_index) {
    spec.validate();
    std::vector<Tile> tiles;
    const std::size_t T = spec.size;
    for (auto y0 : tile_origins(s.height, spec))
        for (auto x0 : tile_origins(s.width, spec)) {
            Tile t;
            t.y0 = y0;
            t.x0 = x0;
            t.sample.height = t.sample.width = T;
            t.sample.image.assign(3 * T * T, 0.0f);
            t.sample.labels.assign(T * T, ignore_index);
            for (std::size_t y = 0; y < T && y0 + y < s.height; ++y)
                for (std::size_t x = 0; x < T && x0 + x < s.width; ++x) {
                    for (std::size_t c = 0; c < 3; ++c)
                        t.sample.image[(c * T + y) * T + x] = s.image[(c * s.height + y0 + y) * s.width + x0 + x];
                    t.sample.labels[y * T + x] = s.labels[(y0 + y) * s.width + x0 + x];
                }
            tiles.push_back(std::move(t));
        }
    return tiles;
}

/// Reassembles per-tile class maps into an H x W map; later tiles overwrite
/// earlier ones where they overlap.
inline std::vector<std::int32_t> stitch(const std::vector<Tile>& tiles, const std::vector<std::vector<std::int32_t>>& preds,
                                        std::size_t tile_size, std::size_t H, std::size_t W) {
    if (tiles.size() != preds.size()) throw ConfigError("stitch: tile / prediction count mismatch");
    std::vector<std::int32_t> out(H * W, -1);
    for (std::size_t i = 0; i < tiles.size(); ++i)
        for (std::size_t y = 0; y < tile_size && tiles[i].y0 + y < H; ++y)
            for (std::size_t x = 0; x < tile_size && tiles[i].x0 + x < W; ++x)
                out[(tiles[i].y0 + y) * W + tiles[i].x0 + x] = preds[i][y * tile_size + x];
    return out;
}

// ---------------------------------------------------------------- augmentation

struct AugmentConfig {
    double hflip = 0.5, vflip = 0.5, rot90 = 0.5;

    void validate() const {
        for (double p : {hflip, vflip, rot90})
            if (p < 0 || p > 1) throw ConfigError("augmentation probabilities must be in [0,1]");
    }
};

namespace detail {

template <typename F>
void remap(Sample& s, std::size_t newH, std::size_t newW, F src) {
    Sample o;
    o.height = newH;
    o.width = newW;
    o.image.resize(3 * newH * newW);
    o.labels.resize(newH * newW);
    for (std::size_t y = 0; y < newH; ++y)
        for (std::size_t x = 0; x < newW; ++x) {
            const auto [sy, sx] = src(y, x);
            for (std::size_t c = 0; c < 3; ++c)
                o.image[(c * newH + y) * newW + x] = s.image[(c * s.height + sy) * s.width + sx];
            o.labels[y * newW + x] = s.labels[sy * s.width + sx];
        }
    s = std::move(o);
}

}  // namespace detail

inline void hflip(Sample& s) {
    const auto W = s.width;
    detail::remap(s, s.height, s.width, [W](std::size_t y, std::size_t x) { return std::pair{y, W - 1 - x}; });
}
inline void vflip(Sample& s) {
    const auto H = s.height;
    detail::remap(s, s.height, s.width, [H](std::size_t y, std::size_t x) { return std::pair{H - 1 - y, x}; });
}
/// Quarter turn counter-clockwise.
inline void rot90(Sample& s) {
    const auto W = s.width;
    detail::remap(s, s.width, s.height, [W](std::size_t y, std::size_t x) { return std::pair{x, W - 1 - y}; });
}

/// Draws are made in a fixed order whatever the outcome, so the random stream
/// does not depend on the image content.
inline void augment(Sample& s, const AugmentConfig& cfg, Rng& rng) {
    const double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
    if (a < cfg.hflip) hflip(s);
    if (b < cfg.vflip) vflip(s);
    if (c < cfg.rot90) rot90(s);
}

/// Stacks samples into a [B,3,H,W] tensor (normalized) and flat labels.
template <typename T>
std::pair<Tensor<T>, std::vector<std::int32_t>> make_batch(const std::vector<const Sample*>& batch,
                                                           const std::array<float, 3>& mean,
                                                           const std::array<float, 3>& stdev) {
    if (batch.empty()) throw ConfigError("empty batch");
    const std::size_t H = batch[0]->height, W = batch[0]->width;
    std::vector<T> x;
    std::vector<std::int32_t> y;
    x.reserve(batch.size() * 3 * H * W);
    for (const auto* s : batch) {
        if (s->height != H || s->width != W) throw ConfigError("batch samples differ in size");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < H * W; ++i) x.push_back(static_cast<T>((s->image[c * H * W + i] - mean[c]) / stdev[c]));
        y.insert(y.end(), s->labels.begin(), s->labels.end());
    }
    return {Tensor<T>::from({batch.size(), 3, H, W}, std::move(x)), std::move(y)};
}

// ---------------------------------------------------------------- predictions

/// Per-pixel argmax of [N,K,H,W] logits; ties resolve to the lowest class.
template <typename T>
std::vector<std::int32_t> argmax_classes(const Tensor<T>& logits) {
    if (logits.rank() != 4) throw ConfigError("argmax expects [N,K,H,W]");
    const std::size_t N = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
    std::vector<std::int32_t> out(N * P);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < P; ++i) {
            std::size_t best = 0;
            T bv = logits[n * K * P + i];
            for (std::size_t k = 1; k < K; ++k) {
                const T v = logits[(n * K + k) * P + i];
                if (v > bv) bv = v, best = k;
            }
            out[n * P + i] = static_cast<std::int32_t>(best);
        }
    return out;
}

inline Image colorize(const std::vector<std::int32_t>& classes, std::size_t H, std::size_t W,
                      const std::vector<Color>& palette) {
    Image img{W, H, 3, std::vector<std::uint8_t>(3 * H * W)};
    for (std::size_t i = 0; i < H * W; ++i) {
        const auto k = classes[i];
        if (k < 0 || static_cast<std::size_t>(k) >= palette.size())
            throw ConfigError("palette does not cover class " + std::to_string(k));
        for (std::size_t c = 0; c < 3; ++c) img.pixels[3 * i + c] = palette[static_cast<std::size_t>(k)][c];
    }
    return img;
}

/// Inverse of colorize for an injective palette; unknown colours map to -1.
inline std::vector<std::int32_t> decode_palette(const Image& img, const std::vector<Color>& palette) {
    std::vector<std::int32_t> out(img.width * img.height, -1);
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t k = 0; k < palette.size(); ++k)
            if (img.pixels[3 * i] == palette[k][0] && img.pixels[3 * i + 1] == palette[k][1] &&
                img.pixels[3 * i + 2] == palette[k][2]) {
                out[i] = static_cast<std::int32_t>(k);
                break;
            }
    return out;
}

/// Writes the argmax map of single-image logits [1,K,H,W] as a palette PPM.
template <typename T>
void emit_prediction(const Tensor<T>& logits, const std::vector<Color>& palette, const fs::path& out) {
    if (logits.rank() != 4 || logits.dim(0) != 1) throw ConfigError("emit_prediction expects [1,K,H,W] logits");
    if (palette.size() < logits.dim(1)) throw ConfigError("palette does not cover all classes");
    write_pnm(out, colorize(argmax_classes(logits), logits.dim(2), logits.dim(3), palette));
}

// ---------------------------------------------------------------- synthetic shapes

inline std::vector<Color> default_palette() {
    return {Color{110, 105, 95}, Color{215, 55, 45},  Color{55, 190, 75},
            Color{45, 85, 215},  Color{230, 205, 40}, Color{195, 60, 195}};
}

inline std::vector<std::string> synth_class_names() {
    return {"background", "rectangle", "disk", "stripe", "square", "triangle"};
}

/// Renders one synthetic image: textured background (class 0) with stripes
/// (3), rectangles (1), disks (2), small squares (4) and triangles (5),
/// restricted to classes below n_classes. Every class is present.
inline Sample synth_image(std::uint64_t seed, std::size_t size, std::size_t n_classes) {
    Rng rng(seed);
    const auto palette = default_palette();
    const std::size_t S = size;
    std::vector<std::int32_t> lab(S * S, 0);
    const double sz = static_cast<double>(S);
    auto rnd = [&](double lo, double hi) { return rng.uniform(lo, hi); };

    if (n_classes > 3) {
        // one band of parallel stripes at a random angle
        const double ang = rnd(0, 3.14159265358979);
        const double period = rnd(0.22, 0.32) * sz, width = rnd(0.3, 0.45) * period;
        const double cx = rnd(0.2, 0.8) * sz, cy = rnd(0.2, 0.8) * sz, half = rnd(0.25, 0.4) * sz;
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                const double dx = double(x) - cx, dy = double(y) - cy;
                const double along = dx * std::cos(ang) + dy * std::sin(ang);
                const double across = -dx * std::sin(ang) + dy * std::cos(ang);
                if (std::fabs(along) < half && std::fabs(across) < half &&
                    std::fmod(std::fabs(across) + 1000 * period, period) < width)
                    lab[y * S + x] = 3;
            }
    }
    auto rect = [&](std::int32_t cls, double lo, double hi) {
        const double w = rnd(lo, hi) * sz, h = rnd(lo, hi) * sz;
        const double x0 = rnd(0, sz - w), y0 = rnd(0, sz - h);
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x)
                if (double(x) >= x0 && double(x) < x0 + w && double(y) >= y0 && double(y) < y0 + h)
                    lab[y * S + x] = cls;
    };
    const std::size_t n_rect = 1 + rng.below(2);
    for (std::size_t i = 0; i < n_rect; ++i) rect(1, 0.2, 0.4);
    if (n_classes > 2) {
        const std::size_t n_disk = 1 + rng.below(2);
        for (std::size_t i = 0; i < n_disk; ++i) {
            const double r = rnd(0.1, 0.2) * sz;
            const double cx = rnd(r, sz - r), cy = rnd(r, sz - r);
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
                    if (dx * dx + dy * dy < r * r) lab[y * S + x] = 2;
                }
        }
    }
    if (n_classes > 4) rect(4, 0.1, 0.16);
    if (n_classes > 5) {
        const double b = rnd(0.2, 0.3) * sz;
        const double x0 = rnd(0, sz - b), y0 = rnd(0, sz - b);
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                const double u = (double(x) - x0) / b, v = (double(y) - y0) / b;
                if (u >= 0 && v >= 0 && v <= 1 && u <= v) lab[y * S + x] = 5;
            }
    }

    Sample s;
    s.height = s.width = S;
    s.labels = lab;
    s.image.resize(3 * S * S);
    const double fx = rnd(0.05, 0.2), fy = rnd(0.05, 0.2), ph = rnd(0, 6.283);
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const auto k = static_cast<std::size_t>(lab[y * S + x]);
            double tex = rng.uniform(-12, 12);
            if (k == 0) tex += 18.0 * std::sin(fx * double(x) + ph) * std::cos(fy * double(y));
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(double(palette[k][c]) + tex + rng.uniform(-6, 6), 0.0, 255.0);
                s.image[(c * S + y) * S + x] = static_cast<float>(std::round(v) / 255.0);
            }
        }
    // guarantee every class appears: stamp a missing class as a small block
    for (std::size_t k = 0; k < n_classes; ++k) {
        if (std::find(s.labels.begin(), s.labels.end(), static_cast<std::int32_t>(k)) != s.labels.end()) continue;
        const std::size_t b = std::max<std::size_t>(4, S / 8);
        const std::size_t y0 = rng.below(S - b), x0 = rng.below(S - b);
        for (std::size_t y = y0; y < y0 + b; ++y)
            for (std::size_t x = x0; x < x0 + b; ++x) {
                s.labels[y * S + x] = static_cast<std::int32_t>(k);
                for (std::size_t c = 0; c < 3; ++c)
                    s.image[(c * S + y) * S + x] = static_cast<float>(palette[k][c]) / 255.0f;
            }
    }
    return s;
}

inline Image to_image(const Sample& s) {
    Image img{s.width, s.height, 3, std::vector<std::uint8_t>(3 * s.width * s.height)};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < s.width * s.height; ++i)
            img.pixels[3 * i + c] =
                static_cast<std::uint8_t>(std::lround(std::clamp(s.image[c * s.width * s.height + i], 0.0f, 1.0f) * 255.0f));
    return img;
}

inline Image to_label_image(const Sample& s) {
    Image img{s.width, s.height, 1, std::vector<std::uint8_t>(s.width * s.height)};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(s.labels[i]);
    return img;
}

/// Writes images/NNN.ppm, labels/NNN.pgm and manifest.json under dir.
inline DatasetManifest synth_generate(const fs::path& dir, std::uint64_t seed, std::size_t n_images, std::size_t size,
                                      std::size_t n_classes) {
    if (size == 0 || size % 32) throw ConfigError("synthetic image size must be a positive multiple of 32");
    if (n_classes < 2 || n_classes > 6) throw ConfigError("synthetic dataset supports 2..6 classes");
    if (n_images == 0) throw ConfigError("synthetic dataset needs at least one image");
    DatasetManifest m;
    m.root = dir;
    m.num_classes = n_classes;
    auto names = synth_class_names();
    m.class_names.assign(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(n_classes));
    auto pal = default_palette();
    m.palette.assign(pal.begin(), pal.begin() + static_cast<std::ptrdiff_t>(n_classes));
    std::vector<std::pair<std::string, std::string>> rel;
    Rng seeds(seed);
    for (std::size_t i = 0; i < n_images; ++i) {
        const Sample s = synth_image(seeds.next(), size, n_classes);
        char id[32];
        std::snprintf(id, sizeof id, "%03zu", i);
        const std::string img = std::string("images/") + id + ".ppm", lab = std::string("labels/") + id + ".pgm";
        write_pnm(dir / img, to_image(s));
        write_pnm(dir / lab, to_label_image(s));
        rel.emplace_back(img, lab);
        m.pairs.emplace_back(dir / img, dir / lab);
    }
    write_manifest(dir / "manifest.json", m, rel);
    return m;
}

}  // namespace cvmh
