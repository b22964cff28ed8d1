#pragma once

// Parameters, deterministic initialization and the basic trainable layers.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "conv.hpp"
#include "norm.hpp"
#include "ops.hpp"

namespace cvmh {

/// Seeded generator with platform-independent uniform/normal draws.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }
    std::uint64_t next() { return engine_(); }
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

   private:
    std::mt19937_64 engine_;
};

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    bool decay_exempt = false;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool exempt) : name(std::move(n)), value(std::move(v)), decay_exempt(exempt) {
        value.set_requires_grad(true);
    }
};

/// Non-trainable state saved with a checkpoint (batch-norm running stats).
template <typename T>
struct Buffer {
    std::string name;
    std::vector<T>* values;
};

template <typename T>
struct ParamSet {
    std::vector<Parameter<T>*> params;
    std::vector<Buffer<T>> buffers;

    void add(Parameter<T>& p) { params.push_back(&p); }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto* p : params) n += p->value.numel();
        return n;
    }

    /// Throws if two parameters share a name.
    void check_unique() const {
        std::unordered_set<std::string> names;
        for (const auto* p : params)
            if (!names.insert(p->name).second) throw ConfigError("duplicate parameter name " + p->name);
    }

    void zero_grad() {
        for (auto* p : params) p->value.zero_grad();
    }
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from(std::move(shape), std::move(v));
}

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
    return prefix.empty() ? leaf : prefix + "." + leaf;
}

// ---------------------------------------------------------------- layers

/// Affine map. `last` applies it over the trailing axis, `channels` over axis 1
/// of an [N,C,...] map (a point-wise convolution).
template <typename T>
class Linear {
   public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, bool bias, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight_ = Parameter<T>(join_name(name, "weight"), uniform_tensor<T>({out, in}, bound, rng), false);
        if (bias) bias_ = Parameter<T>(join_name(name, "bias"), uniform_tensor<T>({out}, bound, rng), true);
    }

    Tensor<T> last(const Tensor<T>& x) const { return ops::linear(x, weight_.value, bias_tensor()); }
    Tensor<T> channels(const Tensor<T>& x) const { return ops::pointwise(x, weight_.value, bias_tensor()); }

    void zero_() {
        std::fill(weight_.value.values().begin(), weight_.value.values().end(), T(0));
        if (bias_.value.defined()) std::fill(bias_.value.values().begin(), bias_.value.values().end(), T(0));
    }

    void collect(ParamSet<T>& out) {
        out.add(weight_);
        if (bias_.value.defined()) out.add(bias_);
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    std::size_t in_features() const { return weight_.value.dim(1); }
    std::size_t out_features() const { return weight_.value.dim(0); }

   private:
    Tensor<T> bias_tensor() const { return bias_.value.defined() ? bias_.value : Tensor<T>(); }
    Parameter<T> weight_;
    Parameter<T> bias_;
};

template <typename T>
class Conv2d {
   public:
    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
           std::size_t pad, bool bias, Rng& rng)
        : stride_(stride), pad_(pad) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
        weight_ = Parameter<T>(join_name(name, "weight"), uniform_tensor<T>({cout, cin, k, k}, bound, rng), false);
        if (bias) bias_ = Parameter<T>(join_name(name, "bias"), uniform_tensor<T>({cout}, bound, rng), true);
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return ops::conv2d(x, weight_.value, bias_.value.defined() ? bias_.value : Tensor<T>(), stride_, pad_);
    }

    void zero_() {
        std::fill(weight_.value.values().begin(), weight_.value.values().end(), T(0));
        if (bias_.value.defined()) std::fill(bias_.value.values().begin(), bias_.value.values().end(), T(0));
    }

    void collect(ParamSet<T>& out) {
        out.add(weight_);
        if (bias_.value.defined()) out.add(bias_);
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }

   private:
    Parameter<T> weight_;
    Parameter<T> bias_;
    std::size_t stride_ = 1, pad_ = 0;
};

/// k x k per-channel convolution with "same" padding.
template <typename T>
class DepthwiseConv2d {
   public:
    DepthwiseConv2d() = default;
    DepthwiseConv2d(const std::string& name, std::size_t channels, std::size_t k, Rng& rng) : pad_(k / 2) {
        if (k % 2 == 0) throw ConfigError("depthwise kernel must be odd for same padding");
        const double bound = 1.0 / std::sqrt(static_cast<double>(k * k));
        weight_ =
            Parameter<T>(join_name(name, "weight"), uniform_tensor<T>({channels, 1, k, k}, bound, rng), false);
        bias_ = Parameter<T>(join_name(name, "bias"), uniform_tensor<T>({channels}, bound, rng), true);
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return ops::depthwise_conv2d(x, weight_.value, bias_.value, 1, pad_);
    }

    void collect(ParamSet<T>& out) {
        out.add(weight_);
        out.add(bias_);
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }

   private:
    Parameter<T> weight_;
    Parameter<T> bias_;
    std::size_t pad_ = 1;
};

/// Length-preserving single-filter convolution along a channel descriptor.
template <typename T>
class Conv1d {
   public:
    Conv1d() = default;
    Conv1d(const std::string& name, std::size_t phi, Rng& rng) {
        if (phi % 2 == 0) throw ConfigError("conv1d kernel length must be odd");
        const double bound = 1.0 / std::sqrt(static_cast<double>(phi));
        weight_ = Parameter<T>(join_name(name, "weight"), uniform_tensor<T>({1, 1, phi}, bound, rng), false);
        bias_ = Parameter<T>(join_name(name, "bias"), uniform_tensor<T>({1}, bound, rng), true);
    }

    /// x: [N, C] -> [N, C]
    Tensor<T> operator()(const Tensor<T>& x) const {
        const std::size_t N = x.dim(0), C = x.dim(1);
        return ops::reshape(ops::conv1d(ops::reshape(x, {N, 1, C}), weight_.value, bias_.value), {N, C});
    }

    void zero_() {
        std::fill(weight_.value.values().begin(), weight_.value.values().end(), T(0));
        std::fill(bias_.value.values().begin(), bias_.value.values().end(), T(0));
    }

    void collect(ParamSet<T>& out) {
        out.add(weight_);
        out.add(bias_);
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    std::size_t kernel_size() const { return weight_.value.dim(2); }

   private:
    Parameter<T> weight_;
    Parameter<T> bias_;
};

template <typename T>
class LayerNorm {
   public:
    LayerNorm() = default;
    LayerNorm(const std::string& name, std::size_t n)
        : gamma_(join_name(name, "weight"), Tensor<T>::ones({n}), true),
          beta_(join_name(name, "bias"), Tensor<T>::zeros({n}), true) {}

    Tensor<T> operator()(const Tensor<T>& x, std::size_t axis) const {
        return ops::layer_norm(x, gamma_.value, beta_.value, axis);
    }
    /// Over the channel axis of an NCHW map.
    Tensor<T> channels(const Tensor<T>& x) const { return (*this)(x, 1); }

    void collect(ParamSet<T>& out) {
        out.add(gamma_);
        out.add(beta_);
    }

   private:
    Parameter<T> gamma_;
    Parameter<T> beta_;
};

template <typename T>
class BatchNorm {
   public:
    BatchNorm() = default;
    BatchNorm(const std::string& name, std::size_t c)
        : name_(name),
          gamma_(join_name(name, "weight"), Tensor<T>::ones({c}), true),
          beta_(join_name(name, "bias"), Tensor<T>::zeros({c}), true),
          stats_(c) {}

    Tensor<T> operator()(const Tensor<T>& x, bool training) {
        return ops::batch_norm(x, gamma_.value, beta_.value, stats_, training);
    }

    void collect(ParamSet<T>& out) {
        out.add(gamma_);
        out.add(beta_);
        out.buffers.push_back({join_name(name_, "running_mean"), &stats_.mean});
        out.buffers.push_back({join_name(name_, "running_var"), &stats_.var});
    }

    ops::BatchNormStats<T>& stats() { return stats_; }

   private:
    std::string name_;
    Parameter<T> gamma_;
    Parameter<T> beta_;
    ops::BatchNormStats<T> stats_;
};

}  // namespace cvmh
