#pragma once

// AdamW with decoupled weight decay applied before the Adam update.

#include <cmath>
#include <iostream>
#include <vector>

#include "module.hpp"

namespace cvmh {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;

    void validate() const {
        if (lr < 0 || weight_decay < 0) throw ConfigError("lr and weight_decay must be >= 0");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must be in [0,1)");
        if (eps <= 0) throw ConfigError("eps must be positive");
    }
};

template <typename T>
class AdamW {
   public:
    AdamW(ParamSet<T>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
        cfg_.validate();
        for (auto* p : params_->params) {
            m_.emplace_back(p->value.numel(), 0.0);
            v_.emplace_back(p->value.numel(), 0.0);
        }
    }

    /// One update. Parameters without a gradient buffer are skipped (warned once each).
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_->params.size(); ++i) {
            auto& p = *params_->params[i];
            if (!p.value.has_grad()) {
                if (warned_.size() <= i) warned_.resize(params_->params.size(), false);
                if (!warned_[i]) std::cerr << "warning: parameter " << p.name << " has no gradient, skipped\n";
                warned_[i] = true;
                continue;
            }
            auto w = p.value.data();
            auto g = p.value.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            const bool decay = !p.decay_exempt && cfg_.weight_decay > 0;
            for (std::size_t j = 0; j < w.size(); ++j) {
                double x = static_cast<double>(w[j]);
                if (decay) x -= cfg_.lr * cfg_.weight_decay * x;
                const double gj = static_cast<double>(g[j]);
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                x -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
                w[j] = static_cast<T>(x);
            }
        }
    }

    std::uint64_t steps() const { return step_; }
    void set_steps(std::uint64_t s) { step_ = s; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    const AdamWConfig& config() const { return cfg_; }

   private:
    ParamSet<T>* params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> warned_;
    std::uint64_t step_ = 0;
};

}  // namespace cvmh
