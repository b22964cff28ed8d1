#pragma once

// JSON run configuration: model, loss, optimizer, training schedule, data.
// Unknown keys are rejected so typos surface as config errors.

#include <set>
#include <string>

#include <json.hpp>

#include "complexity.hpp"
#include "data_io.hpp"
#include "losses.hpp"
#include "optim.hpp"

namespace cvmh {

using nlohmann::json;

struct TrainConfig {
    std::size_t batch_size = 5;
    std::size_t epochs = 300;
    std::size_t steps = 0;  // > 0 overrides epochs
    TileSpec tile{256, 256};
    AugmentConfig augment;
    std::size_t checkpoint_every = 0;  // periodic checkpoints, 0 = off
    std::size_t log_every = 10;

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (epochs == 0 && steps == 0) throw ConfigError("need epochs or steps > 0");
        tile.validate();
        augment.validate();
    }
};

struct RunConfig {
    NetworkConfig model;
    LossConfig loss;
    AdamWConfig optimizer;
    TrainConfig train;
    std::string manifest;       // training data
    std::string eval_manifest;  // defaults to manifest
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    std::string checkpoint;

    void validate() const {
        model.validate();
        loss.validate();
        optimizer.validate();
        train.validate();
    }
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <typename V>
void read(const json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline json to_json(const NetworkConfig& c) {
    json f = json::array();
    for (const auto& s : c.frequencies.selection) f.push_back({s.u, s.v});
    return {{"embed_dim", c.embed_dim},
            {"in_channels", c.in_channels},
            {"num_classes", c.num_classes},
            {"enc_depths", c.enc_depths},
            {"dec_depths", c.dec_depths},
            {"scan_mode", to_string(c.scan_mode)},
            {"mfms_enabled", c.mfms_enabled},
            {"input_size", {c.input_h, c.input_w}},
            {"ssm_expand", c.ssm_expand},
            {"d_state", c.d_state},
            {"ca_reduction", c.ca_reduction},
            {"effn_ratio", c.effn_ratio},
            {"local_branch", c.local_branch},
            {"paired_residual", c.paired_residual},
            {"zero_init", c.zero_init},
            {"frequencies", f},
            {"kernel_alpha", c.kernel.alpha},
            {"kernel_beta", c.kernel.beta},
            {"mfms_reduction", c.mfms_reduction},
            {"mfms_multi_scale", c.mfms_multi_scale},
            {"mfms_multi_frequency", c.mfms_multi_frequency},
            {"mfms_adaptive_conv", c.mfms_adaptive_conv}};
}

inline NetworkConfig network_from_json(const json& j, NetworkConfig c = {}) {
    using detail::read;
    detail::check_keys(j,
                       {"embed_dim", "in_channels", "num_classes", "enc_depths", "dec_depths", "scan_mode",
                        "mfms_enabled", "input_size", "ssm_expand", "d_state", "ca_reduction", "effn_ratio",
                        "local_branch", "paired_residual", "zero_init", "frequencies", "kernel_alpha", "kernel_beta",
                        "mfms_reduction", "mfms_multi_scale", "mfms_multi_frequency", "mfms_adaptive_conv"},
                       "model");
    read(j, "embed_dim", c.embed_dim);
    read(j, "in_channels", c.in_channels);
    read(j, "num_classes", c.num_classes);
    read(j, "enc_depths", c.enc_depths);
    read(j, "dec_depths", c.dec_depths);
    if (j.contains("scan_mode")) c.scan_mode = parse_scan_mode(j.at("scan_mode").get<std::string>());
    read(j, "mfms_enabled", c.mfms_enabled);
    if (j.contains("input_size")) {
        const auto s = j.at("input_size").get<std::array<std::size_t, 2>>();
        c.input_h = s[0];
        c.input_w = s[1];
    }
    read(j, "ssm_expand", c.ssm_expand);
    read(j, "d_state", c.d_state);
    read(j, "ca_reduction", c.ca_reduction);
    read(j, "effn_ratio", c.effn_ratio);
    read(j, "local_branch", c.local_branch);
    read(j, "paired_residual", c.paired_residual);
    read(j, "zero_init", c.zero_init);
    if (j.contains("frequencies")) {
        const auto& f = j.at("frequencies");
        if (f.is_number()) {
            c.frequencies.selection = default_frequencies(f.get<std::size_t>());
        } else {
            c.frequencies.selection.clear();
            for (const auto& p : f) c.frequencies.selection.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
        }
    }
    read(j, "kernel_alpha", c.kernel.alpha);
    read(j, "kernel_beta", c.kernel.beta);
    read(j, "mfms_reduction", c.mfms_reduction);
    read(j, "mfms_multi_scale", c.mfms_multi_scale);
    read(j, "mfms_multi_frequency", c.mfms_multi_frequency);
    read(j, "mfms_adaptive_conv", c.mfms_adaptive_conv);
    return c;
}

inline json to_json(const RunConfig& r) {
    return {{"model", to_json(r.model)},
            {"loss",
             {{"ce_weight", r.loss.ce_weight},
              {"dice_weight", r.loss.dice_weight},
              {"dice_smooth", r.loss.dice_smooth},
              {"ignore_index", r.loss.ignore_index}}},
            {"optimizer",
             {{"lr", r.optimizer.lr},
              {"weight_decay", r.optimizer.weight_decay},
              {"beta1", r.optimizer.beta1},
              {"beta2", r.optimizer.beta2},
              {"eps", r.optimizer.eps}}},
            {"train",
             {{"batch_size", r.train.batch_size},
              {"epochs", r.train.epochs},
              {"steps", r.train.steps},
              {"tile_size", r.train.tile.size},
              {"tile_stride", r.train.tile.stride},
              {"hflip", r.train.augment.hflip},
              {"vflip", r.train.augment.vflip},
              {"rot90", r.train.augment.rot90},
              {"checkpoint_every", r.train.checkpoint_every},
              {"log_every", r.train.log_every}}},
            {"manifest", r.manifest},
            {"eval_manifest", r.eval_manifest},
            {"seed", r.seed},
            {"output_dir", r.output_dir},
            {"checkpoint", r.checkpoint}};
}

inline RunConfig run_config_from_json(const json& j) {
    using detail::read;
    RunConfig r;
    try {
        detail::check_keys(j, {"model", "loss", "optimizer", "train", "manifest", "eval_manifest", "seed", "output_dir", "checkpoint"},
                           "config");
        if (j.contains("model")) r.model = network_from_json(j.at("model"));
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            detail::check_keys(l, {"ce_weight", "dice_weight", "dice_smooth", "ignore_index"}, "loss");
            read(l, "ce_weight", r.loss.ce_weight);
            read(l, "dice_weight", r.loss.dice_weight);
            read(l, "dice_smooth", r.loss.dice_smooth);
            read(l, "ignore_index", r.loss.ignore_index);
        }
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            detail::check_keys(o, {"lr", "weight_decay", "beta1", "beta2", "eps"}, "optimizer");
            read(o, "lr", r.optimizer.lr);
            read(o, "weight_decay", r.optimizer.weight_decay);
            read(o, "beta1", r.optimizer.beta1);
            read(o, "beta2", r.optimizer.beta2);
            read(o, "eps", r.optimizer.eps);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            detail::check_keys(t, {"batch_size", "epochs", "steps", "tile_size", "tile_stride", "hflip", "vflip", "rot90",
                                   "checkpoint_every", "log_every"},
                               "train");
            read(t, "batch_size", r.train.batch_size);
            read(t, "epochs", r.train.epochs);
            read(t, "steps", r.train.steps);
            read(t, "tile_size", r.train.tile.size);
            r.train.tile.stride = r.train.tile.size;
            read(t, "tile_stride", r.train.tile.stride);
            read(t, "hflip", r.train.augment.hflip);
            read(t, "vflip", r.train.augment.vflip);
            read(t, "rot90", r.train.augment.rot90);
            read(t, "checkpoint_every", r.train.checkpoint_every);
            read(t, "log_every", r.train.log_every);
        }
        read(j, "manifest", r.manifest);
        read(j, "eval_manifest", r.eval_manifest);
        read(j, "seed", r.seed);
        read(j, "output_dir", r.output_dir);
        read(j, "checkpoint", r.checkpoint);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return r;
}

/// Reads a config file; relative manifest paths resolve against its directory.
inline RunConfig load_run_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(detail::read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    auto r = run_config_from_json(j);
    auto resolve = [&](std::string& p) {
        if (!p.empty() && fs::path(p).is_relative()) p = (path.parent_path() / p).lexically_normal().string();
    };
    resolve(r.manifest);
    resolve(r.eval_manifest);
    return r;
}

}  // namespace cvmh
