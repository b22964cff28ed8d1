#pragma once

// Command implementations behind the CLI: train, eval, predict, bench,
// gradcheck, inspect, synth. Each returns a JSON report and throws
// ConfigError / NumericalError / IoError on failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include "checkpoint.hpp"
#include "config.hpp"
#include "gradcheck.hpp"
#include "metrics.hpp"
#include "network.hpp"

namespace cvmh {

/// splitmix64 finalizer; derives independent stream seeds from (seed, a, b).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Model config sidecar written next to every checkpoint (last.cvck -> last.json).
inline fs::path sidecar(const fs::path& ckpt, const char* ext) { return fs::path(ckpt).replace_extension(ext); }

inline void save_model_sidecar(const fs::path& ckpt, const NetworkConfig& model, std::uint64_t step, double best_loss) {
    json j{{"model", to_json(model)}, {"step", step}, {"best_loss", best_loss}};
    detail::write_file(sidecar(ckpt, ".json"), j.dump(2) + "\n");
}

/// Model config stored with a checkpoint, or `fallback` when there is none.
inline NetworkConfig checkpoint_model(const fs::path& ckpt, const NetworkConfig& fallback) {
    const auto p = sidecar(ckpt, ".json");
    if (!fs::exists(p)) return fallback;
    try {
        return network_from_json(json::parse(detail::read_file(p)).at("model"));
    } catch (const json::exception& e) {
        throw IoError("checkpoint sidecar " + p.string() + ": " + e.what());
    }
}

inline int effective_ignore(const LossConfig& loss, const DatasetManifest& m) {
    return loss.ignore_index >= 0 ? loss.ignore_index : m.ignore_index;
}

inline DatasetManifest checked_manifest(const std::string& path, const NetworkConfig& model) {
    if (path.empty()) throw ConfigError("no dataset manifest given");
    auto m = load_manifest(path);
    if (m.num_classes != model.num_classes)
        throw ConfigError("manifest has " + std::to_string(m.num_classes) + " classes, model has " +
                          std::to_string(model.num_classes));
    return m;
}

/// Palette with at least K entries: manifest colours first, then a fixed
/// pseudo-random extension.
inline std::vector<Color> palette_for(std::size_t K, std::vector<Color> base) {
    if (base.empty()) base = default_palette();
    Rng rng(12345);
    while (base.size() < K)
        base.push_back({static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint8_t>(rng.below(256)),
                        static_cast<std::uint8_t>(rng.below(256))});
    return base;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
    std::string resume;          // checkpoint to continue from
    std::ostream* log = &std::cerr;
};

struct LossRow {
    std::uint64_t step;
    double ce, dice, total;
};

inline std::string format_loss_row(const LossRow& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g", static_cast<unsigned long long>(r.step), r.ce, r.dice, r.total);
    return buf;
}

/// Trains from a manifest. Writes loss.csv (step,ce,dice,total), best.cvck on
/// epoch-mean improvement, step_NNNNNN.cvck every checkpoint_every steps and
/// last.cvck (+ last.opt optimizer state) at the end.
inline json cmd_train(const RunConfig& cfg, const TrainOptions& opts = {}) {
    cfg.validate();
    const auto manifest = checked_manifest(cfg.manifest, cfg.model);
    const int ignore = effective_ignore(cfg.loss, manifest);
    LossConfig loss_cfg = cfg.loss;
    loss_cfg.ignore_index = ignore;

    std::vector<Sample> pool;
    for (const auto& s : load_dataset(manifest))
        for (auto& t : tile(s, cfg.train.tile, ignore)) pool.push_back(std::move(t.sample));
    if (pool.empty()) throw ConfigError("training set is empty");

    CvmhUNet<float> net(cfg.model, cfg.seed);
    AdamW<float> opt(net.params(), cfg.optimizer);
    const fs::path out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    double best = std::numeric_limits<double>::infinity();
    if (!opts.resume.empty()) {
        load_checkpoint(opts.resume, net.params());
        load_optimizer(sidecar(opts.resume, ".opt"), opt, net.params());
        const auto sc = sidecar(opts.resume, ".json");
        if (fs::exists(sc)) {
            const auto j = json::parse(detail::read_file(sc));
            if (j.contains("best_loss") && j.at("best_loss").is_number()) best = j.at("best_loss").get<double>();
        }
    }
    detail::write_file(out_dir / "config.json", to_json(cfg).dump(2) + "\n");

    const std::size_t B = cfg.train.batch_size;
    const std::size_t per_epoch = (pool.size() + B - 1) / B;
    const std::uint64_t total_steps = cfg.train.steps > 0 ? cfg.train.steps : cfg.train.epochs * per_epoch;
    const std::uint64_t first = opt.steps();
    if (first > total_steps)
        throw ConfigError("checkpoint is at step " + std::to_string(first) + ", beyond the requested " +
                          std::to_string(total_steps));

    std::ofstream csv(out_dir / "loss.csv", first == 0 ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot write " + (out_dir / "loss.csv").string());
    if (first == 0) csv << "step,ce,dice,total\n";

    std::vector<std::size_t> order;
    std::uint64_t order_epoch = ~0ULL;
    double epoch_sum = 0;
    std::size_t epoch_n = 0;
    LossRow last{};
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t step = first; step < total_steps; ++step) {
        const std::uint64_t epoch = step / per_epoch, pos = step % per_epoch;
        if (epoch != order_epoch) {
            // the epoch's permutation depends only on (seed, epoch), so resumed runs see the same order
            Rng prng(mix_seed(cfg.seed, 1, epoch));
            order.resize(pool.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[prng.below(i)]);
            order_epoch = epoch;
        }
        std::vector<Sample> batch;
        for (std::size_t k = pos * B; k < std::min(pool.size(), (pos + 1) * B); ++k) {
            batch.push_back(pool[order[k]]);
            Rng arng(mix_seed(cfg.seed, 2 + step, k));
            augment(batch.back(), cfg.train.augment, arng);
        }
        std::vector<const Sample*> ptrs;
        for (const auto& s : batch) ptrs.push_back(&s);
        auto [x, y] = make_batch<float>(ptrs, manifest.mean, manifest.std);

        net.params().zero_grad();
        auto logits = net.forward(x, true);
        auto parts = segmentation_loss<float>(logits, y, loss_cfg);
        const double total = static_cast<double>(parts.total.item());
        if (!std::isfinite(total))
            throw NumericalError("non-finite loss at step " + std::to_string(step + 1) + " (ce " +
                                 std::to_string(parts.ce) + ", dice " + std::to_string(parts.dice) + ")");
        backward(parts.total);
        opt.step();

        last = {step + 1, parts.ce, parts.dice, total};
        csv << format_loss_row(last) << '\n';
        epoch_sum += total;
        ++epoch_n;
        if (opts.log && cfg.train.log_every && (step + 1) % cfg.train.log_every == 0) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            *opts.log << "step " << step + 1 << "/" << total_steps << " ce " << parts.ce << " dice " << parts.dice
                      << " total " << total << " (" << secs << " s)\n";
        }
        if (pos + 1 == per_epoch || step + 1 == total_steps) {
            const double mean = epoch_sum / static_cast<double>(epoch_n);
            epoch_sum = 0;
            epoch_n = 0;
            if (mean < best) {
                best = mean;
                save_checkpoint(out_dir / "best.cvck", net.params());
                save_model_sidecar(out_dir / "best.cvck", cfg.model, step + 1, best);
            }
        }
        if (cfg.train.checkpoint_every && (step + 1) % cfg.train.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "step_%06llu.cvck", static_cast<unsigned long long>(step + 1));
            save_checkpoint(out_dir / name, net.params());
            save_model_sidecar(out_dir / name, cfg.model, step + 1, best);
        }
    }
    csv.flush();
    save_checkpoint(out_dir / "last.cvck", net.params());
    save_optimizer(sidecar(out_dir / "last.cvck", ".opt"), opt, net.params());
    save_model_sidecar(out_dir / "last.cvck", cfg.model, opt.steps(), best);
    return {{"steps", opt.steps()},
            {"final", {{"ce", last.ce}, {"dice", last.dice}, {"total", last.total}}},
            {"best_epoch_loss", std::isfinite(best) ? json(best) : json(nullptr)},
            {"tiles", pool.size()},
            {"output_dir", out_dir.string()}};
}

// ---------------------------------------------------------------- inference

/// Tiles an image at stride = tile size, predicts every tile and stitches the
/// class map back to the original extent.
template <typename T>
std::vector<std::int32_t> predict_map(CvmhUNet<T>& net, const Sample& s, std::size_t tile_size,
                                      const std::array<float, 3>& mean, const std::array<float, 3>& stdev,
                                      std::size_t batch = 4) {
    NoGradGuard ng;
    const TileSpec spec{tile_size, tile_size};
    const auto tiles = tile(s, spec, -1);
    std::vector<std::vector<std::int32_t>> preds;
    for (std::size_t i = 0; i < tiles.size(); i += batch) {
        std::vector<const Sample*> ptrs;
        for (std::size_t k = i; k < std::min(tiles.size(), i + batch); ++k) ptrs.push_back(&tiles[k].sample);
        auto [x, y] = make_batch<T>(ptrs, mean, stdev);
        const auto cls = argmax_classes(net.forward(x, false));
        const std::size_t P = tile_size * tile_size;
        for (std::size_t k = 0; k < ptrs.size(); ++k)
            preds.emplace_back(cls.begin() + static_cast<std::ptrdiff_t>(k * P),
                               cls.begin() + static_cast<std::ptrdiff_t>((k + 1) * P));
    }
    return stitch(tiles, preds, tile_size, s.height, s.width);
}

/// Evaluates a checkpoint on the eval manifest; writes metrics.json under the
/// output dir and, if pred_dir is set, one palette PPM per image.
inline json cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& pred_dir = "") {
    if (checkpoint.empty()) throw ConfigError("eval needs a checkpoint");
    if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
    const auto model = checkpoint_model(checkpoint, cfg.model);
    const auto manifest =
        checked_manifest(cfg.eval_manifest.empty() ? cfg.manifest : cfg.eval_manifest, model);
    const int ignore = effective_ignore(cfg.loss, manifest);
    CvmhUNet<float> net(model, cfg.seed);
    load_checkpoint(checkpoint, net.params());
    const auto palette = palette_for(model.num_classes, manifest.palette);

    ConfusionMatrix cm(model.num_classes);
    std::size_t idx = 0;
    for (const auto& [img_path, lab_path] : manifest.pairs) {
        const auto s = load_pair(img_path, lab_path);
        const auto pred = predict_map(net, s, cfg.train.tile.size, manifest.mean, manifest.std);
        cm.add(s.labels, pred, ignore);
        if (!pred_dir.empty())
            write_pnm(fs::path(pred_dir) / (img_path.stem().string() + "_pred.ppm"),
                      colorize(pred, s.height, s.width, palette));
        ++idx;
    }
    auto report = metrics_json(compute_metrics(cm, ignore), manifest.class_names);
    report["checkpoint"] = checkpoint;
    report["images"] = idx;
    report["confusion"] = cm.counts();
    fs::create_directories(cfg.output_dir);
    detail::write_file(fs::path(cfg.output_dir) / "metrics.json", report.dump(2) + "\n");
    return report;
}

inline json cmd_predict(const RunConfig& cfg, const std::string& checkpoint, const std::string& image,
                        const std::string& out) {
    if (checkpoint.empty() || image.empty() || out.empty())
        throw ConfigError("predict needs --checkpoint, --image and --out");
    const auto model = checkpoint_model(checkpoint, cfg.model);
    std::vector<Color> base;
    std::array<float, 3> mean{0.5f, 0.5f, 0.5f}, stdev{0.25f, 0.25f, 0.25f};
    if (!cfg.manifest.empty()) {
        const auto m = checked_manifest(cfg.manifest, model);
        base = m.palette;
        mean = m.mean;
        stdev = m.std;
    }
    CvmhUNet<float> net(model, cfg.seed);
    load_checkpoint(checkpoint, net.params());
    Sample s = load_image(image);
    s.labels.assign(s.height * s.width, -1);
    const auto pred = predict_map(net, s, cfg.train.tile.size, mean, stdev);
    write_pnm(out, colorize(pred, s.height, s.width, palette_for(model.num_classes, base)));
    return {{"image", image}, {"out", out}, {"height", s.height}, {"width", s.width}};
}

// ---------------------------------------------------------------- analysis

inline json complexity_json(const Complexity& k) {
    return {{"params", k.params}, {"flops", k.flops()}, {"flops_2x", k.flops_2x()}, {"scan_macs", k.scan_macs}};
}

/// Analytic counts for both scan modes (asserting parity), the MFMS
/// parameter delta and, optionally, the wall time of one forward pass.
inline json cmd_bench(const NetworkConfig& model, std::size_t H, std::size_t W, std::optional<ScanMode> timed,
                      std::size_t repeats = 1) {
    NetworkConfig ss = model, cs = model;
    ss.scan_mode = ScanMode::SS2D;
    cs.scan_mode = ScanMode::CS2D;
    const auto kss = complexity(ss, H, W), kcs = complexity(cs, H, W);
    const bool parity = kss.params == kcs.params && kss.macs == kcs.macs && kss.scan_macs == kcs.scan_macs;
    NetworkConfig off = model;
    off.mfms_enabled = !model.mfms_enabled;
    const auto koff = complexity(off, H, W);
    const auto kmodel = complexity(model, H, W);
    json rep{{"input", {model.in_channels, H, W}},
             {"ss2d", complexity_json(kss)},
             {"cs2d", complexity_json(kcs)},
             {"parity", parity},
             {"mfms_param_delta",
              model.mfms_enabled ? std::int64_t(kmodel.params) - std::int64_t(koff.params)
                                 : std::int64_t(koff.params) - std::int64_t(kmodel.params)}};
    if (timed) {
        NetworkConfig tc = model;
        tc.scan_mode = *timed;
        CvmhUNet<float> net(tc, 0);
        Rng rng(0);
        std::vector<float> xv(model.in_channels * H * W);
        for (auto& v : xv) v = static_cast<float>(rng.uniform(-1, 1));
        const auto x = Tensor<float>::from({1, model.in_channels, H, W}, std::move(xv));
        NoGradGuard ng;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            (void)net.forward(x, false);
            best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
        rep["forward_seconds"] = {{to_string(*timed), best}};
        rep["threads"] = num_threads();
    }
    if (!parity) throw NumericalError("scan-mode parity violated: " + rep.dump());
    return rep;
}

inline json cmd_inspect(const NetworkConfig& model, std::size_t H, std::size_t W) {
    model.validate();
    const auto plan = StagePlan::of(model, H, W);
    json stages = json::array();
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& s = plan.stages[i];
        const std::uint64_t L = std::uint64_t(s.h) * s.w;
        const auto blk = count::cvss_block(model.block_config(s.dim), L);
        json st{{"stage", i},
                {"dim", s.dim},
                {"resolution", {s.h, s.w}},
                {"encoder_blocks", model.enc_depths[i]},
                {"decoder_blocks", model.dec_depths[3 - i]},
                {"block_params", blk.params},
                {"block_flops", blk.flops()}};
        if (model.mfms_enabled) {
            const auto mcfg = model.mfms_config(s.dim);
            st["mfms_params"] = count::mfms_block(mcfg, L).params;
            st["mfms_kernel"] = mcfg.adaptive_conv ? adaptive_kernel_size(s.dim, mcfg.kernel) : 0;
        }
        stages.push_back(st);
    }
    const auto k = complexity(model, H, W);
    return {{"model", to_json(model)},
            {"input", {model.in_channels, H, W}},
            {"stages", stages},
            {"decoder_order", "deepest first; decoder stage j runs at encoder stage 3-j"},
            {"totals", complexity_json(k)}};
}

inline json cmd_gradcheck(std::size_t seeds, std::uint64_t base_seed, const std::string& filter) {
    const auto rep = run_gradcheck_suite(seeds, base_seed, filter);
    json results = json::array();
    for (const auto& r : rep.results)
        results.push_back({{"op", r.op},
                           {"seed", r.seed},
                           {"rel_error", r.rel_error},
                           {"max_abs_error", r.max_abs_error},
                           {"grad_scale", r.grad_scale},
                           {"entries", r.entries},
                           {"passed", r.passed}});
    return {{"tolerance", GradCheckOptions{}.tol}, {"results", results}, {"failures", rep.failures}, {"ok", rep.ok()}};
}

inline json cmd_synth(const std::string& out, std::uint64_t seed, std::size_t n, std::size_t size,
                      std::size_t classes) {
    const auto m = synth_generate(out, seed, n, size, classes);
    return {{"manifest", (fs::path(out) / "manifest.json").string()}, {"images", m.pairs.size()},
            {"size", size}, {"num_classes", classes}, {"seed", seed}};
}

}  // namespace cvmh
