// cvmh: train / eval / predict / bench / gradcheck / inspect / synth.
// Exit codes: 0 ok, 2 config or usage error, 3 numerical failure, 4 IO error.

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cvmh/runner.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps, batch_size, epochs, tile;
    std::optional<double> lr;
    std::optional<std::string> output, manifest, scan;

    void apply(cvmh::RunConfig& c) const {
        if (seed) c.seed = *seed;
        if (steps) c.train.steps = *steps;
        if (epochs) c.train.epochs = *epochs;
        if (batch_size) c.train.batch_size = *batch_size;
        if (tile) c.train.tile = {*tile, *tile};
        if (lr) c.optimizer.lr = *lr;
        if (output) c.output_dir = *output;
        if (manifest) c.manifest = *manifest;
        if (scan) c.model.scan_mode = cvmh::parse_scan_mode(*scan);
    }
};

cvmh::RunConfig load(const std::string& path, const Overrides& o) {
    cvmh::RunConfig c = path.empty() ? cvmh::RunConfig{} : cvmh::load_run_config(path);
    o.apply(c);
    return c;
}

void print(const cvmh::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-scan vision state-space U-Net with multi-frequency multi-scale fusion"};
    app.require_subcommand(1);
    std::optional<std::size_t> threads;
    app.add_option("--threads", threads, "kernel threads (overrides CVMH_THREADS)")->check(CLI::PositiveNumber);

    std::string config, checkpoint, image, out, pred_dir, resume, filter;
    Overrides ov;

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config, "run config JSON");
        c->add_option("--seed", ov.seed, "random seed");
        c->add_option("--manifest", ov.manifest, "dataset manifest JSON");
        c->add_option("--output", ov.output, "output directory");
        c->add_option("--tile", ov.tile, "tile size (multiple of 32)");
    };

    auto* train = app.add_subcommand("train", "train a model; writes loss.csv and checkpoints");
    add_common(train);
    train->add_option("--steps", ov.steps, "optimizer steps (overrides epochs)");
    train->add_option("--epochs", ov.epochs, "epochs");
    train->add_option("--batch-size", ov.batch_size, "batch size");
    train->add_option("--lr", ov.lr, "learning rate");
    train->add_option("--scan", ov.scan, "scan mode ss2d|cs2d");
    train->add_option("--resume", resume, "checkpoint to resume from (needs its .opt sidecar)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes metrics.json");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--predictions", pred_dir, "directory for palette PPM predictions");

    auto* predict = app.add_subcommand("predict", "predict one image to a palette PPM");
    add_common(predict);
    predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    predict->add_option("--image", image, "input PPM or CVTN image")->required();
    predict->add_option("--out", out, "output PPM")->required();

    std::size_t size = 256, repeats = 1;
    bool no_timing = false;
    auto* bench = app.add_subcommand("bench", "parameter / FLOP counts for both scan modes, forward timing");
    bench->add_option("--config", config, "run config JSON (default model if absent)");
    bench->add_option("--scan", ov.scan, "scan mode to time")->check(CLI::IsMember({"ss2d", "cs2d"}));
    bench->add_option("--size", size, "input height and width");
    bench->add_option("--repeats", repeats, "timed forward passes (best reported)");
    bench->add_flag("--no-timing", no_timing, "analytic counts only");

    std::size_t seeds = 5;
    std::uint64_t base_seed = 1;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite (64-bit)");
    grad->add_option("--seeds", seeds, "seeds per block");
    grad->add_option("--seed", base_seed, "first seed");
    grad->add_option("--filter", filter, "only cases whose name contains this");

    auto* inspect = app.add_subcommand("inspect", "print the stage plan and complexity");
    inspect->add_option("--config", config, "run config JSON");
    inspect->add_option("--size", size, "input height and width");

    std::string synth_out;
    std::uint64_t synth_seed = 7;
    std::size_t synth_n = 8, synth_size = 64, synth_classes = 4;
    auto* synth = app.add_subcommand("synth", "generate the synthetic shapes dataset");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_seed, "seed");
    synth->add_option("--n", synth_n, "number of images");
    synth->add_option("--size", synth_size, "image size (multiple of 32)");
    synth->add_option("--classes", synth_classes, "number of classes (2..6)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (threads) cvmh::set_num_threads(*threads);
        if (*train) {
            auto c = load(config, ov);
            print(cvmh::cmd_train(c, {resume, &std::cerr}));
        } else if (*eval) {
            print(cvmh::cmd_eval(load(config, ov), checkpoint, pred_dir));
        } else if (*predict) {
            print(cvmh::cmd_predict(load(config, ov), checkpoint, image, out));
        } else if (*bench) {
            auto c = load(config, {});
            std::optional<cvmh::ScanMode> timed;
            if (!no_timing) timed = ov.scan ? cvmh::parse_scan_mode(*ov.scan) : c.model.scan_mode;
            print(cvmh::cmd_bench(c.model, size, size, timed, repeats));
        } else if (*grad) {
            const auto rep = cvmh::cmd_gradcheck(seeds, base_seed, filter);
            print(rep);
            if (!rep.at("ok").get<bool>()) {
                for (const auto& f : rep.at("failures")) std::cerr << "gradcheck failure: " << f.get<std::string>() << "\n";
                return kExitNumerical;
            }
        } else if (*inspect) {
            print(cvmh::cmd_inspect(load(config, {}).model, size, size));
        } else if (*synth) {
            print(cvmh::cmd_synth(synth_out, synth_seed, synth_n, synth_size, synth_classes));
        }
    } catch (const cvmh::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const cvmh::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const cvmh::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    }
    return 0;
}
