// flowpred: batch command-line front end for the motion-prediction toolkit.
//
// Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
// inconsistent inputs), 3 numeric failure (training loss became NaN/Inf).

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flowpred/flowpred.hpp"

namespace fp = flowpred;
namespace fs = std::filesystem;

namespace {

// Shared --config/--preset/--seed/--iters/--clusters/--grid handling. Flags
// override config file values; the config file overrides preset defaults.
struct ModelFlags {
    std::string config_path;
    std::string preset = "paper";
    bool preset_given = false;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int iters = 0;
    int clusters = 0;
    std::string grid;
    std::string augment = "config";

    void attach(CLI::App* cmd, const std::string& default_preset = "paper") {
        preset = default_preset;
        cmd->add_option("--config", config_path, "model config file (key = value lines)");
        cmd->add_option("--preset", preset, "architecture preset")
            ->check(CLI::IsMember({"paper", "tiny"}))
            ->capture_default_str();
        cmd->add_option("--seed", seed, "RNG seed override")->capture_default_str();
        cmd->add_option("--iters", iters, "override max training iterations (0 = config value)")
            ->capture_default_str();
        cmd->add_option("--clusters", clusters, "override cluster count (0 = config value)")
            ->capture_default_str();
        cmd->add_option("--grid", grid, "override output grid as MxN (empty = config value)")
            ->capture_default_str();
        cmd->add_option("--augment", augment, "augmentation override")
            ->check(CLI::IsMember({"config", "on", "off"}))
            ->capture_default_str();
        cmd->callback([this, cmd] {
            preset_given = cmd->count("--preset") > 0;
            seed_given = cmd->count("--seed") > 0;
        });
    }

    fp::ModelConfig resolve() const {
        fp::ModelConfig cfg;
        if (!config_path.empty())
            cfg = fp::parse_config_file(config_path, preset_given ? preset : "");
        else
            cfg = fp::preset_by_name(preset);
        if (seed_given) cfg.sgd.seed = seed;
        if (iters > 0) cfg.sgd.max_iters = iters;
        if (clusters > 0) cfg.clusters = clusters;
        if (!grid.empty()) {
            int m = 0, n = 0;
            char x = 0;
            std::istringstream ss(grid);
            if (ss >> m && ss >> x && x == 'x' && ss >> n && m > 0 && n > 0) {
                cfg.grid_m = m;
                cfg.grid_n = n;
            } else if (m > 0 && x == 0) {
                cfg.grid_m = cfg.grid_n = m;
            } else {
                throw fp::DataError("--grid expects MxN or a single integer, got '" + grid + "'");
            }
        }
        if (augment == "on") cfg.augment = true;
        if (augment == "off") cfg.augment = false;
        cfg.sgd.validate();
        return cfg;
    }
};

std::string sibling_path(const std::string& base, const std::string& suffix) {
    fs::path p(base);
    return (p.parent_path() / (p.stem().string() + suffix)).string();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trainable dense motion prediction from a single image"};
    app.require_subcommand(1);

    // ---- synth ------------------------------------------------------------
    struct {
        std::string out;
        int count = 200, size = 64, frames = 5;
        double speed = 3.0;
        bool vertical = false;
        std::uint64_t seed = 1;
    } synth;
    {
        auto* cmd = app.add_subcommand(
            "synth", "generate a texture-cue sprite dataset with exact ground-truth flow");
        cmd->add_option("--out", synth.out, "output directory")->required();
        cmd->add_option("--count", synth.count, "number of scenes")->capture_default_str();
        cmd->add_option("--size", synth.size, "canvas size in pixels")->capture_default_str();
        cmd->add_option("--frames", synth.frames, "frames (and flow files) per scene")
            ->capture_default_str();
        cmd->add_option("--speed", synth.speed, "sprite speed in pixels/frame")
            ->capture_default_str();
        cmd->add_flag("--vertical", synth.vertical, "move sprites vertically instead")
            ->capture_default_str();
        cmd->add_option("--seed", synth.seed, "RNG seed")->capture_default_str();
        cmd->callback([&] {
            fp::CueDatasetOptions opt;
            opt.count = synth.count;
            opt.size = synth.size;
            opt.frames = synth.frames;
            opt.speed = synth.speed;
            opt.vertical = synth.vertical;
            opt.seed = synth.seed;
            auto paths = fp::write_cue_dataset(synth.out, opt);
            std::cout << "synth: " << synth.count << " scenes, manifest " << paths.manifest
                      << ", sequences " << paths.sequence_manifest << "\n";
        });
    }

    // ---- codebook ----------------------------------------------------------
    struct {
        ModelFlags model;
        std::string manifest, out;
    } cb;
    {
        auto* cmd = app.add_subcommand(
            "codebook", "k-means flow codebook from the cell means of training labels");
        cmd->add_option("--manifest", cb.manifest, "training manifest")->required();
        cmd->add_option("--out", cb.out, "output codebook file")->required();
        cb.model.attach(cmd);
        cmd->final_callback([&] {
            auto cfg = cb.model.resolve();
            auto entries = fp::load_manifest(cb.manifest);
            auto samples = fp::collect_label_samples(cfg, entries, std::cerr, 1000000,
                                                     cfg.sgd.seed);
            auto codebook = fp::build_codebook(samples, cfg.clusters, cfg.sgd.seed);
            fp::save_codebook(codebook, cb.out);
            std::cout << "codebook: " << codebook.size() << " centers from " << samples.size()
                      << " samples -> " << cb.out << "\n";
        });
    }

    // ---- frame-codebook ------------------------------------------------------
    struct {
        ModelFlags model;
        std::string manifest, out;
    } fcb;
    {
        auto* cmd = app.add_subcommand(
            "frame-codebook", "k-means codebook of whole coarse flow frames (sequence manifest)");
        cmd->add_option("--manifest", fcb.manifest, "sequence manifest")->required();
        cmd->add_option("--out", fcb.out, "output frame codebook file")->required();
        fcb.model.attach(cmd);
        cmd->final_callback([&] {
            auto cfg = fcb.model.resolve();
            const int k = fcb.model.clusters > 0 ? fcb.model.clusters : 1000;
            auto entries = fp::load_manifest(fcb.manifest);
            std::vector<fp::FlowField> frames;
            int skipped = 0;
            for (const auto& e : entries) {
                try {
                    for (const auto& p : e.flow_paths)
                        frames.push_back(
                            fp::cell_mean_field(fp::read_flo(p), cfg.grid_m, cfg.grid_n));
                } catch (const fp::DataError& err) {
                    ++skipped;
                    std::cerr << "skipping " << e.image_path << ": " << err.what() << "\n";
                }
            }
            if (frames.empty()) throw fp::DataError("no flow frames could be loaded");
            auto codebook = fp::build_frame_codebook(frames, k, cfg.sgd.seed);
            fp::save_frame_codebook(codebook, fcb.out);
            std::cout << "frame-codebook: " << codebook.size() << " centroids ("
                      << codebook.m << "x" << codebook.n << ") from " << frames.size()
                      << " frames -> " << fcb.out << "\n";
        });
    }

    // ---- train ---------------------------------------------------------------
    struct {
        ModelFlags model;
        std::string manifest, codebook, out;
        int jobs = 1;
        int snapshot_every = 0;
    } train;
    {
        auto* cmd = app.add_subcommand("train", "train the single-frame network");
        cmd->add_option("--manifest", train.manifest, "training manifest")->required();
        cmd->add_option("--codebook", train.codebook, "flow codebook file")->required();
        cmd->add_option("--out", train.out, "output checkpoint (loss log goes beside it)")
            ->required();
        cmd->add_option("--jobs", train.jobs, "worker threads for batch fan-out")
            ->capture_default_str();
        cmd->add_option("--snapshot-every", train.snapshot_every,
                        "extra checkpoint every k iterations (0 = off)")
            ->capture_default_str();
        train.model.attach(cmd);
        cmd->final_callback([&] {
            auto cfg = train.model.resolve();
            auto entries = fp::load_manifest(train.manifest);
            auto codebook = fp::load_codebook(train.codebook);
            fp::TrainOptions opt;
            opt.checkpoint_out = train.out;
            opt.loss_log_out = sibling_path(train.out, "_loss.csv");
            opt.snapshot_every = train.snapshot_every;
            opt.jobs = train.jobs;
            auto result = fp::train_model(cfg, entries, codebook, std::cerr, opt);
            std::cout << "train: " << cfg.sgd.max_iters << " iters, final loss "
                      << result.loss_log.back()[1] << ", checkpoint " << train.out << "\n";
        });
    }

    // ---- predict ---------------------------------------------------------------
    struct {
        ModelFlags model;
        std::string image, checkpoint, codebook, out;
    } predict;
    {
        auto* cmd = app.add_subcommand(
            "predict", "predict motion for one image; writes <out>.flo and <out>.ppm");
        cmd->add_option("image", predict.image, "input image (PGM/PPM)")->required();
        cmd->add_option("--checkpoint", predict.checkpoint, "trained checkpoint")->required();
        cmd->add_option("--codebook", predict.codebook, "flow codebook file")->required();
        cmd->add_option("--out", predict.out, "output path base")->required();
        predict.model.attach(cmd);
        cmd->final_callback([&] {
            auto cfg = predict.model.resolve();
            auto spec = fp::build_network_spec(cfg);
            auto params = fp::load_params(predict.checkpoint);
            fp::check_params(spec, params);
            auto codebook = fp::load_codebook(predict.codebook);
            if (codebook.size() != cfg.clusters)
                throw fp::DataError("codebook has " + std::to_string(codebook.size()) +
                                    " clusters, config wants " + std::to_string(cfg.clusters));
            auto img = fp::read_image(predict.image);
            auto out = fp::predict_model(cfg, spec, params, codebook, img);
            fp::write_flo(out.coarse, predict.out + ".flo");
            fp::write_image(out.viz, predict.out + ".ppm");
            std::cout << "predict: " << cfg.grid_m << "x" << cfg.grid_n << " flow -> "
                      << predict.out << ".flo, " << predict.out << ".ppm\n";
        });
    }

    // ---- eval / nn-eval -----------------------------------------------------
    struct EvalArgs {
        ModelFlags model;
        std::string manifest, codebook, checkpoint, out;
        std::string predictor = "model";
        std::string train_manifest;
        std::string features = "pixels";
        int topn = 0;
        int jobs = 1;
    };
    auto run_eval = [](EvalArgs& args) {
        auto cfg = args.model.resolve();
        auto entries = fp::load_manifest(args.manifest);
        auto codebook = fp::load_codebook(args.codebook);
        if ((args.predictor == "model" ||
             (args.predictor == "nn" && args.features == "model")) &&
            args.checkpoint.empty())
            throw fp::DataError("--predictor model (or --features model) needs --checkpoint");

        std::unique_ptr<fp::Predictor> predictor;
        if (args.predictor == "model") {
            auto params = fp::load_params(args.checkpoint);
            predictor = std::make_unique<fp::ModelPredictor>(cfg, std::move(params), codebook);
        } else if (args.predictor == "oracle") {
            predictor = std::make_unique<fp::OraclePredictor>();
        } else if (args.predictor == "uniform") {
            predictor = std::make_unique<fp::UniformPredictor>(codebook);
        } else if (args.predictor == "nn") {
            if (args.train_manifest.empty())
                throw fp::DataError("--predictor nn needs --train-manifest");
            fp::FeatureFn features_fn;
            std::optional<std::pair<int, int>> wanted;
            if (args.features == "model") {
                auto spec = fp::build_network_spec(cfg);
                auto params = fp::load_params(args.checkpoint);
                fp::check_params(spec, params);
                features_fn = [cfg, spec, params](const fp::Image& img) {
                    return fp::extract_features(cfg, spec, params, img);
                };
                wanted = std::make_pair(cfg.input_w, cfg.input_h);
            } else {
                features_fn = fp::pixel_features;
            }
            auto train_entries = fp::load_manifest(args.train_manifest);
            std::vector<std::vector<double>> feats;
            std::vector<fp::QuantizedLabelGrid> labels;
            int skipped = 0;
            for (const auto& e : train_entries) {
                try {
                    auto ex = fp::load_example(e);
                    if (wanted) ex = fp::fit_to_input(std::move(ex), wanted->first, wanted->second);
                    feats.push_back(features_fn(ex.image));
                    labels.push_back(fp::quantize(ex.flow, codebook, cfg.grid_m, cfg.grid_n));
                } catch (const fp::DataError& err) {
                    ++skipped;
                    std::cerr << "skipping " << e.image_path << ": " << err.what() << "\n";
                }
            }
            if (feats.empty()) throw fp::DataError("nn baseline: no training entries loaded");
            if (skipped > 0)
                std::cerr << "nn baseline: skipped " << skipped << " training entries\n";
            predictor = std::make_unique<fp::NnPredictor>(features_fn, std::move(feats),
                                                          std::move(labels), codebook, wanted);
        } else {
            throw fp::DataError("unknown predictor '" + args.predictor + "'");
        }

        fp::EvalOptions opt;
        opt.grid_m = cfg.grid_m;
        opt.grid_n = cfg.grid_n;
        opt.extra_top_n = args.topn;
        opt.jobs = args.jobs;
        auto report = fp::evaluate(*predictor, entries, codebook, opt, std::cerr);
        std::cout << fp::format_report_table(report);
        if (!args.out.empty()) {
            fp::write_report_csv(report, args.out);
            fp::write_per_image_csv(report, sibling_path(args.out, "_per_image.csv"));
            std::cout << "eval: report " << args.out << ", per-image "
                      << sibling_path(args.out, "_per_image.csv") << "\n";
        }
    };

    EvalArgs eval_args;
    {
        auto* cmd = app.add_subcommand("eval", "run the full evaluation protocol");
        cmd->add_option("--manifest", eval_args.manifest, "evaluation manifest")->required();
        cmd->add_option("--codebook", eval_args.codebook, "flow codebook file")->required();
        cmd->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint (model/nn)");
        cmd->add_option("--predictor", eval_args.predictor, "what to evaluate")
            ->check(CLI::IsMember({"model", "nn", "oracle", "uniform"}))
            ->capture_default_str();
        cmd->add_option("--train-manifest", eval_args.train_manifest,
                        "training manifest for the nn predictor");
        cmd->add_option("--features", eval_args.features, "nn feature source")
            ->check(CLI::IsMember({"pixels", "model"}))
            ->capture_default_str();
        cmd->add_option("--topn", eval_args.topn, "additional top-N row (0 = none)")
            ->capture_default_str();
        cmd->add_option("--jobs", eval_args.jobs, "worker threads over images")
            ->capture_default_str();
        cmd->add_option("--out", eval_args.out, "write the report CSV here");
        eval_args.model.attach(cmd);
        cmd->final_callback([&] { run_eval(eval_args); });
    }

    EvalArgs nn_args;
    nn_args.predictor = "nn";
    {
        auto* cmd = app.add_subcommand("nn-eval", "evaluate the nearest-neighbor baseline");
        cmd->add_option("--manifest", nn_args.manifest, "evaluation manifest")->required();
        cmd->add_option("--train-manifest", nn_args.train_manifest, "training manifest")
            ->required();
        cmd->add_option("--codebook", nn_args.codebook, "flow codebook file")->required();
        cmd->add_option("--checkpoint", nn_args.checkpoint,
                        "trained checkpoint (used when --features model)");
        cmd->add_option("--features", nn_args.features, "feature source")
            ->check(CLI::IsMember({"pixels", "model"}))
            ->capture_default_str();
        cmd->add_option("--topn", nn_args.topn, "additional top-N row (0 = none)")
            ->capture_default_str();
        cmd->add_option("--jobs", nn_args.jobs, "worker threads over images")
            ->capture_default_str();
        cmd->add_option("--out", nn_args.out, "write the report CSV here");
        nn_args.model.attach(cmd);
        cmd->final_callback([&] { run_eval(nn_args); });
    }

    // ---- viz -------------------------------------------------------------------
    struct {
        std::string flo, out;
        double max_magnitude = 0.0;
    } viz;
    {
        auto* cmd = app.add_subcommand("viz", "render a .flo file with the flow color wheel");
        cmd->add_option("flo", viz.flo, "input .flo file")->required();
        cmd->add_option("--out", viz.out, "output PPM path")->required();
        cmd->add_option("--max-magnitude", viz.max_magnitude,
                        "saturation normalization (0 = field maximum)")
            ->capture_default_str();
        cmd->final_callback([&] {
            auto field = fp::read_flo(viz.flo);
            fp::write_image(fp::visualize_flow(field, viz.max_magnitude), viz.out);
            std::cout << "viz: " << field.width << "x" << field.height << " -> " << viz.out
                      << "\n";
        });
    }

    // ---- train-multi -------------------------------------------------------------
    struct {
        ModelFlags model;
        std::string manifest, codebook, checkpoint, out;
        int steps = 6, hidden = 2000;
    } tmulti;
    {
        auto* cmd = app.add_subcommand(
            "train-multi", "train the multi-frame head on a sequence manifest");
        cmd->add_option("--manifest", tmulti.manifest, "sequence manifest")->required();
        cmd->add_option("--codebook", tmulti.codebook, "frame codebook file")->required();
        cmd->add_option("--checkpoint", tmulti.checkpoint, "frozen single-frame checkpoint")
            ->required();
        cmd->add_option("--out", tmulti.out, "output multi-frame checkpoint")->required();
        cmd->add_option("--steps", tmulti.steps, "future frames to predict")
            ->capture_default_str();
        cmd->add_option("--hidden", tmulti.hidden, "hidden width per stage")
            ->capture_default_str();
        tmulti.model.attach(cmd);
        cmd->final_callback([&] {
            auto cfg = tmulti.model.resolve();
            auto entries = fp::load_manifest(tmulti.manifest);
            auto fcb = fp::load_frame_codebook(tmulti.codebook);
            auto params = fp::load_params(tmulti.checkpoint);
            fp::MultiFrameTrainOptions opt;
            opt.checkpoint_out = tmulti.out;
            opt.loss_log_out = sibling_path(tmulti.out, "_loss.csv");
            auto result = fp::train_multiframe(entries, fcb, tmulti.steps, tmulti.hidden, cfg,
                                               params, cfg.sgd, std::cerr, opt);
            std::cout << "train-multi: " << cfg.sgd.max_iters << " iters, final loss "
                      << result.loss_log.back()[1] << ", checkpoint " << tmulti.out << "\n";
        });
    }

    // ---- predict-multi -----------------------------------------------------------
    struct {
        ModelFlags model;
        std::string image, checkpoint, multi_checkpoint, codebook, out;
    } pmulti;
    {
        auto* cmd = app.add_subcommand(
            "predict-multi",
            "predict T future coarse flow frames; writes <out>_f<t>.flo/.ppm per step");
        cmd->add_option("image", pmulti.image, "input image (PGM/PPM)")->required();
        cmd->add_option("--checkpoint", pmulti.checkpoint, "single-frame checkpoint")->required();
        cmd->add_option("--multi-checkpoint", pmulti.multi_checkpoint, "multi-frame checkpoint")
            ->required();
        cmd->add_option("--codebook", pmulti.codebook, "frame codebook file")->required();
        cmd->add_option("--out", pmulti.out, "output path base")->required();
        pmulti.model.attach(cmd);
        cmd->final_callback([&] {
            auto cfg = pmulti.model.resolve();
            auto spec = fp::build_network_spec(cfg);
            auto params = fp::load_params(pmulti.checkpoint);
            fp::check_params(spec, params);
            auto mf_params = fp::load_params(pmulti.multi_checkpoint, fp::kMultiFrameMagic);
            auto mf_spec = fp::spec_from_params(mf_params);
            auto fcb = fp::load_frame_codebook(pmulti.codebook);
            fp::Example ex;
            ex.image = fp::read_image(pmulti.image);
            ex.flow = fp::FlowField(ex.image.width, ex.image.height);
            ex = fp::fit_to_input(std::move(ex), cfg.input_w, cfg.input_h);
            auto features = fp::extract_features(cfg, spec, params, ex.image);
            auto pred = fp::predict_multiframe(features, mf_params, mf_spec, fcb);
            for (int t = 0; t < mf_spec.steps; ++t) {
                const std::string base = pmulti.out + "_f" + std::to_string(t + 1);
                fp::write_flo(pred.frames[t], base + ".flo");
                fp::write_image(pred.viz[t], base + ".ppm");
            }
            std::cout << "predict-multi: " << mf_spec.steps << " frames -> " << pmulti.out
                      << "_f*.flo/.ppm\n";
        });
    }

    // ---- gradcheck ------------------------------------------------------------
    struct {
        ModelFlags model;
        int samples = 120;
    } gc;
    {
        auto* cmd = app.add_subcommand(
            "gradcheck", "finite-difference gradient checks, per layer and end to end");
        cmd->add_option("--samples", gc.samples, "parameter coordinates to sample end to end")
            ->capture_default_str();
        gc.model.attach(cmd, "tiny");
        cmd->final_callback([&] {
            auto cfg = gc.model.resolve();
            const std::uint64_t seed = cfg.sgd.seed;
            auto layers = fp::gradcheck_layers(seed);
            std::cout << "per-layer: max relative error " << layers.max_rel_error << " over "
                      << layers.checked << " coordinates (worst " << layers.worst << ")\n";

            auto spec = fp::build_network_spec(cfg);
            auto params = fp::xavier_init(spec, seed);
            fp::Rng rng(fp::split_seed(seed, 0x9cf));
            fp::Tensor4 input(1, cfg.input_c, cfg.input_h, cfg.input_w);
            for (auto& x : input.v) x = rng.uniform(-0.5, 0.5);
            std::vector<int> labels(cfg.cells());
            for (auto& y : labels) y = static_cast<int>(rng.index(cfg.clusters));
            auto loss_value = [&](const fp::Tensor4& probs) {
                double L = 0.0;
                for (int i = 0; i < cfg.cells(); ++i)
                    L -= std::log(std::max(
                        probs.v[static_cast<std::size_t>(i) * cfg.clusters + labels[i]], 1e-12));
                return L;
            };
            auto loss_grad = [&](const fp::Tensor4& probs) {
                fp::Tensor4 d(probs.dims);
                for (int i = 0; i < cfg.cells(); ++i) {
                    const std::size_t at =
                        static_cast<std::size_t>(i) * cfg.clusters + labels[i];
                    d.v[at] = -1.0 / std::max(probs.v[at], 1e-12);
                }
                return d;
            };
            auto net = fp::gradcheck_network(spec, params, input, loss_value, loss_grad,
                                             gc.samples, seed);
            std::cout << "end-to-end: max relative error " << net.max_rel_error << " over "
                      << net.checked << " sampled parameters (worst " << net.worst << ")\n";
            if (layers.max_rel_error >= 1e-4 || net.max_rel_error >= 1e-3)
                throw fp::NumericError("gradient check failed");
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const fp::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const fp::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
