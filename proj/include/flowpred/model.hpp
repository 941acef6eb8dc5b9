#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "flowpred/checkpoint.hpp"
#include "flowpred/codebook.hpp"
#include "flowpred/dataset.hpp"
#include "flowpred/error.hpp"
#include "flowpred/flow_viz.hpp"
#include "flowpred/net.hpp"
#include "flowpred/rng.hpp"
#include "flowpred/sgd.hpp"

namespace flowpred {

// ---------------------------------------------------------------------------
// Configuration and presets.

struct ModelConfig {
    int input_w = 200, input_h = 200, input_c = 3;
    std::vector<LayerSpec> hidden;  // everything before the classification head
    int grid_m = 20, grid_n = 20, clusters = 40;
    SgdConfig sgd;
    bool augment = true;
    std::string preset_name = "paper";
    int log_every = 100;

    int cells() const { return grid_m * grid_n; }
};

// The single-frame architecture:
// C(96,11,s4) -> LRN -> MP -> C(256,5) -> LRN -> MP -> C(384,3) -> C(384,3)
// -> C(256,3) -> MP -> F(4096) -> F(4096), ReLU after every conv and hidden
// FC, then the M*N*C spatial softmax head. Stride 1 everywhere except the
// first conv; pooling is 3x3 stride 2.
inline ModelConfig paper_preset() {
    ModelConfig cfg;
    cfg.preset_name = "paper";
    cfg.input_w = cfg.input_h = 200;
    cfg.hidden = {
        LayerSpec::conv(96, 11, 4, 0), LayerSpec::relu(), LayerSpec::lrn(), LayerSpec::maxpool(),
        LayerSpec::conv(256, 5, 1, 2), LayerSpec::relu(), LayerSpec::lrn(), LayerSpec::maxpool(),
        LayerSpec::conv(384, 3, 1, 1), LayerSpec::relu(),
        LayerSpec::conv(384, 3, 1, 1), LayerSpec::relu(),
        LayerSpec::conv(256, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(),
        LayerSpec::fc(4096), LayerSpec::relu(),
        LayerSpec::fc(4096), LayerSpec::relu(),
    };
    cfg.grid_m = cfg.grid_n = 20;
    cfg.clusters = 40;
    cfg.sgd.base_lr = 0.0001;
    cfg.sgd.stepsize = 50000;
    return cfg;
}

// Desk-scale preset preserving every structural element of the paper chain.
inline ModelConfig tiny_preset() {
    ModelConfig cfg;
    cfg.preset_name = "tiny";
    cfg.input_w = cfg.input_h = 64;
    cfg.hidden = {
        LayerSpec::conv(16, 5, 2, 2), LayerSpec::relu(), LayerSpec::maxpool(),
        LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(),
        LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(),
        LayerSpec::fc(256), LayerSpec::relu(),
    };
    cfg.grid_m = cfg.grid_n = 8;
    cfg.clusters = 10;
    cfg.sgd.base_lr = 0.001;
    cfg.sgd.stepsize = 5000;
    return cfg;
}

inline ModelConfig preset_by_name(const std::string& name) {
    if (name == "paper") return paper_preset();
    if (name == "tiny") return tiny_preset();
    throw DataError("unknown preset '" + name + "', expected paper or tiny");
}

inline NetworkSpec build_network_spec(const ModelConfig& cfg) {
    std::vector<LayerSpec> layers = cfg.hidden;
    layers.push_back(LayerSpec::fc(cfg.cells() * cfg.clusters));
    layers.back().name = "head";
    layers.push_back(LayerSpec::spatial_softmax(cfg.cells(), cfg.clusters));
    auto spec = make_network_spec({1, cfg.input_c, cfg.input_h, cfg.input_w}, std::move(layers));
    shape_trace(spec, 1);  // validate the whole chain up front
    return spec;
}

// Index of the layer whose output is the "feature" activation: the
// nonlinearity after the last hidden FC.
inline int feature_layer_index(const ModelConfig& cfg) {
    for (int i = static_cast<int>(cfg.hidden.size()) - 1; i >= 0; --i)
        if (cfg.hidden[i].kind == LayerKind::Relu) return i;
    return static_cast<int>(cfg.hidden.size()) - 1;
}

// ---------------------------------------------------------------------------
// Config file: UTF-8 `key = value` lines, '#' comments. The preset key is
// applied first, remaining keys override it.

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw DataError("config key " + key + ": expected a boolean, got '" + v + "'");
}

inline void parse_input_size(const std::string& v, ModelConfig& cfg) {
    int w = 0, h = 0, c = 3;
    char x1 = 0, x2 = 0;
    std::istringstream ss(v);
    if (!(ss >> w)) throw DataError("config input_size: bad value '" + v + "'");
    if (ss >> x1 >> h) {
        if (x1 != 'x') throw DataError("config input_size: expected WxH[xC]");
        if (ss >> x2 >> c && x2 != 'x') throw DataError("config input_size: expected WxH[xC]");
    } else {
        h = w;
    }
    if (w < 1 || h < 1 || (c != 1 && c != 3))
        throw DataError("config input_size: bad dimensions '" + v + "'");
    cfg.input_w = w;
    cfg.input_h = h;
    cfg.input_c = c;
}

}  // namespace detail

inline void apply_config_value(ModelConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "input_size") detail::parse_input_size(value, cfg);
        else if (key == "grid_m") cfg.grid_m = std::stoi(value);
        else if (key == "grid_n") cfg.grid_n = std::stoi(value);
        else if (key == "clusters") cfg.clusters = std::stoi(value);
        else if (key == "base_lr") cfg.sgd.base_lr = std::stod(value);
        else if (key == "stepsize") cfg.sgd.stepsize = std::stoi(value);
        else if (key == "gamma") cfg.sgd.gamma = std::stod(value);
        else if (key == "batch") cfg.sgd.batch = std::stoi(value);
        else if (key == "max_iters") cfg.sgd.max_iters = std::stoi(value);
        else if (key == "seed") cfg.sgd.seed = std::stoull(value);
        else if (key == "augment") cfg.augment = detail::parse_bool(value, key);
        else if (key == "momentum") cfg.sgd.momentum = std::stod(value);
        else if (key == "weight_decay") cfg.sgd.weight_decay = std::stod(value);
        else if (key == "preset") { /* handled by the caller in a first pass */ }
        else throw DataError("unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
        throw DataError("config key " + key + ": bad value '" + value + "'");
    } catch (const std::out_of_range&) {
        throw DataError("config key " + key + ": value out of range '" + value + "'");
    }
    if (cfg.grid_m < 1 || cfg.grid_n < 1 || cfg.clusters < 1)
        throw DataError("config: grid_m, grid_n, clusters must be >= 1");
}

inline ModelConfig parse_config_file(const std::string& path,
                                     const std::string& preset_override = "") {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open config " + path);
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    int lineno = 0;
    std::string preset = "paper";
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": expected key = value");
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        if (key == "preset") preset = value;
        else kv.emplace_back(key, value);
    }
    ModelConfig cfg = preset_by_name(preset_override.empty() ? preset : preset_override);
    for (const auto& [k, v] : kv) apply_config_value(cfg, k, v);
    cfg.sgd.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Forward and the Eq.-style spatial loss.

// CHW tensor with the per-channel training mean removed.
inline Tensor4 image_to_tensor(const Image& img, const std::vector<double>& mean) {
    Tensor4 t(1, img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c) {
        const double mu = c < static_cast<int>(mean.size()) ? mean[c] : 0.0;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at(0, c, y, x) = img.at(x, y, c) - mu;
    }
    return t;
}

inline PredictionGrid probs_to_grid(const Tensor4& probs, int batch_index, int m, int n, int c) {
    PredictionGrid g(m, n, c);
    const double* src = probs.data() + static_cast<std::size_t>(batch_index) * m * n * c;
    std::copy_n(src, static_cast<std::size_t>(m) * n * c, g.p.begin());
    return g;
}

inline PredictionGrid model_forward(const NetworkSpec& spec, const NetworkParams& params,
                                    const ModelConfig& cfg, const Image& input_sized) {
    if (input_sized.width != cfg.input_w || input_sized.height != cfg.input_h ||
        input_sized.channels != cfg.input_c)
        throw ShapeError("model_forward: image is " + std::to_string(input_sized.width) + "x" +
                         std::to_string(input_sized.height) + "x" +
                         std::to_string(input_sized.channels) + ", config wants " +
                         std::to_string(cfg.input_w) + "x" + std::to_string(cfg.input_h) + "x" +
                         std::to_string(cfg.input_c));
    auto tr = net_forward(spec, params, image_to_tensor(input_sized, params.input_mean));
    return probs_to_grid(tr.acts.back(), 0, cfg.grid_m, cfg.grid_n, cfg.clusters);
}

// L = -sum_i log F_{i, y_i}, probabilities floored at 1e-12 inside the log;
// the gradient w.r.t. the cell logits is F - one_hot(y).
inline constexpr double kLogFloor = 1e-12;

struct SpatialLoss {
    double loss = 0.0;
    PredictionGrid dlogits;
};

inline SpatialLoss spatial_loss(const PredictionGrid& pred, const QuantizedLabelGrid& label) {
    if (pred.m != label.m || pred.n != label.n)
        throw ShapeError("spatial_loss: prediction grid " + std::to_string(pred.m) + "x" +
                         std::to_string(pred.n) + " vs label grid " + std::to_string(label.m) +
                         "x" + std::to_string(label.n));
    SpatialLoss out;
    out.dlogits = pred;
    for (int i = 0; i < pred.m; ++i)
        for (int j = 0; j < pred.n; ++j) {
            const int y = label.at(i, j);
            if (y < 0 || y >= pred.c)
                throw DataError("spatial_loss: label " + std::to_string(y) + " out of range");
            out.loss -= std::log(std::max(pred.at(i, j, y), kLogFloor));
            out.dlogits.at(i, j, y) -= 1.0;
        }
    return out;
}

// Batched variant over the raw probability tensor; gradient is averaged over
// the batch.
struct BatchLoss {
    double mean_loss = 0.0;
    Tensor4 dlogits;
};

inline BatchLoss spatial_loss_batch(const Tensor4& probs,
                                    const std::vector<const QuantizedLabelGrid*>& labels,
                                    int cells, int classes) {
    const int batch = probs.dims.n;
    if (static_cast<int>(labels.size()) != batch)
        throw ShapeError("spatial_loss_batch: label count does not match batch");
    BatchLoss out;
    out.dlogits = probs;
    const double inv_batch = 1.0 / batch;
    for (int b = 0; b < batch; ++b) {
        const QuantizedLabelGrid& lg = *labels[b];
        double* dz = out.dlogits.data() + static_cast<std::size_t>(b) * cells * classes;
        const double* p = probs.data() + static_cast<std::size_t>(b) * cells * classes;
        for (int i = 0; i < cells; ++i) {
            const int y = lg.labels[i];
            out.mean_loss -= std::log(std::max(p[static_cast<std::size_t>(i) * classes + y], kLogFloor));
            dz[static_cast<std::size_t>(i) * classes + y] -= 1.0;
        }
    }
    out.mean_loss *= inv_batch;
    for (auto& x : out.dlogits.v) x *= inv_batch;
    return out;
}

// The codebook's sample pool: cell-mean flow vectors of every training label
// at grid resolution, deterministically subsampled to at most `cap`.
inline std::vector<std::array<double, 2>> collect_label_samples(
    const ModelConfig& cfg, const std::vector<ManifestEntry>& entries, std::ostream& log,
    std::size_t cap = 1000000, std::uint64_t seed = 1) {
    auto prepare = [&](Example ex) { return fit_to_input(std::move(ex), cfg.input_w, cfg.input_h); };
    auto [examples, skipped] = load_examples(entries, prepare, log);
    (void)skipped;
    std::vector<std::array<double, 2>> samples;
    samples.reserve(examples.size() * cfg.cells());
    for (const auto& ex : examples) {
        const FlowField means = cell_mean_field(ex.flow, cfg.grid_m, cfg.grid_n);
        for (int i = 0; i < cfg.grid_m; ++i)
            for (int j = 0; j < cfg.grid_n; ++j)
                samples.push_back({means.u(j, i), means.v(j, i)});
    }
    if (samples.size() > cap) {
        Rng rng(split_seed(seed, 0x5a3e));
        for (std::size_t i = 0; i < cap; ++i)
            std::swap(samples[i], samples[i + rng.index(samples.size() - i)]);
        samples.resize(cap);
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainOptions {
    std::string checkpoint_out;  // written when non-empty
    std::string loss_log_out;    // CSV iter,loss,lr
    int snapshot_every = 0;      // additionally checkpoint every k iterations
    int jobs = 1;
};

struct TrainResult {
    NetworkParams params;
    std::vector<std::array<double, 3>> loss_log;  // iter, loss, lr
    int skipped = 0;
};

namespace detail {

struct PreparedExample {
    Image image;
    FlowField flow;            // only kept when augmentation is on
    QuantizedLabelGrid label;  // precomputed when augmentation is off
};

inline void fill_batch_slice(Tensor4& batch, int slot, const Image& img,
                             const std::vector<double>& mean) {
    double* dst = batch.data() + batch.idx(slot, 0, 0, 0);
    const int c = img.channels, h = img.height, w = img.width;
    for (int ch = 0; ch < c; ++ch) {
        const double mu = ch < static_cast<int>(mean.size()) ? mean[ch] : 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) *dst++ = img.at(x, y, ch) - mu;
    }
}

}  // namespace detail

inline void write_loss_log(const std::string& path,
                           const std::vector<std::array<double, 3>>& log) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << "iter,loss,lr\n";
    for (const auto& row : log)
        os << static_cast<long long>(row[0]) << "," << row[1] << "," << row[2] << "\n";
}

inline TrainResult train_model(const ModelConfig& cfg, const std::vector<ManifestEntry>& entries,
                               const FlowCodebook& codebook, std::ostream& log,
                               const TrainOptions& opt = {}) {
    cfg.sgd.validate();
    if (codebook.size() != cfg.clusters)
        throw DataError("codebook has " + std::to_string(codebook.size()) +
                        " clusters, config wants " + std::to_string(cfg.clusters));
    const NetworkSpec spec = build_network_spec(cfg);

    // With augmentation on, examples are kept at 1.2x the input size and a
    // random window is cut per iteration; otherwise they are center-cropped
    // once and their labels frozen.
    std::vector<detail::PreparedExample> data;
    int skipped = 0;
    {
        auto prepare = [&](Example ex) {
            if (cfg.augment) return cover_resize(std::move(ex), cfg.input_w, cfg.input_h, 1.2);
            return fit_to_input(std::move(ex), cfg.input_w, cfg.input_h);
        };
        auto [examples, nskip] = load_examples(entries, prepare, log);
        skipped = nskip;
        data.reserve(examples.size());
        for (auto& ex : examples) {
            detail::PreparedExample pe;
            if (!cfg.augment)
                pe.label = quantize(ex.flow, codebook, cfg.grid_m, cfg.grid_n);
            pe.image = std::move(ex.image);
            if (cfg.augment) pe.flow = std::move(ex.flow);
            data.push_back(std::move(pe));
        }
    }

    TrainResult result;
    result.skipped = skipped;
    result.params = xavier_init(spec, cfg.sgd.seed);
    result.params.input_mean.assign(cfg.input_c, 0.0);
    {
        double count = 0.0;
        for (const auto& pe : data) {
            for (int c = 0; c < cfg.input_c; ++c)
                for (int y = 0; y < pe.image.height; ++y)
                    for (int x = 0; x < pe.image.width; ++x)
                        result.params.input_mean[c] += pe.image.at(x, y, c);
            count += static_cast<double>(pe.image.width) * pe.image.height;
        }
        for (auto& m : result.params.input_mean) m /= count;
    }

    Rng data_rng(split_seed(cfg.sgd.seed, 0xda7a));
    Rng aug_rng(split_seed(cfg.sgd.seed, 0xa6u));
    const int batch = std::max(1, std::min<int>(cfg.sgd.batch, static_cast<int>(data.size())));
    const int jobs = std::max(1, opt.jobs);

    Gradients grads, velocity;
    grads.ensure_like(result.params);
    Tensor4 batch_tensor(batch, cfg.input_c, cfg.input_h, cfg.input_w);
    std::vector<QuantizedLabelGrid> batch_labels(batch);
    std::vector<const QuantizedLabelGrid*> label_ptrs(batch);

    for (int iter = 0; iter < cfg.sgd.max_iters; ++iter) {
        for (int b = 0; b < batch; ++b) {
            const std::size_t pick = data_rng.index(data.size());
            const auto& pe = data[pick];
            if (cfg.augment) {
                AugmentParams ap;
                ap.flip = aug_rng.coin();
                ap.crop_w = cfg.input_w;
                ap.crop_h = cfg.input_h;
                ap.crop_x = static_cast<int>(aug_rng.index(pe.image.width - cfg.input_w + 1));
                ap.crop_y = static_cast<int>(aug_rng.index(pe.image.height - cfg.input_h + 1));
                auto [img, flow] = augment(pe.image, pe.flow, ap);
                batch_labels[b] = quantize(flow, codebook, cfg.grid_m, cfg.grid_n);
                detail::fill_batch_slice(batch_tensor, b, img, result.params.input_mean);
            } else {
                batch_labels[b] = pe.label;
                detail::fill_batch_slice(batch_tensor, b, pe.image, result.params.input_mean);
            }
            label_ptrs[b] = &batch_labels[b];
        }

        grads.zero();
        double loss = 0.0;
        if (jobs <= 1) {
            auto tr = net_forward(spec, result.params, batch_tensor);
            auto bl = spatial_loss_batch(tr.acts.back(), label_ptrs, cfg.cells(), cfg.clusters);
            loss = bl.mean_loss;
            net_backward(spec, result.params, tr, std::move(bl.dlogits), grads, 1);
        } else {
            // Fan out sub-batches to workers; reduce in sub-batch order so the
            // result does not depend on thread scheduling.
            const int chunks = std::min(jobs, batch);
            std::vector<Gradients> cgrads(chunks);
            std::vector<double> closs(chunks, 0.0);
            std::vector<std::thread> pool;
            for (int ci = 0; ci < chunks; ++ci) {
                pool.emplace_back([&, ci] {
                    const int lo = ci * batch / chunks, hi = (ci + 1) * batch / chunks;
                    if (lo >= hi) return;
                    Tensor4 sub(hi - lo, cfg.input_c, cfg.input_h, cfg.input_w);
                    std::copy_n(batch_tensor.data() + batch_tensor.idx(lo, 0, 0, 0), sub.size(),
                                sub.data());
                    std::vector<const QuantizedLabelGrid*> sub_labels(label_ptrs.begin() + lo,
                                                                      label_ptrs.begin() + hi);
                    auto tr = net_forward(spec, result.params, std::move(sub));
                    auto bl = spatial_loss_batch(tr.acts.back(), sub_labels, cfg.cells(),
                                                 cfg.clusters);
                    closs[ci] = bl.mean_loss * (hi - lo);
                    for (auto& x : bl.dlogits.v) x *= static_cast<double>(hi - lo) / batch;
                    cgrads[ci].ensure_like(result.params);
                    cgrads[ci].zero();
                    net_backward(spec, result.params, tr, std::move(bl.dlogits), cgrads[ci], 1);
                });
            }
            for (auto& t : pool) t.join();
            for (int ci = 0; ci < chunks; ++ci) {
                loss += closs[ci];
                for (std::size_t ti = 0; ti < grads.tensors.size(); ++ti)
                    for (std::size_t k = 0; k < grads.tensors[ti].size(); ++k)
                        grads.tensors[ti].v[k] += cgrads[ci].tensors[ti].v[k];
            }
            loss /= batch;
        }

        if (!std::isfinite(loss))
            throw NumericError("loss became non-finite at iteration " + std::to_string(iter));

        if (iter % cfg.log_every == 0 || iter + 1 == cfg.sgd.max_iters)
            result.loss_log.push_back(
                {static_cast<double>(iter), loss, learning_rate(cfg.sgd, iter)});

        sgd_step(result.params, grads, cfg.sgd, &velocity);

        if (opt.snapshot_every > 0 && (iter + 1) % opt.snapshot_every == 0 &&
            !opt.checkpoint_out.empty())
            save_params(opt.checkpoint_out + "." + std::to_string(iter + 1), result.params);
    }

    if (!opt.checkpoint_out.empty()) save_params(opt.checkpoint_out, result.params);
    if (!opt.loss_log_out.empty()) write_loss_log(opt.loss_log_out, result.loss_log);
    return result;
}

// ---------------------------------------------------------------------------
// Prediction.

struct PredictOutput {
    PredictionGrid probs;
    FlowField coarse;  // M x N soft-decoded flow
    Image viz;
};

inline PredictOutput predict_model(const ModelConfig& cfg, const NetworkSpec& spec,
                                   const NetworkParams& params, const FlowCodebook& codebook,
                                   const Image& raw) {
    Example ex;
    ex.image = raw;
    ex.flow = FlowField(raw.width, raw.height);
    ex = fit_to_input(std::move(ex), cfg.input_w, cfg.input_h);
    PredictOutput out;
    out.probs = model_forward(spec, params, cfg, ex.image);
    out.coarse = soft_decode(out.probs, codebook);
    out.viz = visualize_flow(out.coarse);
    return out;
}

}  // namespace flowpred
