#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "flowpred/checkpoint.hpp"
#include "flowpred/codebook.hpp"
#include "flowpred/dataset.hpp"
#include "flowpred/error.hpp"
#include "flowpred/flow_viz.hpp"
#include "flowpred/model.hpp"
#include "flowpred/sgd.hpp"

namespace flowpred {

// Long-range prediction head: T fully connected stages over frozen
// single-frame features. Stage t consumes [features, h_1, ..., h_{t-1}]
// (weights not shared across stages) and classifies the t-th future coarse
// flow frame against a frame codebook.
struct MultiFrameSpec {
    int steps = 6;           // T
    int hidden = 2000;       // H
    int frame_clusters = 1000;  // K
    int feature_dim = 0;     // D, the single-frame model's penultimate width

    void validate() const {
        if (steps < 1 || hidden < 1 || frame_clusters < 1 || feature_dim < 1)
            throw DataError("multiframe spec: steps, hidden, clusters, feature_dim must be >= 1");
    }
    int input_width(int step) const {  // step is 1-based
        return feature_dim + (step - 1) * hidden;
    }
};

// Four tensors per step: hidden weight/bias, classifier weight/bias.
// Classifiers start at zero so a fresh chain is exactly uniform.
inline NetworkParams init_multiframe(const MultiFrameSpec& spec, std::uint64_t seed) {
    spec.validate();
    NetworkParams params;
    Rng rng(split_seed(seed, 0x3f3f));
    for (int t = 1; t <= spec.steps; ++t) {
        const int in = spec.input_width(t);
        Tensor4 w(spec.hidden, in, 1, 1);
        const double a = std::sqrt(3.0 / in);
        for (auto& x : w.v) x = rng.uniform(-a, a);
        const std::string base = "step" + std::to_string(t);
        params.names.push_back(base + ".hidden.weight");
        params.tensors.push_back(std::move(w));
        params.names.push_back(base + ".hidden.bias");
        params.tensors.emplace_back(spec.hidden, 1, 1, 1);
        params.names.push_back(base + ".classifier.weight");
        params.tensors.emplace_back(spec.frame_clusters, spec.hidden, 1, 1);
        params.names.push_back(base + ".classifier.bias");
        params.tensors.emplace_back(spec.frame_clusters, 1, 1, 1);
    }
    return params;
}

// Enforces the step-t input width law D + (t-1)*H for every step.
inline void check_multiframe(const MultiFrameSpec& spec, const NetworkParams& params) {
    spec.validate();
    if (params.tensors.size() != static_cast<std::size_t>(spec.steps) * 4)
        throw ShapeError("multiframe checkpoint holds " + std::to_string(params.tensors.size()) +
                         " tensors, spec wants " + std::to_string(spec.steps * 4));
    for (int t = 1; t <= spec.steps; ++t) {
        const auto& w = params.tensors[(t - 1) * 4];
        const auto& u = params.tensors[(t - 1) * 4 + 2];
        if (w.dims.n != spec.hidden || w.dims.c != spec.input_width(t))
            throw ShapeError("step " + std::to_string(t) + ": hidden weight is " +
                             w.dims.str() + ", expected " + std::to_string(spec.hidden) + "x" +
                             std::to_string(spec.input_width(t)));
        if (u.dims.n != spec.frame_clusters || u.dims.c != spec.hidden)
            throw ShapeError("step " + std::to_string(t) + ": classifier weight is " +
                             u.dims.str());
    }
}

// Recovers (T, H, K, D) from checkpoint tensor shapes.
inline MultiFrameSpec spec_from_params(const NetworkParams& params) {
    if (params.tensors.empty() || params.tensors.size() % 4 != 0)
        throw DataError("multiframe checkpoint: tensor count is not a multiple of 4");
    MultiFrameSpec spec;
    spec.steps = static_cast<int>(params.tensors.size() / 4);
    spec.hidden = params.tensors[0].dims.n;
    spec.feature_dim = params.tensors[0].dims.c;
    spec.frame_clusters = params.tensors[2].dims.n;
    check_multiframe(spec, params);
    return spec;
}

struct MultiFrameTrace {
    std::vector<std::vector<double>> inputs;  // x_t = [features, h_1..h_{t-1}]
    std::vector<std::vector<double>> pre;     // hidden pre-activations
    std::vector<std::vector<double>> hidden;  // post-ReLU hidden states
    std::vector<std::vector<double>> probs;   // softmax over K per step
};

inline MultiFrameTrace multiframe_forward(const std::vector<double>& features,
                                          const NetworkParams& params,
                                          const MultiFrameSpec& spec) {
    check_multiframe(spec, params);
    if (static_cast<int>(features.size()) != spec.feature_dim)
        throw ShapeError("multiframe forward: feature width " + std::to_string(features.size()) +
                         " does not match spec " + std::to_string(spec.feature_dim));
    MultiFrameTrace tr;
    tr.inputs.resize(spec.steps);
    tr.pre.resize(spec.steps);
    tr.hidden.resize(spec.steps);
    tr.probs.resize(spec.steps);
    for (int t = 0; t < spec.steps; ++t) {
        auto& x = tr.inputs[t];
        x = features;
        for (int s = 0; s < t; ++s)
            x.insert(x.end(), tr.hidden[s].begin(), tr.hidden[s].end());
        const auto& w = params.tensors[t * 4];
        const auto& b = params.tensors[t * 4 + 1];
        auto& a = tr.pre[t];
        a.assign(spec.hidden, 0.0);
        for (int i = 0; i < spec.hidden; ++i) {
            const double* wr = w.data() + static_cast<std::size_t>(i) * x.size();
            double s = b.v[i];
            for (std::size_t j = 0; j < x.size(); ++j) s += wr[j] * x[j];
            a[i] = s;
        }
        auto& h = tr.hidden[t];
        h.resize(spec.hidden);
        for (int i = 0; i < spec.hidden; ++i) h[i] = a[i] > 0.0 ? a[i] : 0.0;

        const auto& u = params.tensors[t * 4 + 2];
        const auto& c = params.tensors[t * 4 + 3];
        std::vector<double> z(spec.frame_clusters);
        for (int k = 0; k < spec.frame_clusters; ++k) {
            const double* ur = u.data() + static_cast<std::size_t>(k) * spec.hidden;
            double s = c.v[k];
            for (int i = 0; i < spec.hidden; ++i) s += ur[i] * h[i];
            z[k] = s;
        }
        double zmax = z[0];
        for (double v : z) zmax = std::max(zmax, v);
        double sum = 0.0;
        auto& p = tr.probs[t];
        p.resize(spec.frame_clusters);
        for (int k = 0; k < spec.frame_clusters; ++k) {
            p[k] = std::exp(z[k] - zmax);
            sum += p[k];
        }
        for (auto& v : p) v /= sum;
    }
    return tr;
}

// Cross-entropy over all steps; gradients flow back through every later
// stage's view of earlier hidden states. Returns the sequence loss.
inline double multiframe_backward(const MultiFrameTrace& tr, const std::vector<int>& labels,
                                  const NetworkParams& params, const MultiFrameSpec& spec,
                                  Gradients& grads, double grad_scale = 1.0) {
    if (static_cast<int>(labels.size()) != spec.steps)
        throw ShapeError("multiframe backward: label count does not match steps");
    grads.ensure_like(params);
    double loss = 0.0;
    std::vector<std::vector<double>> dh(spec.steps, std::vector<double>(spec.hidden, 0.0));
    for (int t = spec.steps - 1; t >= 0; --t) {
        const int y = labels[t];
        if (y < 0 || y >= spec.frame_clusters)
            throw DataError("multiframe backward: label " + std::to_string(y) + " out of range");
        loss -= std::log(std::max(tr.probs[t][y], kLogFloor));

        std::vector<double> dz = tr.probs[t];
        dz[y] -= 1.0;
        const auto& u = params.tensors[t * 4 + 2];
        auto& du = grads.tensors[t * 4 + 2];
        auto& dc = grads.tensors[t * 4 + 3];
        for (int k = 0; k < spec.frame_clusters; ++k) {
            const double g = dz[k] * grad_scale;
            dc.v[k] += g;
            double* dur = du.data() + static_cast<std::size_t>(k) * spec.hidden;
            for (int i = 0; i < spec.hidden; ++i) dur[i] += g * tr.hidden[t][i];
            const double* ur = u.data() + static_cast<std::size_t>(k) * spec.hidden;
            for (int i = 0; i < spec.hidden; ++i) dh[t][i] += dz[k] * ur[i];
        }

        // Through the ReLU and the hidden affine map.
        const auto& x = tr.inputs[t];
        const auto& w = params.tensors[t * 4];
        auto& dw = grads.tensors[t * 4];
        auto& db = grads.tensors[t * 4 + 1];
        for (int i = 0; i < spec.hidden; ++i) {
            if (tr.pre[t][i] <= 0.0) continue;
            const double da = dh[t][i];
            db.v[i] += da * grad_scale;
            double* dwr = dw.data() + static_cast<std::size_t>(i) * x.size();
            const double* wr = w.data() + static_cast<std::size_t>(i) * x.size();
            for (std::size_t j = 0; j < x.size(); ++j) dwr[j] += da * grad_scale * x[j];
            // dx feeds the features (discarded; the single-frame net is
            // frozen) and every earlier hidden state.
            for (int s = 0; s < t; ++s) {
                double* dst = dh[s].data();
                const double* src = wr + spec.feature_dim + static_cast<std::size_t>(s) * spec.hidden;
                for (int k = 0; k < spec.hidden; ++k) dst[k] += da * src[k];
            }
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Feature extraction from the frozen single-frame network.

inline std::vector<double> extract_features(const ModelConfig& cfg, const NetworkSpec& spec,
                                            const NetworkParams& params,
                                            const Image& input_sized) {
    if (input_sized.width != cfg.input_w || input_sized.height != cfg.input_h)
        throw ShapeError("extract_features: image size does not match the model input");
    auto tr = net_forward(spec, params, image_to_tensor(input_sized, params.input_mean));
    const Tensor4& act = tr.acts[feature_layer_index(cfg) + 1];
    return act.v;
}

// ---------------------------------------------------------------------------
// Training on sequence manifests: image <TAB> flo_1 ... flo_T.

struct MultiFrameTrainOptions {
    std::string checkpoint_out;
    std::string loss_log_out;
};

struct MultiFrameTrainResult {
    NetworkParams params;
    std::vector<std::array<double, 3>> loss_log;
    int skipped = 0;
};

// Core loop over already-extracted features and frame labels; the manifest
// front end below feeds it.
inline MultiFrameTrainResult train_multiframe_core(
    const std::vector<std::vector<double>>& features,
    const std::vector<std::vector<int>>& labels, const MultiFrameSpec& spec,
    const SgdConfig& sgd, int log_every = 100) {
    spec.validate();
    sgd.validate();
    if (features.empty() || features.size() != labels.size())
        throw DataError("multiframe training: empty or inconsistent feature/label sets");
    MultiFrameTrainResult result;
    result.params = init_multiframe(spec, sgd.seed);
    Rng data_rng(split_seed(sgd.seed, 0x5e9));
    Gradients grads, velocity;
    grads.ensure_like(result.params);
    const int batch = std::max(1, std::min<int>(sgd.batch, static_cast<int>(features.size())));
    for (int iter = 0; iter < sgd.max_iters; ++iter) {
        grads.zero();
        double loss = 0.0;
        for (int b = 0; b < batch; ++b) {
            const std::size_t pick = data_rng.index(features.size());
            auto tr = multiframe_forward(features[pick], result.params, spec);
            loss += multiframe_backward(tr, labels[pick], result.params, spec, grads,
                                        1.0 / batch);
        }
        loss /= batch;
        if (!std::isfinite(loss))
            throw NumericError("multiframe loss became non-finite at iteration " +
                               std::to_string(iter));
        if (iter % log_every == 0 || iter + 1 == sgd.max_iters)
            result.loss_log.push_back(
                {static_cast<double>(iter), loss, learning_rate(sgd, iter)});
        sgd_step(result.params, grads, sgd, &velocity);
    }
    return result;
}

// Pools each future flow file to the frame codebook's grid and assigns the
// nearest centroid as that step's label.
inline std::vector<int> frame_labels_for(const ManifestEntry& e, const FrameCodebook& fcb) {
    std::vector<int> labels;
    labels.reserve(e.flow_paths.size());
    for (const auto& p : e.flow_paths) {
        const FlowField dense = read_flo(p);
        labels.push_back(nearest_frame(fcb, cell_mean_field(dense, fcb.m, fcb.n)));
    }
    return labels;
}

inline MultiFrameTrainResult train_multiframe(
    const std::vector<ManifestEntry>& entries, const FrameCodebook& fcb, int steps, int hidden,
    const ModelConfig& single_cfg, const NetworkParams& single_params, const SgdConfig& sgd,
    std::ostream& log, const MultiFrameTrainOptions& opt = {}) {
    const NetworkSpec single_spec = build_network_spec(single_cfg);
    check_params(single_spec, single_params);

    std::vector<std::vector<double>> features;
    std::vector<std::vector<int>> labels;
    int skipped = 0;
    for (const auto& e : entries) {
        if (static_cast<int>(e.flow_paths.size()) != steps) {
            ++skipped;
            log << "skipping " << e.image_path << ": has " << e.flow_paths.size()
                << " flow frames, expected " << steps << "\n";
            continue;
        }
        try {
            Example ex;
            ex.image = read_image(e.image_path);
            ex.flow = FlowField(ex.image.width, ex.image.height);
            ex = fit_to_input(std::move(ex), single_cfg.input_w, single_cfg.input_h);
            features.push_back(extract_features(single_cfg, single_spec, single_params, ex.image));
            labels.push_back(frame_labels_for(e, fcb));
        } catch (const DataError& err) {
            ++skipped;
            log << "skipping " << e.image_path << ": " << err.what() << "\n";
        }
    }
    if (features.empty())
        throw DataError("all " + std::to_string(entries.size()) + " sequence records failed to load");
    if (skipped > 0) log << "skipped " << skipped << " of " << entries.size() << " records\n";

    MultiFrameSpec spec;
    spec.steps = steps;
    spec.hidden = hidden;
    spec.frame_clusters = fcb.size();
    spec.feature_dim = static_cast<int>(features[0].size());

    auto result = train_multiframe_core(features, labels, spec, sgd);
    result.skipped = skipped;
    if (!opt.checkpoint_out.empty())
        save_params(opt.checkpoint_out, result.params, kMultiFrameMagic);
    if (!opt.loss_log_out.empty()) write_loss_log(opt.loss_log_out, result.loss_log);
    return result;
}

// ---------------------------------------------------------------------------
// Prediction: per step, the argmax centroid frame (ties to the lowest index)
// as the coarse flow, with a color rendering per frame.

struct MultiFramePrediction {
    std::vector<int> labels;
    std::vector<std::vector<double>> probs;
    std::vector<FlowField> frames;
    std::vector<Image> viz;
};

inline MultiFramePrediction predict_multiframe(const std::vector<double>& features,
                                               const NetworkParams& params,
                                               const MultiFrameSpec& spec,
                                               const FrameCodebook& fcb) {
    if (fcb.size() != spec.frame_clusters)
        throw DataError("frame codebook has " + std::to_string(fcb.size()) +
                        " centroids, checkpoint expects " + std::to_string(spec.frame_clusters));
    auto tr = multiframe_forward(features, params, spec);
    MultiFramePrediction out;
    for (int t = 0; t < spec.steps; ++t) {
        int best = 0;
        for (int k = 1; k < spec.frame_clusters; ++k)
            if (tr.probs[t][k] > tr.probs[t][best]) best = k;
        out.labels.push_back(best);
        out.probs.push_back(tr.probs[t]);
        out.frames.push_back(frame_centroid_field(fcb, best));
        out.viz.push_back(visualize_flow(out.frames.back()));
    }
    return out;
}

}  // namespace flowpred
