#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "flowpred/layers.hpp"
#include "flowpred/rng.hpp"
#include "flowpred/tensor.hpp"

namespace flowpred {

// A fixed feed-forward chain. Layer names are assigned when the spec is
// built so shape diagnostics can point at the offending layer.
struct NetworkSpec {
    Dims input;                // input.n is a placeholder; batch comes from the data
    std::vector<LayerSpec> layers;
};

inline NetworkSpec make_network_spec(Dims input, std::vector<LayerSpec> layers) {
    NetworkSpec spec{input, std::move(layers)};
    int conv = 0, fc = 0, pool = 0, lrn = 0, relu = 0;
    for (auto& l : spec.layers) {
        if (!l.name.empty()) continue;
        switch (l.kind) {
            case LayerKind::Conv: l.name = "conv" + std::to_string(++conv); break;
            case LayerKind::FullyConnected: l.name = "fc" + std::to_string(++fc); break;
            case LayerKind::MaxPool: l.name = "pool" + std::to_string(++pool); break;
            case LayerKind::Lrn: l.name = "norm" + std::to_string(++lrn); break;
            case LayerKind::Relu: l.name = "relu" + std::to_string(++relu); break;
            case LayerKind::SpatialSoftmax: l.name = "prob"; break;
        }
    }
    return spec;
}

// Per-layer output dims for a given batch size; validates the whole chain.
inline std::vector<Dims> shape_trace(const NetworkSpec& spec, int batch) {
    std::vector<Dims> dims;
    Dims d = spec.input;
    d.n = batch;
    dims.push_back(d);
    for (const auto& l : spec.layers) {
        d = infer_dims(l, d);
        dims.push_back(d);
    }
    return dims;
}

// All learnable state. Tensors are stored in layer order, two per Conv/FC
// layer (weight then bias). `input_mean` is the per-channel training-set mean
// subtracted from inputs; it rides along in the checkpoint.
struct NetworkParams {
    std::uint64_t iteration = 0;
    std::vector<std::string> names;
    std::vector<Tensor4> tensors;
    std::vector<double> input_mean;

    std::size_t count() const {
        std::size_t s = 0;
        for (const auto& t : tensors) s += t.size();
        return s;
    }
};

inline int fan_in_of(const LayerSpec& s, const Dims& in) {
    if (s.kind == LayerKind::Conv) return in.c * s.ksize * s.ksize;
    return in.c * in.h * in.w;
}

// Weights ~ U[-a, a] with a = sqrt(3 / fan_in), biases zero. One stream in
// layer order keeps identical seeds bit-identical.
inline NetworkParams xavier_init(const NetworkSpec& spec, std::uint64_t seed) {
    NetworkParams params;
    Rng rng(split_seed(seed, 0x1a17));
    Dims d = spec.input;
    d.n = 1;
    for (const auto& l : spec.layers) {
        if (has_params(l)) {
            auto [wd, bd] = param_dims(l, d);
            Tensor4 w(wd), b(bd);
            const double a = std::sqrt(3.0 / fan_in_of(l, d));
            for (auto& x : w.v) x = rng.uniform(-a, a);
            params.names.push_back(l.name + ".weight");
            params.tensors.push_back(std::move(w));
            params.names.push_back(l.name + ".bias");
            params.tensors.push_back(std::move(b));
        }
        d = infer_dims(l, d);
    }
    return params;
}

// Activations retained by a forward pass; backward consumes them.
struct ForwardTrace {
    std::vector<Tensor4> acts;                    // acts[0] = input, acts[i+1] = layer i output
    std::vector<std::vector<std::size_t>> pool_argmax;  // parallel to layers
};

inline void check_params(const NetworkSpec& spec, const NetworkParams& params) {
    std::size_t cursor = 0;
    Dims d = spec.input;
    d.n = 1;
    for (const auto& l : spec.layers) {
        if (has_params(l)) {
            auto [wd, bd] = param_dims(l, d);
            if (cursor + 1 >= params.tensors.size())
                throw ShapeError("missing parameters for layer " + layer_label(l));
            if (!(params.tensors[cursor].dims == wd) || !(params.tensors[cursor + 1].dims == bd))
                throw ShapeError("layer " + layer_label(l) + ": checkpoint tensor shape " +
                                 params.tensors[cursor].dims.str() + " does not match spec " +
                                 wd.str());
            cursor += 2;
        }
        d = infer_dims(l, d);
    }
    if (cursor != params.tensors.size())
        throw ShapeError("checkpoint holds " + std::to_string(params.tensors.size()) +
                         " tensors, spec expects " + std::to_string(cursor));
}

// Runs the chain, retaining every intermediate for backward.
inline ForwardTrace net_forward(const NetworkSpec& spec, const NetworkParams& params,
                                Tensor4 input) {
    if (input.dims.c != spec.input.c || input.dims.h != spec.input.h ||
        input.dims.w != spec.input.w)
        throw ShapeError("network input " + input.dims.str() + " does not match spec input " +
                         spec.input.str());
    ForwardTrace tr;
    tr.acts.reserve(spec.layers.size() + 1);
    tr.pool_argmax.resize(spec.layers.size());
    tr.acts.push_back(std::move(input));
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const Tensor4& x = tr.acts.back();
        switch (l.kind) {
            case LayerKind::Conv:
                tr.acts.push_back(conv_forward(x, params.tensors[cursor], params.tensors[cursor + 1], l));
                cursor += 2;
                break;
            case LayerKind::FullyConnected:
                tr.acts.push_back(fc_forward(x, params.tensors[cursor], params.tensors[cursor + 1]));
                cursor += 2;
                break;
            case LayerKind::Lrn:
                tr.acts.push_back(lrn_forward(x, l));
                break;
            case LayerKind::MaxPool: {
                auto r = maxpool_forward(x, l);
                tr.pool_argmax[i] = std::move(r.argmax);
                tr.acts.push_back(std::move(r.out));
                break;
            }
            case LayerKind::Relu:
                tr.acts.push_back(relu_forward(x));
                break;
            case LayerKind::SpatialSoftmax:
                tr.acts.push_back(spatial_softmax_forward(x, l));
                break;
        }
    }
    return tr;
}

// Gradients for every parameter tensor, aligned with NetworkParams::tensors.
struct Gradients {
    std::vector<Tensor4> tensors;

    void ensure_like(const NetworkParams& params) {
        if (tensors.size() == params.tensors.size()) return;
        tensors.clear();
        tensors.reserve(params.tensors.size());
        for (const auto& t : params.tensors) tensors.emplace_back(t.dims);
    }
    void zero() {
        for (auto& t : tensors) t.fill(0.0);
    }
};

// Backpropagates `dout` through the trace, accumulating parameter gradients
// into `grads`. `dout` is the gradient w.r.t. the output of layer
// (size - 1 - skip_top); skip_top = 1 lets a fused loss inject its gradient
// below a terminal softmax.
inline Tensor4 net_backward(const NetworkSpec& spec, const NetworkParams& params,
                            const ForwardTrace& tr, Tensor4 dout, Gradients& grads,
                            int skip_top = 0) {
    if (tr.acts.size() != spec.layers.size() + 1)
        throw ShapeError("backward called without a matching forward");
    if (skip_top < 0 || static_cast<std::size_t>(skip_top) > spec.layers.size())
        throw ShapeError("net_backward: invalid skip_top");
    grads.ensure_like(params);
    std::vector<std::size_t> cursors(spec.layers.size(), 0);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        cursors[i] = cursor;
        if (has_params(spec.layers[i])) cursor += 2;
    }
    Tensor4 d = std::move(dout);
    for (std::size_t ri = spec.layers.size() - skip_top; ri-- > 0;) {
        const auto& l = spec.layers[ri];
        const Tensor4& x = tr.acts[ri];
        switch (l.kind) {
            case LayerKind::Conv: {
                auto g = conv_backward(x, params.tensors[cursors[ri]], l, d);
                for (std::size_t k = 0; k < g.dw.size(); ++k)
                    grads.tensors[cursors[ri]].v[k] += g.dw.v[k];
                for (std::size_t k = 0; k < g.db.size(); ++k)
                    grads.tensors[cursors[ri] + 1].v[k] += g.db.v[k];
                d = std::move(g.din);
                break;
            }
            case LayerKind::FullyConnected: {
                auto g = fc_backward(x, params.tensors[cursors[ri]], d);
                for (std::size_t k = 0; k < g.dw.size(); ++k)
                    grads.tensors[cursors[ri]].v[k] += g.dw.v[k];
                for (std::size_t k = 0; k < g.db.size(); ++k)
                    grads.tensors[cursors[ri] + 1].v[k] += g.db.v[k];
                d = std::move(g.din);
                break;
            }
            case LayerKind::Lrn:
                d = lrn_backward(x, l, d);
                break;
            case LayerKind::MaxPool:
                d = maxpool_backward(x.dims, tr.pool_argmax[ri], d);
                break;
            case LayerKind::Relu:
                d = relu_backward(x, d);
                break;
            case LayerKind::SpatialSoftmax:
                d = spatial_softmax_backward(tr.acts[ri + 1], d, l);
                break;
        }
    }
    return d;  // gradient w.r.t. the network input
}

}  // namespace flowpred
