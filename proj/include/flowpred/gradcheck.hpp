#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flowpred/net.hpp"
#include "flowpred/rng.hpp"
#include "flowpred/tensor.hpp"

namespace flowpred {

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central finite differences of a scalar function w.r.t. one coordinate of a
// buffer the function reads.
inline double finite_difference(std::vector<double>& buf, std::size_t i,
                                const std::function<double()>& f, double eps = 1e-4) {
    const double saved = buf[i];
    buf[i] = saved + eps;
    const double hi = f();
    buf[i] = saved - eps;
    const double lo = f();
    buf[i] = saved;
    return (hi - lo) / (2.0 * eps);
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;  // where the max occurred
};

// Checks a layer in isolation: scalarizes the output as sum(G .* out) with a
// fixed random G, differentiates analytically via the provided backward, and
// compares every input/parameter coordinate against finite differences.
inline void gradcheck_compare(GradCheckResult& r, const std::string& tag,
                              std::vector<double>& buf, const std::vector<double>& analytic,
                              const std::function<double()>& f, double eps = 1e-4) {
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double fd = finite_difference(buf, i, f, eps);
        const double e = relative_error(analytic[i], fd);
        ++r.checked;
        if (e > r.max_rel_error) {
            r.max_rel_error = e;
            r.worst = tag + "[" + std::to_string(i) + "]";
        }
    }
}

namespace detail {

inline Tensor4 gradcheck_random(Dims d, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4 t(d);
    for (auto& x : t.v) x = rng.uniform(lo, hi);
    return t;
}

inline double gradcheck_weighted(const Tensor4& g, const Tensor4& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += g.v[i] * y.v[i];
    return s;
}

}  // namespace detail

// Checks every layer kind in isolation at small randomized shapes, comparing
// analytic backward passes against central finite differences of the
// weighted-sum scalarization.
inline GradCheckResult gradcheck_layers(std::uint64_t seed) {
    using detail::gradcheck_random;
    using detail::gradcheck_weighted;
    Rng rng(split_seed(seed, 0x6c61));
    GradCheckResult total;
    auto merge = [&total](const GradCheckResult& r) {
        total.checked += r.checked;
        if (r.max_rel_error > total.max_rel_error) {
            total.max_rel_error = r.max_rel_error;
            total.worst = r.worst;
        }
    };

    {  // conv, strided and padded
        auto spec = LayerSpec::conv(3, 3, 2, 1);
        spec.name = "conv";
        Tensor4 in = gradcheck_random({2, 2, 6, 5}, rng);
        Tensor4 w = gradcheck_random({3, 2, 3, 3}, rng);
        Tensor4 b = gradcheck_random({3, 1, 1, 1}, rng);
        Tensor4 g = gradcheck_random(infer_dims(spec, in.dims), rng);
        auto grads = conv_backward(in, w, spec, g);
        auto f = [&] { return gradcheck_weighted(g, conv_forward(in, w, b, spec)); };
        GradCheckResult r;
        gradcheck_compare(r, "conv.in", in.v, grads.din.v, f);
        gradcheck_compare(r, "conv.w", w.v, grads.dw.v, f);
        gradcheck_compare(r, "conv.b", b.v, grads.db.v, f);
        merge(r);
    }
    {  // lrn
        auto spec = LayerSpec::lrn(5, 0.5, 0.75, 2.0);
        Tensor4 in = gradcheck_random({1, 6, 3, 3}, rng, 0.2, 1.5);
        Tensor4 g = gradcheck_random(in.dims, rng);
        auto din = lrn_backward(in, spec, g);
        auto f = [&] { return gradcheck_weighted(g, lrn_forward(in, spec)); };
        GradCheckResult r;
        gradcheck_compare(r, "lrn.in", in.v, din.v, f);
        merge(r);
    }
    {  // maxpool over well-separated values
        auto spec = LayerSpec::maxpool(3, 2);
        Tensor4 in(1, 2, 6, 6);
        std::vector<int> order(in.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(order);
        for (std::size_t i = 0; i < in.size(); ++i) in.v[i] = 0.05 * order[i];
        auto fwd = maxpool_forward(in, spec);
        Tensor4 g = gradcheck_random(fwd.out.dims, rng);
        auto din = maxpool_backward(in.dims, fwd.argmax, g);
        auto f = [&] { return gradcheck_weighted(g, maxpool_forward(in, spec).out); };
        GradCheckResult r;
        gradcheck_compare(r, "maxpool.in", in.v, din.v, f);
        merge(r);
    }
    {  // fully connected
        Tensor4 in = gradcheck_random({3, 4, 2, 2}, rng);
        Tensor4 w = gradcheck_random({5, 16, 1, 1}, rng);
        Tensor4 b = gradcheck_random({5, 1, 1, 1}, rng);
        Tensor4 g = gradcheck_random({3, 5, 1, 1}, rng);
        auto grads = fc_backward(in, w, g);
        auto f = [&] { return gradcheck_weighted(g, fc_forward(in, w, b)); };
        GradCheckResult r;
        gradcheck_compare(r, "fc.in", in.v, grads.din.v, f);
        gradcheck_compare(r, "fc.w", w.v, grads.dw.v, f);
        gradcheck_compare(r, "fc.b", b.v, grads.db.v, f);
        merge(r);
    }
    {  // relu away from the kink
        Tensor4 in = gradcheck_random({2, 3, 4, 4}, rng);
        for (auto& x : in.v)
            if (std::abs(x) < 1e-3) x = 0.5;
        Tensor4 g = gradcheck_random(in.dims, rng);
        auto din = relu_backward(in, g);
        auto f = [&] { return gradcheck_weighted(g, relu_forward(in)); };
        GradCheckResult r;
        gradcheck_compare(r, "relu.in", in.v, din.v, f);
        merge(r);
    }
    {  // spatial softmax
        auto spec = LayerSpec::spatial_softmax(6, 5);
        Tensor4 in = gradcheck_random({1, 30, 1, 1}, rng, -2.0, 2.0);
        Tensor4 g = gradcheck_random(in.dims, rng);
        auto probs = spatial_softmax_forward(in, spec);
        auto din = spatial_softmax_backward(probs, g, spec);
        auto f = [&] { return gradcheck_weighted(g, spatial_softmax_forward(in, spec)); };
        GradCheckResult r;
        gradcheck_compare(r, "softmax.in", in.v, din.v, f);
        merge(r);
    }
    return total;
}

// Full-network check: compares analytic gradients against finite differences
// on `samples` randomly chosen parameter coordinates. `loss_value` maps the
// final activation to a scalar; `loss_grad` is its analytic gradient w.r.t.
// that activation.
inline GradCheckResult gradcheck_network(
    const NetworkSpec& spec, NetworkParams& params, const Tensor4& input,
    const std::function<double(const Tensor4&)>& loss_value,
    const std::function<Tensor4(const Tensor4&)>& loss_grad, int samples, std::uint64_t seed,
    double eps = 1e-4) {
    Gradients grads;
    grads.ensure_like(params);
    grads.zero();
    {
        ForwardTrace tr = net_forward(spec, params, input);
        Tensor4 dout = loss_grad(tr.acts.back());
        net_backward(spec, params, tr, std::move(dout), grads);
    }
    const auto eval = [&]() {
        ForwardTrace tr = net_forward(spec, params, input);
        return loss_value(tr.acts.back());
    };
    GradCheckResult r;
    Rng rng(split_seed(seed, 0x9c));
    for (int s = 0; s < samples; ++s) {
        const std::size_t ti = rng.index(params.tensors.size());
        auto& buf = params.tensors[ti].v;
        const std::size_t ci = rng.index(buf.size());
        const double fd = finite_difference(buf, ci, eval, eps);
        const double e = relative_error(grads.tensors[ti].v[ci], fd);
        ++r.checked;
        if (e > r.max_rel_error) {
            r.max_rel_error = e;
            r.worst = params.names[ti] + "[" + std::to_string(ci) + "]";
        }
    }
    return r;
}

}  // namespace flowpred
