#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "flowpred/error.hpp"
#include "flowpred/tensor.hpp"

namespace flowpred {

enum class LayerKind { Conv, Lrn, MaxPool, FullyConnected, Relu, SpatialSoftmax };

// One layer of the fixed layer vocabulary. Only the fields for the active
// kind are meaningful.
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::string name;

    // Conv: `kernels` filters of size `ksize` x `ksize`.
    int kernels = 0, ksize = 0, stride = 1, pad = 0;

    // LRN across channels.
    int window = 5;
    double alpha = 1e-4, beta = 0.75, k_bias = 1.0;

    // MaxPool.
    int pool_size = 3, pool_stride = 2;

    // FullyConnected.
    int out_neurons = 0;

    // SpatialSoftmax: independent softmax over `classes` at each of `cells`.
    int cells = 0, classes = 0;

    static LayerSpec conv(int kernels, int ksize, int stride = 1, int pad = 0) {
        LayerSpec s;
        s.kind = LayerKind::Conv;
        s.kernels = kernels;
        s.ksize = ksize;
        s.stride = stride;
        s.pad = pad;
        return s;
    }
    static LayerSpec lrn(int window = 5, double alpha = 1e-4, double beta = 0.75,
                         double k_bias = 1.0) {
        LayerSpec s;
        s.kind = LayerKind::Lrn;
        s.window = window;
        s.alpha = alpha;
        s.beta = beta;
        s.k_bias = k_bias;
        return s;
    }
    static LayerSpec maxpool(int size = 3, int stride = 2) {
        LayerSpec s;
        s.kind = LayerKind::MaxPool;
        s.pool_size = size;
        s.pool_stride = stride;
        return s;
    }
    static LayerSpec fc(int out_neurons) {
        LayerSpec s;
        s.kind = LayerKind::FullyConnected;
        s.out_neurons = out_neurons;
        return s;
    }
    static LayerSpec relu() {
        LayerSpec s;
        s.kind = LayerKind::Relu;
        return s;
    }
    static LayerSpec spatial_softmax(int cells, int classes) {
        LayerSpec s;
        s.kind = LayerKind::SpatialSoftmax;
        s.cells = cells;
        s.classes = classes;
        return s;
    }
};

inline std::string layer_label(const LayerSpec& s) {
    return s.name.empty() ? std::string("<unnamed layer>") : s.name;
}

inline void validate(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::Conv:
            if (s.kernels < 1 || s.ksize < 1 || s.stride < 1 || s.pad < 0)
                throw ShapeError("invalid conv spec for layer " + layer_label(s));
            break;
        case LayerKind::Lrn:
            if (s.window < 1 || s.window % 2 == 0)
                throw ShapeError("LRN window must be odd and >= 1 in layer " + layer_label(s));
            if (s.k_bias <= 0.0)
                throw ShapeError("LRN k must be > 0 in layer " + layer_label(s));
            break;
        case LayerKind::MaxPool:
            if (s.pool_size < 1 || s.pool_stride < 1)
                throw ShapeError("invalid pool spec for layer " + layer_label(s));
            break;
        case LayerKind::FullyConnected:
            if (s.out_neurons < 1)
                throw ShapeError("FC layer " + layer_label(s) + " needs >= 1 output");
            break;
        case LayerKind::SpatialSoftmax:
            if (s.cells < 1 || s.classes < 1)
                throw ShapeError("spatial softmax needs cells >= 1 and classes >= 1 in layer " +
                                 layer_label(s));
            break;
        case LayerKind::Relu:
            break;
    }
}

inline int out_extent(int in, int pad, int size, int stride) {
    return (in + 2 * pad - size) / stride + 1;
}

// Output dims of one layer given its input dims. Throws naming the layer when
// the shapes cannot compose.
inline Dims infer_dims(const LayerSpec& s, const Dims& in) {
    validate(s);
    switch (s.kind) {
        case LayerKind::Conv: {
            const int oh = out_extent(in.h, s.pad, s.ksize, s.stride);
            const int ow = out_extent(in.w, s.pad, s.ksize, s.stride);
            if (oh < 1 || ow < 1)
                throw ShapeError("layer " + layer_label(s) + ": conv output would be " +
                                 std::to_string(oh) + "x" + std::to_string(ow) +
                                 " for input " + in.str());
            return {in.n, s.kernels, oh, ow};
        }
        case LayerKind::MaxPool: {
            const int oh = out_extent(in.h, 0, s.pool_size, s.pool_stride);
            const int ow = out_extent(in.w, 0, s.pool_size, s.pool_stride);
            if (oh < 1 || ow < 1)
                throw ShapeError("layer " + layer_label(s) + ": pool output would be " +
                                 std::to_string(oh) + "x" + std::to_string(ow) +
                                 " for input " + in.str());
            return {in.n, in.c, oh, ow};
        }
        case LayerKind::FullyConnected:
            return {in.n, s.out_neurons, 1, 1};
        case LayerKind::SpatialSoftmax: {
            const long flat = static_cast<long>(in.c) * in.h * in.w;
            if (flat != static_cast<long>(s.cells) * s.classes)
                throw ShapeError("layer " + layer_label(s) + ": expects " +
                                 std::to_string(static_cast<long>(s.cells) * s.classes) +
                                 " logits, got " + std::to_string(flat));
            return in;
        }
        case LayerKind::Lrn:
        case LayerKind::Relu:
            return in;
    }
    throw ShapeError("unreachable layer kind");
}

inline bool has_params(const LayerSpec& s) {
    return s.kind == LayerKind::Conv || s.kind == LayerKind::FullyConnected;
}

inline std::pair<Dims, Dims> param_dims(const LayerSpec& s, const Dims& in) {
    if (s.kind == LayerKind::Conv)
        return {{s.kernels, in.c, s.ksize, s.ksize}, {s.kernels, 1, 1, 1}};
    if (s.kind == LayerKind::FullyConnected)
        return {{s.out_neurons, in.c * in.h * in.w, 1, 1}, {s.out_neurons, 1, 1, 1}};
    return {{}, {}};
}

namespace detail {

// Unrolls conv windows of one batch item into a (c*k*k) x (oh*ow) matrix.
inline void im2col(const double* in, int c, int h, int w, int ksize, int stride, int pad,
                   int oh, int ow, double* cols) {
    const std::size_t span = static_cast<std::size_t>(oh) * ow;
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = in + static_cast<std::size_t>(ch) * h * w;
        for (int di = 0; di < ksize; ++di) {
            for (int dj = 0; dj < ksize; ++dj) {
                double* row = cols + ((static_cast<std::size_t>(ch) * ksize + di) * ksize + dj) * span;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + di;
                    double* dst = row + static_cast<std::size_t>(oy) * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + ow, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + dj;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* cols, int c, int h, int w, int ksize, int stride, int pad,
                       int oh, int ow, double* out) {
    const std::size_t span = static_cast<std::size_t>(oh) * ow;
    for (int ch = 0; ch < c; ++ch) {
        double* plane = out + static_cast<std::size_t>(ch) * h * w;
        for (int di = 0; di < ksize; ++di) {
            for (int dj = 0; dj < ksize; ++dj) {
                const double* row =
                    cols + ((static_cast<std::size_t>(ch) * ksize + di) * ksize + dj) * span;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + di;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = plane + static_cast<std::size_t>(iy) * w;
                    const double* src = row + static_cast<std::size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + dj;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline Tensor4 conv_forward(const Tensor4& in, const Tensor4& w, const Tensor4& b,
                            const LayerSpec& s) {
    if (w.dims.c != in.dims.c || w.dims.n != s.kernels || w.dims.h != s.ksize ||
        w.dims.w != s.ksize || b.dims.n != s.kernels)
        throw ShapeError("layer " + layer_label(s) + ": weight shape " + w.dims.str() +
                         " does not match input " + in.dims.str());
    const Dims od = infer_dims(s, in.dims);
    Tensor4 out(od);
    const int css = in.dims.c * s.ksize * s.ksize;
    const std::size_t span = static_cast<std::size_t>(od.h) * od.w;
    std::vector<double> cols(static_cast<std::size_t>(css) * span);
    for (int bi = 0; bi < in.dims.n; ++bi) {
        detail::im2col(in.data() + in.idx(bi, 0, 0, 0), in.dims.c, in.dims.h, in.dims.w,
                       s.ksize, s.stride, s.pad, od.h, od.w, cols.data());
        double* o = out.data() + out.idx(bi, 0, 0, 0);
        for (int k = 0; k < s.kernels; ++k)
            std::fill(o + k * span, o + (k + 1) * span, b.v[k]);
        detail::gemm_nn(w.data(), cols.data(), o, s.kernels, css, static_cast<int>(span));
    }
    return out;
}

struct ConvGrads {
    Tensor4 dw, db, din;
};

inline ConvGrads conv_backward(const Tensor4& in, const Tensor4& w, const LayerSpec& s,
                               const Tensor4& dout) {
    const Dims od = infer_dims(s, in.dims);
    if (!(dout.dims == od))
        throw ShapeError("layer " + layer_label(s) + ": upstream gradient " + dout.dims.str() +
                         " does not match forward output " + od.str());
    ConvGrads g{Tensor4(w.dims), Tensor4(s.kernels, 1, 1, 1), Tensor4(in.dims)};
    const int css = in.dims.c * s.ksize * s.ksize;
    const std::size_t span = static_cast<std::size_t>(od.h) * od.w;
    std::vector<double> cols(static_cast<std::size_t>(css) * span);
    std::vector<double> dcols(cols.size());
    for (int bi = 0; bi < in.dims.n; ++bi) {
        const double* dy = dout.data() + dout.idx(bi, 0, 0, 0);
        detail::im2col(in.data() + in.idx(bi, 0, 0, 0), in.dims.c, in.dims.h, in.dims.w,
                       s.ksize, s.stride, s.pad, od.h, od.w, cols.data());
        // dW += dY * cols^T, db += row sums of dY, dX += col2im(W^T * dY)
        detail::gemm_nt(dy, cols.data(), g.dw.data(), s.kernels, static_cast<int>(span), css);
        for (int k = 0; k < s.kernels; ++k) {
            double sum = 0.0;
            const double* r = dy + k * span;
            for (std::size_t i = 0; i < span; ++i) sum += r[i];
            g.db.v[k] += sum;
        }
        std::fill(dcols.begin(), dcols.end(), 0.0);
        detail::gemm_tn(w.data(), dy, dcols.data(), css, s.kernels, static_cast<int>(span));
        detail::col2im_add(dcols.data(), in.dims.c, in.dims.h, in.dims.w, s.ksize, s.stride,
                           s.pad, od.h, od.w, g.din.data() + g.din.idx(bi, 0, 0, 0));
    }
    return g;
}

inline Tensor4 lrn_forward(const Tensor4& in, const LayerSpec& s) {
    validate(s);
    Tensor4 out(in.dims);
    const int c = in.dims.c, half = s.window / 2;
    const std::size_t plane = static_cast<std::size_t>(in.dims.h) * in.dims.w;
    for (int bi = 0; bi < in.dims.n; ++bi) {
        const double* ib = in.data() + in.idx(bi, 0, 0, 0);
        double* ob = out.data() + out.idx(bi, 0, 0, 0);
        for (std::size_t p = 0; p < plane; ++p) {
            for (int ch = 0; ch < c; ++ch) {
                const int lo = std::max(0, ch - half), hi = std::min(c - 1, ch + half);
                double ss = 0.0;
                for (int cc = lo; cc <= hi; ++cc) {
                    const double x = ib[cc * plane + p];
                    ss += x * x;
                }
                const double denom = s.k_bias + (s.alpha / s.window) * ss;
                ob[ch * plane + p] = ib[ch * plane + p] * std::pow(denom, -s.beta);
            }
        }
    }
    return out;
}

inline Tensor4 lrn_backward(const Tensor4& in, const LayerSpec& s, const Tensor4& dout) {
    // out_c = x_c * S_c^-beta with S_c = k + (alpha/n) * sum_{c' in win(c)} x_c'^2.
    // dx_e = dy_e * S_e^-beta - (2 alpha beta / n) * x_e * sum_{c: e in win(c)} dy_c x_c S_c^-(beta+1)
    validate(s);
    if (!(dout.dims == in.dims))
        throw ShapeError("layer " + layer_label(s) + ": LRN gradient shape mismatch");
    Tensor4 din(in.dims);
    const int c = in.dims.c, half = s.window / 2;
    const std::size_t plane = static_cast<std::size_t>(in.dims.h) * in.dims.w;
    std::vector<double> scale(c), weighted(c);
    for (int bi = 0; bi < in.dims.n; ++bi) {
        const double* ib = in.data() + in.idx(bi, 0, 0, 0);
        const double* gb = dout.data() + dout.idx(bi, 0, 0, 0);
        double* db = din.data() + din.idx(bi, 0, 0, 0);
        for (std::size_t p = 0; p < plane; ++p) {
            for (int ch = 0; ch < c; ++ch) {
                const int lo = std::max(0, ch - half), hi = std::min(c - 1, ch + half);
                double ss = 0.0;
                for (int cc = lo; cc <= hi; ++cc) {
                    const double x = ib[cc * plane + p];
                    ss += x * x;
                }
                scale[ch] = s.k_bias + (s.alpha / s.window) * ss;
                weighted[ch] =
                    gb[ch * plane + p] * ib[ch * plane + p] * std::pow(scale[ch], -s.beta - 1.0);
            }
            for (int ch = 0; ch < c; ++ch) {
                const int lo = std::max(0, ch - half), hi = std::min(c - 1, ch + half);
                double acc = 0.0;
                for (int cc = lo; cc <= hi; ++cc) acc += weighted[cc];
                db[ch * plane + p] = gb[ch * plane + p] * std::pow(scale[ch], -s.beta) -
                                     (2.0 * s.alpha * s.beta / s.window) * ib[ch * plane + p] * acc;
            }
        }
    }
    return din;
}

struct PoolResult {
    Tensor4 out;
    // Flat index into the input tensor of the max of each output cell; ties
    // resolve to the first element in window scan order.
    std::vector<std::size_t> argmax;
};

inline PoolResult maxpool_forward(const Tensor4& in, const LayerSpec& s) {
    const Dims od = infer_dims(s, in.dims);
    PoolResult r{Tensor4(od), std::vector<std::size_t>(od.count())};
    std::size_t o = 0;
    for (int bi = 0; bi < od.n; ++bi)
        for (int ch = 0; ch < od.c; ++ch)
            for (int oy = 0; oy < od.h; ++oy)
                for (int ox = 0; ox < od.w; ++ox, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_idx = 0;
                    for (int di = 0; di < s.pool_size; ++di)
                        for (int dj = 0; dj < s.pool_size; ++dj) {
                            const int iy = oy * s.pool_stride + di;
                            const int ix = ox * s.pool_stride + dj;
                            if (iy >= in.dims.h || ix >= in.dims.w) continue;
                            const std::size_t ii = in.idx(bi, ch, iy, ix);
                            if (in.v[ii] > best) {
                                best = in.v[ii];
                                best_idx = ii;
                            }
                        }
                    r.out.v[o] = best;
                    r.argmax[o] = best_idx;
                }
    return r;
}

inline Tensor4 maxpool_backward(const Dims& in_dims, const std::vector<std::size_t>& argmax,
                                const Tensor4& dout) {
    if (argmax.size() != dout.size())
        throw ShapeError("maxpool backward called without a matching forward");
    Tensor4 din(in_dims);
    for (std::size_t o = 0; o < argmax.size(); ++o) din.v[argmax[o]] += dout.v[o];
    return din;
}

inline Tensor4 relu_forward(const Tensor4& in) {
    Tensor4 out(in.dims);
    for (std::size_t i = 0; i < in.size(); ++i) out.v[i] = in.v[i] > 0.0 ? in.v[i] : 0.0;
    return out;
}

inline Tensor4 relu_backward(const Tensor4& in, const Tensor4& dout) {
    if (!(dout.dims == in.dims)) throw ShapeError("relu gradient shape mismatch");
    Tensor4 din(in.dims);
    for (std::size_t i = 0; i < in.size(); ++i) din.v[i] = in.v[i] > 0.0 ? dout.v[i] : 0.0;
    return din;
}

inline Tensor4 fc_forward(const Tensor4& in, const Tensor4& w, const Tensor4& b) {
    const int n_in = in.dims.c * in.dims.h * in.dims.w;
    if (w.dims.c != n_in || b.dims.n != w.dims.n)
        throw ShapeError("FC weight shape " + w.dims.str() + " does not match input " +
                         in.dims.str());
    Tensor4 out(in.dims.n, w.dims.n, 1, 1);
    for (int bi = 0; bi < in.dims.n; ++bi)
        for (int j = 0; j < w.dims.n; ++j) out.v[static_cast<std::size_t>(bi) * w.dims.n + j] = b.v[j];
    detail::gemm_nt(in.data(), w.data(), out.data(), in.dims.n, n_in, w.dims.n);
    return out;
}

struct FcGrads {
    Tensor4 dw, db, din;
};

inline FcGrads fc_backward(const Tensor4& in, const Tensor4& w, const Tensor4& dout) {
    const int n_in = in.dims.c * in.dims.h * in.dims.w;
    const int n_out = w.dims.n;
    if (dout.dims.c != n_out || dout.dims.n != in.dims.n)
        throw ShapeError("FC gradient shape mismatch");
    FcGrads g{Tensor4(w.dims), Tensor4(n_out, 1, 1, 1), Tensor4(in.dims)};
    // dW += dY^T * X, db += column sums of dY, dX = dY * W
    detail::gemm_tn(dout.data(), in.data(), g.dw.data(), n_out, in.dims.n, n_in);
    for (int bi = 0; bi < in.dims.n; ++bi)
        for (int j = 0; j < n_out; ++j)
            g.db.v[j] += dout.v[static_cast<std::size_t>(bi) * n_out + j];
    detail::gemm_nn(dout.data(), w.data(), g.din.data(), in.dims.n, n_out, n_in);
    return g;
}

// Independent softmax over `classes` at every cell. Max subtraction keeps the
// exponentials bounded for any finite logits.
inline Tensor4 spatial_softmax_forward(const Tensor4& logits, const LayerSpec& s) {
    const Dims od = infer_dims(s, logits.dims);
    Tensor4 out(od);
    const std::size_t rows = logits.size() / s.classes;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = logits.data() + r * s.classes;
        double* p = out.data() + r * s.classes;
        double zmax = z[0];
        for (int j = 1; j < s.classes; ++j) zmax = std::max(zmax, z[j]);
        double sum = 0.0;
        for (int j = 0; j < s.classes; ++j) {
            p[j] = std::exp(z[j] - zmax);
            sum += p[j];
        }
        for (int j = 0; j < s.classes; ++j) p[j] /= sum;
    }
    return out;
}

inline Tensor4 spatial_softmax_backward(const Tensor4& probs, const Tensor4& dprobs,
                                        const LayerSpec& s) {
    if (!(dprobs.dims == probs.dims)) throw ShapeError("softmax gradient shape mismatch");
    Tensor4 din(probs.dims);
    const std::size_t rows = probs.size() / s.classes;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* p = probs.data() + r * s.classes;
        const double* dp = dprobs.data() + r * s.classes;
        double* dz = din.data() + r * s.classes;
        double dot = 0.0;
        for (int j = 0; j < s.classes; ++j) dot += p[j] * dp[j];
        for (int j = 0; j < s.classes; ++j) dz[j] = p[j] * (dp[j] - dot);
    }
    return din;
}

}  // namespace flowpred
