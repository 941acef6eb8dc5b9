// Independent reference implementations used as test oracles. Everything in
// this header is written as plain, direct loops straight from the operation
// definitions and must stay independent of the library code paths it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <vector>

#include "flowpred/metrics.hpp"
#include "flowpred/rng.hpp"
#include "flowpred/tensor.hpp"

namespace oracle {

using flowpred::Tensor4;

inline Tensor4 random_tensor(int n, int c, int h, int w, flowpred::Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
    Tensor4 t(n, c, h, w);
    for (auto& x : t.v) x = rng.uniform(lo, hi);
    return t;
}

// Direct quadruple-loop convolution.
inline Tensor4 conv_ref(const Tensor4& in, const Tensor4& w, const std::vector<double>& bias,
                        int stride, int pad) {
    const int kk = w.dims.n, ks = w.dims.h;
    const int oh = (in.dims.h + 2 * pad - ks) / stride + 1;
    const int ow = (in.dims.w + 2 * pad - ks) / stride + 1;
    Tensor4 out(in.dims.n, kk, oh, ow);
    for (int b = 0; b < in.dims.n; ++b)
        for (int k = 0; k < kk; ++k)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bias[k];
                    for (int c = 0; c < in.dims.c; ++c)
                        for (int di = 0; di < ks; ++di)
                            for (int dj = 0; dj < ks; ++dj) {
                                const int iy = oy * stride - pad + di;
                                const int ix = ox * stride - pad + dj;
                                if (iy < 0 || iy >= in.dims.h || ix < 0 || ix >= in.dims.w)
                                    continue;
                                acc += in.at(b, c, iy, ix) * w.at(k, c, di, dj);
                            }
                    out.at(b, k, oy, ox) = acc;
                }
    return out;
}

inline Tensor4 lrn_ref(const Tensor4& in, int n, double alpha, double beta, double k_bias) {
    Tensor4 out(in.dims);
    const int half = n / 2;
    for (int b = 0; b < in.dims.n; ++b)
        for (int c = 0; c < in.dims.c; ++c)
            for (int y = 0; y < in.dims.h; ++y)
                for (int x = 0; x < in.dims.w; ++x) {
                    double ss = 0.0;
                    for (int cc = std::max(0, c - half); cc <= std::min(in.dims.c - 1, c + half);
                         ++cc)
                        ss += in.at(b, cc, y, x) * in.at(b, cc, y, x);
                    out.at(b, c, y, x) =
                        in.at(b, c, y, x) / std::pow(k_bias + alpha / n * ss, beta);
                }
    return out;
}

inline Tensor4 maxpool_ref(const Tensor4& in, int size, int stride) {
    const int oh = (in.dims.h - size) / stride + 1;
    const int ow = (in.dims.w - size) / stride + 1;
    Tensor4 out(in.dims.n, in.dims.c, oh, ow);
    for (int b = 0; b < in.dims.n; ++b)
        for (int c = 0; c < in.dims.c; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double best = -std::numeric_limits<double>::infinity();
                    for (int di = 0; di < size; ++di)
                        for (int dj = 0; dj < size; ++dj)
                            best = std::max(best,
                                            in.at(b, c, oy * stride + di, ox * stride + dj));
                    out.at(b, c, oy, ox) = best;
                }
    return out;
}

// Direct exp/sum softmax over the trailing `classes` of each row.
inline std::vector<double> softmax_ref(const std::vector<double>& logits, int classes) {
    std::vector<double> p(logits.size());
    for (std::size_t r = 0; r < logits.size() / classes; ++r) {
        double zmax = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < classes; ++j) zmax = std::max(zmax, logits[r * classes + j]);
        double sum = 0.0;
        for (int j = 0; j < classes; ++j) sum += std::exp(logits[r * classes + j] - zmax);
        for (int j = 0; j < classes; ++j)
            p[r * classes + j] = std::exp(logits[r * classes + j] - zmax) / sum;
    }
    return p;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---- Metric oracles over coarse grids. ----

inline double epe_ref(const flowpred::FlowField& a, const flowpred::FlowField& b,
                      const flowpred::EvalMask& mask) {
    double s = 0.0;
    long cnt = 0;
    for (int i = 0; i < mask.m; ++i)
        for (int j = 0; j < mask.n; ++j)
            if (mask.at(i, j)) {
                const double du = a.u(j, i) - b.u(j, i), dv = a.v(j, i) - b.v(j, i);
                s += std::sqrt(du * du + dv * dv);
                ++cnt;
            }
    return s / cnt;
}

inline double dir_ref(const flowpred::FlowField& a, const flowpred::FlowField& b,
                      const flowpred::EvalMask& mask, bool absolute) {
    double s = 0.0;
    long cnt = 0;
    for (int i = 0; i < mask.m; ++i)
        for (int j = 0; j < mask.n; ++j)
            if (mask.at(i, j)) {
                ++cnt;
                const double na = std::hypot(a.u(j, i), a.v(j, i));
                const double nb = std::hypot(b.u(j, i), b.v(j, i));
                if (na <= 1e-9 || nb <= 1e-9) continue;
                const double c = (a.u(j, i) * b.u(j, i) + a.v(j, i) * b.v(j, i)) / (na * nb);
                s += absolute ? std::abs(c) : c;
            }
    return s / cnt;
}

// Counts clusters that rank strictly before the truth under the
// lower-index-first tie rule; a hit means fewer than n of them.
inline double topn_ref(const flowpred::PredictionGrid& p, const flowpred::QuantizedLabelGrid& gt,
                       int n, const flowpred::EvalMask& mask) {
    long hits = 0, cnt = 0;
    for (int i = 0; i < p.m; ++i)
        for (int j = 0; j < p.n; ++j) {
            if (!mask.at(i, j)) continue;
            ++cnt;
            const int y = gt.at(i, j);
            int before = 0;
            for (int r = 0; r < p.c; ++r) {
                if (r == y) continue;
                if (p.at(i, j, r) > p.at(i, j, y) || (p.at(i, j, r) == p.at(i, j, y) && r < y))
                    ++before;
            }
            if (before < std::min(n, p.c)) ++hits;
        }
    return static_cast<double>(hits) / cnt;
}

// Reference Canny, one literal pass per pipeline stage.
inline std::vector<std::uint8_t> canny_ref(const flowpred::Image& img, double sigma,
                                           double low_frac, double high_frac) {
    const int w = img.width, h = img.height;
    std::vector<double> gray(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            gray[static_cast<std::size_t>(y) * w + x] =
                img.channels == 1 ? img.at(x, y)
                                  : 0.299f * img.at(x, y, 0) + 0.587f * img.at(x, y, 1) +
                                        0.114f * img.at(x, y, 2);

    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    const int ks = 2 * radius + 1;
    std::vector<double> kernel(static_cast<std::size_t>(ks) * ks);
    double ksum = 0.0;
    for (int ky = -radius; ky <= radius; ++ky)
        for (int kx = -radius; kx <= radius; ++kx) {
            const double v = std::exp(-(kx * kx + ky * ky) / (2.0 * sigma * sigma));
            kernel[static_cast<std::size_t>(ky + radius) * ks + (kx + radius)] = v;
            ksum += v;
        }
    for (auto& v : kernel) v /= ksum;
    auto clamp_at = [&](const std::vector<double>& buf, int x, int y) {
        x = std::min(w - 1, std::max(0, x));
        y = std::min(h - 1, std::max(0, y));
        return buf[static_cast<std::size_t>(y) * w + x];
    };
    std::vector<double> blur(gray.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int ky = -radius; ky <= radius; ++ky)
                for (int kx = -radius; kx <= radius; ++kx)
                    acc += kernel[static_cast<std::size_t>(ky + radius) * ks + (kx + radius)] *
                           clamp_at(gray, x + kx, y + ky);
            blur[static_cast<std::size_t>(y) * w + x] = acc;
        }

    std::vector<double> mag(gray.size()), ang(gray.size());
    double max_mag = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double gx = -clamp_at(blur, x - 1, y - 1) + clamp_at(blur, x + 1, y - 1) -
                              2.0 * clamp_at(blur, x - 1, y) + 2.0 * clamp_at(blur, x + 1, y) -
                              clamp_at(blur, x - 1, y + 1) + clamp_at(blur, x + 1, y + 1);
            const double gy = -clamp_at(blur, x - 1, y - 1) - 2.0 * clamp_at(blur, x, y - 1) -
                              clamp_at(blur, x + 1, y - 1) + clamp_at(blur, x - 1, y + 1) +
                              2.0 * clamp_at(blur, x, y + 1) + clamp_at(blur, x + 1, y + 1);
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            mag[i] = std::sqrt(gx * gx + gy * gy);
            double a = std::atan2(gy, gx) * (180.0 / 3.14159265358979323846);
            if (a < 0.0) a += 180.0;
            ang[i] = a;
            max_mag = std::max(max_mag, mag[i]);
        }
    std::vector<std::uint8_t> edges(gray.size(), 0);
    if (max_mag == 0.0) return edges;

    auto mag_or_zero = [&](int x, int y) {
        if (x < 0 || x >= w || y < 0 || y >= h) return 0.0;
        return mag[static_cast<std::size_t>(y) * w + x];
    };
    std::vector<double> nms(gray.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            double n1, n2;
            const double a = ang[i];
            if (a < 22.5 || a >= 157.5) {
                n1 = mag_or_zero(x - 1, y);
                n2 = mag_or_zero(x + 1, y);
            } else if (a < 67.5) {
                n1 = mag_or_zero(x + 1, y - 1);
                n2 = mag_or_zero(x - 1, y + 1);
            } else if (a < 112.5) {
                n1 = mag_or_zero(x, y - 1);
                n2 = mag_or_zero(x, y + 1);
            } else {
                n1 = mag_or_zero(x - 1, y - 1);
                n2 = mag_or_zero(x + 1, y + 1);
            }
            if (mag[i] >= n1 && mag[i] >= n2) nms[i] = mag[i];
        }

    const double high = high_frac * max_mag, low = low_frac * max_mag;
    std::queue<std::size_t> frontier;
    std::vector<std::uint8_t> weak(gray.size(), 0);
    for (std::size_t i = 0; i < nms.size(); ++i) {
        if (nms[i] > high) {
            edges[i] = 1;
            frontier.push(i);
        } else if (nms[i] > low) {
            weak[i] = 1;
        }
    }
    while (!frontier.empty()) {
        const std::size_t i = frontier.front();
        frontier.pop();
        const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int nx = x + dx, ny = y + dy;
                if ((dx == 0 && dy == 0) || nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
                if (weak[ni] && !edges[ni]) {
                    edges[ni] = 1;
                    frontier.push(ni);
                }
            }
    }
    return edges;
}

}  // namespace oracle
