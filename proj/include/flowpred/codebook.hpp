#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowpred/error.hpp"
#include "flowpred/flow.hpp"
#include "flowpred/kmeans.hpp"

namespace flowpred {

// ---------------------------------------------------------------------------
// Core data shapes of the regression-as-classification pipeline.

// C flow-vector cluster centers. Centers are kept sorted by (magnitude,
// angle) so indices are stable across runs; `zero_index` marks the
// smallest-magnitude center, whose cells count as non-moving.
struct FlowCodebook {
    std::vector<std::array<double, 2>> centers;
    int zero_index = 0;

    int size() const { return static_cast<int>(centers.size()); }
};

// M x N grid of cluster indices: the classification target.
struct QuantizedLabelGrid {
    int m = 0, n = 0;
    std::vector<int> labels;

    QuantizedLabelGrid() = default;
    QuantizedLabelGrid(int m_, int n_) : m(m_), n(n_), labels(static_cast<std::size_t>(m_) * n_, 0) {}
    int& at(int i, int j) { return labels[static_cast<std::size_t>(i) * n + j]; }
    int at(int i, int j) const { return labels[static_cast<std::size_t>(i) * n + j]; }
};

// M x N cells, each a probability vector over C clusters.
struct PredictionGrid {
    int m = 0, n = 0, c = 0;
    std::vector<double> p;

    PredictionGrid() = default;
    PredictionGrid(int m_, int n_, int c_)
        : m(m_), n(n_), c(c_), p(static_cast<std::size_t>(m_) * n_ * c_, 0.0) {}
    double& at(int i, int j, int r) { return p[(static_cast<std::size_t>(i) * n + j) * c + r]; }
    double at(int i, int j, int r) const { return p[(static_cast<std::size_t>(i) * n + j) * c + r]; }
    const double* cell(int i, int j) const { return &p[(static_cast<std::size_t>(i) * n + j) * c]; }
};

inline void validate(const PredictionGrid& g) {
    if (g.m < 1 || g.n < 1 || g.c < 1 || g.p.size() != static_cast<std::size_t>(g.m) * g.n * g.c)
        throw DataError("prediction grid has inconsistent dimensions");
    for (int i = 0; i < g.m; ++i)
        for (int j = 0; j < g.n; ++j) {
            double sum = 0.0;
            for (int r = 0; r < g.c; ++r) {
                const double x = g.at(i, j, r);
                if (x < 0.0 || x > 1.0)
                    throw DataError("prediction grid entry out of [0,1] at cell (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");
                sum += x;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw DataError("prediction grid cell (" + std::to_string(i) + "," +
                                std::to_string(j) + ") sums to " + std::to_string(sum));
        }
}

// ---------------------------------------------------------------------------
// Codebook construction.

inline int smallest_magnitude_index(const std::vector<std::array<double, 2>>& centers) {
    int best = 0;
    double best_norm = std::hypot(centers[0][0], centers[0][1]);
    for (std::size_t i = 1; i < centers.size(); ++i) {
        const double norm = std::hypot(centers[i][0], centers[i][1]);
        if (norm < best_norm) {
            best_norm = norm;
            best = static_cast<int>(i);
        }
    }
    return best;
}

// k-means over flow vectors. `sse_log`, when given, receives the
// within-cluster SSE after every assignment pass (non-increasing).
inline FlowCodebook build_codebook(const std::vector<std::array<double, 2>>& samples, int c,
                                   std::uint64_t seed, int max_iters = 100,
                                   std::vector<double>* sse_log = nullptr) {
    if (c < 1) throw DataError("build_codebook: need c >= 1");
    std::vector<double> flat;
    flat.reserve(samples.size() * 2);
    for (const auto& s : samples) {
        flat.push_back(s[0]);
        flat.push_back(s[1]);
    }
    auto r = kmeans(flat, 2, c, seed, max_iters);
    if (sse_log) *sse_log = r.sse_log;
    FlowCodebook cb;
    cb.centers.resize(c);
    for (int i = 0; i < c; ++i) cb.centers[i] = {r.centers[2 * i], r.centers[2 * i + 1]};
    // Canonical order: magnitude, then angle, then components. Keeps indices
    // reproducible and puts the zero cluster first.
    std::sort(cb.centers.begin(), cb.centers.end(),
              [](const std::array<double, 2>& a, const std::array<double, 2>& b) {
                  const double na = std::hypot(a[0], a[1]), nb = std::hypot(b[0], b[1]);
                  if (na != nb) return na < nb;
                  const double aa = std::atan2(a[1], a[0]), ab = std::atan2(b[1], b[0]);
                  if (aa != ab) return aa < ab;
                  return a < b;
              });
    for (std::size_t i = 1; i < cb.centers.size(); ++i)
        if (cb.centers[i] == cb.centers[i - 1])
            throw DataError("build_codebook: degenerate data produced duplicate centers");
    cb.zero_index = smallest_magnitude_index(cb.centers);
    return cb;
}

inline int nearest_center(const FlowCodebook& cb, double u, double v) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int r = 0; r < cb.size(); ++r) {
        const double du = u - cb.centers[r][0], dv = v - cb.centers[r][1];
        const double d = du * du + dv * dv;
        if (d < best_d) {  // strict: ties keep the lowest index
            best_d = d;
            best = r;
        }
    }
    return best;
}

// Cell-mean then nearest-center assignment of a dense field to grid labels.
inline QuantizedLabelGrid quantize(const FlowField& flow, const FlowCodebook& cb, int m, int n) {
    const FlowField means = cell_mean_field(flow, m, n);
    QuantizedLabelGrid out(m, n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = nearest_center(cb, means.u(j, i), means.v(j, i));
    return out;
}

// Expected flow under the per-cell distribution: sum_r p_r * center_r.
inline FlowField soft_decode(const PredictionGrid& pred, const FlowCodebook& cb) {
    validate(pred);
    if (pred.c != cb.size())
        throw DataError("soft_decode: prediction has " + std::to_string(pred.c) +
                        " classes, codebook " + std::to_string(cb.size()));
    FlowField out(pred.n, pred.m);
    for (int i = 0; i < pred.m; ++i)
        for (int j = 0; j < pred.n; ++j) {
            double u = 0.0, v = 0.0;
            for (int r = 0; r < pred.c; ++r) {
                u += pred.at(i, j, r) * cb.centers[r][0];
                v += pred.at(i, j, r) * cb.centers[r][1];
            }
            out.u(j, i) = u;
            out.v(j, i) = v;
        }
    return out;
}

inline QuantizedLabelGrid hard_decode(const PredictionGrid& pred, const FlowCodebook& cb) {
    validate(pred);
    if (pred.c != cb.size())
        throw DataError("hard_decode: prediction/codebook class count mismatch");
    QuantizedLabelGrid out(pred.m, pred.n);
    for (int i = 0; i < pred.m; ++i)
        for (int j = 0; j < pred.n; ++j) {
            int best = 0;
            double best_p = pred.at(i, j, 0);
            for (int r = 1; r < pred.c; ++r)
                if (pred.at(i, j, r) > best_p) {  // ties keep the lowest index
                    best_p = pred.at(i, j, r);
                    best = r;
                }
            out.at(i, j) = best;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Frame codebook (whole coarse flow frames as words).

struct FrameCodebook {
    int m = 0, n = 0;  // coarse grid of each centroid
    std::vector<std::vector<double>> centroids;  // each m*n*2, cells row-major, u then v

    int size() const { return static_cast<int>(centroids.size()); }
};

inline std::vector<double> flatten_frame(const FlowField& f) {
    return f.uv;  // already (row-major cell, u then v)
}

inline FrameCodebook build_frame_codebook(const std::vector<FlowField>& frames, int k,
                                          std::uint64_t seed, int max_iters = 100,
                                          std::vector<double>* sse_log = nullptr) {
    if (frames.empty()) throw DataError("build_frame_codebook: no frames");
    const int m = frames[0].height, n = frames[0].width;
    for (const auto& f : frames)
        if (f.height != m || f.width != n)
            throw DataError("build_frame_codebook: frames have mixed dimensions");
    const int d = m * n * 2;
    std::vector<double> flat;
    flat.reserve(frames.size() * d);
    for (const auto& f : frames) flat.insert(flat.end(), f.uv.begin(), f.uv.end());
    auto r = kmeans(flat, d, k, seed, max_iters);
    if (sse_log) *sse_log = r.sse_log;
    FrameCodebook cb;
    cb.m = m;
    cb.n = n;
    cb.centroids.resize(k);
    for (int i = 0; i < k; ++i)
        cb.centroids[i].assign(r.centers.begin() + static_cast<std::size_t>(i) * d,
                               r.centers.begin() + static_cast<std::size_t>(i + 1) * d);
    return cb;
}

inline int nearest_frame(const FrameCodebook& cb, const FlowField& coarse) {
    if (coarse.height != cb.m || coarse.width != cb.n)
        throw DataError("nearest_frame: frame is " + std::to_string(coarse.height) + "x" +
                        std::to_string(coarse.width) + ", codebook " + std::to_string(cb.m) +
                        "x" + std::to_string(cb.n));
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < cb.size(); ++i) {
        double d = 0.0;
        for (std::size_t j = 0; j < coarse.uv.size(); ++j) {
            const double t = coarse.uv[j] - cb.centroids[i][j];
            d += t * t;
        }
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

inline FlowField frame_centroid_field(const FrameCodebook& cb, int idx) {
    FlowField f(cb.n, cb.m);
    f.uv = cb.centroids[idx];
    return f;
}

// ---------------------------------------------------------------------------
// Text serialization with shortest round-trip float formatting.

namespace detail {

inline std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view tok, const std::string& path) {
    double x = 0.0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
        throw DataError(path + ": bad float token '" + std::string(tok) + "'");
    return x;
}

}  // namespace detail

inline void save_codebook(const FlowCodebook& cb, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << "FLOWCB 1 " << cb.size() << "\n";
    for (const auto& c : cb.centers)
        os << detail::format_double(c[0]) << " " << detail::format_double(c[1]) << "\n";
    if (!os) throw DataError("short write to " + path);
}

inline FlowCodebook load_codebook(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open codebook " + path);
    std::string tag;
    int version = 0, c = 0;
    is >> tag >> version >> c;
    if (!is || tag != "FLOWCB") throw DataError(path + ": expected FLOWCB header");
    if (version != 1) throw DataError(path + ": unsupported codebook version");
    if (c < 1) throw DataError(path + ": nonpositive center count");
    FlowCodebook cb;
    cb.centers.resize(c);
    for (int i = 0; i < c; ++i) {
        std::string ut, vt;
        if (!(is >> ut >> vt)) throw DataError(path + ": truncated at center " + std::to_string(i));
        cb.centers[i] = {detail::parse_double(ut, path), detail::parse_double(vt, path)};
    }
    cb.zero_index = smallest_magnitude_index(cb.centers);
    return cb;
}

inline void save_frame_codebook(const FrameCodebook& cb, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << "FRAMECB 1 " << cb.size() << " " << cb.m << " " << cb.n << "\n";
    for (const auto& c : cb.centroids) {
        for (std::size_t i = 0; i < c.size(); ++i)
            os << (i ? " " : "") << detail::format_double(c[i]);
        os << "\n";
    }
    if (!os) throw DataError("short write to " + path);
}

inline FrameCodebook load_frame_codebook(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open frame codebook " + path);
    std::string tag;
    int version = 0, k = 0, m = 0, n = 0;
    is >> tag >> version >> k >> m >> n;
    if (!is || tag != "FRAMECB") throw DataError(path + ": expected FRAMECB header");
    if (version != 1) throw DataError(path + ": unsupported frame codebook version");
    if (k < 1 || m < 1 || n < 1) throw DataError(path + ": bad frame codebook dimensions");
    FrameCodebook cb;
    cb.m = m;
    cb.n = n;
    cb.centroids.assign(k, std::vector<double>(static_cast<std::size_t>(m) * n * 2));
    for (int i = 0; i < k; ++i)
        for (auto& x : cb.centroids[i]) {
            std::string tok;
            if (!(is >> tok))
                throw DataError(path + ": truncated at centroid " + std::to_string(i));
            x = detail::parse_double(tok, path);
        }
    return cb;
}

}  // namespace flowpred
