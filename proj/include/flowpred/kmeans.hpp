#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "flowpred/error.hpp"
#include "flowpred/rng.hpp"

namespace flowpred {

// Lloyd's algorithm with k-means++ seeding over flat row-major points.
// Deterministic for a fixed seed: seeding draws from one stream, nearest
// assignments break ties toward the lowest index, and empty clusters keep
// their previous center.

struct KmeansResult {
    int k = 0, dim = 0;
    std::vector<double> centers;    // k x dim
    std::vector<int> assignment;    // n
    std::vector<double> sse_log;    // within-cluster SSE after each assignment pass
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        const double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

inline std::size_t count_distinct_rows(const std::vector<double>& pts, std::size_t n, int d,
                                       std::size_t enough) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::lexicographical_compare(pts.begin() + a * d, pts.begin() + (a + 1) * d,
                                            pts.begin() + b * d, pts.begin() + (b + 1) * d);
    });
    std::size_t distinct = n == 0 ? 0 : 1;
    for (std::size_t i = 1; i < n && distinct < enough; ++i)
        if (!std::equal(pts.begin() + order[i] * d, pts.begin() + (order[i] + 1) * d,
                        pts.begin() + order[i - 1] * d))
            ++distinct;
    return distinct;
}

}  // namespace detail

inline KmeansResult kmeans(const std::vector<double>& pts, int d, int k, std::uint64_t seed,
                           int max_iters = 100) {
    if (d < 1 || k < 1) throw DataError("kmeans: dim and k must be >= 1");
    const std::size_t n = pts.size() / d;
    if (pts.size() != n * static_cast<std::size_t>(d))
        throw DataError("kmeans: point buffer is not a multiple of dim");
    if (detail::count_distinct_rows(pts, n, d, k) < static_cast<std::size_t>(k))
        throw DataError("kmeans: need at least " + std::to_string(k) +
                        " distinct samples, fewer were given");

    KmeansResult r;
    r.k = k;
    r.dim = d;
    r.centers.resize(static_cast<std::size_t>(k) * d);
    r.assignment.assign(n, -1);

    // k-means++ seeding: next center drawn with probability proportional to
    // the squared distance to the closest chosen center.
    Rng rng(split_seed(seed, 0x6b6d));
    std::vector<double> d2(n);
    {
        const std::size_t first = rng.index(n);
        std::copy_n(pts.begin() + first * d, d, r.centers.begin());
        for (std::size_t i = 0; i < n; ++i)
            d2[i] = detail::sq_dist(&pts[i * d], &r.centers[0], d);
        for (int c = 1; c < k; ++c) {
            double total = 0.0;
            for (double x : d2) total += x;
            std::size_t pick = 0;
            if (total > 0.0) {
                const double target = rng.uniform() * total;
                double cum = 0.0;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    cum += d2[i];
                    if (cum > target) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = rng.index(n);
            }
            std::copy_n(pts.begin() + pick * d, d, r.centers.begin() + static_cast<std::size_t>(c) * d);
            for (std::size_t i = 0; i < n; ++i)
                d2[i] = std::min(d2[i], detail::sq_dist(&pts[i * d],
                                                        &r.centers[static_cast<std::size_t>(c) * d], d));
        }
    }

    std::vector<double> sums(static_cast<std::size_t>(k) * d);
    std::vector<std::size_t> counts(k);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = detail::sq_dist(&pts[i * d], &r.centers[0], d);
            for (int c = 1; c < k; ++c) {
                const double dist = detail::sq_dist(&pts[i * d],
                                                    &r.centers[static_cast<std::size_t>(c) * d], d);
                if (dist < best_d) {
                    best_d = dist;
                    best = c;
                }
            }
            sse += best_d;
            if (r.assignment[i] != best) {
                r.assignment[i] = best;
                changed = true;
            }
        }
        r.sse_log.push_back(sse);
        if (!changed) break;
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0u);
        for (std::size_t i = 0; i < n; ++i) {
            const int c = r.assignment[i];
            ++counts[c];
            for (int j = 0; j < d; ++j) sums[static_cast<std::size_t>(c) * d + j] += pts[i * d + j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;  // empty cluster keeps its center
            for (int j = 0; j < d; ++j)
                r.centers[static_cast<std::size_t>(c) * d + j] =
                    sums[static_cast<std::size_t>(c) * d + j] / static_cast<double>(counts[c]);
        }
    }
    return r;
}

}  // namespace flowpred
