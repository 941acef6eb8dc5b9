#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "flowpred/canny.hpp"
#include "flowpred/codebook.hpp"
#include "flowpred/dataset.hpp"
#include "flowpred/model.hpp"

namespace flowpred {

// ---------------------------------------------------------------------------
// Masks.

enum class MaskKind { All, Canny, NonZero };

struct EvalMask {
    int m = 0, n = 0;
    MaskKind kind = MaskKind::All;
    std::vector<std::uint8_t> cells;

    EvalMask() = default;
    EvalMask(int m_, int n_, MaskKind k, std::uint8_t fill = 0)
        : m(m_), n(n_), kind(k), cells(static_cast<std::size_t>(m_) * n_, fill) {}
    bool at(int i, int j) const { return cells[static_cast<std::size_t>(i) * n + j] != 0; }
    void set(int i, int j, bool v) { cells[static_cast<std::size_t>(i) * n + j] = v ? 1 : 0; }
    long count() const {
        long c = 0;
        for (auto x : cells) c += x;
        return c;
    }
};

inline EvalMask all_mask(int m, int n) { return EvalMask(m, n, MaskKind::All, 1); }

// A cell is evaluated iff at least one full-resolution Canny edge pixel falls
// inside it.
inline EvalMask canny_mask(const Image& img, int m, int n, const CannyParams& p = {}) {
    const auto edges = canny_edges(img, p);
    EvalMask mask(m, n, MaskKind::Canny);
    for (int i = 0; i < m; ++i) {
        const auto [y0, y1] = cell_bounds(img.height, m, i);
        for (int j = 0; j < n; ++j) {
            const auto [x0, x1] = cell_bounds(img.width, n, j);
            bool hit = false;
            for (int y = y0; y < y1 && !hit; ++y)
                for (int x = x0; x < x1; ++x)
                    if (edges[static_cast<std::size_t>(y) * img.width + x]) {
                        hit = true;
                        break;
                    }
            mask.set(i, j, hit);
        }
    }
    return mask;
}

// Moving cells: everything whose ground-truth label is not the zero cluster.
inline EvalMask nonzero_mask(const QuantizedLabelGrid& gt, const FlowCodebook& cb) {
    EvalMask mask(gt.m, gt.n, MaskKind::NonZero);
    for (int i = 0; i < gt.m; ++i)
        for (int j = 0; j < gt.n; ++j) mask.set(i, j, gt.at(i, j) != cb.zero_index);
    return mask;
}

// ---------------------------------------------------------------------------
// Metrics over coarse grids. An empty mask leaves the metric undefined.

inline constexpr double kNormEps = 1e-9;

inline std::optional<double> epe(const FlowField& pred, const FlowField& gt, const EvalMask& mask) {
    if (pred.width != gt.width || pred.height != gt.height || mask.m != gt.height ||
        mask.n != gt.width)
        throw DataError("epe: field/mask dimensions disagree");
    double sum = 0.0;
    long count = 0;
    for (int i = 0; i < mask.m; ++i)
        for (int j = 0; j < mask.n; ++j) {
            if (!mask.at(i, j)) continue;
            sum += std::hypot(pred.u(j, i) - gt.u(j, i), pred.v(j, i) - gt.v(j, i));
            ++count;
        }
    if (count == 0) return std::nullopt;
    return sum / count;
}

// Mean cosine similarity; cells where either vector is (numerically) zero
// contribute 0 but stay in the denominator.
inline std::optional<double> direction_similarity(const FlowField& pred, const FlowField& gt,
                                                  const EvalMask& mask) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw DataError("direction_similarity: field dimensions disagree");
    double sum = 0.0;
    long count = 0;
    for (int i = 0; i < mask.m; ++i)
        for (int j = 0; j < mask.n; ++j) {
            if (!mask.at(i, j)) continue;
            ++count;
            const double na = std::hypot(pred.u(j, i), pred.v(j, i));
            const double nb = std::hypot(gt.u(j, i), gt.v(j, i));
            if (na <= kNormEps || nb <= kNormEps) continue;
            sum += (pred.u(j, i) * gt.u(j, i) + pred.v(j, i) * gt.v(j, i)) / (na * nb);
        }
    if (count == 0) return std::nullopt;
    return sum / count;
}

// Parallelism up to sign: |cos|, angle taken on the half-circle.
inline std::optional<double> orientation_similarity(const FlowField& pred, const FlowField& gt,
                                                    const EvalMask& mask) {
    double sum = 0.0;
    long count = 0;
    for (int i = 0; i < mask.m; ++i)
        for (int j = 0; j < mask.n; ++j) {
            if (!mask.at(i, j)) continue;
            ++count;
            const double na = std::hypot(pred.u(j, i), pred.v(j, i));
            const double nb = std::hypot(gt.u(j, i), gt.v(j, i));
            if (na <= kNormEps || nb <= kNormEps) continue;
            sum += std::abs(pred.u(j, i) * gt.u(j, i) + pred.v(j, i) * gt.v(j, i)) / (na * nb);
        }
    if (count == 0) return std::nullopt;
    return sum / count;
}

// Descending probability, ties broken toward the lower index.
inline std::vector<int> ranking_of_cell(const PredictionGrid& pred, int i, int j) {
    std::vector<int> order(pred.c);
    std::iota(order.begin(), order.end(), 0);
    const double* p = pred.cell(i, j);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
    return order;
}

inline std::optional<double> top_n_accuracy(const PredictionGrid& pred,
                                            const QuantizedLabelGrid& gt, int n,
                                            const EvalMask& mask) {
    if (pred.m != gt.m || pred.n != gt.n) throw DataError("top_n_accuracy: grid dims disagree");
    if (n < 1) throw DataError("top_n_accuracy: n must be >= 1");
    n = std::min(n, pred.c);
    long hits = 0, count = 0;
    for (int i = 0; i < pred.m; ++i)
        for (int j = 0; j < pred.n; ++j) {
            if (!mask.at(i, j)) continue;
            ++count;
            const auto order = ranking_of_cell(pred, i, j);
            for (int r = 0; r < n; ++r)
                if (order[r] == gt.at(i, j)) {
                    ++hits;
                    break;
                }
        }
    if (count == 0) return std::nullopt;
    return static_cast<double>(hits) / count;
}

// ---------------------------------------------------------------------------
// Predictors: everything the evaluation loop needs from a method.

struct EvalItem {
    Image image;
    FlowField gt_dense;
    FlowField gt_cells;          // cell means at grid resolution
    QuantizedLabelGrid gt_labels;
};

// Everything one evaluated item needs from a method: the decoded coarse flow
// and, per depth n, the per-cell candidate lists obtained by deepening the
// method to n (probability models: the n most probable clusters; NN: the
// deduplicated labels of the n best matches).
struct ItemPrediction {
    FlowField flow;
    std::function<std::vector<std::vector<int>>(int)> candidates_at;
};

class Predictor {
public:
    virtual ~Predictor() = default;
    virtual std::string name() const = 0;
    virtual ItemPrediction predict_item(const EvalItem& item) const = 0;
    // Input size the predictor requires, if any.
    virtual std::optional<std::pair<int, int>> wanted_input() const { return std::nullopt; }
};

// Fed the ground truth back: the sanity ceiling for every metric.
class OraclePredictor : public Predictor {
public:
    std::string name() const override { return "oracle"; }
    ItemPrediction predict_item(const EvalItem& item) const override {
        ItemPrediction out;
        out.flow = item.gt_cells;
        const QuantizedLabelGrid labels = item.gt_labels;
        out.candidates_at = [labels](int) {
            std::vector<std::vector<int>> r(labels.labels.size());
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = {labels.labels[i]};
            return r;
        };
        return out;
    }
};

// Equal probability on every cluster; the chance-level control. All clusters
// tie, so the candidate order is 0, 1, 2, ... by the tie rule.
class UniformPredictor : public Predictor {
public:
    explicit UniformPredictor(const FlowCodebook& cb) : cb_(cb) {}
    std::string name() const override { return "uniform"; }
    ItemPrediction predict_item(const EvalItem& item) const override {
        ItemPrediction out;
        double mu = 0.0, mv = 0.0;
        for (const auto& c : cb_.centers) {
            mu += c[0];
            mv += c[1];
        }
        mu /= cb_.size();
        mv /= cb_.size();
        out.flow = FlowField(item.gt_labels.n, item.gt_labels.m);
        for (std::size_t i = 0; i < out.flow.uv.size(); i += 2) {
            out.flow.uv[i] = mu;
            out.flow.uv[i + 1] = mv;
        }
        const std::size_t cells = static_cast<std::size_t>(item.gt_labels.m) * item.gt_labels.n;
        const int classes = cb_.size();
        out.candidates_at = [cells, classes](int n) {
            std::vector<int> order(std::min(n, classes));
            std::iota(order.begin(), order.end(), 0);
            return std::vector<std::vector<int>>(cells, order);
        };
        return out;
    }

private:
    FlowCodebook cb_;
};

// The trained network: soft-decoded flow and probability-sorted candidates.
class ModelPredictor : public Predictor {
public:
    ModelPredictor(const ModelConfig& cfg, NetworkParams params, const FlowCodebook& cb)
        : cfg_(cfg), spec_(build_network_spec(cfg)), params_(std::move(params)), cb_(cb) {
        check_params(spec_, params_);
        if (cb_.size() != cfg_.clusters)
            throw DataError("codebook has " + std::to_string(cb_.size()) +
                            " clusters, model expects " + std::to_string(cfg_.clusters));
    }
    std::string name() const override { return "model"; }
    std::optional<std::pair<int, int>> wanted_input() const override {
        return std::make_pair(cfg_.input_w, cfg_.input_h);
    }
    ItemPrediction predict_item(const EvalItem& item) const override {
        const PredictionGrid probs = model_forward(spec_, params_, cfg_, item.image);
        ItemPrediction out;
        out.flow = soft_decode(probs, cb_);
        std::vector<std::vector<int>> full;
        full.reserve(static_cast<std::size_t>(probs.m) * probs.n);
        for (int i = 0; i < probs.m; ++i)
            for (int j = 0; j < probs.n; ++j) full.push_back(ranking_of_cell(probs, i, j));
        out.candidates_at = [full](int n) {
            std::vector<std::vector<int>> r = full;
            for (auto& cell : r)
                if (static_cast<int>(cell.size()) > n) cell.resize(n);
            return r;
        };
        return out;
    }

private:
    ModelConfig cfg_;
    NetworkSpec spec_;
    NetworkParams params_;
    FlowCodebook cb_;
};

// ---------------------------------------------------------------------------
// Nearest-neighbor baseline.

using FeatureFn = std::function<std::vector<double>(const Image&)>;

// Raw-pixel features: grayscale box-averaged to 32x32. Inputs smaller than
// the feature grid are upsampled first.
inline std::vector<double> pixel_features(const Image& img) {
    Image gray = to_grayscale(img);
    if (gray.width < 32 || gray.height < 32)
        gray = resize_nearest(gray, std::max(gray.width, 32), std::max(gray.height, 32));
    const int side = 32;
    std::vector<double> f(static_cast<std::size_t>(side) * side, 0.0);
    for (int i = 0; i < side; ++i) {
        const auto [y0, y1] = cell_bounds(gray.height, side, i);
        for (int j = 0; j < side; ++j) {
            const auto [x0, x1] = cell_bounds(gray.width, side, j);
            double s = 0.0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) s += gray.at(x, y);
            f[static_cast<std::size_t>(i) * side + j] = s / ((y1 - y0) * (x1 - x0));
        }
    }
    return f;
}

// Training frames ranked by ascending feature distance; the matched frames'
// per-cell labels, deduplicated in match order, form the top-N ranking. The
// decoded flow is the best match's label center per cell.
class NnPredictor : public Predictor {
public:
    NnPredictor(FeatureFn features, std::vector<std::vector<double>> train_features,
                std::vector<QuantizedLabelGrid> train_labels, const FlowCodebook& cb,
                std::optional<std::pair<int, int>> input = std::nullopt)
        : features_(std::move(features)), train_features_(std::move(train_features)),
          train_labels_(std::move(train_labels)), cb_(cb), input_(input) {
        if (train_features_.empty() || train_features_.size() != train_labels_.size())
            throw DataError("nn baseline: empty or inconsistent training set");
    }
    std::string name() const override { return "nn"; }
    std::optional<std::pair<int, int>> wanted_input() const override { return input_; }

    std::vector<int> match_order(const Image& query) const {
        const auto qf = features_(query);
        std::vector<std::pair<double, int>> scored;
        scored.reserve(train_features_.size());
        for (std::size_t t = 0; t < train_features_.size(); ++t) {
            if (train_features_[t].size() != qf.size())
                throw DataError("nn baseline: feature widths disagree");
            double d = 0.0;
            for (std::size_t i = 0; i < qf.size(); ++i) {
                const double diff = qf[i] - train_features_[t][i];
                d += diff * diff;
            }
            scored.emplace_back(d, static_cast<int>(t));
        }
        std::sort(scored.begin(), scored.end());  // ties fall to the lower index
        std::vector<int> order(scored.size());
        for (std::size_t i = 0; i < scored.size(); ++i) order[i] = scored[i].second;
        return order;
    }

    ItemPrediction predict_item(const EvalItem& item) const override {
        ItemPrediction out;
        const auto order = match_order(item.image);
        const auto& best = train_labels_[order[0]];
        out.flow = FlowField(best.n, best.m);
        for (int i = 0; i < best.m; ++i)
            for (int j = 0; j < best.n; ++j) {
                out.flow.u(j, i) = cb_.centers[best.at(i, j)][0];
                out.flow.v(j, i) = cb_.centers[best.at(i, j)][1];
            }
        const auto* labels = &train_labels_;
        out.candidates_at = [labels, order](int depth) {
            const int take = std::min<int>(depth, static_cast<int>(order.size()));
            const int m = (*labels)[0].m, n = (*labels)[0].n;
            std::vector<std::vector<int>> r(static_cast<std::size_t>(m) * n);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    auto& cell = r[static_cast<std::size_t>(i) * n + j];
                    for (int t = 0; t < take; ++t) {
                        const int label = (*labels)[order[t]].at(i, j);
                        if (std::find(cell.begin(), cell.end(), label) == cell.end())
                            cell.push_back(label);
                    }
                }
            return r;
        };
        return out;
    }

private:
    FeatureFn features_;
    std::vector<std::vector<double>> train_features_;
    std::vector<QuantizedLabelGrid> train_labels_;
    FlowCodebook cb_;
    std::optional<std::pair<int, int>> input_;
};

// ---------------------------------------------------------------------------
// The evaluation protocol: every metric crossed with the All/Canny/NonZero
// masks, plus per-image values for external statistics.

struct EvalOptions {
    int grid_m = 20, grid_n = 20;
    int extra_top_n = 0;  // adds a top<N> row when > 0
    int jobs = 1;
    CannyParams canny;
};

struct MetricReport {
    struct Row {
        std::string metric, mask;
        double value = 0.0;
        long cells = 0;
        int images = 0;
    };
    struct PerImage {
        std::string metric, mask;
        int image = 0;
        double value = 0.0;
    };
    std::vector<Row> rows;
    std::vector<PerImage> per_image;
    std::vector<std::string> notes;
    int skipped = 0;

    const Row* find(const std::string& metric, const std::string& mask) const {
        for (const auto& r : rows)
            if (r.metric == metric && r.mask == mask) return &r;
        return nullptr;
    }
};

namespace detail {

struct PerImageValues {
    // metric-major, mask-minor; NaN marks undefined (excluded) values
    std::vector<double> values;
    std::vector<long> mask_counts;  // per mask
    bool failed = false;
    std::string error;
};

// Fraction of mask-true cells whose true cluster appears in the candidate
// list (the list is already depth-limited by the predictor).
inline std::optional<double> candidate_hit_rate(const std::vector<std::vector<int>>& candidates,
                                                const QuantizedLabelGrid& gt,
                                                const EvalMask& mask) {
    long hits = 0, count = 0;
    for (int i = 0; i < gt.m; ++i)
        for (int j = 0; j < gt.n; ++j) {
            if (!mask.at(i, j)) continue;
            ++count;
            const auto& cell = candidates[static_cast<std::size_t>(i) * gt.n + j];
            if (std::find(cell.begin(), cell.end(), gt.at(i, j)) != cell.end()) ++hits;
        }
    if (count == 0) return std::nullopt;
    return static_cast<double>(hits) / count;
}

// Mean 1-based rank of the true cluster; candidates absent from a ranking
// count as rank C.
inline std::optional<double> mean_rank(const std::vector<std::vector<int>>& rankings,
                                       const QuantizedLabelGrid& gt, int classes,
                                       const EvalMask& mask) {
    double sum = 0.0;
    long count = 0;
    for (int i = 0; i < gt.m; ++i)
        for (int j = 0; j < gt.n; ++j) {
            if (!mask.at(i, j)) continue;
            ++count;
            const auto& cell = rankings[static_cast<std::size_t>(i) * gt.n + j];
            int rank = classes;
            for (std::size_t r = 0; r < cell.size(); ++r)
                if (cell[r] == gt.at(i, j)) {
                    rank = static_cast<int>(r) + 1;
                    break;
                }
            sum += rank;
        }
    if (count == 0) return std::nullopt;
    return sum / count;
}

}  // namespace detail

inline MetricReport evaluate(const Predictor& predictor,
                             const std::vector<ManifestEntry>& entries, const FlowCodebook& cb,
                             const EvalOptions& opt, std::ostream& log) {
    const int m = opt.grid_m, n = opt.grid_n;
    std::vector<std::string> metrics = {"epe", "dir", "orient", "top5", "top10", "mean_rank"};
    std::vector<int> top_ns = {5, 10};
    if (opt.extra_top_n > 0) {
        metrics.insert(metrics.begin() + 5, "top" + std::to_string(opt.extra_top_n));
        top_ns.push_back(opt.extra_top_n);
    }
    const std::vector<std::string> masks = {"all", "canny", "nz"};

    std::vector<detail::PerImageValues> per(entries.size());
    auto run_item = [&](std::size_t idx) {
        auto& out = per[idx];
        try {
            Example ex = load_example(entries[idx]);
            if (auto want = predictor.wanted_input())
                ex = fit_to_input(std::move(ex), want->first, want->second);
            EvalItem item;
            item.gt_cells = cell_mean_field(ex.flow, m, n);
            item.gt_labels = quantize(ex.flow, cb, m, n);
            item.image = std::move(ex.image);
            item.gt_dense = std::move(ex.flow);

            const EvalMask mask_all = all_mask(m, n);
            const EvalMask mask_canny = canny_mask(item.image, m, n, opt.canny);
            const EvalMask mask_nz = nonzero_mask(item.gt_labels, cb);
            const EvalMask* mask_of[3] = {&mask_all, &mask_canny, &mask_nz};

            const ItemPrediction pred = predictor.predict_item(item);
            std::vector<std::vector<std::vector<int>>> per_depth;
            per_depth.reserve(top_ns.size());
            for (int n_val : top_ns) per_depth.push_back(pred.candidates_at(std::min(n_val, cb.size())));
            const auto full_candidates = pred.candidates_at(cb.size());

            out.values.assign(metrics.size() * 3, std::numeric_limits<double>::quiet_NaN());
            out.mask_counts.assign(3, 0);
            for (int mi = 0; mi < 3; ++mi) {
                const EvalMask& mask = *mask_of[mi];
                out.mask_counts[mi] = mask.count();
                auto put = [&](std::size_t metric_idx, std::optional<double> v) {
                    if (v) out.values[metric_idx * 3 + mi] = *v;
                };
                put(0, epe(pred.flow, item.gt_cells, mask));
                put(1, direction_similarity(pred.flow, item.gt_cells, mask));
                put(2, orientation_similarity(pred.flow, item.gt_cells, mask));
                for (std::size_t t = 0; t < top_ns.size(); ++t)
                    put(3 + t, detail::candidate_hit_rate(per_depth[t], item.gt_labels, mask));
                put(metrics.size() - 1,
                    detail::mean_rank(full_candidates, item.gt_labels, cb.size(), mask));
            }
        } catch (const std::exception& e) {
            out.failed = true;
            out.error = e.what();
        }
    };

    const int jobs = std::max(1, opt.jobs);
    if (jobs <= 1) {
        for (std::size_t i = 0; i < entries.size(); ++i) run_item(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (int t = 0; t < jobs; ++t)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < entries.size();
                     i = next.fetch_add(1))
                    run_item(i);
            });
        for (auto& th : pool) th.join();
    }

    MetricReport report;
    report.notes = {
        "evaluation at grid resolution: decoded flow vs cell-mean ground truth on the " +
            std::to_string(m) + "x" + std::to_string(n) + " grid",
        "aggregation: per-image mean, then unweighted mean over images",
        "predictor: " + predictor.name(),
    };
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (per[i].failed) {
            ++report.skipped;
            log << "skipping " << entries[i].image_path << ": " << per[i].error << "\n";
        }
    if (report.skipped == static_cast<int>(entries.size()))
        throw DataError("evaluation failed on every manifest entry");

    for (std::size_t mx = 0; mx < metrics.size(); ++mx)
        for (int mi = 0; mi < 3; ++mi) {
            MetricReport::Row row;
            row.metric = metrics[mx];
            row.mask = masks[mi];
            double sum = 0.0;
            for (std::size_t i = 0; i < entries.size(); ++i) {
                if (per[i].failed) continue;
                const double v = per[i].values[mx * 3 + mi];
                if (std::isnan(v)) continue;  // undefined on this image (empty mask)
                sum += v;
                row.cells += per[i].mask_counts[mi];
                ++row.images;
                report.per_image.push_back({row.metric, row.mask, static_cast<int>(i), v});
            }
            row.value = row.images > 0 ? sum / row.images : std::numeric_limits<double>::quiet_NaN();
            report.rows.push_back(std::move(row));
        }
    return report;
}

// ---------------------------------------------------------------------------
// Report output.

inline void write_report_csv(const MetricReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    for (const auto& note : report.notes) os << "# " << note << "\n";
    os << "metric,mask,value,cells\n";
    os << std::setprecision(17);
    for (const auto& r : report.rows) os << r.metric << "," << r.mask << "," << r.value << ","
                                         << r.cells << "\n";
}

inline void write_per_image_csv(const MetricReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << "metric,mask,image,value\n";
    os << std::setprecision(17);
    for (const auto& r : report.per_image)
        os << r.metric << "," << r.mask << "," << r.image << "," << r.value << "\n";
}

inline std::string format_report_table(const MetricReport& report) {
    std::ostringstream os;
    for (const auto& note : report.notes) os << "# " << note << "\n";
    os << std::left << std::setw(12) << "metric" << std::right << std::setw(12) << "All"
       << std::setw(12) << "Canny" << std::setw(12) << "NZ" << "\n";
    const std::vector<std::pair<std::string, std::string>> labels = {
        {"epe", "EPE"}, {"dir", "Dir"}, {"orient", "Orient"}, {"top5", "Top-5"},
        {"top10", "Top-10"}, {"mean_rank", "MeanRank"}};
    std::vector<std::string> order;
    for (const auto& r : report.rows)
        if (std::find(order.begin(), order.end(), r.metric) == order.end())
            order.push_back(r.metric);
    for (const auto& metric : order) {
        std::string label = metric;
        for (const auto& [key, pretty] : labels)
            if (key == metric) label = pretty;
        os << std::left << std::setw(12) << label << std::right << std::fixed
           << std::setprecision(4);
        for (const auto& mask : {"all", "canny", "nz"}) {
            const auto* row = report.find(metric, mask);
            os << std::setw(12) << (row ? row->value : std::numeric_limits<double>::quiet_NaN());
        }
        os.unsetf(std::ios::fixed);
        os << "\n";
    }
    return os.str();
}

}  // namespace flowpred
