#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <queue>
#include <sstream>

#include "flowpred/metrics.hpp"
#include "flowpred/synth.hpp"
#include "oracles.hpp"

using namespace flowpred;

namespace {

FlowField random_coarse(int w, int h, Rng& rng, double scale = 4.0) {
    FlowField f(w, h);
    for (auto& x : f.uv) x = rng.uniform(-scale, scale);
    return f;
}

EvalMask random_mask(int m, int n, Rng& rng) {
    EvalMask mask(m, n, MaskKind::All);
    for (auto& c : mask.cells) c = rng.coin() ? 1 : 0;
    return mask;
}

FlowCodebook simple_codebook() {
    FlowCodebook cb;
    cb.centers = {{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}, {0.0, -1.0}, {2.0, 2.0}};
    cb.zero_index = 0;
    return cb;
}

}  // namespace

TEST(Epe, IdenticalFieldsAreZero) {
    Rng rng(1);
    auto f = random_coarse(6, 6, rng);
    auto v = epe(f, f, all_mask(6, 6));
    ASSERT_TRUE(v.has_value());
    EXPECT_DOUBLE_EQ(*v, 0.0);
}

TEST(Epe, ThreeFourFive) {
    FlowField pred(1, 1), gt(1, 1);
    pred.u(0, 0) = 3.0;
    pred.v(0, 0) = 4.0;
    auto v = epe(pred, gt, all_mask(1, 1));
    EXPECT_DOUBLE_EQ(*v, 5.0);
}

TEST(Epe, MatchesLoopOracleAndIsSymmetric) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_coarse(8, 8, rng), b = random_coarse(8, 8, rng);
        auto mask = random_mask(8, 8, rng);
        if (mask.count() == 0) mask.set(0, 0, true);
        auto v = epe(a, b, mask);
        ASSERT_TRUE(v.has_value());
        EXPECT_NEAR(*v, oracle::epe_ref(a, b, mask), 1e-12);
        EXPECT_DOUBLE_EQ(*epe(b, a, mask), *v);
        EXPECT_GE(*v, 0.0);
    }
}

TEST(Epe, EmptyMaskIsUndefined) {
    FlowField f(2, 2);
    EvalMask empty(2, 2, MaskKind::NonZero);
    EXPECT_FALSE(epe(f, f, empty).has_value());
}

TEST(Direction, OrthogonalAndAntiparallel) {
    FlowField a(2, 1), b(2, 1);
    a.u(0, 0) = 1.0;
    b.v(0, 0) = 1.0;  // orthogonal at cell 0
    a.u(1, 0) = 1.0;
    b.u(1, 0) = -1.0;  // antiparallel at cell 1
    EvalMask one(1, 2, MaskKind::All);
    one.set(0, 0, true);
    EXPECT_DOUBLE_EQ(*direction_similarity(a, b, one), 0.0);
    EvalMask other(1, 2, MaskKind::All);
    other.set(0, 1, true);
    EXPECT_DOUBLE_EQ(*direction_similarity(a, b, other), -1.0);
}

TEST(Direction, ZeroNormContributesZeroButCounts) {
    FlowField a(2, 1), b(2, 1);
    a.u(0, 0) = 1.0;
    b.u(0, 0) = 1.0;  // cos 1
    // Cell 1: both zero -> contributes 0.
    auto v = direction_similarity(a, b, all_mask(1, 2));
    EXPECT_DOUBLE_EQ(*v, 0.5);
}

TEST(Direction, MatchesLoopOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_coarse(8, 8, rng), b = random_coarse(8, 8, rng);
        auto mask = random_mask(8, 8, rng);
        if (mask.count() == 0) mask.set(2, 2, true);
        EXPECT_NEAR(*direction_similarity(a, b, mask), oracle::dir_ref(a, b, mask, false), 1e-12);
    }
}

TEST(Orientation, ClosedForms) {
    FlowField a(3, 1), b(3, 1);
    a.u(0, 0) = 1.0;
    b.u(0, 0) = -1.0;  // |cos| = 1
    a.u(1, 0) = 1.0;
    b.v(1, 0) = 1.0;  // |cos| = 0
    a.u(2, 0) = 1.0;
    a.v(2, 0) = 1.0;
    b.u(2, 0) = 1.0;  // |cos| = sqrt(2)/2
    EvalMask m0(1, 3, MaskKind::All), m1(1, 3, MaskKind::All), m2(1, 3, MaskKind::All);
    m0.set(0, 0, true);
    m1.set(0, 1, true);
    m2.set(0, 2, true);
    EXPECT_DOUBLE_EQ(*orientation_similarity(a, b, m0), 1.0);
    EXPECT_DOUBLE_EQ(*orientation_similarity(a, b, m1), 0.0);
    EXPECT_NEAR(*orientation_similarity(a, b, m2), std::sqrt(2.0) / 2.0, 1e-12);
}

TEST(Orientation, EqualsAbsoluteDirectionCellwise) {
    Rng rng(4);
    auto a = random_coarse(5, 5, rng), b = random_coarse(5, 5, rng);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            EvalMask cell(5, 5, MaskKind::All);
            cell.set(i, j, true);
            EXPECT_NEAR(*orientation_similarity(a, b, cell),
                        std::abs(*direction_similarity(a, b, cell)), 1e-12);
        }
}

TEST(TopN, ArgmaxEverywhereGivesPerfectTopOne) {
    Rng rng(5);
    QuantizedLabelGrid gt(4, 4);
    PredictionGrid p(4, 4, 6);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            gt.at(i, j) = static_cast<int>(rng.index(6));
            for (int r = 0; r < 6; ++r) p.at(i, j, r) = 0.05;
            p.at(i, j, gt.at(i, j)) = 0.75;
        }
    EXPECT_DOUBLE_EQ(*top_n_accuracy(p, gt, 1, all_mask(4, 4)), 1.0);
}

TEST(TopN, FullDepthAlwaysHitsAndClampsAboveC) {
    Rng rng(6);
    QuantizedLabelGrid gt(3, 3);
    PredictionGrid p(3, 3, 5);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            gt.at(i, j) = static_cast<int>(rng.index(5));
            double sum = 0.0;
            for (int r = 0; r < 5; ++r) {
                p.at(i, j, r) = rng.uniform(0.0, 1.0);
                sum += p.at(i, j, r);
            }
            for (int r = 0; r < 5; ++r) p.at(i, j, r) /= sum;
        }
    EXPECT_DOUBLE_EQ(*top_n_accuracy(p, gt, 5, all_mask(3, 3)), 1.0);
    EXPECT_DOUBLE_EQ(*top_n_accuracy(p, gt, 11, all_mask(3, 3)), 1.0);
}

TEST(TopN, UniformPredictionsScoreExactlyNOverC) {
    // Equidistributed labels + the lowest-index tie rule make this exact.
    const int c = 40;
    QuantizedLabelGrid gt(20, 20);
    for (int i = 0; i < 400; ++i) gt.labels[i] = i % c;
    PredictionGrid p(20, 20, c);
    for (auto& x : p.p) x = 1.0 / c;
    EXPECT_DOUBLE_EQ(*top_n_accuracy(p, gt, 5, all_mask(20, 20)), 5.0 / 40.0);
    EXPECT_DOUBLE_EQ(*top_n_accuracy(p, gt, 5, all_mask(20, 20)), 0.125);
}

TEST(TopN, MatchesSortOracleExactly) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        QuantizedLabelGrid gt(8, 8);
        PredictionGrid p(8, 8, 9);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) {
                gt.at(i, j) = static_cast<int>(rng.index(9));
                double sum = 0.0;
                for (int r = 0; r < 9; ++r) {
                    p.at(i, j, r) = rng.uniform(0.0, 1.0);
                    sum += p.at(i, j, r);
                }
                for (int r = 0; r < 9; ++r) p.at(i, j, r) /= sum;
            }
        auto mask = random_mask(8, 8, rng);
        if (mask.count() == 0) mask.set(1, 1, true);
        for (int n : {1, 3, 5}) {
            auto got = top_n_accuracy(p, gt, n, mask);
            EXPECT_DOUBLE_EQ(*got, oracle::topn_ref(p, gt, n, mask));
        }
        // Non-decreasing in n.
        double prev = 0.0;
        for (int n = 1; n <= 9; ++n) {
            const double cur = *top_n_accuracy(p, gt, n, mask);
            EXPECT_GE(cur, prev);
            prev = cur;
        }
        EXPECT_DOUBLE_EQ(prev, 1.0);
    }
}

TEST(CannyMask, ConstantImageIsEmpty) {
    Image img(16, 16, 3);
    for (auto& p : img.pix) p = 0.5f;
    auto mask = canny_mask(img, 4, 4);
    EXPECT_EQ(mask.count(), 0);
}

TEST(CannyMask, VerticalStepEdgeMarksStraddlingCells) {
    // 8x8 step between columns 3 and 4. Non-maximum suppression thins the
    // response to a single column at the step, so the edge pixels sit in the
    // straddling columns {3, 4} and only the cells containing them are true.
    Image img(8, 8, 1);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) img.at(x, y) = x < 4 ? 0.2f : 0.8f;
    const auto edges = canny_edges(img);
    const auto want = oracle::canny_ref(img, 1.4, 0.1, 0.3);
    EXPECT_EQ(edges, want);
    for (int y = 0; y < 8; ++y) {
        int row_edges = 0;
        for (int x = 0; x < 8; ++x)
            if (edges[static_cast<std::size_t>(y) * 8 + x]) {
                EXPECT_TRUE(x == 3 || x == 4) << "edge at column " << x;
                ++row_edges;
            }
        EXPECT_GE(row_edges, 1);
    }
    // Grid cells (4x4 -> two columns each): mask true exactly where an edge
    // pixel falls, i.e. only in the middle cell columns.
    auto mask = canny_mask(img, 4, 4);
    for (int i = 0; i < 4; ++i) {
        EXPECT_FALSE(mask.at(i, 0));
        EXPECT_FALSE(mask.at(i, 3));
        bool middle = false;
        for (int j = 1; j <= 2; ++j) {
            const auto [x0, x1] = cell_bounds(8, 4, j);
            bool hit = false;
            const auto [y0, y1] = cell_bounds(8, 4, i);
            for (int y = y0; y < y1 && !hit; ++y)
                for (int x = x0; x < x1; ++x)
                    if (want[static_cast<std::size_t>(y) * 8 + x]) hit = true;
            EXPECT_EQ(mask.at(i, j), hit);
            middle = middle || mask.at(i, j);
        }
        EXPECT_TRUE(middle);
    }
}

TEST(CannyMask, ExtremeThresholdsGiveEmptyMask) {
    Rng rng(8);
    Image img(12, 12, 1);
    for (auto& p : img.pix) p = static_cast<float>(rng.uniform(0.0, 1.0));
    CannyParams extreme;
    extreme.low_frac = extreme.high_frac = 1.0;
    auto mask = canny_mask(img, 3, 3, extreme);
    EXPECT_EQ(mask.count(), 0);
}

TEST(CannyMask, MatchesReferenceOracleExactly) {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        Image img(20, 14, 3);
        for (auto& p : img.pix) p = static_cast<float>(rng.uniform(0.0, 1.0));
        EXPECT_EQ(canny_edges(img), oracle::canny_ref(img, 1.4, 0.1, 0.3)) << "trial " << trial;
    }
}

TEST(NonZeroMask, EmptyFullAndMixed) {
    auto cb = simple_codebook();
    QuantizedLabelGrid gt(3, 3);
    for (auto& x : gt.labels) x = cb.zero_index;
    EXPECT_EQ(nonzero_mask(gt, cb).count(), 0);
    for (auto& x : gt.labels) x = 2;
    EXPECT_EQ(nonzero_mask(gt, cb).count(), 9);

    Rng rng(10);
    for (auto& x : gt.labels) x = static_cast<int>(rng.index(6));
    auto mask = nonzero_mask(gt, cb);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) EXPECT_EQ(mask.at(i, j), gt.at(i, j) != cb.zero_index);
}

TEST(NnBaseline, SelfQueryRanksFirst) {
    Rng rng(11);
    std::vector<std::vector<double>> feats;
    std::vector<QuantizedLabelGrid> labels;
    std::vector<Image> images;
    for (int t = 0; t < 6; ++t) {
        Image img(8, 8, 1);
        for (auto& p : img.pix) p = static_cast<float>(rng.uniform(0.0, 1.0));
        images.push_back(img);
        feats.push_back(pixel_features(img));
        QuantizedLabelGrid g(2, 2);
        for (auto& x : g.labels) x = static_cast<int>(rng.index(6));
        labels.push_back(g);
    }
    NnPredictor nn(pixel_features, feats, labels, simple_codebook());
    auto order = nn.match_order(images[3]);
    EXPECT_EQ(order[0], 3);
}

TEST(NnBaseline, OrderMatchesExhaustiveSortOracle) {
    Rng rng(12);
    std::vector<std::vector<double>> feats;
    std::vector<QuantizedLabelGrid> labels;
    for (int t = 0; t < 10; ++t) {
        std::vector<double> f(16);
        for (auto& x : f) x = rng.uniform(-1.0, 1.0);
        feats.push_back(f);
        labels.emplace_back(2, 2);
    }
    auto identity = [](const Image& img) {
        std::vector<double> f(img.pix.begin(), img.pix.end());
        return f;
    };
    NnPredictor nn(identity, feats, labels, simple_codebook());
    Image query(16, 1, 1);
    for (auto& p : query.pix) p = static_cast<float>(rng.uniform(-1.0, 1.0));
    auto order = nn.match_order(query);

    std::vector<std::pair<double, int>> want;
    for (int t = 0; t < 10; ++t) {
        double d = 0.0;
        for (int i = 0; i < 16; ++i) {
            const double diff = query.pix[i] - feats[t][i];
            d += diff * diff;
        }
        want.emplace_back(d, t);
    }
    std::sort(want.begin(), want.end());
    for (int t = 0; t < 10; ++t) EXPECT_EQ(order[t], want[t].second);
}

TEST(NnBaseline, CandidatesAreDedupedMatchLabels) {
    // Three training frames with known labels at one cell.
    std::vector<std::vector<double>> feats = {{0.0}, {1.0}, {2.0}};
    std::vector<QuantizedLabelGrid> labels(3, QuantizedLabelGrid(1, 1));
    labels[0].at(0, 0) = 4;
    labels[1].at(0, 0) = 4;
    labels[2].at(0, 0) = 1;
    auto one_pixel = [](const Image& img) { return std::vector<double>{img.pix[0]}; };
    NnPredictor nn(one_pixel, feats, labels, simple_codebook());

    EvalItem item;
    item.image = Image(1, 1, 1);
    item.image.pix[0] = 0.1f;  // nearest order: 0, 1, 2
    item.gt_labels = QuantizedLabelGrid(1, 1);
    auto pred = nn.predict_item(item);
    EXPECT_EQ(pred.candidates_at(2), (std::vector<std::vector<int>>{{4}}));
    EXPECT_EQ(pred.candidates_at(3), (std::vector<std::vector<int>>{{4, 1}}));
    // Decoded flow is the best match's center.
    EXPECT_DOUBLE_EQ(pred.flow.v(0, 0), -1.0);  // center 4 = (0, -1)
}

namespace {

struct EvalFixture {
    std::filesystem::path dir;
    std::vector<ManifestEntry> entries;
    FlowCodebook codebook;

    explicit EvalFixture(int scenes, std::uint64_t seed) {
        dir = std::filesystem::temp_directory_path() / ("fp_eval_" + std::to_string(seed));
        CueDatasetOptions opt;
        opt.count = scenes;
        opt.size = 32;
        opt.frames = 3;
        opt.speed = 2.0;
        opt.seed = seed;
        auto paths = write_cue_dataset(dir.string(), opt);
        entries = load_manifest(paths.manifest);
        std::ostringstream sink;
        ModelConfig cfg;
        cfg.input_w = cfg.input_h = 32;
        cfg.grid_m = cfg.grid_n = 4;
        auto samples = collect_label_samples(cfg, entries, sink);
        codebook = build_codebook(samples, 6, seed);
    }
    ~EvalFixture() { std::filesystem::remove_all(dir); }
};

}  // namespace

TEST(Evaluate, OraclePredictorIsPerfect) {
    EvalFixture fx(5, 31);
    EvalOptions opt;
    opt.grid_m = opt.grid_n = 4;
    std::ostringstream sink;
    OraclePredictor oracle;
    auto report = evaluate(oracle, fx.entries, fx.codebook, opt, sink);
    for (const char* mask : {"all", "canny", "nz"}) {
        const auto* row = report.find("epe", mask);
        ASSERT_NE(row, nullptr);
        if (row->images > 0) EXPECT_DOUBLE_EQ(row->value, 0.0) << mask;
        const auto* top5 = report.find("top5", mask);
        if (top5->images > 0) EXPECT_DOUBLE_EQ(top5->value, 1.0) << mask;
        const auto* rank = report.find("mean_rank", mask);
        if (rank->images > 0) EXPECT_DOUBLE_EQ(rank->value, 1.0) << mask;
    }
    EXPECT_EQ(report.skipped, 0);
}

TEST(Evaluate, MatchesIndependentRecomputation) {
    // Recompute every (metric, mask) cell from scratch for the uniform
    // predictor on a 5-image set and compare against the report.
    EvalFixture fx(5, 32);
    const int m = 4, n = 4;
    EvalOptions opt;
    opt.grid_m = opt.grid_n = 4;
    std::ostringstream sink;
    UniformPredictor uniform(fx.codebook);
    auto report = evaluate(uniform, fx.entries, fx.codebook, opt, sink);

    const int c = fx.codebook.size();
    double mu = 0.0, mv = 0.0;
    for (const auto& ctr : fx.codebook.centers) {
        mu += ctr[0];
        mv += ctr[1];
    }
    mu /= c;
    mv /= c;

    struct Acc {
        double sum = 0.0;
        int images = 0;
    };
    std::map<std::string, Acc> acc;
    for (const auto& e : fx.entries) {
        auto ex = load_example(e);
        auto cells = cell_mean_field(ex.flow, m, n);
        auto gt = quantize(ex.flow, fx.codebook, m, n);
        FlowField pf(n, m);
        for (std::size_t i = 0; i < pf.uv.size(); i += 2) {
            pf.uv[i] = mu;
            pf.uv[i + 1] = mv;
        }
        const EvalMask masks[3] = {all_mask(m, n), canny_mask(ex.image, m, n),
                                   nonzero_mask(gt, fx.codebook)};
        const char* names[3] = {"all", "canny", "nz"};
        for (int mi = 0; mi < 3; ++mi) {
            if (masks[mi].count() == 0) continue;
            auto add = [&](const std::string& metric, double v) {
                auto& a = acc[metric + "/" + names[mi]];
                a.sum += v;
                a.images += 1;
            };
            add("epe", oracle::epe_ref(pf, cells, masks[mi]));
            add("dir", oracle::dir_ref(pf, cells, masks[mi], false));
            add("orient", oracle::dir_ref(pf, cells, masks[mi], true));
            long hits = 0, cnt = 0, rank_sum = 0;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    if (!masks[mi].at(i, j)) continue;
                    ++cnt;
                    if (gt.at(i, j) < 5) ++hits;
                    rank_sum += gt.at(i, j) + 1;  // uniform ties resolve by index
                }
            add("top5", static_cast<double>(hits) / cnt);
            add("mean_rank", static_cast<double>(rank_sum) / cnt);
        }
    }
    for (const auto& [key, a] : acc) {
        const auto slash = key.find('/');
        const auto* row = report.find(key.substr(0, slash), key.substr(slash + 1));
        ASSERT_NE(row, nullptr) << key;
        EXPECT_EQ(row->images, a.images) << key;
        EXPECT_NEAR(row->value, a.sum / a.images, 1e-9) << key;
    }
}

TEST(Evaluate, JobsDoNotChangeResults) {
    EvalFixture fx(6, 33);
    EvalOptions opt1, opt4;
    opt1.grid_m = opt1.grid_n = 4;
    opt4.grid_m = opt4.grid_n = 4;
    opt4.jobs = 4;
    std::ostringstream sink;
    UniformPredictor uniform(fx.codebook);
    auto a = evaluate(uniform, fx.entries, fx.codebook, opt1, sink);
    auto b = evaluate(uniform, fx.entries, fx.codebook, opt4, sink);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        EXPECT_EQ(a.rows[i].metric, b.rows[i].metric);
        if (a.rows[i].images > 0)
            EXPECT_DOUBLE_EQ(a.rows[i].value, b.rows[i].value) << a.rows[i].metric;
        EXPECT_EQ(a.rows[i].cells, b.rows[i].cells);
    }
}

TEST(Evaluate, FailedItemsAreSkippedWithCount) {
    EvalFixture fx(3, 34);
    auto entries = fx.entries;
    entries.push_back({"/missing.ppm", {"/missing.flo"}});
    EvalOptions opt;
    opt.grid_m = opt.grid_n = 4;
    std::ostringstream log;
    OraclePredictor oracle;
    auto report = evaluate(oracle, entries, fx.codebook, opt, log);
    EXPECT_EQ(report.skipped, 1);
    EXPECT_NE(log.str().find("skipping"), std::string::npos);
}

TEST(Evaluate, ReportFilesAreWritten) {
    EvalFixture fx(3, 35);
    EvalOptions opt;
    opt.grid_m = opt.grid_n = 4;
    opt.extra_top_n = 3;
    std::ostringstream sink;
    UniformPredictor uniform(fx.codebook);
    auto report = evaluate(uniform, fx.entries, fx.codebook, opt, sink);
    const auto csv = std::filesystem::temp_directory_path() / "fp_report.csv";
    const auto per = std::filesystem::temp_directory_path() / "fp_report_per_image.csv";
    write_report_csv(report, csv.string());
    write_per_image_csv(report, per.string());
    std::ifstream is(csv);
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    EXPECT_NE(content.find("metric,mask,value,cells"), std::string::npos);
    EXPECT_NE(content.find("top3,"), std::string::npos);
    EXPECT_NE(content.find("# aggregation: per-image mean"), std::string::npos);
    auto table = format_report_table(report);
    EXPECT_NE(table.find("Top-5"), std::string::npos);
    std::filesystem::remove(csv);
    std::filesystem::remove(per);
}
