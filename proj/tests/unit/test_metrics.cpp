#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "hlgfa/metrics.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using namespace hlgfa;
using namespace hlgfa::testing;

namespace {

ScoredSet random_set(Xorshift64Star& rng, std::size_t n) {
    ScoredSet set;
    for (std::size_t i = 0; i < n; ++i) {
        // Coarse scores so that ties are common.
        set.scores.push_back(std::floor(rng.uniform() * 12.0) / 12.0);
        set.labels.push_back(rng.uniform() < 0.4 ? 1 : 0);
    }
    set.labels[0] = 1;
    set.labels[1] = 0;
    return set;
}

Tensor block_mask(std::size_t side, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    Tensor m = Tensor::chw(1, side, side);
    for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) m.at(0, y, x) = 1.0;
    }
    return m;
}

}  // namespace

TEST_CASE("auroc examples") {
    CHECK(auroc({{0.9, 0.8, 0.7, 0.6}, {1, 1, 0, 0}}) == 1.0);
    CHECK(auroc({{1.0, 1.0}, {0, 1}}) == 0.5);
    CHECK(auroc({{0.9, 0.8, 0.7, 0.6}, {1, 0, 0, 1}}) == 0.5);
    CHECK_THROWS_AS(auroc({{0.1, 0.2}, {1, 1}}), std::invalid_argument);
    CHECK_THROWS_AS(auroc({{0.1, 0.2}, {0, 0}}), std::invalid_argument);
    CHECK_THROWS_AS(auroc({{0.1, NAN}, {0, 1}}), std::invalid_argument);
    CHECK_THROWS_AS(auroc({{0.1}, {0, 1}}), std::invalid_argument);
}

TEST_CASE("average precision examples") {
    CHECK(average_precision({{0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}}) == 1.0);
    CHECK(average_precision({{0.9, 0.8, 0.7}, {1, 0, 1}}) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    for (std::size_t n : {2u, 5u, 17u}) {
        ScoredSet set;
        for (std::size_t i = 0; i < n; ++i) {
            set.scores.push_back(static_cast<double>(n - i));
            set.labels.push_back(i + 1 == n ? 1 : 0);
        }
        CHECK(average_precision(set) == doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(average_precision({{0.1, 0.2}, {0, 0}}), std::invalid_argument);
}

TEST_CASE("optimal F1 examples") {
    CHECK(f1_optimal({{0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}}).f1 == 1.0);
    const F1Result r = f1_optimal({{0.9, 0.8, 0.7}, {1, 0, 1}});
    CHECK(r.f1 == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(r.threshold == 0.7);
    // Every score equal: the only threshold predicts all positive.
    const double P = 3.0, N = 10.0;
    const F1Result flat = f1_optimal({std::vector<double>(10, 0.4), {1, 1, 1, 0, 0, 0, 0, 0, 0, 0}});
    CHECK(flat.f1 == doctest::Approx(2.0 * P / (N + P)).epsilon(1e-12));
    CHECK_THROWS_AS(f1_optimal({{0.1, 0.2}, {0, 0}}), std::invalid_argument);
}

TEST_CASE("metrics agree with brute-force oracles on random sets with ties") {
    Xorshift64Star rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 199.0);
        const ScoredSet set = random_set(rng, n);
        CAPTURE(trial);
        CHECK(std::abs(auroc(set) - pairwise_auroc(set.scores, set.labels)) < 1e-9);
        CHECK(average_precision(set) == sweep_average_precision(set.scores, set.labels));
        const auto [f1, t] = sweep_f1(set.scores, set.labels);
        const F1Result got = f1_optimal(set);
        CHECK(got.f1 == f1);
        CHECK(got.threshold == t);
    }
}

TEST_CASE("rank invariance and complement symmetry") {
    Xorshift64Star rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        ScoredSet set = random_set(rng, 60);
        ScoredSet warped = set;
        for (double& s : warped.scores) s = std::exp(3.0 * s);
        CHECK(auroc(set) == doctest::Approx(auroc(warped)).epsilon(1e-12));
        CHECK(average_precision(set) == doctest::Approx(average_precision(warped)).epsilon(1e-12));
        CHECK(f1_optimal(set).f1 == doctest::Approx(f1_optimal(warped).f1).epsilon(1e-12));

        ScoredSet flipped = set;
        for (int& l : flipped.labels) l = 1 - l;
        CHECK(std::abs(auroc(set) + auroc(flipped) - 1.0) < 1e-9);
    }
}

TEST_CASE("connected components use 8-connectivity in row-major order") {
    Tensor m = Tensor::chw(1, 5, 5);
    m.at(0, 0, 3) = 1.0;
    m.at(0, 1, 4) = 1.0;  // diagonal neighbour of (0, 3)
    m.at(0, 2, 0) = 1.0;
    m.at(0, 3, 0) = 1.0;
    m.at(0, 4, 4) = 1.0;
    std::size_t count = 0;
    const auto labels = connected_components(m, count);
    CHECK(count == 3);
    CHECK(labels[3] == 1);
    CHECK(labels[9] == 1);
    CHECK(labels[10] == 2);
    CHECK(labels[15] == 2);
    CHECK(labels[24] == 3);
    CHECK(labels[0] == 0);
}

TEST_CASE("PRO examples") {
    const Tensor mask = block_mask(16, 4, 8, 4, 8);
    PixelScoredSet exact{{mask}, {mask}};
    CHECK(pro_score(exact) == doctest::Approx(1.0).epsilon(1e-12));

    // Constant scores: the curve runs straight from (0, 0) to (1, 1).
    PixelScoredSet flat{{Tensor::chw(1, 16, 16, 0.3)}, {mask}};
    CHECK(pro_score(flat) == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(pro_score(flat) == doctest::Approx(dense_pro(flat, 0.3)).epsilon(1e-12));

    // Two regions: one scored above the background, one below. Overlap sits
    // at 0.5 over the whole FPR range.
    Tensor two = block_mask(16, 1, 4, 1, 4);
    Tensor other = block_mask(16, 10, 14, 10, 14);
    two += other;
    Tensor scores = Tensor::chw(1, 16, 16, 0.5);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (two[i] > 0.5) scores[i] = (i / 16 < 8) ? 1.0 : 0.0;
    }
    PixelScoredSet split{{scores}, {two}};
    CHECK(pro_score(split) == doctest::Approx(0.5).epsilon(1e-12));

    // Duplicating a symmetric image leaves PRO unchanged.
    PixelScoredSet doubled{{scores, scores}, {two, two}};
    CHECK(pro_score(doubled) == doctest::Approx(pro_score(split)).epsilon(1e-12));

    PixelScoredSet empty{{scores}, {Tensor::chw(1, 16, 16)}};
    CHECK_THROWS_AS(pro_score(empty), std::invalid_argument);
}

TEST_CASE("PRO matches the dense-threshold oracle on random 32x32 fixtures") {
    Xorshift64Star rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        PixelScoredSet set;
        for (int img = 0; img < 2; ++img) {
            Tensor mask = Tensor::chw(1, 32, 32);
            for (int r = 0; r < 3; ++r) {
                const auto y = static_cast<std::size_t>(rng.uniform() * 26.0);
                const auto x = static_cast<std::size_t>(rng.uniform() * 26.0);
                const auto h = 1 + static_cast<std::size_t>(rng.uniform() * 6.0);
                const auto w = 1 + static_cast<std::size_t>(rng.uniform() * 6.0);
                mask += block_mask(32, y, y + h, x, x + w);
            }
            for (double& v : mask.values()) v = v > 0.5 ? 1.0 : 0.0;
            Tensor map = Tensor::chw(1, 32, 32);
            for (std::size_t i = 0; i < map.size(); ++i) {
                map[i] = std::floor((rng.uniform() + 0.4 * mask[i]) * 40.0) / 40.0;
            }
            set.maps.push_back(map);
            set.masks.push_back(mask);
        }
        for (double limit : {0.3, 0.05, 1.0}) {
            CAPTURE(trial);
            CAPTURE(limit);
            CHECK(std::abs(pro_score(set, limit) - dense_pro(set, limit)) < 1e-6);
        }
    }
}

TEST_CASE("category metrics and the report") {
    const Tensor mask = block_mask(8, 2, 5, 2, 5);
    Tensor good_map = Tensor::chw(1, 8, 8, 0.1);
    PixelScoredSet pixels{{mask, good_map}, {mask, Tensor::chw(1, 8, 8)}};
    const ScoredSet images{{1.0, 0.1}, {1, 0}};
    const CategoryMetrics a = compute_category_metrics("a", images, pixels);
    CHECK(a.auc_i == 1.0);
    CHECK(a.auc_p == 1.0);
    CHECK(a.ap_p == 1.0);
    CHECK(a.f1_p == 1.0);
    CHECK(a.pro_p == doctest::Approx(1.0));

    EvalReport report;
    report.rows.push_back(a);
    CategoryMetrics b{"b", 0.5, 0.5, 0.5, 0.7, 0.3, 0.4, 0.2};
    report.rows.push_back(b);
    const CategoryMetrics avg = report.average();
    CHECK(avg.category == "AVERAGE");
    CHECK(avg.auc_i == doctest::Approx(0.75));
    CHECK(avg.auc_p == doctest::Approx(0.85));
    CHECK(avg.f1_p == doctest::Approx(0.6));

    const std::string csv = report.to_csv();
    CHECK(csv.rfind("category,AUC-I,AP-I,F1-I,AUC-P,AP-P,PRO-P,F1-P\n", 0) == 0);
    CHECK(csv.find("\nb,") != std::string::npos);
    CHECK(csv.find("\nAVERAGE,") != std::string::npos);
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n' ? 1 : 0;
    CHECK(lines == 4);

    const auto json = nlohmann::json::parse(report.to_json());
    CHECK(json["categories"].size() == 2);
    CHECK(json["categories"][1]["PRO-P"].get<double>() == 0.4);
    CHECK(json["average"]["AUC-I"].get<double>() == doctest::Approx(0.75));

    ScratchDir dir("report");
    report.write(dir.path());
    CHECK(std::filesystem::exists(dir / "metrics.csv"));
    CHECK(std::filesystem::exists(dir / "metrics.json"));

    const ScoredSet one_class{{0.2, 0.3}, {0, 0}};
    CHECK_THROWS_AS(compute_category_metrics("c", one_class, pixels), std::invalid_argument);
}
