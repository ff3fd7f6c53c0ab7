#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "hlgfa/png_io.hpp"
#include "hlgfa/scoring.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using namespace hlgfa;
using namespace hlgfa::testing;

namespace {

Tensor naive_anomaly(const std::vector<Tensor>& hr, const std::vector<Tensor>& al, std::size_t h, std::size_t w) {
    Tensor total = Tensor::chw(1, h, w);
    for (std::size_t s = 0; s < hr.size(); ++s) {
        Tensor norm = Tensor::chw(1, hr[s].height(), hr[s].width());
        for (std::size_t y = 0; y < hr[s].height(); ++y) {
            for (std::size_t x = 0; x < hr[s].width(); ++x) {
                double sq = 0.0;
                for (std::size_t c = 0; c < hr[s].channels(); ++c) {
                    const double d = al[s].at(c, y, x) - hr[s].at(c, y, x);
                    sq += d * d;
                }
                norm.at(0, y, x) = std::sqrt(sq);
            }
        }
        total += naive_bilinear(norm, h, w);
    }
    return total;
}

ReliabilityMap constant_reliability(double sim, std::size_t h, std::size_t w) {
    ReliabilityMap r;
    r.sim_upsampled = Tensor::chw(1, h, w, sim);
    return r;
}

AnomalyMap map_of(Tensor scores) {
    AnomalyMap m;
    m.scores = std::move(scores);
    return m;
}

}  // namespace

TEST_CASE("anomaly map closed forms and the nested-loop oracle") {
    Xorshift64Star rng(1);
    const std::vector<Tensor> hr = {random_tensor({4, 8, 8}, rng), random_tensor({6, 4, 4}, rng),
                                    random_tensor({5, 2, 2}, rng)};
    CHECK(max_abs(anomaly_map(hr, hr, 32, 32).scores) == 0.0);

    Tensor shifted = hr[0];
    for (double& v : shifted.values()) v += 0.5;
    const AnomalyMap single = anomaly_map({hr[0]}, {shifted}, 8, 8);
    for (double v : single.scores.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

    const std::vector<Tensor> al = {random_tensor({4, 8, 8}, rng), random_tensor({6, 4, 4}, rng),
                                    random_tensor({5, 2, 2}, rng)};
    const AnomalyMap m = anomaly_map(hr, al, 32, 32);
    CHECK(max_abs_difference(m.scores, naive_anomaly(hr, al, 32, 32)) < 1e-5);
    CHECK(m.stage_maps.size() == 3);
    CHECK(m.stage_maps[1].shape() == Shape{1, 4, 4});
    CHECK(*std::min_element(m.scores.values().begin(), m.scores.values().end()) >= 0.0);
    CHECK_THROWS_AS(anomaly_map(hr, {al[0]}, 32, 32), std::invalid_argument);

    const AnomalyMap normalized = anomaly_map({hr[0]}, {shifted}, 8, 8, true);
    for (double v : normalized.scores.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("structural consistency closed forms and the neighbour-loop oracle") {
    Tensor flat = Tensor::chw(3, 6, 6);
    for (std::size_t c = 0; c < 3; ++c) {
        for (double& v : flat.channel(c)) v = 0.2 + 0.3 * static_cast<double>(c);
    }
    const Tensor flat_sim = structural_consistency_field(flat, 3);
    for (double v : flat_sim.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

    Tensor checker = Tensor::chw(2, 7, 7);
    for (std::size_t y = 0; y < 7; ++y) {
        for (std::size_t x = 0; x < 7; ++x) {
            const double sign = (x + y) % 2 == 0 ? 1.0 : -1.0;
            checker.at(0, y, x) = 0.6 * sign;
            checker.at(1, y, x) = -0.8 * sign;
        }
    }
    const Tensor cs = structural_consistency_field(checker, 3);
    for (std::size_t y = 1; y < 6; ++y) {
        for (std::size_t x = 1; x < 6; ++x) CHECK(cs.at(0, y, x) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    }

    Xorshift64Star rng(2);
    const Tensor g = random_tensor({4, 5, 5}, rng);
    for (std::size_t k : {3u, 5u}) {
        const Tensor f = structural_consistency_field(g, k);
        CHECK(max_abs_difference(f, naive_consistency(g, k)) < 1e-6);
        for (double v : f.values()) {
            CHECK(v >= -1.0 - 1e-12);
            CHECK(v <= 1.0 + 1e-12);
        }
    }
    CHECK_THROWS_AS(structural_consistency_field(g, 4), std::invalid_argument);
}

TEST_CASE("reliability over stages uses the deepest or the mean field") {
    Xorshift64Star rng(3);
    std::vector<GuidanceBundle> bundles(2);
    bundles[0].fused = random_tensor({3, 8, 8}, rng);
    bundles[1].fused = random_tensor({4, 4, 4}, rng);
    ScoreConfig cfg;
    const ReliabilityMap deep = structural_consistency(bundles, cfg, 16, 16);
    CHECK(deep.sim.size() == 1);
    CHECK(max_abs_difference(deep.sim_upsampled,
                             naive_bilinear(naive_consistency(bundles[1].fused, 3), 16, 16)) < 1e-12);
    cfg.reliability_source = ReliabilitySource::mean_over_stages;
    const ReliabilityMap mean = structural_consistency(bundles, cfg, 16, 16);
    Tensor expected = naive_bilinear(naive_consistency(bundles[0].fused, 3), 16, 16);
    expected += naive_bilinear(naive_consistency(bundles[1].fused, 3), 16, 16);
    expected *= 0.5;
    CHECK(max_abs_difference(mean.sim_upsampled, expected) < 1e-12);
    for (double v : mean.modulation.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("reliability gate values") {
    CHECK(reliability_gate(0.5, 0.5, 0.1) == 0.5);
    CHECK(reliability_gate(1.0, 0.5, 0.1) == doctest::Approx(1.0 / (1.0 + std::exp(-5.0))).epsilon(1e-15));
    CHECK(reliability_gate(1.0, 0.5, 0.1) == doctest::Approx(0.9933).epsilon(1e-4));
    CHECK_THROWS_AS(reliability_gate(0.5, 0.5, 0.0), std::invalid_argument);
    double prev = 0.0;
    for (double s = -1.0; s <= 1.0; s += 0.01) {
        const double g = reliability_gate(s, 0.5, 0.1);
        CHECK(g >= prev);
        prev = g;
    }
}

TEST_CASE("reliability modulation attenuates and preserves order") {
    Xorshift64Star rng(4);
    const Tensor a = random_tensor({1, 6, 6}, rng, 0.0, 2.0);
    ScoreConfig cfg;
    const AnomalyMap at_tau = reliability_modulate(map_of(a), constant_reliability(cfg.tau, 6, 6), cfg);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(at_tau.scores[i] == 0.5 * a[i]);

    const AnomalyMap at_one = reliability_modulate(map_of(a), constant_reliability(1.0, 6, 6), cfg);
    std::vector<std::size_t> ia(a.size()), ib(a.size());
    std::iota(ia.begin(), ia.end(), 0);
    std::iota(ib.begin(), ib.end(), 0);
    std::sort(ia.begin(), ia.end(), [&](auto i, auto j) { return a[i] < a[j]; });
    std::sort(ib.begin(), ib.end(), [&](auto i, auto j) { return at_one.scores[i] < at_one.scores[j]; });
    CHECK(ia == ib);

    ReliabilityMap varied;
    varied.sim_upsampled = random_tensor({1, 6, 6}, rng, -1.0, 1.0);
    const AnomalyMap m = reliability_modulate(map_of(a), varied, cfg);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(m.scores[i] <= a[i]);
        CHECK(m.scores[i] >= 0.0);
        CHECK(m.scores[i] / a[i] > 0.0);
        CHECK(m.scores[i] / a[i] < 1.0);
    }
    // Raising sim at one pixel never lowers its modulated score.
    ReliabilityMap higher = varied;
    higher.sim_upsampled[7] += 0.3;
    CHECK(reliability_modulate(map_of(a), higher, cfg).scores[7] >= m.scores[7]);

    Tensor with_zero = a;
    with_zero[3] = 0.0;
    CHECK(reliability_modulate(map_of(with_zero), varied, cfg).scores[3] == 0.0);
    ScoreConfig bad = cfg;
    bad.delta = -1.0;
    CHECK_THROWS_AS(reliability_modulate(map_of(a), varied, bad), std::invalid_argument);
}

TEST_CASE("gaussian smoothing: identity, impulse mass and direct oracle") {
    Xorshift64Star rng(5);
    const Tensor r = random_tensor({1, 20, 17}, rng, 0.0, 1.0);
    CHECK(gaussian_smooth(r, 0.0) == r);
    ScoreConfig cfg;
    cfg.smoothing_sigma = 0.0;
    CHECK(postprocess_map(map_of(r), cfg).scores == r);

    Tensor impulse = Tensor::chw(1, 41, 41);
    impulse.at(0, 20, 20) = 3.0;
    const Tensor blurred = gaussian_smooth(impulse, 4.0);
    double mass = 0.0;
    for (double v : blurred.values()) mass += v;
    CHECK(std::abs(mass - 3.0) < 1e-4);
    const auto k = gaussian_kernel(4.0);
    CHECK(k.size() == 33);
    CHECK(blurred.at(0, 20, 24) == doctest::Approx(3.0 * k[16] * k[20]).epsilon(1e-12));

    for (double sigma : {0.7, 1.5, 4.0}) {
        CHECK(max_abs_difference(gaussian_smooth(r, sigma), naive_gaussian(r, sigma)) < 1e-5);
    }
    CHECK_THROWS_AS(gaussian_kernel(0.0), std::invalid_argument);
}

TEST_CASE("image score reductions") {
    ScoreConfig cfg;
    CHECK(image_score(Tensor::chw(1, 4, 4, 0.7), cfg) == 0.7);
    Tensor peak = Tensor::chw(1, 4, 4, 0.1);
    peak[9] = 2.5;
    CHECK(image_score(peak, cfg) == 2.5);
    cfg.image_reduction = ImageReduction::top_k_mean;
    cfg.top_k = 3;
    CHECK(image_score(Tensor({1, 1, 5}, {5, 4, 3, 2, 1}), cfg) == 4.0);
    CHECK(image_score(Tensor::chw(1, 4, 4, 0.7), cfg) == doctest::Approx(0.7));
    cfg.top_k = 6;
    CHECK_THROWS_AS(image_score(Tensor({1, 1, 5}, {5, 4, 3, 2, 1}), cfg), std::invalid_argument);
}

TEST_CASE("full scoring on aligned == hr yields zero") {
    Xorshift64Star rng(6);
    FeaturePyramid hr = random_pyramid({{4, 8, 8}, {6, 4, 4}}, rng);
    AlignmentResult same;
    for (const FeatureMap& m : hr.stages) {
        same.aligned.push_back(m.data);
        GuidanceBundle b;
        b.fused = random_tensor(m.data.shape(), rng);
        same.guidance.push_back(b);
    }
    ScoreConfig cfg;
    const ScoredImage s = score_alignment(hr, same, cfg);
    CHECK(s.map.image_score == 0.0);
    CHECK(max_abs(s.map.scores) == 0.0);
    CHECK(s.map.scores.shape() == Shape{1, 32, 32});
}

TEST_CASE("heatmap levels and files") {
    const Tensor ramp({1, 1, 3}, {1.0, 2.0, 3.0});
    CHECK(heatmap_levels(ramp, {}) == std::vector<std::uint16_t>{0, 32768, 65535});
    CHECK(heatmap_levels(Tensor::chw(1, 2, 2, 4.0), {}) == std::vector<std::uint16_t>(4, 0));
    const HeatmapOptions global{HeatmapMode::global, 0.0, 2.0};
    CHECK(heatmap_levels(ramp, global) == std::vector<std::uint16_t>{32768, 65535, 65535});
    CHECK(heatmap_levels(ramp, {HeatmapMode::global, 1.0, 1.0}) == std::vector<std::uint16_t>(3, 0));

    ScratchDir dir("heat");
    Xorshift64Star rng(7);
    const Tensor m = random_tensor({1, 9, 11}, rng, 0.0, 5.0);
    write_heatmap_png(dir / "h.png", m, {});
    std::size_t w = 0, h = 0;
    CHECK(png::read_gray16(dir / "h.png", w, h) == heatmap_levels(m, {}));
    CHECK(w == 11);
    write_raw_map(dir / "m.hlgw", m);
    CHECK(read_raw_map(dir / "m.hlgw") == m);
}

TEST_CASE("score config validation") {
    ScoreConfig c;
    c.neighborhood = 4;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.smoothing_sigma = -1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.delta = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
