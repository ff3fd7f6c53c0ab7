#include <doctest.h>

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "hlgfa/objective.hpp"
#include "hlgfa/pipeline.hpp"
#include "oracles.hpp"

using namespace hlgfa;
using namespace hlgfa::testing;

namespace {

std::vector<Tensor> one(Tensor t) { return {std::move(t)}; }

Tensor vectors(std::initializer_list<std::initializer_list<double>> locations) {
    // Builds (C, 1, N) from per-location channel vectors.
    const std::size_t n = locations.size();
    const std::size_t c = locations.begin()->size();
    Tensor t = Tensor::chw(c, 1, n);
    std::size_t x = 0;
    for (const auto& loc : locations) {
        std::size_t ch = 0;
        for (double v : loc) t.at(ch++, 0, x) = v;
        ++x;
    }
    return t;
}

std::vector<Tensor> random_stages(Xorshift64Star& rng, double lo = -1.0, double hi = 1.0) {
    return {random_tensor({4, 3, 3}, rng, lo, hi), random_tensor({6, 2, 2}, rng, lo, hi)};
}

std::vector<Tensor> scaled(std::vector<Tensor> stages, double c) {
    for (Tensor& t : stages) t *= c;
    return stages;
}

}  // namespace

TEST_CASE("cosine alignment loss closed forms") {
    CHECK(cosine_align_loss(one(vectors({{1, 0}})), one(vectors({{0, 1}}))) == doctest::Approx(1.0));
    CHECK(cosine_align_loss(one(vectors({{1, 2, -3}})), one(vectors({{-1, -2, 3}}))) == doctest::Approx(2.0));
    CHECK(cosine_align_loss(one(vectors({{0.3, -0.4}})), one(vectors({{0.3, -0.4}}))) ==
          doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cosine_align_loss(one(vectors({{0, 0}})), one(vectors({{1, 1}}))) == 1.0);
    // Mean over locations then stages.
    CHECK(cosine_align_loss({vectors({{1, 0}, {1, 0}}), vectors({{1, 0}})},
                            {vectors({{0, 1}, {1, 0}}), vectors({{-1, 0}})}) == doctest::Approx((0.5 + 2.0) / 2));
}

TEST_CASE("focal L1 loss closed forms") {
    CHECK(focal_l1_loss(one(vectors({{0.0}, {0.0}})), one(vectors({{0.5}, {1.0}})), 2.0) ==
          doctest::Approx(0.5625).epsilon(1e-9));
    Xorshift64Star rng(1);
    const auto hr = random_stages(rng);
    CHECK(focal_l1_loss(hr, hr, 2.0) == 0.0);
    const auto al = random_stages(rng);
    double plain = 0.0;
    for (std::size_t s = 0; s < 2; ++s) {
        double m = 0.0;
        for (std::size_t i = 0; i < hr[s].size(); ++i) m += std::abs(al[s][i] - hr[s][i]);
        plain += m / static_cast<double>(hr[s].size()) / 2.0;
    }
    CHECK(focal_l1_loss(hr, al, 0.0) == doctest::Approx(plain).epsilon(1e-12));
    const auto w = focal_weights(one(vectors({{0.0}, {0.0}})), one(vectors({{0.0}, {1.0}})), 0.0);
    CHECK(w[0][0] == 1.0);  // 0^0 = 1
}

TEST_CASE("JS divergence closed forms") {
    // Logit gap of 60 makes Q = (1, 0) to double precision.
    const double js = js_divergence_loss(one(vectors({{0, 0}})), one(vectors({{60, 0}})));
    const double m0 = 0.75, m1 = 0.25;
    const double oracle = 0.5 * (0.5 * std::log(0.5 / m0) + 0.5 * std::log(0.5 / m1)) + 0.5 * std::log(1.0 / m0);
    CHECK(js == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(js == doctest::Approx(0.21576).epsilon(1e-4));
    CHECK(js_divergence_loss(one(vectors({{0.2, 0.7}})), one(vectors({{0.2, 0.7}}))) == 0.0);
    // Disjoint supports approach ln 2.
    const double far = js_divergence_loss(one(vectors({{700, 0}})), one(vectors({{0, 700}})));
    CHECK(far <= std::numbers::ln2);
    CHECK(far == doctest::Approx(std::numbers::ln2).epsilon(1e-9));
}

TEST_CASE("Gram loss closed forms and location permutation invariance") {
    CHECK(gram_loss(one(vectors({{1, 0}, {0, 1}})), one(vectors({{1, 0}, {1, 0}}))) == doctest::Approx(0.125));
    Xorshift64Star rng(2);
    const Tensor a = random_tensor({3, 4, 4}, rng);
    Tensor perm = Tensor::zeros_like(a);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < 16; ++i) perm[c * 16 + i] = a[c * 16 + (i * 5 + 3) % 16];
    }
    CHECK(gram_loss(one(a), one(a)) == 0.0);
    CHECK(gram_loss(one(a), one(perm)) == doctest::Approx(0.0).scale(1.0).epsilon(1e-14));
}

TEST_CASE("total loss composes the weighted terms") {
    Xorshift64Star rng(3);
    const auto hr = random_stages(rng);
    const auto al = random_stages(rng);
    LossWeights zero;
    zero.lambda_l1 = zero.lambda_js = zero.lambda_gram = 0.0;
    const LossReport r0 = total_loss(hr, al, zero);
    CHECK(r0.total == r0.align);
    for (LossPreset p : kAllPresets) {
        const LossWeights w = preset_weights(p);
        const LossReport r = total_loss(hr, al, w);
        CHECK(r.total == doctest::Approx(r.align + w.lambda_l1 * r.l1 + w.lambda_js * r.js + w.lambda_gram * r.gram)
                             .epsilon(1e-12));
        CHECK(std::abs(r.total - (r.align + w.lambda_l1 * r.l1 + w.lambda_js * r.js + w.lambda_gram * r.gram)) < 1e-9);
        CHECK(r.align == cosine_align_loss(hr, al));
        CHECK(r.gram == gram_loss(hr, al));
        CHECK(parse_preset(preset_name(p)) == p);
    }
    LossWeights bad;
    bad.lambda_js = -0.1;
    CHECK_THROWS_AS(total_loss(hr, al, bad), std::invalid_argument);
    LossWeights cls;
    cls.lambda_cls = 0.2;
    CHECK_THROWS_AS(cls.validate(), std::invalid_argument);
    CHECK_THROWS_AS(total_loss(hr, {al[0]}, zero), std::invalid_argument);
}

TEST_CASE("presets carry the published loss weights") {
    const LossWeights full = preset_weights(LossPreset::full);
    CHECK(full.lambda_l1 == 0.5);
    CHECK(full.lambda_js == 0.5);
    CHECK(full.lambda_gram == 0.5);
    CHECK(preset_weights(LossPreset::cosine_js).lambda_js == 0.1);
    CHECK(preset_weights(LossPreset::cosine_gram).lambda_gram == 0.5);
    CHECK(preset_weights(LossPreset::cosine_l1).lambda_l1 == 0.5);
    const LossWeights cos = preset_weights(LossPreset::cosine);
    CHECK(cos.lambda_l1 + cos.lambda_js + cos.lambda_gram == 0.0);
    CHECK(parse_preset("cosine_gram") == LossPreset::cosine_gram);
    CHECK_FALSE(parse_preset("fancy").has_value());
}

TEST_CASE("range bounds, alignment minimum and symmetry on random pyramids") {
    Xorshift64Star rng(4);
    const LossWeights full = preset_weights(LossPreset::full);
    for (int i = 0; i < 1000; ++i) {
        const auto hr = random_stages(rng, -3.0, 3.0);
        const auto al = random_stages(rng, -3.0, 3.0);
        const LossReport r = total_loss(hr, al, full);
        REQUIRE(r.align >= 0.0);
        REQUIRE(r.align <= 2.0);
        REQUIRE(r.js >= 0.0);
        REQUIRE(r.js <= std::numbers::ln2);
        REQUIRE(r.l1 >= 0.0);
        REQUIRE(r.gram >= 0.0);
        REQUIRE(std::abs(js_divergence_loss(hr, al) - js_divergence_loss(al, hr)) < 1e-9);
        if (i % 10 == 0) {
            const LossReport same = total_loss(hr, hr, full);
            REQUIRE(same.align == doctest::Approx(0.0).epsilon(1e-15));
            REQUIRE(same.l1 == 0.0);
            REQUIRE(same.js == 0.0);
            REQUIRE(same.gram == 0.0);
        }
    }
}

TEST_CASE("cosine is scale invariant while L1 and Gram are not") {
    Xorshift64Star rng(5);
    for (int i = 0; i < 20; ++i) {
        const auto hr = random_stages(rng);
        const auto al = random_stages(rng);
        CHECK(cosine_align_loss(hr, scaled(al, 3.7)) == doctest::Approx(cosine_align_loss(hr, al)).epsilon(1e-6));
        const auto doubled = scaled(hr, 2.0);
        CHECK(focal_l1_loss(hr, doubled, 2.0) > focal_l1_loss(hr, hr, 2.0));
        CHECK(gram_loss(hr, doubled) > gram_loss(hr, hr));
        CHECK(cosine_align_loss(hr, doubled) == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("tape losses match the value forms") {
    Xorshift64Star rng(6);
    const auto hr = random_stages(rng);
    const auto al = random_stages(rng);
    ad::Tape tape;
    std::vector<ad::Var> vh, va;
    for (std::size_t s = 0; s < 2; ++s) {
        vh.push_back(tape.constant(hr[s]));
        va.push_back(tape.parameter(al[s]));
    }
    const LossWeights w = preset_weights(LossPreset::full);
    const LossVars v = total_loss_on_tape(tape, vh, va, w);
    const LossReport r = total_loss(hr, al, w);
    CHECK(v.align.value()[0] == doctest::Approx(r.align).epsilon(1e-14));
    CHECK(v.l1.value()[0] == doctest::Approx(r.l1).epsilon(1e-14));
    CHECK(v.js.value()[0] == doctest::Approx(r.js).epsilon(1e-14));
    CHECK(v.gram.value()[0] == doctest::Approx(r.gram).epsilon(1e-14));
    CHECK(v.total.value()[0] == doctest::Approx(r.total).epsilon(1e-14));
}

TEST_CASE("gradcheck: quadratic is exact, corrupted gradients fail, NaN throws") {
    Xorshift64Star rng(7);
    Tensor p = random_tensor({10}, rng);
    Tensor grad = p;
    grad *= 2.0;
    const auto loss = [&] {
        double s = 0.0;
        for (double v : p.values()) s += v * v;
        return s;
    };
    GradcheckOptions opt;
    opt.samples_per_tensor = 10;
    const auto ok = finite_difference_gradcheck(loss, {{"p", "quadratic", &p, grad}}, opt);
    CHECK(ok.passed);
    for (const auto& e : ok.entries) CHECK(std::abs(e.analytic - e.numeric) < 1e-8);

    Tensor wrong = grad;
    wrong *= 2.0;
    const auto bad = finite_difference_gradcheck(loss, {{"p", "quadratic", &p, wrong}}, opt);
    CHECK_FALSE(bad.passed);
    CHECK(bad.failing == std::vector<std::string>{"p"});

    Tensor nan = grad;
    nan[0] = std::nan("");
    CHECK_THROWS_AS(finite_difference_gradcheck(loss, {{"p", "quadratic", &p, nan}}, opt), std::runtime_error);
}

TEST_CASE("gradcheck of each tape loss on random 4x4 maps") {
    Xorshift64Star rng(8);
    Tensor hr = random_tensor({5, 4, 4}, rng);
    Tensor al = random_tensor({5, 4, 4}, rng);
    const std::vector<Tensor> frozen = focal_weights({hr}, {al}, 2.0);
    using StageLoss = std::function<ad::Var(ad::Var, ad::Var)>;
    const std::vector<std::pair<std::string, StageLoss>> losses = {
        {"cosine", [](ad::Var h, ad::Var a) { return cosine_stage(h, a); }},
        {"focal_l1", [&](ad::Var h, ad::Var a) { return focal_l1_stage(h, a, frozen[0]); }},
        {"js", [](ad::Var h, ad::Var a) { return js_stage(h, a); }},
        {"gram", [](ad::Var h, ad::Var a) { return gram_stage(h, a); }},
    };
    for (const auto& [name, fn] : losses) {
        CAPTURE(name);
        ad::Tape tape;
        const ad::Var va = tape.parameter(al);
        const ad::Var out = fn(tape.constant(hr), va);
        tape.backward(out);
        GradcheckOptions opt;
        opt.samples_per_tensor = 12;
        const auto report = finite_difference_gradcheck(
            [&] {
                ad::Tape t;
                return fn(t.constant(hr), t.constant(al)).value()[0];
            },
            {{name, "loss", &al, tape.grad(va)}}, opt);
        CHECK(report.passed);
        CHECK(report.max_relative_error < 1e-3);
    }
}

TEST_CASE("gradcheck passes for every preset through the full composition") {
    Xorshift64Star rng(9);
    const FeaturePyramid hr = random_pyramid({{4, 8, 8}, {6, 4, 4}}, rng);
    const FeaturePyramid lr = random_pyramid({{4, 4, 4}, {6, 2, 2}}, rng);
    GuidanceConfig cfg;
    for (LossPreset preset : kAllPresets) {
        CAPTURE(preset_name(preset));
        GuidanceParameters params = perturbed_parameters(GuidanceParameters::initialize({4, 6}, cfg), 4, 0.1);
        GradcheckOptions opt;
        opt.samples_per_tensor = 2;
        const auto report = gradcheck_alignment(lr, hr, params, preset_weights(preset), opt);
        CHECK(report.passed);
    }
}
