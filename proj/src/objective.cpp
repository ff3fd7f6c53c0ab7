#include "hlgfa/objective.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

#include <Eigen/Dense>

#include "hlgfa/rng.hpp"

namespace hlgfa {
namespace {

constexpr double kCosineEps = 1e-8;
constexpr double kFocalEps = 1e-12;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void require_stage_pair(const Tensor& hr, const Tensor& aligned, const char* what) {
    require_same_shape(hr, aligned, what);
    if (hr.rank() != 3 || hr.plane() == 0 || hr.channels() == 0) {
        throw std::invalid_argument(std::string(what) + ": expected a nonempty (C, H, W) stage");
    }
}

void require_stage_lists(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned, const char* what) {
    if (hr.empty() || hr.size() != aligned.size()) {
        throw std::invalid_argument(std::string(what) + ": stage count mismatch (" + std::to_string(hr.size()) +
                                    " vs " + std::to_string(aligned.size()) + ")");
    }
}

ad::Var scalar_node(ad::Var a, ad::Var b, double value, ad::Tape::Backward backward) {
    return a.tape->record(Tensor(Shape{1}, value), {a, b}, std::move(backward));
}

// Channel softmax at one location: reads x[c * plane + p] into out[c].
void softmax_at(const Tensor& x, std::size_t p, std::vector<double>& out) {
    const std::size_t channels = x.channels();
    const std::size_t plane = x.plane();
    double peak = x[p];
    for (std::size_t c = 1; c < channels; ++c) peak = std::max(peak, x[c * plane + p]);
    double total = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        out[c] = std::exp(x[c * plane + p] - peak);
        total += out[c];
    }
    for (std::size_t c = 0; c < channels; ++c) out[c] /= total;
}

double kl_to_mixture(const std::vector<double>& p, const std::vector<double>& m) {
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) kl += p[i] * std::log(p[i] / m[i]);
    }
    return kl;
}

// Gradient of JS with respect to the logits of `p`: softmax backward of
// g_i = 0.5 * log(p_i / m_i).
void js_logit_grad(const std::vector<double>& p, const std::vector<double>& m, double scale, Tensor& grad,
                   std::size_t loc) {
    const std::size_t plane = grad.plane();
    double inner = 0.0;
    std::vector<double> g(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) g[i] = 0.5 * std::log(p[i] / m[i]);
        inner += p[i] * g[i];
    }
    for (std::size_t i = 0; i < p.size(); ++i) grad[i * plane + loc] += scale * p[i] * (g[i] - inner);
}

RowMatrix gram_of(const Tensor& t) {
    const ConstMap f(t.data(), static_cast<Eigen::Index>(t.channels()), static_cast<Eigen::Index>(t.plane()));
    RowMatrix g = f * f.transpose();
    g /= static_cast<double>(t.plane());
    return g;
}

template <typename StageFn>
ad::Var stage_mean(const std::vector<ad::Var>& hr, const std::vector<ad::Var>& aligned, StageFn&& fn) {
    std::vector<ad::Var> terms;
    for (std::size_t s = 0; s < hr.size(); ++s) terms.push_back(fn(s, hr[s], aligned[s]));
    return ad::weighted_sum(terms, std::vector<double>(terms.size(), 1.0 / static_cast<double>(terms.size())));
}

LossReport report_of(const LossVars& v) {
    return LossReport{v.align.value()[0], v.l1.value()[0], v.js.value()[0], v.gram.value()[0], v.total.value()[0]};
}

std::string upper(std::string s) {
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace

void LossWeights::validate() const {
    const double all[] = {lambda_l1, lambda_js, lambda_gram, lambda_cls, focal_gamma};
    for (double v : all) {
        if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("loss weights must be finite and >= 0");
    }
    if (lambda_cls != 0.0) throw std::invalid_argument("lambda_cls must be 0: no classification head is defined");
}

LossWeights preset_weights(LossPreset preset) {
    LossWeights w;
    switch (preset) {
        case LossPreset::cosine: w.lambda_l1 = 0.0; w.lambda_js = 0.0; w.lambda_gram = 0.0; break;
        case LossPreset::cosine_js: w.lambda_l1 = 0.0; w.lambda_js = 0.1; w.lambda_gram = 0.0; break;
        case LossPreset::cosine_gram: w.lambda_l1 = 0.0; w.lambda_js = 0.0; w.lambda_gram = 0.5; break;
        case LossPreset::cosine_l1: w.lambda_l1 = 0.5; w.lambda_js = 0.0; w.lambda_gram = 0.0; break;
        case LossPreset::full: w.lambda_l1 = 0.5; w.lambda_js = 0.5; w.lambda_gram = 0.5; break;
    }
    return w;
}

std::string preset_name(LossPreset preset) {
    switch (preset) {
        case LossPreset::cosine: return "COSINE";
        case LossPreset::cosine_js: return "COSINE_JS";
        case LossPreset::cosine_gram: return "COSINE_GRAM";
        case LossPreset::cosine_l1: return "COSINE_L1";
        case LossPreset::full: return "FULL";
    }
    return "FULL";
}

std::optional<LossPreset> parse_preset(const std::string& name) {
    const std::string key = upper(name);
    for (LossPreset p : kAllPresets) {
        if (preset_name(p) == key) return p;
    }
    return std::nullopt;
}

std::vector<Tensor> stage_tensors(const FeaturePyramid& pyramid) {
    std::vector<Tensor> out;
    for (const FeatureMap& m : pyramid.stages) out.push_back(m.data);
    return out;
}

ad::Var cosine_stage(ad::Var hr, ad::Var aligned) {
    const Tensor& a = hr.value();
    const Tensor& b = aligned.value();
    require_stage_pair(a, b, "cosine_align_loss");
    const std::size_t channels = a.channels();
    const std::size_t plane = a.plane();
    double total = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            const double x = a[c * plane + p];
            const double y = b[c * plane + p];
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
        }
        total += 1.0 - std::clamp(dot / std::max(std::sqrt(na2 * nb2), kCosineEps), -1.0, 1.0);
    }
    const double n = static_cast<double>(plane);
    return scalar_node(hr, aligned, total / n, [hr, aligned, n](ad::Tape& t, const Tensor& g) {
        const Tensor& a = hr.value();
        const Tensor& b = aligned.value();
        const std::size_t channels = a.channels();
        const std::size_t plane = a.plane();
        Tensor ga = Tensor::zeros_like(a);
        Tensor gb = Tensor::zeros_like(b);
        const double scale = -g[0] / n;
        for (std::size_t p = 0; p < plane; ++p) {
            double dot = 0.0, na2 = 0.0, nb2 = 0.0;
            for (std::size_t c = 0; c < channels; ++c) {
                const double x = a[c * plane + p];
                const double y = b[c * plane + p];
                dot += x * y;
                na2 += x * x;
                nb2 += y * y;
            }
            const double raw = std::sqrt(na2 * nb2);
            const double denom = std::max(raw, kCosineEps);
            const double sim = dot / denom;
            const bool clamped = raw < kCosineEps;
            for (std::size_t c = 0; c < channels; ++c) {
                const double x = a[c * plane + p];
                const double y = b[c * plane + p];
                double da = y / denom;
                double db = x / denom;
                if (!clamped) {
                    da -= sim * x / na2;
                    db -= sim * y / nb2;
                }
                ga[c * plane + p] = scale * da;
                gb[c * plane + p] = scale * db;
            }
        }
        t.accumulate(hr, ga);
        t.accumulate(aligned, gb);
    });
}

ad::Var focal_l1_stage(ad::Var hr, ad::Var aligned, const Tensor& weights) {
    const Tensor& a = hr.value();
    const Tensor& b = aligned.value();
    require_stage_pair(a, b, "focal_l1_loss");
    require_same_shape(a, weights, "focal_l1_loss weights");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += weights[i] * std::abs(b[i] - a[i]);
    const double n = static_cast<double>(a.size());
    return scalar_node(hr, aligned, total / n, [hr, aligned, weights, n](ad::Tape& t, const Tensor& g) {
        const Tensor& a = hr.value();
        const Tensor& b = aligned.value();
        Tensor gb = Tensor::zeros_like(b);
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double e = b[i] - a[i];
            const double sign = e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
            gb[i] = g[0] * weights[i] * sign / n;
        }
        if (t.requires_grad(hr)) {
            Tensor ga = gb;
            ga *= -1.0;
            t.accumulate(hr, ga);
        }
        t.accumulate(aligned, gb);
    });
}

ad::Var js_stage(ad::Var hr, ad::Var aligned) {
    const Tensor& a = hr.value();
    const Tensor& b = aligned.value();
    require_stage_pair(a, b, "js_divergence_loss");
    const std::size_t channels = a.channels();
    const std::size_t plane = a.plane();
    std::vector<double> p(channels), q(channels), m(channels);
    double total = 0.0;
    for (std::size_t loc = 0; loc < plane; ++loc) {
        softmax_at(a, loc, p);
        softmax_at(b, loc, q);
        for (std::size_t c = 0; c < channels; ++c) m[c] = 0.5 * (p[c] + q[c]);
        const double js = 0.5 * kl_to_mixture(p, m) + 0.5 * kl_to_mixture(q, m);
        total += std::clamp(js, 0.0, std::numbers::ln2);
    }
    const double n = static_cast<double>(plane);
    return scalar_node(hr, aligned, total / n, [hr, aligned, n](ad::Tape& t, const Tensor& g) {
        const Tensor& a = hr.value();
        const Tensor& b = aligned.value();
        const std::size_t channels = a.channels();
        std::vector<double> p(channels), q(channels), m(channels);
        Tensor ga = Tensor::zeros_like(a);
        Tensor gb = Tensor::zeros_like(b);
        const double scale = g[0] / n;
        for (std::size_t loc = 0; loc < a.plane(); ++loc) {
            softmax_at(a, loc, p);
            softmax_at(b, loc, q);
            for (std::size_t c = 0; c < channels; ++c) m[c] = 0.5 * (p[c] + q[c]);
            js_logit_grad(p, m, scale, ga, loc);
            js_logit_grad(q, m, scale, gb, loc);
        }
        t.accumulate(hr, ga);
        t.accumulate(aligned, gb);
    });
}

ad::Var gram_stage(ad::Var hr, ad::Var aligned) {
    require_stage_pair(hr.value(), aligned.value(), "gram_loss");
    const RowMatrix diff = gram_of(hr.value()) - gram_of(aligned.value());
    const double c2 = static_cast<double>(hr.value().channels() * hr.value().channels());
    const double value = diff.squaredNorm() / c2;
    return scalar_node(hr, aligned, value, [hr, aligned, diff, c2](ad::Tape& t, const Tensor& g) {
        // d/dF_l = -4 D F_l / (C^2 N), d/dF_h = +4 D F_h / (C^2 N), D = G_h - G_l.
        const auto rows = static_cast<Eigen::Index>(hr.value().channels());
        const auto cols = static_cast<Eigen::Index>(hr.value().plane());
        const double factor = 4.0 * g[0] / (c2 * static_cast<double>(cols));
        Tensor ga = Tensor::zeros_like(hr.value());
        Tensor gb = Tensor::zeros_like(aligned.value());
        if (t.requires_grad(hr)) {
            MutMap(ga.data(), rows, cols).noalias() = factor * diff * ConstMap(hr.value().data(), rows, cols);
        }
        MutMap(gb.data(), rows, cols).noalias() = -factor * diff * ConstMap(aligned.value().data(), rows, cols);
        t.accumulate(hr, ga);
        t.accumulate(aligned, gb);
    });
}

std::vector<Tensor> focal_weights(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned,
                                  double focal_gamma) {
    require_stage_lists(hr, aligned, "focal_weights");
    std::vector<Tensor> out;
    for (std::size_t s = 0; s < hr.size(); ++s) {
        require_stage_pair(hr[s], aligned[s], "focal_weights");
        Tensor w = Tensor::zeros_like(hr[s]);
        double peak = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = std::abs(aligned[s][i] - hr[s][i]);
            peak = std::max(peak, w[i]);
        }
        for (double& v : w.values()) v = std::pow(v / (peak + kFocalEps), focal_gamma);
        out.push_back(std::move(w));
    }
    return out;
}

LossVars total_loss_on_tape(ad::Tape& tape, const std::vector<ad::Var>& hr, const std::vector<ad::Var>& aligned,
                            const LossWeights& weights, const std::vector<Tensor>* frozen_focal) {
    weights.validate();
    if (hr.empty() || hr.size() != aligned.size()) throw std::invalid_argument("total_loss: stage count mismatch");
    std::vector<Tensor> focal;
    if (frozen_focal) {
        if (frozen_focal->size() != hr.size()) throw std::invalid_argument("total_loss: focal weight stage count");
        focal = *frozen_focal;
    } else {
        std::vector<Tensor> h, l;
        for (std::size_t s = 0; s < hr.size(); ++s) {
            h.push_back(hr[s].value());
            l.push_back(aligned[s].value());
        }
        focal = focal_weights(h, l, weights.focal_gamma);
    }
    (void)tape;
    LossVars v;
    v.align = stage_mean(hr, aligned, [](std::size_t, ad::Var a, ad::Var b) { return cosine_stage(a, b); });
    v.l1 = stage_mean(hr, aligned,
                      [&](std::size_t s, ad::Var a, ad::Var b) { return focal_l1_stage(a, b, focal[s]); });
    v.js = stage_mean(hr, aligned, [](std::size_t, ad::Var a, ad::Var b) { return js_stage(a, b); });
    v.gram = stage_mean(hr, aligned, [](std::size_t, ad::Var a, ad::Var b) { return gram_stage(a, b); });
    v.total = ad::weighted_sum({v.align, v.l1, v.js, v.gram},
                               {1.0, weights.lambda_l1, weights.lambda_js, weights.lambda_gram});
    return v;
}

namespace {

LossVars constant_losses(ad::Tape& tape, const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned,
                         const LossWeights& weights) {
    require_stage_lists(hr, aligned, "loss");
    std::vector<ad::Var> h, l;
    for (std::size_t s = 0; s < hr.size(); ++s) {
        h.push_back(tape.constant(hr[s]));
        l.push_back(tape.constant(aligned[s]));
    }
    return total_loss_on_tape(tape, h, l, weights);
}

}  // namespace

double cosine_align_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned) {
    ad::Tape tape;
    return constant_losses(tape, hr, aligned, preset_weights(LossPreset::cosine)).align.value()[0];
}

double focal_l1_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned, double focal_gamma) {
    LossWeights w = preset_weights(LossPreset::cosine);
    w.focal_gamma = focal_gamma;
    ad::Tape tape;
    return constant_losses(tape, hr, aligned, w).l1.value()[0];
}

double js_divergence_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned) {
    ad::Tape tape;
    return constant_losses(tape, hr, aligned, preset_weights(LossPreset::cosine)).js.value()[0];
}

double gram_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned) {
    ad::Tape tape;
    return constant_losses(tape, hr, aligned, preset_weights(LossPreset::cosine)).gram.value()[0];
}

LossReport total_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned,
                      const LossWeights& weights) {
    ad::Tape tape;
    return report_of(constant_losses(tape, hr, aligned, weights));
}

AlignmentLoss alignment_loss(const FeaturePyramid& lr, const FeaturePyramid& hr, const GuidanceParameters& params,
                             const LossWeights& weights, double stabilize_eps,
                             const std::vector<Tensor>* frozen_focal) {
    ad::Tape tape;
    const auto vars = bind_parameters(tape, params, true);
    const auto graphs = align_on_tape(tape, lr, hr, vars, stabilize_eps);
    std::vector<ad::Var> h, l;
    std::vector<Tensor> hv, lv;
    for (std::size_t s = 0; s < graphs.size(); ++s) {
        h.push_back(tape.constant(hr.stages[s].data));
        l.push_back(graphs[s].aligned);
        hv.push_back(hr.stages[s].data);
        lv.push_back(graphs[s].aligned.value());
    }
    AlignmentLoss out;
    out.focal_weights = frozen_focal ? *frozen_focal : focal_weights(hv, lv, weights.focal_gamma);
    const LossVars losses = total_loss_on_tape(tape, h, l, weights, &out.focal_weights);
    out.report = report_of(losses);
    tape.backward(losses.total);
    out.gradients = collect_gradients(tape, vars, params);
    return out;
}

LossReport alignment_loss_value(const FeaturePyramid& lr, const FeaturePyramid& hr, const GuidanceParameters& params,
                                const LossWeights& weights, double stabilize_eps,
                                const std::vector<Tensor>* frozen_focal) {
    ad::Tape tape;
    const auto vars = bind_parameters(tape, params, false);
    const auto graphs = align_on_tape(tape, lr, hr, vars, stabilize_eps);
    std::vector<ad::Var> h, l;
    for (std::size_t s = 0; s < graphs.size(); ++s) {
        h.push_back(tape.constant(hr.stages[s].data));
        l.push_back(graphs[s].aligned);
    }
    return report_of(total_loss_on_tape(tape, h, l, weights, frozen_focal));
}

GradcheckReport finite_difference_gradcheck(const std::function<double()>& loss_fn,
                                            std::vector<GradcheckBlock> blocks, const GradcheckOptions& options) {
    if (!(options.step > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
    Xorshift64Star rng(options.seed);
    GradcheckReport report;
    std::set<std::string> failing;
    for (GradcheckBlock& block : blocks) {
        if (!block.value || !block.value->same_shape(block.analytic)) {
            throw std::invalid_argument("gradcheck: block '" + block.name + "' has mismatched analytic gradient");
        }
        if (!block.analytic.all_finite()) {
            throw std::runtime_error("gradcheck: non-finite analytic gradient for '" + block.name + "'");
        }
        const std::size_t n = block.value->size();
        if (n == 0) continue;
        std::vector<std::size_t> picks;
        std::size_t largest = 0;
        for (std::size_t i = 1; i < n; ++i) {
            if (std::abs(block.analytic[i]) > std::abs(block.analytic[largest])) largest = i;
        }
        picks.push_back(largest);
        const std::size_t wanted = std::min(options.samples_per_tensor, n);
        while (picks.size() < wanted) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
            if (std::find(picks.begin(), picks.end(), i) == picks.end()) picks.push_back(i);
        }
        for (std::size_t i : picks) {
            Tensor& v = *block.value;
            const double original = v[i];
            v[i] = original + options.step;
            const double plus = loss_fn();
            v[i] = original - options.step;
            const double minus = loss_fn();
            v[i] = original;
            const double numeric = (plus - minus) / (2.0 * options.step);
            const double analytic = block.analytic[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), options.denominator_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            report.entries.push_back(GradcheckEntry{block.name, block.group, i, analytic, numeric, rel});
            report.max_relative_error = std::max(report.max_relative_error, rel);
            if (!(rel <= options.tolerance)) failing.insert(block.name);
        }
    }
    report.failing.assign(failing.begin(), failing.end());
    report.passed = report.failing.empty() && !report.entries.empty();
    return report;
}

GradcheckReport gradcheck_alignment(const FeaturePyramid& lr, const FeaturePyramid& hr, GuidanceParameters& params,
                                    const LossWeights& weights, const GradcheckOptions& options,
                                    double stabilize_eps) {
    const AlignmentLoss base = alignment_loss(lr, hr, params, weights, stabilize_eps);
    std::vector<GradcheckBlock> blocks;
    params.visit([&](const std::string& name, const std::string& group, Tensor& t) {
        blocks.push_back(GradcheckBlock{name, group, &t, Tensor()});
    });
    std::size_t i = 0;
    base.gradients.visit([&](const std::string&, const std::string&, const Tensor& g) { blocks[i++].analytic = g; });
    const auto loss_fn = [&] {
        return alignment_loss_value(lr, hr, params, weights, stabilize_eps, &base.focal_weights).total;
    };
    return finite_difference_gradcheck(loss_fn, std::move(blocks), options);
}

}  // namespace hlgfa
