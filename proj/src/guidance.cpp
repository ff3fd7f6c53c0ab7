#include "hlgfa/guidance.hpp"

#include <cmath>
#include <stdexcept>

#include "hlgfa/image.hpp"
#include "hlgfa/rng.hpp"

namespace hlgfa {
namespace {

Tensor uniform_tensor(Shape shape, double bound, Xorshift64Star& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

// PyTorch's default conv initialization bound, 1 / sqrt(fan_in).
Tensor default_conv_weight(Shape shape, Xorshift64Star& rng) {
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    return uniform_tensor(std::move(shape), 1.0 / std::sqrt(fan_in), rng);
}

StageParams make_stage(std::size_t channels, std::size_t source_channels,
                       const std::vector<std::size_t>& kernels, double gate_bias, Xorshift64Star& rng) {
    const std::size_t c = channels;
    StageParams p;
    for (std::size_t k : kernels) {
        if (k % 2 == 0) throw std::invalid_argument("guidance: structure kernels must be odd");
        p.structure_dw_weight.push_back(default_conv_weight({source_channels, 1, k, k}, rng));
        p.structure_dw_bias.emplace_back(Shape{source_channels});
    }
    p.structure_proj_weight = default_conv_weight({c, source_channels, 1, 1}, rng);
    p.structure_proj_bias = Tensor(Shape{c});
    p.detail_dw_weight = default_conv_weight({c, 1, 3, 3}, rng);
    p.detail_dw_bias = Tensor(Shape{c});
    p.detail_proj_weight = default_conv_weight({c, c, 1, 1}, rng);
    p.detail_proj_bias = Tensor(Shape{c});
    p.film_weight = Tensor(Shape{2 * c, c, 1, 1});
    p.film_bias = Tensor(Shape{2 * c});
    for (std::size_t i = 0; i < c; ++i) p.film_bias[i] = 1.0;
    p.gate_weight = default_conv_weight({1, 2 * c, 3, 3}, rng);
    p.gate_bias = Tensor(Shape{1}, gate_bias);
    p.residual_weight = Tensor(Shape{c, 2 * c, 3, 3});
    p.residual_bias = Tensor(Shape{c});
    return p;
}

ad::Var structure_prior_op(ad::Tape& tape, ad::Var hr_deep, const StageVars& v, std::size_t height,
                           std::size_t width) {
    const std::size_t groups = hr_deep.value().channels();
    ad::Var sum = ad::conv2d(hr_deep, v.structure_dw_weight[0], v.structure_dw_bias[0], groups);
    for (std::size_t i = 1; i < v.structure_dw_weight.size(); ++i) {
        sum = ad::add(sum, ad::conv2d(hr_deep, v.structure_dw_weight[i], v.structure_dw_bias[i], groups));
    }
    ad::Var projected = ad::conv2d(sum, v.structure_proj_weight, v.structure_proj_bias, 1);
    (void)tape;
    return ad::resize_bilinear(projected, height, width);
}

ad::Var detail_prior_op(ad::Var hr_shallow, const StageVars& v, std::size_t height, std::size_t width) {
    ad::Var aligned = ad::conv2d(hr_shallow, v.detail_dw_weight, v.detail_dw_bias, hr_shallow.value().channels());
    ad::Var projected = ad::conv2d(aligned, v.detail_proj_weight, v.detail_proj_bias, 1);
    return ad::resize_bilinear(projected, height, width);
}

struct FusedVars {
    ad::Var fused, gamma, beta;
};

FusedVars fuse_op(ad::Var structure, ad::Var detail, const StageVars& v) {
    require_same_shape(structure.value(), detail.value(), "fuse_guidance");
    ad::Var fused = ad::add(structure, detail);
    ad::Var film = ad::conv2d(fused, v.film_weight, v.film_bias, 1);
    const std::size_t c = film.value().channels() / 2;
    return {fused, ad::slice_channels(film, 0, c), ad::slice_channels(film, c, 2 * c)};
}

ad::Var modulate_op(ad::Var features, ad::Var gamma, ad::Var beta) {
    return ad::add(ad::mul(gamma, features), beta);
}

ad::Var refine_op(ad::Var lr, ad::Var modulated, ad::Var fused, const StageVars& v) {
    require_same_shape(lr.value(), modulated.value(), "gated_residual_refine");
    ad::Var joined = ad::concat_channels(fused, modulated);
    ad::Var gate = ad::sigmoid(ad::conv2d(joined, v.gate_weight, v.gate_bias, 1));
    ad::Var residual = ad::conv2d(joined, v.residual_weight, v.residual_bias, 1);
    return ad::add(lr, ad::mul_broadcast_channels(residual, gate));
}

void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite values");
}

}  // namespace

GuidanceParameters GuidanceParameters::initialize(const std::vector<std::size_t>& stage_channels,
                                                  const GuidanceConfig& config) {
    if (stage_channels.empty()) throw std::invalid_argument("guidance: no stages");
    GuidanceParameters params;
    params.kernels_ = config.structure_kernels;
    params.stage_count_ = stage_channels.size();
    params.shared_ = config.share_across_stages;
    if (params.shared_) {
        for (std::size_t c : stage_channels) {
            if (c != stage_channels.front()) {
                throw std::invalid_argument("guidance: sharing parameters across stages needs equal channel counts");
            }
        }
        Xorshift64Star rng(derive_seed(config.init_seed, 0));
        params.stages_.push_back(make_stage(stage_channels.front(), stage_channels.front(), config.structure_kernels,
                                            config.gate_bias_init, rng));
        return params;
    }
    for (std::size_t s = 0; s < stage_channels.size(); ++s) {
        Xorshift64Star rng(derive_seed(config.init_seed, s));
        params.stages_.push_back(make_stage(stage_channels[s],
                                            stage_channels[structure_source(s, stage_channels.size())],
                                            config.structure_kernels, config.gate_bias_init, rng));
    }
    return params;
}

void GuidanceParameters::visit(const std::function<void(const std::string&, const std::string&, Tensor&)>& fn) {
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const std::string prefix = shared_ ? "guidance/shared/" : "guidance/stage" + std::to_string(s + 1) + "/";
        stages_[s].visit([&](const std::string& name, const std::string& group, Tensor& t) {
            fn(prefix + name, group, t);
        });
    }
}

void GuidanceParameters::visit(
    const std::function<void(const std::string&, const std::string&, const Tensor&)>& fn) const {
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const std::string prefix = shared_ ? "guidance/shared/" : "guidance/stage" + std::to_string(s + 1) + "/";
        stages_[s].visit([&](const std::string& name, const std::string& group, const Tensor& t) {
            fn(prefix + name, group, t);
        });
    }
}

std::size_t GuidanceParameters::parameter_count() const {
    std::size_t total = 0;
    visit([&](const std::string&, const std::string&, const Tensor& t) { total += t.size(); });
    return total;
}

bool GuidanceParameters::all_finite() const {
    bool finite = true;
    visit([&](const std::string&, const std::string&, const Tensor& t) { finite = finite && t.all_finite(); });
    return finite;
}

void GuidanceParameters::write_to(WeightsArchive& archive, DType dtype) const {
    visit([&](const std::string& name, const std::string&, const Tensor& t) { archive.put(name, t, dtype); });
}

GuidanceParameters GuidanceParameters::read_from(const WeightsArchive& archive,
                                                 const std::vector<std::size_t>& stage_channels,
                                                 const std::vector<std::size_t>& structure_kernels,
                                                 bool share_across_stages) {
    GuidanceConfig shapes_only;
    shapes_only.structure_kernels = structure_kernels;
    shapes_only.share_across_stages = share_across_stages;
    GuidanceParameters params = initialize(stage_channels, shapes_only);
    params.visit([&](const std::string& name, const std::string&, Tensor& t) {
        if (!archive.contains(name)) throw std::runtime_error("guidance: archive is missing '" + name + "'");
        const Tensor& stored = archive.get(name);
        if (stored.shape() != t.shape()) {
            throw std::runtime_error("guidance: shape mismatch for '" + name + "': archive " +
                                     shape_string(stored.shape()) + ", expected " + shape_string(t.shape()));
        }
        t = stored;
    });
    return params;
}

FeatureMap upsample_to_match(const FeatureMap& lr_stage, const FeatureMap& hr_stage) {
    const Tensor& lr = lr_stage.data;
    const Tensor& hr = hr_stage.data;
    if (lr.channels() != hr.channels()) {
        throw std::invalid_argument("upsample_to_match: channel mismatch " + shape_string(lr.shape()) +
                                    " vs " + shape_string(hr.shape()));
    }
    if (lr.height() > hr.height() || lr.width() > hr.width()) {
        throw std::invalid_argument("upsample_to_match: LR stage is larger than HR stage");
    }
    return FeatureMap{resize_bilinear(lr, hr.height(), hr.width()), hr_stage.stage_index, hr_stage.stride};
}

StructurePrior compute_structure_prior(const Tensor& hr_deep, const StageParams& params,
                                       std::size_t height, std::size_t width) {
    ad::Tape tape;
    const StageVars vars = bind_stage(tape, params, false);
    return StructurePrior{structure_prior_op(tape, tape.constant(hr_deep), vars, height, width).value()};
}

DetailPrior compute_detail_prior(const Tensor& hr_shallow, const StageParams& params, std::size_t height,
                                 std::size_t width) {
    ad::Tape tape;
    const StageVars vars = bind_stage(tape, params, false);
    return DetailPrior{detail_prior_op(tape.constant(hr_shallow), vars, height, width).value()};
}

GuidanceBundle fuse_guidance(const StructurePrior& structure, const DetailPrior& detail,
                             const StageParams& params) {
    ad::Tape tape;
    const StageVars vars = bind_stage(tape, params, false);
    const FusedVars out = fuse_op(tape.constant(structure.data), tape.constant(detail.data), vars);
    GuidanceBundle bundle{structure, detail, out.fused.value(), out.gamma.value(), out.beta.value()};
    require_finite(bundle.film_gamma, "fuse_guidance gamma");
    require_finite(bundle.film_beta, "fuse_guidance beta");
    return bundle;
}

Tensor stabilize(const Tensor& lr_upsampled, double eps) {
    ad::Tape tape;
    return ad::standardize_channels(tape.constant(lr_upsampled), eps).value();
}

Tensor film_modulate(const Tensor& features, const GuidanceBundle& bundle) {
    require_finite(bundle.film_gamma, "film_modulate gamma");
    require_finite(bundle.film_beta, "film_modulate beta");
    require_same_shape(features, bundle.film_gamma, "film_modulate");
    ad::Tape tape;
    return modulate_op(tape.constant(features), tape.constant(bundle.film_gamma),
                       tape.constant(bundle.film_beta))
        .value();
}

Tensor gated_residual_refine(const Tensor& lr, const Tensor& modulated, const GuidanceBundle& bundle,
                             const StageParams& params) {
    require_same_shape(lr, bundle.fused, "gated_residual_refine");
    ad::Tape tape;
    const StageVars vars = bind_stage(tape, params, false);
    return refine_op(tape.constant(lr), tape.constant(modulated), tape.constant(bundle.fused), vars).value();
}

StageVars bind_stage(ad::Tape& tape, const StageParams& params, bool trainable) {
    const auto bind = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    StageVars vars;
    for (std::size_t i = 0; i < params.structure_dw_weight.size(); ++i) {
        vars.structure_dw_weight.push_back(bind(params.structure_dw_weight[i]));
        vars.structure_dw_bias.push_back(bind(params.structure_dw_bias[i]));
    }
    vars.structure_proj_weight = bind(params.structure_proj_weight);
    vars.structure_proj_bias = bind(params.structure_proj_bias);
    vars.detail_dw_weight = bind(params.detail_dw_weight);
    vars.detail_dw_bias = bind(params.detail_dw_bias);
    vars.detail_proj_weight = bind(params.detail_proj_weight);
    vars.detail_proj_bias = bind(params.detail_proj_bias);
    vars.film_weight = bind(params.film_weight);
    vars.film_bias = bind(params.film_bias);
    vars.gate_weight = bind(params.gate_weight);
    vars.gate_bias = bind(params.gate_bias);
    vars.residual_weight = bind(params.residual_weight);
    vars.residual_bias = bind(params.residual_bias);
    return vars;
}

std::vector<StageVars> bind_parameters(ad::Tape& tape, const GuidanceParameters& params, bool trainable) {
    std::vector<StageVars> vars;
    for (const StageParams& stage : params.stages()) vars.push_back(bind_stage(tape, stage, trainable));
    while (vars.size() < params.stage_count()) vars.push_back(vars.front());
    return vars;
}

GuidanceParameters collect_gradients(const ad::Tape& tape, const std::vector<StageVars>& vars,
                                     const GuidanceParameters& like) {
    GuidanceParameters grads = like;
    for (std::size_t s = 0; s < like.stages().size(); ++s) {
        std::vector<Tensor> collected;
        vars[s].visit([&](const std::string&, const std::string&, const ad::Var& v) {
            collected.push_back(tape.grad(v));
        });
        std::size_t i = 0;
        grads.stages()[s].visit([&](const std::string&, const std::string&, Tensor& t) { t = collected[i++]; });
    }
    return grads;
}

StageGraph align_stage(ad::Tape& tape, ad::Var lr_upsampled, ad::Var hr_stage, ad::Var hr_deep,
                       const StageVars& vars, double stabilize_eps) {
    // Copies: recording new nodes may move tape storage.
    const std::size_t height = hr_stage.value().height();
    const std::size_t width = hr_stage.value().width();
    StageGraph g;
    g.structure = structure_prior_op(tape, hr_deep, vars, height, width);
    g.detail = detail_prior_op(hr_stage, vars, height, width);
    const FusedVars fused = fuse_op(g.structure, g.detail, vars);
    g.fused = fused.fused;
    g.gamma = fused.gamma;
    g.beta = fused.beta;
    g.modulated = modulate_op(ad::standardize_channels(lr_upsampled, stabilize_eps), g.gamma, g.beta);
    g.aligned = refine_op(lr_upsampled, g.modulated, g.fused, vars);
    return g;
}

std::vector<StageGraph> align_on_tape(ad::Tape& tape, const FeaturePyramid& lr, const FeaturePyramid& hr,
                                      const std::vector<StageVars>& vars, double stabilize_eps) {
    if (lr.size() != hr.size() || hr.size() != vars.size()) {
        throw std::invalid_argument("align: stage count mismatch (lr " + std::to_string(lr.size()) + ", hr " +
                                    std::to_string(hr.size()) + ", params " + std::to_string(vars.size()) + ")");
    }
    std::vector<ad::Var> hr_vars;
    for (const FeatureMap& stage : hr.stages) hr_vars.push_back(tape.constant(stage.data));
    std::vector<StageGraph> graphs;
    for (std::size_t s = 0; s < hr.size(); ++s) {
        const FeatureMap up = upsample_to_match(lr.stages[s], hr.stages[s]);
        graphs.push_back(align_stage(tape, tape.constant(up.data), hr_vars[s],
                                     hr_vars[structure_source(s, hr.size())], vars[s], stabilize_eps));
    }
    return graphs;
}

AlignmentResult align(const FeaturePyramid& lr, const FeaturePyramid& hr, const GuidanceParameters& params,
                      double stabilize_eps) {
    ad::Tape tape;
    const auto vars = bind_parameters(tape, params, false);
    const auto graphs = align_on_tape(tape, lr, hr, vars, stabilize_eps);
    AlignmentResult result;
    for (const StageGraph& g : graphs) {
        result.aligned.push_back(g.aligned.value());
        result.guidance.push_back(GuidanceBundle{StructurePrior{g.structure.value()}, DetailPrior{g.detail.value()},
                                                 g.fused.value(), g.gamma.value(), g.beta.value()});
    }
    return result;
}

}  // namespace hlgfa
