#include "hlgfa/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "hlgfa/archive.hpp"
#include "hlgfa/image.hpp"
#include "hlgfa/png_io.hpp"

namespace hlgfa {
namespace {

constexpr double kUnitEps = 1e-8;

Tensor stage_norm_map(const Tensor& hr, const Tensor& aligned, bool normalize_by_channels) {
    require_same_shape(hr, aligned, "anomaly_map");
    const std::size_t plane = hr.plane();
    Tensor out = Tensor::chw(1, hr.height(), hr.width());
    for (std::size_t c = 0; c < hr.channels(); ++c) {
        for (std::size_t p = 0; p < plane; ++p) {
            const double d = aligned[c * plane + p] - hr[c * plane + p];
            out[p] += d * d;
        }
    }
    const double scale = normalize_by_channels ? 1.0 / std::sqrt(static_cast<double>(hr.channels())) : 1.0;
    for (double& v : out.values()) v = std::sqrt(v) * scale;
    return out;
}

void convolve_axis(const Tensor& in, Tensor& out, const std::vector<double>& kernel, bool along_rows) {
    const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    const std::size_t h = in.height();
    const std::size_t w = in.width();
    for (std::size_t c = 0; c < in.channels(); ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
                    const double wk = kernel[static_cast<std::size_t>(k + radius)];
                    if (along_rows) {
                        acc += wk * in.at(c, reflect_index(static_cast<std::ptrdiff_t>(y) + k, h), x);
                    } else {
                        acc += wk * in.at(c, y, reflect_index(static_cast<std::ptrdiff_t>(x) + k, w));
                    }
                }
                out.at(c, y, x) = acc;
            }
        }
    }
}

}  // namespace

void ScoreConfig::validate() const {
    if (!(delta > 0.0) || !std::isfinite(delta)) throw std::invalid_argument("score: delta must be > 0");
    if (!std::isfinite(tau)) throw std::invalid_argument("score: tau must be finite");
    if (neighborhood < 3 || neighborhood % 2 == 0) {
        throw std::invalid_argument("score: neighborhood must be an odd integer >= 3");
    }
    if (!(smoothing_sigma >= 0.0) || !std::isfinite(smoothing_sigma)) {
        throw std::invalid_argument("score: smoothing_sigma must be >= 0");
    }
    if (image_reduction == ImageReduction::top_k_mean && top_k == 0) {
        throw std::invalid_argument("score: top_k must be >= 1");
    }
}

AnomalyMap anomaly_map(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned, std::size_t height,
                       std::size_t width, bool normalize_by_channels) {
    if (hr.empty() || hr.size() != aligned.size()) {
        throw std::invalid_argument("anomaly_map: stage count mismatch (" + std::to_string(hr.size()) + " vs " +
                                    std::to_string(aligned.size()) + ")");
    }
    AnomalyMap map;
    map.scores = Tensor::chw(1, height, width);
    for (std::size_t s = 0; s < hr.size(); ++s) {
        map.stage_maps.push_back(stage_norm_map(hr[s], aligned[s], normalize_by_channels));
        map.scores += resize_bilinear(map.stage_maps.back(), height, width);
    }
    return map;
}

AnomalyMap anomaly_map(const FeaturePyramid& hr, const std::vector<Tensor>& aligned, bool normalize_by_channels) {
    std::vector<Tensor> stages;
    for (const FeatureMap& m : hr.stages) stages.push_back(m.data);
    return anomaly_map(stages, aligned, hr.input_height, hr.input_width, normalize_by_channels);
}

Tensor structural_consistency_field(const Tensor& guidance, std::size_t neighborhood) {
    if (neighborhood < 3 || neighborhood % 2 == 0) {
        throw std::invalid_argument("structural_consistency: neighborhood must be odd and >= 3");
    }
    const std::size_t channels = guidance.channels();
    const std::size_t h = guidance.height();
    const std::size_t w = guidance.width();
    const std::size_t plane = guidance.plane();
    Tensor unit = guidance;
    for (std::size_t p = 0; p < plane; ++p) {
        double n2 = 0.0;
        for (std::size_t c = 0; c < channels; ++c) n2 += guidance[c * plane + p] * guidance[c * plane + p];
        const double inv = 1.0 / std::max(std::sqrt(n2), kUnitEps);
        for (std::size_t c = 0; c < channels; ++c) unit[c * plane + p] *= inv;
    }
    const auto r = static_cast<std::ptrdiff_t>(neighborhood / 2);
    const double count = static_cast<double>(neighborhood * neighborhood - 1);
    Tensor sim = Tensor::chw(1, h, w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
                for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const std::size_t ny = reflect_index(static_cast<std::ptrdiff_t>(y) + dy, h);
                    const std::size_t nx = reflect_index(static_cast<std::ptrdiff_t>(x) + dx, w);
                    double dot = 0.0;
                    for (std::size_t c = 0; c < channels; ++c) dot += unit.at(c, y, x) * unit.at(c, ny, nx);
                    acc += dot;
                }
            }
            sim.at(0, y, x) = std::clamp(acc / count, -1.0, 1.0);
        }
    }
    return sim;
}

ReliabilityMap structural_consistency(const std::vector<GuidanceBundle>& guidance, const ScoreConfig& config,
                                      std::size_t height, std::size_t width) {
    if (guidance.empty()) throw std::invalid_argument("structural_consistency: no guidance");
    config.validate();
    ReliabilityMap rel;
    if (config.reliability_source == ReliabilitySource::deepest) {
        rel.sim.push_back(structural_consistency_field(guidance.back().fused, config.neighborhood));
    } else {
        for (const GuidanceBundle& g : guidance) {
            rel.sim.push_back(structural_consistency_field(g.fused, config.neighborhood));
        }
    }
    rel.sim_upsampled = Tensor::chw(1, height, width);
    for (const Tensor& s : rel.sim) rel.sim_upsampled += resize_bilinear(s, height, width);
    rel.sim_upsampled *= 1.0 / static_cast<double>(rel.sim.size());
    rel.modulation = rel.sim_upsampled;
    for (double& v : rel.modulation.values()) v = reliability_gate(v, config.tau, config.delta);
    return rel;
}

double reliability_gate(double sim, double tau, double delta) {
    if (!(delta > 0.0)) throw std::invalid_argument("reliability_gate: delta must be > 0");
    return logistic((sim - tau) / delta);
}

AnomalyMap reliability_modulate(const AnomalyMap& map, const ReliabilityMap& reliability, const ScoreConfig& config) {
    config.validate();
    const Tensor& sim = reliability.sim_upsampled;
    require_same_shape(map.scores, sim, "reliability_modulate");
    AnomalyMap out = map;
    for (std::size_t i = 0; i < out.scores.size(); ++i) {
        out.scores[i] = reliability_gate(sim[i], config.tau, config.delta) * map.scores[i];
    }
    return out;
}

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be > 0");
    const auto radius = static_cast<std::ptrdiff_t>(std::lround(4.0 * sigma));
    std::vector<double> k;
    double total = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double x = static_cast<double>(i);
        k.push_back(std::exp(-0.5 * x * x / (sigma * sigma)));
        total += k.back();
    }
    for (double& v : k) v /= total;
    return k;
}

Tensor gaussian_smooth(const Tensor& map, double sigma) {
    if (sigma == 0.0) return map;
    const std::vector<double> kernel = gaussian_kernel(sigma);
    Tensor rows = Tensor::zeros_like(map);
    convolve_axis(map, rows, kernel, true);
    Tensor out = Tensor::zeros_like(map);
    convolve_axis(rows, out, kernel, false);
    return out;
}

AnomalyMap postprocess_map(const AnomalyMap& map, const ScoreConfig& config) {
    config.validate();
    AnomalyMap out = map;
    out.scores = gaussian_smooth(map.scores, config.smoothing_sigma);
    return out;
}

double image_score(const Tensor& scores, const ScoreConfig& config) {
    if (scores.empty()) throw std::invalid_argument("image_score: empty map");
    if (config.image_reduction == ImageReduction::max) {
        return *std::max_element(scores.values().begin(), scores.values().end());
    }
    const std::size_t k = config.top_k;
    if (k == 0 || k > scores.size()) {
        throw std::invalid_argument("image_score: top_k " + std::to_string(k) + " exceeds pixel count " +
                                    std::to_string(scores.size()));
    }
    std::vector<double> values(scores.values().begin(), scores.values().end());
    std::partial_sort(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end(),
                      std::greater<>());
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += values[i];
    return total / static_cast<double>(k);
}

ScoredImage score_alignment(const FeaturePyramid& hr, const AlignmentResult& alignment, const ScoreConfig& config) {
    config.validate();
    ScoredImage out;
    out.raw = anomaly_map(hr, alignment.aligned, config.normalize_by_channels);
    AnomalyMap current = out.raw;
    if (config.reliability_enabled) {
        out.reliability = structural_consistency(alignment.guidance, config, hr.input_height, hr.input_width);
        current = reliability_modulate(current, out.reliability, config);
    }
    out.map = postprocess_map(current, config);
    out.map.image_score = image_score(out.map.scores, config);
    out.raw.image_score = image_score(out.raw.scores, config);
    return out;
}

std::vector<std::uint16_t> heatmap_levels(const Tensor& scores, const HeatmapOptions& options) {
    double lo = options.lo;
    double hi = options.hi;
    if (options.mode == HeatmapMode::per_image && !scores.empty()) {
        const auto [mn, mx] = std::minmax_element(scores.values().begin(), scores.values().end());
        lo = *mn;
        hi = *mx;
    }
    std::vector<std::uint16_t> levels(scores.size(), 0);
    if (!(hi > lo)) return levels;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double t = std::clamp((scores[i] - lo) / (hi - lo), 0.0, 1.0);
        levels[i] = static_cast<std::uint16_t>(std::lround(t * 65535.0));
    }
    return levels;
}

void write_heatmap_png(const std::filesystem::path& path, const Tensor& scores, const HeatmapOptions& options) {
    png::write_gray16(path, scores.width(), scores.height(), heatmap_levels(scores, options));
}

void write_raw_map(const std::filesystem::path& path, const Tensor& scores) {
    WeightsArchive archive;
    archive.put("anomaly_map", scores, DType::f64);
    archive.save(path);
}

Tensor read_raw_map(const std::filesystem::path& path) {
    return WeightsArchive::load(path).get("anomaly_map");
}

}  // namespace hlgfa
