#include "hlgfa/augment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

#include "hlgfa/backbone.hpp"

namespace hlgfa {
namespace {

std::atomic<std::uint64_t> g_invocations{0};

void require_range(const std::pair<double, double>& r, double lo, double hi, const char* what) {
    if (!(r.first <= r.second) || r.first < lo || r.second > hi) {
        throw std::invalid_argument(std::string("noise spec: ") + what + " must satisfy " + std::to_string(lo) +
                                    " <= lo <= hi <= " + std::to_string(hi));
    }
}

}  // namespace

void NoiseSpec::validate() const {
    if (!(point_density >= 0.0 && point_density <= 0.05)) {
        throw std::invalid_argument("noise spec: point_density must be in [0, 0.05]");
    }
    if (!(apply_probability >= 0.0 && apply_probability <= 1.0)) {
        throw std::invalid_argument("noise spec: apply_probability must be in [0, 1]");
    }
    require_range(point_amplitude_range, 0.0, 1.0, "point_amplitude_range");
    require_range(point_opacity_range, 0.0, 1.0, "point_opacity_range");
    require_range(stripe_opacity_range, 0.0, 1.0, "stripe_opacity_range");
    require_range(stripe_width_range, 0.0, 1e6, "stripe_width_range");
    if (stripe_count_range.first < 0 || stripe_count_range.first > stripe_count_range.second) {
        throw std::invalid_argument("noise spec: stripe_count_range must satisfy 0 <= min <= max");
    }
}

double stripe_coverage(const Stripe& s, double cx, double cy) {
    const double dx = s.x1 - s.x0;
    const double dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((cx - s.x0) * dx + (cy - s.y0) * dy) / len2, 0.0, 1.0);
    const double px = s.x0 + t * dx - cx;
    const double py = s.y0 + t * dy - cy;
    const double d = std::sqrt(px * px + py * py);
    return std::clamp(s.width / 2.0 + 0.5 - d, 0.0, 1.0);
}

void draw_stripe(Tensor& image, const Stripe& s) {
    const std::size_t h = image.height();
    const std::size_t w = image.width();
    // Only pixels within the capsule's bounding box can be covered.
    const double reach = s.width / 2.0 + 1.0;
    const auto clamp_lo = [](double v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, static_cast<double>(n)));
    };
    const std::size_t y_begin = clamp_lo(std::min(s.y0, s.y1) - reach, h);
    const std::size_t y_end = clamp_lo(std::max(s.y0, s.y1) + reach + 1.0, h);
    const std::size_t x_begin = clamp_lo(std::min(s.x0, s.x1) - reach, w);
    const std::size_t x_end = clamp_lo(std::max(s.x0, s.x1) + reach + 1.0, w);
    for (std::size_t y = y_begin; y < y_end; ++y) {
        for (std::size_t x = x_begin; x < x_end; ++x) {
            const double a = s.opacity * stripe_coverage(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
            if (a <= 0.0) continue;
            for (std::size_t c = 0; c < image.channels(); ++c) {
                double& v = image.at(c, y, x);
                v = std::clamp((1.0 - a) * v + a * s.gray, 0.0, 1.0);
            }
        }
    }
}

ImageTensor inject_point_noise(const ImageTensor& image, const NoiseSpec& spec, Xorshift64Star& rng) {
    ImageTensor out = image;
    Tensor& t = out.data;
    const std::size_t h = t.height();
    const std::size_t w = t.width();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!rng.bernoulli(spec.point_density)) continue;
            const double amplitude = rng.uniform(spec.point_amplitude_range.first, spec.point_amplitude_range.second);
            const double opacity = rng.uniform(spec.point_opacity_range.first, spec.point_opacity_range.second);
            for (std::size_t c = 0; c < t.channels(); ++c) {
                double& v = t.at(c, y, x);
                v = std::clamp((1.0 - opacity) * v + opacity * amplitude, 0.0, 1.0);
            }
        }
    }
    return out;
}

ImageTensor inject_stripe_noise(const ImageTensor& image, const NoiseSpec& spec, Xorshift64Star& rng) {
    ImageTensor out = image;
    const auto count = rng.uniform_int(spec.stripe_count_range.first, spec.stripe_count_range.second);
    const auto h = static_cast<double>(image.height());
    const auto w = static_cast<double>(image.width());
    for (std::int64_t i = 0; i < count; ++i) {
        Stripe s;
        s.x0 = rng.uniform(0.0, w);
        s.y0 = rng.uniform(0.0, h);
        s.x1 = rng.uniform(0.0, w);
        s.y1 = rng.uniform(0.0, h);
        s.width = rng.uniform(spec.stripe_width_range.first, spec.stripe_width_range.second);
        s.opacity = rng.uniform(spec.stripe_opacity_range.first, spec.stripe_opacity_range.second);
        s.gray = rng.uniform(spec.point_amplitude_range.first, spec.point_amplitude_range.second);
        draw_stripe(out.data, s);
    }
    return out;
}

std::uint64_t augmentation_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_index) {
    return derive_seed(derive_seed(seed, epoch), sample_index);
}

std::pair<ImageTensor, ImageTensor> paired_augment(const ImageTensor& image, const NoiseSpec& spec, double lr_factor,
                                                   std::uint64_t sample_seed) {
    spec.validate();
    g_invocations.fetch_add(1, std::memory_order_relaxed);
    Xorshift64Star rng(sample_seed);
    if (!rng.bernoulli(spec.apply_probability)) return make_dual_views(image, lr_factor);
    ImageTensor noised = inject_point_noise(image, spec, rng);
    noised = inject_stripe_noise(noised, spec, rng);
    return make_dual_views(noised, lr_factor);
}

std::uint64_t augment_invocations() { return g_invocations.load(std::memory_order_relaxed); }

}  // namespace hlgfa
