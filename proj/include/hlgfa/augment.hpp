#pragma once

#include <cstdint>
#include <utility>

#include "hlgfa/image.hpp"
#include "hlgfa/rng.hpp"

namespace hlgfa {

struct NoiseSpec {
    double point_density = 0.002;
    std::pair<double, double> point_amplitude_range{0.0, 1.0};
    /// Blend weight toward the drawn gray level for a selected pixel.
    std::pair<double, double> point_opacity_range{0.5, 1.0};
    std::pair<int, int> stripe_count_range{0, 3};
    std::pair<double, double> stripe_width_range{1.0, 5.0};
    std::pair<double, double> stripe_opacity_range{0.3, 0.9};
    double apply_probability = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Line segment in pixel coordinates (pixel (x, y) has its center at
/// (x + 0.5, y + 0.5)), drawn as a capsule of the given width.
struct Stripe {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
    double width = 1.0;
    double opacity = 1.0;
    double gray = 1.0;
};

/// Antialiased coverage of a pixel center: clamp(width / 2 + 0.5 - d, 0, 1)
/// where d is the distance from the center to the segment.
double stripe_coverage(const Stripe& stripe, double cx, double cy);

/// out = (1 - opacity * coverage) * in + opacity * coverage * gray, on every
/// channel, clamped to [0, 1].
void draw_stripe(Tensor& image, const Stripe& stripe);

/// Row-major over pixels: one bernoulli(point_density) draw; a selected
/// pixel then draws amplitude then opacity and is blended toward that gray
/// level on all channels.
ImageTensor inject_point_noise(const ImageTensor& image, const NoiseSpec& spec, Xorshift64Star& rng);

/// Draws the stripe count, then per stripe x0, y0, x1, y1 (uniform over the
/// image), width, opacity and gray level (from point_amplitude_range).
ImageTensor inject_stripe_noise(const ImageTensor& image, const NoiseSpec& spec, Xorshift64Star& rng);

/// Seed for one sample of one epoch: derive_seed(derive_seed(seed, epoch), index).
std::uint64_t augmentation_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_index);

/// One draw decides whether noise is applied (uniform() < apply_probability);
/// if so point noise then stripe noise go into the HIGH image. The LOW view
/// is always the antialiased downsample of the (noised) HIGH image.
std::pair<ImageTensor, ImageTensor> paired_augment(const ImageTensor& image, const NoiseSpec& spec, double lr_factor,
                                                   std::uint64_t sample_seed);

/// Process-wide count of paired_augment calls, for train/eval isolation checks.
std::uint64_t augment_invocations();

}  // namespace hlgfa
