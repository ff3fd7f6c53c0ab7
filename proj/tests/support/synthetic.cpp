#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "hlgfa/augment.hpp"
#include "hlgfa/image.hpp"
#include "hlgfa/png_io.hpp"
#include "hlgfa/rng.hpp"

namespace fs = std::filesystem;

namespace hlgfa::testing {

Tensor normal_texture(std::size_t side, std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const double n = static_cast<double>(side);
    struct Wave {
        double kx, ky, phase, amp;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 3; ++i) {
        const double angle = rng.uniform(0.0, std::numbers::pi);
        const double period = rng.uniform(0.35, 0.6) * n;
        const double k = 2.0 * std::numbers::pi / period;
        waves.push_back({k * std::cos(angle), k * std::sin(angle), rng.uniform(0.0, 2.0 * std::numbers::pi),
                         rng.uniform(0.05, 0.1)});
    }
    const double base[3] = {0.55, 0.45, 0.35};
    Tensor t = Tensor::chw(3, side, side);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            double v = 0.0;
            for (const Wave& w : waves) {
                v += w.amp * std::sin(w.kx * static_cast<double>(x) + w.ky * static_cast<double>(y) + w.phase);
            }
            for (std::size_t c = 0; c < 3; ++c) {
                t.at(c, y, x) = std::clamp(base[c] + v * (1.0 - 0.2 * static_cast<double>(c)), 0.0, 1.0);
            }
        }
    }
    return t;
}

Tensor paint_defect(Tensor& image, std::uint64_t seed) {
    Xorshift64Star rng(seed);
    const std::size_t side = image.height();
    const double n = static_cast<double>(side);
    Tensor mask = Tensor::chw(1, side, side);
    const double gray = rng.bernoulli(0.5) ? rng.uniform(0.0, 0.1) : rng.uniform(0.9, 1.0);
    if (rng.bernoulli(0.5)) {
        const auto size = static_cast<std::size_t>(rng.uniform(0.14, 0.22) * n);
        const auto x0 = static_cast<std::size_t>(rng.uniform(0.1, 0.9) * n - static_cast<double>(size) / 2);
        const auto y0 = static_cast<std::size_t>(rng.uniform(0.1, 0.9) * n - static_cast<double>(size) / 2);
        for (std::size_t y = y0; y < std::min(side, y0 + size); ++y) {
            for (std::size_t x = x0; x < std::min(side, x0 + size); ++x) {
                for (std::size_t c = 0; c < 3; ++c) image.at(c, y, x) = gray;
                mask.at(0, y, x) = 1.0;
            }
        }
    } else {
        const double angle = rng.uniform(0.0, std::numbers::pi);
        const double length = rng.uniform(0.35, 0.55) * n;
        const double cx = rng.uniform(0.3, 0.7) * n, cy = rng.uniform(0.3, 0.7) * n;
        Stripe s;
        s.x0 = cx - 0.5 * length * std::cos(angle);
        s.y0 = cy - 0.5 * length * std::sin(angle);
        s.x1 = cx + 0.5 * length * std::cos(angle);
        s.y1 = cy + 0.5 * length * std::sin(angle);
        s.width = rng.uniform(0.06, 0.09) * n;
        s.opacity = 1.0;
        s.gray = gray;
        draw_stripe(image, s);
        for (std::size_t y = 0; y < side; ++y) {
            for (std::size_t x = 0; x < side; ++x) {
                const double cov = stripe_coverage(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
                if (cov >= 0.5) mask.at(0, y, x) = 1.0;
            }
        }
    }
    return mask;
}

void write_png(const fs::path& path, const Tensor& image) {
    fs::create_directories(path.parent_path());
    png::write_rgb8(path, image.width(), image.height(), to_rgb8(image));
}

void write_mask_png(const fs::path& path, const Tensor& mask) {
    fs::create_directories(path.parent_path());
    std::vector<std::uint8_t> gray(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) gray[i] = mask[i] > 0.5 ? 255 : 0;
    png::write_gray8(path, mask.width(), mask.height(), gray);
}

void write_synthetic_dataset(const fs::path& root, const SyntheticSpec& spec) {
    const fs::path cat = root / spec.category;
    const auto name = [](const char* prefix, std::size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s%03zu.png", prefix, i);
        return std::string(buf);
    };
    std::uint64_t k = 0;
    for (std::size_t i = 0; i < spec.train_count; ++i) {
        write_png(cat / "train" / "good" / name("", i), normal_texture(spec.side, derive_seed(spec.seed, k++)));
    }
    for (std::size_t i = 0; i < spec.test_good; ++i) {
        write_png(cat / "test" / "good" / name("", i), normal_texture(spec.side, derive_seed(spec.seed, k++)));
    }
    for (std::size_t i = 0; i < spec.test_defect; ++i) {
        Tensor image = normal_texture(spec.side, derive_seed(spec.seed, k++));
        const Tensor mask = paint_defect(image, derive_seed(spec.seed ^ 0x5EED, i));
        write_png(cat / "test" / "defect" / name("", i), image);
        char mname[32];
        std::snprintf(mname, sizeof mname, "%03zu_mask.png", i);
        write_mask_png(cat / "ground_truth" / "defect" / mname, mask);
    }
}

}  // namespace hlgfa::testing
