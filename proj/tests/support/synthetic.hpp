#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "hlgfa/tensor.hpp"

namespace hlgfa::testing {

struct SyntheticSpec {
    std::size_t side = 64;
    std::size_t train_count = 60;
    std::size_t test_good = 10;
    std::size_t test_defect = 10;
    std::uint64_t seed = 7;
    std::string category = "texture";
};

/// Smooth low-frequency colour texture in [0, 1], (3, side, side).
Tensor normal_texture(std::size_t side, std::uint64_t seed);

/// Paints a flat square or a thick stripe into `image` and returns the
/// defect mask (1, side, side).
Tensor paint_defect(Tensor& image, std::uint64_t seed);

/// Writes an MVTec-style tree under root/<category>.
void write_synthetic_dataset(const std::filesystem::path& root, const SyntheticSpec& spec);

void write_png(const std::filesystem::path& path, const Tensor& image);
void write_mask_png(const std::filesystem::path& path, const Tensor& mask);

}  // namespace hlgfa::testing
