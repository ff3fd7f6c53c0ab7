#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace hlgfa::png {

/// 8-bit interleaved pixels, row-major.
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;
};

/// Decodes any PNG to 8-bit RGB. Throws std::runtime_error on failure.
Image8 read_rgb8(const std::filesystem::path& path);
/// Decodes any PNG to 8-bit gray.
Image8 read_gray8(const std::filesystem::path& path);
/// Decodes a PNG to 16-bit gray without gamma conversion.
std::vector<std::uint16_t> read_gray16(const std::filesystem::path& path, std::size_t& width,
                                       std::size_t& height);

void write_rgb8(const std::filesystem::path& path, std::size_t width, std::size_t height,
                const std::vector<std::uint8_t>& rgb);
void write_gray8(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 const std::vector<std::uint8_t>& gray);
void write_gray16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                  const std::vector<std::uint16_t>& gray);

}  // namespace hlgfa::png
