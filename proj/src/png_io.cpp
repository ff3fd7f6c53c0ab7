#include "hlgfa/png_io.hpp"

#include <png.h>

#include <cstring>
#include <stdexcept>
#include <string>

namespace hlgfa::png {
namespace {

struct ImageGuard {
    png_image image{};
    ImageGuard() {
        std::memset(&image, 0, sizeof(image));
        image.version = PNG_IMAGE_VERSION;
    }
    ~ImageGuard() { png_image_free(&image); }
};

[[noreturn]] void fail(const std::filesystem::path& path, const char* what, const png_image& image) {
    throw std::runtime_error(std::string("png ") + what + " failed for " + path.string() + ": " +
                             image.message);
}

template <typename Sample>
std::vector<Sample> decode(const std::filesystem::path& path, png_uint_32 format,
                           std::size_t& width, std::size_t& height) {
    ImageGuard guard;
    if (!png_image_begin_read_from_file(&guard.image, path.c_str())) fail(path, "read", guard.image);
    guard.image.format = format;
    width = guard.image.width;
    height = guard.image.height;
    if (width == 0 || height == 0) {
        throw std::runtime_error("png read failed for " + path.string() + ": zero-size image");
    }
    std::vector<Sample> buffer(PNG_IMAGE_SIZE(guard.image) / sizeof(Sample));
    if (!png_image_finish_read(&guard.image, nullptr, buffer.data(), 0, nullptr)) {
        fail(path, "decode", guard.image);
    }
    return buffer;
}

template <typename Sample>
void encode(const std::filesystem::path& path, std::size_t width, std::size_t height,
            png_uint_32 format, const std::vector<Sample>& samples, std::size_t channels) {
    if (samples.size() != width * height * channels) {
        throw std::invalid_argument("png write: buffer size does not match dimensions");
    }
    ImageGuard guard;
    guard.image.width = static_cast<png_uint_32>(width);
    guard.image.height = static_cast<png_uint_32>(height);
    guard.image.format = format;
    if (!png_image_write_to_file(&guard.image, path.c_str(), 0, samples.data(), 0, nullptr)) {
        fail(path, "write", guard.image);
    }
}

}  // namespace

Image8 read_rgb8(const std::filesystem::path& path) {
    Image8 out;
    out.channels = 3;
    out.pixels = decode<std::uint8_t>(path, PNG_FORMAT_RGB, out.width, out.height);
    return out;
}

Image8 read_gray8(const std::filesystem::path& path) {
    Image8 out;
    out.channels = 1;
    out.pixels = decode<std::uint8_t>(path, PNG_FORMAT_GRAY, out.width, out.height);
    return out;
}

std::vector<std::uint16_t> read_gray16(const std::filesystem::path& path, std::size_t& width,
                                       std::size_t& height) {
    return decode<std::uint16_t>(path, PNG_FORMAT_LINEAR_Y, width, height);
}

void write_rgb8(const std::filesystem::path& path, std::size_t width, std::size_t height,
                const std::vector<std::uint8_t>& rgb) {
    encode(path, width, height, PNG_FORMAT_RGB, rgb, 3);
}

void write_gray8(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 const std::vector<std::uint8_t>& gray) {
    encode(path, width, height, PNG_FORMAT_GRAY, gray, 1);
}

void write_gray16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                  const std::vector<std::uint16_t>& gray) {
    encode(path, width, height, PNG_FORMAT_LINEAR_Y, gray, 1);
}

}  // namespace hlgfa::png
