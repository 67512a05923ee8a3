#include "cnnaudit/image.hpp"

#include "cnnaudit/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

namespace cnnaudit {

Tensor3 resize_bilinear(const Tensor3& src, std::size_t height, std::size_t width) {
    if (src.height == height && src.width == width) {
        return src;
    }
    if (src.height == 0 || src.width == 0 || height == 0 || width == 0) {
        throw RejectedInputError("cannot resize an empty grid");
    }
    Tensor3 out(src.channels, height, width);
    const double scale_y = static_cast<double>(src.height) / static_cast<double>(height);
    const double scale_x = static_cast<double>(src.width) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double sy = std::max(0.0, (static_cast<double>(y) + 0.5) * scale_y - 0.5);
        const auto y0 = std::min(static_cast<std::size_t>(sy), src.height - 1);
        const auto y1 = std::min(y0 + 1, src.height - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double sx = std::max(0.0, (static_cast<double>(x) + 0.5) * scale_x - 0.5);
            const auto x0 = std::min(static_cast<std::size_t>(sx), src.width - 1);
            const auto x1 = std::min(x0 + 1, src.width - 1);
            const double fx = sx - static_cast<double>(x0);
            for (std::size_t c = 0; c < src.channels; ++c) {
                const double top = src.at(c, y0, x0) * (1.0 - fx) + src.at(c, y0, x1) * fx;
                const double bottom = src.at(c, y1, x0) * (1.0 - fx) + src.at(c, y1, x1) * fx;
                out.at(c, y, x) = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    return out;
}

Image crop(const Image& src, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    if (top + height > src.height || left + width > src.width) {
        throw RejectedInputError("crop box leaves the image bounds");
    }
    Image out(src.channels, height, width);
    for (std::size_t c = 0; c < src.channels; ++c) {
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                out.at(c, y, x) = src.at(c, top + y, left + x);
            }
        }
    }
    return out;
}

Image read_png(const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&png, path.c_str()) == 0) {
        throw ParseError("cannot read PNG " + path.string() + ": " + png.message);
    }
    const std::size_t channels = (png.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
    png.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
    if (png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr) == 0) {
        png_image_free(&png);
        throw ParseError("cannot decode PNG " + path.string() + ": " + png.message);
    }
    Image out(channels, png.height, png.width);
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                out.at(c, y, x) = buffer[(y * out.width + x) * channels + c] / 255.0;
            }
        }
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw RejectedInputError("PNG output supports 1 or 3 channels");
    }
    std::vector<std::uint8_t> buffer(image.values.size());
    for (std::size_t y = 0; y < image.height; ++y) {
        for (std::size_t x = 0; x < image.width; ++x) {
            for (std::size_t c = 0; c < image.channels; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                buffer[(y * image.width + x) * image.channels + c] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    if (png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr) == 0) {
        throw AuditError("cannot write PNG " + path.string() + ": " + png.message);
    }
}

} // namespace cnnaudit
