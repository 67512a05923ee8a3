#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace cnnaudit {

/// Dense channels x height x width grid of doubles, row-major within a channel.
struct Tensor3 {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    Tensor3() = default;
    Tensor3(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : channels(c), height(h), width(w), values(c * h * w, fill) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }

    std::size_t plane_size() const { return height * width; }
    std::span<double> channel(std::size_t c) { return {values.data() + c * plane_size(), plane_size()}; }
    std::span<const double> channel(std::size_t c) const { return {values.data() + c * plane_size(), plane_size()}; }

    bool same_shape(const Tensor3& other) const {
        return channels == other.channels && height == other.height && width == other.width;
    }
    bool operator==(const Tensor3&) const = default;
};

/// Pixel grid with values in [0,1], channel-planar (RGB or grey).
struct Image : Tensor3 {
    using Tensor3::Tensor3;
    Image() = default;
    explicit Image(Tensor3 t) : Tensor3(std::move(t)) {}
};

/// Bilinear resampling with half-pixel centres (align_corners = false).
Tensor3 resize_bilinear(const Tensor3& src, std::size_t height, std::size_t width);

/// Square or rectangular crop; throws if the box leaves the image.
Image crop(const Image& src, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

/// Grey PNGs load as one channel, everything else as RGB (alpha dropped).
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

} // namespace cnnaudit
