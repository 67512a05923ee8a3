#include "cnnaudit/saliency.hpp"

#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace cnnaudit {

Tensor3 grad_cam_map(const Tensor3& activation, const Tensor3& gradient) {
    if (!activation.same_shape(gradient)) {
        throw ValidationError("activation and gradient shapes differ");
    }
    Tensor3 map(1, activation.height, activation.width);
    const double plane = static_cast<double>(activation.plane_size());
    for (std::size_t c = 0; c < activation.channels; ++c) {
        double weight = 0.0;
        for (const double g : gradient.channel(c)) {
            weight += g;
        }
        weight /= plane;
        const auto a = activation.channel(c);
        for (std::size_t i = 0; i < a.size(); ++i) {
            map.values[i] += weight * a[i];
        }
    }
    double peak = 0.0;
    for (auto& v : map.values) {
        v = std::max(v, 0.0);
        peak = std::max(peak, v);
    }
    if (peak > 0.0) {
        for (auto& v : map.values) {
            v = std::min(v / peak, 1.0);
        }
    }
    return map;
}

SaliencyMap grad_cam(const Classifier& model, const Image& image, std::size_t target_class,
                     const std::string& layer_id, std::string image_id) {
    const Tensor3 gradient = model.class_gradient(image, target_class, layer_id);
    const std::string ids[] = {layer_id};
    const auto activations = model.capture_activations(image, ids);
    SaliencyMap out;
    out.image_id = std::move(image_id);
    out.target_class = target_class;
    out.layer_id = layer_id;
    out.heatmap = grad_cam_map(activations.front().values, gradient);
    return out;
}

SaliencyMap upsample_to_input(const SaliencyMap& map, const Preprocessing& preprocessing) {
    SaliencyMap out = map;
    out.heatmap = resize_bilinear(map.heatmap, preprocessing.height, preprocessing.width);
    for (auto& v : out.heatmap.values) {
        v = std::clamp(v, 0.0, 1.0);
    }
    out.upsampled = true;
    return out;
}

std::array<double, 3> viridis(double t) {
    static constexpr std::array<std::array<double, 3>, 9> stops = {{
        {0.267004, 0.004874, 0.329415},
        {0.282623, 0.140926, 0.457517},
        {0.253935, 0.265254, 0.529983},
        {0.206756, 0.371758, 0.553117},
        {0.163625, 0.471133, 0.558148},
        {0.127568, 0.566949, 0.550556},
        {0.134692, 0.658636, 0.517649},
        {0.266941, 0.748751, 0.440573},
        {0.993248, 0.906157, 0.143936},
    }};
    t = std::clamp(t, 0.0, 1.0) * static_cast<double>(stops.size() - 1);
    const auto lo = std::min(static_cast<std::size_t>(t), stops.size() - 2);
    const double f = t - static_cast<double>(lo);
    std::array<double, 3> rgb{};
    for (std::size_t c = 0; c < 3; ++c) {
        rgb[c] = stops[lo][c] * (1.0 - f) + stops[lo + 1][c] * f;
    }
    return rgb;
}

Image render_overlay(const Image& input_space, const Tensor3& heatmap, double alpha) {
    const Tensor3 map = heatmap.height == input_space.height && heatmap.width == input_space.width
                            ? heatmap
                            : resize_bilinear(heatmap, input_space.height, input_space.width);
    Image out(3, input_space.height, input_space.width);
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            const auto color = viridis(map.at(0, y, x));
            for (std::size_t c = 0; c < 3; ++c) {
                const double base = input_space.at(input_space.channels == 3 ? c : 0, y, x);
                out.at(c, y, x) = (1.0 - alpha) * base + alpha * color[c];
            }
        }
    }
    return out;
}

} // namespace cnnaudit
