#pragma once

#include "cnnaudit/image.hpp"
#include "cnnaudit/model_backend.hpp"

#include <array>
#include <string>

namespace cnnaudit {

struct SaliencyMap {
    std::string image_id;
    std::size_t target_class = 0;
    std::string layer_id;
    Tensor3 heatmap;        // 1 x H x W, values in [0,1]
    bool upsampled = false; // false: layer resolution; true: network input resolution
};

/// relu(sum_c w_c * A_c) / max, with w_c the spatial mean of the gradient on channel c.
/// A non-positive map yields all zeros.
Tensor3 grad_cam_map(const Tensor3& activation, const Tensor3& gradient);

/// Grad-CAM at `layer_id` for `target_class`; the heatmap stays at layer resolution.
/// CapabilityError from the backend propagates (saliency unavailable).
SaliencyMap grad_cam(const Classifier& model, const Image& image, std::size_t target_class,
                     const std::string& layer_id, std::string image_id = {});

/// Bilinear upsampling to the network input resolution, clamped back into [0,1].
SaliencyMap upsample_to_input(const SaliencyMap& map, const Preprocessing& preprocessing);

/// Perceptually uniform (viridis) colour for t in [0,1].
std::array<double, 3> viridis(double t);

inline constexpr double kOverlayAlpha = 0.5;
inline constexpr const char* kOverlayColormap = "viridis";

/// Blends the colour-mapped heatmap over the input-space image.
Image render_overlay(const Image& input_space, const Tensor3& heatmap, double alpha = kOverlayAlpha);

} // namespace cnnaudit
