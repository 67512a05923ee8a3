#pragma once

#include "cnnaudit/image.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cnnaudit {

enum class Pooling { GlobalAverage, Flatten };

/// Convolution ("same" padding, stride 1) -> optional ReLU -> optional 2x2 max pool.
/// The stage output is the capturable activation for its layer id.
struct ConvStage {
    std::string id;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    bool relu = true;
    bool max_pool = false;
    std::vector<double> weight; // [out][in][k][k]
    std::vector<double> bias;   // [out]

    double& w(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
        return weight[((o * in_channels + i) * kernel + ky) * kernel + kx];
    }
    bool operator==(const ConvStage&) const = default;
};

struct LinearHead {
    Pooling pooling = Pooling::GlobalAverage;
    std::size_t inputs = 0;
    std::size_t outputs = 0;
    std::vector<double> weight; // [outputs][inputs]
    std::vector<double> bias;
    bool operator==(const LinearHead&) const = default;
};

struct StageTrace {
    Tensor3 input;
    Tensor3 pre_activation;
    Tensor3 activated;
    Tensor3 output;
    std::vector<std::size_t> pool_argmax; // flat index into `activated` per output cell
};

struct ForwardTrace {
    std::size_t first_stage = 0;
    std::vector<StageTrace> stages;
    std::vector<double> pooled; // head input (empty without head)
    std::vector<double> scores;

    const Tensor3& output_of(std::size_t stage_index) const { return stages[stage_index - first_stage].output; }
    const Tensor3& last_output() const { return stages.back().output; }
};

struct ParameterGradients {
    std::vector<std::vector<double>> weight;
    std::vector<std::vector<double>> bias;
    std::vector<double> head_weight;
    std::vector<double> head_bias;

    void add(const ParameterGradients& other);
    void scale(double factor);
};

/// Architecture description used to build a randomly initialised network.
struct StageShape {
    std::string id;
    std::size_t out_channels;
    std::size_t kernel = 3;
    bool relu = true;
    bool max_pool = false;
};

class ConvNet {
public:
    std::vector<ConvStage> stages;
    std::optional<LinearHead> head;

    /// He-normal weights, zero biases.
    static ConvNet random(std::size_t input_channels, std::size_t input_height, std::size_t input_width,
                          const std::vector<StageShape>& shapes, std::optional<std::size_t> classes,
                          Pooling pooling, std::uint64_t seed);

    std::optional<std::size_t> stage_index(const std::string& id) const;

    /// Runs stages [first_stage, end) on `input` (the input of `first_stage`), then the head if present.
    ForwardTrace forward(const Tensor3& input, std::size_t first_stage = 0) const;

    /// Gradient of the head's output w.r.t. the last stage output; accumulates head parameter grads.
    Tensor3 backward_head(const ForwardTrace& trace, std::span<const double> d_scores,
                          ParameterGradients* grads) const;

    /// Propagates a gradient on the last stage output down through stages >= `down_to`.
    /// Returns the gradient w.r.t. the input of stage `down_to` (= output of stage down_to-1).
    Tensor3 backward_stages(const ForwardTrace& trace, Tensor3 d_output, std::size_t down_to,
                            ParameterGradients* grads) const;

    ParameterGradients zero_gradients() const;
    void apply_sgd(const ParameterGradients& grads, double learning_rate);

    nlohmann::json to_json() const;
    static ConvNet from_json(const nlohmann::json& j);

    bool operator==(const ConvNet&) const = default;
};

std::vector<double> global_average_pool(const Tensor3& t);
Tensor3 global_average_pool_backward(std::span<const double> d_pooled, std::size_t channels, std::size_t height,
                                     std::size_t width);

std::vector<double> head_pool(Pooling pooling, const Tensor3& t);

} // namespace cnnaudit
