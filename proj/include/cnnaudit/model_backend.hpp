#pragma once

#include "cnnaudit/convnet.hpp"
#include "cnnaudit/image.hpp"

#include <nlohmann/json.hpp>

#include <compare>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cnnaudit {

/// Resize + per-channel normalisation applied before every forward pass.
/// Recorded verbatim in the audit artifact so every stage uses the same transform.
struct Preprocessing {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::string resize = "bilinear";
    std::string channel_order = "RGB";
    std::vector<double> mean;
    std::vector<double> stddev;

    /// Image resampled to the network input grid, still in [0,1]. Grey images are
    /// replicated across three channels for RGB models.
    Image to_input_space(const Image& image) const;
    /// Normalised network input.
    Tensor3 normalize(const Image& input_space) const;
    Tensor3 apply(const Image& image) const { return normalize(to_input_space(image)); }

    nlohmann::json to_json() const;
    static Preprocessing from_json(const nlohmann::json& j);
    bool operator==(const Preprocessing&) const = default;
};

struct LayerInfo {
    std::string id;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    bool operator==(const LayerInfo&) const = default;
};

struct ClassifierInfo {
    std::vector<std::string> class_names;
    std::vector<LayerInfo> layers; // input -> output
    std::string feature_layer;
    std::string saliency_layer;
    std::string feature_pooling; // "global_average" or "flatten"
    Preprocessing preprocessing;
    bool differentiable = true;

    const LayerInfo& layer(const std::string& id) const;
    std::size_t layer_index(const std::string& id) const;
    bool has_layer(const std::string& id) const;
    std::vector<std::string> layer_ids() const;

    /// Machine-readable manifest embedded in the artifact (no weights).
    nlohmann::json to_json() const;
    static ClassifierInfo from_json(const nlohmann::json& j);
    bool operator==(const ClassifierInfo&) const = default;
};

/// One channel of one layer.
struct NeuronRef {
    std::string layer_id;
    std::size_t channel = 0;

    std::string key() const { return layer_id + "/" + std::to_string(channel); }
    auto operator<=>(const NeuronRef&) const = default;
};

struct ActivationTensor {
    std::string layer_id;
    Tensor3 values;
};

struct Prediction {
    std::size_t label = 0;
    std::vector<double> scores;
};

/// Everything one forward pass yields for an image.
struct ImagePass {
    Prediction prediction;
    std::vector<double> features;
    std::vector<ActivationTensor> activations; // every layer, input -> output
};

/// Index of the largest score; ties go to the lowest index.
std::size_t argmax(std::span<const double> scores);

/// Read-only contract over a trained CNN classifier. Implementations are immutable
/// after construction and safe to call concurrently.
class Classifier {
public:
    virtual ~Classifier() = default;

    virtual const ClassifierInfo& info() const = 0;
    virtual Prediction predict(const Image& image) const = 0;
    virtual std::vector<ActivationTensor> capture_activations(const Image& image,
                                                              std::span<const std::string> layer_ids) const = 0;
    virtual std::vector<double> feature_vector(const Image& image) const = 0;
    /// d score[target_class] / d activation(layer_id). Throws CapabilityError when unsupported.
    virtual Tensor3 class_gradient(const Image& image, std::size_t target_class,
                                   const std::string& layer_id) const = 0;
    virtual ImagePass run(const Image& image) const;
};

/// Classifier backed by the in-tree ConvNet engine.
class ConvNetClassifier final : public Classifier {
public:
    ConvNetClassifier(ConvNet net, std::vector<std::string> class_names, Preprocessing preprocessing,
                      std::string feature_layer = {}, std::string saliency_layer = {}, bool differentiable = true);

    const ClassifierInfo& info() const override { return info_; }
    Prediction predict(const Image& image) const override;
    std::vector<ActivationTensor> capture_activations(const Image& image,
                                                      std::span<const std::string> layer_ids) const override;
    std::vector<double> feature_vector(const Image& image) const override;
    Tensor3 class_gradient(const Image& image, std::size_t target_class, const std::string& layer_id) const override;
    ImagePass run(const Image& image) const override;

    /// Class scores obtained by feeding `activation` as the output of `layer_id`.
    std::vector<double> scores_from_layer(const std::string& layer_id, const Tensor3& activation) const;

    const ConvNet& network() const { return net_; }

    nlohmann::json checkpoint_json() const;
    void save(const std::filesystem::path& path) const;

private:
    Tensor3 prepare(const Image& image) const;
    std::vector<double> pool_features(const Tensor3& feature_activation) const;

    ConvNet net_;
    ClassifierInfo info_;
};

std::shared_ptr<const ConvNetClassifier> load_classifier(const std::filesystem::path& path);
std::shared_ptr<const ConvNetClassifier> classifier_from_json(const nlohmann::json& j);

} // namespace cnnaudit
