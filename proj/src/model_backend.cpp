#include "cnnaudit/model_backend.hpp"

#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cnnaudit {

namespace {

constexpr const char* kCheckpointFormat = "cnnaudit.convnet";
constexpr int kCheckpointVersion = 1;

void require_finite(std::span<const double> values, const char* what) {
    for (const double v : values) {
        if (!std::isfinite(v)) {
            throw AuditError(std::string("non-finite value in ") + what);
        }
    }
}

} // namespace

std::size_t argmax(std::span<const double> scores) {
    return static_cast<std::size_t>(std::distance(scores.begin(), std::max_element(scores.begin(), scores.end())));
}

Image Preprocessing::to_input_space(const Image& image) const {
    if (image.channels == 1 && channels == 3 && !image.values.empty()) {
        Image rgb(3, image.height, image.width);
        for (std::size_t c = 0; c < 3; ++c) {
            std::copy(image.values.begin(), image.values.end(), rgb.channel(c).begin());
        }
        return to_input_space(rgb);
    }
    if (image.channels != channels) {
        throw RejectedInputError("image has " + std::to_string(image.channels) + " channels, model expects " +
                                 std::to_string(channels));
    }
    if (image.height == 0 || image.width == 0) {
        throw RejectedInputError("empty image");
    }
    return Image(resize_bilinear(image, height, width));
}

Tensor3 Preprocessing::normalize(const Image& input_space) const {
    if (input_space.channels != channels || input_space.height != height || input_space.width != width) {
        throw RejectedInputError("input does not match the declared " + std::to_string(height) + "x" +
                                 std::to_string(width) + "x" + std::to_string(channels) + " shape");
    }
    Tensor3 out = input_space;
    for (std::size_t c = 0; c < channels; ++c) {
        const double m = mean.empty() ? 0.0 : mean[c];
        const double s = stddev.empty() ? 1.0 : stddev[c];
        for (auto& v : out.channel(c)) {
            v = (v - m) / s;
        }
    }
    return out;
}

nlohmann::json Preprocessing::to_json() const {
    return {{"height", height},         {"width", width}, {"channels", channels},
            {"resize", resize},         {"channel_order", channel_order},
            {"mean", mean},             {"std", stddev}};
}

Preprocessing Preprocessing::from_json(const nlohmann::json& j) {
    Preprocessing p;
    p.height = j.at("height").get<std::size_t>();
    p.width = j.at("width").get<std::size_t>();
    p.channels = j.at("channels").get<std::size_t>();
    p.resize = j.value("resize", "bilinear");
    p.channel_order = j.value("channel_order", "RGB");
    p.mean = j.value("mean", std::vector<double>{});
    p.stddev = j.value("std", std::vector<double>{});
    if (p.resize != "bilinear") {
        throw ParseError("unsupported resize mode '" + p.resize + "'");
    }
    if ((!p.mean.empty() && p.mean.size() != p.channels) || (!p.stddev.empty() && p.stddev.size() != p.channels)) {
        throw ParseError("normalisation constants do not match the channel count");
    }
    return p;
}

const LayerInfo& ClassifierInfo::layer(const std::string& id) const { return layers[layer_index(id)]; }

std::size_t ClassifierInfo::layer_index(const std::string& id) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].id == id) {
            return i;
        }
    }
    throw LookupError("unknown layer '" + id + "'");
}

bool ClassifierInfo::has_layer(const std::string& id) const {
    return std::any_of(layers.begin(), layers.end(), [&](const LayerInfo& l) { return l.id == id; });
}

std::vector<std::string> ClassifierInfo::layer_ids() const {
    std::vector<std::string> ids;
    for (const auto& l : layers) {
        ids.push_back(l.id);
    }
    return ids;
}

nlohmann::json ClassifierInfo::to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers) {
        layers_json.push_back({{"id", l.id}, {"channels", l.channels}, {"height", l.height}, {"width", l.width}});
    }
    return {{"class_names", class_names},       {"layers", layers_json},
            {"feature_layer", feature_layer},   {"saliency_layer", saliency_layer},
            {"feature_pooling", feature_pooling}, {"preprocessing", preprocessing.to_json()},
            {"differentiable", differentiable}};
}

ClassifierInfo ClassifierInfo::from_json(const nlohmann::json& j) {
    ClassifierInfo info;
    info.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& l : j.at("layers")) {
        info.layers.push_back({l.at("id").get<std::string>(), l.at("channels").get<std::size_t>(),
                               l.at("height").get<std::size_t>(), l.at("width").get<std::size_t>()});
    }
    info.feature_layer = j.at("feature_layer").get<std::string>();
    info.saliency_layer = j.at("saliency_layer").get<std::string>();
    info.feature_pooling = j.at("feature_pooling").get<std::string>();
    info.preprocessing = Preprocessing::from_json(j.at("preprocessing"));
    info.differentiable = j.at("differentiable").get<bool>();
    return info;
}

ImagePass Classifier::run(const Image& image) const {
    ImagePass pass;
    pass.prediction = predict(image);
    pass.features = feature_vector(image);
    const auto ids = info().layer_ids();
    pass.activations = capture_activations(image, ids);
    return pass;
}

ConvNetClassifier::ConvNetClassifier(ConvNet net, std::vector<std::string> class_names, Preprocessing preprocessing,
                                     std::string feature_layer, std::string saliency_layer, bool differentiable)
    : net_(std::move(net)) {
    if (net_.stages.empty()) {
        throw ConfigError("classifier needs at least one convolutional stage");
    }
    if (!net_.head) {
        throw ConfigError("classifier needs a classification head");
    }
    if (net_.head->outputs != class_names.size()) {
        throw ConfigError("head produces " + std::to_string(net_.head->outputs) + " scores for " +
                          std::to_string(class_names.size()) + " classes");
    }
    info_.class_names = std::move(class_names);
    info_.preprocessing = std::move(preprocessing);
    info_.differentiable = differentiable;
    info_.feature_pooling = net_.head->pooling == Pooling::GlobalAverage ? "global_average" : "flatten";
    std::size_t c = info_.preprocessing.channels, h = info_.preprocessing.height, w = info_.preprocessing.width;
    for (const auto& stage : net_.stages) {
        if (stage.in_channels != c) {
            throw ConfigError("stage '" + stage.id + "' channel mismatch");
        }
        if (info_.has_layer(stage.id)) {
            throw ConfigError("duplicate layer id '" + stage.id + "'");
        }
        c = stage.out_channels;
        if (stage.max_pool) {
            h /= 2;
            w /= 2;
        }
        info_.layers.push_back({stage.id, c, h, w});
    }
    // Default feature and saliency layers: the last convolutional stage.
    info_.feature_layer = feature_layer.empty() ? net_.stages.back().id : std::move(feature_layer);
    info_.saliency_layer = saliency_layer.empty() ? net_.stages.back().id : std::move(saliency_layer);
    if (!info_.has_layer(info_.feature_layer) || !info_.has_layer(info_.saliency_layer)) {
        throw ConfigError("feature/saliency layer must be one of the capturable layers");
    }
}

Tensor3 ConvNetClassifier::prepare(const Image& image) const { return info_.preprocessing.apply(image); }

std::vector<double> ConvNetClassifier::pool_features(const Tensor3& feature_activation) const {
    return head_pool(net_.head->pooling, feature_activation);
}

Prediction ConvNetClassifier::predict(const Image& image) const {
    const auto trace = net_.forward(prepare(image));
    require_finite(trace.scores, "class scores");
    return {argmax(trace.scores), trace.scores};
}

std::vector<ActivationTensor> ConvNetClassifier::capture_activations(const Image& image,
                                                                     std::span<const std::string> layer_ids) const {
    std::vector<std::size_t> indices;
    for (const auto& id : layer_ids) {
        indices.push_back(info_.layer_index(id));
    }
    const auto trace = net_.forward(prepare(image));
    std::vector<ActivationTensor> out;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        out.push_back({std::string(layer_ids[i]), trace.output_of(indices[i])});
    }
    return out;
}

std::vector<double> ConvNetClassifier::feature_vector(const Image& image) const {
    const auto trace = net_.forward(prepare(image));
    auto features = pool_features(trace.output_of(info_.layer_index(info_.feature_layer)));
    require_finite(features, "feature vector");
    return features;
}

Tensor3 ConvNetClassifier::class_gradient(const Image& image, std::size_t target_class,
                                          const std::string& layer_id) const {
    if (!info_.differentiable) {
        throw CapabilityError("backend does not provide gradients");
    }
    if (target_class >= info_.class_names.size()) {
        throw LookupError("target class " + std::to_string(target_class) + " out of range");
    }
    const std::size_t layer = info_.layer_index(layer_id);
    const auto trace = net_.forward(prepare(image));
    std::vector<double> d_scores(info_.class_names.size(), 0.0);
    d_scores[target_class] = 1.0;
    Tensor3 grad = net_.backward_head(trace, d_scores, nullptr);
    grad = net_.backward_stages(trace, std::move(grad), layer + 1, nullptr);
    require_finite(grad.values, "class gradient");
    return grad;
}

ImagePass ConvNetClassifier::run(const Image& image) const {
    const auto trace = net_.forward(prepare(image));
    ImagePass pass;
    require_finite(trace.scores, "class scores");
    pass.prediction = {argmax(trace.scores), trace.scores};
    pass.features = pool_features(trace.output_of(info_.layer_index(info_.feature_layer)));
    for (std::size_t i = 0; i < net_.stages.size(); ++i) {
        pass.activations.push_back({net_.stages[i].id, trace.output_of(i)});
    }
    return pass;
}

std::vector<double> ConvNetClassifier::scores_from_layer(const std::string& layer_id,
                                                         const Tensor3& activation) const {
    const std::size_t layer = info_.layer_index(layer_id);
    const auto& shape = info_.layers[layer];
    if (activation.channels != shape.channels || activation.height != shape.height || activation.width != shape.width) {
        throw RejectedInputError("activation shape does not match layer '" + layer_id + "'");
    }
    return net_.forward(activation, layer + 1).scores;
}

nlohmann::json ConvNetClassifier::checkpoint_json() const {
    return {{"format", kCheckpointFormat},
            {"version", kCheckpointVersion},
            {"class_names", info_.class_names},
            {"preprocessing", info_.preprocessing.to_json()},
            {"feature_layer", info_.feature_layer},
            {"saliency_layer", info_.saliency_layer},
            {"differentiable", info_.differentiable},
            {"network", net_.to_json()}};
}

void ConvNetClassifier::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw AuditError("cannot write checkpoint " + path.string());
    }
    out << checkpoint_json().dump() << '\n';
}

std::shared_ptr<const ConvNetClassifier> classifier_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != kCheckpointFormat) {
            throw ParseError("not a convnet checkpoint");
        }
        if (j.at("version").get<int>() != kCheckpointVersion) {
            throw VersionError("unsupported checkpoint version " + j.at("version").dump());
        }
        return std::make_shared<const ConvNetClassifier>(
            ConvNet::from_json(j.at("network")), j.at("class_names").get<std::vector<std::string>>(),
            Preprocessing::from_json(j.at("preprocessing")), j.value("feature_layer", ""),
            j.value("saliency_layer", ""), j.value("differentiable", true));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed checkpoint: ") + e.what());
    }
}

std::shared_ptr<const ConvNetClassifier> load_classifier(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw LookupError("cannot open checkpoint " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
    return classifier_from_json(j);
}

} // namespace cnnaudit
