#include "cnnaudit/concept_patches.hpp"

#include "cnnaudit/encoding.hpp"
#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <random>
#include <set>

namespace cnnaudit {

long edge_gap(const Box& a, const Box& b) {
    const auto l = [](std::size_t v) { return static_cast<long>(v); };
    const long gap_x = std::max(l(b.left) - l(a.left + a.size), l(a.left) - l(b.left + b.size));
    const long gap_y = std::max(l(b.top) - l(a.top + a.size), l(a.top) - l(b.top + b.size));
    return std::max(gap_x, gap_y);
}

std::vector<Box> sample_masks(std::size_t height, std::size_t width, const MaskConfig& config, std::uint64_t seed) {
    if (config.size == 0 || height < config.size || width < config.size) {
        return {};
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> top_dist(0, height - config.size);
    std::uniform_int_distribution<std::size_t> left_dist(0, width - config.size);
    std::vector<Box> boxes;
    const auto separation = static_cast<long>(config.min_separation);
    for (std::size_t attempt = 0; attempt < config.retry_cap && boxes.size() < config.count; ++attempt) {
        const Box candidate{top_dist(rng), left_dist(rng), config.size};
        const bool clear = std::all_of(boxes.begin(), boxes.end(),
                                       [&](const Box& b) { return edge_gap(candidate, b) >= separation; });
        if (clear) {
            boxes.push_back(candidate);
        }
    }
    return boxes;
}

std::vector<std::string> top_activating_images(const NeuronRef& neuron, const ActivationIndex& index,
                                               std::size_t count) {
    const std::size_t layer = index.layer_index(neuron.layer_id);
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [id, per_layer] : index.values) {
        const auto& values = per_layer.at(layer);
        if (neuron.channel >= values.size()) {
            throw LookupError("channel " + std::to_string(neuron.channel) + " out of range for " + neuron.layer_id);
        }
        ranked.emplace_back(values[neuron.channel], id);
    }
    const auto better = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
    const std::size_t keep = std::min(count, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<long>(keep), ranked.end(), better);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < keep; ++i) {
        out.push_back(ranked[i].second);
    }
    return out;
}

std::vector<std::vector<double>> patch_activation(const Classifier& model, const Image& patch) {
    const auto ids = model.info().layer_ids();
    std::vector<std::vector<double>> out;
    for (const auto& a : model.capture_activations(patch, ids)) {
        out.push_back(channel_maxima(a.values));
    }
    return out;
}

std::string make_patch_id(const std::string& image_id, const Box& box) {
    return image_id + "_" + std::to_string(box.top) + "_" + std::to_string(box.left);
}

std::vector<ConceptPatch> select_top_patches(std::vector<ConceptPatch> candidates, std::size_t keep) {
    const auto better = [](const ConceptPatch& a, const ConceptPatch& b) {
        return a.activation != b.activation ? a.activation > b.activation : a.patch_id < b.patch_id;
    };
    keep = std::min(keep, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(keep), candidates.end(), better);
    candidates.resize(keep);
    return candidates;
}

ConceptBuild build_neuron_concepts(std::span<const NeuronRef> neurons, const Classifier& model,
                                   const ActivationIndex& index, const ImageLoader& load,
                                   const ConceptConfig& config) {
    ConceptBuild build;
    const auto& prep = model.info().preprocessing;
    std::map<std::string, std::vector<std::string>> patches_of_image;

    const auto ensure_image = [&](const std::string& image_id) -> const std::vector<std::string>& {
        auto it = patches_of_image.find(image_id);
        if (it != patches_of_image.end()) {
            return it->second;
        }
        auto& ids = patches_of_image[image_id];
        const Image input = prep.to_input_space(load(image_id));
        const auto boxes = sample_masks(input.height, input.width, config.masks, config.seed ^ fnv1a(image_id));
        if (boxes.empty()) {
            build.warnings.push_back("image '" + image_id + "' is smaller than a " +
                                     std::to_string(config.masks.size) + "px patch; skipped");
        }
        for (const auto& box : boxes) {
            CandidatePatch patch;
            patch.patch_id = make_patch_id(image_id, box);
            patch.source_image_id = image_id;
            patch.box = box;
            patch.pixels = crop(input, box.top, box.left, box.size, box.size);
            patch.activations = patch_activation(model, patch.pixels);
            ids.push_back(patch.patch_id);
            build.candidates.emplace(patch.patch_id, std::move(patch));
        }
        return ids;
    };

    for (const auto& neuron : neurons) {
        const std::size_t layer = model.info().layer_index(neuron.layer_id);
        std::vector<ConceptPatch> candidates;
        for (const auto& image_id : top_activating_images(neuron, index, config.top_images)) {
            for (const auto& patch_id : ensure_image(image_id)) {
                const auto& c = build.candidates.at(patch_id);
                candidates.push_back({c.patch_id, c.source_image_id, c.box, c.activations.at(layer).at(neuron.channel)});
            }
        }
        if (candidates.empty()) {
            build.warnings.push_back("neuron " + neuron.key() + " has no candidate patches");
        }
        build.concepts.push_back({neuron, select_top_patches(std::move(candidates), config.patches_per_neuron)});
    }
    return build;
}

} // namespace cnnaudit
