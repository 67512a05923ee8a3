#include "cnnaudit/neuron_analysis.hpp"

#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <numeric>

namespace cnnaudit {

std::vector<double> channel_maxima(const Tensor3& activation) {
    std::vector<double> out(activation.channels, 0.0);
    for (std::size_t c = 0; c < activation.channels; ++c) {
        const auto plane = activation.channel(c);
        out[c] = plane.empty() ? 0.0 : *std::max_element(plane.begin(), plane.end());
    }
    return out;
}

std::vector<double> image_activation_values(const Classifier& model, const Image& image, const std::string& layer_id) {
    const std::string ids[] = {layer_id};
    return channel_maxima(model.capture_activations(image, ids).front().values);
}

std::vector<std::size_t> highly_activated_neurons(std::span<const double> values, double rate) {
    double total = 0.0;
    for (const double v : values) {
        total += std::max(v, 0.0);
    }
    if (total <= 0.0) {
        return {};
    }
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::max(values[a], 0.0) > std::max(values[b], 0.0); });
    const double limit = rate * total;
    std::vector<std::size_t> picked;
    double running = 0.0;
    for (const std::size_t c : order) {
        picked.push_back(c);
        running += std::max(values[c], 0.0);
        if (running > limit) {
            break;
        }
    }
    return picked;
}

const std::vector<double>& ActivationIndex::of(const std::string& image_id, std::size_t layer) const {
    const auto it = values.find(image_id);
    if (it == values.end()) {
        throw LookupError("no activation values for image '" + image_id + "'");
    }
    return it->second.at(layer);
}

std::size_t ActivationIndex::layer_index(const std::string& layer_id) const {
    const auto it = std::find(layers.begin(), layers.end(), layer_id);
    if (it == layers.end()) {
        throw LookupError("layer '" + layer_id + "' is not indexed");
    }
    return static_cast<std::size_t>(it - layers.begin());
}

std::vector<NeuronActivationScore> subgroup_scores(const ActivationIndex& index, std::size_t subgroup_id,
                                                   std::span<const std::string> member_ids, double rate) {
    if (member_ids.empty()) {
        throw ValidationError("cannot score an empty subgroup");
    }
    std::vector<NeuronActivationScore> out;
    for (std::size_t l = 0; l < index.layers.size(); ++l) {
        std::map<std::size_t, std::size_t> counts;
        for (const auto& id : member_ids) {
            for (const std::size_t c : highly_activated_neurons(index.of(id, l), rate)) {
                ++counts[c];
            }
        }
        for (const auto& [channel, count] : counts) {
            out.push_back({{index.layers[l], channel},
                           subgroup_id,
                           count,
                           static_cast<double>(count) / static_cast<double>(member_ids.size())});
        }
    }
    return out;
}

std::vector<NeuronActivationScore> subgroup_scores(const Classifier& model, const Subgroup& subgroup,
                                                   std::span<const std::string> layers, const ImageLoader& load,
                                                   double rate) {
    ActivationIndex index;
    index.layers.assign(layers.begin(), layers.end());
    for (const auto& id : subgroup.member_ids) {
        const auto captured = model.capture_activations(load(id), layers);
        auto& per_layer = index.values[id];
        for (const auto& a : captured) {
            per_layer.push_back(channel_maxima(a.values));
        }
    }
    return subgroup_scores(index, subgroup.subgroup_id, subgroup.member_ids, rate);
}

NeuronPartition partition(std::span<const NeuronActivationScore> under_scores,
                          std::span<const NeuronActivationScore> well_scores, double threshold,
                          std::span<const std::string> layer_order) {
    if (!(threshold >= kMinThreshold && threshold <= kMaxThreshold)) {
        throw ValidationError("threshold must lie in [0.5, 1.0]");
    }
    std::map<std::string, std::size_t> layer_rank;
    for (std::size_t i = 0; i < layer_order.size(); ++i) {
        layer_rank[layer_order[i]] = i;
    }
    const auto rank = [&](const NeuronRef& n) {
        const auto it = layer_rank.find(n.layer_id);
        if (it == layer_rank.end()) {
            throw LookupError("neuron layer '" + n.layer_id + "' is not in the layer order");
        }
        return std::make_pair(it->second, n.channel);
    };
    std::map<std::pair<std::size_t, std::size_t>, PartitionEntry> merged;
    for (const auto& s : under_scores) {
        auto& e = merged[rank(s.neuron)];
        e.neuron = s.neuron;
        e.score_under = s.score;
    }
    for (const auto& s : well_scores) {
        auto& e = merged[rank(s.neuron)];
        e.neuron = s.neuron;
        e.score_well = s.score;
    }
    NeuronPartition out;
    out.threshold = threshold;
    for (const auto& [key, e] : merged) {
        const bool under = e.score_under >= threshold;
        const bool well = e.score_well >= threshold;
        if (under && well) {
            out.both.push_back(e);
        } else if (under) {
            out.under_only.push_back(e);
        } else if (well) {
            out.well_only.push_back(e);
        }
    }
    return out;
}

} // namespace cnnaudit
