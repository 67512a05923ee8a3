#pragma once

#include "cnnaudit/model_backend.hpp"
#include "cnnaudit/subgroups.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace cnnaudit {

inline constexpr double kHighActivationRate = 0.03;
inline constexpr double kMinThreshold = 0.5;
inline constexpr double kMaxThreshold = 1.0;

/// Per-channel maximum over spatial positions.
std::vector<double> channel_maxima(const Tensor3& activation);

std::vector<double> image_activation_values(const Classifier& model, const Image& image, const std::string& layer_id);

/// Channels taken in descending value order (ties: lower index) until the running
/// sum first exceeds rate * layer total. Negative values count as zero. Empty when
/// the total is zero.
std::vector<std::size_t> highly_activated_neurons(std::span<const double> values, double rate = kHighActivationRate);

/// Per-image activation values for every audited layer: image_id -> layer -> channel values.
struct ActivationIndex {
    std::vector<std::string> layers; // input -> output
    std::map<std::string, std::vector<std::vector<double>>> values;

    const std::vector<double>& of(const std::string& image_id, std::size_t layer) const;
    std::size_t layer_index(const std::string& layer_id) const;
};

struct NeuronActivationScore {
    NeuronRef neuron;
    std::size_t subgroup_id = 0;
    std::size_t count = 0; // members with this neuron highly activated
    double score = 0.0;    // count / |subgroup|
    bool operator==(const NeuronActivationScore&) const = default;
};

/// Scores for every neuron highly activated by at least one member, ordered by
/// (layer, channel). Neurons never highly activated are omitted.
std::vector<NeuronActivationScore> subgroup_scores(const ActivationIndex& index, std::size_t subgroup_id,
                                                   std::span<const std::string> member_ids,
                                                   double rate = kHighActivationRate);

using ImageLoader = std::function<Image(const std::string& image_id)>;

/// Same, running the model over the members.
std::vector<NeuronActivationScore> subgroup_scores(const Classifier& model, const Subgroup& subgroup,
                                                   std::span<const std::string> layers, const ImageLoader& load,
                                                   double rate = kHighActivationRate);

struct PartitionEntry {
    NeuronRef neuron;
    double score_under = 0.0;
    double score_well = 0.0;
    bool operator==(const PartitionEntry&) const = default;
};

struct NeuronPartition {
    double threshold = kMinThreshold;
    std::vector<PartitionEntry> under_only; // each column ordered by layer (input -> output), then channel
    std::vector<PartitionEntry> both;
    std::vector<PartitionEntry> well_only;

    std::size_t size() const { return under_only.size() + both.size() + well_only.size(); }
};

/// Splits neurons into under-only / both / well-only columns at `threshold` in [0.5, 1].
NeuronPartition partition(std::span<const NeuronActivationScore> under_scores,
                          std::span<const NeuronActivationScore> well_scores, double threshold,
                          std::span<const std::string> layer_order);

} // namespace cnnaudit
