#pragma once

#include "cnnaudit/model_backend.hpp"
#include "cnnaudit/neuron_analysis.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cnnaudit {

/// Square crop in network-input pixel coordinates.
struct Box {
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t size = 0;
    auto operator<=>(const Box&) const = default;
};

/// Largest axis-aligned gap between the edges of two boxes (negative when they overlap on both axes).
long edge_gap(const Box& a, const Box& b);

struct MaskConfig {
    std::size_t count = 32;
    std::size_t size = 30;
    std::size_t min_separation = 5;
    std::size_t retry_cap = 1000;
};

/// Seeded rejection sampling of up to `count` boxes whose pairwise edge gap is at
/// least `min_separation` on some axis. Returns fewer boxes when the image cannot
/// host more within the retry cap, and none when it is smaller than a box.
std::vector<Box> sample_masks(std::size_t height, std::size_t width, const MaskConfig& config, std::uint64_t seed);

/// The `count` images with the highest value for `neuron`; ties by image_id.
std::vector<std::string> top_activating_images(const NeuronRef& neuron, const ActivationIndex& index,
                                               std::size_t count = 10);

/// Per-layer channel maxima for a patch fed to the model on its own
/// (resized to the input resolution with the model's preprocessing).
std::vector<std::vector<double>> patch_activation(const Classifier& model, const Image& patch);

struct ConceptPatch {
    std::string patch_id;
    std::string source_image_id;
    Box box;
    double activation = 0.0; // induced in the owning neuron
    bool operator==(const ConceptPatch&) const = default;
};

struct NeuronConcept {
    NeuronRef neuron;
    std::vector<ConceptPatch> patches; // descending activation, ties by patch_id
    bool operator==(const NeuronConcept&) const = default;
};

struct CandidatePatch {
    std::string patch_id;
    std::string source_image_id;
    Box box;
    Image pixels;                                  // input-space crop, values in [0,1]
    std::vector<std::vector<double>> activations;  // layer -> channel
};

struct ConceptConfig {
    std::size_t top_images = 10;
    std::size_t patches_per_neuron = 10;
    MaskConfig masks;
    std::uint64_t seed = 0;
};

struct ConceptBuild {
    std::vector<NeuronConcept> concepts;                  // one per requested neuron, same order
    std::map<std::string, CandidatePatch> candidates;     // every evaluated patch by id
    std::vector<std::string> warnings;
};

std::string make_patch_id(const std::string& image_id, const Box& box);

/// Keeps the `keep` highest-activation candidates; ties by patch_id.
std::vector<ConceptPatch> select_top_patches(std::vector<ConceptPatch> candidates, std::size_t keep);

ConceptBuild build_neuron_concepts(std::span<const NeuronRef> neurons, const Classifier& model,
                                   const ActivationIndex& index, const ImageLoader& load,
                                   const ConceptConfig& config);

} // namespace cnnaudit
