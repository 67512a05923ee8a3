#pragma once

#include "cnnaudit/concept_patches.hpp"
#include "cnnaudit/model_backend.hpp"
#include "cnnaudit/neuron_analysis.hpp"
#include "cnnaudit/neuron_clustering.hpp"
#include "cnnaudit/subgroups.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cnnaudit {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kEmbedderFile = "embedder.ckpt";

struct ImageEntry {
    std::string image_id;
    std::size_t true_label = 0;
    std::size_t predicted_label = 0;
    std::vector<double> scores;
    std::map<std::string, bool> attributes;
    std::string thumbnail; // relative asset path, empty when not rendered
    bool operator==(const ImageEntry&) const = default;
};

struct SaliencyEntry {
    std::string image_id;
    std::size_t target_class = 0;
    std::string layer_id;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> heatmap; // raw layer-resolution map, row-major
    std::string overlay;        // relative path of the upsampled overlay PNG
    bool operator==(const SaliencyEntry&) const = default;
};

struct PairingScores {
    std::size_t under_id = 0;
    std::size_t well_id = 0;
    std::vector<NeuronActivationScore> under;
    std::vector<NeuronActivationScore> well;
    bool operator==(const PairingScores&) const = default;
};

struct EmbedderInfo {
    std::string checkpoint;
    std::size_t dimension = 0;
    std::vector<double> loss_curve;
    bool operator==(const EmbedderInfo&) const = default;
};

/// Everything the auditor UI displays for one pipeline run.
struct AuditArtifact {
    int schema_version = kSchemaVersion;
    nlohmann::json run_config = nlohmann::json::object();
    ClassifierInfo model;
    double overall_accuracy = 0.0;
    std::vector<ImageEntry> images;
    std::vector<Subgroup> subgroups;
    std::vector<SubgroupPairing> pairings;
    std::vector<SaliencyEntry> saliency;
    std::vector<PairingScores> neuron_scores;
    std::vector<NeuronConcept> concepts;
    std::vector<NeuronCluster> clusters;
    std::optional<EmbedderInfo> embedder;
    std::vector<std::string> notices;

    const ImageEntry* find_image(const std::string& image_id) const;
    const Subgroup* find_subgroup(std::size_t subgroup_id) const;
    const SubgroupPairing* find_pairing(std::size_t under_id) const;
    const PairingScores* find_scores(std::size_t under_id) const;
    const NeuronConcept* find_concept(const NeuronRef& neuron) const;
    std::vector<const SaliencyEntry*> find_saliency(const std::string& image_id) const;

    bool operator==(const AuditArtifact&) const = default;
};

std::string saliency_asset_path(const std::string& image_id, std::size_t target_class);
std::string patch_asset_path(const NeuronRef& neuron, const std::string& patch_id);
std::string thumbnail_asset_path(const std::string& image_id);

/// Directory layout recorded in every manifest.
nlohmann::json asset_layout();

nlohmann::json to_json(const AuditArtifact& artifact);
AuditArtifact artifact_from_json(const nlohmann::json& j);

/// Rounds every float in `j` to 6 significant digits.
void canonicalize_floats(nlohmann::json& j);

/// Canonical manifest text: sorted keys, 6-significant-digit floats.
std::string render_manifest(const AuditArtifact& artifact);

/// Referential integrity; asset files are checked against `directory` when given.
/// Throws ValidationError naming the first dangling reference.
void validate(const AuditArtifact& artifact, const std::optional<std::filesystem::path>& directory = std::nullopt);

/// Validates, then writes `manifest.json` into `directory`. Assets must already be in place.
std::filesystem::path save(const AuditArtifact& artifact, const std::filesystem::path& directory);

/// Accepts a manifest path or its directory.
AuditArtifact load(const std::filesystem::path& manifest);

} // namespace cnnaudit
