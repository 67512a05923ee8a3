#pragma once

#include "cnnaudit/audit_store.hpp"
#include "cnnaudit/concept_patches.hpp"
#include "cnnaudit/dataset.hpp"
#include "cnnaudit/errors.hpp"
#include "cnnaudit/neuron_clustering.hpp"
#include "cnnaudit/subgroups.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

namespace cnnaudit {

struct AnalysisConstants {
    double activation_rate = 0.03;
    double threshold_default = 0.5;
    std::size_t top_images = 10;
    std::size_t patches_per_neuron = 10;
    MaskConfig masks; // 32 masks, 30 px, 5 px apart, 1000 retries
    std::size_t positive_pairs = 10000;
    std::size_t negative_pairs = 10000;
    EmbedderTrainingConfig embedder; // 10 epochs, lr 1e-4, batch 64
    double cluster_threshold = 0.9;
    std::size_t exemplars_per_cluster = 10;
};

struct Seeds {
    std::uint64_t clustering = 0;
    std::uint64_t masks = 1;
    std::uint64_t pairs = 2;
    std::uint64_t training = 3;
    std::uint64_t clusters = 4;
};

struct PipelineConfig {
    std::filesystem::path model_path;
    std::filesystem::path dataset_path;
    std::filesystem::path output_dir;
    std::optional<BiasSpec> bias; // recorded for provenance; applied by `audit demo` to the train split
    ClusteringConfig clustering;
    SelectionConfig selection;
    AnalysisConstants analysis;
    Seeds seeds;
    bool saliency_for_true_class = true;
    bool resume = false;
    std::size_t threads = 0; // 0: hardware concurrency

    /// Throws ConfigError when a constant is outside its documented range.
    void validate() const;
};

nlohmann::json to_json(const PipelineConfig& config);
/// Overlays the keys present in `j` onto `base`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});
/// Same defaults with the embedder trained on 500 + 500 pairs.
PipelineConfig desk_scale_profile(PipelineConfig config = {});

/// Reads a JSON or YAML config file into a json object.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Raised when a pipeline stage fails; names the stage.
class StageError : public AuditError {
public:
    StageError(std::string stage, const std::string& cause)
        : AuditError("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

using ProgressLog = std::function<void(const std::string&)>;

/// Runs the full audit and writes the artifact into config.output_dir.
/// Stage timings go to `timings.json` beside the manifest (the manifest itself is
/// deterministic). Intermediates are cached under `cache/` for --resume.
std::filesystem::path run_audit(const PipelineConfig& config, const ProgressLog& log = {});

/// Index-parallel loop; results must be written to per-index slots.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& body);

} // namespace cnnaudit
