#pragma once

#include "cnnaudit/audit_store.hpp"
#include "cnnaudit/dataset.hpp"
#include "cnnaudit/model_backend.hpp"
#include "cnnaudit/pipeline.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace cnnaudit {

/// Two-class synthetic shapes ("square" = 0, "circle" = 1) on a red or blue
/// background. The background colour is the spurious attribute.
struct ShapesConfig {
    std::size_t train_pool = 1800; // before bias subsampling
    std::size_t audit = 1000;
    std::size_t image_size = 32;
    double train_cooccurrence = 0.9; // red with circle, blue with square
    std::uint64_t seed = 7;
};

inline const std::vector<std::string> kShapeClasses = {"square", "circle"};
inline constexpr const char* kSpuriousAttribute = "red";

Image render_shape(std::size_t label, bool red, std::size_t size, std::mt19937_64& rng);

struct ShapesDataset {
    std::filesystem::path manifest;
    std::size_t train_images = 0;
    std::size_t audit_images = 0;
    double train_cooccurrence = 0.0; // red within circle
    double audit_cooccurrence = 0.0;
};

/// Writes PNGs and `manifest.csv` under `directory`.
ShapesDataset generate_shapes(const std::filesystem::path& directory, const ShapesConfig& config);

struct ClassifierTraining {
    std::size_t epochs = 6;
    double learning_rate = 0.02;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::uint64_t seed = 11;
};

struct TrainingReport {
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;
};

/// Small three-stage CNN trained with softmax cross-entropy on the train split.
ConvNetClassifier train_demo_classifier(const Dataset& dataset, const ClassifierTraining& config,
                                        TrainingReport* report = nullptr, std::size_t threads = 0);

struct DemoConfig {
    std::filesystem::path output_dir;
    ShapesConfig shapes;
    ClassifierTraining training;
    PipelineConfig pipeline = desk_scale_profile();
};

struct DemoResult {
    ShapesDataset dataset;
    std::filesystem::path model;
    std::filesystem::path manifest;
    TrainingReport training;
    double seconds = 0.0;
};

/// Dataset -> classifier -> audit, all under `output_dir` (data/, model.json, artifact/).
DemoResult run_demo(const DemoConfig& config, const ProgressLog& log = {});

struct SubgroupPurity {
    std::size_t subgroup_id = 0;
    std::size_t size = 0;
    std::size_t label = 0;  // dominant (true label, attribute) combination
    bool attribute = false;
    double purity = 0.0;    // share of members with that combination
};

/// Dominant label/attribute combination of every underperforming subgroup.
std::vector<SubgroupPurity> underperforming_purity(const AuditArtifact& artifact, const std::string& attribute);

} // namespace cnnaudit
