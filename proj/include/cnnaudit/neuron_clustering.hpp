#pragma once

#include "cnnaudit/concept_patches.hpp"
#include "cnnaudit/convnet.hpp"
#include "cnnaudit/model_backend.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cnnaudit {

struct PatchPair {
    std::string patch_a;
    std::string patch_b;
    NeuronRef owner_a;
    NeuronRef owner_b;
    bool same_neuron = false;
    bool operator==(const PatchPair&) const = default;
};

/// Exactly n_pos same-neuron and n_neg cross-neuron pairs (positives first).
/// Draws without replacement when the pool is large enough, with replacement otherwise.
/// Cross-neuron pairs never pair a patch with itself.
std::vector<PatchPair> sample_pairs(std::span<const NeuronConcept> concepts, std::size_t n_pos, std::size_t n_neg,
                                    std::uint64_t seed);

inline constexpr double kLossEpsilon = 1e-7;

/// -log(clamp(a.b, eps, 1)) for same-neuron pairs, -log(clamp(1 - a.b, eps, 1)) otherwise.
double pair_loss(std::span<const double> a, std::span<const double> b, bool same_neuron);

/// d loss / d (a.b), zero where the clamp is active.
double pair_loss_slope(double dot, bool same_neuron);

double dot(std::span<const double> a, std::span<const double> b);

/// Classifier backbone (convolutional stages) followed by global average pooling
/// and L2 normalisation; maps a patch to a unit vector of the feature width.
class PatchEmbedder {
public:
    PatchEmbedder(ConvNet backbone, Preprocessing preprocessing);

    /// Copies the classifier's stages; the classification head is dropped.
    static PatchEmbedder from_classifier(const ConvNetClassifier& classifier);

    std::vector<double> embed(const Image& patch) const;
    std::size_t dimension() const { return backbone_.stages.back().out_channels; }

    const ConvNet& backbone() const { return backbone_; }
    ConvNet& backbone() { return backbone_; }
    const Preprocessing& preprocessing() const { return preprocessing_; }

    nlohmann::json checkpoint_json() const;
    static PatchEmbedder from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;

private:
    ConvNet backbone_;
    Preprocessing preprocessing_;
};

struct EmbedderTrainingConfig {
    std::size_t epochs = 10;
    double learning_rate = 1e-4;
    std::size_t batch_size = 64;
    double weight_decay = 0.0;
    bool shuffle = true;
    std::uint64_t seed = 0;
};

struct EmbedderTrainingResult {
    PatchEmbedder model;
    std::vector<double> loss_curve; // [0] at initialisation, then after each epoch
};

using PatchLookup = std::function<const Image&(const std::string& patch_id)>;

/// Mean pair loss of `model` over `pairs`.
double mean_pair_loss(const PatchEmbedder& model, std::span<const PatchPair> pairs, const PatchLookup& patches);

/// Minibatch SGD on the mean pair loss. Throws AuditError if the loss becomes non-finite.
EmbedderTrainingResult train_embedder(std::span<const PatchPair> pairs, PatchEmbedder init,
                                      const PatchLookup& patches, const EmbedderTrainingConfig& config);

struct NeuronCluster {
    std::size_t cluster_id = 0;
    std::vector<NeuronRef> member_neurons;
    std::vector<std::string> exemplar_patch_ids;
    bool operator==(const NeuronCluster&) const = default;
};

struct ClusterAssignmentConfig {
    double threshold = 0.9;
    std::size_t exemplars_per_cluster = 10;
    std::uint64_t seed = 0;
};

/// Processing order: descending max activation score, then layer position, then channel.
std::vector<NeuronRef> clustering_order(std::span<const NeuronConcept> concepts,
                                        const std::map<NeuronRef, double>& max_scores,
                                        std::span<const std::string> layer_order);

/// Incremental assignment: a neuron joins the cluster with the highest mean inner
/// product between its patch vectors and the cluster's exemplar vectors when that
/// value exceeds the threshold (ties: earlier cluster), otherwise it starts a new one.
/// Neurons without patches are skipped.
std::vector<NeuronCluster> assign_clusters(std::span<const NeuronConcept> concepts, std::span<const NeuronRef> order,
                                           const std::map<std::string, std::vector<double>>& patch_vectors,
                                           const ClusterAssignmentConfig& config);

struct ClusterMembership {
    std::size_t cluster_id = 0;
    std::vector<NeuronRef> co_members;
};

/// Cluster of `neuron` and its other members; nullopt when it was not clustered.
std::optional<ClusterMembership> cluster_of(std::span<const NeuronCluster> clusters, const NeuronRef& neuron);

} // namespace cnnaudit
