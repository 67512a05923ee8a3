#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cnnaudit {

/// N rows of D-dimensional feature vectors.
using FeatureMatrix = std::vector<std::vector<double>>;

enum class Linkage { Ward, KMeans };

std::string to_string(Linkage linkage);
Linkage parse_linkage(const std::string& text);

struct ClusteringConfig {
    std::size_t n_clusters = 0; // 0: default_cluster_count(N)
    std::uint64_t seed = 0;     // k-means only
    Linkage linkage = Linkage::Ward;
    std::size_t max_iterations = 100;
};

/// N/25 clamped to [10, 500], and never more than N.
std::size_t default_cluster_count(std::size_t n);

/// One cluster index per row. Cluster indices are numbered by first appearance
/// in row order, so identical inputs always yield identical labels.
std::vector<std::size_t> cluster_features(const FeatureMatrix& features, const ClusteringConfig& config);

/// K x K counts, rows = true label, columns = predicted label.
struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::size_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t k) : classes(k), counts(k * k, 0) {}

    std::size_t& at(std::size_t truth, std::size_t predicted) { return counts[truth * classes + predicted]; }
    std::size_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
    std::size_t trace() const;
    std::size_t total() const;
    bool operator==(const ConfusionMatrix&) const = default;
};

enum class SubgroupStatus { Underperforming, WellPerforming, Other };

std::string to_string(SubgroupStatus status);
SubgroupStatus parse_status(const std::string& text);

struct Subgroup {
    std::size_t subgroup_id = 0;
    std::vector<std::string> member_ids;
    double accuracy = 0.0;
    std::vector<double> embedding;
    ConfusionMatrix confusion;
    SubgroupStatus status = SubgroupStatus::Other;

    std::size_t size() const { return member_ids.size(); }
    bool operator==(const Subgroup&) const = default;
};

struct SubgroupPairing {
    std::size_t under_id = 0;
    std::size_t well_id = 0;
    double distance = 0.0;
    bool operator==(const SubgroupPairing&) const = default;
};

/// A classified image as seen by subgroup discovery.
struct PredictedRecord {
    std::string image_id;
    std::size_t true_label = 0;
    std::size_t predicted_label = 0;
};

ConfusionMatrix confusion_matrix(std::span<const std::string> member_ids,
                                 const std::map<std::string, PredictedRecord>& records, std::size_t classes);

/// Groups rows by cluster index; result is sorted by ascending accuracy (ties by id).
std::vector<Subgroup> build_subgroups(std::span<const std::size_t> assignment, std::span<const PredictedRecord> records,
                                      const FeatureMatrix& features, std::size_t classes);

struct SelectionConfig {
    double well_margin = 0.07;  // well-performing iff accuracy >= overall - margin
    std::size_t min_size = 5;   // smaller subgroups keep status Other
};

/// Underperforming iff accuracy < overall/2; well-performing iff accuracy >= overall - margin.
void select_underperforming(std::vector<Subgroup>& subgroups, double overall_accuracy,
                            const SelectionConfig& config = {});

double euclidean_distance(std::span<const double> a, std::span<const double> b);

/// Nearest well-performing subgroup by embedding distance; ties go to the lower id.
std::optional<SubgroupPairing> pair_with_well_performing(const Subgroup& target, std::span<const Subgroup> subgroups);

} // namespace cnnaudit
