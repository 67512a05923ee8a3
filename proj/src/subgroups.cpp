#include "cnnaudit/subgroups.hpp"

#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace cnnaudit {

std::string to_string(Linkage linkage) { return linkage == Linkage::Ward ? "ward" : "kmeans"; }

Linkage parse_linkage(const std::string& text) {
    if (text == "ward") {
        return Linkage::Ward;
    }
    if (text == "kmeans") {
        return Linkage::KMeans;
    }
    throw ConfigError("unknown linkage '" + text + "' (expected ward or kmeans)");
}

std::string to_string(SubgroupStatus status) {
    switch (status) {
    case SubgroupStatus::Underperforming:
        return "underperforming";
    case SubgroupStatus::WellPerforming:
        return "well_performing";
    case SubgroupStatus::Other:
        break;
    }
    return "other";
}

SubgroupStatus parse_status(const std::string& text) {
    if (text == "underperforming") {
        return SubgroupStatus::Underperforming;
    }
    if (text == "well_performing") {
        return SubgroupStatus::WellPerforming;
    }
    if (text == "other") {
        return SubgroupStatus::Other;
    }
    throw ParseError("unknown subgroup status '" + text + "'");
}

std::size_t default_cluster_count(std::size_t n) {
    return std::min(n, std::clamp<std::size_t>(n / 25, 10, 500));
}

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return sum;
}

std::vector<std::size_t> canonical_labels(std::span<const std::size_t> raw) {
    std::vector<std::size_t> remap(raw.empty() ? 0 : *std::max_element(raw.begin(), raw.end()) + 1,
                                   std::numeric_limits<std::size_t>::max());
    std::vector<std::size_t> out(raw.size());
    std::size_t next = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (remap[raw[i]] == std::numeric_limits<std::size_t>::max()) {
            remap[raw[i]] = next++;
        }
        out[i] = remap[raw[i]];
    }
    return out;
}

struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) {
            parent[std::max(a, b)] = std::min(a, b);
        }
    }
};

// Ward linkage via the nearest-neighbour chain with Lance-Williams updates on
// squared Euclidean distances; the dendrogram is cut at `k` clusters.
std::vector<std::size_t> ward_clusters(const FeatureMatrix& x, std::size_t k) {
    const std::size_t n = x.size();
    const auto index = [n](std::size_t i, std::size_t j) {
        if (i > j) {
            std::swap(i, j);
        }
        return i * n - i * (i + 1) / 2 + (j - i - 1);
    };
    std::vector<double> dist(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            dist[index(i, j)] = squared_distance(x[i], x[j]);
        }
    }
    std::vector<double> size(n, 1.0);
    std::vector<char> active(n, 1);

    struct Merge {
        double height;
        std::size_t a, b;
    };
    std::vector<Merge> merges;
    merges.reserve(n - 1);
    std::vector<std::size_t> chain;
    std::size_t first_active = 0;

    while (merges.size() + 1 < n) {
        if (chain.empty()) {
            while (!active[first_active]) {
                ++first_active;
            }
            chain.push_back(first_active);
        }
        while (true) {
            const std::size_t a = chain.back();
            const bool has_prev = chain.size() >= 2;
            std::size_t best = has_prev ? chain[chain.size() - 2] : n;
            double best_d = has_prev ? dist[index(a, best)] : std::numeric_limits<double>::infinity();
            for (std::size_t b = 0; b < n; ++b) {
                if (b == a || !active[b]) {
                    continue;
                }
                const double d = dist[index(a, b)];
                if (d < best_d) {
                    best_d = d;
                    best = b;
                }
            }
            if (has_prev && best == chain[chain.size() - 2]) {
                chain.pop_back();
                chain.pop_back();
                const std::size_t keep = std::min(a, best), drop = std::max(a, best);
                merges.push_back({best_d, keep, drop});
                const double na = size[keep], nb = size[drop];
                for (std::size_t c = 0; c < n; ++c) {
                    if (!active[c] || c == keep || c == drop) {
                        continue;
                    }
                    const double nc = size[c];
                    dist[index(c, keep)] =
                        ((na + nc) * dist[index(c, keep)] + (nb + nc) * dist[index(c, drop)] - nc * best_d) /
                        (na + nb + nc);
                }
                size[keep] = na + nb;
                active[drop] = 0;
                break;
            }
            chain.push_back(best);
        }
    }

    std::stable_sort(merges.begin(), merges.end(), [](const Merge& l, const Merge& r) { return l.height < r.height; });
    DisjointSets sets(n);
    for (std::size_t m = 0; m + k < n; ++m) {
        sets.unite(merges[m].a, merges[m].b);
    }
    std::vector<std::size_t> roots(n);
    for (std::size_t i = 0; i < n; ++i) {
        roots[i] = sets.find(i);
    }
    return canonical_labels(roots);
}

std::vector<std::size_t> kmeans_clusters(const FeatureMatrix& x, std::size_t k, std::uint64_t seed,
                                         std::size_t max_iterations) {
    const std::size_t n = x.size();
    const std::size_t d = x.front().size();
    std::mt19937_64 rng(seed);

    // k-means++ seeding
    FeatureMatrix centers;
    centers.push_back(x[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    while (centers.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            nearest[i] = std::min(nearest[i], squared_distance(x[i], centers.back()));
            total += nearest[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (pick = 0; pick + 1 < n; ++pick) {
                r -= nearest[pick];
                if (r < 0.0) {
                    break;
                }
            }
        } else {
            pick = centers.size() % n;
        }
        centers.push_back(x[pick]);
    }

    std::vector<std::size_t> assign(n, 0);
    for (std::size_t iter = 0; iter < max_iterations; ++iter) {
        bool changed = iter == 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = squared_distance(x[i], centers[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double dd = squared_distance(x[i], centers[c]);
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        std::vector<std::size_t> counts(k, 0);
        FeatureMatrix sums(k, std::vector<double>(d, 0.0));
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[assign[i]];
            for (std::size_t j = 0; j < d; ++j) {
                sums[assign[i]][j] += x[i][j];
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // Re-seed an empty cluster with the point farthest from its centre.
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (counts[assign[i]] <= 1) {
                        continue;
                    }
                    const double dd = squared_distance(x[i], centers[assign[i]]);
                    if (dd > far_d) {
                        far_d = dd;
                        far = i;
                    }
                }
                --counts[assign[far]];
                assign[far] = c;
                counts[c] = 1;
                centers[c] = x[far];
                changed = true;
                continue;
            }
            for (std::size_t j = 0; j < d; ++j) {
                centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
            }
        }
        if (!changed) {
            break;
        }
    }
    return canonical_labels(assign);
}

} // namespace

std::vector<std::size_t> cluster_features(const FeatureMatrix& features, const ClusteringConfig& config) {
    const std::size_t n = features.size();
    const std::size_t k = config.n_clusters == 0 ? default_cluster_count(n) : config.n_clusters;
    if (k < 1 || n < k) {
        throw ConfigError("cannot form " + std::to_string(k) + " clusters from " + std::to_string(n) + " images");
    }
    for (const auto& row : features) {
        if (row.size() != features.front().size()) {
            throw ConfigError("feature rows have inconsistent lengths");
        }
        for (const double v : row) {
            if (!std::isfinite(v)) {
                throw ConfigError("feature matrix contains non-finite values");
            }
        }
    }
    if (k == 1) {
        return std::vector<std::size_t>(n, 0);
    }
    if (k == n) {
        std::vector<std::size_t> out(n);
        std::iota(out.begin(), out.end(), std::size_t{0});
        return out;
    }
    return config.linkage == Linkage::Ward ? ward_clusters(features, k)
                                           : kmeans_clusters(features, k, config.seed, config.max_iterations);
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < classes; ++i) {
        t += at(i, i);
    }
    return t;
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

ConfusionMatrix confusion_matrix(std::span<const std::string> member_ids,
                                 const std::map<std::string, PredictedRecord>& records, std::size_t classes) {
    ConfusionMatrix m(classes);
    for (const auto& id : member_ids) {
        const auto it = records.find(id);
        if (it == records.end()) {
            throw LookupError("subgroup member '" + id + "' has no prediction");
        }
        if (it->second.true_label >= classes || it->second.predicted_label >= classes) {
            throw ValidationError("label out of range for image '" + id + "'");
        }
        ++m.at(it->second.true_label, it->second.predicted_label);
    }
    return m;
}

std::vector<Subgroup> build_subgroups(std::span<const std::size_t> assignment, std::span<const PredictedRecord> records,
                                      const FeatureMatrix& features, std::size_t classes) {
    if (assignment.size() != records.size() || records.size() != features.size()) {
        throw ValidationError("assignment, record and feature counts differ (" + std::to_string(assignment.size()) +
                              ", " + std::to_string(records.size()) + ", " + std::to_string(features.size()) + ")");
    }
    std::map<std::size_t, Subgroup> groups;
    std::map<std::size_t, std::vector<double>> sums;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& g = groups[assignment[i]];
        if (g.member_ids.empty()) {
            g.subgroup_id = assignment[i];
            g.confusion = ConfusionMatrix(classes);
            sums[assignment[i]].assign(features[i].size(), 0.0);
        }
        g.member_ids.push_back(records[i].image_id);
        if (records[i].true_label >= classes || records[i].predicted_label >= classes) {
            throw ValidationError("label out of range for image '" + records[i].image_id + "'");
        }
        ++g.confusion.at(records[i].true_label, records[i].predicted_label);
        auto& sum = sums[assignment[i]];
        for (std::size_t j = 0; j < sum.size(); ++j) {
            sum[j] += features[i][j];
        }
    }
    std::vector<Subgroup> out;
    for (auto& [id, g] : groups) {
        const double n = static_cast<double>(g.member_ids.size());
        g.accuracy = static_cast<double>(g.confusion.trace()) / n;
        g.embedding = sums[id];
        for (auto& v : g.embedding) {
            v /= n;
        }
        out.push_back(std::move(g));
    }
    std::stable_sort(out.begin(), out.end(), [](const Subgroup& a, const Subgroup& b) {
        return a.accuracy != b.accuracy ? a.accuracy < b.accuracy : a.subgroup_id < b.subgroup_id;
    });
    return out;
}

void select_underperforming(std::vector<Subgroup>& subgroups, double overall_accuracy, const SelectionConfig& config) {
    for (auto& g : subgroups) {
        if (g.size() < config.min_size) {
            g.status = SubgroupStatus::Other;
        } else if (g.accuracy < overall_accuracy / 2.0) {
            g.status = SubgroupStatus::Underperforming;
        } else if (g.accuracy >= overall_accuracy - config.well_margin) {
            g.status = SubgroupStatus::WellPerforming;
        } else {
            g.status = SubgroupStatus::Other;
        }
    }
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ValidationError("embedding lengths differ");
    }
    return std::sqrt(squared_distance(a, b));
}

std::optional<SubgroupPairing> pair_with_well_performing(const Subgroup& target, std::span<const Subgroup> subgroups) {
    std::optional<SubgroupPairing> best;
    for (const auto& g : subgroups) {
        if (g.status != SubgroupStatus::WellPerforming || g.subgroup_id == target.subgroup_id) {
            continue;
        }
        const double d = euclidean_distance(target.embedding, g.embedding);
        if (!best || d < best->distance || (d == best->distance && g.subgroup_id < best->well_id)) {
            best = SubgroupPairing{target.subgroup_id, g.subgroup_id, d};
        }
    }
    return best;
}

} // namespace cnnaudit
