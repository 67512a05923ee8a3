#include "cnnaudit/neuron_clustering.hpp"

#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace cnnaudit {

namespace {

// Pair pool made of contiguous blocks; each block enumerates the pairs of one
// neuron (positives) or of one neuron pair (negatives).
struct PairBlock {
    std::size_t first;  // concept index
    std::size_t second; // concept index (== first for positives)
    std::size_t count;
};

PatchPair decode(std::span<const NeuronConcept> concepts, const PairBlock& block, std::size_t offset) {
    const auto& a = concepts[block.first];
    const auto& b = concepts[block.second];
    if (block.first == block.second) {
        const std::size_t m = a.patches.size();
        std::size_t i = 0;
        while (offset >= m - 1 - i) {
            offset -= m - 1 - i;
            ++i;
        }
        return {a.patches[i].patch_id, a.patches[i + 1 + offset].patch_id, a.neuron, a.neuron, true};
    }
    const std::size_t mb = b.patches.size();
    return {a.patches[offset / mb].patch_id, b.patches[offset % mb].patch_id, a.neuron, b.neuron, false};
}

std::vector<PatchPair> draw_pairs(std::span<const NeuronConcept> concepts, const std::vector<PairBlock>& blocks,
                                  std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> starts;
    std::size_t pool = 0;
    for (const auto& b : blocks) {
        starts.push_back(pool);
        pool += b.count;
    }
    std::vector<PatchPair> out;
    if (n == 0) {
        return out;
    }
    std::uniform_int_distribution<std::size_t> dist(0, pool - 1);
    bool unique = pool >= n;
    std::set<std::size_t> used;
    std::size_t attempts = 0;
    const std::size_t cap = 100 * n + 1000;
    while (out.size() < n) {
        if (++attempts > cap) {
            if (!unique) {
                throw ConfigError("no valid patch pairs could be sampled");
            }
            unique = false;
            attempts = 0;
        }
        const std::size_t idx = dist(rng);
        const auto block = static_cast<std::size_t>(std::upper_bound(starts.begin(), starts.end(), idx) - starts.begin()) - 1;
        PatchPair pair = decode(concepts, blocks[block], idx - starts[block]);
        if (!pair.same_neuron && pair.patch_a == pair.patch_b) {
            continue;
        }
        if (unique && !used.insert(idx).second) {
            continue;
        }
        out.push_back(std::move(pair));
    }
    return out;
}

struct PatchForward {
    ForwardTrace trace;
    std::vector<double> raw; // pooled features before normalisation
    std::vector<double> unit;
    double norm = 0.0;
};

constexpr double kMinNorm = 1e-12;

PatchForward forward_patch(const ConvNet& backbone, const Preprocessing& prep, const Image& patch) {
    PatchForward f;
    f.trace = backbone.forward(prep.apply(patch));
    f.raw = global_average_pool(f.trace.last_output());
    double sq = 0.0;
    for (const double v : f.raw) {
        sq += v * v;
    }
    f.norm = std::sqrt(sq);
    f.unit.resize(f.raw.size());
    if (f.norm < kMinNorm) {
        // Dead features: fall back to a fixed unit vector (no gradient flows).
        std::fill(f.unit.begin(), f.unit.end(), 1.0 / std::sqrt(static_cast<double>(f.raw.size())));
    } else {
        for (std::size_t i = 0; i < f.raw.size(); ++i) {
            f.unit[i] = f.raw[i] / f.norm;
        }
    }
    return f;
}

void require_unit(std::span<const double> v) {
    if (std::abs(std::sqrt(dot(v, v)) - 1.0) > 1e-6) {
        throw ValidationError("pair_loss expects unit-norm vectors");
    }
}

} // namespace

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ValidationError("vector lengths differ");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

std::vector<PatchPair> sample_pairs(std::span<const NeuronConcept> concepts, std::size_t n_pos, std::size_t n_neg,
                                    std::uint64_t seed) {
    std::vector<PairBlock> positives, negatives;
    std::vector<std::size_t> populated;
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        const std::size_t m = concepts[i].patches.size();
        if (m >= 2) {
            positives.push_back({i, i, m * (m - 1) / 2});
        }
        if (m >= 1) {
            populated.push_back(i);
        }
    }
    for (std::size_t a = 0; a < populated.size(); ++a) {
        for (std::size_t b = a + 1; b < populated.size(); ++b) {
            negatives.push_back({populated[a], populated[b],
                                 concepts[populated[a]].patches.size() * concepts[populated[b]].patches.size()});
        }
    }
    if (populated.empty()) {
        throw ConfigError("cannot sample patch pairs from an empty concept set");
    }
    if (n_pos > 0 && positives.empty()) {
        throw ConfigError("same-neuron pairs need a neuron with at least two patches");
    }
    if (n_neg > 0 && negatives.empty()) {
        throw ConfigError("cross-neuron pairs need at least two neurons with patches");
    }
    std::mt19937_64 rng(seed);
    auto pairs = draw_pairs(concepts, positives, n_pos, rng);
    auto neg = draw_pairs(concepts, negatives, n_neg, rng);
    pairs.insert(pairs.end(), std::make_move_iterator(neg.begin()), std::make_move_iterator(neg.end()));
    return pairs;
}

double pair_loss(std::span<const double> a, std::span<const double> b, bool same_neuron) {
    require_unit(a);
    require_unit(b);
    const double d = dot(a, b);
    const double arg = same_neuron ? d : 1.0 - d;
    return -std::log(std::clamp(arg, kLossEpsilon, 1.0));
}

double pair_loss_slope(double d, bool same_neuron) {
    const double arg = same_neuron ? d : 1.0 - d;
    if (arg <= kLossEpsilon || arg >= 1.0) {
        return 0.0;
    }
    return same_neuron ? -1.0 / arg : 1.0 / arg;
}

PatchEmbedder::PatchEmbedder(ConvNet backbone, Preprocessing preprocessing)
    : backbone_(std::move(backbone)), preprocessing_(std::move(preprocessing)) {
    backbone_.head.reset();
    if (backbone_.stages.empty()) {
        throw ConfigError("embedder backbone has no stages");
    }
}

PatchEmbedder PatchEmbedder::from_classifier(const ConvNetClassifier& classifier) {
    return PatchEmbedder(classifier.network(), classifier.info().preprocessing);
}

std::vector<double> PatchEmbedder::embed(const Image& patch) const {
    return forward_patch(backbone_, preprocessing_, patch).unit;
}

nlohmann::json PatchEmbedder::checkpoint_json() const {
    return {{"format", "cnnaudit.embedder"},
            {"version", 1},
            {"preprocessing", preprocessing_.to_json()},
            {"normalize", "l2"},
            {"pooling", "global_average"},
            {"network", backbone_.to_json()}};
}

PatchEmbedder PatchEmbedder::from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "cnnaudit.embedder") {
            throw ParseError("not an embedder checkpoint");
        }
        return PatchEmbedder(ConvNet::from_json(j.at("network")), Preprocessing::from_json(j.at("preprocessing")));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed embedder checkpoint: ") + e.what());
    }
}

void PatchEmbedder::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw AuditError("cannot write embedder checkpoint " + path.string());
    }
    out << checkpoint_json().dump() << '\n';
}

double mean_pair_loss(const PatchEmbedder& model, std::span<const PatchPair> pairs, const PatchLookup& patches) {
    if (pairs.empty()) {
        throw ConfigError("no pairs to evaluate");
    }
    std::map<std::string, std::vector<double>> vectors;
    const auto vec = [&](const std::string& id) -> const std::vector<double>& {
        auto it = vectors.find(id);
        if (it == vectors.end()) {
            it = vectors.emplace(id, model.embed(patches(id))).first;
        }
        return it->second;
    };
    double total = 0.0;
    for (const auto& p : pairs) {
        total += pair_loss(vec(p.patch_a), vec(p.patch_b), p.same_neuron);
    }
    return total / static_cast<double>(pairs.size());
}

EmbedderTrainingResult train_embedder(std::span<const PatchPair> pairs, PatchEmbedder init,
                                      const PatchLookup& patches, const EmbedderTrainingConfig& config) {
    if (pairs.empty()) {
        throw ConfigError("embedder training needs at least one pair");
    }
    if (config.batch_size == 0) {
        throw ConfigError("batch size must be positive");
    }
    EmbedderTrainingResult result{std::move(init), {}};
    ConvNet& net = result.model.backbone();
    const Preprocessing& prep = result.model.preprocessing();

    const auto check = [&](double loss, std::size_t epoch) {
        if (!std::isfinite(loss)) {
            throw AuditError("embedder training diverged at epoch " + std::to_string(epoch) +
                             " (mean loss is not finite; learning rate " + std::to_string(config.learning_rate) + ")");
        }
        result.loss_curve.push_back(loss);
    };
    check(mean_pair_loss(result.model, pairs, patches), 0);

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed);
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        if (config.shuffle) {
            std::shuffle(order.begin(), order.end(), rng);
        }
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double scale = 1.0 / static_cast<double>(end - start);

            // Forward each distinct patch once, accumulate d loss / d unit-vector per patch.
            std::map<std::string, PatchForward> forwards;
            std::map<std::string, std::vector<double>> d_unit;
            for (std::size_t k = start; k < end; ++k) {
                const auto& p = pairs[order[k]];
                for (const auto* id : {&p.patch_a, &p.patch_b}) {
                    if (!forwards.contains(*id)) {
                        forwards.emplace(*id, forward_patch(net, prep, patches(*id)));
                        d_unit.emplace(*id, std::vector<double>(net.stages.back().out_channels, 0.0));
                    }
                }
                const auto& va = forwards.at(p.patch_a).unit;
                const auto& vb = forwards.at(p.patch_b).unit;
                const double slope = scale * pair_loss_slope(dot(va, vb), p.same_neuron);
                if (slope == 0.0) {
                    continue;
                }
                auto& ga = d_unit.at(p.patch_a);
                auto& gb = d_unit.at(p.patch_b);
                for (std::size_t i = 0; i < va.size(); ++i) {
                    ga[i] += slope * vb[i];
                    gb[i] += slope * va[i];
                }
            }

            ParameterGradients grads = net.zero_gradients();
            for (const auto& [id, f] : forwards) {
                if (f.norm < kMinNorm) {
                    continue;
                }
                const auto& dv = d_unit.at(id);
                const double proj = dot(f.unit, dv);
                std::vector<double> d_raw(dv.size());
                bool any = false;
                for (std::size_t i = 0; i < dv.size(); ++i) {
                    d_raw[i] = (dv[i] - f.unit[i] * proj) / f.norm;
                    any = any || d_raw[i] != 0.0;
                }
                if (!any) {
                    continue;
                }
                const Tensor3& last = f.trace.last_output();
                net.backward_stages(f.trace, global_average_pool_backward(d_raw, last.channels, last.height, last.width),
                                    0, &grads);
            }
            if (config.weight_decay > 0.0) {
                for (std::size_t s = 0; s < net.stages.size(); ++s) {
                    for (std::size_t i = 0; i < net.stages[s].weight.size(); ++i) {
                        grads.weight[s][i] += config.weight_decay * net.stages[s].weight[i];
                    }
                }
            }
            net.apply_sgd(grads, config.learning_rate);
        }
        check(mean_pair_loss(result.model, pairs, patches), epoch);
    }
    return result;
}

std::vector<NeuronRef> clustering_order(std::span<const NeuronConcept> concepts,
                                        const std::map<NeuronRef, double>& max_scores,
                                        std::span<const std::string> layer_order) {
    const auto layer_pos = [&](const std::string& id) {
        const auto it = std::find(layer_order.begin(), layer_order.end(), id);
        if (it == layer_order.end()) {
            throw LookupError("layer '" + id + "' is not in the layer order");
        }
        return it - layer_order.begin();
    };
    const auto score = [&](const NeuronRef& n) {
        const auto it = max_scores.find(n);
        return it == max_scores.end() ? 0.0 : it->second;
    };
    std::vector<NeuronRef> order;
    for (const auto& c : concepts) {
        if (!c.patches.empty()) {
            order.push_back(c.neuron);
        }
    }
    std::sort(order.begin(), order.end(), [&](const NeuronRef& a, const NeuronRef& b) {
        const double sa = score(a), sb = score(b);
        if (sa != sb) {
            return sa > sb;
        }
        const auto la = layer_pos(a.layer_id), lb = layer_pos(b.layer_id);
        return la != lb ? la < lb : a.channel < b.channel;
    });
    return order;
}

std::vector<NeuronCluster> assign_clusters(std::span<const NeuronConcept> concepts, std::span<const NeuronRef> order,
                                           const std::map<std::string, std::vector<double>>& patch_vectors,
                                           const ClusterAssignmentConfig& config) {
    std::map<NeuronRef, const NeuronConcept*> by_neuron;
    for (const auto& c : concepts) {
        by_neuron[c.neuron] = &c;
    }
    const auto vector_of = [&](const std::string& patch_id) -> const std::vector<double>& {
        const auto it = patch_vectors.find(patch_id);
        if (it == patch_vectors.end()) {
            throw LookupError("no embedding for patch '" + patch_id + "'");
        }
        return it->second;
    };

    std::vector<NeuronCluster> clusters;
    std::vector<std::set<std::string>> member_patches;
    for (const auto& neuron : order) {
        const auto found = by_neuron.find(neuron);
        if (found == by_neuron.end()) {
            throw LookupError("neuron " + neuron.key() + " has no concept");
        }
        const auto& patches = found->second->patches;
        if (patches.empty()) {
            continue;
        }
        std::optional<std::size_t> best;
        double best_sim = 0.0;
        for (std::size_t c = 0; c < clusters.size(); ++c) {
            double total = 0.0;
            for (const auto& p : patches) {
                for (const auto& e : clusters[c].exemplar_patch_ids) {
                    total += dot(vector_of(p.patch_id), vector_of(e));
                }
            }
            const double sim =
                total / static_cast<double>(patches.size() * clusters[c].exemplar_patch_ids.size());
            if (!best || sim > best_sim) {
                best = c;
                best_sim = sim;
            }
        }
        if (best && best_sim > config.threshold) {
            auto& cluster = clusters[*best];
            cluster.member_neurons.push_back(neuron);
            for (const auto& p : patches) {
                member_patches[*best].insert(p.patch_id);
            }
            std::vector<std::string> pool(member_patches[*best].begin(), member_patches[*best].end());
            if (pool.size() > config.exemplars_per_cluster) {
                std::mt19937_64 rng(config.seed ^ (cluster.cluster_id * 1000003ULL + cluster.member_neurons.size()));
                std::shuffle(pool.begin(), pool.end(), rng);
                pool.resize(config.exemplars_per_cluster);
                std::sort(pool.begin(), pool.end());
            }
            cluster.exemplar_patch_ids = std::move(pool);
        } else {
            NeuronCluster cluster;
            cluster.cluster_id = clusters.size();
            cluster.member_neurons.push_back(neuron);
            std::set<std::string> ids;
            for (const auto& p : patches) {
                ids.insert(p.patch_id);
            }
            cluster.exemplar_patch_ids.assign(ids.begin(), ids.end());
            if (cluster.exemplar_patch_ids.size() > config.exemplars_per_cluster) {
                cluster.exemplar_patch_ids.resize(config.exemplars_per_cluster);
            }
            clusters.push_back(std::move(cluster));
            member_patches.push_back(std::move(ids));
        }
    }
    return clusters;
}

std::optional<ClusterMembership> cluster_of(std::span<const NeuronCluster> clusters, const NeuronRef& neuron) {
    for (const auto& c : clusters) {
        if (std::find(c.member_neurons.begin(), c.member_neurons.end(), neuron) != c.member_neurons.end()) {
            ClusterMembership m;
            m.cluster_id = c.cluster_id;
            for (const auto& other : c.member_neurons) {
                if (other != neuron) {
                    m.co_members.push_back(other);
                }
            }
            return m;
        }
    }
    return std::nullopt;
}

} // namespace cnnaudit
