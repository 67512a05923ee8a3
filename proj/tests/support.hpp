#pragma once

#include "cnnaudit/audit_store.hpp"
#include "cnnaudit/convnet.hpp"
#include "cnnaudit/encoding.hpp"
#include "cnnaudit/image.hpp"
#include "cnnaudit/model_backend.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <unistd.h>
#include <string>
#include <vector>

namespace testsupport {

namespace fs = std::filesystem;
using namespace cnnaudit;

class TempDir {
public:
    explicit TempDir(const std::string& name) {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("cnnaudit-" + name + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& child) const { return path_ / child; }

private:
    fs::path path_;
};

inline Image random_image(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(c, h, w);
    for (auto& v : img.values) {
        v = u(rng);
    }
    return img;
}

inline Preprocessing plain_preprocessing(std::size_t c, std::size_t h, std::size_t w) {
    Preprocessing p;
    p.channels = c;
    p.height = h;
    p.width = w;
    p.mean.assign(c, 0.0);
    p.stddev.assign(c, 1.0);
    return p;
}

/// Two conv stages (first pooled) and a GAP head; random biases so ReLUs are not all on.
inline ConvNet tiny_net(std::uint64_t seed, std::size_t c = 3, std::size_t h = 8, std::size_t w = 8,
                        std::size_t classes = 2, Pooling pooling = Pooling::GlobalAverage) {
    ConvNet net = ConvNet::random(c, h, w, {{"conv_a", 4, 3, true, true}, {"conv_b", 5, 3, true, false}}, classes,
                                  pooling, seed);
    std::mt19937_64 rng(seed + 99);
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& s : net.stages) {
        for (auto& b : s.bias) {
            b = n(rng);
        }
    }
    for (auto& b : net.head->bias) {
        b = n(rng);
    }
    return net;
}

inline ConvNetClassifier tiny_classifier(std::uint64_t seed, std::size_t classes = 2) {
    return ConvNetClassifier(tiny_net(seed, 3, 8, 8, classes), std::vector<std::string>(classes, "c"), plain_preprocessing(3, 8, 8));
}

/// Grad-CAM rebuilt from captured activations and central-difference gradients.
inline Tensor3 fd_grad_cam(const ConvNetClassifier& model, const Image& image, std::size_t target_class,
                           const std::string& layer_id, double h = 1e-5) {
    const std::vector<std::string> ids{layer_id};
    const Tensor3 a = model.capture_activations(image, ids).front().values;
    Tensor3 grad(a.channels, a.height, a.width);
    Tensor3 probe = a;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        probe.values[i] = a.values[i] + h;
        const double up = model.scores_from_layer(layer_id, probe)[target_class];
        probe.values[i] = a.values[i] - h;
        const double down = model.scores_from_layer(layer_id, probe)[target_class];
        probe.values[i] = a.values[i];
        grad.values[i] = (up - down) / (2.0 * h);
    }
    Tensor3 cam(1, a.height, a.width);
    for (std::size_t c = 0; c < a.channels; ++c) {
        double w = 0.0;
        for (const double g : grad.channel(c)) {
            w += g;
        }
        w /= static_cast<double>(a.plane_size());
        for (std::size_t k = 0; k < a.plane_size(); ++k) {
            cam.values[k] += w * a.channel(c)[k];
        }
    }
    double peak = 0.0;
    for (auto& v : cam.values) {
        v = std::max(v, 0.0);
        peak = std::max(peak, v);
    }
    for (auto& v : cam.values) {
        v = peak > 0.0 ? v / peak : 0.0;
    }
    return cam;
}

inline double max_abs_difference(const Tensor3& a, const Tensor3& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        d = std::max(d, std::abs(a.values[i] - b.values[i]));
    }
    return d;
}

inline void touch_png(const fs::path& path) {
    fs::create_directories(path.parent_path());
    write_png(path, Image(3, 2, 2, 0.5));
}

inline double sig6(double v) {
    return round_sig6(v);
}

/// Hand-wired classifier over 8x8 RGB images: predicts class 1 exactly when the mean red
/// value exceeds 0.5. Its GAP feature vector is (R, G, B, (R + G) / 2).
inline ConvNetClassifier redness_classifier() {
    ConvNet net = ConvNet::random(3, 8, 8, {{"conv1", 3, 1, true, false}, {"conv2", 4, 1, true, false}}, 2,
                                  Pooling::GlobalAverage, 1);
    auto& a = net.stages[0];
    std::fill(a.weight.begin(), a.weight.end(), 0.0);
    std::fill(a.bias.begin(), a.bias.end(), 0.0);
    for (std::size_t c = 0; c < 3; ++c) {
        a.w(c, c, 0, 0) = 1.0;
    }
    auto& b = net.stages[1];
    std::fill(b.weight.begin(), b.weight.end(), 0.0);
    std::fill(b.bias.begin(), b.bias.end(), 0.0);
    for (std::size_t c = 0; c < 3; ++c) {
        b.w(c, c, 0, 0) = 1.0;
    }
    b.w(3, 0, 0, 0) = 0.5;
    b.w(3, 1, 0, 0) = 0.5;
    auto& h = *net.head;
    std::fill(h.weight.begin(), h.weight.end(), 0.0);
    h.weight[1 * 4 + 0] = 1.0;
    h.bias = {0.0, -0.5};
    return ConvNetClassifier(std::move(net), {"cool", "warm"}, plain_preprocessing(3, 8, 8));
}

struct ColourGroup {
    std::array<double, 3> rgb;
    std::size_t label;
    std::size_t count;
    bool flagged;
};

/// Writes noisy flat-colour images for each group, their manifest and the redness classifier.
/// Default groups: red labelled cool (always wrong), blue labelled cool and orange labelled warm (always right).
inline void write_colour_fixture(const fs::path& dir, std::vector<ColourGroup> groups = {},
                                 std::uint64_t seed = 3) {
    if (groups.empty()) {
        groups = {{{0.9, 0.1, 0.1}, 0, 30, true}, {{0.1, 0.1, 0.9}, 0, 30, false}, {{0.9, 0.6, 0.1}, 1, 30, false}};
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.04);
    std::ofstream m(dir / "manifest.csv");
    m << "# manifest_version: 1\n# classes: cool,warm\nimage_id,path,label,split,flagged\n";
    std::size_t n = 0;
    for (const auto& g : groups) {
        for (std::size_t i = 0; i < g.count; ++i, ++n) {
            Image img(3, 8, 8);
            for (std::size_t c = 0; c < 3; ++c) {
                const double base = g.rgb[c] + noise(rng);
                for (auto& v : img.channel(c)) {
                    v = std::clamp(base + noise(rng), 0.0, 1.0);
                }
            }
            const std::string id = "img" + std::to_string(1000 + n);
            write_png(dir / "images" / (id + ".png"), img);
            m << id << ",images/" << id << ".png," << g.label << ",audit," << (g.flagged ? 1 : 0) << "\n";
        }
    }
    redness_classifier().save(dir / "model.json");
}

/// A small artifact with every collection populated and every asset written under `dir`.
inline AuditArtifact random_artifact(std::mt19937_64& rng, const fs::path& dir) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };

    AuditArtifact a;
    a.run_config = {{"seed", rng() % 1000}, {"analysis", {{"threshold_default", 0.5}}}};
    const std::size_t classes = 2 + pick(3);
    for (std::size_t k = 0; k < classes; ++k) {
        a.model.class_names.push_back("class" + std::to_string(k));
    }
    const std::size_t n_layers = 2 + pick(2);
    for (std::size_t l = 0; l < n_layers; ++l) {
        a.model.layers.push_back({"layer" + std::to_string(l), 3 + pick(6), std::size_t{8} >> l, std::size_t{8} >> l});
    }
    a.model.feature_layer = a.model.layers.back().id;
    a.model.saliency_layer = a.model.layers.back().id;
    a.model.feature_pooling = "global_average";
    a.model.preprocessing = plain_preprocessing(3, 8, 8);
    a.overall_accuracy = sig6(u(rng));

    const std::size_t n_images = 10 + pick(20);
    for (std::size_t i = 0; i < n_images; ++i) {
        ImageEntry e;
        e.image_id = "img_" + std::to_string(i);
        e.true_label = pick(classes);
        e.predicted_label = pick(classes);
        for (std::size_t k = 0; k < classes; ++k) {
            e.scores.push_back(sig6(u(rng) * 4.0 - 2.0));
        }
        e.attributes = {{"flag", u(rng) < 0.5}};
        e.thumbnail = thumbnail_asset_path(e.image_id);
        touch_png(dir / e.thumbnail);
        a.images.push_back(std::move(e));
    }

    std::vector<std::size_t> order(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
        order[i] = i;
    }
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_groups = 3 + pick(3);
    for (std::size_t g = 0; g < n_groups; ++g) {
        Subgroup s;
        s.subgroup_id = g * 3 + pick(3);
        s.confusion = ConfusionMatrix(classes);
        for (std::size_t i = g; i < n_images; i += n_groups) {
            const auto& e = a.images[order[i]];
            s.member_ids.push_back(e.image_id);
            ++s.confusion.at(e.true_label, e.predicted_label);
        }
        s.accuracy = sig6(static_cast<double>(s.confusion.trace()) / static_cast<double>(s.size()));
        s.embedding = {sig6(u(rng)), sig6(u(rng)), sig6(u(rng))};
        s.status = static_cast<SubgroupStatus>(pick(3));
        a.subgroups.push_back(std::move(s));
    }

    const auto random_neuron = [&] {
        const auto& layer = a.model.layers[pick(a.model.layers.size())];
        return NeuronRef{layer.id, pick(layer.channels)};
    };
    const std::size_t n_pairings = 1 + pick(2);
    for (std::size_t p = 0; p < n_pairings; ++p) {
        const auto& under = a.subgroups[p];
        const auto& well = a.subgroups.back();
        a.pairings.push_back({under.subgroup_id, well.subgroup_id, sig6(u(rng) * 3.0)});
        PairingScores ps{under.subgroup_id, well.subgroup_id, {}, {}};
        std::set<NeuronRef> used;
        for (int k = 0; k < 6; ++k) {
            const NeuronRef n = random_neuron();
            if (!used.insert(n).second) {
                continue;
            }
            for (auto [list, group] : {std::pair{&ps.under, &under}, std::pair{&ps.well, &well}}) {
                const std::size_t count = 1 + pick(group->size());
                list->push_back({n, group->subgroup_id, count,
                                 static_cast<double>(count) / static_cast<double>(group->size())});
            }
        }
        const auto by_neuron = [&](const NeuronActivationScore& x, const NeuronActivationScore& y) {
            const auto lx = a.model.layer_index(x.neuron.layer_id), ly = a.model.layer_index(y.neuron.layer_id);
            return lx != ly ? lx < ly : x.neuron.channel < y.neuron.channel;
        };
        std::sort(ps.under.begin(), ps.under.end(), by_neuron);
        std::sort(ps.well.begin(), ps.well.end(), by_neuron);
        for (auto* list : {&ps.under, &ps.well}) {
            for (auto& s : *list) {
                s.score = sig6(s.score);
            }
        }
        a.neuron_scores.push_back(std::move(ps));
    }

    for (std::size_t s = 0; s < 1 + pick(4); ++s) {
        SaliencyEntry e;
        e.image_id = a.images[pick(n_images)].image_id;
        e.target_class = s % classes;
        if (!a.find_saliency(e.image_id).empty()) {
            continue;
        }
        e.layer_id = a.model.saliency_layer;
        e.height = 2;
        e.width = 2;
        for (int k = 0; k < 4; ++k) {
            e.heatmap.push_back(static_cast<float>(u(rng)));
        }
        e.overlay = saliency_asset_path(e.image_id, e.target_class);
        touch_png(dir / e.overlay);
        a.saliency.push_back(std::move(e));
    }

    std::set<NeuronRef> concept_neurons;
    while (concept_neurons.size() < 2 + pick(3)) {
        concept_neurons.insert(random_neuron());
    }
    for (const auto& n : concept_neurons) {
        NeuronConcept c{n, {}};
        const std::size_t patches = 1 + pick(3);
        for (std::size_t p = 0; p < patches; ++p) {
            const auto& src = a.images[pick(n_images)].image_id;
            const Box box{pick(3), p, 6};
            const std::string id = src + "_" + std::to_string(box.top) + "_" + std::to_string(box.left);
            if (std::any_of(c.patches.begin(), c.patches.end(), [&](const auto& q) { return q.patch_id == id; })) {
                continue;
            }
            c.patches.push_back({id, src, box, sig6(u(rng) * 5.0)});
            touch_png(dir / patch_asset_path(n, id));
        }
        a.concepts.push_back(std::move(c));
    }

    std::size_t next_cluster = 0;
    for (const auto& c : a.concepts) {
        if (!a.clusters.empty() && u(rng) < 0.5) {
            a.clusters.back().member_neurons.push_back(c.neuron);
        } else {
            a.clusters.push_back({next_cluster++, {c.neuron}, {c.patches.front().patch_id}});
        }
    }

    if (u(rng) < 0.7) {
        std::ofstream(dir / kEmbedderFile) << "{}\n";
        a.embedder = EmbedderInfo{kEmbedderFile, 8, {sig6(1.2), sig6(1.1 - 0.1 * u(rng))}};
    }
    if (u(rng) < 0.5) {
        a.notices.push_back("notice " + std::to_string(rng() % 100));
    }
    return a;
}

} // namespace testsupport
