#include "cnnaudit/demo.hpp"

#include "cnnaudit/encoding.hpp"
#include "cnnaudit/errors.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace cnnaudit {

namespace fs = std::filesystem;

namespace {

std::string image_name(const std::string& prefix, std::size_t i) {
    std::ostringstream s;
    s << prefix << '_' << std::setw(5) << std::setfill('0') << i;
    return s.str();
}

std::vector<double> softmax(std::span<const double> scores) {
    const double peak = *std::max_element(scores.begin(), scores.end());
    std::vector<double> p(scores.size());
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(scores[i] - peak);
        total += p[i];
    }
    for (auto& v : p) {
        v /= total;
    }
    return p;
}

} // namespace

Image render_shape(std::size_t label, bool red, std::size_t size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.06);
    const double n = static_cast<double>(size);

    std::array<double, 3> bg = red ? std::array{0.70, 0.22, 0.22} : std::array{0.22, 0.22, 0.70};
    for (auto& c : bg) {
        c += (unit(rng) - 0.5) * 0.16;
    }
    const double half = n * (0.14 + 0.06 * unit(rng)); // square half-side
    const double radius = half * 1.1284;               // circle of equal area
    const double extent = label == 0 ? half : radius;
    const double margin = extent + 1.0;
    const double cx = margin + unit(rng) * (n - 2.0 * margin);
    const double cy = margin + unit(rng) * (n - 2.0 * margin);
    const double ink = 0.85 + 0.15 * unit(rng);

    Image img(3, size, size);
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const bool inside = label == 0 ? (std::abs(dx) <= half && std::abs(dy) <= half)
                                           : (dx * dx + dy * dy <= radius * radius);
            for (std::size_t c = 0; c < 3; ++c) {
                const double base = inside ? ink : bg[c];
                img.at(c, y, x) = std::clamp(base + noise(rng), 0.0, 1.0);
            }
        }
    }
    return img;
}

ShapesDataset generate_shapes(const fs::path& directory, const ShapesConfig& config) {
    if (config.train_pool < 4 || config.audit < 4) {
        throw ConfigError("shapes dataset needs at least 4 train and 4 audit images");
    }
    std::mt19937_64 rng(config.seed);

    // Balanced label x colour grid for both splits; bias is then injected into train.
    const auto balanced = [&](std::size_t count, Split split, const std::string& prefix) {
        std::vector<ImageRecord> records;
        for (std::size_t i = 0; i < count; ++i) {
            ImageRecord r;
            r.image_id = image_name(prefix, i);
            r.path = fs::path("images") / (r.image_id + ".png");
            r.true_label = i % 2;
            const bool red = (i / 2) % 2 == 0;
            r.attributes = {{"red", red}, {"blue", !red}};
            r.split = split;
            records.push_back(std::move(r));
        }
        std::shuffle(records.begin(), records.end(), rng);
        return records;
    };
    auto train = balanced(config.train_pool, Split::Train, "train");
    const auto audit = balanced(config.audit, Split::Audit, "audit");
    train = inject_bias(train, {"red", 1, config.train_cooccurrence, config.seed + 1});
    train = inject_bias(train, {"blue", 0, config.train_cooccurrence, config.seed + 2});

    std::vector<ImageRecord> all = train;
    all.insert(all.end(), audit.begin(), audit.end());
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });

    fs::create_directories(directory / "images");
    for (const auto& r : all) {
        std::mt19937_64 image_rng(config.seed ^ fnv1a(r.image_id));
        write_png(directory / r.path, render_shape(r.true_label, r.attributes.at("red"), config.image_size, image_rng));
    }
    ShapesDataset out;
    out.manifest = directory / "manifest.csv";
    write_manifest_csv(out.manifest, kShapeClasses, all);
    out.train_images = train.size();
    out.audit_images = audit.size();
    out.train_cooccurrence = cooccurrence(train, "red", 1);
    out.audit_cooccurrence = cooccurrence(audit, "red", 1);
    return out;
}

ConvNetClassifier train_demo_classifier(const Dataset& dataset, const ClassifierTraining& config,
                                        TrainingReport* report, std::size_t threads) {
    std::vector<const ImageRecord*> train;
    for (const auto& r : dataset.records) {
        if (r.split == Split::Train) {
            train.push_back(&r);
        }
    }
    if (train.empty()) {
        throw ConfigError("dataset has no train-split images");
    }
    const Image first = read_png(train.front()->path);
    Preprocessing prep;
    prep.height = first.height;
    prep.width = first.width;
    prep.channels = first.channels;
    prep.mean.assign(first.channels, 0.5);
    prep.stddev.assign(first.channels, 0.25);

    std::vector<Tensor3> inputs(train.size());
    parallel_for(train.size(), threads, [&](std::size_t i) { inputs[i] = prep.apply(read_png(train[i]->path)); });

    ConvNet net = ConvNet::random(first.channels, first.height, first.width,
                                  {{"conv1", 8, 3, true, true}, {"conv2", 16, 3, true, true}, {"conv3", 32, 3, true, false}},
                                  dataset.class_names.size(), Pooling::GlobalAverage, config.seed);

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed);
    ParameterGradients velocity = net.zero_gradients();
    TrainingReport local;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<ParameterGradients> slots(end - start);
            std::vector<double> losses(end - start);
            parallel_for(end - start, threads, [&](std::size_t k) {
                const std::size_t i = order[start + k];
                const ForwardTrace trace = net.forward(inputs[i]);
                auto d_scores = softmax(trace.scores);
                const std::size_t y = train[i]->true_label;
                losses[k] = -std::log(std::max(d_scores[y], 1e-300));
                d_scores[y] -= 1.0;
                slots[k] = net.zero_gradients();
                const Tensor3 d_last = net.backward_head(trace, d_scores, &slots[k]);
                net.backward_stages(trace, d_last, 0, &slots[k]);
            });
            ParameterGradients batch = net.zero_gradients();
            for (std::size_t k = 0; k < slots.size(); ++k) {
                batch.add(slots[k]);
                epoch_loss += losses[k];
            }
            batch.scale(1.0 / static_cast<double>(end - start));
            velocity.scale(config.momentum);
            velocity.add(batch);
            net.apply_sgd(velocity, config.learning_rate);
        }
        local.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
        if (!std::isfinite(local.epoch_loss.back())) {
            throw AuditError("classifier training diverged at epoch " + std::to_string(epoch + 1));
        }
    }
    std::vector<int> hits(train.size());
    parallel_for(train.size(), threads, [&](std::size_t i) {
        hits[i] = argmax(net.forward(inputs[i]).scores) == train[i]->true_label ? 1 : 0;
    });
    local.train_accuracy = static_cast<double>(std::accumulate(hits.begin(), hits.end(), 0)) /
                           static_cast<double>(train.size());
    if (report) {
        *report = local;
    }
    return ConvNetClassifier(std::move(net), dataset.class_names, prep);
}

DemoResult run_demo(const DemoConfig& config, const ProgressLog& log) {
    const auto start = std::chrono::steady_clock::now();
    const auto say = [&](const std::string& m) {
        if (log) {
            log(m);
        }
    };
    DemoResult result;
    const fs::path out = config.output_dir;
    say("generating synthetic shapes dataset");
    result.dataset = generate_shapes(out / "data", config.shapes);
    {
        std::ostringstream m;
        m << result.dataset.train_images << " train / " << result.dataset.audit_images
          << " audit images; red-circle co-occurrence " << result.dataset.train_cooccurrence << " (train), "
          << result.dataset.audit_cooccurrence << " (audit)";
        say(m.str());
    }

    say("training demo classifier");
    const Dataset data = load_dataset(result.dataset.manifest);
    const ConvNetClassifier model = train_demo_classifier(data, config.training, &result.training,
                                                          config.pipeline.threads);
    result.model = out / "model.json";
    model.save(result.model);
    {
        std::ostringstream m;
        m << "train accuracy " << result.training.train_accuracy;
        say(m.str());
    }

    PipelineConfig pc = config.pipeline;
    pc.model_path = result.model;
    pc.dataset_path = result.dataset.manifest;
    pc.output_dir = out / "artifact";
    pc.bias = BiasSpec{kSpuriousAttribute, 1, config.shapes.train_cooccurrence, config.shapes.seed + 1};
    result.manifest = run_audit(pc, log);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

std::vector<SubgroupPurity> underperforming_purity(const AuditArtifact& artifact, const std::string& attribute) {
    std::vector<SubgroupPurity> out;
    for (const auto& g : artifact.subgroups) {
        if (g.status != SubgroupStatus::Underperforming || g.member_ids.empty()) {
            continue;
        }
        std::map<std::pair<std::size_t, bool>, std::size_t> counts;
        for (const auto& id : g.member_ids) {
            const ImageEntry* e = artifact.find_image(id);
            const auto it = e->attributes.find(attribute);
            if (it == e->attributes.end()) {
                throw LookupError("image '" + id + "' lacks attribute '" + attribute + "'");
            }
            ++counts[{e->true_label, it->second}];
        }
        SubgroupPurity p;
        p.subgroup_id = g.subgroup_id;
        p.size = g.size();
        std::size_t best = 0;
        for (const auto& [combo, n] : counts) {
            if (n > best) {
                best = n;
                p.label = combo.first;
                p.attribute = combo.second;
            }
        }
        p.purity = static_cast<double>(best) / static_cast<double>(g.size());
        out.push_back(p);
    }
    return out;
}

} // namespace cnnaudit
