#include "cnnaudit/pipeline.hpp"

#include "cnnaudit/encoding.hpp"
#include "cnnaudit/errors.hpp"
#include "cnnaudit/saliency.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace cnnaudit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class T>
void take(const json& j, const char* key, T& field) {
    if (j.contains(key) && !j.at(key).is_null()) {
        field = j.at(key).get<T>();
    }
}

void require(bool ok, const std::string& message) {
    if (!ok) {
        throw ConfigError(message);
    }
}

json yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
    case YAML::NodeType::Map: {
        json out = json::object();
        for (const auto& kv : node) {
            out[kv.first.as<std::string>()] = yaml_to_json(kv.second);
        }
        return out;
    }
    case YAML::NodeType::Sequence: {
        json out = json::array();
        for (const auto& item : node) {
            out.push_back(yaml_to_json(item));
        }
        return out;
    }
    case YAML::NodeType::Scalar: {
        const std::string text = node.Scalar();
        if (node.Tag() == "!") {
            return text;
        }
        if (text == "true" || text == "false") {
            return text == "true";
        }
        if (text == "null" || text == "~") {
            return nullptr;
        }
        try {
            std::size_t used = 0;
            const long long v = std::stoll(text, &used);
            if (used == text.size()) {
                return v;
            }
        } catch (const std::exception&) {
        }
        try {
            std::size_t used = 0;
            const double v = std::stod(text, &used);
            if (used == text.size()) {
                return v;
            }
        } catch (const std::exception&) {
        }
        return text;
    }
    default:
        return nullptr;
    }
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LookupError("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::string hex(std::uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

void write_json_atomic(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    const fs::path staging = path.string() + ".tmp";
    {
        std::ofstream out(staging, std::ios::binary | std::ios::trunc);
        out << j.dump() << '\n';
        if (!out) {
            throw AuditError("failed writing " + staging.string());
        }
    }
    fs::rename(staging, path);
}

std::optional<json> read_cache(const fs::path& path, const std::string& key) {
    if (!fs::exists(path)) {
        return std::nullopt;
    }
    try {
        json j = json::parse(read_bytes(path));
        if (j.value("key", "") == key) {
            return j;
        }
    } catch (const std::exception&) {
    }
    return std::nullopt;
}

/// Decoded images, loaded on first use.
class ImageStore {
public:
    explicit ImageStore(std::map<std::string, fs::path> paths) : paths_(std::move(paths)) {}

    Image get(const std::string& image_id) const {
        {
            std::lock_guard lock(mutex_);
            if (auto it = cache_.find(image_id); it != cache_.end()) {
                return *it->second;
            }
        }
        auto it = paths_.find(image_id);
        if (it == paths_.end()) {
            throw LookupError("unknown image '" + image_id + "'");
        }
        auto image = std::make_shared<Image>(read_png(it->second));
        std::lock_guard lock(mutex_);
        cache_.emplace(image_id, image);
        return *image;
    }

private:
    std::map<std::string, fs::path> paths_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, std::shared_ptr<const Image>> cache_;
};

struct StageLog {
    fs::path file;
    json stages = json::array();
    const ProgressLog* log = nullptr;

    void flush() const {
        try {
            write_json_atomic(file, json{{"stages", stages}});
        } catch (const std::exception&) {
        }
    }

    /// `body` returns true when it was satisfied from the cache.
    template <class F>
    void run(const std::string& name, F&& body) {
        if (*log) {
            (*log)(name + "...");
        }
        const auto start = std::chrono::steady_clock::now();
        bool cached = false;
        try {
            cached = body();
        } catch (const std::exception& e) {
            stages.push_back({{"stage", name}, {"status", "failed"}, {"error", e.what()}});
            flush();
            throw StageError(name, e.what());
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        stages.push_back({{"stage", name}, {"status", "ok"}, {"cached", cached}, {"seconds", seconds}});
        flush();
        if (*log) {
            std::ostringstream msg;
            msg << name << " done in " << std::fixed << std::setprecision(2) << seconds << " s"
                << (cached ? " (cached)" : "");
            (*log)(msg.str());
        }
    }
};

struct InferenceRow {
    Prediction prediction;
    std::vector<double> features;
    std::vector<std::vector<double>> maxima;
};

json inference_to_json(const std::string& key, const std::vector<std::string>& ids,
                       const std::vector<InferenceRow>& rows) {
    json images = json::array();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        json layers = json::array();
        for (const auto& m : rows[i].maxima) {
            layers.push_back(encode_f64(m));
        }
        images.push_back({{"image_id", ids[i]},
                          {"label", rows[i].prediction.label},
                          {"scores", encode_f64(rows[i].prediction.scores)},
                          {"features", encode_f64(rows[i].features)},
                          {"maxima", layers}});
    }
    return {{"key", key}, {"images", images}};
}

std::optional<std::vector<InferenceRow>> inference_from_json(const json& j, const std::vector<std::string>& ids) {
    const auto& images = j.at("images");
    if (images.size() != ids.size()) {
        return std::nullopt;
    }
    std::vector<InferenceRow> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& e = images[i];
        if (e.at("image_id").get<std::string>() != ids[i]) {
            return std::nullopt;
        }
        rows[i].prediction.label = e.at("label").get<std::size_t>();
        rows[i].prediction.scores = decode_f64(e.at("scores").get<std::string>());
        rows[i].features = decode_f64(e.at("features").get<std::string>());
        for (const auto& m : e.at("maxima")) {
            rows[i].maxima.push_back(decode_f64(m.get<std::string>()));
        }
    }
    return rows;
}

} // namespace

void PipelineConfig::validate() const {
    require(!model_path.empty(), "model path is required");
    require(!dataset_path.empty(), "dataset manifest path is required");
    require(!output_dir.empty(), "output directory is required");
    if (bias) {
        require(!bias->attribute.empty(), "bias attribute is required");
        require(bias->target_cooccurrence > 0.0 && bias->target_cooccurrence <= 1.0,
                "bias target co-occurrence must lie in (0, 1]");
    }
    require(clustering.max_iterations >= 1, "clustering max_iterations must be positive");
    require(selection.well_margin >= 0.0 && selection.well_margin <= 1.0, "well_margin must lie in [0, 1]");
    require(selection.min_size >= 1, "min_size must be positive");
    const auto& a = analysis;
    require(a.activation_rate > 0.0 && a.activation_rate <= 1.0, "activation_rate must lie in (0, 1]");
    require(a.threshold_default >= kMinThreshold && a.threshold_default <= kMaxThreshold,
            "threshold_default must lie in [0.5, 1.0]");
    require(a.top_images >= 1, "top_images must be positive");
    require(a.patches_per_neuron >= 1, "patches_per_neuron must be positive");
    require(a.masks.count >= 1, "mask count must be positive");
    require(a.masks.size >= 1, "mask size must be positive");
    require(a.masks.retry_cap >= 1, "mask retry_cap must be positive");
    require(a.positive_pairs >= 1 && a.negative_pairs >= 1, "pair counts must be positive");
    require(a.embedder.epochs >= 1, "epochs must be positive");
    require(std::isfinite(a.embedder.learning_rate) && a.embedder.learning_rate > 0.0,
            "learning_rate must be positive");
    require(a.embedder.batch_size >= 1, "batch_size must be positive");
    require(a.embedder.weight_decay >= 0.0, "weight_decay must be non-negative");
    require(a.cluster_threshold > 0.0 && a.cluster_threshold <= 1.0, "cluster_threshold must lie in (0, 1]");
    require(a.exemplars_per_cluster >= 1, "exemplars_per_cluster must be positive");
}

json to_json(const PipelineConfig& c) {
    const auto& a = c.analysis;
    json bias = nullptr;
    if (c.bias) {
        bias = {{"attribute", c.bias->attribute},
                {"label", c.bias->label},
                {"target_cooccurrence", c.bias->target_cooccurrence},
                {"seed", c.bias->seed}};
    }
    return {
        {"model_path", c.model_path.generic_string()},
        {"dataset_path", c.dataset_path.generic_string()},
        {"output_dir", c.output_dir.generic_string()},
        {"bias", bias},
        {"clustering",
         {{"n_clusters", c.clustering.n_clusters},
          {"linkage", to_string(c.clustering.linkage)},
          {"max_iterations", c.clustering.max_iterations}}},
        {"selection", {{"well_margin", c.selection.well_margin}, {"min_size", c.selection.min_size}}},
        {"analysis",
         {{"activation_rate", a.activation_rate},
          {"threshold_default", a.threshold_default},
          {"top_images", a.top_images},
          {"patches_per_neuron", a.patches_per_neuron},
          {"masks",
           {{"count", a.masks.count},
            {"size", a.masks.size},
            {"min_separation", a.masks.min_separation},
            {"retry_cap", a.masks.retry_cap}}},
          {"positive_pairs", a.positive_pairs},
          {"negative_pairs", a.negative_pairs},
          {"embedder",
           {{"epochs", a.embedder.epochs},
            {"learning_rate", a.embedder.learning_rate},
            {"batch_size", a.embedder.batch_size},
            {"weight_decay", a.embedder.weight_decay},
            {"shuffle", a.embedder.shuffle}}},
          {"cluster_threshold", a.cluster_threshold},
          {"exemplars_per_cluster", a.exemplars_per_cluster}}},
        {"seeds",
         {{"clustering", c.seeds.clustering},
          {"masks", c.seeds.masks},
          {"pairs", c.seeds.pairs},
          {"training", c.seeds.training},
          {"clusters", c.seeds.clusters}}},
        {"saliency_for_true_class", c.saliency_for_true_class},
        {"resume", c.resume},
        {"threads", c.threads},
    };
}

PipelineConfig pipeline_config_from_json(const json& j, PipelineConfig c) {
    try {
        if (!j.is_object()) {
            throw ConfigError("config must be an object");
        }
        if (j.contains("model_path")) {
            c.model_path = j.at("model_path").get<std::string>();
        }
        if (j.contains("dataset_path")) {
            c.dataset_path = j.at("dataset_path").get<std::string>();
        }
        if (j.contains("output_dir")) {
            c.output_dir = j.at("output_dir").get<std::string>();
        }
        if (j.contains("bias")) {
            if (j.at("bias").is_null()) {
                c.bias.reset();
            } else {
                BiasSpec b = c.bias.value_or(BiasSpec{});
                const auto& jb = j.at("bias");
                take(jb, "attribute", b.attribute);
                take(jb, "label", b.label);
                take(jb, "target_cooccurrence", b.target_cooccurrence);
                take(jb, "seed", b.seed);
                c.bias = b;
            }
        }
        if (j.contains("clustering")) {
            const auto& jc = j.at("clustering");
            take(jc, "n_clusters", c.clustering.n_clusters);
            take(jc, "max_iterations", c.clustering.max_iterations);
            if (jc.contains("linkage")) {
                c.clustering.linkage = parse_linkage(jc.at("linkage").get<std::string>());
            }
        }
        if (j.contains("selection")) {
            take(j.at("selection"), "well_margin", c.selection.well_margin);
            take(j.at("selection"), "min_size", c.selection.min_size);
        }
        if (j.contains("analysis")) {
            const auto& ja = j.at("analysis");
            auto& a = c.analysis;
            take(ja, "activation_rate", a.activation_rate);
            take(ja, "threshold_default", a.threshold_default);
            take(ja, "top_images", a.top_images);
            take(ja, "patches_per_neuron", a.patches_per_neuron);
            if (ja.contains("masks")) {
                const auto& jm = ja.at("masks");
                take(jm, "count", a.masks.count);
                take(jm, "size", a.masks.size);
                take(jm, "min_separation", a.masks.min_separation);
                take(jm, "retry_cap", a.masks.retry_cap);
            }
            take(ja, "positive_pairs", a.positive_pairs);
            take(ja, "negative_pairs", a.negative_pairs);
            if (ja.contains("embedder")) {
                const auto& je = ja.at("embedder");
                take(je, "epochs", a.embedder.epochs);
                take(je, "learning_rate", a.embedder.learning_rate);
                take(je, "batch_size", a.embedder.batch_size);
                take(je, "weight_decay", a.embedder.weight_decay);
                take(je, "shuffle", a.embedder.shuffle);
            }
            take(ja, "cluster_threshold", a.cluster_threshold);
            take(ja, "exemplars_per_cluster", a.exemplars_per_cluster);
        }
        if (j.contains("seeds")) {
            const auto& js = j.at("seeds");
            take(js, "clustering", c.seeds.clustering);
            take(js, "masks", c.seeds.masks);
            take(js, "pairs", c.seeds.pairs);
            take(js, "training", c.seeds.training);
            take(js, "clusters", c.seeds.clusters);
        }
        take(j, "saliency_for_true_class", c.saliency_for_true_class);
        take(j, "resume", c.resume);
        take(j, "threads", c.threads);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed pipeline config: ") + e.what());
    } catch (const ParseError& e) {
        throw ConfigError(e.what());
    }
    return c;
}

PipelineConfig desk_scale_profile(PipelineConfig config) {
    config.analysis.positive_pairs = 500;
    config.analysis.negative_pairs = 500;
    return config;
}

json read_config_file(const fs::path& path) {
    const std::string text = read_bytes(path);
    const std::string ext = path.extension().string();
    try {
        if (ext == ".yaml" || ext == ".yml") {
            return yaml_to_json(YAML::Load(text));
        }
        return json::parse(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& body) {
    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) {
            body(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                    next = count;
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

fs::path run_audit(const PipelineConfig& config, const ProgressLog& log) {
    config.validate();
    const fs::path out = config.output_dir;
    const fs::path cache_dir = out / "cache";
    fs::create_directories(out);

    StageLog stages;
    stages.file = out / "timings.json";
    stages.log = &log;

    std::shared_ptr<const ConvNetClassifier> model;
    Dataset dataset;
    AuditArtifact artifact;
    std::vector<const ImageRecord*> audit;
    std::unique_ptr<ImageStore> images;
    std::string input_key;

    stages.run("load", [&] {
        model = load_classifier(config.model_path);
        dataset = load_dataset(config.dataset_path);
        if (dataset.class_names != model->info().class_names) {
            throw ConfigError("dataset classes do not match the model's class list");
        }
        std::map<std::string, fs::path> paths;
        for (const auto& r : dataset.records) {
            if (r.split == Split::Audit) {
                audit.push_back(&r);
                paths.emplace(r.image_id, r.path);
            }
        }
        if (audit.empty()) {
            throw ConfigError("dataset has no audit-split images");
        }
        for (const auto& issue : dataset.errors) {
            artifact.notices.push_back("skipped image '" + issue.image_id + "': " + issue.message);
        }
        images = std::make_unique<ImageStore>(std::move(paths));
        input_key = hex(fnv1a(read_bytes(config.model_path) + '\n' + read_bytes(config.dataset_path)));
        return false;
    });

    const auto& info = model->info();
    const auto layers = info.layer_ids();
    const ImageLoader loader = [&](const std::string& id) { return images->get(id); };
    json run_config = to_json(config);
    run_config.erase("resume");
    run_config.erase("threads");
    const std::string config_key = hex(fnv1a(input_key + run_config.dump()));

    std::vector<std::string> ids;
    for (const auto* r : audit) {
        ids.push_back(r->image_id);
    }

    std::vector<InferenceRow> rows;
    ActivationIndex index;
    stages.run("predictions", [&] {
        bool cached = false;
        const fs::path cache_file = cache_dir / "inference.json";
        if (config.resume) {
            if (auto j = read_cache(cache_file, input_key)) {
                if (auto r = inference_from_json(*j, ids)) {
                    rows = std::move(*r);
                    cached = true;
                }
            }
        }
        if (!cached) {
            rows.assign(ids.size(), {});
            parallel_for(ids.size(), config.threads, [&](std::size_t i) {
                ImagePass pass = model->run(loader(ids[i]));
                rows[i].prediction = std::move(pass.prediction);
                rows[i].features = std::move(pass.features);
                for (const auto& a : pass.activations) {
                    rows[i].maxima.push_back(channel_maxima(a.values));
                }
            });
            write_json_atomic(cache_file, inference_to_json(input_key, ids, rows));
        }
        index.layers = layers;
        std::size_t correct = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            index.values[ids[i]] = rows[i].maxima;
            const auto& r = *audit[i];
            correct += rows[i].prediction.label == r.true_label ? 1 : 0;
            ImageEntry e;
            e.image_id = r.image_id;
            e.true_label = r.true_label;
            e.predicted_label = rows[i].prediction.label;
            e.scores = rows[i].prediction.scores;
            e.attributes = r.attributes;
            e.thumbnail = thumbnail_asset_path(r.image_id);
            artifact.images.push_back(std::move(e));
        }
        artifact.overall_accuracy = static_cast<double>(correct) / static_cast<double>(ids.size());
        parallel_for(ids.size(), config.threads, [&](std::size_t i) {
            const fs::path thumb = out / thumbnail_asset_path(ids[i]);
            if (!cached || !fs::exists(thumb)) {
                fs::create_directories(thumb.parent_path());
                write_png(thumb, info.preprocessing.to_input_space(loader(ids[i])));
            }
        });
        return cached;
    });

    stages.run("subgroups", [&] {
        FeatureMatrix features;
        std::vector<PredictedRecord> predicted;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            features.push_back(rows[i].features);
            predicted.push_back({ids[i], audit[i]->true_label, rows[i].prediction.label});
        }
        ClusteringConfig cc = config.clustering;
        cc.seed = config.seeds.clustering;
        if (cc.n_clusters == 0) {
            cc.n_clusters = default_cluster_count(ids.size());
        }
        const auto assignment = cluster_features(features, cc);
        artifact.subgroups = build_subgroups(assignment, predicted, features, info.class_names.size());
        select_underperforming(artifact.subgroups, artifact.overall_accuracy, config.selection);
        return false;
    });

    stages.run("pairings", [&] {
        std::size_t under = 0;
        for (const auto& g : artifact.subgroups) {
            if (g.status != SubgroupStatus::Underperforming) {
                continue;
            }
            ++under;
            if (auto p = pair_with_well_performing(g, artifact.subgroups)) {
                artifact.pairings.push_back(*p);
            } else {
                artifact.notices.push_back("underperforming subgroup " + std::to_string(g.subgroup_id) +
                                           " has no well-performing counterpart");
            }
        }
        if (under == 0) {
            artifact.notices.push_back("no underperforming subgroups found (overall accuracy " +
                                       std::to_string(artifact.overall_accuracy) + ")");
        }
        return false;
    });

    stages.run("saliency", [&] {
        std::vector<std::string> targets;
        std::set<std::string> seen;
        for (const auto& p : artifact.pairings) {
            for (std::size_t id : {p.under_id, p.well_id}) {
                for (const auto& m : artifact.find_subgroup(id)->member_ids) {
                    if (seen.insert(m).second) {
                        targets.push_back(m);
                    }
                }
            }
        }
        std::vector<std::vector<SaliencyEntry>> slots(targets.size());
        try {
            parallel_for(targets.size(), config.threads, [&](std::size_t i) {
                const ImageEntry& e = *artifact.find_image(targets[i]);
                std::vector<std::size_t> classes{e.predicted_label};
                if (config.saliency_for_true_class && e.true_label != e.predicted_label) {
                    classes.push_back(e.true_label);
                }
                const Image image = loader(e.image_id);
                const Image input = info.preprocessing.to_input_space(image);
                for (std::size_t cls : classes) {
                    const SaliencyMap map = grad_cam(*model, image, cls, info.saliency_layer, e.image_id);
                    const SaliencyMap up = upsample_to_input(map, info.preprocessing);
                    SaliencyEntry s;
                    s.image_id = e.image_id;
                    s.target_class = cls;
                    s.layer_id = map.layer_id;
                    s.height = map.heatmap.height;
                    s.width = map.heatmap.width;
                    s.heatmap.assign(map.heatmap.values.begin(), map.heatmap.values.end());
                    s.overlay = saliency_asset_path(e.image_id, cls);
                    const fs::path file = out / s.overlay;
                    fs::create_directories(file.parent_path());
                    write_png(file, render_overlay(input, up.heatmap));
                    slots[i].push_back(std::move(s));
                }
            });
        } catch (const CapabilityError& e) {
            artifact.notices.push_back(std::string("saliency unavailable: ") + e.what());
            return false;
        }
        for (auto& slot : slots) {
            for (auto& s : slot) {
                artifact.saliency.push_back(std::move(s));
            }
        }
        return false;
    });

    stages.run("neuron_scores", [&] {
        for (const auto& p : artifact.pairings) {
            const Subgroup& u = *artifact.find_subgroup(p.under_id);
            const Subgroup& w = *artifact.find_subgroup(p.well_id);
            artifact.neuron_scores.push_back({p.under_id, p.well_id,
                                              subgroup_scores(index, u.subgroup_id, u.member_ids,
                                                              config.analysis.activation_rate),
                                              subgroup_scores(index, w.subgroup_id, w.member_ids,
                                                              config.analysis.activation_rate)});
        }
        return false;
    });

    std::map<NeuronRef, double> max_scores;
    ConceptBuild concepts;
    stages.run("concept_patches", [&] {
        for (const auto& ps : artifact.neuron_scores) {
            for (const auto* side : {&ps.under, &ps.well}) {
                for (const auto& s : *side) {
                    double& m = max_scores[s.neuron];
                    m = std::max(m, s.score);
                }
            }
        }
        std::vector<NeuronRef> neurons;
        for (const auto& [neuron, score] : max_scores) {
            if (score >= kMinThreshold) {
                neurons.push_back(neuron);
            }
        }
        std::stable_sort(neurons.begin(), neurons.end(), [&](const NeuronRef& a, const NeuronRef& b) {
            const auto la = info.layer_index(a.layer_id), lb = info.layer_index(b.layer_id);
            return la != lb ? la < lb : a.channel < b.channel;
        });
        ConceptConfig cc;
        cc.top_images = config.analysis.top_images;
        cc.patches_per_neuron = config.analysis.patches_per_neuron;
        cc.masks = config.analysis.masks;
        cc.seed = config.seeds.masks;
        concepts = build_neuron_concepts(neurons, *model, index, loader, cc);
        for (const auto& w : concepts.warnings) {
            artifact.notices.push_back(w);
        }
        for (const auto& c : concepts.concepts) {
            for (const auto& p : c.patches) {
                const fs::path file = out / patch_asset_path(c.neuron, p.patch_id);
                fs::create_directories(file.parent_path());
                write_png(file, concepts.candidates.at(p.patch_id).pixels);
            }
        }
        artifact.concepts = concepts.concepts;
        return false;
    });

    const PatchLookup lookup = [&](const std::string& id) -> const Image& {
        return concepts.candidates.at(id).pixels;
    };
    std::optional<PatchEmbedder> embedder;
    stages.run("embedder_training", [&] {
        std::vector<PatchPair> pairs;
        try {
            pairs = sample_pairs(artifact.concepts, config.analysis.positive_pairs, config.analysis.negative_pairs,
                                 config.seeds.pairs);
        } catch (const ConfigError& e) {
            artifact.notices.push_back(std::string("embedder training skipped: ") + e.what());
            return false;
        }
        const fs::path cache_file = cache_dir / "embedder.json";
        EmbedderInfo e;
        e.checkpoint = kEmbedderFile;
        bool cached = false;
        if (config.resume) {
            if (auto j = read_cache(cache_file, config_key)) {
                embedder = PatchEmbedder::from_json(j->at("checkpoint"));
                e.loss_curve = decode_f64(j->at("loss_curve").get<std::string>());
                cached = true;
            }
        }
        if (!cached) {
            EmbedderTrainingConfig tc = config.analysis.embedder;
            tc.seed = config.seeds.training;
            auto result = train_embedder(pairs, PatchEmbedder::from_classifier(*model), lookup, tc);
            e.loss_curve = result.loss_curve;
            embedder = std::move(result.model);
            write_json_atomic(cache_file, json{{"key", config_key},
                                               {"checkpoint", embedder->checkpoint_json()},
                                               {"loss_curve", encode_f64(e.loss_curve)}});
        }
        embedder->save(out / kEmbedderFile);
        e.dimension = embedder->dimension();
        artifact.embedder = e;
        return cached;
    });

    stages.run("clustering", [&] {
        if (!embedder) {
            artifact.notices.push_back("neuron clustering skipped: no trained embedder");
            return false;
        }
        std::vector<std::string> patch_ids;
        for (const auto& c : artifact.concepts) {
            for (const auto& p : c.patches) {
                patch_ids.push_back(p.patch_id);
            }
        }
        std::sort(patch_ids.begin(), patch_ids.end());
        patch_ids.erase(std::unique(patch_ids.begin(), patch_ids.end()), patch_ids.end());
        std::vector<std::vector<double>> vectors(patch_ids.size());
        parallel_for(patch_ids.size(), config.threads,
                     [&](std::size_t i) { vectors[i] = embedder->embed(lookup(patch_ids[i])); });
        std::map<std::string, std::vector<double>> patch_vectors;
        for (std::size_t i = 0; i < patch_ids.size(); ++i) {
            patch_vectors.emplace(patch_ids[i], std::move(vectors[i]));
        }
        const auto order = clustering_order(artifact.concepts, max_scores, layers);
        ClusterAssignmentConfig ac;
        ac.threshold = config.analysis.cluster_threshold;
        ac.exemplars_per_cluster = config.analysis.exemplars_per_cluster;
        ac.seed = config.seeds.clusters;
        artifact.clusters = assign_clusters(artifact.concepts, order, patch_vectors, ac);
        return false;
    });

    fs::path manifest;
    stages.run("save", [&] {
        artifact.run_config = run_config;
        artifact.model = info;
        manifest = save(artifact, out);
        return false;
    });
    return manifest;
}

} // namespace cnnaudit
