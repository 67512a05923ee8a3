#include "cnnaudit/api.hpp"
#include "cnnaudit/demo.hpp"
#include "cnnaudit/pipeline.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iomanip>
#include <iostream>
#include <optional>

using namespace cnnaudit;
using nlohmann::json;

namespace {

ApiServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) {
        g_server->stop();
    }
}

void log_line(const std::string& message) {
    std::cerr << "[audit] " << message << std::endl;
}

template <class T>
void put(json& j, const std::string& pointer, const std::optional<T>& value) {
    if (value) {
        j[json::json_pointer(pointer)] = *value;
    }
}

struct RunFlags {
    std::string config_file;
    std::optional<std::string> model, dataset, out, linkage, bias_attribute;
    std::optional<std::size_t> n_clusters, min_size, top_images, patches_per_neuron, mask_count, mask_size,
        mask_separation, positive_pairs, negative_pairs, epochs, batch_size, exemplars, bias_label, threads;
    std::optional<double> activation_rate, threshold_default, well_margin, learning_rate, weight_decay,
        cluster_threshold, bias_target;
    std::optional<std::uint64_t> seed;
    bool desk_scale = false;
    bool resume = false;

    void attach(CLI::App& app, bool with_paths) {
        app.add_option("--config", config_file, "JSON or YAML config file; flags override it");
        if (with_paths) {
            app.add_option("--model", model, "Classifier checkpoint");
            app.add_option("--dataset", dataset, "Dataset manifest (.csv or .jsonl)");
            app.add_option("--out", out, "Artifact output directory");
        }
        app.add_option("--n-clusters", n_clusters, "Subgroup count (0: N/25 clamped to [10, 500])");
        app.add_option("--linkage", linkage, "ward or kmeans");
        app.add_option("--well-margin", well_margin, "Well-performing margin below overall accuracy");
        app.add_option("--min-size", min_size, "Smallest subgroup that can be selected");
        app.add_option("--activation-rate", activation_rate, "Share of layer activation marking top neurons");
        app.add_option("--threshold-default", threshold_default, "Initial neuron score threshold");
        app.add_option("--top-images", top_images, "Top activating images per neuron");
        app.add_option("--patches-per-neuron", patches_per_neuron, "Concept patches kept per neuron");
        app.add_option("--mask-count", mask_count, "Masks per image");
        app.add_option("--mask-size", mask_size, "Mask side in input pixels");
        app.add_option("--mask-separation", mask_separation, "Minimum gap between masks");
        app.add_option("--positive-pairs", positive_pairs, "Same-neuron training pairs");
        app.add_option("--negative-pairs", negative_pairs, "Cross-neuron training pairs");
        app.add_option("--epochs", epochs, "Embedder epochs");
        app.add_option("--lr", learning_rate, "Embedder learning rate");
        app.add_option("--batch-size", batch_size, "Embedder batch size");
        app.add_option("--weight-decay", weight_decay, "Embedder weight decay");
        app.add_option("--cluster-threshold", cluster_threshold, "Neuron cluster similarity threshold");
        app.add_option("--exemplars", exemplars, "Exemplar patches per neuron cluster");
        app.add_option("--bias-attribute", bias_attribute, "Attribute of the injected training bias, recorded with the run");
        app.add_option("--bias-label", bias_label, "Label the biased attribute co-occurs with");
        app.add_option("--bias-target", bias_target, "Target co-occurrence of that attribute and label");
        app.add_option("--seed", seed, "Base seed; stage seeds are seed..seed+4");
        app.add_option("--threads", threads, "Worker threads (0: all cores)");
        app.add_flag("--desk-scale", desk_scale, "500 + 500 embedder pairs instead of 10,000 + 10,000");
        app.add_flag("--resume", resume, "Reuse cached intermediates from a previous run");
    }

    PipelineConfig build(PipelineConfig base) const {
        if (desk_scale) {
            base = desk_scale_profile(base);
        }
        if (!config_file.empty()) {
            base = pipeline_config_from_json(read_config_file(config_file), base);
        }
        json j = json::object();
        put(j, "/model_path", model);
        put(j, "/dataset_path", dataset);
        put(j, "/output_dir", out);
        put(j, "/clustering/n_clusters", n_clusters);
        put(j, "/clustering/linkage", linkage);
        put(j, "/selection/well_margin", well_margin);
        put(j, "/selection/min_size", min_size);
        put(j, "/analysis/activation_rate", activation_rate);
        put(j, "/analysis/threshold_default", threshold_default);
        put(j, "/analysis/top_images", top_images);
        put(j, "/analysis/patches_per_neuron", patches_per_neuron);
        put(j, "/analysis/masks/count", mask_count);
        put(j, "/analysis/masks/size", mask_size);
        put(j, "/analysis/masks/min_separation", mask_separation);
        put(j, "/analysis/positive_pairs", positive_pairs);
        put(j, "/analysis/negative_pairs", negative_pairs);
        put(j, "/analysis/embedder/epochs", epochs);
        put(j, "/analysis/embedder/learning_rate", learning_rate);
        put(j, "/analysis/embedder/batch_size", batch_size);
        put(j, "/analysis/embedder/weight_decay", weight_decay);
        put(j, "/analysis/cluster_threshold", cluster_threshold);
        put(j, "/analysis/exemplars_per_cluster", exemplars);
        put(j, "/bias/attribute", bias_attribute);
        put(j, "/bias/label", bias_label);
        put(j, "/bias/target_cooccurrence", bias_target);
        put(j, "/threads", threads);
        if (seed) {
            j["seeds"] = {{"clustering", *seed},
                          {"masks", *seed + 1},
                          {"pairs", *seed + 2},
                          {"training", *seed + 3},
                          {"clusters", *seed + 4}};
        }
        if (resume) {
            j["resume"] = true;
        }
        return pipeline_config_from_json(j, base);
    }
};

int serve_artifact(const std::string& path, const std::string& host, std::optional<int> port,
                   const std::optional<std::string>& ui_dir) {
    const AuditApi api = AuditApi::open(path);
    ApiServer server(api, ui_dir ? std::optional<std::filesystem::path>(*ui_dir) : std::nullopt);
    const int bound = server.bind(host, port ? *port : port_from_env());
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    log_line("serving " + path + " on http://" + host + ":" + std::to_string(bound));
    server.listen();
    g_server = nullptr;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Audit a CNN image classifier for underperforming subgroups and the neurons behind them"};
    app.require_subcommand(1);

    RunFlags run_flags;
    auto* run = app.add_subcommand("run", "Run the audit pipeline and write an artifact");
    run_flags.attach(*run, true);

    std::string serve_path;
    std::string host = "127.0.0.1";
    std::optional<int> port;
    std::optional<std::string> ui_dir;
    auto* serve = app.add_subcommand("serve", "Serve an artifact over the read-only HTTP API");
    serve->add_option("artifact", serve_path, "Artifact directory or manifest.json")->required();
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--port", port, "Port (default: $AUDIT_PORT, else 8080)");
    serve->add_option("--ui-dir", ui_dir, "Static UI build to mount at /");

    std::string validate_path;
    auto* validate = app.add_subcommand("validate", "Check an artifact's schema and references");
    validate->add_option("artifact", validate_path, "Artifact directory or manifest.json")->required();

    std::string demo_out = "demo-output";
    std::optional<std::uint64_t> demo_seed;
    bool demo_full = false;
    bool demo_serve = false;
    std::optional<std::size_t> demo_threads;
    auto* demo = app.add_subcommand("demo", "Generate the biased shapes dataset, train a small CNN, run the audit");
    demo->add_option("--out", demo_out, "Output directory");
    demo->add_option("--seed", demo_seed, "Dataset and training seed");
    demo->add_option("--threads", demo_threads, "Worker threads (0: all cores)");
    demo->add_flag("--full-scale", demo_full, "Train the embedder on 10,000 + 10,000 pairs");
    demo->add_flag("--serve", demo_serve, "Serve the artifact when done");
    demo->add_option("--port", port, "Port for --serve");

    app.add_subcommand("openapi", "Print the OpenAPI description of the HTTP API");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const PipelineConfig config = run_flags.build({});
            const auto manifest = run_audit(config, log_line);
            std::cout << manifest.string() << '\n';
        } else if (*serve) {
            return serve_artifact(serve_path, host, port, ui_dir);
        } else if (*validate) {
            const AuditArtifact a = load(validate_path);
            std::cout << "OK: schema " << a.schema_version << ", " << a.images.size() << " images, "
                      << a.subgroups.size() << " subgroups, " << a.pairings.size() << " pairings, "
                      << a.concepts.size() << " neuron concepts, " << a.clusters.size() << " clusters\n";
        } else if (*demo) {
            DemoConfig config;
            config.output_dir = demo_out;
            if (demo_full) {
                config.pipeline = PipelineConfig{};
            }
            if (demo_seed) {
                config.shapes.seed = *demo_seed;
                config.training.seed = *demo_seed + 4;
            }
            if (demo_threads) {
                config.pipeline.threads = *demo_threads;
            }
            const DemoResult r = run_demo(config, log_line);
            const AuditArtifact a = load(r.manifest);
            std::cout << "artifact: " << r.manifest.string() << '\n'
                      << "overall accuracy: " << a.overall_accuracy << '\n';
            for (const auto& p : underperforming_purity(a, kSpuriousAttribute)) {
                const auto* g = a.find_subgroup(p.subgroup_id);
                std::cout << "underperforming subgroup " << p.subgroup_id << ": " << p.size << " images, accuracy "
                          << g->accuracy << ", " << std::setprecision(3) << 100.0 * p.purity << "% are "
                          << kShapeClasses.at(p.label) << " on " << (p.attribute ? "red" : "blue") << '\n';
            }
            std::cout << "elapsed: " << std::fixed << std::setprecision(1) << r.seconds << " s\n";
            if (demo_serve) {
                return serve_artifact(r.manifest.parent_path().string(), host, port, std::nullopt);
            }
        } else {
            std::cout << openapi_document().dump(2) << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
