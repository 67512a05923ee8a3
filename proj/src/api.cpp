#include "cnnaudit/api.hpp"

#include "cnnaudit/encoding.hpp"
#include "cnnaudit/errors.hpp"
#include "cnnaudit/neuron_analysis.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace cnnaudit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ApiResponse ok(const json& body) {
    return {200, "application/json", body.dump()};
}

ApiResponse error(int status, const std::string& code, const std::string& message) {
    return {status, "application/json",
            json{{"error", {{"status", status}, {"code", code}, {"message", message}}}}.dump()};
}

ApiResponse not_found(const std::string& message) {
    return error(404, "not_found", message);
}

ApiResponse invalid(const std::string& message) {
    return error(422, "invalid_parameter", message);
}

std::optional<std::size_t> parse_index(const std::string& text) {
    std::size_t value = 0;
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (text.empty() || ec != std::errc{} || ptr != end) {
        return std::nullopt;
    }
    return value;
}

std::optional<double> parse_number(const std::string& text) {
    if (text.empty()) {
        return std::nullopt;
    }
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (end != text.c_str() + text.size() || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

std::vector<std::string> split_path(std::string_view path) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= path.size()) {
        const std::size_t end = std::min(path.find('/', start), path.size());
        if (end > start) {
            parts.emplace_back(path.substr(start, end - start));
        }
        start = end + 1;
    }
    return parts;
}

json neuron_json(const NeuronRef& n) {
    return {{"layer", n.layer_id}, {"channel", n.channel}, {"key", n.key()}};
}

json confusion_rows(const ConfusionMatrix& m) {
    json rows = json::array();
    for (std::size_t t = 0; t < m.classes; ++t) {
        json row = json::array();
        for (std::size_t p = 0; p < m.classes; ++p) {
            row.push_back(m.at(t, p));
        }
        rows.push_back(row);
    }
    return rows;
}

std::string asset_url(const std::string& relative) {
    return "/assets/" + relative;
}

} // namespace

AuditApi::AuditApi(AuditArtifact artifact, fs::path directory)
    : artifact_(std::move(artifact)), directory_(std::move(directory)) {
    std::ostringstream tag;
    tag << '"' << std::hex << std::setw(16) << std::setfill('0') << fnv1a(render_manifest(artifact_)) << '"';
    etag_ = tag.str();
}

AuditApi AuditApi::open(const fs::path& path) {
    const fs::path dir = fs::is_directory(path) ? path : path.parent_path();
    return AuditApi(load(path), dir);
}

ApiResponse AuditApi::get(std::string_view path, const QueryParams& query) const {
    const auto p = split_path(path);
    const std::size_t n = p.size();
    if (n < 2 || p[0] != "api") {
        return not_found("no such endpoint: " + std::string(path));
    }
    const std::string& r = p[1];
    if (r == "meta" && n == 2) {
        return meta();
    }
    if (r == "openapi.json" && n == 2) {
        return ok(openapi_document());
    }
    if (r == "subgroups") {
        if (n == 2) {
            return subgroups(query);
        }
        if (n == 3) {
            return subgroup(p[2]);
        }
        if (n == 4 && p[3] == "pairing") {
            return pairing(p[2]);
        }
        if (n == 4 && p[3] == "confusion") {
            return confusion(p[2]);
        }
    }
    if (r == "images") {
        if (n == 3) {
            return image(p[2]);
        }
        if (n == 4 && p[3] == "gradcam") {
            return gradcam(p[2], query);
        }
    }
    if (r == "pairings" && n == 4 && p[3] == "neurons") {
        return neurons(p[2], query);
    }
    if (r == "neurons" && n == 5) {
        if (p[4] == "concept") {
            return concept_of(p[2], p[3]);
        }
        if (p[4] == "cluster") {
            return cluster(p[2], p[3]);
        }
    }
    return not_found("no such endpoint: " + std::string(path));
}

const Subgroup* AuditApi::subgroup_or_null(const std::string& id) const {
    const auto index = parse_index(id);
    return index ? artifact_.find_subgroup(*index) : nullptr;
}

json AuditApi::summary(const Subgroup& g) const {
    json s = {{"subgroup_id", g.subgroup_id},
              {"size", g.size()},
              {"accuracy", g.accuracy},
              {"correct", g.confusion.trace()},
              {"misclassified", g.size() - g.confusion.trace()},
              {"status", to_string(g.status)},
              {"paired_with", nullptr}};
    if (const auto* pair = artifact_.find_pairing(g.subgroup_id)) {
        s["paired_with"] = pair->well_id;
        s["pairing_distance"] = pair->distance;
    }
    return s;
}

ApiResponse AuditApi::meta() const {
    const auto& a = artifact_;
    std::size_t under = 0;
    for (const auto& g : a.subgroups) {
        under += g.status == SubgroupStatus::Underperforming ? 1 : 0;
    }
    double threshold_default = kMinThreshold;
    if (a.run_config.contains("analysis")) {
        threshold_default = a.run_config["analysis"].value("threshold_default", kMinThreshold);
    }
    json embedder = nullptr;
    if (a.embedder) {
        embedder = {{"dimension", a.embedder->dimension}, {"loss_curve", a.embedder->loss_curve}};
    }
    return ok({{"schema_version", a.schema_version},
               {"class_names", a.model.class_names},
               {"model", a.model.to_json()},
               {"overall_accuracy", a.overall_accuracy},
               {"threshold", {{"min", kMinThreshold}, {"max", kMaxThreshold}, {"default", threshold_default}}},
               {"counts",
                {{"images", a.images.size()},
                 {"subgroups", a.subgroups.size()},
                 {"underperforming", under},
                 {"pairings", a.pairings.size()},
                 {"neurons_with_concepts", a.concepts.size()},
                 {"clusters", a.clusters.size()}}},
               {"saliency_available", !a.saliency.empty()},
               {"embedder", embedder},
               {"notices", a.notices},
               {"run_config", a.run_config}});
}

ApiResponse AuditApi::subgroups(const QueryParams& query) const {
    std::optional<SubgroupStatus> wanted;
    if (auto it = query.find("status"); it != query.end()) {
        try {
            wanted = parse_status(it->second);
        } catch (const AuditError& e) {
            return invalid(e.what());
        }
    }
    std::vector<const Subgroup*> list;
    for (const auto& g : artifact_.subgroups) {
        if (!wanted || g.status == *wanted) {
            list.push_back(&g);
        }
    }
    std::stable_sort(list.begin(), list.end(), [](const Subgroup* a, const Subgroup* b) {
        return a->accuracy != b->accuracy ? a->accuracy < b->accuracy : a->subgroup_id < b->subgroup_id;
    });
    json out = json::array();
    for (const auto* g : list) {
        out.push_back(summary(*g));
    }
    return ok({{"overall_accuracy", artifact_.overall_accuracy}, {"subgroups", out}});
}

ApiResponse AuditApi::subgroup(const std::string& id) const {
    const Subgroup* g = subgroup_or_null(id);
    if (!g) {
        return not_found("unknown subgroup '" + id + "'");
    }
    json members = json::array();
    for (const auto& m : g->member_ids) {
        const ImageEntry& e = *artifact_.find_image(m);
        json classes = json::array();
        for (const auto* s : artifact_.find_saliency(m)) {
            classes.push_back(s->target_class);
        }
        members.push_back({{"image_id", e.image_id},
                           {"true_label", e.true_label},
                           {"predicted_label", e.predicted_label},
                           {"correct", e.true_label == e.predicted_label},
                           {"attributes", e.attributes},
                           {"thumbnail_url", "/api/images/" + e.image_id},
                           {"saliency_classes", classes}});
    }
    json out = summary(*g);
    out["members"] = members;
    out["confusion"] = confusion_rows(g->confusion);
    out["class_names"] = artifact_.model.class_names;
    return ok(out);
}

ApiResponse AuditApi::pairing(const std::string& id) const {
    const Subgroup* g = subgroup_or_null(id);
    if (!g) {
        return not_found("unknown subgroup '" + id + "'");
    }
    const SubgroupPairing* p = artifact_.find_pairing(g->subgroup_id);
    if (!p) {
        return not_found("subgroup " + id + " has no pairing");
    }
    return ok({{"under", summary(*g)},
               {"well", summary(*artifact_.find_subgroup(p->well_id))},
               {"distance", p->distance}});
}

ApiResponse AuditApi::confusion(const std::string& id) const {
    const Subgroup* g = subgroup_or_null(id);
    if (!g) {
        return not_found("unknown subgroup '" + id + "'");
    }
    return ok({{"subgroup_id", g->subgroup_id},
               {"class_names", artifact_.model.class_names},
               {"matrix", confusion_rows(g->confusion)}});
}

ApiResponse AuditApi::image(const std::string& image_id) const {
    const ImageEntry* e = artifact_.find_image(image_id);
    if (!e) {
        return not_found("unknown image '" + image_id + "'");
    }
    std::ifstream in(directory_ / e->thumbnail, std::ios::binary);
    if (e->thumbnail.empty() || !in) {
        return not_found("no thumbnail stored for image '" + image_id + "'");
    }
    std::ostringstream bytes;
    bytes << in.rdbuf();
    return {200, "image/png", bytes.str()};
}

ApiResponse AuditApi::gradcam(const std::string& image_id, const QueryParams& query) const {
    const ImageEntry* e = artifact_.find_image(image_id);
    if (!e) {
        return not_found("unknown image '" + image_id + "'");
    }
    std::size_t target = e->predicted_label;
    if (auto it = query.find("class"); it != query.end()) {
        const auto cls = parse_index(it->second);
        if (!cls || *cls >= artifact_.model.class_names.size()) {
            return invalid("class must be an index below " + std::to_string(artifact_.model.class_names.size()));
        }
        target = *cls;
    }
    json out = {{"image_id", e->image_id},
                {"true_label", e->true_label},
                {"predicted_label", e->predicted_label},
                {"scores", e->scores},
                {"class_names", artifact_.model.class_names},
                {"target_class", target},
                {"thumbnail_url", "/api/images/" + e->image_id},
                {"saliency", nullptr}};
    json available = json::array();
    for (const auto* s : artifact_.find_saliency(image_id)) {
        available.push_back(s->target_class);
        if (s->target_class == target) {
            out["saliency"] = {{"layer_id", s->layer_id},
                               {"height", s->height},
                               {"width", s->width},
                               {"heatmap", s->heatmap},
                               {"overlay_url", asset_url(s->overlay)}};
        }
    }
    out["available_classes"] = available;
    if (out["saliency"].is_null()) {
        out["notice"] = artifact_.saliency.empty() ? "saliency unavailable for this model"
                                                   : "no saliency map precomputed for this image and class";
    }
    return ok(out);
}

ApiResponse AuditApi::neurons(const std::string& under_id, const QueryParams& query) const {
    const auto id = parse_index(under_id);
    const PairingScores* scores = id ? artifact_.find_scores(*id) : nullptr;
    if (!scores) {
        return not_found("no pairing for subgroup '" + under_id + "'");
    }
    double threshold = kMinThreshold;
    if (artifact_.run_config.contains("analysis")) {
        threshold = artifact_.run_config["analysis"].value("threshold_default", kMinThreshold);
    }
    if (auto it = query.find("threshold"); it != query.end()) {
        const auto t = parse_number(it->second);
        if (!t || *t < kMinThreshold || *t > kMaxThreshold) {
            return invalid("threshold must be a number in [0.5, 1.0]");
        }
        threshold = *t;
    }
    const auto layers = artifact_.model.layer_ids();
    const NeuronPartition part = partition(scores->under, scores->well, threshold, layers);
    const auto column = [&](const std::vector<PartitionEntry>& entries) {
        json out = json::array();
        for (const auto& e : entries) {
            json item = neuron_json(e.neuron);
            item["score_under"] = e.score_under;
            item["score_well"] = e.score_well;
            const auto membership = cluster_of(artifact_.clusters, e.neuron);
            item["cluster_id"] = membership ? json(membership->cluster_id) : json(nullptr);
            item["has_concept"] = artifact_.find_concept(e.neuron) != nullptr;
            out.push_back(item);
        }
        return out;
    };
    return ok({{"under_id", scores->under_id},
               {"well_id", scores->well_id},
               {"threshold", threshold},
               {"layers", layers},
               {"under_only", column(part.under_only)},
               {"both", column(part.both)},
               {"well_only", column(part.well_only)}});
}

ApiResponse AuditApi::concept_of(const std::string& layer, const std::string& channel) const {
    const auto c = parse_index(channel);
    if (!artifact_.model.has_layer(layer) || !c || *c >= artifact_.model.layer(layer).channels) {
        return not_found("unknown neuron '" + layer + "/" + channel + "'");
    }
    const NeuronRef neuron{layer, *c};
    json scores = json::array();
    for (const auto& ps : artifact_.neuron_scores) {
        const auto score_in = [&](const std::vector<NeuronActivationScore>& list) {
            for (const auto& s : list) {
                if (s.neuron == neuron) {
                    return s.score;
                }
            }
            return 0.0;
        };
        scores.push_back({{"under_id", ps.under_id},
                          {"well_id", ps.well_id},
                          {"score_under", score_in(ps.under)},
                          {"score_well", score_in(ps.well)}});
    }
    json patches = json::array();
    const NeuronConcept* nc = artifact_.find_concept(neuron);
    if (nc) {
        for (const auto& p : nc->patches) {
            patches.push_back({{"patch_id", p.patch_id},
                               {"source_image_id", p.source_image_id},
                               {"box", {{"top", p.box.top}, {"left", p.box.left}, {"size", p.box.size}}},
                               {"activation", p.activation},
                               {"url", asset_url(patch_asset_path(neuron, p.patch_id))}});
        }
    }
    return ok({{"neuron", neuron_json(neuron)},
               {"concept_available", nc != nullptr},
               {"scores", scores},
               {"patches", patches}});
}

ApiResponse AuditApi::cluster(const std::string& layer, const std::string& channel) const {
    const auto c = parse_index(channel);
    if (!artifact_.model.has_layer(layer) || !c || *c >= artifact_.model.layer(layer).channels) {
        return not_found("unknown neuron '" + layer + "/" + channel + "'");
    }
    const NeuronRef neuron{layer, *c};
    const auto membership = cluster_of(artifact_.clusters, neuron);
    json out = {{"neuron", neuron_json(neuron)},
                {"clustered", membership.has_value()},
                {"cluster_id", nullptr},
                {"co_members", json::array()}};
    if (membership) {
        out["cluster_id"] = membership->cluster_id;
        for (const auto& m : membership->co_members) {
            out["co_members"].push_back(neuron_json(m));
        }
    }
    return ok(out);
}

json openapi_document() {
    const auto param = [](const char* name, const char* in, const char* type, bool required, const char* text) {
        return json{{"name", name},
                    {"in", in},
                    {"required", required},
                    {"schema", {{"type", type}}},
                    {"description", text}};
    };
    const json error_ref = {{"$ref", "#/components/schemas/Error"}};
    const auto op = [&](const char* summary, json params, const char* media = "application/json") {
        json responses = {{"200", {{"description", "OK"}, {"content", {{media, json::object()}}}}},
                          {"404", {{"description", "Unknown id"},
                                   {"content", {{"application/json", {{"schema", error_ref}}}}}}}};
        for (const auto& p : params) {
            if (p["in"] == "query") {
                responses["422"] = {{"description", "Invalid query parameter"},
                                    {"content", {{"application/json", {{"schema", error_ref}}}}}};
            }
        }
        return json{{"get", {{"summary", summary}, {"parameters", params}, {"responses", responses}}}};
    };
    const json sub_id = param("id", "path", "integer", true, "Subgroup id");
    const json layer = param("layer", "path", "string", true, "Layer id");
    const json channel = param("channel", "path", "integer", true, "Channel index");
    const json image_id = param("image_id", "path", "string", true, "Image id");
    return {
        {"openapi", "3.0.3"},
        {"info", {{"title", "CNN audit API"}, {"version", std::to_string(kSchemaVersion)}}},
        {"paths",
         {{"/api/meta", op("Artifact metadata, class names, layers and notices", json::array())},
          {"/api/subgroups",
           op("Subgroups sorted by ascending accuracy",
              json::array({param("status", "query", "string", false,
                                 "underperforming | well_performing | other")}))},
          {"/api/subgroups/{id}", op("Subgroup summary with members and confusion matrix", json::array({sub_id}))},
          {"/api/subgroups/{id}/pairing", op("Paired well-performing subgroup", json::array({sub_id}))},
          {"/api/subgroups/{id}/confusion", op("Confusion matrix (rows true, columns predicted)",
                                               json::array({sub_id}))},
          {"/api/images/{image_id}", op("Input-space thumbnail", json::array({image_id}), "image/png")},
          {"/api/images/{image_id}/gradcam",
           op("Stored Grad-CAM heatmap and overlay",
              json::array({image_id, param("class", "query", "integer", false, "Target class index")}))},
          {"/api/pairings/{under_id}/neurons",
           op("Three-column neuron partition",
              json::array({param("under_id", "path", "integer", true, "Underperforming subgroup id"),
                           param("threshold", "query", "number", false, "Score threshold in [0.5, 1.0]")}))},
          {"/api/neurons/{layer}/{channel}/concept",
           op("Activation scores and top concept patches", json::array({layer, channel}))},
          {"/api/neurons/{layer}/{channel}/cluster", op("Cluster co-members", json::array({layer, channel}))},
          {"/api/openapi.json", op("This document", json::array())}}},
        {"components",
         {{"schemas",
           {{"Error",
             {{"type", "object"},
              {"properties",
               {{"error",
                 {{"type", "object"},
                  {"properties",
                   {{"status", {{"type", "integer"}}},
                    {"code", {{"type", "string"}}},
                    {"message", {{"type", "string"}}}}}}}}}}}}}}},
    };
}

int port_from_env(int fallback) {
    if (const char* env = std::getenv("AUDIT_PORT")) {
        if (const auto p = parse_index(env); p && *p > 0 && *p < 65536) {
            return static_cast<int>(*p);
        }
        throw ConfigError(std::string("AUDIT_PORT is not a valid port: ") + env);
    }
    return fallback;
}

struct ApiServer::Impl {
    httplib::Server server;
};

ApiServer::ApiServer(const AuditApi& api, const std::optional<fs::path>& ui_dir) : impl_(std::make_unique<Impl>()) {
    auto& server = impl_->server;
    for (const char* sub : {"saliency", "patches", "thumbnails"}) {
        const fs::path dir = api.directory() / sub;
        if (fs::is_directory(dir)) {
            server.set_mount_point(std::string("/assets/") + sub, dir.string());
        }
    }
    if (ui_dir && fs::is_directory(*ui_dir)) {
        server.set_mount_point("/", ui_dir->string());
    }
    server.Get(R"(/api/.*)", [&api](const httplib::Request& req, httplib::Response& res) {
        res.set_header("ETag", api.etag());
        res.set_header("Cache-Control", "public, max-age=3600");
        if (req.get_header_value("If-None-Match") == api.etag()) {
            res.status = 304;
            return;
        }
        QueryParams query;
        for (const auto& [k, v] : req.params) {
            query.emplace(k, v);
        }
        const ApiResponse r = api.get(req.path, query);
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    });
    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.body.empty() && res.status >= 400) {
            const ApiResponse r = error(res.status, res.status == 404 ? "not_found" : "error",
                                        "no resource at " + req.path);
            res.set_content(r.body, r.content_type);
        }
    });
}

ApiServer::~ApiServer() {
    stop();
}

int ApiServer::bind(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) {
        throw AuditError("cannot listen on " + host + ":" + std::to_string(port));
    }
    return bound;
}

void ApiServer::listen() {
    impl_->server.listen_after_bind();
}

void ApiServer::stop() {
    impl_->server.stop();
}

} // namespace cnnaudit
