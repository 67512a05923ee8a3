#include "cnnaudit/audit_store.hpp"

#include "cnnaudit/encoding.hpp"
#include "cnnaudit/errors.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace cnnaudit {

namespace fs = std::filesystem;
using nlohmann::json;

const ImageEntry* AuditArtifact::find_image(const std::string& image_id) const {
    for (const auto& i : images) {
        if (i.image_id == image_id) {
            return &i;
        }
    }
    return nullptr;
}

const Subgroup* AuditArtifact::find_subgroup(std::size_t subgroup_id) const {
    for (const auto& g : subgroups) {
        if (g.subgroup_id == subgroup_id) {
            return &g;
        }
    }
    return nullptr;
}

const SubgroupPairing* AuditArtifact::find_pairing(std::size_t under_id) const {
    for (const auto& p : pairings) {
        if (p.under_id == under_id) {
            return &p;
        }
    }
    return nullptr;
}

const PairingScores* AuditArtifact::find_scores(std::size_t under_id) const {
    for (const auto& s : neuron_scores) {
        if (s.under_id == under_id) {
            return &s;
        }
    }
    return nullptr;
}

const NeuronConcept* AuditArtifact::find_concept(const NeuronRef& neuron) const {
    for (const auto& c : concepts) {
        if (c.neuron == neuron) {
            return &c;
        }
    }
    return nullptr;
}

std::vector<const SaliencyEntry*> AuditArtifact::find_saliency(const std::string& image_id) const {
    std::vector<const SaliencyEntry*> out;
    for (const auto& s : saliency) {
        if (s.image_id == image_id) {
            out.push_back(&s);
        }
    }
    return out;
}

std::string saliency_asset_path(const std::string& image_id, std::size_t target_class) {
    return "saliency/" + image_id + "_" + std::to_string(target_class) + ".png";
}

std::string patch_asset_path(const NeuronRef& neuron, const std::string& patch_id) {
    return "patches/" + neuron.layer_id + "-" + std::to_string(neuron.channel) + "/" + patch_id + ".png";
}

std::string thumbnail_asset_path(const std::string& image_id) { return "thumbnails/" + image_id + ".png"; }

json asset_layout() {
    return {{"manifest", kManifestFile},
            {"saliency", "saliency/"},
            {"patches", "patches/"},
            {"thumbnails", "thumbnails/"},
            {"embedder", kEmbedderFile}};
}

namespace {

json neuron_json(const NeuronRef& n) { return {{"layer", n.layer_id}, {"channel", n.channel}}; }

NeuronRef neuron_from(const json& j) { return {j.at("layer").get<std::string>(), j.at("channel").get<std::size_t>()}; }

json scores_json(const std::vector<NeuronActivationScore>& scores) {
    json out = json::array();
    for (const auto& s : scores) {
        out.push_back({{"layer", s.neuron.layer_id}, {"channel", s.neuron.channel}, {"count", s.count},
                       {"score", s.score}});
    }
    return out;
}

std::vector<NeuronActivationScore> scores_from(const json& j, std::size_t subgroup_id) {
    std::vector<NeuronActivationScore> out;
    for (const auto& s : j) {
        out.push_back({neuron_from(s), subgroup_id, s.at("count").get<std::size_t>(), s.at("score").get<double>()});
    }
    return out;
}

json confusion_json(const ConfusionMatrix& m) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.classes; ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < m.classes; ++j) {
            row.push_back(m.at(i, j));
        }
        rows.push_back(row);
    }
    return rows;
}

ConfusionMatrix confusion_from(const json& rows) {
    ConfusionMatrix m(rows.size());
    for (std::size_t i = 0; i < m.classes; ++i) {
        if (rows[i].size() != m.classes) {
            throw ParseError("confusion matrix is not square");
        }
        for (std::size_t j = 0; j < m.classes; ++j) {
            m.at(i, j) = rows[i][j].get<std::size_t>();
        }
    }
    return m;
}

} // namespace

json to_json(const AuditArtifact& a) {
    json j;
    j["schema_version"] = a.schema_version;
    j["run_config"] = a.run_config;
    j["model"] = a.model.to_json();
    j["overall_accuracy"] = a.overall_accuracy;
    j["layout"] = asset_layout();
    j["notices"] = a.notices;

    j["images"] = json::array();
    for (const auto& i : a.images) {
        j["images"].push_back({{"image_id", i.image_id},
                               {"true_label", i.true_label},
                               {"predicted_label", i.predicted_label},
                               {"scores", i.scores},
                               {"attributes", i.attributes},
                               {"thumbnail", i.thumbnail}});
    }
    j["subgroups"] = json::array();
    for (const auto& g : a.subgroups) {
        j["subgroups"].push_back({{"subgroup_id", g.subgroup_id},
                                  {"member_ids", g.member_ids},
                                  {"size", g.size()},
                                  {"correct", g.confusion.trace()},
                                  {"accuracy", g.accuracy},
                                  {"embedding", g.embedding},
                                  {"confusion", confusion_json(g.confusion)},
                                  {"status", to_string(g.status)}});
    }
    j["pairings"] = json::array();
    for (const auto& p : a.pairings) {
        j["pairings"].push_back({{"under_id", p.under_id}, {"well_id", p.well_id}, {"distance", p.distance}});
    }
    j["saliency"] = json::array();
    for (const auto& s : a.saliency) {
        j["saliency"].push_back({{"image_id", s.image_id},
                                 {"target_class", s.target_class},
                                 {"layer_id", s.layer_id},
                                 {"height", s.height},
                                 {"width", s.width},
                                 {"heatmap_f32le", encode_f32(s.heatmap)},
                                 {"overlay", s.overlay}});
    }
    j["neuron_scores"] = json::array();
    for (const auto& s : a.neuron_scores) {
        j["neuron_scores"].push_back({{"under_id", s.under_id},
                                      {"well_id", s.well_id},
                                      {"under", scores_json(s.under)},
                                      {"well", scores_json(s.well)}});
    }
    j["concepts"] = json::array();
    for (const auto& c : a.concepts) {
        json patches = json::array();
        for (const auto& p : c.patches) {
            patches.push_back({{"patch_id", p.patch_id},
                               {"source_image_id", p.source_image_id},
                               {"top", p.box.top},
                               {"left", p.box.left},
                               {"size", p.box.size},
                               {"activation", p.activation},
                               {"path", patch_asset_path(c.neuron, p.patch_id)}});
        }
        j["concepts"].push_back({{"layer", c.neuron.layer_id}, {"channel", c.neuron.channel}, {"patches", patches}});
    }
    j["clusters"] = json::array();
    for (const auto& c : a.clusters) {
        json members = json::array();
        for (const auto& n : c.member_neurons) {
            members.push_back(neuron_json(n));
        }
        j["clusters"].push_back(
            {{"cluster_id", c.cluster_id}, {"members", members}, {"exemplar_patch_ids", c.exemplar_patch_ids}});
    }
    if (a.embedder) {
        j["embedder"] = {{"checkpoint", a.embedder->checkpoint},
                         {"dimension", a.embedder->dimension},
                         {"loss_curve", a.embedder->loss_curve}};
    } else {
        j["embedder"] = nullptr;
    }
    return j;
}

AuditArtifact artifact_from_json(const json& j) {
    AuditArtifact a;
    try {
        const auto& version = j.at("schema_version");
        if (!version.is_number_integer()) {
            throw VersionError("schema_version must be an integer");
        }
        a.schema_version = version.get<int>();
        if (a.schema_version != kSchemaVersion) {
            throw VersionError("unsupported schema_version " + std::to_string(a.schema_version) + " (this build reads " +
                               std::to_string(kSchemaVersion) + ")");
        }
        a.run_config = j.at("run_config");
        a.model = ClassifierInfo::from_json(j.at("model"));
        a.overall_accuracy = j.at("overall_accuracy").get<double>();
        a.notices = j.at("notices").get<std::vector<std::string>>();
        for (const auto& i : j.at("images")) {
            a.images.push_back({i.at("image_id").get<std::string>(), i.at("true_label").get<std::size_t>(),
                                i.at("predicted_label").get<std::size_t>(), i.at("scores").get<std::vector<double>>(),
                                i.at("attributes").get<std::map<std::string, bool>>(),
                                i.at("thumbnail").get<std::string>()});
        }
        for (const auto& g : j.at("subgroups")) {
            Subgroup s;
            s.subgroup_id = g.at("subgroup_id").get<std::size_t>();
            s.member_ids = g.at("member_ids").get<std::vector<std::string>>();
            s.accuracy = g.at("accuracy").get<double>();
            s.embedding = g.at("embedding").get<std::vector<double>>();
            s.confusion = confusion_from(g.at("confusion"));
            s.status = parse_status(g.at("status").get<std::string>());
            a.subgroups.push_back(std::move(s));
        }
        for (const auto& p : j.at("pairings")) {
            a.pairings.push_back({p.at("under_id").get<std::size_t>(), p.at("well_id").get<std::size_t>(),
                                  p.at("distance").get<double>()});
        }
        for (const auto& s : j.at("saliency")) {
            a.saliency.push_back({s.at("image_id").get<std::string>(), s.at("target_class").get<std::size_t>(),
                                  s.at("layer_id").get<std::string>(), s.at("height").get<std::size_t>(),
                                  s.at("width").get<std::size_t>(), decode_f32(s.at("heatmap_f32le").get<std::string>()),
                                  s.at("overlay").get<std::string>()});
        }
        for (const auto& s : j.at("neuron_scores")) {
            PairingScores ps;
            ps.under_id = s.at("under_id").get<std::size_t>();
            ps.well_id = s.at("well_id").get<std::size_t>();
            ps.under = scores_from(s.at("under"), ps.under_id);
            ps.well = scores_from(s.at("well"), ps.well_id);
            a.neuron_scores.push_back(std::move(ps));
        }
        for (const auto& c : j.at("concepts")) {
            NeuronConcept nc;
            nc.neuron = neuron_from(c);
            for (const auto& p : c.at("patches")) {
                nc.patches.push_back({p.at("patch_id").get<std::string>(), p.at("source_image_id").get<std::string>(),
                                      Box{p.at("top").get<std::size_t>(), p.at("left").get<std::size_t>(),
                                          p.at("size").get<std::size_t>()},
                                      p.at("activation").get<double>()});
            }
            a.concepts.push_back(std::move(nc));
        }
        for (const auto& c : j.at("clusters")) {
            NeuronCluster nc;
            nc.cluster_id = c.at("cluster_id").get<std::size_t>();
            for (const auto& m : c.at("members")) {
                nc.member_neurons.push_back(neuron_from(m));
            }
            nc.exemplar_patch_ids = c.at("exemplar_patch_ids").get<std::vector<std::string>>();
            a.clusters.push_back(std::move(nc));
        }
        if (!j.at("embedder").is_null()) {
            const auto& e = j.at("embedder");
            a.embedder = EmbedderInfo{e.at("checkpoint").get<std::string>(), e.at("dimension").get<std::size_t>(),
                                      e.at("loss_curve").get<std::vector<double>>()};
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed artifact manifest: ") + e.what());
    }
    return a;
}

void canonicalize_floats(json& j) {
    if (j.is_number_float()) {
        j = round_sig6(j.get<double>());
    } else if (j.is_structured()) {
        for (auto& child : j) {
            canonicalize_floats(child);
        }
    }
}

std::string render_manifest(const AuditArtifact& artifact) {
    json j = to_json(artifact);
    canonicalize_floats(j);
    return j.dump(1) + "\n";
}

void validate(const AuditArtifact& a, const std::optional<fs::path>& directory) {
    const auto fail = [](const std::string& what) { throw ValidationError("dangling reference: " + what); };
    const auto asset_exists = [&](const std::string& rel) {
        return !directory || fs::exists(*directory / rel);
    };
    const std::size_t classes = a.model.class_names.size();

    std::set<std::string> image_ids;
    for (const auto& i : a.images) {
        if (!image_ids.insert(i.image_id).second) {
            throw ValidationError("duplicate image_id '" + i.image_id + "'");
        }
        if (i.true_label >= classes || i.predicted_label >= classes) {
            throw ValidationError("image '" + i.image_id + "' has a label outside the class list");
        }
        if (!i.thumbnail.empty() && !asset_exists(i.thumbnail)) {
            fail("thumbnail file '" + i.thumbnail + "' of image '" + i.image_id + "'");
        }
    }
    const auto neuron_ok = [&](const NeuronRef& n) {
        return a.model.has_layer(n.layer_id) && n.channel < a.model.layer(n.layer_id).channels;
    };

    std::map<std::size_t, const Subgroup*> groups;
    for (const auto& g : a.subgroups) {
        if (!groups.emplace(g.subgroup_id, &g).second) {
            throw ValidationError("duplicate subgroup_id " + std::to_string(g.subgroup_id));
        }
        for (const auto& m : g.member_ids) {
            if (!image_ids.contains(m)) {
                fail("image_id '" + m + "' in subgroup " + std::to_string(g.subgroup_id));
            }
        }
        if (g.confusion.classes != classes || g.confusion.total() != g.size()) {
            throw ValidationError("confusion matrix of subgroup " + std::to_string(g.subgroup_id) +
                                  " does not match its members");
        }
    }
    for (const auto& p : a.pairings) {
        if (!groups.contains(p.under_id)) {
            fail("subgroup_id " + std::to_string(p.under_id) + " in pairing");
        }
        if (!groups.contains(p.well_id)) {
            fail("subgroup_id " + std::to_string(p.well_id) + " in pairing of " + std::to_string(p.under_id));
        }
    }
    for (const auto& s : a.saliency) {
        if (!image_ids.contains(s.image_id)) {
            fail("image_id '" + s.image_id + "' in saliency index");
        }
        if (!a.model.has_layer(s.layer_id)) {
            fail("layer '" + s.layer_id + "' in saliency of '" + s.image_id + "'");
        }
        if (s.target_class >= classes || s.heatmap.size() != s.height * s.width) {
            throw ValidationError("malformed saliency entry for '" + s.image_id + "'");
        }
        if (!asset_exists(s.overlay)) {
            fail("overlay file '" + s.overlay + "' of image '" + s.image_id + "'");
        }
    }
    for (const auto& ps : a.neuron_scores) {
        if (!groups.contains(ps.under_id) || !groups.contains(ps.well_id)) {
            fail("subgroup in neuron scores of pairing " + std::to_string(ps.under_id));
        }
        for (const auto* list : {&ps.under, &ps.well}) {
            for (const auto& s : *list) {
                if (!neuron_ok(s.neuron)) {
                    fail("neuron " + s.neuron.key() + " in neuron scores");
                }
            }
        }
    }
    std::map<NeuronRef, std::set<std::string>> concept_patches;
    std::set<std::string> all_patches;
    for (const auto& c : a.concepts) {
        if (!neuron_ok(c.neuron)) {
            fail("neuron " + c.neuron.key() + " in concepts");
        }
        auto& ids = concept_patches[c.neuron];
        for (const auto& p : c.patches) {
            if (!image_ids.contains(p.source_image_id)) {
                fail("image_id '" + p.source_image_id + "' of patch_id '" + p.patch_id + "'");
            }
            if (!asset_exists(patch_asset_path(c.neuron, p.patch_id))) {
                fail("patch_id '" + p.patch_id + "' (missing file " + patch_asset_path(c.neuron, p.patch_id) + ")");
            }
            ids.insert(p.patch_id);
            all_patches.insert(p.patch_id);
        }
    }
    std::set<std::size_t> cluster_ids;
    std::set<NeuronRef> clustered;
    for (const auto& c : a.clusters) {
        if (!cluster_ids.insert(c.cluster_id).second) {
            throw ValidationError("duplicate cluster_id " + std::to_string(c.cluster_id));
        }
        if (c.member_neurons.empty()) {
            throw ValidationError("cluster " + std::to_string(c.cluster_id) + " is empty");
        }
        for (const auto& n : c.member_neurons) {
            if (!concept_patches.contains(n)) {
                fail("neuron " + n.key() + " in cluster " + std::to_string(c.cluster_id));
            }
            if (!clustered.insert(n).second) {
                throw ValidationError("neuron " + n.key() + " belongs to more than one cluster");
            }
        }
        for (const auto& e : c.exemplar_patch_ids) {
            if (!all_patches.contains(e)) {
                fail("patch_id '" + e + "' in cluster " + std::to_string(c.cluster_id));
            }
        }
    }
    if (a.embedder && !asset_exists(a.embedder->checkpoint)) {
        fail("embedder checkpoint '" + a.embedder->checkpoint + "'");
    }
}

fs::path save(const AuditArtifact& artifact, const fs::path& directory) {
    fs::create_directories(directory);
    validate(artifact, directory);
    const fs::path target = directory / kManifestFile;
    const fs::path staging = directory / (std::string(kManifestFile) + ".tmp");
    {
        std::ofstream out(staging, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw AuditError("cannot write to " + directory.string());
        }
        out << render_manifest(artifact);
        if (!out) {
            throw AuditError("failed writing " + staging.string());
        }
    }
    fs::rename(staging, target);
    return target;
}

AuditArtifact load(const fs::path& manifest) {
    const fs::path path = fs::is_directory(manifest) ? manifest / kManifestFile : manifest;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LookupError("cannot open artifact manifest " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    json j;
    try {
        j = json::parse(buffer.str());
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    AuditArtifact artifact = artifact_from_json(j);
    validate(artifact, path.parent_path());
    return artifact;
}

} // namespace cnnaudit
