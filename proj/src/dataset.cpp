#include "cnnaudit/dataset.hpp"

#include "cnnaudit/errors.hpp"

#include <boost/tokenizer.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace cnnaudit {

namespace fs = std::filesystem;

std::string to_string(Split split) { return split == Split::Train ? "train" : "audit"; }

Split parse_split(const std::string& text) {
    if (text == "train") {
        return Split::Train;
    }
    if (text == "audit") {
        return Split::Audit;
    }
    throw ParseError("unknown split '" + text + "' (expected train or audit)");
}

namespace {

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
    boost::tokenizer<boost::escaped_list_separator<char>> tok(line);
    std::vector<std::string> out;
    for (const auto& field : tok) {
        out.push_back(trim(field));
    }
    return out;
}

bool parse_flag(const std::string& text, const std::string& where) {
    if (text == "1" || text == "true" || text == "True") {
        return true;
    }
    if (text == "0" || text == "false" || text == "False") {
        return false;
    }
    throw ParseError(where + ": attribute value '" + text + "' is not a boolean");
}

std::size_t parse_label(const std::string& text, const std::string& where) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(text, &pos);
        if (pos != text.size() || v < 0) {
            throw std::invalid_argument(text);
        }
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ParseError(where + ": label '" + text + "' is not a class index");
    }
}

// Parses "key: value" header comments; returns false for non-header lines.
bool parse_header_comment(const std::string& line, std::string& key, std::string& value) {
    if (line.empty() || line[0] != '#') {
        return false;
    }
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
        return false;
    }
    key = trim(line.substr(1, colon - 1));
    value = trim(line.substr(colon + 1));
    return true;
}

void check_version(int version) {
    if (version != kManifestVersion) {
        throw VersionError("unsupported manifest version " + std::to_string(version));
    }
}

Dataset parse_csv(std::istream& in, const std::string& name) {
    Dataset ds;
    std::string line;
    std::vector<std::string> header;
    bool have_version = false;
    std::size_t line_no = 0;
    std::vector<ImageRecord> rows;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const std::string where = name + ":" + std::to_string(line_no);
        std::string key, value;
        if (line[0] == '#') {
            if (parse_header_comment(line, key, value)) {
                if (key == "manifest_version") {
                    int version = 0;
                    const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), version);
                    if (ec != std::errc() || end != value.data() + value.size()) {
                        throw ParseError(where + ": manifest_version must be an integer");
                    }
                    check_version(version);
                    have_version = true;
                } else if (key == "classes") {
                    ds.class_names = split_csv(value);
                }
            }
            continue;
        }
        if (header.empty()) {
            header = split_csv(line);
            const std::vector<std::string> required = {"image_id", "path", "label", "split"};
            if (header.size() < required.size() || !std::equal(required.begin(), required.end(), header.begin())) {
                throw ParseError(where + ": header must start with image_id,path,label,split");
            }
            continue;
        }
        const auto fields = split_csv(line);
        if (fields.size() != header.size()) {
            throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        }
        ImageRecord r;
        r.image_id = fields[0];
        r.path = fields[1];
        r.true_label = parse_label(fields[2], where);
        r.split = parse_split(fields[3]);
        for (std::size_t c = 4; c < fields.size(); ++c) {
            if (!fields[c].empty()) {
                r.attributes[header[c]] = parse_flag(fields[c], where);
            }
        }
        rows.push_back(std::move(r));
    }
    if (!have_version) {
        throw ParseError(name + ": missing '# manifest_version: 1' header");
    }
    if (header.empty()) {
        throw ParseError(name + ": missing column header");
    }
    ds.records = std::move(rows);
    return ds;
}

Dataset parse_jsonl(std::istream& in, const std::string& name) {
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        const std::string where = name + ":" + std::to_string(line_no);
        try {
            const auto j = nlohmann::json::parse(line);
            if (!have_header) {
                check_version(j.at("manifest_version").get<int>());
                ds.class_names = j.at("class_names").get<std::vector<std::string>>();
                have_header = true;
                continue;
            }
            ImageRecord r;
            r.image_id = j.at("image_id").get<std::string>();
            r.path = j.at("path").get<std::string>();
            r.true_label = j.at("label").get<std::size_t>();
            r.split = parse_split(j.at("split").get<std::string>());
            if (j.contains("attributes")) {
                r.attributes = j.at("attributes").get<std::map<std::string, bool>>();
            }
            ds.records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + ": " + e.what());
        }
    }
    if (!have_header) {
        throw ParseError(name + ": missing header object with manifest_version");
    }
    return ds;
}

} // namespace

Dataset load_dataset(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) {
        throw ParseError("cannot open manifest " + manifest.string());
    }
    Dataset ds = manifest.extension() == ".jsonl" ? parse_jsonl(in, manifest.string())
                                                  : parse_csv(in, manifest.string());
    if (ds.class_names.empty()) {
        throw ParseError(manifest.string() + ": manifest declares no classes");
    }
    std::set<std::string> seen;
    std::vector<ImageRecord> kept;
    for (auto& r : ds.records) {
        if (!seen.insert(r.image_id).second) {
            throw ValidationError("duplicate image_id '" + r.image_id + "'");
        }
        if (r.true_label >= ds.class_names.size()) {
            throw ValidationError("image '" + r.image_id + "' has label " + std::to_string(r.true_label) +
                                  " but only " + std::to_string(ds.class_names.size()) + " classes exist");
        }
        if (r.path.is_relative()) {
            r.path = manifest.parent_path() / r.path;
        }
        if (!fs::exists(r.path)) {
            ds.errors.push_back({r.image_id, "image file not found: " + r.path.string()});
            continue;
        }
        kept.push_back(std::move(r));
    }
    ds.records = std::move(kept);
    return ds;
}

void write_manifest_csv(const fs::path& manifest, const std::vector<std::string>& class_names,
                        const std::vector<ImageRecord>& records) {
    std::set<std::string> attribute_names;
    for (const auto& r : records) {
        for (const auto& [k, v] : r.attributes) {
            attribute_names.insert(k);
        }
    }
    if (manifest.has_parent_path()) {
        fs::create_directories(manifest.parent_path());
    }
    std::ofstream out(manifest);
    if (!out) {
        throw AuditError("cannot write manifest " + manifest.string());
    }
    out << "# manifest_version: " << kManifestVersion << '\n';
    out << "# classes: ";
    for (std::size_t i = 0; i < class_names.size(); ++i) {
        out << (i ? "," : "") << class_names[i];
    }
    out << "\nimage_id,path,label,split";
    for (const auto& a : attribute_names) {
        out << ',' << a;
    }
    out << '\n';
    for (const auto& r : records) {
        fs::path p = r.path;
        if (p.is_absolute() && manifest.has_parent_path()) {
            p = fs::relative(p, manifest.parent_path());
        }
        out << r.image_id << ',' << p.generic_string() << ',' << r.true_label << ',' << to_string(r.split);
        for (const auto& a : attribute_names) {
            const auto it = r.attributes.find(a);
            out << ',' << (it == r.attributes.end() ? "" : (it->second ? "1" : "0"));
        }
        out << '\n';
    }
}

double cooccurrence(const std::vector<ImageRecord>& records, const std::string& attribute, std::size_t label) {
    std::size_t with = 0, total = 0;
    for (const auto& r : records) {
        if (r.true_label != label) {
            continue;
        }
        ++total;
        const auto it = r.attributes.find(attribute);
        if (it != r.attributes.end() && it->second) {
            ++with;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(with) / static_cast<double>(total);
}

std::vector<ImageRecord> inject_bias(const std::vector<ImageRecord>& records, const BiasSpec& spec) {
    if (!(spec.target_cooccurrence > 0.0 && spec.target_cooccurrence <= 1.0)) {
        throw ConfigError("target co-occurrence must lie in (0, 1]");
    }
    std::vector<std::size_t> negatives;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.true_label != spec.label) {
            continue;
        }
        const auto it = r.attributes.find(spec.attribute);
        if (it == r.attributes.end()) {
            throw ValidationError("record '" + r.image_id + "' lacks attribute '" + spec.attribute + "'");
        }
        if (it->second) {
            ++positives;
        } else {
            negatives.push_back(i);
        }
    }
    const double total = static_cast<double>(positives + negatives.size());
    if (total == 0) {
        throw ConfigError("no records carry label " + std::to_string(spec.label));
    }
    const double natural = static_cast<double>(positives) / total;
    const double achievable_max = positives > 0 ? 1.0 : 0.0;
    constexpr double kSlack = 1e-12;
    if (spec.target_cooccurrence < natural - kSlack || spec.target_cooccurrence > achievable_max + kSlack) {
        throw ConfigError("target co-occurrence " + std::to_string(spec.target_cooccurrence) +
                          " is unsatisfiable by subsampling: achievable range is [" + std::to_string(natural) +
                          ", " + std::to_string(achievable_max) + "]");
    }

    // Number of negatives to keep: pos / (pos + keep) ~= target.
    const double p = static_cast<double>(positives);
    const double ideal = std::min(p / spec.target_cooccurrence - p, static_cast<double>(negatives.size()));
    const auto lo = static_cast<std::size_t>(std::floor(ideal + kSlack));
    const auto hi = std::min(static_cast<std::size_t>(std::ceil(ideal - kSlack)), negatives.size());
    const auto rate = [&](std::size_t keep) { return p / (p + static_cast<double>(keep)); };
    std::size_t keep = hi;
    if (std::abs(rate(lo) - spec.target_cooccurrence) < std::abs(rate(hi) - spec.target_cooccurrence)) {
        keep = lo;
    }
    if (std::abs(rate(keep) - spec.target_cooccurrence) > 0.02 + kSlack) {
        throw ConfigError("label group too small to reach co-occurrence " + std::to_string(spec.target_cooccurrence) +
                          " within 0.02 (closest achievable " + std::to_string(rate(keep)) + ")");
    }

    std::vector<std::size_t> order(negatives.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(spec.seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> drop(records.size(), false);
    for (std::size_t k = keep; k < order.size(); ++k) {
        drop[negatives[order[k]]] = true;
    }
    std::vector<ImageRecord> out;
    out.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!drop[i]) {
            out.push_back(records[i]);
        }
    }
    return out;
}

} // namespace cnnaudit
