#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cnnaudit {

enum class Split { Train, Audit };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ImageRecord {
    std::string image_id;
    std::filesystem::path path;
    std::size_t true_label = 0;
    std::map<std::string, bool> attributes;
    Split split = Split::Audit;

    bool operator==(const ImageRecord&) const = default;
};

struct RecordIssue {
    std::string image_id;
    std::string message;
};

struct Dataset {
    std::vector<std::string> class_names;
    std::vector<ImageRecord> records; // manifest order
    std::vector<RecordIssue> errors;  // rows skipped because their image is missing
};

inline constexpr int kManifestVersion = 1;

/// Loads a CSV (`.csv`) or JSON-lines (`.jsonl`) manifest; see docs/dataset-manifest.md.
/// Relative image paths resolve against the manifest's directory.
Dataset load_dataset(const std::filesystem::path& manifest);

void write_manifest_csv(const std::filesystem::path& manifest, const std::vector<std::string>& class_names,
                        const std::vector<ImageRecord>& records);

struct BiasSpec {
    std::string attribute;
    std::size_t label = 0;
    double target_cooccurrence = 0.8;
    std::uint64_t seed = 0;
};

/// Fraction of records with `label` that have `attribute` set.
double cooccurrence(const std::vector<ImageRecord>& records, const std::string& attribute, std::size_t label);

/// Drops a seeded sample of (label, !attribute) records so that the attribute's
/// co-occurrence within `label` lands as close as possible to the target.
/// Never adds or edits records; relative order is preserved.
std::vector<ImageRecord> inject_bias(const std::vector<ImageRecord>& records, const BiasSpec& spec);

} // namespace cnnaudit
