#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "iexplain/classifier.hpp"
#include "iexplain/clustering.hpp"
#include "iexplain/evaluation.hpp"
#include "iexplain/volume.hpp"

namespace iexplain {

// On-disk volume format: a JSON header at `path` plus a sibling raw
// little-endian payload (same path with the extension swapped to .raw).
// Writes go through a temp file and rename, so readers never see a torn
// file. Concurrent writers to one path are undefined.

enum class ValueSemantics { hu, windowed, heatmap, mask };

const char* to_string(ValueSemantics s);
ValueSemantics value_semantics_from_string(const std::string& s);

struct VolumeHeader {
    std::string magic = "IEXVOL";
    int version = 1;
    std::array<int, 3> dims{0, 0, 0};
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::string dtype;            // "f32" | "u8" (u8 for masks)
    std::string value_semantics;  // hu | windowed | heatmap | mask
    std::string checksum;         // fnv1a-64 of the payload, hex
    nlohmann::json provenance = nlohmann::json::object();
};

std::uint64_t fnv1a64(const void* data, std::size_t len);
std::string fnv1a64_hex(const void* data, std::size_t len);

void save_volume(const Volume& vol, ValueSemantics semantics, const std::string& path,
                 const nlohmann::json& provenance = nlohmann::json::object());
std::pair<Volume, VolumeHeader> load_volume(const std::string& path);

void save_cluster_set(const ClusterSet& cs, const std::string& path,
                      const nlohmann::json& provenance = nlohmann::json::object());
// provenance, when non-null, receives the stored provenance object (empty if absent).
ClusterSet load_cluster_set(const std::string& path, nlohmann::json* provenance = nullptr);

void save_metrics(const MetricsReport& report, const std::string& path,
                  const nlohmann::json& provenance = nlohmann::json::object());
MetricsReport load_metrics(const std::string& path);

// JSON architecture descriptor + sibling .raw little-endian f32 blob.
void save_classifier(const ClassifierParams& params, const std::string& path,
                     const nlohmann::json& provenance = nlohmann::json::object());
ClassifierParams load_classifier(const std::string& path);

struct ManifestEntry {
    std::string id;
    std::string volume_path;  // relative to the manifest's directory
    std::string gt_path;      // empty for lesion-free studies saved without GT
    bool positive = false;
    std::vector<std::uint8_t> slice_labels;
};

struct DatasetManifest {
    std::array<int, 3> dims{0, 0, 0};
    double positivity = 0.0;
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> entries;
};

void save_manifest(const DatasetManifest& manifest, const std::string& path,
                   const nlohmann::json& provenance = nlohmann::json::object());
// check_files verifies every referenced file exists (referential error when
// one is missing).
DatasetManifest load_manifest(const std::string& path, bool check_files = true);

// Directory part of a path, for resolving manifest-relative references.
std::string parent_dir(const std::string& path);
std::string join_path(const std::string& dir, const std::string& rel);

}  // namespace iexplain
