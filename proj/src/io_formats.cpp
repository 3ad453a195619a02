#include "iexplain/io_formats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "iexplain/errors.hpp"

namespace iexplain {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kVolumeVersion = 1;
constexpr int kClassifierVersion = 1;
constexpr int kManifestVersion = 1;

void write_file_atomic(const std::string& path, const void* data, std::size_t len) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError(IoError::Kind::write_failure, "cannot open '" + tmp + "' for writing");
        }
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
        if (!out) {
            throw IoError(IoError::Kind::write_failure, "short write to '" + tmp + "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw IoError(IoError::Kind::write_failure,
                      "rename '" + tmp + "' -> '" + path + "': " + ec.message());
    }
}

void write_text_atomic(const std::string& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(IoError::Kind::missing_file, "cannot open '" + path + "'");
    }
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw IoError(IoError::Kind::missing_file, "read failure on '" + path + "'");
    }
    return data;
}

json parse_json_file(const std::string& path) {
    const std::string text = read_file(path);
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) {
        throw IoError(IoError::Kind::schema_violation, "'" + path + "' is not valid JSON");
    }
    return j;
}

// Replaces a trailing .json with .raw, otherwise appends .raw.
std::string payload_path(const std::string& header_path) {
    const std::string suffix = ".json";
    if (header_path.size() > suffix.size() &&
        header_path.compare(header_path.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return header_path.substr(0, header_path.size() - suffix.size()) + ".raw";
    }
    return header_path + ".raw";
}

template <typename T>
T require_field(const json& j, const std::string& key, const std::string& context) {
    const auto it = j.find(key);
    if (it == j.end()) {
        throw IoError(IoError::Kind::schema_violation,
                      context + ": missing field '" + key + "'");
    }
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw IoError(IoError::Kind::schema_violation,
                      context + ": field '" + key + "' has the wrong type");
    }
}

void validate_semantics(const Volume& vol, ValueSemantics semantics) {
    switch (semantics) {
        case ValueSemantics::mask:
            vol.require_binary("mask volume");
            break;
        case ValueSemantics::windowed:
            for (std::size_t i = 0; i < vol.data.size(); ++i) {
                const float v = vol.data[i];
                if (!(v >= 0.0f && v <= 1.0f)) {
                    throw DataError("windowed volume outside [0, 1] at index " +
                                    std::to_string(i));
                }
            }
            break;
        case ValueSemantics::hu:
        case ValueSemantics::heatmap:
            vol.require_finite("volume payload");
            break;
    }
}

}  // namespace

const char* to_string(ValueSemantics s) {
    switch (s) {
        case ValueSemantics::hu:
            return "hu";
        case ValueSemantics::windowed:
            return "windowed";
        case ValueSemantics::heatmap:
            return "heatmap";
        case ValueSemantics::mask:
            return "mask";
    }
    return "hu";
}

ValueSemantics value_semantics_from_string(const std::string& s) {
    if (s == "hu") return ValueSemantics::hu;
    if (s == "windowed") return ValueSemantics::windowed;
    if (s == "heatmap") return ValueSemantics::heatmap;
    if (s == "mask") return ValueSemantics::mask;
    throw IoError(IoError::Kind::schema_violation, "unknown value_semantics '" + s + "'");
}

std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string fnv1a64_hex(const void* data, std::size_t len) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(data, len)));
    return std::string(buf);
}

void save_volume(const Volume& vol, ValueSemantics semantics, const std::string& path,
                 const json& provenance) {
    validate_semantics(vol, semantics);

    std::vector<unsigned char> payload;
    std::string dtype;
    if (semantics == ValueSemantics::mask) {
        dtype = "u8";
        payload.resize(vol.size());
        for (std::size_t i = 0; i < vol.data.size(); ++i) {
            payload[i] = vol.data[i] != 0.0f ? 1 : 0;
        }
    } else {
        dtype = "f32";
        payload.resize(vol.size() * sizeof(float));
        std::memcpy(payload.data(), vol.data.data(), payload.size());
    }

    json header;
    header["magic"] = "IEXVOL";
    header["version"] = kVolumeVersion;
    header["dims"] = {vol.width, vol.height, vol.depth};
    header["spacing"] = {vol.spacing[0], vol.spacing[1], vol.spacing[2]};
    header["dtype"] = dtype;
    header["value_semantics"] = to_string(semantics);
    header["checksum"] = fnv1a64_hex(payload.data(), payload.size());
    if (!provenance.empty()) header["provenance"] = provenance;

    write_file_atomic(payload_path(path), payload.data(), payload.size());
    write_text_atomic(path, header.dump(2) + "\n");
}

std::pair<Volume, VolumeHeader> load_volume(const std::string& path) {
    const json j = parse_json_file(path);
    const std::string ctx = "volume header '" + path + "'";

    VolumeHeader h;
    h.magic = require_field<std::string>(j, "magic", ctx);
    if (h.magic != "IEXVOL") {
        throw IoError(IoError::Kind::bad_magic, ctx + ": magic '" + h.magic + "'");
    }
    h.version = require_field<int>(j, "version", ctx);
    if (h.version != kVolumeVersion) {
        throw IoError(IoError::Kind::version_mismatch,
                      ctx + ": version " + std::to_string(h.version) + ", expected " +
                          std::to_string(kVolumeVersion));
    }
    const auto dims = require_field<std::vector<int>>(j, "dims", ctx);
    if (dims.size() != 3 || dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) {
        throw IoError(IoError::Kind::schema_violation, ctx + ": bad dims");
    }
    h.dims = {dims[0], dims[1], dims[2]};
    const auto spacing = require_field<std::vector<float>>(j, "spacing", ctx);
    if (spacing.size() != 3) {
        throw IoError(IoError::Kind::schema_violation, ctx + ": bad spacing");
    }
    h.spacing = {spacing[0], spacing[1], spacing[2]};
    h.dtype = require_field<std::string>(j, "dtype", ctx);
    if (h.dtype != "f32" && h.dtype != "u8") {
        throw IoError(IoError::Kind::schema_violation, ctx + ": unknown dtype '" + h.dtype + "'");
    }
    h.value_semantics = require_field<std::string>(j, "value_semantics", ctx);
    const ValueSemantics semantics = value_semantics_from_string(h.value_semantics);
    if ((semantics == ValueSemantics::mask) != (h.dtype == "u8")) {
        throw IoError(IoError::Kind::schema_violation,
                      ctx + ": dtype '" + h.dtype + "' inconsistent with semantics '" +
                          h.value_semantics + "'");
    }
    h.checksum = require_field<std::string>(j, "checksum", ctx);
    if (j.contains("provenance")) h.provenance = j.at("provenance");

    const std::string raw_path = payload_path(path);
    const std::string payload = read_file(raw_path);
    const std::size_t voxels = static_cast<std::size_t>(h.dims[0]) *
                               static_cast<std::size_t>(h.dims[1]) *
                               static_cast<std::size_t>(h.dims[2]);
    const std::size_t expected = h.dtype == "u8" ? voxels : voxels * sizeof(float);
    if (payload.size() != expected) {
        throw IoError(IoError::Kind::length_mismatch,
                      "'" + raw_path + "': payload is " + std::to_string(payload.size()) +
                          " bytes, header implies " + std::to_string(expected));
    }
    if (fnv1a64_hex(payload.data(), payload.size()) != h.checksum) {
        throw IoError(IoError::Kind::checksum_mismatch, "'" + raw_path + "': checksum mismatch");
    }

    Volume vol(h.dims[0], h.dims[1], h.dims[2]);
    vol.spacing = h.spacing;
    if (h.dtype == "u8") {
        for (std::size_t i = 0; i < voxels; ++i) {
            const unsigned char b = static_cast<unsigned char>(payload[i]);
            if (b > 1) {
                throw IoError(IoError::Kind::schema_violation,
                              "'" + raw_path + "': mask byte " + std::to_string(b) +
                                  " at index " + std::to_string(i));
            }
            vol.data[i] = static_cast<float>(b);
        }
    } else {
        std::memcpy(vol.data.data(), payload.data(), payload.size());
        validate_semantics(vol, semantics);
    }
    return {std::move(vol), std::move(h)};
}

void save_cluster_set(const ClusterSet& cs, const std::string& path, const json& provenance) {
    json clusters = json::array();
    for (const Cluster& c : cs.clusters) {
        json rle = json::array();
        std::size_t i = 0;
        while (i < c.voxels.size()) {
            std::size_t run = 1;
            while (i + run < c.voxels.size() && c.voxels[i + run] == c.voxels[i] + run) ++run;
            rle.push_back(c.voxels[i]);
            rle.push_back(run);
            i += run;
        }
        json jc;
        jc["id"] = c.id;
        jc["voxel_count"] = c.stats.voxel_count;
        jc["centroid"] = {c.stats.centroid[0], c.stats.centroid[1], c.stats.centroid[2]};
        jc["bbox_min"] = {c.stats.bbox_min[0], c.stats.bbox_min[1], c.stats.bbox_min[2]};
        jc["bbox_max"] = {c.stats.bbox_max[0], c.stats.bbox_max[1], c.stats.bbox_max[2]};
        jc["rle_voxels"] = std::move(rle);
        clusters.push_back(std::move(jc));
    }
    json j;
    j["magic"] = "IEXCLUSTERS";
    j["version"] = 1;
    j["source_dims"] = {cs.source_dims[0], cs.source_dims[1], cs.source_dims[2]};
    j["clusters"] = std::move(clusters);
    if (!provenance.empty()) j["provenance"] = provenance;
    write_text_atomic(path, j.dump(2) + "\n");
}

ClusterSet load_cluster_set(const std::string& path, nlohmann::json* provenance) {
    const json j = parse_json_file(path);
    const std::string ctx = "cluster set '" + path + "'";
    if (require_field<std::string>(j, "magic", ctx) != "IEXCLUSTERS") {
        throw IoError(IoError::Kind::bad_magic, ctx + ": wrong magic");
    }
    if (provenance != nullptr) {
        *provenance = j.contains("provenance") ? j.at("provenance") : json::object();
    }
    if (require_field<int>(j, "version", ctx) != 1) {
        throw IoError(IoError::Kind::version_mismatch, ctx + ": unsupported version");
    }
    ClusterSet cs;
    const auto dims = require_field<std::vector<int>>(j, "source_dims", ctx);
    if (dims.size() != 3) {
        throw IoError(IoError::Kind::schema_violation, ctx + ": bad source_dims");
    }
    cs.source_dims = {dims[0], dims[1], dims[2]};

    const auto clusters = require_field<json>(j, "clusters", ctx);
    if (!clusters.is_array()) {
        throw IoError(IoError::Kind::schema_violation, ctx + ": 'clusters' is not an array");
    }
    for (const json& jc : clusters) {
        Cluster c;
        c.id = require_field<int>(jc, "id", ctx);
        const auto rle = require_field<std::vector<std::uint64_t>>(jc, "rle_voxels", ctx);
        if (rle.size() % 2 != 0) {
            throw IoError(IoError::Kind::schema_violation, ctx + ": odd RLE length");
        }
        for (std::size_t i = 0; i < rle.size(); i += 2) {
            for (std::uint64_t k = 0; k < rle[i + 1]; ++k) {
                c.voxels.push_back(static_cast<std::uint32_t>(rle[i] + k));
            }
        }
        if (!std::is_sorted(c.voxels.begin(), c.voxels.end())) {
            throw IoError(IoError::Kind::schema_violation, ctx + ": RLE voxels not sorted");
        }
        if (c.voxels.empty()) {
            throw IoError(IoError::Kind::schema_violation,
                          ctx + ": cluster " + std::to_string(c.id) + " is empty");
        }
        c.stats = cluster_stats(c.voxels, cs.source_dims[0], cs.source_dims[1],
                                cs.source_dims[2]);
        if (c.stats.voxel_count != require_field<int>(jc, "voxel_count", ctx)) {
            throw IoError(IoError::Kind::schema_violation,
                          ctx + ": voxel_count disagrees with RLE payload");
        }
        cs.clusters.push_back(std::move(c));
    }
    return cs;
}

void save_metrics(const MetricsReport& report, const std::string& path, const json& provenance) {
    json j;
    j["magic"] = "IEXMETRICS";
    j["version"] = 1;
    j["tp"] = report.tp;
    j["fp"] = report.fp;
    j["fn"] = report.fn;
    j["sensitivity"] =
        report.rates.sensitivity ? json(*report.rates.sensitivity) : json(nullptr);
    j["ppv"] = report.rates.ppv ? json(*report.rates.ppv) : json(nullptr);
    j["f1"] = report.rates.f1;
    j["auc_roc"] = report.auc_roc ? json(*report.auc_roc) : json(nullptr);
    json per_study = json::array();
    for (const StudyCounts& s : report.per_study) {
        per_study.push_back(
            {{"study_id", s.study_id}, {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}});
    }
    j["per_study"] = std::move(per_study);
    if (!provenance.empty()) j["provenance"] = provenance;
    write_text_atomic(path, j.dump(2) + "\n");
}

MetricsReport load_metrics(const std::string& path) {
    const json j = parse_json_file(path);
    const std::string ctx = "metrics '" + path + "'";
    if (require_field<std::string>(j, "magic", ctx) != "IEXMETRICS") {
        throw IoError(IoError::Kind::bad_magic, ctx + ": wrong magic");
    }
    MetricsReport r;
    r.tp = require_field<int>(j, "tp", ctx);
    r.fp = require_field<int>(j, "fp", ctx);
    r.fn = require_field<int>(j, "fn", ctx);
    if (!j.at("sensitivity").is_null()) r.rates.sensitivity = j.at("sensitivity").get<double>();
    if (!j.at("ppv").is_null()) r.rates.ppv = j.at("ppv").get<double>();
    r.rates.f1 = require_field<double>(j, "f1", ctx);
    if (j.contains("auc_roc") && !j.at("auc_roc").is_null()) {
        r.auc_roc = j.at("auc_roc").get<double>();
    }
    for (const json& js : j.at("per_study")) {
        StudyCounts s;
        s.study_id = require_field<std::string>(js, "study_id", ctx);
        s.tp = require_field<int>(js, "tp", ctx);
        s.fp = require_field<int>(js, "fp", ctx);
        s.fn = require_field<int>(js, "fn", ctx);
        r.per_study.push_back(std::move(s));
    }
    return r;
}

void save_classifier(const ClassifierParams& params, const std::string& path,
                     const json& provenance) {
    params.validate();
    std::vector<float> blob;
    blob.reserve(params.param_count());
    auto append = [&blob](const std::vector<float>& v) {
        blob.insert(blob.end(), v.begin(), v.end());
    };
    append(params.conv1_w);
    append(params.conv1_b);
    append(params.conv2_w);
    append(params.conv2_b);
    append(params.fc_w);
    blob.push_back(params.fc_b);

    json j;
    j["magic"] = "IEXCLF";
    j["version"] = kClassifierVersion;
    j["c1"] = params.c1;
    j["c2"] = params.c2;
    j["input_depth"] = params.input_depth;
    j["param_count"] = blob.size();
    j["checksum"] = fnv1a64_hex(blob.data(), blob.size() * sizeof(float));
    if (!provenance.empty()) j["provenance"] = provenance;

    write_file_atomic(payload_path(path), blob.data(), blob.size() * sizeof(float));
    write_text_atomic(path, j.dump(2) + "\n");
}

ClassifierParams load_classifier(const std::string& path) {
    const json j = parse_json_file(path);
    const std::string ctx = "classifier '" + path + "'";
    if (require_field<std::string>(j, "magic", ctx) != "IEXCLF") {
        throw IoError(IoError::Kind::bad_magic, ctx + ": wrong magic");
    }
    if (require_field<int>(j, "version", ctx) != kClassifierVersion) {
        throw IoError(IoError::Kind::version_mismatch, ctx + ": unsupported version");
    }
    ClassifierParams p;
    p.c1 = require_field<int>(j, "c1", ctx);
    p.c2 = require_field<int>(j, "c2", ctx);
    p.input_depth = require_field<int>(j, "input_depth", ctx);
    const auto count = require_field<std::uint64_t>(j, "param_count", ctx);

    const std::string raw_path = payload_path(path);
    const std::string payload = read_file(raw_path);
    if (payload.size() != count * sizeof(float)) {
        throw IoError(IoError::Kind::length_mismatch,
                      "'" + raw_path + "': blob length does not match param_count");
    }
    if (fnv1a64_hex(payload.data(), payload.size()) !=
        require_field<std::string>(j, "checksum", ctx)) {
        throw IoError(IoError::Kind::checksum_mismatch, "'" + raw_path + "': checksum mismatch");
    }

    std::vector<float> blob(count);
    std::memcpy(blob.data(), payload.data(), payload.size());
    std::size_t off = 0;
    auto take = [&blob, &off, &ctx](std::vector<float>& dst, std::size_t n) {
        if (off + n > blob.size()) {
            throw IoError(IoError::Kind::length_mismatch, ctx + ": blob too short");
        }
        dst.assign(blob.begin() + static_cast<std::ptrdiff_t>(off),
                   blob.begin() + static_cast<std::ptrdiff_t>(off + n));
        off += n;
    };
    const std::size_t c1 = static_cast<std::size_t>(p.c1);
    const std::size_t c2 = static_cast<std::size_t>(p.c2);
    take(p.conv1_w, 27 * c1);
    take(p.conv1_b, c1);
    take(p.conv2_w, 27 * c1 * c2);
    take(p.conv2_b, c2);
    take(p.fc_w, c2);
    if (off + 1 != blob.size()) {
        throw IoError(IoError::Kind::length_mismatch,
                      ctx + ": blob length does not match the architecture descriptor");
    }
    p.fc_b = blob[off];
    p.validate();
    return p;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path,
                   const json& provenance) {
    json entries = json::array();
    for (const ManifestEntry& e : manifest.entries) {
        json je;
        je["id"] = e.id;
        je["volume"] = e.volume_path;
        je["gt"] = e.gt_path;
        je["positive"] = e.positive;
        je["slice_labels"] = e.slice_labels;
        entries.push_back(std::move(je));
    }
    json j;
    j["magic"] = "IEXMANIFEST";
    j["version"] = kManifestVersion;
    j["dims"] = {manifest.dims[0], manifest.dims[1], manifest.dims[2]};
    j["positivity"] = manifest.positivity;
    j["seed"] = manifest.seed;
    j["entries"] = std::move(entries);
    if (!provenance.empty()) j["provenance"] = provenance;
    write_text_atomic(path, j.dump(2) + "\n");
}

DatasetManifest load_manifest(const std::string& path, bool check_files) {
    const json j = parse_json_file(path);
    const std::string ctx = "manifest '" + path + "'";
    if (require_field<std::string>(j, "magic", ctx) != "IEXMANIFEST") {
        throw IoError(IoError::Kind::bad_magic, ctx + ": wrong magic");
    }
    if (require_field<int>(j, "version", ctx) != kManifestVersion) {
        throw IoError(IoError::Kind::version_mismatch, ctx + ": unsupported version");
    }
    DatasetManifest m;
    const auto dims = require_field<std::vector<int>>(j, "dims", ctx);
    if (dims.size() != 3) {
        throw IoError(IoError::Kind::schema_violation, ctx + ": bad dims");
    }
    m.dims = {dims[0], dims[1], dims[2]};
    m.positivity = require_field<double>(j, "positivity", ctx);
    m.seed = require_field<std::uint64_t>(j, "seed", ctx);

    const std::string dir = parent_dir(path);
    for (const json& je : j.at("entries")) {
        ManifestEntry e;
        e.id = require_field<std::string>(je, "id", ctx);
        e.volume_path = require_field<std::string>(je, "volume", ctx);
        e.gt_path = require_field<std::string>(je, "gt", ctx);
        e.positive = require_field<bool>(je, "positive", ctx);
        e.slice_labels = require_field<std::vector<std::uint8_t>>(je, "slice_labels", ctx);
        if (check_files) {
            auto must_exist = [&ctx, &e](const std::string& full) {
                if (!fs::exists(full)) {
                    throw IoError(IoError::Kind::referential,
                                  ctx + ": entry '" + e.id + "' references missing file '" +
                                      full + "'");
                }
            };
            const std::string vol_full = join_path(dir, e.volume_path);
            must_exist(vol_full);
            must_exist(payload_path(vol_full));
            if (!e.gt_path.empty()) {
                const std::string gt_full = join_path(dir, e.gt_path);
                must_exist(gt_full);
                must_exist(payload_path(gt_full));
            }
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

std::string parent_dir(const std::string& path) {
    const fs::path p(path);
    return p.parent_path().string();
}

std::string join_path(const std::string& dir, const std::string& rel) {
    if (dir.empty()) return rel;
    return (fs::path(dir) / rel).string();
}

}  // namespace iexplain
