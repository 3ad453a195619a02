#include "iexplain/run_config.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <vector>

#include "iexplain/errors.hpp"
#include "iexplain/io_formats.hpp"

namespace iexplain {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

int parse_int(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    int out = 0;
    try {
        out = std::stoi(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an integer, got '" + value + "'");
    }
    if (pos != value.size()) {
        throw ConfigError("config: '" + key + "' expects an integer, got '" + value + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
    }
    if (pos != value.size()) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
    }
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + value +
                          "'");
    }
    if (pos != value.size()) {
        throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + value +
                          "'");
    }
    return static_cast<std::uint64_t>(out);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: '" + key + "' expects true/false, got '" + value + "'");
}

std::vector<BaselinePolicy> parse_references(const std::string& key, const std::string& value) {
    std::vector<BaselinePolicy> out;
    std::stringstream ss(value);
    std::string token;
    while (std::getline(ss, token, ',')) {
        token = trim(token);
        if (token.empty()) {
            throw ConfigError("config: '" + key + "' has an empty reference entry");
        }
        out.push_back(parse_baseline_policy(token));
    }
    if (out.empty()) {
        throw ConfigError("config: '" + key + "' needs at least one reference");
    }
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt(int v) { return std::to_string(v); }
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

}  // namespace

void RunConfig::apply(const std::map<std::string, std::string>& kv) {
    bool references_set = false;
    bool n_references_set = false;

    for (const auto& [key, value] : kv) {
        if (key == "phantom.width") phantom.width = parse_int(key, value);
        else if (key == "phantom.height") phantom.height = parse_int(key, value);
        else if (key == "phantom.depth") phantom.depth = parse_int(key, value);
        else if (key == "phantom.vessel_count") phantom.vessel_count = parse_int(key, value);
        else if (key == "phantom.lesion_count_min") phantom.lesion_count_min = parse_int(key, value);
        else if (key == "phantom.lesion_count_max") phantom.lesion_count_max = parse_int(key, value);
        else if (key == "phantom.lesion_radius_min") phantom.lesion_radius_min = parse_double(key, value);
        else if (key == "phantom.lesion_radius_max") phantom.lesion_radius_max = parse_double(key, value);
        else if (key == "phantom.lesion_rz_min") phantom.lesion_rz_min = parse_double(key, value);
        else if (key == "phantom.lesion_rz_max") phantom.lesion_rz_max = parse_double(key, value);
        else if (key == "phantom.vessel_radius_min") phantom.vessel_radius_min = parse_double(key, value);
        else if (key == "phantom.vessel_radius_max") phantom.vessel_radius_max = parse_double(key, value);
        else if (key == "phantom.background_noise_sigma") phantom.background_noise_sigma = parse_double(key, value);
        else if (key == "phantom.background_intensity") phantom.background_intensity = parse_double(key, value);
        else if (key == "phantom.lesion_intensity") phantom.lesion_intensity = parse_double(key, value);
        else if (key == "phantom.vessel_intensity") phantom.vessel_intensity = parse_double(key, value);
        else if (key == "phantom.lesion_center_max_dist_frac") phantom.lesion_center_max_dist_frac = parse_double(key, value);
        else if (key == "phantom.seed") phantom.seed = parse_u64(key, value);
        else if (key == "dataset.count") dataset_count = parse_int(key, value);
        else if (key == "dataset.positivity") dataset_positivity = parse_double(key, value);
        else if (key == "train.c1") train.c1 = parse_int(key, value);
        else if (key == "train.c2") train.c2 = parse_int(key, value);
        else if (key == "train.learning_rate") train.learning_rate = parse_double(key, value);
        else if (key == "train.iterations") train.iterations = parse_int(key, value);
        else if (key == "train.batch_size") train.batch_size = parse_int(key, value);
        else if (key == "train.momentum") train.momentum = parse_double(key, value);
        else if (key == "train.cutout_prob") train.cutout_prob = parse_double(key, value);
        else if (key == "train.cutout_min") train.cutout_min = parse_int(key, value);
        else if (key == "train.cutout_max") train.cutout_max = parse_int(key, value);
        else if (key == "train.seed") train.seed = parse_u64(key, value);
        else if (key == "attribution.ig_steps") attribution.ig_steps = parse_int(key, value);
        else if (key == "attribution.n_references") {
            attribution.n_references = parse_int(key, value);
            n_references_set = true;
        } else if (key == "attribution.references") {
            attribution.references = parse_references(key, value);
            references_set = true;
        } else if (key == "attribution.smoothgrad_n") attribution.smoothgrad_n = parse_int(key, value);
        else if (key == "attribution.smoothgrad_sigma") attribution.smoothgrad_sigma = parse_double(key, value);
        else if (key == "attribution.seed") attribution.seed = parse_u64(key, value);
        else if (key == "pipeline.clf_thresh") pipeline.clf_thresh = parse_double(key, value);
        else if (key == "pipeline.min_cluster_voxels_stop") pipeline.min_cluster_voxels_stop = parse_int(key, value);
        else if (key == "pipeline.iter_limit") pipeline.iter_limit = parse_int(key, value);
        else if (key == "pipeline.t_high") pipeline.t_high = parse_double(key, value);
        else if (key == "pipeline.agg_sigma") pipeline.agg_sigma = parse_double(key, value);
        else if (key == "pipeline.filter_min_size") pipeline.filter_min_size = parse_int(key, value);
        else if (key == "pipeline.filter_max_center_dist_frac") pipeline.filter_max_center_dist_frac = parse_double(key, value);
        else if (key == "pipeline.filter_max_center_dist_px") pipeline.filter_max_center_dist_px = parse_double(key, value);
        else if (key == "pipeline.final_heatmap_thresh") pipeline.final_heatmap_thresh = parse_double(key, value);
        else if (key == "eval.strict_iou") eval_strict_iou = parse_bool(key, value);
        else throw ConfigError("config: unknown key '" + key + "'");
    }

    // A replaced reference list implies its own count unless one was given.
    if (references_set && !n_references_set) {
        attribution.n_references = static_cast<int>(attribution.references.size());
    }
}

std::string RunConfig::canonical_text() const {
    std::map<std::string, std::string> kv;
    kv["phantom.width"] = fmt(phantom.width);
    kv["phantom.height"] = fmt(phantom.height);
    kv["phantom.depth"] = fmt(phantom.depth);
    kv["phantom.vessel_count"] = fmt(phantom.vessel_count);
    kv["phantom.lesion_count_min"] = fmt(phantom.lesion_count_min);
    kv["phantom.lesion_count_max"] = fmt(phantom.lesion_count_max);
    kv["phantom.lesion_radius_min"] = fmt(phantom.lesion_radius_min);
    kv["phantom.lesion_radius_max"] = fmt(phantom.lesion_radius_max);
    kv["phantom.lesion_rz_min"] = fmt(phantom.lesion_rz_min);
    kv["phantom.lesion_rz_max"] = fmt(phantom.lesion_rz_max);
    kv["phantom.vessel_radius_min"] = fmt(phantom.vessel_radius_min);
    kv["phantom.vessel_radius_max"] = fmt(phantom.vessel_radius_max);
    kv["phantom.background_noise_sigma"] = fmt(phantom.background_noise_sigma);
    kv["phantom.background_intensity"] = fmt(phantom.background_intensity);
    kv["phantom.lesion_intensity"] = fmt(phantom.lesion_intensity);
    kv["phantom.vessel_intensity"] = fmt(phantom.vessel_intensity);
    kv["phantom.lesion_center_max_dist_frac"] = fmt(phantom.lesion_center_max_dist_frac);
    kv["phantom.seed"] = fmt(phantom.seed);
    kv["dataset.count"] = fmt(dataset_count);
    kv["dataset.positivity"] = fmt(dataset_positivity);
    kv["train.c1"] = fmt(train.c1);
    kv["train.c2"] = fmt(train.c2);
    kv["train.learning_rate"] = fmt(train.learning_rate);
    kv["train.iterations"] = fmt(train.iterations);
    kv["train.batch_size"] = fmt(train.batch_size);
    kv["train.momentum"] = fmt(train.momentum);
    kv["train.cutout_prob"] = fmt(train.cutout_prob);
    kv["train.cutout_min"] = fmt(train.cutout_min);
    kv["train.cutout_max"] = fmt(train.cutout_max);
    kv["train.seed"] = fmt(train.seed);
    kv["attribution.ig_steps"] = fmt(attribution.ig_steps);
    kv["attribution.n_references"] = fmt(attribution.n_references);
    {
        std::string refs;
        const int limit = std::min(attribution.n_references,
                                   static_cast<int>(attribution.references.size()));
        for (int i = 0; i < limit; ++i) {
            if (i) refs += ',';
            refs += attribution.references[static_cast<std::size_t>(i)].describe();
        }
        kv["attribution.references"] = refs;
    }
    kv["attribution.smoothgrad_n"] = fmt(attribution.smoothgrad_n);
    kv["attribution.smoothgrad_sigma"] = fmt(attribution.smoothgrad_sigma);
    kv["attribution.seed"] = fmt(attribution.seed);
    kv["pipeline.clf_thresh"] = fmt(pipeline.clf_thresh);
    kv["pipeline.min_cluster_voxels_stop"] = fmt(pipeline.min_cluster_voxels_stop);
    kv["pipeline.iter_limit"] = fmt(pipeline.iter_limit);
    kv["pipeline.t_high"] = fmt(pipeline.t_high);
    kv["pipeline.agg_sigma"] = fmt(pipeline.agg_sigma);
    kv["pipeline.filter_min_size"] = fmt(pipeline.filter_min_size);
    kv["pipeline.filter_max_center_dist_frac"] = fmt(pipeline.filter_max_center_dist_frac);
    kv["pipeline.filter_max_center_dist_px"] = fmt(pipeline.filter_max_center_dist_px);
    kv["pipeline.final_heatmap_thresh"] = fmt(pipeline.final_heatmap_thresh);
    kv["eval.strict_iou"] = fmt(eval_strict_iou);

    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

std::string RunConfig::hash() const {
    const std::string text = canonical_text();
    return fnv1a64_hex(text.data(), text.size());
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(IoError::Kind::missing_file, "config file '" + path + "' cannot be read");
    }
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("config file '" + path + "' line " + std::to_string(lineno) +
                              ": expected key=value");
        }
        kv[trim(stripped.substr(0, eq))] = trim(stripped.substr(eq + 1));
    }
    return kv;
}

}  // namespace iexplain
