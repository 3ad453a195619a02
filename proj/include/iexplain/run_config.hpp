#pragma once

#include <map>
#include <string>

#include "iexplain/attribution.hpp"
#include "iexplain/classifier.hpp"
#include "iexplain/phantom.hpp"
#include "iexplain/pipeline.hpp"

namespace iexplain {

// Merged run settings: defaults, overridden by a config file, overridden by
// command-line flags. The canonical form materializes every key in sorted
// order, so the hash does not depend on how the inputs were spelled.
struct RunConfig {
    PhantomConfig phantom;
    int dataset_count = 16;
    double dataset_positivity = 0.5;
    TrainConfig train;
    AttributionConfig attribution;
    PipelineConfig pipeline;
    bool eval_strict_iou = false;

    // Applies dotted key/value overrides ("pipeline.t_high" = "0.02").
    // Unknown keys and unparseable values raise ConfigError.
    void apply(const std::map<std::string, std::string>& kv);

    // Full sorted key=value listing of the merged configuration.
    std::string canonical_text() const;

    // FNV-1a over canonical_text(); stable under config-file key reordering.
    std::string hash() const;
};

// Properties-style file: one key=value per line, '#' comments, blank lines
// ignored, later duplicates win. Throws IoError on read failure, ConfigError
// on malformed lines.
std::map<std::string, std::string> read_config_file(const std::string& path);

}  // namespace iexplain
