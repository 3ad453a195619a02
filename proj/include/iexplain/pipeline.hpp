#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "iexplain/attribution.hpp"
#include "iexplain/classifier.hpp"
#include "iexplain/clustering.hpp"
#include "iexplain/evaluation.hpp"
#include "iexplain/volume.hpp"

namespace iexplain {

struct PipelineConfig {
    double clf_thresh = 0.5;
    int min_cluster_voxels_stop = 50;  // stop once an iteration masks <= this
    int iter_limit = 10;
    double t_high = 0.0;  // 0 = unset; must be configured or swept
    double agg_sigma = 0.8;
    int filter_min_size = 100;
    double filter_max_center_dist_frac = 0.625;  // of half-width
    double filter_max_center_dist_px = -1.0;     // >= 0 overrides the fraction
    double final_heatmap_thresh = 0.5;

    void validate() const;
    void require_t_high() const;
};

enum class StopReason { prob_below, volume_below, limit };

const char* to_string(StopReason r);

struct IterationStep {
    float prob = 0.0f;  // classifier probability that admitted this iteration
    std::vector<std::uint32_t> seg;  // sorted voxel indices segmented this pass
    std::int64_t masked = 0;         // seg.size(), the loop's volume guard input
};

struct IterationTrace {
    std::vector<IterationStep> steps;
    StopReason stop_reason = StopReason::prob_below;
    float exit_prob = 0.0f;  // probability at the failed guard (prob_below/limit checks)
};

// One explain-mask loop on a single mini-volume: while the classifier still
// fires, attribute, segment, zero out the segmented voxels, repeat. Returns
// the voxelwise union of all iteration segmentations.
std::pair<Volume, IterationTrace> iexplain_minivolume(const ClassifierParams& clf,
                                                      const AttributionConfig& attrib_cfg,
                                                      const MiniVolume& mini,
                                                      const PipelineConfig& cfg);

// Gaussian sliding-window aggregation: each seg slice at offset d from its
// center contributes weight exp(-d^2 / (2 sigma^2)) to study slice
// center + d, normalized per slice by the accumulated weight mass.
Volume aggregate_study(const std::map<int, Volume>& per_slice_segs, int width, int height,
                       int depth, double agg_sigma);

// Binary mask from the aggregated soft volume: voxel included iff its value
// reaches the threshold; at threshold 0, iff it has any support at all.
Volume finalize_mask(const Volume& soft, double final_heatmap_thresh);

// Size and 2D center-distance filters; survivors keep their ids.
ClusterSet filter_clusters(const ClusterSet& cs, const PipelineConfig& cfg);

struct SliceTrace {
    int center = 0;
    IterationTrace trace;
};

struct StudyResult {
    Volume final_mask;  // union of the filtered clusters
    ClusterSet clusters;
    std::vector<SliceTrace> slices;
    std::vector<std::int64_t> iteration_histogram;  // [n] = slices with n iterations
    std::int64_t masked_total = 0;
    double wall_seconds = 0.0;
};

// Full study pass: per-slice explain loops, aggregation, thresholding,
// component analysis, filtering.
StudyResult generate_pseudolabels(const Volume& windowed_study, const ClassifierParams& clf,
                                  const AttributionConfig& attrib_cfg,
                                  const PipelineConfig& cfg);

// Cluster set as it would look had every slice loop stopped after k
// iterations; k = 0 yields an empty set. Supports per-iteration metric curves
// without re-running attribution.
ClusterSet clusters_at_iteration(const std::vector<SliceTrace>& slices, int width, int height,
                                 int depth, int k, const PipelineConfig& cfg);

struct EvalStudy {
    std::string id;
    const Volume* windowed = nullptr;
    std::vector<GroundTruthRegion> regions;
};

struct SweepPoint {
    double t_high = 0.0;
    double f1 = 0.0;
};

struct SweepResult {
    double best_t_high = 0.0;
    std::vector<SweepPoint> curve;
};

// Full pipeline per grid value over the eval studies, scored with the
// intersection metric; argmax F1, ties to the smaller threshold.
SweepResult sweep_high_threshold(const std::vector<EvalStudy>& studies,
                                 const std::vector<double>& grid, const ClassifierParams& clf,
                                 const AttributionConfig& attrib_cfg, PipelineConfig cfg);

// Stable fingerprint of the run configuration, stamped into reports and
// file headers so artifacts can be traced to their settings.
std::string config_fingerprint(const PipelineConfig& cfg, const AttributionConfig& attrib_cfg);

}  // namespace iexplain
