#include "iexplain/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "iexplain/errors.hpp"

namespace iexplain {

namespace {

std::vector<std::uint32_t> sparse_indices(const Volume& mask) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        if (mask.data[i] != 0.0f) out.push_back(static_cast<std::uint32_t>(i));
    }
    return out;
}

// Shared tail of the study pipeline: aggregate, threshold, label, filter.
ClusterSet assemble_clusters(const std::map<int, Volume>& segs, int width, int height, int depth,
                             const PipelineConfig& cfg) {
    const Volume soft = aggregate_study(segs, width, height, depth, cfg.agg_sigma);
    const Volume mask = finalize_mask(soft, cfg.final_heatmap_thresh);
    return filter_clusters(connected_components(mask), cfg);
}

}  // namespace

void PipelineConfig::validate() const {
    if (clf_thresh <= 0.0 || clf_thresh >= 1.0) {
        throw ConfigError("pipeline: clf_thresh must be in (0, 1)");
    }
    if (min_cluster_voxels_stop < 1) {
        throw ConfigError("pipeline: min_cluster_voxels_stop must be >= 1");
    }
    if (iter_limit < 1) throw ConfigError("pipeline: iter_limit must be >= 1");
    if (t_high < 0.0) throw ConfigError("pipeline: t_high must be >= 0");
    if (agg_sigma <= 0.0) throw ConfigError("pipeline: agg_sigma must be > 0");
    if (filter_min_size < 0) throw ConfigError("pipeline: filter_min_size must be >= 0");
    if (filter_max_center_dist_frac <= 0.0) {
        throw ConfigError("pipeline: filter_max_center_dist_frac must be > 0");
    }
    if (final_heatmap_thresh <= 0.0) {
        throw ConfigError("pipeline: final_heatmap_thresh must be > 0");
    }
}

void PipelineConfig::require_t_high() const {
    if (!(t_high > 0.0)) {
        throw ConfigError("pipeline: t_high is unset; configure it or run the sweep");
    }
}

const char* to_string(StopReason r) {
    switch (r) {
        case StopReason::prob_below:
            return "prob_below";
        case StopReason::volume_below:
            return "volume_below";
        case StopReason::limit:
            return "limit";
    }
    return "prob_below";
}

std::pair<Volume, IterationTrace> iexplain_minivolume(const ClassifierParams& clf,
                                                      const AttributionConfig& attrib_cfg,
                                                      const MiniVolume& mini,
                                                      const PipelineConfig& cfg) {
    cfg.validate();
    cfg.require_t_high();
    attrib_cfg.validate();

    MiniVolume curr = mini;
    Volume union_seg(mini.volume.width, mini.volume.height, mini.volume.depth);
    union_seg.spacing = mini.volume.spacing;
    IterationTrace trace;

    // Alg. 1 guard, checked in listed order; masked starts at "infinity" so
    // the volume test cannot fire before the first pass.
    std::int64_t masked = std::numeric_limits<std::int64_t>::max();
    for (;;) {
        const float prob = forward(clf, curr).prob;
        if (!(prob > cfg.clf_thresh)) {
            trace.stop_reason = StopReason::prob_below;
            trace.exit_prob = prob;
            break;
        }
        if (static_cast<int>(trace.steps.size()) >= cfg.iter_limit) {
            trace.stop_reason = StopReason::limit;
            trace.exit_prob = prob;
            break;
        }
        if (!(masked > cfg.min_cluster_voxels_stop)) {
            trace.stop_reason = StopReason::volume_below;
            trace.exit_prob = prob;
            break;
        }

        Volume heatmap = compute_heatmap(clf, curr, attrib_cfg);
        // Voxels already claimed by earlier iterations are out of play;
        // nonzero references could otherwise re-attribute them.
        for (std::size_t i = 0; i < heatmap.data.size(); ++i) {
            if (union_seg.data[i] != 0.0f) heatmap.data[i] = 0.0f;
        }
        Volume seg = hysteresis_cluster(heatmap, static_cast<float>(cfg.t_high));

        IterationStep step;
        step.prob = prob;
        step.seg = sparse_indices(seg);
        step.masked = static_cast<std::int64_t>(step.seg.size());
        masked = step.masked;

        curr.volume = apply_mask(curr.volume, seg);
        for (std::uint32_t idx : step.seg) union_seg.data[idx] = 1.0f;
        trace.steps.push_back(std::move(step));
    }
    return {std::move(union_seg), std::move(trace)};
}

Volume aggregate_study(const std::map<int, Volume>& per_slice_segs, int width, int height,
                       int depth, double agg_sigma) {
    if (agg_sigma <= 0.0) throw PreconditionError("aggregate_study: agg_sigma must be > 0");
    if (width <= 0 || height <= 0 || depth <= 0) {
        throw ShapeError("aggregate_study: study dims must be positive");
    }

    std::vector<double> weight(static_cast<std::size_t>(kMiniDepth));
    for (int j = 0; j < kMiniDepth; ++j) {
        const double d = j - kMiniHalf;
        weight[static_cast<std::size_t>(j)] = std::exp(-d * d / (2.0 * agg_sigma * agg_sigma));
    }

    const std::size_t slice_len = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    std::vector<double> num(slice_len * static_cast<std::size_t>(depth), 0.0);
    std::vector<double> den(static_cast<std::size_t>(depth), 0.0);

    for (const auto& [center, seg] : per_slice_segs) {
        if (center < 0 || center >= depth) {
            throw IndexError("aggregate_study: center slice " + std::to_string(center) +
                             " outside study depth " + std::to_string(depth));
        }
        if (seg.width != width || seg.height != height || seg.depth != kMiniDepth) {
            throw ShapeError("aggregate_study: seg dims mismatch at center " +
                             std::to_string(center));
        }
        seg.require_binary("aggregate_study seg");
        for (int j = 0; j < kMiniDepth; ++j) {
            const int z = center + j - kMiniHalf;
            if (z < 0 || z >= depth) continue;
            const double w = weight[static_cast<std::size_t>(j)];
            den[static_cast<std::size_t>(z)] += w;
            const float* src = seg.data.data() + slice_len * static_cast<std::size_t>(j);
            double* dst = num.data() + slice_len * static_cast<std::size_t>(z);
            for (std::size_t i = 0; i < slice_len; ++i) dst[i] += w * src[i];
        }
    }

    Volume out(width, height, depth);
    for (int z = 0; z < depth; ++z) {
        const double d = den[static_cast<std::size_t>(z)];
        if (d <= 0.0) continue;
        const double* src = num.data() + slice_len * static_cast<std::size_t>(z);
        float* dst = out.data.data() + slice_len * static_cast<std::size_t>(z);
        for (std::size_t i = 0; i < slice_len; ++i) {
            dst[i] = static_cast<float>(src[i] / d);
        }
    }
    return out;
}

Volume finalize_mask(const Volume& soft, double final_heatmap_thresh) {
    if (final_heatmap_thresh < 0.0) {
        throw PreconditionError("finalize_mask: threshold must be >= 0");
    }
    Volume out(soft.width, soft.height, soft.depth);
    out.spacing = soft.spacing;
    for (std::size_t i = 0; i < soft.data.size(); ++i) {
        const float v = soft.data[i];
        if (v < 0.0f || v > 1.0f || !std::isfinite(v)) {
            throw DataError("finalize_mask: soft volume outside [0, 1] at index " +
                            std::to_string(i));
        }
        if (v > 0.0f && static_cast<double>(v) >= final_heatmap_thresh) {
            out.data[i] = 1.0f;
        }
    }
    return out;
}

ClusterSet filter_clusters(const ClusterSet& cs, const PipelineConfig& cfg) {
    const double half_w = cs.source_dims[0] / 2.0;
    const double cx = cs.source_dims[0] / 2.0;
    const double cy = cs.source_dims[1] / 2.0;
    const double max_dist = cfg.filter_max_center_dist_px >= 0.0
                                ? cfg.filter_max_center_dist_px
                                : cfg.filter_max_center_dist_frac * half_w;
    ClusterSet out;
    out.source_dims = cs.source_dims;
    for (const Cluster& c : cs.clusters) {
        if (c.stats.voxel_count < cfg.filter_min_size) continue;
        const double dx = c.stats.centroid[0] - cx;
        const double dy = c.stats.centroid[1] - cy;
        if (std::sqrt(dx * dx + dy * dy) > max_dist) continue;
        out.clusters.push_back(c);
    }
    return out;
}

StudyResult generate_pseudolabels(const Volume& windowed_study, const ClassifierParams& clf,
                                  const AttributionConfig& attrib_cfg,
                                  const PipelineConfig& cfg) {
    cfg.validate();
    cfg.require_t_high();
    const auto t0 = std::chrono::steady_clock::now();

    StudyResult result;
    result.iteration_histogram.assign(static_cast<std::size_t>(cfg.iter_limit) + 1, 0);

    std::map<int, Volume> segs;
    for (int center = 0; center < windowed_study.depth; ++center) {
        MiniVolume mini = extract_minivolume(windowed_study, center);
        auto [union_seg, trace] = iexplain_minivolume(clf, attrib_cfg, mini, cfg);
        result.iteration_histogram[trace.steps.size()] += 1;
        for (const IterationStep& s : trace.steps) result.masked_total += s.masked;
        if (!trace.steps.empty()) {
            segs.emplace(center, std::move(union_seg));
        }
        result.slices.push_back({center, std::move(trace)});
    }

    result.clusters = assemble_clusters(segs, windowed_study.width, windowed_study.height,
                                        windowed_study.depth, cfg);

    result.final_mask = Volume(windowed_study.width, windowed_study.height, windowed_study.depth);
    result.final_mask.spacing = windowed_study.spacing;
    for (const Cluster& c : result.clusters.clusters) {
        for (std::uint32_t idx : c.voxels) result.final_mask.data[idx] = 1.0f;
    }

    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

ClusterSet clusters_at_iteration(const std::vector<SliceTrace>& slices, int width, int height,
                                 int depth, int k, const PipelineConfig& cfg) {
    cfg.validate();
    if (k < 0) throw PreconditionError("clusters_at_iteration: k must be >= 0");

    std::map<int, Volume> segs;
    for (const SliceTrace& st : slices) {
        const std::size_t take =
            std::min(st.trace.steps.size(), static_cast<std::size_t>(k));
        if (take == 0) continue;
        Volume seg(width, height, kMiniDepth);
        for (std::size_t s = 0; s < take; ++s) {
            for (std::uint32_t idx : st.trace.steps[s].seg) seg.data[idx] = 1.0f;
        }
        segs.emplace(st.center, std::move(seg));
    }
    return assemble_clusters(segs, width, height, depth, cfg);
}

SweepResult sweep_high_threshold(const std::vector<EvalStudy>& studies,
                                 const std::vector<double>& grid, const ClassifierParams& clf,
                                 const AttributionConfig& attrib_cfg, PipelineConfig cfg) {
    if (grid.empty()) {
        throw PreconditionError("sweep_high_threshold: empty threshold grid");
    }
    if (studies.empty()) {
        throw PreconditionError("sweep_high_threshold: no evaluation studies");
    }
    for (const EvalStudy& s : studies) {
        if (s.windowed == nullptr) {
            throw PreconditionError("sweep_high_threshold: null study volume for '" + s.id + "'");
        }
    }

    SweepResult result;
    bool have_best = false;
    double best_f1 = 0.0;
    for (double t : grid) {
        cfg.t_high = t;
        cfg.validate();
        cfg.require_t_high();

        std::vector<StudyPrediction> preds;
        std::vector<StudyGroundTruth> gts;
        for (const EvalStudy& s : studies) {
            StudyResult r = generate_pseudolabels(*s.windowed, clf, attrib_cfg, cfg);
            preds.push_back({s.id, std::move(r.clusters)});
            gts.push_back({s.id,
                           {s.windowed->width, s.windowed->height, s.windowed->depth},
                           s.regions});
        }
        const MetricsReport report = evaluate_dataset(preds, gts);
        result.curve.push_back({t, report.rates.f1});
        if (!have_best || report.rates.f1 > best_f1 ||
            (report.rates.f1 == best_f1 && t < result.best_t_high)) {
            have_best = true;
            best_f1 = report.rates.f1;
            result.best_t_high = t;
        }
    }
    return result;
}

std::string config_fingerprint(const PipelineConfig& cfg, const AttributionConfig& attrib_cfg) {
    std::ostringstream ss;
    ss.precision(17);
    ss << "agg_sigma=" << cfg.agg_sigma << '\n'
       << "clf_thresh=" << cfg.clf_thresh << '\n'
       << "filter_max_center_dist_frac=" << cfg.filter_max_center_dist_frac << '\n'
       << "filter_max_center_dist_px=" << cfg.filter_max_center_dist_px << '\n'
       << "filter_min_size=" << cfg.filter_min_size << '\n'
       << "final_heatmap_thresh=" << cfg.final_heatmap_thresh << '\n'
       << "ig_steps=" << attrib_cfg.ig_steps << '\n'
       << "iter_limit=" << cfg.iter_limit << '\n'
       << "min_cluster_voxels_stop=" << cfg.min_cluster_voxels_stop << '\n'
       << "n_references=" << attrib_cfg.n_references << '\n';
    ss << "references=";
    for (int r = 0; r < attrib_cfg.n_references &&
                    r < static_cast<int>(attrib_cfg.references.size());
         ++r) {
        if (r) ss << ',';
        ss << attrib_cfg.references[static_cast<std::size_t>(r)].describe();
    }
    ss << '\n'
       << "seed=" << attrib_cfg.seed << '\n'
       << "smoothgrad_n=" << attrib_cfg.smoothgrad_n << '\n'
       << "smoothgrad_sigma=" << attrib_cfg.smoothgrad_sigma << '\n'
       << "t_high=" << cfg.t_high << '\n';

    const std::string text = ss.str();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace iexplain
