#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "iexplain/attribution.hpp"
#include "iexplain/classifier.hpp"
#include "iexplain/clustering.hpp"
#include "iexplain/errors.hpp"
#include "iexplain/pipeline.hpp"
#include "iexplain/rng.hpp"
#include "iexplain/volume.hpp"

using namespace iexplain;

namespace {

// Identity probe network: conv kernels are delta taps on channel 0 and the
// head reads channel 0, so the logit equals the max of the twice-pooled
// input. Bright voxels then drive the probability above 0.5 and integrated
// gradients land on them, which makes loop behavior easy to stage.
ClassifierParams probe_network() {
    ClassifierParams p;
    p.c1 = 8;
    p.c2 = 16;
    p.conv1_w.assign(27u * 8u, 0.0f);
    p.conv1_b.assign(8u, 0.0f);
    p.conv2_w.assign(27u * 8u * 16u, 0.0f);
    p.conv2_b.assign(16u, 0.0f);
    p.fc_w.assign(16u, 0.0f);
    const int k_center = ((0 + 1) * 3 + 0 + 1) * 3 + 0 + 1;
    p.conv1_w[static_cast<std::size_t>(k_center) * 8u] = 1.0f;
    p.conv2_w[static_cast<std::size_t>(k_center) * 8u * 16u] = 1.0f;
    p.fc_w[0] = 1.0f;
    return p;
}

// Like probe_network, but conv2 sums the center tap and its +x neighbor, so
// the logit is the best sum of two adjacent pooled columns. The gradient then
// lands on exactly two input voxels per pass: the winners of two disjoint
// pool windows. Loops driven by it mask two fresh voxels every iteration,
// which clears the volume guard at its minimum legal setting.
ClassifierParams wide_probe_network() {
    ClassifierParams p = probe_network();
    const int k_center = ((0 + 1) * 3 + 0 + 1) * 3 + 0 + 1;
    p.conv2_w[static_cast<std::size_t>(k_center + 1) * 8u * 16u] = 1.0f;
    return p;
}

// Bright constant box with a dim two-voxel border ring, so the winning pair
// of pooled columns is always interior and both probe taps stay in range.
Volume bright_box_study(int w, int h, int d) {
    Volume v(w, h, d, 0.05f);
    for (int z = 1; z < d - 1; ++z) {
        for (int y = 2; y < h - 2; ++y) {
            for (int x = 2; x < w - 2; ++x) v.at(x, y, z) = 0.7f;
        }
    }
    return v;
}

AttributionConfig fast_attribution() {
    AttributionConfig cfg;
    cfg.ig_steps = 8;
    cfg.references = {BaselinePolicy{}};  // zero baseline only
    cfg.n_references = 1;
    return cfg;
}

// A study with a bright blob; everything else zero.
Volume blob_study(int w, int h, int d, int bx, int by, int bz, int r) {
    Volume v(w, h, d);
    for (int z = std::max(0, bz - 1); z <= std::min(d - 1, bz + 1); ++z) {
        for (int y = by - r; y <= by + r; ++y) {
            for (int x = bx - r; x <= bx + r; ++x) {
                if (v.in_bounds(x, y, z)) v.at(x, y, z) = 1.0f;
            }
        }
    }
    return v;
}

PipelineConfig loop_config() {
    PipelineConfig cfg;
    cfg.t_high = 0.01;
    cfg.min_cluster_voxels_stop = 1;  // the loosest legal volume guard
    cfg.filter_min_size = 1;
    cfg.filter_max_center_dist_px = 1e9;
    cfg.final_heatmap_thresh = 1e-6;
    return cfg;
}

}  // namespace

TEST_CASE("pipeline config: validation and the t_high guard") {
    PipelineConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK_THROWS_AS(cfg.require_t_high(), ConfigError);
    cfg.t_high = 0.5;
    CHECK_NOTHROW(cfg.require_t_high());

    cfg.iter_limit = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = PipelineConfig{};
    cfg.clf_thresh = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = PipelineConfig{};
    cfg.agg_sigma = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = PipelineConfig{};
    cfg.final_heatmap_thresh = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("explain loop: invariants hold on a firing input") {
    const ClassifierParams clf = wide_probe_network();
    const AttributionConfig attrib = fast_attribution();
    PipelineConfig cfg = loop_config();

    Volume study = bright_box_study(16, 16, kMiniDepth);
    const MiniVolume mini = extract_minivolume(study, kMiniHalf);
    const auto [seg_union, trace] = iexplain_minivolume(clf, attrib, mini, cfg);

    // Two adjacent bright columns always beat the dim border, so the probe
    // keeps firing and keeps masking two voxels per pass.
    REQUIRE(trace.steps.size() >= 2);
    CHECK(static_cast<int>(trace.steps.size()) <= cfg.iter_limit);

    // Each iteration ran because the classifier fired, and masked counts
    // match the per-step segmentations.
    std::set<std::uint32_t> prior;
    for (const IterationStep& step : trace.steps) {
        CHECK(step.prob > cfg.clf_thresh);
        CHECK(step.masked == static_cast<std::int64_t>(step.seg.size()));
        CHECK(std::is_sorted(step.seg.begin(), step.seg.end()));
        for (std::uint32_t v : step.seg) {
            CHECK(prior.count(v) == 0);  // never re-detects a masked voxel
        }
        prior.insert(step.seg.begin(), step.seg.end());
    }

    // The returned union is exactly the union of the steps.
    std::size_t union_count = 0;
    for (float v : seg_union.data) union_count += v != 0.0f;
    CHECK(union_count == prior.size());
    for (std::uint32_t v : prior) CHECK(seg_union.data[v] == 1.0f);

    // Loop ended for a recorded reason consistent with its state.
    if (trace.stop_reason == StopReason::prob_below) {
        CHECK(trace.exit_prob <= cfg.clf_thresh);
    } else if (trace.stop_reason == StopReason::limit) {
        CHECK(static_cast<int>(trace.steps.size()) == cfg.iter_limit);
    }
}

TEST_CASE("explain loop: a dark input never iterates") {
    const ClassifierParams clf = probe_network();
    PipelineConfig cfg = loop_config();
    Volume dark(12, 12, kMiniDepth);  // all zero -> logit 0 -> prob 0.5
    const MiniVolume mini{dark, kMiniHalf};
    const auto [seg, trace] = iexplain_minivolume(clf, fast_attribution(), mini, cfg);
    CHECK(trace.steps.empty());
    CHECK(trace.stop_reason == StopReason::prob_below);
    CHECK(trace.exit_prob == doctest::Approx(0.5f));
    for (float v : seg.data) CHECK(v == 0.0f);
}

TEST_CASE("explain loop: volume guard stops small detections") {
    const ClassifierParams clf = probe_network();
    PipelineConfig cfg = loop_config();
    cfg.min_cluster_voxels_stop = 1000000;  // any first detection is below this

    Volume study = blob_study(16, 16, kMiniDepth, 8, 8, kMiniHalf, 2);
    const MiniVolume mini = extract_minivolume(study, kMiniHalf);
    const auto [seg, trace] = iexplain_minivolume(clf, fast_attribution(), mini, cfg);
    REQUIRE(trace.steps.size() == 1);
    CHECK(trace.stop_reason == StopReason::volume_below);
}

TEST_CASE("explain loop: iteration cap is respected and reported") {
    const ClassifierParams clf = wide_probe_network();
    PipelineConfig cfg = loop_config();
    cfg.iter_limit = 2;

    // A big bright plateau cannot be cleared in two passes: every iteration
    // masks two of its voxels and the probe's probability never drops.
    Volume study = bright_box_study(16, 16, kMiniDepth);
    const MiniVolume mini = extract_minivolume(study, kMiniHalf);
    const auto [seg, trace] = iexplain_minivolume(clf, fast_attribution(), mini, cfg);
    REQUIRE(trace.steps.size() == 2);
    CHECK(trace.stop_reason == StopReason::limit);
    CHECK(trace.exit_prob > cfg.clf_thresh);
    for (const IterationStep& step : trace.steps) CHECK(step.masked == 2);
}

TEST_CASE("aggregate_study: single window reproduces its seg exactly") {
    Volume seg(4, 3, kMiniDepth);
    Rng rng(8);
    for (float& v : seg.data) v = rng.next_double() < 0.4 ? 1.0f : 0.0f;

    const int center = 5, depth = 12;
    std::map<int, Volume> segs;
    segs[center] = seg;
    const Volume soft = aggregate_study(segs, 4, 3, depth, 0.8);

    for (int z = 0; z < depth; ++z) {
        const int j = z - center + kMiniHalf;
        for (int y = 0; y < 3; ++y) {
            for (int x = 0; x < 4; ++x) {
                const float want =
                    (j >= 0 && j < kMiniDepth) ? seg.at(x, y, j) : 0.0f;
                CHECK(soft.at(x, y, z) == doctest::Approx(want).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("aggregate_study: overlapping windows blend with Gaussian weights") {
    const double sigma = 0.8;
    Volume ones(2, 2, kMiniDepth, 1.0f);
    Volume zeros(2, 2, kMiniDepth, 0.0f);
    std::map<int, Volume> segs;
    segs[5] = ones;
    segs[6] = zeros;
    const Volume soft = aggregate_study(segs, 2, 2, 12, sigma);

    auto w = [&](int d) { return std::exp(-d * d / (2.0 * sigma * sigma)); };
    // Slice 5 sees ones at offset 0 and zeros at offset -1.
    const double want5 = w(0) / (w(0) + w(1));
    CHECK(soft.at(0, 0, 5) == doctest::Approx(want5).epsilon(1e-6));
    // Slice 8 sees ones at offset 3 and zeros at offset 2.
    const double want8 = w(3) / (w(3) + w(2));
    CHECK(soft.at(1, 1, 8) == doctest::Approx(want8).epsilon(1e-6));
    // Slice 2 is reached only by the ones window (offset -3).
    CHECK(soft.at(0, 1, 2) == doctest::Approx(1.0).epsilon(1e-6));
    // Slice 9 is reached only by the zeros window.
    CHECK(soft.at(0, 0, 9) == doctest::Approx(0.0));
    // Slice 1 is outside every window.
    CHECK(soft.at(0, 0, 1) == 0.0f);
}

TEST_CASE("aggregate_study: rejects bad windows") {
    std::map<int, Volume> segs;
    segs[0] = Volume(4, 4, kMiniDepth);
    CHECK_THROWS_AS(aggregate_study(segs, 4, 4, 10, 0.0), PreconditionError);
    segs.clear();
    segs[20] = Volume(4, 4, kMiniDepth);
    CHECK_THROWS_AS(aggregate_study(segs, 4, 4, 10, 0.8), IndexError);
    segs.clear();
    segs[0] = Volume(5, 4, kMiniDepth);
    CHECK_THROWS_AS(aggregate_study(segs, 4, 4, 10, 0.8), ShapeError);
    segs.clear();
    segs[0] = Volume(4, 4, kMiniDepth, 0.25f);
    CHECK_THROWS_AS(aggregate_study(segs, 4, 4, 10, 0.8), DataError);
}

TEST_CASE("finalize_mask: threshold semantics including the zero floor") {
    Volume soft(4, 1, 1);
    soft.data = {0.0f, 0.2f, 0.5f, 1.0f};

    const Volume at_half = finalize_mask(soft, 0.5);
    CHECK(at_half.data == std::vector<float>{0.0f, 0.0f, 1.0f, 1.0f});

    // At threshold zero only genuinely supported voxels turn on.
    const Volume at_zero = finalize_mask(soft, 0.0);
    CHECK(at_zero.data == std::vector<float>{0.0f, 1.0f, 1.0f, 1.0f});

    // Raising the threshold never adds voxels.
    const Volume strict = finalize_mask(soft, 0.9);
    for (std::size_t i = 0; i < soft.size(); ++i) {
        if (strict.data[i] != 0.0f) CHECK(at_half.data[i] != 0.0f);
    }

    Volume bad(1, 1, 1, 1.5f);
    CHECK_THROWS_AS(finalize_mask(bad, 0.5), DataError);
    CHECK_THROWS_AS(finalize_mask(soft, -0.5), PreconditionError);
}

TEST_CASE("filter_clusters: size and center-distance rules, idempotent") {
    ClusterSet cs;
    cs.source_dims = {64, 64, 8};
    auto add = [&](int id, int x0, int count) {
        Cluster c;
        c.id = id;
        for (int i = 0; i < count; ++i) {
            c.voxels.push_back(static_cast<std::uint32_t>(x0 + i));
        }
        c.stats = cluster_stats(c.voxels, 64, 64, 8);
        cs.clusters.push_back(std::move(c));
    };
    // Centered row of 120 voxels: passes both rules.
    add(0, 32 * 64 + 4, 120);
    // Centered but tiny: size-filtered.
    add(1, 33 * 64 + 30, 5);
    // Long row near y=0: centroid is ~32 px off-center in y.
    add(2, 2 * 64 + 2, 110);

    PipelineConfig cfg;
    cfg.filter_min_size = 100;
    cfg.filter_max_center_dist_px = 20.0;
    const ClusterSet kept = filter_clusters(cs, cfg);
    REQUIRE(kept.clusters.size() == 1);
    CHECK(kept.clusters[0].id == 0);  // survivors keep their ids

    const ClusterSet again = filter_clusters(kept, cfg);
    CHECK(again.clusters.size() == kept.clusters.size());

    // The fractional rule: 0.625 * half-width = 20 px at width 64.
    PipelineConfig frac = cfg;
    frac.filter_max_center_dist_px = -1.0;
    frac.filter_max_center_dist_frac = 0.625;
    const ClusterSet kept2 = filter_clusters(cs, frac);
    CHECK(kept2.clusters.size() == 1);

    // Disabling the size rule admits the tiny centered cluster.
    PipelineConfig loose = cfg;
    loose.filter_min_size = 1;
    CHECK(filter_clusters(cs, loose).clusters.size() == 2);
}

TEST_CASE("generate_pseudolabels: output geometry and trace accounting") {
    const ClassifierParams clf = probe_network();
    const AttributionConfig attrib = fast_attribution();
    PipelineConfig cfg = loop_config();

    Volume study = blob_study(16, 16, 10, 8, 8, 5, 2);
    const StudyResult r = generate_pseudolabels(study, clf, attrib, cfg);

    CHECK(r.final_mask.same_dims(study));
    CHECK(r.final_mask.is_binary());
    CHECK(r.clusters.source_dims == std::array<int, 3>{16, 16, 10});
    CHECK(static_cast<int>(r.slices.size()) == study.depth);

    std::int64_t hist_total = 0, masked = 0;
    for (std::size_t n = 0; n < r.iteration_histogram.size(); ++n) {
        hist_total += r.iteration_histogram[n];
    }
    CHECK(hist_total == study.depth);
    for (const SliceTrace& st : r.slices) {
        const std::size_t n = st.trace.steps.size();
        REQUIRE(n < r.iteration_histogram.size());
        for (const IterationStep& s : st.trace.steps) masked += s.masked;
    }
    CHECK(r.masked_total == masked);

    // The final mask is the union of the filtered clusters.
    std::size_t mask_count = 0;
    for (float v : r.final_mask.data) mask_count += v != 0.0f;
    std::set<std::uint32_t> cluster_voxels;
    for (const Cluster& c : r.clusters.clusters) {
        cluster_voxels.insert(c.voxels.begin(), c.voxels.end());
    }
    CHECK(mask_count == cluster_voxels.size());
    for (std::uint32_t v : cluster_voxels) CHECK(r.final_mask.data[v] == 1.0f);
}

TEST_CASE("clusters_at_iteration: prefix consistency") {
    const ClassifierParams clf = probe_network();
    const AttributionConfig attrib = fast_attribution();
    PipelineConfig cfg = loop_config();

    Volume study = blob_study(16, 16, 10, 8, 8, 5, 2);
    const StudyResult r = generate_pseudolabels(study, clf, attrib, cfg);

    const ClusterSet none = clusters_at_iteration(r.slices, 16, 16, 10, 0, cfg);
    CHECK(none.clusters.empty());

    // Replaying every iteration reproduces the final clustering.
    const ClusterSet full =
        clusters_at_iteration(r.slices, 16, 16, 10, cfg.iter_limit, cfg);
    REQUIRE(full.clusters.size() == r.clusters.clusters.size());
    for (std::size_t i = 0; i < full.clusters.size(); ++i) {
        CHECK(full.clusters[i].voxels == r.clusters.clusters[i].voxels);
    }

    // Total masked volume grows monotonically with the prefix length.
    std::size_t prev = 0;
    for (int k = 1; k <= cfg.iter_limit; ++k) {
        const ClusterSet at_k = clusters_at_iteration(r.slices, 16, 16, 10, k, cfg);
        std::size_t total = 0;
        for (const Cluster& c : at_k.clusters) total += c.voxels.size();
        // Filtering can drop borderline clusters, so compare unfiltered mass
        // via the union mask instead of cluster counts.
        PipelineConfig open = cfg;
        open.filter_min_size = 1;
        const ClusterSet open_k = clusters_at_iteration(r.slices, 16, 16, 10, k, open);
        std::size_t open_total = 0;
        for (const Cluster& c : open_k.clusters) open_total += c.voxels.size();
        CHECK(open_total >= prev);
        prev = open_total;
        (void)total;
    }

    CHECK_THROWS_AS(clusters_at_iteration(r.slices, 16, 16, 10, -1, cfg),
                    PreconditionError);
}

TEST_CASE("sweep: picks the best F1 with ties to the smaller threshold") {
    const ClassifierParams clf = probe_network();
    const AttributionConfig attrib = fast_attribution();
    PipelineConfig cfg = loop_config();

    Volume study = blob_study(16, 16, 10, 8, 8, 5, 2);
    // Ground truth: the bright blob voxels.
    GroundTruthRegion region;
    region.id = 1;
    for (std::size_t i = 0; i < study.size(); ++i) {
        if (study.data[i] != 0.0f) region.voxels.push_back(static_cast<std::uint32_t>(i));
    }
    std::vector<EvalStudy> eval{{"s0", &study, {region}}};

    const SweepResult r =
        sweep_high_threshold(eval, {0.005, 0.01, 1e6}, clf, attrib, cfg);
    REQUIRE(r.curve.size() == 3);
    CHECK(r.curve[0].t_high == doctest::Approx(0.005));
    // An absurd threshold finds nothing.
    CHECK(r.curve[2].f1 == doctest::Approx(0.0));
    // Both working thresholds hit the blob; the tie resolves downward.
    if (r.curve[0].f1 == r.curve[1].f1) {
        CHECK(r.best_t_high == doctest::Approx(0.005));
    }
    CHECK(r.best_t_high < 1e6);
}

TEST_CASE("config_fingerprint: stable and sensitive") {
    PipelineConfig cfg;
    cfg.t_high = 0.5;
    AttributionConfig attrib;
    const std::string a = config_fingerprint(cfg, attrib);
    const std::string b = config_fingerprint(cfg, attrib);
    CHECK(a == b);
    cfg.iter_limit = 9;
    CHECK(config_fingerprint(cfg, attrib) != a);
    cfg.iter_limit = 10;
    attrib.ig_steps = 64;
    CHECK(config_fingerprint(cfg, attrib) != a);
}
