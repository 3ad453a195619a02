#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "iexplain/clustering.hpp"

namespace iexplain {

struct GroundTruthRegion {
    int id = 0;
    std::vector<std::uint32_t> voxels;  // sorted x-fastest linear indices
};

struct MatchResult {
    int tp = 0;
    int fp = 0;
    int fn = 0;
    std::vector<std::pair<int, int>> matches;  // (gt id, cluster id) pairs
};

// Detection rates as percentages. sensitivity/ppv are absent when their
// denominator is zero; f1 falls back to 0 by convention.
struct Rates {
    std::optional<double> sensitivity;
    std::optional<double> ppv;
    double f1 = 0.0;
};

struct StudyCounts {
    std::string study_id;
    int tp = 0;
    int fp = 0;
    int fn = 0;
};

struct MetricsReport {
    int tp = 0;
    int fp = 0;
    int fn = 0;
    Rates rates;
    std::vector<StudyCounts> per_study;
    std::optional<double> auc_roc;
};

struct StudyPrediction {
    std::string study_id;
    ClusterSet clusters;
};

struct StudyGroundTruth {
    std::string study_id;
    std::array<int, 3> dims{0, 0, 0};
    std::vector<GroundTruthRegion> regions;
};

// A GT region is a TP when it intersects at least one predicted cluster;
// a cluster intersecting no GT is an FP. Many-to-many matches allowed.
// strict_iou demands IOU >= 0.5 instead of bare intersection.
MatchResult match_clusters(const ClusterSet& pred, const std::vector<GroundTruthRegion>& gt,
                           const std::array<int, 3>& gt_dims, bool strict_iou = false);

Rates prf(int tp, int fp, int fn);

// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie), exact via
// average ranks.
double auc_roc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// Pools counts over studies (micro-average), keyed by study id.
MetricsReport evaluate_dataset(const std::vector<StudyPrediction>& predictions,
                               const std::vector<StudyGroundTruth>& ground_truths,
                               bool strict_iou = false);

}  // namespace iexplain
