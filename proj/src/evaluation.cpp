#include "iexplain/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>

#include "iexplain/errors.hpp"

namespace iexplain {

namespace {

// Intersection size of two sorted index vectors.
std::size_t overlap(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    std::size_t i = 0, j = 0, n = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++n;
            ++i;
            ++j;
        }
    }
    return n;
}

bool pair_matches(const std::vector<std::uint32_t>& pred, const std::vector<std::uint32_t>& gt,
                  bool strict_iou) {
    const std::size_t inter = overlap(pred, gt);
    if (inter == 0) return false;
    if (!strict_iou) return true;
    const std::size_t uni = pred.size() + gt.size() - inter;
    return 2 * inter >= uni;  // IOU >= 0.5 without division
}

}  // namespace

MatchResult match_clusters(const ClusterSet& pred, const std::vector<GroundTruthRegion>& gt,
                           const std::array<int, 3>& gt_dims, bool strict_iou) {
    if (pred.source_dims != gt_dims) {
        throw ShapeError("match_clusters: prediction and ground-truth dims differ");
    }
    for (const auto& region : gt) {
        if (region.voxels.empty()) {
            throw PreconditionError("match_clusters: empty ground-truth region " +
                                    std::to_string(region.id));
        }
    }

    MatchResult r;
    std::vector<std::uint8_t> cluster_hit(pred.clusters.size(), 0);
    for (const auto& region : gt) {
        bool hit = false;
        for (std::size_t c = 0; c < pred.clusters.size(); ++c) {
            if (pair_matches(pred.clusters[c].voxels, region.voxels, strict_iou)) {
                hit = true;
                cluster_hit[c] = 1;
                r.matches.emplace_back(region.id, pred.clusters[c].id);
            }
        }
        if (hit) {
            ++r.tp;
        } else {
            ++r.fn;
        }
    }
    for (std::size_t c = 0; c < pred.clusters.size(); ++c) {
        if (!cluster_hit[c]) ++r.fp;
    }
    return r;
}

Rates prf(int tp, int fp, int fn) {
    if (tp < 0 || fp < 0 || fn < 0) {
        throw PreconditionError("prf: counts must be nonnegative");
    }
    Rates r;
    if (tp + fn > 0) r.sensitivity = 100.0 * tp / (tp + fn);
    if (tp + fp > 0) r.ppv = 100.0 * tp / (tp + fp);
    if (r.sensitivity && r.ppv && (*r.sensitivity + *r.ppv) > 0.0) {
        r.f1 = 2.0 * (*r.sensitivity) * (*r.ppv) / (*r.sensitivity + *r.ppv);
    }
    return r;
}

double auc_roc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) {
        throw PreconditionError("auc_roc: scores and labels length mismatch");
    }
    const std::size_t n_pos = static_cast<std::size_t>(
        std::count_if(labels.begin(), labels.end(), [](std::uint8_t l) { return l != 0; }));
    const std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw PreconditionError("auc_roc: both classes must be present");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tie groups, 1-based.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

MetricsReport evaluate_dataset(const std::vector<StudyPrediction>& predictions,
                               const std::vector<StudyGroundTruth>& ground_truths,
                               bool strict_iou) {
    std::unordered_map<std::string, const StudyPrediction*> by_id;
    for (const auto& p : predictions) {
        if (!by_id.emplace(p.study_id, &p).second) {
            throw DataError("evaluate_dataset: duplicate prediction id '" + p.study_id + "'");
        }
    }
    std::string offenders;
    std::unordered_map<std::string, int> gt_seen;
    for (const auto& g : ground_truths) {
        if (++gt_seen[g.study_id] > 1) {
            throw DataError("evaluate_dataset: duplicate ground-truth id '" + g.study_id + "'");
        }
        if (by_id.find(g.study_id) == by_id.end()) {
            offenders += (offenders.empty() ? "" : ", ") + g.study_id;
        }
    }
    for (const auto& p : predictions) {
        if (gt_seen.find(p.study_id) == gt_seen.end()) {
            offenders += (offenders.empty() ? "" : ", ") + p.study_id;
        }
    }
    if (!offenders.empty()) {
        throw DataError("evaluate_dataset: unmatched study ids: " + offenders);
    }

    MetricsReport report;
    for (const auto& g : ground_truths) {
        const StudyPrediction& p = *by_id.at(g.study_id);
        const MatchResult m = match_clusters(p.clusters, g.regions, g.dims, strict_iou);
        report.tp += m.tp;
        report.fp += m.fp;
        report.fn += m.fn;
        report.per_study.push_back({g.study_id, m.tp, m.fp, m.fn});
    }
    report.rates = prf(report.tp, report.fp, report.fn);
    return report;
}

}  // namespace iexplain
