// iexplain: phantom data generation, classifier training, explanation-driven
// pseudo-labeling, and evaluation, as one reproducible command-line tool.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
// Failures print a single machine-readable JSON line on stderr.

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "iexplain/attribution.hpp"
#include "iexplain/classifier.hpp"
#include "iexplain/clustering.hpp"
#include "iexplain/errors.hpp"
#include "iexplain/evaluation.hpp"
#include "iexplain/io_formats.hpp"
#include "iexplain/phantom.hpp"
#include "iexplain/pipeline.hpp"
#include "iexplain/run_config.hpp"
#include "iexplain/volume.hpp"

namespace fs = std::filesystem;
using iexplain::RunConfig;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing

bool use_color() {
    static const bool enabled = std::getenv("NO_COLOR") == nullptr && isatty(1) == 1;
    return enabled;
}

void status(const std::string& msg) {
    if (use_color()) {
        std::cout << "\033[32m[ok]\033[0m " << msg << "\n";
    } else {
        std::cout << "[ok] " << msg << "\n";
    }
}

[[noreturn]] void die(const char* kind, const std::string& message, int code) {
    json err;
    err["error"]["kind"] = kind;
    err["error"]["message"] = message;
    std::cerr << err.dump() << "\n";
    std::exit(code);
}

const char* io_kind_name(iexplain::IoError::Kind k) {
    using Kind = iexplain::IoError::Kind;
    switch (k) {
        case Kind::missing_file: return "io:missing_file";
        case Kind::write_failure: return "io:write_failure";
        case Kind::bad_magic: return "io:bad_magic";
        case Kind::version_mismatch: return "io:version_mismatch";
        case Kind::checksum_mismatch: return "io:checksum_mismatch";
        case Kind::length_mismatch: return "io:length_mismatch";
        case Kind::schema_violation: return "io:schema_violation";
        case Kind::referential: return "io:referential";
    }
    return "io";
}

// Runs fn(0..n-1) on up to `jobs` threads. Results must be written to
// index-addressed slots so the outcome does not depend on scheduling; the
// first exception wins and is rethrown on the calling thread.
template <typename Fn>
void parallel_for(int n, int jobs, Fn&& fn) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(jobs));
    for (int t = 0; t < jobs; ++t) {
        workers.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);
}

int default_jobs() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

RunConfig merged_config(const std::string& config_path,
                        const std::map<std::string, std::string>& flag_overrides) {
    RunConfig rc;
    if (!config_path.empty()) rc.apply(iexplain::read_config_file(config_path));
    rc.apply(flag_overrides);
    return rc;
}

void write_run_record(const std::string& out_dir, const char* subcommand, const RunConfig& rc,
                      json extra) {
    extra["subcommand"] = subcommand;
    extra["run_config_hash"] = rc.hash();
    extra["config"] = rc.canonical_text();
    std::ofstream out(fs::path(out_dir) / "run.json");
    if (!out) {
        throw iexplain::IoError(iexplain::IoError::Kind::write_failure,
                                "cannot write run record in '" + out_dir + "'");
    }
    out << extra.dump(2) << "\n";
}

// Study volumes are stored as HU; windowed volumes are accepted as-is so
// pipeline outputs can be re-fed.
iexplain::Volume load_windowed(const std::string& path) {
    auto [vol, header] = iexplain::load_volume(path);
    if (header.value_semantics == "hu") return iexplain::hu_window(vol);
    if (header.value_semantics == "windowed") return vol;
    throw iexplain::DataError("study volume '" + path + "' has semantics '" +
                              header.value_semantics + "'; expected hu or windowed");
}

std::vector<iexplain::GroundTruthRegion> gt_regions_from_mask(const iexplain::Volume& mask) {
    const iexplain::ClusterSet cc = iexplain::connected_components(mask);
    std::vector<iexplain::GroundTruthRegion> regions;
    regions.reserve(cc.clusters.size());
    for (const iexplain::Cluster& c : cc.clusters) regions.push_back({c.id, c.voxels});
    return regions;
}

std::string csv_rate(const std::optional<double>& r) {
    if (!r.has_value()) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *r);
    return buf;
}

// ---------------------------------------------------------------------------
// phantom-gen

struct PhantomGenArgs {
    std::string out_dir;
    std::string config_path;
    int count = 0;
    double positivity = 0.0;
    std::uint64_t seed = 0;
    std::string dims;
    int jobs = default_jobs();
    bool count_set = false, positivity_set = false, seed_set = false;
};

int run_phantom_gen(const PhantomGenArgs& args) {
    std::map<std::string, std::string> overrides;
    if (args.count_set) overrides["dataset.count"] = std::to_string(args.count);
    if (args.positivity_set) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", args.positivity);
        overrides["dataset.positivity"] = buf;
    }
    if (args.seed_set) overrides["phantom.seed"] = std::to_string(args.seed);
    if (!args.dims.empty()) {
        int w = 0, h = 0, d = 0;
        char tail = 0;
        if (std::sscanf(args.dims.c_str(), "%dx%dx%d%c", &w, &h, &d, &tail) != 3) {
            throw iexplain::ConfigError("--dims expects WxHxD, got '" + args.dims + "'");
        }
        overrides["phantom.width"] = std::to_string(w);
        overrides["phantom.height"] = std::to_string(h);
        overrides["phantom.depth"] = std::to_string(d);
    }
    const RunConfig rc = merged_config(args.config_path, overrides);
    rc.phantom.validate();
    if (rc.dataset_count < 0) throw iexplain::ConfigError("dataset.count must be >= 0");
    if (rc.dataset_positivity < 0.0 || rc.dataset_positivity > 1.0) {
        throw iexplain::ConfigError("dataset.positivity must be in [0, 1]");
    }
    fs::create_directories(args.out_dir);

    const std::string hash = rc.hash();
    const int n = rc.dataset_count;
    std::vector<iexplain::ManifestEntry> entries(static_cast<std::size_t>(n));
    std::atomic<int> n_positive{0};

    parallel_for(n, args.jobs, [&](int i) {
        const iexplain::PhantomConfig cfg =
            iexplain::dataset_study_config(rc.phantom, i, n, rc.dataset_positivity);
        const iexplain::PhantomStudy study = iexplain::generate_phantom(cfg);

        char name[32];
        std::snprintf(name, sizeof name, "study_%03d", i);
        json prov;
        prov["run_config_hash"] = hash;
        prov["study_id"] = name;
        prov["study_seed"] = cfg.seed;

        const std::string vol_rel = std::string(name) + ".json";
        const std::string gt_rel = std::string(name) + "_gt.json";
        iexplain::save_volume(study.volume, iexplain::ValueSemantics::hu,
                              (fs::path(args.out_dir) / vol_rel).string(), prov);
        iexplain::save_volume(study.gt_mask, iexplain::ValueSemantics::mask,
                              (fs::path(args.out_dir) / gt_rel).string(), prov);

        iexplain::ManifestEntry entry;
        entry.id = name;
        entry.volume_path = vol_rel;
        entry.gt_path = gt_rel;
        entry.positive = std::any_of(study.slice_labels.begin(), study.slice_labels.end(),
                                     [](std::uint8_t v) { return v != 0; });
        entry.slice_labels = study.slice_labels;
        if (entry.positive) n_positive.fetch_add(1);
        entries[static_cast<std::size_t>(i)] = std::move(entry);
    });

    iexplain::DatasetManifest manifest;
    manifest.dims = {rc.phantom.width, rc.phantom.height, rc.phantom.depth};
    manifest.positivity = rc.dataset_positivity;
    manifest.seed = rc.phantom.seed;
    manifest.entries = std::move(entries);
    json prov;
    prov["run_config_hash"] = hash;
    iexplain::save_manifest(manifest, (fs::path(args.out_dir) / "manifest.json").string(), prov);
    write_run_record(args.out_dir, "phantom-gen", rc, json::object());

    status("wrote " + std::to_string(n) + " studies (" + std::to_string(n_positive.load()) +
           " positive) to " + args.out_dir + "  [config " + hash + "]");
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string data_dir;
    std::string out_model;
    std::string config_path;
    int iterations = 0;
    int batch_size = 0;
    double learning_rate = 0.0;
    std::uint64_t seed = 0;
    bool iterations_set = false, batch_set = false, lr_set = false, seed_set = false;
};

int run_train(const TrainArgs& args) {
    std::map<std::string, std::string> overrides;
    if (args.iterations_set) overrides["train.iterations"] = std::to_string(args.iterations);
    if (args.batch_set) overrides["train.batch_size"] = std::to_string(args.batch_size);
    if (args.lr_set) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", args.learning_rate);
        overrides["train.learning_rate"] = buf;
    }
    if (args.seed_set) overrides["train.seed"] = std::to_string(args.seed);
    const RunConfig rc = merged_config(args.config_path, overrides);
    rc.train.validate();

    const iexplain::DatasetManifest manifest =
        iexplain::load_manifest((fs::path(args.data_dir) / "manifest.json").string());

    std::vector<iexplain::Volume> studies;
    studies.reserve(manifest.entries.size());
    for (const iexplain::ManifestEntry& e : manifest.entries) {
        studies.push_back(load_windowed((fs::path(args.data_dir) / e.volume_path).string()));
    }
    std::vector<iexplain::SliceSample> samples;
    for (std::size_t s = 0; s < manifest.entries.size(); ++s) {
        const auto& labels = manifest.entries[s].slice_labels;
        if (static_cast<int>(labels.size()) != studies[s].depth) {
            throw iexplain::DataError("manifest slice_labels length disagrees with volume depth "
                                      "for study '" + manifest.entries[s].id + "'");
        }
        for (int z = 0; z < studies[s].depth; ++z) {
            samples.push_back({&studies[s], z, labels[static_cast<std::size_t>(z)]});
        }
    }

    std::vector<float> loss_curve;
    const iexplain::ClassifierParams params = iexplain::train(samples, rc.train, &loss_curve);

    json prov;
    prov["run_config_hash"] = rc.hash();
    if (const fs::path parent = fs::path(args.out_model).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    iexplain::save_classifier(params, args.out_model, prov);

    std::string curve_path = args.out_model;
    if (curve_path.size() >= 5 && curve_path.substr(curve_path.size() - 5) == ".json") {
        curve_path.resize(curve_path.size() - 5);
    }
    curve_path += "_loss.csv";
    {
        std::ofstream csv(curve_path);
        if (!csv) {
            throw iexplain::IoError(iexplain::IoError::Kind::write_failure,
                                    "cannot write '" + curve_path + "'");
        }
        csv << "iteration,loss\n";
        for (std::size_t i = 0; i < loss_curve.size(); ++i) {
            char buf[48];
            std::snprintf(buf, sizeof buf, "%zu,%.8f\n", i, static_cast<double>(loss_curve[i]));
            csv << buf;
        }
    }

    char summary[160];
    std::snprintf(summary, sizeof summary,
                  "trained on %zu slices, final loss %.4f, model %s  [config %s]",
                  samples.size(), loss_curve.empty() ? 0.0 : double(loss_curve.back()),
                  args.out_model.c_str(), rc.hash().c_str());
    status(summary);
    return 0;
}

// ---------------------------------------------------------------------------
// pseudolabel

struct PseudolabelArgs {
    std::string data_dir;
    std::string model_path;
    std::string config_path;
    std::string out_dir;
    double t_high = 0.0;
    std::string sweep;  // "lo:hi:n"
    int iter_limit = 0;
    int jobs = default_jobs();
    bool t_high_set = false, iter_limit_set = false;
};

struct LoadedStudy {
    std::string id;
    iexplain::Volume windowed;
    std::vector<iexplain::GroundTruthRegion> regions;
    bool has_gt = false;
};

json trace_to_json(const iexplain::SliceTrace& st) {
    json steps = json::array();
    for (const iexplain::IterationStep& s : st.trace.steps) {
        steps.push_back({{"prob", s.prob}, {"masked", s.masked}});
    }
    return {{"center", st.center},
            {"stop_reason", iexplain::to_string(st.trace.stop_reason)},
            {"exit_prob", st.trace.exit_prob},
            {"steps", std::move(steps)}};
}

int run_pseudolabel(const PseudolabelArgs& args) {
    std::map<std::string, std::string> overrides;
    if (args.t_high_set) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", args.t_high);
        overrides["pipeline.t_high"] = buf;
    }
    if (args.iter_limit_set) overrides["pipeline.iter_limit"] = std::to_string(args.iter_limit);
    RunConfig rc = merged_config(args.config_path, overrides);
    rc.attribution.validate();

    const iexplain::ClassifierParams clf = iexplain::load_classifier(args.model_path);
    const iexplain::DatasetManifest manifest =
        iexplain::load_manifest((fs::path(args.data_dir) / "manifest.json").string());

    std::vector<LoadedStudy> studies(manifest.entries.size());
    parallel_for(static_cast<int>(manifest.entries.size()), args.jobs, [&](int i) {
        const iexplain::ManifestEntry& e = manifest.entries[static_cast<std::size_t>(i)];
        LoadedStudy s;
        s.id = e.id;
        s.windowed = load_windowed((fs::path(args.data_dir) / e.volume_path).string());
        if (!e.gt_path.empty()) {
            auto [gt, header] = iexplain::load_volume((fs::path(args.data_dir) / e.gt_path).string());
            s.regions = gt_regions_from_mask(gt);
            s.has_gt = true;
        }
        studies[static_cast<std::size_t>(i)] = std::move(s);
    });
    const bool all_gt = std::all_of(studies.begin(), studies.end(),
                                    [](const LoadedStudy& s) { return s.has_gt; });

    fs::create_directories(args.out_dir);

    json sweep_record = json::object();
    if (!args.sweep.empty()) {
        double lo = 0.0, hi = 0.0;
        int n = 0;
        char tail = 0;
        if (std::sscanf(args.sweep.c_str(), "%lf:%lf:%d%c", &lo, &hi, &n, &tail) != 3 ||
            n < 1 || lo <= 0.0 || hi < lo) {
            throw iexplain::ConfigError("--sweep expects lo:hi:n with 0 < lo <= hi, n >= 1");
        }
        std::vector<double> grid;
        for (int i = 0; i < n; ++i) {
            grid.push_back(n == 1 ? lo : lo + (hi - lo) * i / (n - 1));
        }
        std::vector<iexplain::EvalStudy> eval_studies;
        for (const LoadedStudy& s : studies) {
            eval_studies.push_back({s.id, &s.windowed, s.regions});
        }
        const iexplain::SweepResult sweep =
            iexplain::sweep_high_threshold(eval_studies, grid, clf, rc.attribution, rc.pipeline);

        const std::string curve_path = (fs::path(args.out_dir) / "sweep.csv").string();
        std::ofstream csv(curve_path);
        if (!csv) {
            throw iexplain::IoError(iexplain::IoError::Kind::write_failure,
                                    "cannot write '" + curve_path + "'");
        }
        csv << "t_high,f1\n";
        for (const iexplain::SweepPoint& p : sweep.curve) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.6g,%.4f\n", p.t_high, p.f1);
            csv << buf;
        }
        rc.pipeline.t_high = sweep.best_t_high;
        sweep_record["best_t_high"] = sweep.best_t_high;
        sweep_record["grid_points"] = n;
        char line[96];
        std::snprintf(line, sizeof line, "sweep selected t_high %.6g over %d grid points",
                      sweep.best_t_high, n);
        status(line);
    }
    rc.pipeline.validate();
    rc.pipeline.require_t_high();

    const std::string hash = rc.hash();
    const int n_studies = static_cast<int>(studies.size());
    std::vector<std::int64_t> pooled_hist(static_cast<std::size_t>(rc.pipeline.iter_limit) + 1, 0);
    std::vector<iexplain::StudyPrediction> preds(studies.size());
    std::vector<std::int64_t> masked_totals(studies.size(), 0);
    std::vector<std::vector<std::int64_t>> hists(studies.size());
    std::mutex io_mu;

    parallel_for(n_studies, args.jobs, [&](int i) {
        const LoadedStudy& s = studies[static_cast<std::size_t>(i)];
        iexplain::StudyResult r =
            iexplain::generate_pseudolabels(s.windowed, clf, rc.attribution, rc.pipeline);

        json prov;
        prov["run_config_hash"] = hash;
        prov["study_id"] = s.id;
        const fs::path base = fs::path(args.out_dir) / s.id;
        iexplain::save_volume(r.final_mask, iexplain::ValueSemantics::mask,
                              base.string() + "_mask.json", prov);
        iexplain::save_cluster_set(r.clusters, base.string() + "_clusters.json", prov);

        json report;
        report["study_id"] = s.id;
        report["run_config_hash"] = hash;
        report["t_high"] = rc.pipeline.t_high;
        report["masked_total"] = r.masked_total;
        report["cluster_count"] = r.clusters.clusters.size();
        report["iteration_histogram"] = r.iteration_histogram;
        json slices = json::array();
        for (const iexplain::SliceTrace& st : r.slices) slices.push_back(trace_to_json(st));
        report["slices"] = std::move(slices);

        if (s.has_gt) {
            json curve = json::array();
            for (int k = 1; k <= rc.pipeline.iter_limit; ++k) {
                const iexplain::ClusterSet at_k = iexplain::clusters_at_iteration(
                    r.slices, s.windowed.width, s.windowed.height, s.windowed.depth, k,
                    rc.pipeline);
                const iexplain::MatchResult m = iexplain::match_clusters(
                    at_k, s.regions,
                    {s.windowed.width, s.windowed.height, s.windowed.depth});
                curve.push_back({{"iteration", k}, {"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}});
            }
            report["iterations"] = std::move(curve);
        }

        {
            std::ofstream out(base.string() + "_report.json");
            if (!out) {
                throw iexplain::IoError(iexplain::IoError::Kind::write_failure,
                                        "cannot write report for '" + s.id + "'");
            }
            out << report.dump(2) << "\n";
        }

        preds[static_cast<std::size_t>(i)] = {s.id, std::move(r.clusters)};
        masked_totals[static_cast<std::size_t>(i)] = r.masked_total;
        hists[static_cast<std::size_t>(i)] = std::move(r.iteration_histogram);
        std::lock_guard<std::mutex> lock(io_mu);
        std::cout << "  " << s.id << ": " << preds[static_cast<std::size_t>(i)].clusters.clusters.size()
                  << " clusters\n";
    });

    for (const auto& h : hists) {
        for (std::size_t k = 0; k < h.size() && k < pooled_hist.size(); ++k) pooled_hist[k] += h[k];
    }
    {
        const std::string hist_path = (fs::path(args.out_dir) / "iteration_histogram.csv").string();
        std::ofstream csv(hist_path);
        if (!csv) {
            throw iexplain::IoError(iexplain::IoError::Kind::write_failure,
                                    "cannot write '" + hist_path + "'");
        }
        csv << "iterations,slices\n";
        for (std::size_t k = 0; k < pooled_hist.size(); ++k) {
            csv << k << ',' << pooled_hist[k] << '\n';
        }
    }

    json extra;
    extra["t_high_used"] = rc.pipeline.t_high;
    extra["masked_total"] =
        std::accumulate(masked_totals.begin(), masked_totals.end(), std::int64_t{0});
    if (!sweep_record.empty()) extra["sweep"] = sweep_record;
    write_run_record(args.out_dir, "pseudolabel", rc, std::move(extra));

    if (all_gt && n_studies > 0) {
        std::vector<iexplain::StudyGroundTruth> gts;
        for (const LoadedStudy& s : studies) {
            gts.push_back({s.id,
                           {s.windowed.width, s.windowed.height, s.windowed.depth},
                           s.regions});
        }
        const iexplain::MetricsReport m = iexplain::evaluate_dataset(preds, gts, rc.eval_strict_iou);
        char line[160];
        std::snprintf(line, sizeof line,
                      "pseudo labels for %d studies: tp %d fp %d fn %d f1 %.1f  [config %s]",
                      n_studies, m.tp, m.fp, m.fn, m.rates.f1, hash.c_str());
        status(line);
    } else {
        status("pseudo labels for " + std::to_string(n_studies) + " studies  [config " + hash + "]");
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string pred_dir;
    std::string gt_dir;
    std::string out_path;
    std::string config_path;
    bool strict_iou = false;
    bool strict_set = false;
};

int run_eval(const EvalArgs& args) {
    std::map<std::string, std::string> overrides;
    if (args.strict_set) overrides["eval.strict_iou"] = args.strict_iou ? "true" : "false";
    const RunConfig rc = merged_config(args.config_path, overrides);

    const iexplain::DatasetManifest manifest =
        iexplain::load_manifest((fs::path(args.gt_dir) / "manifest.json").string());

    std::vector<iexplain::StudyGroundTruth> gts;
    std::set<std::string> gt_ids;
    for (const iexplain::ManifestEntry& e : manifest.entries) {
        iexplain::StudyGroundTruth gt;
        gt.study_id = e.id;
        gt.dims = manifest.dims;
        if (!e.gt_path.empty()) {
            auto [mask, header] = iexplain::load_volume((fs::path(args.gt_dir) / e.gt_path).string());
            gt.regions = gt_regions_from_mask(mask);
        }
        gt_ids.insert(e.id);
        gts.push_back(std::move(gt));
    }

    // Every *_clusters.json in the prediction directory participates; GT
    // studies without one count as empty predictions (all their regions
    // become FNs). Unknown prediction ids surface as an id-mismatch error.
    std::vector<std::string> cluster_files;
    for (const auto& entry : fs::directory_iterator(args.pred_dir)) {
        const std::string name = entry.path().filename().string();
        constexpr const char* suffix = "_clusters.json";
        if (name.size() > 14 && name.substr(name.size() - 14) == suffix) {
            cluster_files.push_back(entry.path().string());
        }
    }
    std::sort(cluster_files.begin(), cluster_files.end());

    std::vector<iexplain::StudyPrediction> preds;
    std::set<std::string> seen;
    for (const std::string& path : cluster_files) {
        json prov;
        iexplain::ClusterSet cs = iexplain::load_cluster_set(path, &prov);
        std::string id;
        if (prov.contains("study_id")) {
            id = prov["study_id"].get<std::string>();
        } else {
            const std::string name = fs::path(path).filename().string();
            id = name.substr(0, name.size() - 14);
        }
        if (gt_ids.count(id) != 0) {
            const auto& dims = manifest.dims;
            if (cs.source_dims[0] != dims[0] || cs.source_dims[1] != dims[1] ||
                cs.source_dims[2] != dims[2]) {
                throw iexplain::DataError(
                    "prediction '" + id + "' has dims " + std::to_string(cs.source_dims[0]) + "x" +
                    std::to_string(cs.source_dims[1]) + "x" + std::to_string(cs.source_dims[2]) +
                    " but the ground-truth dataset is " + std::to_string(dims[0]) + "x" +
                    std::to_string(dims[1]) + "x" + std::to_string(dims[2]));
            }
        }
        seen.insert(id);
        preds.push_back({std::move(id), std::move(cs)});
    }
    for (const iexplain::StudyGroundTruth& gt : gts) {
        if (seen.count(gt.study_id) == 0) {
            iexplain::StudyPrediction empty;
            empty.study_id = gt.study_id;
            empty.clusters.source_dims = manifest.dims;
            preds.push_back(std::move(empty));
        }
    }

    const iexplain::MetricsReport report =
        iexplain::evaluate_dataset(preds, gts, rc.eval_strict_iou);

    json prov;
    prov["run_config_hash"] = rc.hash();
    prov["strict_iou"] = rc.eval_strict_iou;
    if (const fs::path parent = fs::path(args.out_path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    iexplain::save_metrics(report, args.out_path, prov);

    std::string csv_path = args.out_path;
    if (csv_path.size() >= 5 && csv_path.substr(csv_path.size() - 5) == ".json") {
        csv_path.resize(csv_path.size() - 5);
    }
    csv_path += ".csv";
    {
        std::ofstream csv(csv_path);
        if (!csv) {
            throw iexplain::IoError(iexplain::IoError::Kind::write_failure,
                                    "cannot write '" + csv_path + "'");
        }
        csv << "study,tp,fp,fn,sensitivity,ppv,f1\n";
        for (const iexplain::StudyCounts& s : report.per_study) {
            const iexplain::Rates r = iexplain::prf(s.tp, s.fp, s.fn);
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%s,%s,%.4f\n", s.study_id.c_str(), s.tp,
                          s.fp, s.fn, csv_rate(r.sensitivity).c_str(), csv_rate(r.ppv).c_str(),
                          r.f1);
            csv << buf;
        }
        char buf[160];
        std::snprintf(buf, sizeof buf, "ALL,%d,%d,%d,%s,%s,%.4f\n", report.tp, report.fp,
                      report.fn, csv_rate(report.rates.sensitivity).c_str(),
                      csv_rate(report.rates.ppv).c_str(), report.rates.f1);
        csv << buf;
    }

    char line[160];
    std::snprintf(line, sizeof line, "tp %d fp %d fn %d  sensitivity %s  ppv %s  f1 %.1f%s",
                  report.tp, report.fp, report.fn, csv_rate(report.rates.sensitivity).c_str(),
                  csv_rate(report.rates.ppv).c_str(), report.rates.f1,
                  rc.eval_strict_iou ? "  (strict IOU)" : "");
    status(line);
    return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
    std::vector<std::string> run_dirs;
    std::string out_dir;
};

struct RunCurve {
    std::string name;
    std::string hash;
    double t_high = 0.0;
    int studies = 0;
    // Pooled counts indexed by iteration (1-based; [0] unused).
    std::vector<std::int64_t> tp, fp, fn;
};

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

void write_svg_chart(const std::string& path, const std::string& title,
                     const std::string& y_label, const std::vector<Series>& series, int max_x) {
    static const char* kPalette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44",
                                     "#66ccee", "#aa3377", "#bbbbbb"};
    const int width = 720, height = 440;
    const int ml = 64, mr = 24, mt = 40, mb = 48;
    const double plot_w = width - ml - mr;
    const double plot_h = height - mt - mb;
    const double x_min = 1.0;
    const double x_max = std::max(2, max_x);
    auto sx = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * plot_w; };
    auto sy = [&](double y) { return mt + (100.0 - y) / 100.0 * plot_h; };

    std::ofstream out(path);
    if (!out) {
        throw iexplain::IoError(iexplain::IoError::Kind::write_failure, "cannot write '" + path + "'");
    }
    char buf[512];
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" "
                  "text-anchor=\"middle\">%s</text>\n",
                  width / 2, title.c_str());
    out << buf;

    for (int y = 0; y <= 100; y += 20) {
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%d\" y1=\"%.1f\" x2=\"%d\" y2=\"%.1f\" stroke=\"#dddddd\"/>\n",
                      ml, sy(y), width - mr, sy(y));
        out << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%d\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\" "
                      "text-anchor=\"end\">%d</text>\n",
                      ml - 8, sy(y) + 4, y);
        out << buf;
    }
    const int x_step = std::max(1, (static_cast<int>(x_max) + 9) / 10);
    for (int x = 1; x <= static_cast<int>(x_max); x += x_step) {
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%d\" x2=\"%.1f\" y2=\"%d\" stroke=\"#eeeeee\"/>\n",
                      sx(x), mt, sx(x), height - mb);
        out << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\" "
                      "text-anchor=\"middle\">%d</text>\n",
                      sx(x), height - mb + 18, x);
        out << buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%d\" y=\"%d\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" "
                  "stroke=\"#333333\"/>\n",
                  ml, mt, plot_w, plot_h);
    out << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"12\" "
                  "text-anchor=\"middle\">iteration</text>\n",
                  ml + static_cast<int>(plot_w) / 2, height - 10);
    out << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"16\" y=\"%d\" font-family=\"sans-serif\" font-size=\"12\" "
                  "text-anchor=\"middle\" transform=\"rotate(-90 16 %d)\">%s</text>\n",
                  mt + static_cast<int>(plot_h) / 2, mt + static_cast<int>(plot_h) / 2,
                  y_label.c_str());
    out << buf;

    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % (sizeof kPalette / sizeof kPalette[0])];
        std::string pts;
        for (const auto& [x, y] : series[s].points) {
            std::snprintf(buf, sizeof buf, "%.1f,%.1f ", sx(x), sy(y));
            pts += buf;
        }
        std::snprintf(buf, sizeof buf,
                      "<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"2\" points=\"%s\"/>\n",
                      color, pts.c_str());
        out << buf;
        std::snprintf(buf, sizeof buf,
                      "<rect x=\"%d\" y=\"%zu\" width=\"12\" height=\"3\" fill=\"%s\"/>\n"
                      "<text x=\"%d\" y=\"%zu\" font-family=\"sans-serif\" font-size=\"11\">%s"
                      "</text>\n",
                      width - mr - 150, mt + 10 + s * 18, color, width - mr - 132,
                      mt + 15 + s * 18, series[s].name.c_str());
        out << buf;
    }
    out << "</svg>\n";
}

int run_report(const ReportArgs& args) {
    std::vector<RunCurve> runs;
    for (const std::string& dir : args.run_dirs) {
        RunCurve rc;
        rc.name = fs::path(dir).filename().string();
        if (rc.name.empty()) rc.name = dir;

        const fs::path run_meta = fs::path(dir) / "run.json";
        if (fs::exists(run_meta)) {
            std::ifstream in(run_meta);
            json j;
            in >> j;
            if (j.contains("run_config_hash")) rc.hash = j["run_config_hash"].get<std::string>();
            if (j.contains("t_high_used")) rc.t_high = j["t_high_used"].get<double>();
        }

        std::vector<std::string> report_files;
        for (const auto& entry : fs::directory_iterator(dir)) {
            const std::string name = entry.path().filename().string();
            if (name.size() > 12 && name.substr(name.size() - 12) == "_report.json") {
                report_files.push_back(entry.path().string());
            }
        }
        std::sort(report_files.begin(), report_files.end());
        for (const std::string& path : report_files) {
            std::ifstream in(path);
            json j;
            in >> j;
            ++rc.studies;
            if (!j.contains("iterations")) continue;
            for (const json& row : j["iterations"]) {
                const std::size_t k = row["iteration"].get<std::size_t>();
                if (rc.tp.size() <= k) {
                    rc.tp.resize(k + 1, 0);
                    rc.fp.resize(k + 1, 0);
                    rc.fn.resize(k + 1, 0);
                }
                rc.tp[k] += row["tp"].get<std::int64_t>();
                rc.fp[k] += row["fp"].get<std::int64_t>();
                rc.fn[k] += row["fn"].get<std::int64_t>();
            }
        }
        if (rc.studies > 0) runs.push_back(std::move(rc));
    }
    if (runs.empty()) {
        die("usage", "no pseudolabel runs found under the given --runs directories", 2);
    }

    fs::create_directories(args.out_dir);

    int max_iter = 0;
    for (const RunCurve& r : runs) {
        max_iter = std::max(max_iter, static_cast<int>(r.tp.empty() ? 0 : r.tp.size() - 1));
    }

    {
        std::ofstream csv(fs::path(args.out_dir) / "summary.csv");
        csv << "run,config_hash,t_high,studies,iterations,tp,fp,fn,sensitivity,ppv,f1\n";
        for (const RunCurve& r : runs) {
            if (r.tp.empty()) {
                csv << r.name << ',' << r.hash << ',' << r.t_high << ',' << r.studies
                    << ",,,,,,,\n";
                continue;
            }
            const std::size_t k = r.tp.size() - 1;
            const iexplain::Rates rates = iexplain::prf(
                static_cast<int>(r.tp[k]), static_cast<int>(r.fp[k]), static_cast<int>(r.fn[k]));
            char buf[256];
            std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%d,%zu,%lld,%lld,%lld,%s,%s,%.4f\n",
                          r.name.c_str(), r.hash.c_str(), r.t_high, r.studies, k,
                          static_cast<long long>(r.tp[k]), static_cast<long long>(r.fp[k]),
                          static_cast<long long>(r.fn[k]), csv_rate(rates.sensitivity).c_str(),
                          csv_rate(rates.ppv).c_str(), rates.f1);
            csv << buf;
        }
    }

    {
        std::ofstream csv(fs::path(args.out_dir) / "iteration_curves.csv");
        csv << "run,iteration,tp,fp,fn,sensitivity,ppv,f1\n";
        for (const RunCurve& r : runs) {
            for (std::size_t k = 1; k < r.tp.size(); ++k) {
                const iexplain::Rates rates = iexplain::prf(static_cast<int>(r.tp[k]),
                                                            static_cast<int>(r.fp[k]),
                                                            static_cast<int>(r.fn[k]));
                char buf[256];
                std::snprintf(buf, sizeof buf, "%s,%zu,%lld,%lld,%lld,%s,%s,%.4f\n",
                              r.name.c_str(), k, static_cast<long long>(r.tp[k]),
                              static_cast<long long>(r.fp[k]), static_cast<long long>(r.fn[k]),
                              csv_rate(rates.sensitivity).c_str(), csv_rate(rates.ppv).c_str(),
                              rates.f1);
                csv << buf;
            }
        }
    }

    auto build = [&](auto&& pick) {
        std::vector<Series> series;
        for (const RunCurve& r : runs) {
            Series s;
            s.name = r.name;
            for (std::size_t k = 1; k < r.tp.size(); ++k) {
                const iexplain::Rates rates = iexplain::prf(static_cast<int>(r.tp[k]),
                                                            static_cast<int>(r.fp[k]),
                                                            static_cast<int>(r.fn[k]));
                const std::optional<double> v = pick(rates);
                if (v.has_value()) s.points.push_back({static_cast<double>(k), *v});
            }
            if (!s.points.empty()) series.push_back(std::move(s));
        }
        return series;
    };

    write_svg_chart((fs::path(args.out_dir) / "f1_vs_iteration.svg").string(),
                    "F1 by explain-mask iteration", "F1 (%)",
                    build([](const iexplain::Rates& r) { return std::optional<double>(r.f1); }),
                    max_iter);
    write_svg_chart((fs::path(args.out_dir) / "sensitivity_vs_iteration.svg").string(),
                    "Sensitivity by explain-mask iteration", "sensitivity (%)",
                    build([](const iexplain::Rates& r) { return r.sensitivity; }), max_iter);
    write_svg_chart((fs::path(args.out_dir) / "ppv_vs_iteration.svg").string(),
                    "PPV by explain-mask iteration", "PPV (%)",
                    build([](const iexplain::Rates& r) { return r.ppv; }), max_iter);

    status("report over " + std::to_string(runs.size()) + " run(s) written to " + args.out_dir);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"explanation-driven weak segmentation toolkit"};
    app.require_subcommand(1);

    PhantomGenArgs pg;
    CLI::App* cmd_pg = app.add_subcommand("phantom-gen", "generate a synthetic phantom dataset");
    cmd_pg->add_option("--out", pg.out_dir, "output dataset directory")->required();
    cmd_pg->add_option("--count", pg.count, "number of studies");
    cmd_pg->add_option("--positivity", pg.positivity, "fraction of lesion-bearing studies")
        ->check(CLI::Range(0.0, 1.0));
    cmd_pg->add_option("--seed", pg.seed, "master dataset seed");
    cmd_pg->add_option("--dims", pg.dims, "study dims as WxHxD (default 128x128x40)");
    cmd_pg->add_option("--config", pg.config_path, "key=value config file")
        ->check(CLI::ExistingFile);
    cmd_pg->add_option("--jobs", pg.jobs, "worker threads (results are identical for any value)");

    TrainArgs tr;
    CLI::App* cmd_tr = app.add_subcommand("train", "train the slice classifier on a dataset");
    cmd_tr->add_option("--data", tr.data_dir, "dataset directory (with manifest.json)")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd_tr->add_option("--out", tr.out_model, "output model path (.json)")->required();
    cmd_tr->add_option("--config", tr.config_path, "key=value config file")
        ->check(CLI::ExistingFile);
    cmd_tr->add_option("--iterations", tr.iterations, "training iterations");
    cmd_tr->add_option("--batch-size", tr.batch_size, "batch size");
    cmd_tr->add_option("--learning-rate", tr.learning_rate, "SGD learning rate");
    cmd_tr->add_option("--seed", tr.seed, "training seed");

    PseudolabelArgs pl;
    CLI::App* cmd_pl = app.add_subcommand("pseudolabel", "explain-mask loop over a dataset");
    cmd_pl->add_option("--data", pl.data_dir, "dataset directory (with manifest.json)")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd_pl->add_option("--model", pl.model_path, "trained classifier (.json)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd_pl->add_option("--config", pl.config_path, "key=value config file")
        ->check(CLI::ExistingFile);
    cmd_pl->add_option("--out", pl.out_dir, "output directory")->required();
    CLI::Option* opt_t = cmd_pl->add_option("--t-high", pl.t_high, "hysteresis high threshold");
    CLI::Option* opt_sweep =
        cmd_pl->add_option("--sweep", pl.sweep, "optimize t_high over lo:hi:n (needs GT)");
    opt_t->excludes(opt_sweep);
    cmd_pl->add_option("--iter-limit", pl.iter_limit, "explain-mask iteration cap");
    cmd_pl->add_option("--jobs", pl.jobs, "worker threads (results are identical for any value)");

    EvalArgs ev;
    CLI::App* cmd_ev = app.add_subcommand("eval", "score predictions against ground truth");
    cmd_ev->add_option("--pred", ev.pred_dir, "directory of *_clusters.json predictions")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd_ev->add_option("--gt", ev.gt_dir, "ground-truth dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd_ev->add_option("--out", ev.out_path, "metrics JSON output path")->required();
    cmd_ev->add_option("--config", ev.config_path, "key=value config file")
        ->check(CLI::ExistingFile);
    cmd_ev->add_flag("--strict-iou", ev.strict_iou, "require IOU >= 0.5 for a match");

    ReportArgs rp;
    CLI::App* cmd_rp = app.add_subcommand("report", "tables and plots from pseudolabel runs");
    cmd_rp->add_option("--runs", rp.run_dirs, "pseudolabel output directories")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd_rp->add_option("--out", rp.out_dir, "output directory for tables and plots")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        json err;
        err["error"]["kind"] = "usage";
        err["error"]["message"] = e.what();
        std::cerr << err.dump() << "\n";
        return 2;
    }

    // Flag presence decides which config-file values get overridden.
    pg.count_set = cmd_pg->count("--count") > 0;
    pg.positivity_set = cmd_pg->count("--positivity") > 0;
    pg.seed_set = cmd_pg->count("--seed") > 0;
    tr.iterations_set = cmd_tr->count("--iterations") > 0;
    tr.batch_set = cmd_tr->count("--batch-size") > 0;
    tr.lr_set = cmd_tr->count("--learning-rate") > 0;
    tr.seed_set = cmd_tr->count("--seed") > 0;
    pl.t_high_set = cmd_pl->count("--t-high") > 0;
    pl.iter_limit_set = cmd_pl->count("--iter-limit") > 0;
    ev.strict_set = cmd_ev->count("--strict-iou") > 0;

    try {
        if (cmd_pg->parsed()) return run_phantom_gen(pg);
        if (cmd_tr->parsed()) return run_train(tr);
        if (cmd_pl->parsed()) return run_pseudolabel(pl);
        if (cmd_ev->parsed()) return run_eval(ev);
        if (cmd_rp->parsed()) return run_report(rp);
    } catch (const iexplain::ConfigError& e) {
        die("config", e.what(), 2);
    } catch (const iexplain::PreconditionError& e) {
        die("precondition", e.what(), 2);
    } catch (const iexplain::IoError& e) {
        die(io_kind_name(e.kind), e.what(), 1);
    } catch (const iexplain::DataError& e) {
        die("data", e.what(), 1);
    } catch (const iexplain::ShapeError& e) {
        die("shape", e.what(), 1);
    } catch (const iexplain::GenerationError& e) {
        die("generation", e.what(), 1);
    } catch (const iexplain::Error& e) {
        die("runtime", e.what(), 1);
    } catch (const std::exception& e) {
        die("internal", e.what(), 1);
    }
    return 0;
}
