#pragma once

#include <cstdint>
#include <vector>

#include "iexplain/volume.hpp"

namespace iexplain {

// Synthetic CTPA-like study generator. Vessels are bright smoothed
// random-walk tubes, lesions are darker ellipsoids fully inside a vessel
// (a filling defect), background is dark with additive Gaussian noise.
struct PhantomConfig {
    int width = 128;
    int height = 128;
    int depth = 40;
    int vessel_count = 3;
    int lesion_count_min = 1;
    int lesion_count_max = 3;
    // Lesions are oblate: wide in-plane, thin along z. Thin z keeps the
    // slice labels crisp, since a 7-slice stack sees lesions from nearby
    // slices too.
    double lesion_radius_min = 3.5;  // in-plane semi-axes, voxels
    double lesion_radius_max = 4.5;
    double lesion_rz_min = 2.0;  // z semi-axis, voxels
    double lesion_rz_max = 2.6;
    double vessel_radius_min = 6.0;
    double vessel_radius_max = 7.5;
    double background_noise_sigma = 15.0;  // HU
    double background_intensity = -100.0;  // HU
    double lesion_intensity = 100.0;
    double vessel_intensity = 300.0;
    // Lesion centers stay within this fraction of the half-width from the
    // in-plane study center, mirroring how PEs sit inside the lung area.
    double lesion_center_max_dist_frac = 0.5;
    std::uint64_t seed = 1;

    void validate() const;  // throws ConfigError
};

struct PhantomStudy {
    Volume volume;                   // HU-like intensities
    Volume gt_mask;                  // binary lesion ground truth
    std::vector<std::uint8_t> slice_labels;  // 1 iff gt_mask has a voxel in slice z
};

// Deterministic for a given config (including seed).
PhantomStudy generate_phantom(const PhantomConfig& config);

// Config for study `index` of an n_studies dataset: the first
// floor(n_studies * positivity) studies carry >= 1 lesion, the remainder are
// lesion-free, and each study's seed is split from the master seed. Study
// configs depend only on (master, index), so generation order is free.
PhantomConfig dataset_study_config(const PhantomConfig& master, int index, int n_studies,
                                   double positivity);

std::vector<PhantomStudy> generate_dataset(const PhantomConfig& config, int n_studies,
                                           double positivity);

}  // namespace iexplain
