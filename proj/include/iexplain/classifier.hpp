#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "iexplain/volume.hpp"

namespace iexplain {

// Weights for the fixed 2.5D architecture:
//   conv 3x3x3 (c1) + ReLU -> max pool 2x2x1 -> conv 3x3x3 (c2) + ReLU
//   -> max pool 2x2x1 -> global max pool -> linear -> logit.
// Both convs zero-pad to keep dims; pools use floor-mode windows, so any
// in-plane size >= 4 works. Depth is fixed by the descriptor.
//
// Layouts (output channel fastest, for contiguous FMA lanes):
//   conv1_w[k*c1 + co]             k = ((dz+1)*3 + dy+1)*3 + dx+1
//   conv2_w[(k*c1 + ci)*c2 + co]
struct ClassifierParams {
    int c1 = 8;
    int c2 = 16;
    int input_depth = kMiniDepth;
    std::vector<float> conv1_w, conv1_b;
    std::vector<float> conv2_w, conv2_b;
    std::vector<float> fc_w;
    float fc_b = 0.0f;

    std::size_t param_count() const;
    void validate() const;
};

// He-style normal init for conv kernels, zero biases.
ClassifierParams init_params(int c1, int c2, std::uint64_t seed);

struct Prediction {
    float prob;
    float logit;
};

struct TrainConfig {
    int c1 = 8;
    int c2 = 16;
    double learning_rate = 0.05;
    int iterations = 400;
    int batch_size = 16;
    double momentum = 0.9;
    double cutout_prob = 0.5;
    int cutout_min = 4;
    int cutout_max = 16;
    std::uint64_t seed = 7;

    void validate() const;
};

// One training example: a center slice of a windowed study plus its label.
// Mini-volumes are extracted lazily so a dataset is cheap to hold.
struct SliceSample {
    const Volume* study;
    int slice = 0;
    std::uint8_t label = 0;
};

Prediction forward(const ClassifierParams& params, const MiniVolume& mini);
double forward_logit_f64(const ClassifierParams& params, const MiniVolume& mini);

// Exact reverse-mode gradient of the logit w.r.t. every input voxel.
// Max-pool ties route to the lowest linear index.
Volume input_gradient(const ClassifierParams& params, const MiniVolume& mini);
std::vector<double> input_gradient_f64(const ClassifierParams& params, const MiniVolume& mini);

// Momentum SGD on binary cross-entropy with balanced batches (ceil(batch/2)
// positives) and in-plane cutout. Deterministic given cfg.seed.
ClassifierParams train(const std::vector<SliceSample>& dataset, const TrainConfig& cfg,
                       std::vector<float>* loss_curve = nullptr);

// Central-difference audit of input_gradient at 64-bit precision on a random
// voxel subset (all voxels when the input has fewer than sample_voxels).
// Returns the max relative error over the subset.
double finite_diff_check(const ClassifierParams& params, const MiniVolume& mini, double eps,
                         int sample_voxels = 256, std::uint64_t seed = 0);

}  // namespace iexplain
