#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iexplain/classifier.hpp"
#include "iexplain/volume.hpp"

namespace iexplain {

// A recipe for constructing an IG reference input from the explained input.
struct BaselinePolicy {
    enum class Kind { zero, constant, blurred_input };
    Kind kind = Kind::zero;
    float value = 0.0f;  // constant kind
    float sigma = 2.0f;  // blurred_input kind, in voxels

    std::string describe() const;  // "zero" | "const:c" | "blur:sigma"
};

BaselinePolicy parse_baseline_policy(const std::string& text);

// Spans the windowed intensity range: zero, three constants, blurred input.
std::vector<BaselinePolicy> default_references();

struct AttributionConfig {
    int ig_steps = 32;
    std::vector<BaselinePolicy> references = default_references();
    int n_references = 5;  // how many of `references` to use, front first
    int smoothgrad_n = 0;  // 0 = off
    double smoothgrad_sigma = 0.1;  // fraction of the input's value range
    std::uint64_t seed = 0;

    void validate() const;
};

// Separable Gaussian blur, kernel truncated at 3 sigma and renormalized at
// the borders. sigma <= 0 returns the input unchanged.
Volume gaussian_blur(const Volume& v, double sigma);

Volume make_baseline(const BaselinePolicy& policy, const MiniVolume& x);

// IG_i = (x_i - x'_i) * mean_alpha dF/dx_i at x' + alpha(x - x'), with the
// classifier logit as F and midpoint alphas (k+0.5)/steps.
Volume integrated_gradients(const ClassifierParams& params, const MiniVolume& x,
                            const Volume& baseline, int steps);

// Arithmetic mean of per-baseline IG heatmaps.
Volume multi_reference_ig(const ClassifierParams& params, const MiniVolume& x,
                          const std::vector<Volume>& baselines, int steps);

// Mean of multi_reference_ig over smoothgrad_n noisy copies of x, with
// noise N(0, (smoothgrad_sigma * range)^2) where range = max(x) - min(x).
Volume smoothgrad_ig(const ClassifierParams& params, const MiniVolume& x,
                     const AttributionConfig& cfg);

// Dispatch on cfg: SmoothGrad when smoothgrad_n >= 1, multi-reference IG
// otherwise.
Volume compute_heatmap(const ClassifierParams& params, const MiniVolume& x,
                       const AttributionConfig& cfg);

}  // namespace iexplain
