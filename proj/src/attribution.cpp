#include "iexplain/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

#include "iexplain/errors.hpp"
#include "iexplain/rng.hpp"

namespace iexplain {

namespace {

void blur_axis(const Volume& in, Volume& out, int axis, const std::vector<double>& kernel) {
    const int radius = static_cast<int>(kernel.size()) / 2;
    const int dims[3] = {in.width, in.height, in.depth};
    const std::size_t strides[3] = {1, static_cast<std::size_t>(in.width),
                                    static_cast<std::size_t>(in.width) *
                                        static_cast<std::size_t>(in.height)};
    const int n = dims[axis];
    const std::size_t stride = strides[axis];
    for (int z = 0; z < in.depth; ++z) {
        for (int y = 0; y < in.height; ++y) {
            for (int x = 0; x < in.width; ++x) {
                const int pos[3] = {x, y, z};
                const std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(in.index(x, y, z));
                double acc = 0.0, wsum = 0.0;
                for (int t = -radius; t <= radius; ++t) {
                    const int p = pos[axis] + t;
                    if (p < 0 || p >= n) continue;
                    const double w = kernel[static_cast<std::size_t>(t + radius)];
                    acc += w * in.data[static_cast<std::size_t>(
                                   idx + t * static_cast<std::ptrdiff_t>(stride))];
                    wsum += w;
                }
                out.data[static_cast<std::size_t>(idx)] = static_cast<float>(acc / wsum);
            }
        }
    }
}

}  // namespace

Volume gaussian_blur(const Volume& v, double sigma) {
    if (sigma <= 0.0) return v;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (int t = -radius; t <= radius; ++t) {
        kernel[static_cast<std::size_t>(t + radius)] =
            std::exp(-0.5 * (t / sigma) * (t / sigma));
    }
    Volume a = v, b = v;
    blur_axis(v, a, 0, kernel);
    blur_axis(a, b, 1, kernel);
    blur_axis(b, a, 2, kernel);
    return a;
}

std::string BaselinePolicy::describe() const {
    // Shortest round-trip formatting; configs that differ anywhere in the
    // parameter must describe differently or their hashes collide.
    char buf[40];
    switch (kind) {
        case Kind::zero:
            return "zero";
        case Kind::constant:
            std::snprintf(buf, sizeof buf, "const:%.17g", value);
            return buf;
        case Kind::blurred_input:
            std::snprintf(buf, sizeof buf, "blur:%.17g", sigma);
            return buf;
    }
    return "zero";
}

BaselinePolicy parse_baseline_policy(const std::string& text) {
    BaselinePolicy p;
    if (text == "zero") {
        p.kind = BaselinePolicy::Kind::zero;
        return p;
    }
    try {
        if (text.rfind("const:", 0) == 0) {
            p.kind = BaselinePolicy::Kind::constant;
            p.value = std::stof(text.substr(6));
            return p;
        }
        if (text.rfind("blur:", 0) == 0) {
            p.kind = BaselinePolicy::Kind::blurred_input;
            p.sigma = std::stof(text.substr(5));
            if (p.sigma <= 0.0f) throw ConfigError("baseline policy: blur sigma must be > 0");
            return p;
        }
    } catch (const std::invalid_argument&) {
        // fall through to the ConfigError below
    } catch (const std::out_of_range&) {
    }
    throw ConfigError("baseline policy: cannot parse '" + text + "'");
}

std::vector<BaselinePolicy> default_references() {
    std::vector<BaselinePolicy> refs(5);
    refs[0].kind = BaselinePolicy::Kind::zero;
    refs[1] = {BaselinePolicy::Kind::constant, 0.25f, 0.0f};
    refs[2] = {BaselinePolicy::Kind::constant, 0.5f, 0.0f};
    refs[3] = {BaselinePolicy::Kind::constant, 0.75f, 0.0f};
    refs[4] = {BaselinePolicy::Kind::blurred_input, 0.0f, 2.0f};
    return refs;
}

void AttributionConfig::validate() const {
    if (ig_steps < 1) throw ConfigError("attribution: ig_steps must be >= 1");
    if (n_references < 1) throw ConfigError("attribution: n_references must be >= 1");
    if (static_cast<std::size_t>(n_references) > references.size()) {
        throw ConfigError("attribution: n_references exceeds the reference list");
    }
    if (smoothgrad_n < 0) throw ConfigError("attribution: smoothgrad_n must be >= 0");
    if (smoothgrad_sigma < 0.0) throw ConfigError("attribution: smoothgrad_sigma must be >= 0");
}

Volume make_baseline(const BaselinePolicy& policy, const MiniVolume& x) {
    const Volume& v = x.volume;
    switch (policy.kind) {
        case BaselinePolicy::Kind::zero:
            return Volume(v.width, v.height, v.depth);
        case BaselinePolicy::Kind::constant: {
            Volume out(v.width, v.height, v.depth);
            std::fill(out.data.begin(), out.data.end(), policy.value);
            return out;
        }
        case BaselinePolicy::Kind::blurred_input:
            return gaussian_blur(v, policy.sigma);
    }
    return Volume(v.width, v.height, v.depth);
}

Volume integrated_gradients(const ClassifierParams& params, const MiniVolume& x,
                            const Volume& baseline, int steps) {
    if (steps < 1) throw PreconditionError("integrated_gradients: steps must be >= 1");
    if (!x.volume.same_dims(baseline)) {
        throw ShapeError("integrated_gradients: baseline dims do not match input");
    }
    baseline.require_finite("integrated_gradients baseline");

    MiniVolume interp = x;
    std::vector<double> acc(x.volume.size(), 0.0);
    for (int k = 0; k < steps; ++k) {
        const float alpha = static_cast<float>((k + 0.5) / steps);
        for (std::size_t i = 0; i < interp.volume.data.size(); ++i) {
            interp.volume.data[i] =
                baseline.data[i] + alpha * (x.volume.data[i] - baseline.data[i]);
        }
        const Volume g = input_gradient(params, interp);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.data[i];
    }

    Volume heatmap(x.volume.width, x.volume.height, x.volume.depth);
    heatmap.spacing = x.volume.spacing;
    for (std::size_t i = 0; i < acc.size(); ++i) {
        heatmap.data[i] = static_cast<float>(
            (static_cast<double>(x.volume.data[i]) - baseline.data[i]) * (acc[i] / steps));
    }
    return heatmap;
}

Volume multi_reference_ig(const ClassifierParams& params, const MiniVolume& x,
                          const std::vector<Volume>& baselines, int steps) {
    if (baselines.empty()) {
        throw PreconditionError("multi_reference_ig: at least one baseline required");
    }
    std::vector<double> acc(x.volume.size(), 0.0);
    for (const Volume& b : baselines) {
        const Volume h = integrated_gradients(params, x, b, steps);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += h.data[i];
    }
    Volume out(x.volume.width, x.volume.height, x.volume.depth);
    out.spacing = x.volume.spacing;
    const double inv = 1.0 / static_cast<double>(baselines.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        out.data[i] = static_cast<float>(acc[i] * inv);
    }
    return out;
}

Volume smoothgrad_ig(const ClassifierParams& params, const MiniVolume& x,
                     const AttributionConfig& cfg) {
    cfg.validate();
    if (cfg.smoothgrad_n < 1) {
        throw PreconditionError("smoothgrad_ig: smoothgrad_n must be >= 1");
    }
    std::vector<Volume> baselines;
    baselines.reserve(static_cast<std::size_t>(cfg.n_references));
    for (int r = 0; r < cfg.n_references; ++r) {
        baselines.push_back(make_baseline(cfg.references[static_cast<std::size_t>(r)], x));
    }

    const auto [mn_it, mx_it] = std::minmax_element(x.volume.data.begin(), x.volume.data.end());
    const double range = static_cast<double>(*mx_it) - static_cast<double>(*mn_it);
    const double noise_sigma = cfg.smoothgrad_sigma * range;

    Rng rng(cfg.seed);
    MiniVolume noisy = x;
    std::vector<double> acc(x.volume.size(), 0.0);
    // Samples are accumulated in index order; a parallel version must keep
    // this reduction order for bit-stable output.
    for (int s = 0; s < cfg.smoothgrad_n; ++s) {
        Rng sample_rng = rng.split(static_cast<std::uint64_t>(s));
        for (std::size_t i = 0; i < noisy.volume.data.size(); ++i) {
            noisy.volume.data[i] =
                x.volume.data[i] + static_cast<float>(noise_sigma * sample_rng.normal());
        }
        const Volume h = multi_reference_ig(params, noisy, baselines, cfg.ig_steps);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += h.data[i];
    }

    Volume out(x.volume.width, x.volume.height, x.volume.depth);
    out.spacing = x.volume.spacing;
    const double inv = 1.0 / static_cast<double>(cfg.smoothgrad_n);
    for (std::size_t i = 0; i < acc.size(); ++i) {
        out.data[i] = static_cast<float>(acc[i] * inv);
    }
    return out;
}

Volume compute_heatmap(const ClassifierParams& params, const MiniVolume& x,
                       const AttributionConfig& cfg) {
    cfg.validate();
    if (cfg.smoothgrad_n >= 1) return smoothgrad_ig(params, x, cfg);
    std::vector<Volume> baselines;
    baselines.reserve(static_cast<std::size_t>(cfg.n_references));
    for (int r = 0; r < cfg.n_references; ++r) {
        baselines.push_back(make_baseline(cfg.references[static_cast<std::size_t>(r)], x));
    }
    return multi_reference_ig(params, x, baselines, cfg.ig_steps);
}

}  // namespace iexplain
