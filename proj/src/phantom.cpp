#include "iexplain/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iexplain/errors.hpp"
#include "iexplain/rng.hpp"

namespace iexplain {

namespace {

struct Vec3 {
    double x, y, z;
};

Vec3 normalize(const Vec3& v) {
    const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
    if (n < 1e-12) return {1.0, 0.0, 0.0};
    return {v.x / n, v.y / n, v.z / n};
}

Vec3 random_unit(Rng& rng) {
    // Rejection-sampled direction, mildly flattened in z so tubes run
    // more in-plane like pulmonary arteries near the hila.
    for (;;) {
        Vec3 v{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5)};
        const double n2 = v.x * v.x + v.y * v.y + v.z * v.z;
        if (n2 > 1e-4 && n2 <= 1.0) return normalize(v);
    }
}

// One centerline sample of a vessel tube.
struct TubeSample {
    Vec3 pos;
    double radius;
};

// Stamps a soft-edged ball into a coverage map: 1 inside, linear falloff
// across a one-voxel shell at the surface.
void stamp_ball(Volume& cov, const Vec3& c, double radius) {
    const int x0 = std::max(0, static_cast<int>(std::floor(c.x - radius - 1)));
    const int x1 = std::min(cov.width - 1, static_cast<int>(std::ceil(c.x + radius + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c.y - radius - 1)));
    const int y1 = std::min(cov.height - 1, static_cast<int>(std::ceil(c.y + radius + 1)));
    const int z0 = std::max(0, static_cast<int>(std::floor(c.z - radius - 1)));
    const int z1 = std::min(cov.depth - 1, static_cast<int>(std::ceil(c.z + radius + 1)));
    for (int z = z0; z <= z1; ++z) {
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dx = x - c.x;
                const double dy = y - c.y;
                const double dz = z - c.z;
                const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                const float v = static_cast<float>(std::clamp(radius + 0.5 - d, 0.0, 1.0));
                float& cell = cov.at(x, y, z);
                cell = std::max(cell, v);
            }
        }
    }
}

// Walks one tube with momentum, reflecting off a margin box, and records
// centerline samples. Coverage is stamped along the way.
void draw_vessel(Volume& cov, Rng& rng, const PhantomConfig& cfg,
                 std::vector<TubeSample>& samples) {
    const double margin = cfg.vessel_radius_max + 1.5;
    const double lo_x = margin, hi_x = cfg.width - 1 - margin;
    const double lo_y = margin, hi_y = cfg.height - 1 - margin;
    const double lo_z = std::min(margin, cfg.depth / 4.0);
    const double hi_z = cfg.depth - 1 - lo_z;

    Vec3 p{rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y), rng.uniform(lo_z, hi_z)};
    Vec3 dir = random_unit(rng);
    double radius = rng.uniform(cfg.vessel_radius_min, cfg.vessel_radius_max);

    const int steps = 2 * (cfg.width + cfg.height + cfg.depth) / 3;
    for (int s = 0; s < steps; ++s) {
        stamp_ball(cov, p, radius);
        samples.push_back({p, radius});

        Vec3 jitter = random_unit(rng);
        dir = normalize({0.85 * dir.x + 0.15 * jitter.x, 0.85 * dir.y + 0.15 * jitter.y,
                         0.85 * dir.z + 0.15 * jitter.z});
        p.x += dir.x;
        p.y += dir.y;
        p.z += dir.z;
        if (p.x < lo_x || p.x > hi_x) { dir.x = -dir.x; p.x = std::clamp(p.x, lo_x, hi_x); }
        if (p.y < lo_y || p.y > hi_y) { dir.y = -dir.y; p.y = std::clamp(p.y, lo_y, hi_y); }
        if (p.z < lo_z || p.z > hi_z) { dir.z = -dir.z; p.z = std::clamp(p.z, lo_z, hi_z); }

        radius = std::clamp(radius + 0.15 * rng.normal(), cfg.vessel_radius_min,
                            cfg.vessel_radius_max);
    }
}

struct LesionShape {
    Vec3 center;
    double rx, ry, rz;
};

// Voxels with normalized ellipsoid distance <= 1.
std::vector<std::size_t> rasterize_lesion(const Volume& ref, const LesionShape& s) {
    std::vector<std::size_t> voxels;
    const int x0 = std::max(0, static_cast<int>(std::floor(s.center.x - s.rx)));
    const int x1 = std::min(ref.width - 1, static_cast<int>(std::ceil(s.center.x + s.rx)));
    const int y0 = std::max(0, static_cast<int>(std::floor(s.center.y - s.ry)));
    const int y1 = std::min(ref.height - 1, static_cast<int>(std::ceil(s.center.y + s.ry)));
    const int z0 = std::max(0, static_cast<int>(std::floor(s.center.z - s.rz)));
    const int z1 = std::min(ref.depth - 1, static_cast<int>(std::ceil(s.center.z + s.rz)));
    for (int z = z0; z <= z1; ++z) {
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double ex = (x - s.center.x) / s.rx;
                const double ey = (y - s.center.y) / s.ry;
                const double ez = (z - s.center.z) / s.rz;
                if (ex * ex + ey * ey + ez * ez <= 1.0) {
                    voxels.push_back(ref.index(x, y, z));
                }
            }
        }
    }
    return voxels;
}

// True when no candidate voxel touches an existing lesion voxel within a
// 26-neighborhood, keeping lesions as separate connected components.
bool separated_from_existing(const Volume& gt, const std::vector<std::size_t>& voxels) {
    const std::size_t sx = 1;
    const std::size_t sy = static_cast<std::size_t>(gt.width);
    const std::size_t sz = sy * static_cast<std::size_t>(gt.height);
    for (std::size_t idx : voxels) {
        const int x = static_cast<int>(idx % sy);
        const int y = static_cast<int>((idx / sy) % static_cast<std::size_t>(gt.height));
        const int z = static_cast<int>(idx / sz);
        for (int dz = -1; dz <= 1; ++dz) {
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const int nx = x + dx, ny = y + dy, nz = z + dz;
                    if (!gt.in_bounds(nx, ny, nz)) continue;
                    const std::ptrdiff_t off = dx * static_cast<std::ptrdiff_t>(sx) +
                                               dy * static_cast<std::ptrdiff_t>(sy) +
                                               dz * static_cast<std::ptrdiff_t>(sz);
                    if (gt.data[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(idx) + off)] !=
                        0.0f) {
                        return false;
                    }
                }
            }
        }
    }
    return true;
}

}  // namespace

void PhantomConfig::validate() const {
    if (width <= 0 || height <= 0 || depth <= 0) {
        throw ConfigError("phantom: dims must be positive");
    }
    if (vessel_count < 0) throw ConfigError("phantom: vessel_count must be >= 0");
    if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) {
        throw ConfigError("phantom: invalid lesion count range");
    }
    if (lesion_radius_min < 2.0 || lesion_rz_min < 2.0) {
        throw ConfigError("phantom: lesion radii must be >= 2 voxels");
    }
    if (lesion_radius_max < lesion_radius_min || lesion_rz_max < lesion_rz_min) {
        throw ConfigError("phantom: invalid lesion radius range");
    }
    if (!(background_intensity < lesion_intensity && lesion_intensity < vessel_intensity)) {
        throw ConfigError("phantom: intensities must satisfy background < lesion < vessel");
    }
    if (vessel_radius_min <= std::max(lesion_radius_max, lesion_rz_max) + 0.5) {
        throw ConfigError("phantom: vessel radius too small to contain the largest lesion");
    }
    if (background_noise_sigma < 0.0) {
        throw ConfigError("phantom: noise sigma must be >= 0");
    }
}

PhantomStudy generate_phantom(const PhantomConfig& config) {
    config.validate();
    Rng rng(config.seed);
    Rng vessel_rng = rng.split(1);
    Rng lesion_rng = rng.split(2);
    Rng noise_rng = rng.split(3);

    Volume vessel_cov(config.width, config.height, config.depth);
    std::vector<TubeSample> samples;
    for (int v = 0; v < config.vessel_count; ++v) {
        Rng walk = vessel_rng.split(static_cast<std::uint64_t>(v));
        draw_vessel(vessel_cov, walk, config, samples);
    }

    PhantomStudy study;
    study.gt_mask = Volume(config.width, config.height, config.depth);
    Volume lesion_cov(config.width, config.height, config.depth);

    const int lesion_count = config.lesion_count_min == config.lesion_count_max
                                 ? config.lesion_count_min
                                 : lesion_rng.uniform_int(config.lesion_count_min,
                                                          config.lesion_count_max);
    if (lesion_count > 0 && samples.empty()) {
        throw GenerationError("phantom: lesions requested but no vessels drawn (seed " +
                              std::to_string(config.seed) + ")");
    }

    const double cx = config.width / 2.0;
    const double cy = config.height / 2.0;
    const double max_center_dist =
        config.lesion_center_max_dist_frac * (std::min(config.width, config.height) / 2.0);

    for (int l = 0; l < lesion_count; ++l) {
        bool placed = false;
        for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
            const TubeSample& site =
                samples[static_cast<std::size_t>(lesion_rng.uniform_int(
                    0, static_cast<int>(samples.size()) - 1))];
            LesionShape shape;
            shape.rx = lesion_rng.uniform(config.lesion_radius_min, config.lesion_radius_max);
            shape.ry = lesion_rng.uniform(config.lesion_radius_min, config.lesion_radius_max);
            shape.rz = lesion_rng.uniform(config.lesion_rz_min, config.lesion_rz_max);
            shape.center = {site.pos.x + lesion_rng.uniform(-1.0, 1.0),
                            site.pos.y + lesion_rng.uniform(-1.0, 1.0),
                            site.pos.z + lesion_rng.uniform(-1.0, 1.0)};

            const double dx = shape.center.x - cx;
            const double dy = shape.center.y - cy;
            if (std::sqrt(dx * dx + dy * dy) > max_center_dist) continue;

            auto voxels = rasterize_lesion(study.gt_mask, shape);
            if (voxels.empty()) continue;

            // Must sit fully inside the tube: every lesion voxel has full
            // vessel coverage.
            bool inside = true;
            for (std::size_t idx : voxels) {
                if (vessel_cov.data[idx] < 1.0f) {
                    inside = false;
                    break;
                }
            }
            if (!inside) continue;
            if (!separated_from_existing(study.gt_mask, voxels)) continue;

            // Construction audit: at a mean radius >= 2.3 the component must
            // clear the 50-voxel floor used by the iteration stop rule.
            const double mean_r = (shape.rx + shape.ry + shape.rz) / 3.0;
            if (mean_r >= 2.3 && voxels.size() < 50) continue;

            for (std::size_t idx : voxels) study.gt_mask.data[idx] = 1.0f;
            {
                // Soft-edged intensity stamp for the image channel.
                const int x0 = std::max(0, static_cast<int>(std::floor(shape.center.x - shape.rx - 1)));
                const int x1 = std::min(config.width - 1,
                                        static_cast<int>(std::ceil(shape.center.x + shape.rx + 1)));
                const int y0 = std::max(0, static_cast<int>(std::floor(shape.center.y - shape.ry - 1)));
                const int y1 = std::min(config.height - 1,
                                        static_cast<int>(std::ceil(shape.center.y + shape.ry + 1)));
                const int z0 = std::max(0, static_cast<int>(std::floor(shape.center.z - shape.rz - 1)));
                const int z1 = std::min(config.depth - 1,
                                        static_cast<int>(std::ceil(shape.center.z + shape.rz + 1)));
                const double r_mean = (shape.rx + shape.ry + shape.rz) / 3.0;
                for (int z = z0; z <= z1; ++z) {
                    for (int y = y0; y <= y1; ++y) {
                        for (int x = x0; x <= x1; ++x) {
                            const double ex = (x - shape.center.x) / shape.rx;
                            const double ey = (y - shape.center.y) / shape.ry;
                            const double ez = (z - shape.center.z) / shape.rz;
                            const double rho = std::sqrt(ex * ex + ey * ey + ez * ez);
                            const float cov = static_cast<float>(
                                std::clamp((1.0 - rho) * r_mean + 0.5, 0.0, 1.0));
                            float& cell = lesion_cov.at(x, y, z);
                            cell = std::max(cell, cov);
                        }
                    }
                }
            }
            placed = true;
        }
        if (!placed) {
            throw GenerationError("phantom: could not place lesion " + std::to_string(l) +
                                  " after bounded retries (seed " +
                                  std::to_string(config.seed) + ")");
        }
    }

    // Compose intensities: background -> vessel -> lesion (filling defect),
    // then additive noise.
    study.volume = Volume(config.width, config.height, config.depth);
    study.volume.spacing = {1.0f, 1.0f, 1.0f};
    const double bg = config.background_intensity;
    for (std::size_t i = 0; i < study.volume.data.size(); ++i) {
        double v = bg + vessel_cov.data[i] * (config.vessel_intensity - bg);
        v += lesion_cov.data[i] * (config.lesion_intensity - v);
        v += config.background_noise_sigma * noise_rng.normal();
        study.volume.data[i] = static_cast<float>(v);
    }

    study.slice_labels.assign(static_cast<std::size_t>(config.depth), 0);
    const std::size_t slice_len =
        static_cast<std::size_t>(config.width) * static_cast<std::size_t>(config.height);
    for (int z = 0; z < config.depth; ++z) {
        const auto begin = study.gt_mask.data.begin() + static_cast<std::ptrdiff_t>(slice_len) * z;
        study.slice_labels[static_cast<std::size_t>(z)] =
            std::any_of(begin, begin + static_cast<std::ptrdiff_t>(slice_len),
                        [](float v) { return v != 0.0f; })
                ? 1
                : 0;
    }
    return study;
}

PhantomConfig dataset_study_config(const PhantomConfig& master, int index, int n_studies,
                                   double positivity) {
    if (positivity < 0.0 || positivity > 1.0) {
        throw PreconditionError("dataset_study_config: positivity must be in [0, 1]");
    }
    if (index < 0 || index >= n_studies) {
        throw PreconditionError("dataset_study_config: index outside [0, n_studies)");
    }
    const int n_positive = static_cast<int>(std::floor(n_studies * positivity));
    PhantomConfig per_study = master;
    per_study.seed = Rng(master.seed).split(static_cast<std::uint64_t>(index)).next_u64();
    if (index < n_positive) {
        per_study.lesion_count_min = std::max(1, master.lesion_count_min);
        per_study.lesion_count_max =
            std::max(per_study.lesion_count_min, master.lesion_count_max);
    } else {
        per_study.lesion_count_min = 0;
        per_study.lesion_count_max = 0;
    }
    return per_study;
}

std::vector<PhantomStudy> generate_dataset(const PhantomConfig& config, int n_studies,
                                           double positivity) {
    if (n_studies < 0) {
        throw PreconditionError("generate_dataset: n_studies must be >= 0");
    }
    if (positivity < 0.0 || positivity > 1.0) {
        throw PreconditionError("generate_dataset: positivity must be in [0, 1]");
    }
    std::vector<PhantomStudy> studies;
    studies.reserve(static_cast<std::size_t>(n_studies));
    for (int i = 0; i < n_studies; ++i) {
        studies.push_back(generate_phantom(dataset_study_config(config, i, n_studies, positivity)));
    }
    return studies;
}

}  // namespace iexplain
