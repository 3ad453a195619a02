#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace iexplain {

// 3D scalar grid, x-fastest layout: index = x + width * (y + height * z).
// Carries CTPA intensities, heatmaps, soft aggregates, and binary masks
// (masks use the same type with values restricted to {0, 1}).
struct Volume {
    int width = 0;
    int height = 0;
    int depth = 0;
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // mm, informational
    std::vector<float> data;

    Volume() = default;
    Volume(int w, int h, int d, float fill = 0.0f);

    std::size_t size() const { return data.size(); }

    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(width) *
                   (static_cast<std::size_t>(y) +
                    static_cast<std::size_t>(height) * static_cast<std::size_t>(z));
    }

    float& at(int x, int y, int z) { return data[index(x, y, z)]; }
    float at(int x, int y, int z) const { return data[index(x, y, z)]; }

    bool same_dims(const Volume& other) const {
        return width == other.width && height == other.height && depth == other.depth;
    }

    bool in_bounds(int x, int y, int z) const {
        return x >= 0 && x < width && y >= 0 && y < height && z >= 0 && z < depth;
    }

    // Throws DataError on NaN/Inf.
    void require_finite(const char* context) const;

    // Throws DataError unless every value is exactly 0 or 1.
    void require_binary(const char* context) const;

    bool is_binary() const;
};

constexpr int kMiniDepth = 7;
constexpr int kMiniHalf = kMiniDepth / 2;

// 7-slice stack centered on one slice of a parent study.
struct MiniVolume {
    Volume volume;     // depth == kMiniDepth
    int center_slice;  // index into the parent study
};

// Maps HU into [0, 1]: clamp((hu - (center - width/2)) / width, 0, 1).
Volume hu_window(const Volume& vol, float center = 100.0f, float width = 400.0f);

// Slices [center-3, center+3]; out-of-range slice indices clamp to the valid
// range (edge replication). Throws IndexError when center_slice is outside
// the study.
MiniVolume extract_minivolume(const Volume& study, int center_slice);

// Voxelwise vol * (1 - seg). seg must be binary and dimension-matched.
Volume apply_mask(const Volume& vol, const Volume& seg);

}  // namespace iexplain
