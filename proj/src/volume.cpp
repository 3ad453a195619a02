#include "iexplain/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "iexplain/errors.hpp"

namespace iexplain {

Volume::Volume(int w, int h, int d, float fill)
    : width(w), height(h), depth(d) {
    if (w <= 0 || h <= 0 || d <= 0) {
        throw ShapeError("Volume dims must be positive, got " + std::to_string(w) + "x" +
                         std::to_string(h) + "x" + std::to_string(d));
    }
    data.assign(static_cast<std::size_t>(w) * h * d, fill);
}

void Volume::require_finite(const char* context) const {
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            throw DataError(std::string(context) + ": non-finite voxel at linear index " +
                            std::to_string(i));
        }
    }
}

bool Volume::is_binary() const {
    return std::all_of(data.begin(), data.end(),
                       [](float v) { return v == 0.0f || v == 1.0f; });
}

void Volume::require_binary(const char* context) const {
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i] != 0.0f && data[i] != 1.0f) {
            throw DataError(std::string(context) + ": mask voxel at linear index " +
                            std::to_string(i) + " is " + std::to_string(data[i]) +
                            ", expected 0 or 1");
        }
    }
}

Volume hu_window(const Volume& vol, float center, float width) {
    if (!(width > 0.0f)) {
        throw PreconditionError("hu_window: width must be > 0");
    }
    Volume out = vol;
    const float lo = center - width / 2.0f;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const float hu = vol.data[i];
        if (!std::isfinite(hu)) {
            throw DataError("hu_window: non-finite voxel at linear index " + std::to_string(i));
        }
        out.data[i] = std::clamp((hu - lo) / width, 0.0f, 1.0f);
    }
    return out;
}

MiniVolume extract_minivolume(const Volume& study, int center_slice) {
    if (center_slice < 0 || center_slice >= study.depth) {
        throw IndexError("extract_minivolume: center_slice " + std::to_string(center_slice) +
                         " outside study depth " + std::to_string(study.depth));
    }
    MiniVolume mini;
    mini.center_slice = center_slice;
    mini.volume = Volume(study.width, study.height, kMiniDepth);
    mini.volume.spacing = study.spacing;
    const std::size_t slice_len =
        static_cast<std::size_t>(study.width) * static_cast<std::size_t>(study.height);
    for (int j = 0; j < kMiniDepth; ++j) {
        const int src = std::clamp(center_slice + j - kMiniHalf, 0, study.depth - 1);
        std::copy_n(study.data.begin() + static_cast<std::ptrdiff_t>(slice_len) * src, slice_len,
                    mini.volume.data.begin() + static_cast<std::ptrdiff_t>(slice_len) * j);
    }
    return mini;
}

Volume apply_mask(const Volume& vol, const Volume& seg) {
    if (!vol.same_dims(seg)) {
        throw ShapeError("apply_mask: volume and segmentation dims differ");
    }
    seg.require_binary("apply_mask");
    Volume out = vol;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = vol.data[i] * (1.0f - seg.data[i]);
    }
    return out;
}

}  // namespace iexplain
