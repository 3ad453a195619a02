#include "iexplain/clustering.hpp"

#include <algorithm>
#include <limits>

#include "iexplain/errors.hpp"

namespace iexplain {

Volume hysteresis_cluster(const Volume& heatmap, float t_high, const Neighborhood& hood) {
    if (!(t_high > 0.0f)) {
        throw PreconditionError("hysteresis_cluster: t_high must be > 0");
    }
    if (hood.x < 0 || hood.y < 0 || hood.z < 0) {
        throw PreconditionError("hysteresis_cluster: neighborhood extents must be >= 0");
    }
    heatmap.require_finite("hysteresis heatmap");
    const float t_low = t_high / 2.0f;

    Volume out(heatmap.width, heatmap.height, heatmap.depth);
    out.spacing = heatmap.spacing;
    std::vector<std::uint8_t> visited(heatmap.size(), 0);
    std::vector<std::uint32_t> frontier;

    for (std::size_t i = 0; i < heatmap.data.size(); ++i) {
        if (heatmap.data[i] >= t_high) {
            visited[i] = 1;
            out.data[i] = 1.0f;
            frontier.push_back(static_cast<std::uint32_t>(i));
        }
    }

    const std::size_t sy = static_cast<std::size_t>(heatmap.width);
    const std::size_t sz = sy * static_cast<std::size_t>(heatmap.height);
    for (std::size_t qi = 0; qi < frontier.size(); ++qi) {
        const std::uint32_t cur = frontier[qi];
        const int x = static_cast<int>(cur % sy);
        const int y = static_cast<int>((cur / sy) % static_cast<std::size_t>(heatmap.height));
        const int z = static_cast<int>(cur / sz);
        for (int dz = -hood.z; dz <= hood.z; ++dz) {
            const int nz = z + dz;
            if (nz < 0 || nz >= heatmap.depth) continue;
            for (int dy = -hood.y; dy <= hood.y; ++dy) {
                const int ny = y + dy;
                if (ny < 0 || ny >= heatmap.height) continue;
                const std::size_t row = static_cast<std::size_t>(nz) * sz +
                                        static_cast<std::size_t>(ny) * sy;
                const int x0 = std::max(0, x - hood.x);
                const int x1 = std::min(heatmap.width - 1, x + hood.x);
                for (int nx = x0; nx <= x1; ++nx) {
                    const std::size_t n = row + static_cast<std::size_t>(nx);
                    if (visited[n]) continue;
                    if (heatmap.data[n] >= t_low) {
                        visited[n] = 1;
                        out.data[n] = 1.0f;
                        frontier.push_back(static_cast<std::uint32_t>(n));
                    }
                }
            }
        }
    }
    return out;
}

ClusterStats cluster_stats(const std::vector<std::uint32_t>& voxels, int width, int height,
                           int depth) {
    if (voxels.empty()) {
        throw PreconditionError("cluster_stats: empty voxel set");
    }
    (void)depth;
    ClusterStats s;
    s.voxel_count = static_cast<int>(voxels.size());
    s.bbox_min = {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(),
                  std::numeric_limits<int>::max()};
    s.bbox_max = {std::numeric_limits<int>::min(), std::numeric_limits<int>::min(),
                  std::numeric_limits<int>::min()};
    double cx = 0.0, cy = 0.0, cz = 0.0;
    const std::size_t sy = static_cast<std::size_t>(width);
    const std::size_t sz = sy * static_cast<std::size_t>(height);
    for (std::uint32_t v : voxels) {
        const int x = static_cast<int>(v % sy);
        const int y = static_cast<int>((v / sy) % static_cast<std::size_t>(height));
        const int z = static_cast<int>(v / sz);
        cx += x;
        cy += y;
        cz += z;
        s.bbox_min[0] = std::min(s.bbox_min[0], x);
        s.bbox_min[1] = std::min(s.bbox_min[1], y);
        s.bbox_min[2] = std::min(s.bbox_min[2], z);
        s.bbox_max[0] = std::max(s.bbox_max[0], x);
        s.bbox_max[1] = std::max(s.bbox_max[1], y);
        s.bbox_max[2] = std::max(s.bbox_max[2], z);
    }
    const double n = static_cast<double>(voxels.size());
    s.centroid = {cx / n, cy / n, cz / n};
    return s;
}

ClusterSet connected_components(const Volume& mask) {
    mask.require_binary("connected_components mask");
    ClusterSet cs;
    cs.source_dims = {mask.width, mask.height, mask.depth};

    std::vector<std::uint8_t> visited(mask.size(), 0);
    std::vector<std::uint32_t> stack;
    const std::size_t sy = static_cast<std::size_t>(mask.width);
    const std::size_t sz = sy * static_cast<std::size_t>(mask.height);

    for (std::size_t seed = 0; seed < mask.data.size(); ++seed) {
        if (mask.data[seed] == 0.0f || visited[seed]) continue;
        Cluster c;
        c.id = static_cast<int>(cs.clusters.size());
        visited[seed] = 1;
        stack.assign(1, static_cast<std::uint32_t>(seed));
        while (!stack.empty()) {
            const std::uint32_t cur = stack.back();
            stack.pop_back();
            c.voxels.push_back(cur);
            const int x = static_cast<int>(cur % sy);
            const int y = static_cast<int>((cur / sy) % static_cast<std::size_t>(mask.height));
            const int z = static_cast<int>(cur / sz);
            for (int dz = -1; dz <= 1; ++dz) {
                const int nz = z + dz;
                if (nz < 0 || nz >= mask.depth) continue;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int ny = y + dy;
                    if (ny < 0 || ny >= mask.height) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = x + dx;
                        if (nx < 0 || nx >= mask.width) continue;
                        const std::size_t n = static_cast<std::size_t>(nz) * sz +
                                              static_cast<std::size_t>(ny) * sy +
                                              static_cast<std::size_t>(nx);
                        if (visited[n] || mask.data[n] == 0.0f) continue;
                        visited[n] = 1;
                        stack.push_back(static_cast<std::uint32_t>(n));
                    }
                }
            }
        }
        std::sort(c.voxels.begin(), c.voxels.end());
        c.stats = cluster_stats(c.voxels, mask.width, mask.height, mask.depth);
        cs.clusters.push_back(std::move(c));
    }
    return cs;
}

}  // namespace iexplain
