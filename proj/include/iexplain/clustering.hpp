#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "iexplain/volume.hpp"

namespace iexplain {

struct ClusterStats {
    int voxel_count = 0;
    std::array<double, 3> centroid{0.0, 0.0, 0.0};
    std::array<int, 3> bbox_min{0, 0, 0};  // inclusive
    std::array<int, 3> bbox_max{0, 0, 0};  // inclusive
};

struct Cluster {
    int id = 0;
    std::vector<std::uint32_t> voxels;  // sorted x-fastest linear indices
    ClusterStats stats;
};

struct ClusterSet {
    std::vector<Cluster> clusters;
    std::array<int, 3> source_dims{0, 0, 0};
};

// Half-extents of the single-hop linkage window: |dx| <= x, |dy| <= y,
// |dz| <= z. Defaults give the 15x15x5 box.
struct Neighborhood {
    int x = 7;
    int y = 7;
    int z = 2;
};

// Hysteresis thresholding: strong voxels (H >= t_high) seed a BFS that
// claims weak voxels (H >= t_high/2) transitively through the linkage
// window. Output is a superset of the strong set and a subset of the weak.
Volume hysteresis_cluster(const Volume& heatmap, float t_high,
                          const Neighborhood& hood = Neighborhood{});

// Maximal 26-connected components of a binary mask, ids in scan order.
ClusterSet connected_components(const Volume& mask);

ClusterStats cluster_stats(const std::vector<std::uint32_t>& voxels, int width, int height,
                           int depth);

}  // namespace iexplain
