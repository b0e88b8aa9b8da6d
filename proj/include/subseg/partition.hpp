#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "subseg/dataset.hpp"
#include "subseg/net.hpp"
#include "subseg/subclass_table.hpp"
#include "subseg/trainer.hpp"

namespace subseg {

// Per-class collections of decoder feature vectors with back-pointers into
// the labeled set.
struct PixelFeatures {
    int channels = 0;
    std::vector<std::vector<std::vector<double>>> by_class;  // class -> vectors in R^channels
    std::vector<std::vector<std::pair<int, int>>> origin_by_class;  // (image, pixel offset)
};

// Supervised-only training of a student-architecture model on parent labels
// (MoS head only); alpha is pinned to 0 so the returned teacher equals the
// student. iterations == 0 returns the freshly initialized model.
ModelState pretrain_backbone(const DatasetContainer& labeled, const NetConfig& net_config,
                             const TrainConfig& base, std::int64_t iterations,
                             std::uint64_t seed);

// eval-mode MoS decoder hidden features (the head input), grouped by y_L
PixelFeatures extract_features(ModelState& backbone, const DatasetContainer& labeled);

// K_c = max(1, round(p_c / s)) with s = min foreground count; background gets
// exactly one subclass; K_c additionally clamped to p_c
std::vector<int> allocate_subclass_counts(const std::vector<std::int64_t>& pixel_counts);

struct ClusterResult {
    std::vector<int> assignment;                  // per point
    std::vector<std::vector<double>> centroids;   // k mean vectors
};

// k-means++ seeding, capacity-constrained greedy assignment (sizes end in
// {floor(n/k), ceil(n/k)}), centroid recomputation, then one improving swap
// pass over point pairs
ClusterResult balanced_kmeans(const std::vector<std::vector<double>>& points, int k,
                              std::uint64_t seed, int max_iters);

// unconstrained Lloyd iteration with the same seeding; the clustering swap
// used by ablation variant (E)
ClusterResult plain_kmeans(const std::vector<std::vector<double>>& points, int k,
                           std::uint64_t seed, int max_iters);

// total within-cluster squared distance about cluster means
double clustering_objective(const std::vector<std::vector<double>>& points,
                            const std::vector<int>& assignment, int k);

struct PartitionOptions {
    int cap_per_class = 20000;
    bool balanced = true;
    int max_iters = 50;
};

struct PartitionResult {
    SubclassTable table;
    std::vector<std::vector<std::uint16_t>> subclass_maps;  // one per labeled image
};

// per-class clustering over (subsampled) features, then nearest-centroid
// labeling of every pixel of the class; ids contiguous in parent order
PartitionResult build_partition(ModelState& backbone, const DatasetContainer& labeled,
                                const PartitionOptions& opts, std::uint64_t seed);

// artifact layout under dir/: "table.txt" plus "labeled_sub.segd" (the input
// labeled container with subclass labels filled in)
void write_partition(const std::string& dir, const PartitionResult& result,
                     const DatasetContainer& labeled);

struct PartitionArtifact {
    SubclassTable table;
    DatasetContainer labeled_with_sub;
};

PartitionArtifact read_partition(const std::string& dir);

}  // namespace subseg
