#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relush/gates.hpp"

namespace relush {

/// Binary ReLU responses of one channel: one row per activation position
/// (H*W rows), one column per training example. Rows are packed into 64-bit
/// words for fast Hamming distances.
class ActivationProfileMatrix {
 public:
  ActivationProfileMatrix() = default;
  ActivationProfileMatrix(int height, int width, std::int64_t n_examples);

  int height() const { return height_; }
  int width() const { return width_; }
  int n_positions() const { return height_ * width_; }
  std::int64_t n_examples() const { return n_examples_; }

  bool get(int position, std::int64_t example) const;
  void set(int position, std::int64_t example, bool value);

  /// Hamming distance between two position rows.
  std::uint32_t row_distance(int a, int b) const;

  /// Binary file layout: u16 H, u16 W, u32 N (little-endian), then H*W rows
  /// of ceil(N/8) bytes each, bits packed LSB-first within a byte.
  void save(const std::string& path) const;
  static ActivationProfileMatrix load(const std::string& path);

  std::vector<std::uint8_t> to_bytes() const;
  static ActivationProfileMatrix from_bytes(const std::vector<std::uint8_t>&);

 private:
  int height_ = 0;
  int width_ = 0;
  std::int64_t n_examples_ = 0;
  int words_per_row_ = 0;
  std::vector<std::uint64_t> bits_;
};

/// Cluster label per activation position, labels in [0, k).
struct ClusterMap {
  int height = 0;
  int width = 0;
  int k = 0;
  std::vector<int> labels;  // row-major, size height*width

  void validate() const;
  /// Relabels clusters by first occurrence in row-major order, so two maps
  /// describing the same partition compare equal.
  void canonicalize();
};

/// Non-overlapping k x k tiles in row-major order; boundary tiles truncated.
/// Group count = ceil(H/k) * ceil(W/k). Weights are uniform 1/|group| and the
/// spec is in learned mode (k == 1 degenerates to one_hot_self).
GroupingSpec uniform_patches(int height, int width, int k);

/// Dense pairwise Hamming distances between position rows; symmetric with a
/// zero diagonal, row-major (H*W) x (H*W).
std::vector<std::uint32_t> hamming_distance_matrix(
    const ActivationProfileMatrix& profiles);

/// Single-linkage agglomeration: repeatedly merge the two sets containing the
/// globally closest pair of positions not already co-clustered, stopping at k
/// sets. Equal distances break ties toward the lexicographically smallest
/// (p, q) pair, so the result is deterministic. merge_distances, when given,
/// receives the distance of every executed merge in order.
ClusterMap agglomerative_cluster(const ActivationProfileMatrix& profiles,
                                 int k,
                                 std::vector<std::uint32_t>* merge_distances =
                                     nullptr);

/// Runs agglomerative_cluster independently inside each non-overlapping
/// window x window tile (truncated at the boundary like uniform_patches) with
/// k_per_window clusters per tile, clamped to the tile size. The returned
/// spec has uniform initial weights per group (learned mode).
GroupingSpec windowed_cluster(const ActivationProfileMatrix& profiles,
                              int window, int k_per_window);

/// Builds a learned-mode GroupingSpec from cluster labels; each group gets
/// uniform initial weights 1/|group|.
GroupingSpec grouping_from_cluster_map(const ClusterMap& map);

/// Writes `<path_base>.csv` (rows of comma-separated labels) and
/// `<path_base>.png` (deterministic palette).
void export_cluster_map(const ClusterMap& map, const std::string& path_base);

std::string cluster_map_to_csv(const ClusterMap& map);
ClusterMap cluster_map_from_csv(const std::string& text);
ClusterMap load_cluster_map_csv(const std::string& path);

}  // namespace relush
