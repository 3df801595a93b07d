#pragma once

#include <string>
#include <vector>

#include "s2h/tensor.hpp"

namespace s2h {

struct Dataset {
  Tensor features;  // [N x feature-shape]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;  // "train" | "val" | "full"
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  Shape feature_shape() const;  // per-sample
  Tensor gather_features(std::span<const std::size_t> idx) const;
  std::vector<int> gather_labels(std::span<const std::size_t> idx) const;
};

struct TrainVal {
  Dataset train;
  Dataset val;
};

enum class SyntheticKind { blobs, spirals };

// Deterministic synthetic 2-D classification data with an 80/20 train/val
// split by seeded shuffle. Class counts are exactly balanced (remainder going
// to the lowest class indices).
TrainVal gen_synthetic(SyntheticKind kind, std::size_t n, std::size_t num_classes, double noise,
                       std::uint64_t seed);

// IDX (MNIST-compatible) big-endian files; pixels scaled to [0,1]. Image
// tensors come back as [N x 1 x rows x cols].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// CSV with a header row; the column named `label` holds class indices, every
// other column is a numeric feature.
Dataset load_csv(const std::string& path);

// Per-epoch batch index order, a pure function of (seed, epoch). The final
// partial batch is kept.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t seed, std::size_t epoch);

}  // namespace s2h
