#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s2h/tensor.hpp"

namespace s2h {

// Relaxed retention probabilities from mask logits: w[i] = suffix sum of
// softmax(u) from i. w[0] == 1 exactly, w is non-increasing, every entry in
// (0, 1].
Tensor relax_mask(const Tensor& u);

// Threshold t = mean(w); channel i survives iff w[i] >= t (inclusive, ties
// keep). The result is always a prefix mask with at least one channel.
struct Binarized {
  double threshold = 0.0;
  std::vector<std::uint8_t> mask;  // prefix of ones
  std::size_t retained = 0;
};
Binarized binarize_mask(std::span<const double> w);

// Differentiable channel count: sum_k softmax(u)[k] * k, 1-based, in [1, C].
Tensor soft_channel_count(const Tensor& u);

// One dependency group's mask state. `refresh` re-derives the per-step caches
// from the current logits; while a tape is active the relaxed mask and soft
// count are recorded on it so mask gradients can flow back to u.
struct GroupMask {
  std::string name;
  std::size_t channels = 0;
  bool fixed = false;
  Tensor u;  // [C]; gradient leaf iff not fixed

  // caches, valid after refresh() / force_prefix()
  Tensor w;                        // relaxed mask
  Tensor count_soft;               // scalar soft channel count
  double threshold = 1.0;
  std::vector<std::uint8_t> mhat;  // binary prefix mask
  std::size_t retained = 0;
  bool forced = false;

  static GroupMask make(std::string name, std::size_t channels, bool fixed);

  void refresh();
  // Pins the group to a binary prefix of k channels; refresh() keeps it.
  void force_prefix(std::size_t k);
  // Pins an explicit relaxed mask (test hook); threshold and mhat re-derived.
  void force_w(std::vector<double> values);
  void clear_force() { forced = false; }

  // Constant [C] tensor of the binary mask (never carries gradient).
  Tensor mhat_tensor() const;
  bool all_retained() const { return retained == channels; }
};

}  // namespace s2h
