#pragma once

#include <span>

#include "s2h/tensor.hpp"

namespace s2h {

struct GapReport {
  double js = 0.0;
  double l2 = 0.0;
  double soft_top1 = 0.0;
  double hard_top1 = 0.0;
  std::size_t samples = 0;
};

// Mean over batch of JS(p || q) over softmaxed rows, natural log. Symmetric,
// bounded by ln 2.
double js_divergence(const Tensor& p_logits, const Tensor& q_logits);

// Mean over batch of the euclidean distance between softmaxed rows.
double l2_gap(const Tensor& p_logits, const Tensor& q_logits);

// Probability-space versions used where one side is already a distribution
// (label-smoothed ground truth).
double js_from_probs(std::span<const double> p, std::span<const double> q, std::size_t classes);
double l2_from_probs(std::span<const double> p, std::span<const double> q, std::size_t classes);

// Argmax match rate; ties break toward the lowest class index.
double top1_accuracy(const Tensor& logits, std::span<const int> labels);

std::vector<double> softmax_probs(const Tensor& logits);

}  // namespace s2h
