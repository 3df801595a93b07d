#include "s2h/metrics.hpp"

#include <cmath>

namespace s2h {

namespace {

void check_pair(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw DimensionError("gap metric: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(q.shape()));
  }
}

double kl_term(double p, double q) { return p > 0.0 ? p * (std::log(p) - std::log(q)) : 0.0; }

}  // namespace

std::vector<double> softmax_probs(const Tensor& logits) {
  const std::size_t K = logits.shape().back();
  const std::size_t rows = logits.size() / K;
  std::vector<double> out(logits.size());
  auto v = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = v[r * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, v[r * K + k]);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(v[r * K + k] - mx);
    for (std::size_t k = 0; k < K; ++k) out[r * K + k] = std::exp(v[r * K + k] - mx) / denom;
  }
  return out;
}

double js_from_probs(std::span<const double> p, std::span<const double> q, std::size_t classes) {
  const std::size_t rows = p.size() / classes;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double js = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double pi = p[r * classes + k];
      const double qi = q[r * classes + k];
      const double mi = 0.5 * (pi + qi);
      if (mi > 0.0) js += 0.5 * kl_term(pi, mi) + 0.5 * kl_term(qi, mi);
    }
    total += js;
  }
  return total / static_cast<double>(rows);
}

double l2_from_probs(std::span<const double> p, std::span<const double> q, std::size_t classes) {
  const std::size_t rows = p.size() / classes;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double d = p[r * classes + k] - q[r * classes + k];
      ss += d * d;
    }
    total += std::sqrt(ss);
  }
  return total / static_cast<double>(rows);
}

double js_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  check_pair(p_logits, q_logits);
  const std::size_t K = p_logits.shape().back();
  return js_from_probs(softmax_probs(p_logits), softmax_probs(q_logits), K);
}

double l2_gap(const Tensor& p_logits, const Tensor& q_logits) {
  check_pair(p_logits, q_logits);
  const std::size_t K = p_logits.shape().back();
  return l2_from_probs(softmax_probs(p_logits), softmax_probs(q_logits), K);
}

double top1_accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2) throw DimensionError("top1_accuracy: logits must be [B x K]");
  const std::size_t B = logits.shape()[0];
  const std::size_t K = logits.shape()[1];
  if (labels.size() != B) {
    throw ContractError("top1_accuracy: " + std::to_string(labels.size()) + " labels for batch " +
                        std::to_string(B));
  }
  auto v = logits.values();
  std::size_t hits = 0;
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (v[b * K + k] > v[b * K + arg]) arg = k;  // strict: ties keep lowest index
    }
    if (labels[b] >= 0 && static_cast<std::size_t>(labels[b]) == arg) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(B);
}

}  // namespace s2h
