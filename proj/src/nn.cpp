#include "s2h/nn.hpp"

#include <cmath>

namespace s2h {

namespace {

std::vector<double> he_normal(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(n);
  for (double& x : v) x = sigma * rng.next_gaussian();
  return v;
}

}  // namespace

LinearLayer LinearLayer::init(std::size_t c_in, std::size_t c_out, Rng& rng) {
  LinearLayer layer;
  layer.weight = Tensor::leaf({c_out, c_in}, he_normal(c_out * c_in, c_in, rng));
  layer.bias = Tensor::leaf({c_out}, std::vector<double>(c_out, 0.0));
  return layer;
}

ConvLayer ConvLayer::init(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
                          std::size_t stride, std::size_t pad, Rng& rng) {
  ConvLayer layer;
  layer.weight = Tensor::leaf({c_out, c_in, kh, kw}, he_normal(c_out * c_in * kh * kw, c_in * kh * kw, rng));
  layer.bias = Tensor::leaf({c_out}, std::vector<double>(c_out, 0.0));
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

Tensor linear_forward(const LinearLayer& layer, const Tensor& x, const Tensor& out_scale) {
  if (x.shape().size() != 2 || x.shape()[1] != layer.c_in()) {
    throw DimensionError("linear_forward: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(layer.weight.shape()));
  }
  if (out_scale.defined() && out_scale.size() != layer.c_out()) {
    throw DimensionError("linear_forward: out_scale length " + std::to_string(out_scale.size()) +
                         " != C_out " + std::to_string(layer.c_out()));
  }
  Tensor y = add_channel(matmul_nt(x, layer.weight), layer.bias);
  if (out_scale.defined()) y = mul_channel(y, out_scale);
  return y;
}

Tensor conv2d_forward(const ConvLayer& layer, const Tensor& x, const Tensor& out_scale) {
  if (out_scale.defined() && out_scale.size() != layer.c_out()) {
    throw DimensionError("conv2d_forward: out_scale length " + std::to_string(out_scale.size()) +
                         " != C_out " + std::to_string(layer.c_out()));
  }
  Tensor y = add_channel(conv2d(x, layer.weight, layer.stride, layer.pad), layer.bias);
  if (out_scale.defined()) y = mul_channel(y, out_scale);
  return y;
}

SmoothedLabels::SmoothedLabels(std::size_t k, double eps) : num_classes(k), epsilon(eps) {
  if (k == 0) throw ContractError("SmoothedLabels: need at least one class");
  if (eps < 0.0 || eps >= 1.0) {
    throw ContractError("SmoothedLabels: smoothing must be in [0,1)");
  }
}

std::vector<double> SmoothedLabels::row(int label) const {
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
    throw ContractError("SmoothedLabels: label " + std::to_string(label) + " out of range [0," +
                        std::to_string(num_classes) + ")");
  }
  std::vector<double> q(num_classes, epsilon / static_cast<double>(num_classes));
  q[static_cast<std::size_t>(label)] += 1.0 - epsilon;
  return q;
}

Tensor SmoothedLabels::distribution(std::span<const int> labels) const {
  std::vector<double> values;
  values.reserve(labels.size() * num_classes);
  for (int label : labels) {
    std::vector<double> q = row(label);
    values.insert(values.end(), q.begin(), q.end());
  }
  return Tensor::from_values({labels.size(), num_classes}, std::move(values));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing) {
  if (logits.shape().size() != 2) throw DimensionError("cross_entropy: logits must be [B x K]");
  const std::size_t batch = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
  }
  SmoothedLabels targets(classes, smoothing);
  Tensor q = targets.distribution(labels);
  return scale(sum_all(mul(q, log_softmax_last(logits))), -1.0 / static_cast<double>(batch));
}

Tensor kl_gap(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("kl_gap: shape mismatch " + shape_str(teacher_logits.shape()) + " vs " +
                         shape_str(student_logits.shape()));
  }
  Tensor t = teacher_logits;
  Tensor s = student_logits;
  if (temperature != 1.0) {
    t = scale(t, 1.0 / temperature);
    s = scale(s, 1.0 / temperature);
  }
  const std::size_t classes = t.shape().back();
  const std::size_t rows = t.size() / classes;
  Tensor p = softmax_last(t);
  Tensor diff = sub(log_softmax_last(t), log_softmax_last(s));
  return scale(sum_all(mul(p, diff)), 1.0 / static_cast<double>(rows));
}

}  // namespace s2h
