#pragma once

#include <span>

#include "s2h/rng.hpp"
#include "s2h/tensor.hpp"

namespace s2h {

struct LinearLayer {
  Tensor weight;  // [C_out x C_in]
  Tensor bias;    // [C_out]

  static LinearLayer init(std::size_t c_in, std::size_t c_out, Rng& rng);
  std::size_t c_in() const { return weight.shape()[1]; }
  std::size_t c_out() const { return weight.shape()[0]; }
};

struct ConvLayer {
  Tensor weight;  // [C_out x C_in x kh x kw]
  Tensor bias;    // [C_out]
  std::size_t stride = 1;
  std::size_t pad = 0;

  static ConvLayer init(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
                        std::size_t stride, std::size_t pad, Rng& rng);
  std::size_t c_in() const { return weight.shape()[1]; }
  std::size_t c_out() const { return weight.shape()[0]; }
};

// y = x.W^T + b, then channel j scaled by out_scale[j] when present. The scale
// multiplies the whole output channel, bias included, so a binary scale zeroes
// the channel's contribution exactly.
Tensor linear_forward(const LinearLayer& layer, const Tensor& x, const Tensor& out_scale = Tensor());

Tensor conv2d_forward(const ConvLayer& layer, const Tensor& x, const Tensor& out_scale = Tensor());

// Target distribution q = (1 - eps) * onehot + eps / K.
struct SmoothedLabels {
  std::size_t num_classes = 0;
  double epsilon = 0.0;

  SmoothedLabels(std::size_t k, double eps);
  // [B x K] constant tensor of per-sample target distributions.
  Tensor distribution(std::span<const int> labels) const;
  std::vector<double> row(int label) const;
};

// Mean over the batch of -sum_i q_i log softmax(logits)_i.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing = 0.0);

// Mean over the batch of KL(softmax(teacher) || softmax(student)), natural
// log. Gradient flows into whichever argument is not detached. Logits are
// divided by `temperature` before the softmax.
Tensor kl_gap(const Tensor& teacher_logits, const Tensor& student_logits, double temperature = 1.0);

}  // namespace s2h
