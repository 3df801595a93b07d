#include "s2h/masking.hpp"

namespace s2h {

Tensor relax_mask(const Tensor& u) { return mask_relax(u); }

Binarized binarize_mask(std::span<const double> w) {
  if (w.empty()) throw ContractError("binarize_mask: empty mask");
  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());

  Binarized out;
  out.threshold = mean;
  out.mask.assign(w.size(), 0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] >= mean) {
      out.mask[i] = 1;
      ++out.retained;
    }
  }
  // w[0] == 1 >= mean(w), so a well-formed relaxed mask always keeps the
  // first channel; guard against degenerate inputs anyway.
  if (out.retained == 0) {
    out.mask[0] = 1;
    out.retained = 1;
  }
  return out;
}

Tensor soft_channel_count(const Tensor& u) {
  if (u.shape().size() != 1 || u.size() == 0) {
    throw ContractError("soft_channel_count: u must be non-empty 1-D");
  }
  std::vector<double> index(u.size());
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = static_cast<double>(i + 1);
  return sum_all(mul(softmax_last(u), Tensor::from_values({u.size()}, std::move(index))));
}

GroupMask GroupMask::make(std::string name, std::size_t channels, bool fixed) {
  GroupMask g;
  g.name = std::move(name);
  g.channels = channels;
  g.fixed = fixed;
  g.u = Tensor::leaf({channels}, std::vector<double>(channels, 0.0));
  g.u.set_requires_grad(!fixed);
  g.mhat.assign(channels, 1);
  g.retained = channels;
  return g;
}

void GroupMask::refresh() {
  if (forced) return;
  if (fixed) {
    w = Tensor::full({channels}, 1.0);
    count_soft = Tensor::scalar(static_cast<double>(channels));
    threshold = 1.0;
    mhat.assign(channels, 1);
    retained = channels;
    return;
  }
  w = relax_mask(u);
  count_soft = soft_channel_count(u);
  Binarized b = binarize_mask(w.values());
  threshold = b.threshold;
  mhat = std::move(b.mask);
  retained = b.retained;
}

void GroupMask::force_prefix(std::size_t k) {
  if (k < 1 || k > channels) {
    throw ContractError("force_prefix: keep count " + std::to_string(k) + " outside [1," +
                        std::to_string(channels) + "]");
  }
  std::vector<double> values(channels, 0.0);
  for (std::size_t i = 0; i < k; ++i) values[i] = 1.0;
  w = Tensor::from_values({channels}, values);
  count_soft = Tensor::scalar(static_cast<double>(k));
  threshold = static_cast<double>(k) / static_cast<double>(channels);
  mhat.assign(channels, 0);
  for (std::size_t i = 0; i < k; ++i) mhat[i] = 1;
  retained = k;
  forced = true;
}

void GroupMask::force_w(std::vector<double> values) {
  if (values.size() != channels) {
    throw ContractError("force_w: expected " + std::to_string(channels) + " values");
  }
  Binarized b = binarize_mask(values);
  w = Tensor::from_values({channels}, std::move(values));
  double soft = 0.0;
  for (std::size_t i = 0; i < channels; ++i) soft += w.at(i);
  count_soft = Tensor::scalar(soft);
  threshold = b.threshold;
  mhat = std::move(b.mask);
  retained = b.retained;
  forced = true;
}

Tensor GroupMask::mhat_tensor() const {
  std::vector<double> values(channels);
  for (std::size_t i = 0; i < channels; ++i) values[i] = static_cast<double>(mhat[i]);
  return Tensor::from_values({channels}, std::move(values));
}

}  // namespace s2h
