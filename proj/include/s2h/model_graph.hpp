#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "s2h/masking.hpp"
#include "s2h/nn.hpp"
#include "s2h/rng.hpp"
#include "s2h/tensor.hpp"

namespace s2h {

enum class ForwardMode { full, soft, hard };

enum class LayerKind { input, linear, conv, relu, add, flatten };

struct LayerSpec {
  std::string id;
  std::string kind;                 // linear | conv | relu | add | flatten
  std::vector<std::string> inputs;  // layer ids, or "@input"
  std::size_t out = 0;              // linear / conv output channels
  std::size_t kh = 1, kw = 1;
  std::size_t stride = 1, pad = 0;
  std::string group;                // linear / conv dependency group
};

struct ModelSpec {
  Shape input_shape;  // per-sample, channels first for images
  std::string input_group;
  std::size_t classes = 0;
  std::string output_group;
  std::vector<LayerSpec> layers;
  std::vector<std::string> fixed_groups;

  // Deterministic text form; basis of the model hash checked on checkpoint load.
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct LayerNode {
  LayerKind kind = LayerKind::input;
  std::string name;
  std::vector<int> inputs;  // node indices
  int group = -1;           // width-owning group (linear/conv) or propagated
  LinearLayer lin;
  ConvLayer conv;
  Shape out_shape;                 // per-sample shape from inference
  std::size_t flatten_factor = 1;  // spatial size folded per channel (flatten)
  std::size_t in_factor = 1;       // consumer: columns per producer channel
  std::size_t flops_factor = 1;    // conv: kh * kw * Hout * Wout
};

struct ValidationIssue {
  std::string node;
  std::string rule;
  std::string message;
};

struct CompactModel;

// Layer DAG with dependency-grouped channel masks. Layers in the same group
// share one mask and are pruned as a whole.
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(const ModelSpec& spec, Rng& init_rng);

  std::vector<ValidationIssue> validate() const;
  void require_valid() const;  // throws ContractError listing the issues

  // Re-derives w / t / mhat for every group from the current logits. Must run
  // once per step before forward passes so soft and hard see the same masks.
  void refresh_masks();

  Tensor forward(const Tensor& x, ForwardMode mode) const;

  double flops(ForwardMode mode) const;  // full or hard
  Tensor flops_soft() const;             // differentiable scalar
  double flops_ratio(ForwardMode mode) const;
  Tensor flops_ratio_soft() const;
  // Hard FLOPs ratio for a hypothetical per-group prefix assignment.
  double flops_ratio_with(const std::map<std::string, std::size_t>& retained) const;
  double min_hard_ratio() const;  // every prunable group at one channel

  // Parameters in registration order (per layer: weight then bias).
  const std::vector<Tensor>& theta() const { return theta_; }
  // Logits of prunable groups, group declaration order.
  const std::vector<Tensor>& mask_logits() const { return mask_logits_; }

  std::vector<GroupMask>& groups() { return groups_; }
  const std::vector<GroupMask>& groups() const { return groups_; }
  GroupMask& group(const std::string& name);
  const GroupMask& group(const std::string& name) const;

  std::vector<LayerNode>& nodes_mut() { return nodes_; }
  const std::vector<LayerNode>& nodes() const { return nodes_; }

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t spec_hash() const { return spec_.hash(); }
  std::size_t classes() const { return spec_.classes; }

  CompactModel export_compact() const;

  // Rejection-samples per-group prefix lengths until the hard ratio lands
  // within `tol` of `target`. Deterministic for a fixed seed.
  std::map<std::string, std::size_t> random_prefix_masks(double target, double tol,
                                                         std::uint64_t seed,
                                                         std::size_t max_attempts = 100000) const;
  void apply_prefix_masks(const std::map<std::string, std::size_t>& retained);

 private:
  double group_count(int group, ForwardMode mode) const;
  Tensor group_count_soft(int group) const;

  ModelSpec spec_;
  std::vector<LayerNode> nodes_;
  std::vector<GroupMask> groups_;
  std::map<std::string, int> group_index_;
  int input_group_ = -1;
  int output_group_ = -1;
  std::vector<Tensor> theta_;
  std::vector<Tensor> mask_logits_;
};

// Physically sliced export of the hard network. Forward output matches the
// source's hard forward; all groups are fixed at their retained widths.
struct CompactModel {
  ModelGraph graph;
  std::string source_hash;  // hex of the source ModelSpec hash
  std::map<std::string, std::size_t> retained;
};

}  // namespace s2h
