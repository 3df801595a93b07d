#include "s2h/model_graph.hpp"

#include <algorithm>
#include <sstream>

namespace s2h {

namespace {

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

LayerKind parse_kind(const std::string& kind, const std::string& id) {
  if (kind == "linear") return LayerKind::linear;
  if (kind == "conv") return LayerKind::conv;
  if (kind == "relu") return LayerKind::relu;
  if (kind == "add") return LayerKind::add;
  if (kind == "flatten") return LayerKind::flatten;
  throw ConfigError("model: layer '" + id + "' has unknown kind '" + kind + "'");
}

}  // namespace

std::string ModelSpec::canonical() const {
  std::ostringstream os;
  os << "input=" << shape_str(input_shape) << ";igroup=" << input_group << ";classes=" << classes
     << ";ogroup=" << output_group << ";fixed=";
  for (std::size_t i = 0; i < fixed_groups.size(); ++i) os << (i ? "," : "") << fixed_groups[i];
  for (const LayerSpec& l : layers) {
    os << ";layer=" << l.id << ":" << l.kind << ":in=";
    for (std::size_t i = 0; i < l.inputs.size(); ++i) os << (i ? "," : "") << l.inputs[i];
    os << ":out=" << l.out;
    if (l.kind == "conv") {
      os << ":k=" << l.kh << "x" << l.kw << ":s=" << l.stride << ":p=" << l.pad;
    }
    os << ":group=" << l.group;
  }
  return os.str();
}

std::uint64_t ModelSpec::hash() const { return fnv1a64(canonical()); }

ModelGraph::ModelGraph(const ModelSpec& spec, Rng& init_rng) : spec_(spec) {
  auto is_fixed = [&](const std::string& name) {
    return std::find(spec.fixed_groups.begin(), spec.fixed_groups.end(), name) !=
           spec.fixed_groups.end();
  };
  auto intern_group = [&](const std::string& name, std::size_t channels) {
    auto it = group_index_.find(name);
    if (it != group_index_.end()) return it->second;
    int idx = static_cast<int>(groups_.size());
    groups_.push_back(GroupMask::make(name, channels, is_fixed(name)));
    group_index_.emplace(name, idx);
    if (!groups_.back().fixed) mask_logits_.push_back(groups_.back().u);
    return idx;
  };

  if (spec.input_shape.empty()) throw ConfigError("model: input shape must be non-empty");
  LayerNode input;
  input.kind = LayerKind::input;
  input.name = "@input";
  input.out_shape = spec.input_shape;
  input.group = intern_group(spec.input_group, spec.input_shape[0]);
  input_group_ = input.group;
  nodes_.push_back(std::move(input));

  std::map<std::string, int> by_id;
  for (const LayerSpec& l : spec.layers) {
    if (l.id.empty()) throw ConfigError("model: layer with empty id");
    if (l.id == "@input" || by_id.count(l.id)) {
      throw ConfigError("model: duplicate layer id '" + l.id + "'");
    }
    LayerNode node;
    node.kind = parse_kind(l.kind, l.id);
    node.name = l.id;
    for (const std::string& ref : l.inputs) {
      if (ref == "@input") {
        node.inputs.push_back(0);
      } else {
        auto it = by_id.find(ref);
        if (it == by_id.end()) {
          throw ConfigError("model: layer '" + l.id + "' references unknown input '" + ref + "'");
        }
        node.inputs.push_back(it->second);
      }
    }

    auto arity = [&](std::size_t n) {
      if (node.inputs.size() != n) {
        throw ConfigError("model: layer '" + l.id + "' expects " + std::to_string(n) +
                          " input(s), got " + std::to_string(node.inputs.size()));
      }
    };

    switch (node.kind) {
      case LayerKind::linear: {
        arity(1);
        const LayerNode& src = nodes_[static_cast<std::size_t>(node.inputs[0])];
        if (src.out_shape.size() != 1) {
          throw ConfigError("model: linear '" + l.id + "' needs a flat input, got shape " +
                            shape_str(src.out_shape));
        }
        if (l.group.empty()) throw ConfigError("model: linear '" + l.id + "' needs a group");
        if (l.out == 0) throw ConfigError("model: linear '" + l.id + "' needs out > 0");
        node.lin = LinearLayer::init(src.out_shape[0], l.out, init_rng);
        node.in_factor = src.flatten_factor;
        node.group = intern_group(l.group, l.out);
        node.out_shape = {l.out};
        theta_.push_back(node.lin.weight);
        theta_.push_back(node.lin.bias);
        break;
      }
      case LayerKind::conv: {
        arity(1);
        const LayerNode& src = nodes_[static_cast<std::size_t>(node.inputs[0])];
        if (src.out_shape.size() != 3) {
          throw ConfigError("model: conv '" + l.id + "' needs a [C,H,W] input, got shape " +
                            shape_str(src.out_shape));
        }
        if (l.group.empty()) throw ConfigError("model: conv '" + l.id + "' needs a group");
        if (l.out == 0 || l.kh == 0 || l.kw == 0) {
          throw ConfigError("model: conv '" + l.id + "' needs out and kernel extents > 0");
        }
        const std::size_t H = src.out_shape[1], W = src.out_shape[2];
        if (H + 2 * l.pad < l.kh || W + 2 * l.pad < l.kw) {
          throw ConfigError("model: conv '" + l.id + "' kernel exceeds padded input");
        }
        const std::size_t Ho = (H + 2 * l.pad - l.kh) / l.stride + 1;
        const std::size_t Wo = (W + 2 * l.pad - l.kw) / l.stride + 1;
        node.conv = ConvLayer::init(src.out_shape[0], l.out, l.kh, l.kw, l.stride, l.pad, init_rng);
        node.group = intern_group(l.group, l.out);
        node.out_shape = {l.out, Ho, Wo};
        node.flops_factor = l.kh * l.kw * Ho * Wo;
        theta_.push_back(node.conv.weight);
        theta_.push_back(node.conv.bias);
        break;
      }
      case LayerKind::relu: {
        arity(1);
        const LayerNode& src = nodes_[static_cast<std::size_t>(node.inputs[0])];
        node.out_shape = src.out_shape;
        node.group = src.group;
        node.flatten_factor = src.flatten_factor;
        break;
      }
      case LayerKind::add: {
        if (node.inputs.size() < 2) {
          throw ConfigError("model: add '" + l.id + "' needs at least two inputs");
        }
        const LayerNode& src = nodes_[static_cast<std::size_t>(node.inputs[0])];
        node.out_shape = src.out_shape;
        node.group = src.group;
        node.flatten_factor = src.flatten_factor;
        break;
      }
      case LayerKind::flatten: {
        arity(1);
        const LayerNode& src = nodes_[static_cast<std::size_t>(node.inputs[0])];
        if (src.out_shape.size() != 3) {
          throw ConfigError("model: flatten '" + l.id + "' needs a [C,H,W] input");
        }
        node.out_shape = {src.out_shape[0] * src.out_shape[1] * src.out_shape[2]};
        node.group = src.group;
        node.flatten_factor = src.out_shape[1] * src.out_shape[2];
        break;
      }
      case LayerKind::input:
        break;
    }
    by_id.emplace(l.id, static_cast<int>(nodes_.size()));
    nodes_.push_back(std::move(node));
  }

  auto it = group_index_.find(spec.output_group);
  output_group_ = it == group_index_.end() ? -1 : it->second;
}

std::vector<ValidationIssue> ModelGraph::validate() const {
  std::vector<ValidationIssue> issues;
  auto report = [&](const std::string& node, const std::string& rule, const std::string& msg) {
    issues.push_back({node, rule, msg});
  };

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const LayerNode& n = nodes_[i];
    for (int p : n.inputs) {
      if (p < 0 || static_cast<std::size_t>(p) >= i) {
        report(n.name, "dag", "input index out of topological order");
      }
    }
    if (n.kind == LayerKind::linear || n.kind == LayerKind::conv) {
      if (n.group < 0 || static_cast<std::size_t>(n.group) >= groups_.size()) {
        report(n.name, "group-exists", "width-bearing layer without a dependency group");
        continue;
      }
      const GroupMask& g = groups_[static_cast<std::size_t>(n.group)];
      const std::size_t c_out =
          n.kind == LayerKind::linear ? n.lin.c_out() : n.conv.c_out();
      if (c_out != g.channels) {
        report(n.name, "group-consistency",
               "layer emits " + std::to_string(c_out) + " channels but group '" + g.name +
                   "' has " + std::to_string(g.channels));
      }
      const LayerNode& src = nodes_[static_cast<std::size_t>(n.inputs[0])];
      const GroupMask& gin = groups_[static_cast<std::size_t>(src.group)];
      const std::size_t expect_in = gin.channels * n.in_factor;
      const std::size_t c_in = n.kind == LayerKind::linear ? n.lin.c_in() : n.conv.c_in();
      if (c_in != expect_in) {
        report(n.name, "shape",
               "consumer expects " + std::to_string(c_in) + " input channels but producer group '" +
                   gin.name + "' supplies " + std::to_string(expect_in));
      }
    }
    if (n.kind == LayerKind::add) {
      const LayerNode& first = nodes_[static_cast<std::size_t>(n.inputs[0])];
      for (std::size_t k = 1; k < n.inputs.size(); ++k) {
        const LayerNode& other = nodes_[static_cast<std::size_t>(n.inputs[k])];
        if (other.group != first.group) {
          report(n.name, "group-mismatch",
                 "add inputs carry groups '" + groups_[static_cast<std::size_t>(first.group)].name +
                     "' and '" + groups_[static_cast<std::size_t>(other.group)].name + "'");
        }
        if (other.out_shape != first.out_shape) {
          report(n.name, "shape", "add inputs have different shapes");
        }
      }
    }
  }

  if (input_group_ >= 0 && !groups_[static_cast<std::size_t>(input_group_)].fixed) {
    report("@input", "fixed-groups", "input group must be fixed");
  }
  if (output_group_ < 0) {
    report("@output", "output", "output group '" + spec_.output_group + "' never produced");
  } else if (!groups_[static_cast<std::size_t>(output_group_)].fixed) {
    report("@output", "fixed-groups", "output group must be fixed");
  }

  std::vector<char> consumed(nodes_.size(), 0);
  for (const LayerNode& n : nodes_) {
    for (int p : n.inputs) consumed[static_cast<std::size_t>(p)] = 1;
  }
  int sinks = 0;
  int sink = -1;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!consumed[i]) {
      ++sinks;
      sink = static_cast<int>(i);
    }
  }
  if (sinks != 1) {
    report("@output", "output", std::to_string(sinks) + " sink nodes; expected exactly 1");
  } else {
    const LayerNode& s = nodes_[static_cast<std::size_t>(sink)];
    if (s.out_shape != Shape{spec_.classes}) {
      report(s.name, "output",
             "sink shape " + shape_str(s.out_shape) + " != [" + std::to_string(spec_.classes) + "]");
    }
    if (output_group_ >= 0 && s.group != output_group_) {
      report(s.name, "output", "sink does not carry the output group");
    }
  }
  return issues;
}

void ModelGraph::require_valid() const {
  std::vector<ValidationIssue> issues = validate();
  if (issues.empty()) return;
  std::ostringstream os;
  os << "model validation failed:";
  for (const ValidationIssue& i : issues) os << " [" << i.node << "/" << i.rule << "] " << i.message;
  throw ContractError(os.str());
}

void ModelGraph::refresh_masks() {
  for (GroupMask& g : groups_) g.refresh();
}

GroupMask& ModelGraph::group(const std::string& name) {
  auto it = group_index_.find(name);
  if (it == group_index_.end()) throw ContractError("unknown group '" + name + "'");
  return groups_[static_cast<std::size_t>(it->second)];
}

const GroupMask& ModelGraph::group(const std::string& name) const {
  return const_cast<ModelGraph*>(this)->group(name);
}

Tensor ModelGraph::forward(const Tensor& x, ForwardMode mode) const {
  Shape expect = {x.shape().empty() ? 0 : x.shape()[0]};
  expect.insert(expect.end(), spec_.input_shape.begin(), spec_.input_shape.end());
  if (x.shape() != expect) {
    throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match model input " +
                         shape_str(spec_.input_shape));
  }
  const std::size_t batch = x.shape()[0];
  const Tape* tape = Tape::active();

  auto out_scale = [&](const GroupMask& g) -> Tensor {
    if (mode == ForwardMode::full) return Tensor();
    if (mode == ForwardMode::soft) {
      if (g.fixed) return Tensor();
      if (!g.w.defined()) throw ContractError("forward: group '" + g.name + "' never refreshed");
      if (tape && !g.forced && g.w.impl()->generation != tape->generation()) {
        throw ContractError("forward: group '" + g.name + "' mask is stale on the active tape");
      }
      return g.w;
    }
    // hard: binary mask as a constant; skip when nothing is pruned
    if (g.fixed || g.all_retained()) return Tensor();
    return g.mhat_tensor();
  };

  std::vector<Tensor> values(nodes_.size());
  int last = 0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const LayerNode& n = nodes_[i];
    switch (n.kind) {
      case LayerKind::input:
        values[i] = x;
        break;
      case LayerKind::linear:
        values[i] = linear_forward(n.lin, values[static_cast<std::size_t>(n.inputs[0])],
                                   out_scale(groups_[static_cast<std::size_t>(n.group)]));
        break;
      case LayerKind::conv:
        values[i] = conv2d_forward(n.conv, values[static_cast<std::size_t>(n.inputs[0])],
                                   out_scale(groups_[static_cast<std::size_t>(n.group)]));
        break;
      case LayerKind::relu:
        values[i] = relu(values[static_cast<std::size_t>(n.inputs[0])]);
        break;
      case LayerKind::add: {
        Tensor acc = values[static_cast<std::size_t>(n.inputs[0])];
        for (std::size_t k = 1; k < n.inputs.size(); ++k) {
          acc = add(acc, values[static_cast<std::size_t>(n.inputs[k])]);
        }
        values[i] = acc;
        break;
      }
      case LayerKind::flatten:
        values[i] = reshape(values[static_cast<std::size_t>(n.inputs[0])],
                            {batch, n.out_shape[0]});
        break;
    }
    last = static_cast<int>(i);
  }

  // single-sink graphs evaluate to their last node
  std::vector<char> consumed(nodes_.size(), 0);
  for (const LayerNode& n : nodes_) {
    for (int p : n.inputs) consumed[static_cast<std::size_t>(p)] = 1;
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!consumed[i]) last = static_cast<int>(i);
  }
  return values[static_cast<std::size_t>(last)];
}

double ModelGraph::group_count(int group, ForwardMode mode) const {
  const GroupMask& g = groups_[static_cast<std::size_t>(group)];
  if (mode == ForwardMode::full || g.fixed) return static_cast<double>(g.channels);
  return static_cast<double>(g.retained);
}

Tensor ModelGraph::group_count_soft(int group) const {
  const GroupMask& g = groups_[static_cast<std::size_t>(group)];
  if (g.fixed) return Tensor::scalar(static_cast<double>(g.channels));
  if (!g.count_soft.defined()) {
    throw ContractError("flops_soft: group '" + g.name + "' never refreshed");
  }
  return g.count_soft;
}

double ModelGraph::flops(ForwardMode mode) const {
  if (mode == ForwardMode::soft) throw ContractError("flops: use flops_soft for the soft mode");
  double total = 0.0;
  for (const LayerNode& n : nodes_) {
    if (n.kind != LayerKind::linear && n.kind != LayerKind::conv) continue;
    const LayerNode& src = nodes_[static_cast<std::size_t>(n.inputs[0])];
    total += group_count(n.group, mode) * group_count(src.group, mode) *
             static_cast<double>(n.in_factor) * static_cast<double>(n.flops_factor);
  }
  return total;
}

Tensor ModelGraph::flops_soft() const {
  Tensor total = Tensor::scalar(0.0);
  for (const LayerNode& n : nodes_) {
    if (n.kind != LayerKind::linear && n.kind != LayerKind::conv) continue;
    const LayerNode& src = nodes_[static_cast<std::size_t>(n.inputs[0])];
    Tensor term = mul(group_count_soft(n.group), group_count_soft(src.group));
    const double factor = static_cast<double>(n.in_factor) * static_cast<double>(n.flops_factor);
    if (factor != 1.0) term = scale(term, factor);
    total = add(total, term);
  }
  return total;
}

double ModelGraph::flops_ratio(ForwardMode mode) const { return flops(mode) / flops(ForwardMode::full); }

Tensor ModelGraph::flops_ratio_soft() const {
  return scale(flops_soft(), 1.0 / flops(ForwardMode::full));
}

double ModelGraph::flops_ratio_with(const std::map<std::string, std::size_t>& retained) const {
  auto count = [&](int group) {
    const GroupMask& g = groups_[static_cast<std::size_t>(group)];
    if (g.fixed) return static_cast<double>(g.channels);
    auto it = retained.find(g.name);
    return static_cast<double>(it == retained.end() ? g.channels : it->second);
  };
  double total = 0.0;
  for (const LayerNode& n : nodes_) {
    if (n.kind != LayerKind::linear && n.kind != LayerKind::conv) continue;
    const LayerNode& src = nodes_[static_cast<std::size_t>(n.inputs[0])];
    total += count(n.group) * count(src.group) * static_cast<double>(n.in_factor) *
             static_cast<double>(n.flops_factor);
  }
  return total / flops(ForwardMode::full);
}

double ModelGraph::min_hard_ratio() const {
  std::map<std::string, std::size_t> ones;
  for (const GroupMask& g : groups_) {
    if (!g.fixed) ones[g.name] = 1;
  }
  return flops_ratio_with(ones);
}

CompactModel ModelGraph::export_compact() const {
  CompactModel compact;
  for (const GroupMask& g : groups_) {
    if (!g.fixed) compact.retained[g.name] = g.retained;
  }

  ModelSpec cspec = spec_;
  for (LayerSpec& l : cspec.layers) {
    if (l.group.empty()) continue;
    auto it = compact.retained.find(l.group);
    if (it != compact.retained.end()) l.out = it->second;
  }
  cspec.fixed_groups.clear();
  for (const GroupMask& g : groups_) cspec.fixed_groups.push_back(g.name);

  Rng throwaway(0);
  compact.graph = ModelGraph(cspec, throwaway);

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const LayerNode& src = nodes_[i];
    LayerNode& dst = compact.graph.nodes_mut()[i];
    if (src.kind != LayerKind::linear && src.kind != LayerKind::conv) continue;

    const GroupMask& gout = groups_[static_cast<std::size_t>(src.group)];
    const GroupMask& gin = groups_[static_cast<std::size_t>(
        nodes_[static_cast<std::size_t>(src.inputs[0])].group)];
    std::vector<std::size_t> rows, in_channels;
    for (std::size_t c = 0; c < gout.channels; ++c) {
      if (gout.fixed || gout.mhat[c]) rows.push_back(c);
    }
    for (std::size_t c = 0; c < gin.channels; ++c) {
      if (gin.fixed || gin.mhat[c]) in_channels.push_back(c);
    }

    if (src.kind == LayerKind::linear) {
      const std::size_t f = src.in_factor;
      const std::size_t c_in_src = src.lin.c_in();
      auto wv = src.lin.weight.values();
      auto dstw = dst.lin.weight.values_mut();
      std::size_t k = 0;
      for (std::size_t r : rows) {
        for (std::size_t c : in_channels) {
          for (std::size_t s = 0; s < f; ++s) dstw[k++] = wv[r * c_in_src + c * f + s];
        }
      }
      auto dstb = dst.lin.bias.values_mut();
      for (std::size_t r = 0; r < rows.size(); ++r) dstb[r] = src.lin.bias.at(rows[r]);
    } else {
      const Shape& ws = src.conv.weight.shape();
      const std::size_t kh = ws[2], kw = ws[3], ci = ws[1];
      auto wv = src.conv.weight.values();
      auto dstw = dst.conv.weight.values_mut();
      std::size_t k = 0;
      for (std::size_t r : rows) {
        for (std::size_t c : in_channels) {
          for (std::size_t s = 0; s < kh * kw; ++s) dstw[k++] = wv[(r * ci + c) * kh * kw + s];
        }
      }
      auto dstb = dst.conv.bias.values_mut();
      for (std::size_t r = 0; r < rows.size(); ++r) dstb[r] = src.conv.bias.at(rows[r]);
    }
  }

  compact.graph.refresh_masks();
  {
    std::ostringstream os;
    os << std::hex << spec_.hash();
    compact.source_hash = os.str();
  }
  return compact;
}

std::map<std::string, std::size_t> ModelGraph::random_prefix_masks(double target, double tol,
                                                                   std::uint64_t seed,
                                                                   std::size_t max_attempts) const {
  if (!(target > 0.0 && target <= 1.0)) {
    throw ContractError("random_prefix_masks: target must be in (0,1]");
  }
  if (tol < 0.0) throw ContractError("random_prefix_masks: tolerance must be >= 0");

  std::vector<const GroupMask*> prunable;
  for (const GroupMask& g : groups_) {
    if (!g.fixed) prunable.push_back(&g);
  }

  Rng rng(seed);
  std::map<std::string, std::size_t> best;
  double best_gap = 1e300;
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    std::map<std::string, std::size_t> assignment;
    for (const GroupMask* g : prunable) {
      assignment[g->name] = 1 + static_cast<std::size_t>(rng.next_range(g->channels));
    }
    const double ratio = flops_ratio_with(assignment);
    const double gap = std::abs(ratio - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = assignment;
    }
    if (gap <= tol) return assignment;
  }
  std::ostringstream os;
  os << "random_prefix_masks: no assignment within " << tol << " of " << target << " after "
     << max_attempts << " attempts; closest ratio gap " << best_gap;
  throw InfeasibleError(os.str(), target + (flops_ratio_with(best) > target ? best_gap : -best_gap));
}

void ModelGraph::apply_prefix_masks(const std::map<std::string, std::size_t>& retained) {
  for (const auto& [name, k] : retained) {
    GroupMask& g = group(name);
    if (g.fixed) {
      if (k != g.channels) {
        throw ContractError("apply_prefix_masks: group '" + name + "' is fixed");
      }
      continue;
    }
    g.force_prefix(k);
  }
}

}  // namespace s2h
