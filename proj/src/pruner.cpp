#include "s2h/pruner.hpp"

#include <algorithm>
#include <cmath>

#include "s2h/nn.hpp"

namespace s2h {

namespace {

constexpr double kPi = 3.14159265358979323846;

double l2_norm(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

// Splits one backward pass over theta and u targets into the two bundle maps.
void split_map(GradientMap all, const std::vector<Tensor>& theta, const std::vector<Tensor>& us,
               GradientMap* theta_out, GradientMap* u_out) {
  if (theta_out) {
    for (const Tensor& t : theta) {
      if (const Tensor* g = all.find(t.id())) theta_out->set(t, *g);
    }
  }
  if (u_out) {
    for (const Tensor& u : us) {
      if (const Tensor* g = all.find(u.id())) u_out->set(u, *g);
    }
  }
}

}  // namespace

RunMode parse_run_mode(const std::string& name) {
  if (name == "s2h") return RunMode::s2h;
  if (name == "alt1") return RunMode::alt1;
  if (name == "alt2") return RunMode::alt2;
  if (name == "soft_only") return RunMode::soft_only;
  if (name == "finetune") return RunMode::finetune;
  throw ConfigError("unknown run mode '" + name + "'");
}

std::string run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::s2h: return "s2h";
    case RunMode::alt1: return "alt1";
    case RunMode::alt2: return "alt2";
    case RunMode::soft_only: return "soft_only";
    case RunMode::finetune: return "finetune";
  }
  return "?";
}

double ScheduleConfig::at(std::size_t epoch, std::size_t total, double base_lr) const {
  if (total == 0 || epoch > total) throw ContractError("lr schedule: epoch outside [0, total]");
  const double warmup_epochs = warmup_frac * static_cast<double>(total);
  if (warmup_epochs > 0.0 && static_cast<double>(epoch) < warmup_epochs) {
    return base_lr * (static_cast<double>(epoch) + 1.0) / (warmup_epochs + 1.0);
  }
  if (kind == ScheduleKind::cosine) {
    return base_lr * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(epoch) / static_cast<double>(total)));
  }
  if (milestones.size() != factors.size()) {
    throw ConfigError("lr schedule: milestones and factors differ in length");
  }
  double lr = base_lr;
  const double progress = static_cast<double>(epoch) / static_cast<double>(total);
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      throw ConfigError("lr schedule: milestones must be strictly increasing");
    }
    if (progress >= milestones[i]) lr = base_lr * factors[i];
  }
  return lr;
}

Tensor resource_penalty(const ModelGraph& graph, double target) {
  if (!(target > 0.0 && target <= 1.0)) {
    throw ContractError("resource_penalty: target must be in (0,1]");
  }
  Tensor gap = sub(graph.flops_ratio_soft(), Tensor::scalar(target));
  return mul(gap, gap);
}

Tensor gap_measure(const Tensor& hard_logits, const Tensor& ref_logits, GapDirection direction,
                   double temperature) {
  if (direction == GapDirection::soft_teacher) {
    return kl_gap(ref_logits, hard_logits, temperature);
  }
  return kl_gap(hard_logits, ref_logits, temperature);
}

std::vector<double> balance_mask_gradients(std::span<const double> task_grad,
                                           std::span<const double> gap_grad,
                                           std::span<const double> resource_grad,
                                           double resource_coef, BalanceReference reference) {
  if (task_grad.size() != gap_grad.size() || task_grad.size() != resource_grad.size()) {
    throw ContractError("balance_mask_gradients: gradient lengths differ");
  }
  const std::size_t n = task_grad.size();
  const double norm_task = l2_norm(task_grad);
  const double norm_gap = l2_norm(gap_grad);
  const double norm_res = l2_norm(resource_grad);

  std::vector<double> perf(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (norm_task > 0.0) perf[i] += task_grad[i] / norm_task;
    if (norm_gap > 0.0) perf[i] += gap_grad[i] / norm_gap;
  }
  const double norm_perf = l2_norm(perf);
  const double reference_norm =
      reference == BalanceReference::raw ? norm_res : resource_coef * norm_res;
  // A zero-norm resource gradient means the constraint is met exactly; the
  // performance signal then passes unscaled rather than being silenced.
  if (norm_res > 0.0 && norm_perf > 0.0) {
    const double s = reference_norm / norm_perf;
    for (double& x : perf) x *= s;
  }
  for (std::size_t i = 0; i < n; ++i) perf[i] += resource_coef * resource_grad[i];
  return perf;
}

void sgd_momentum_step(Tensor param, std::span<const double> grad, std::vector<double>& velocity,
                       double lr, double momentum, double weight_decay) {
  auto p = param.values_mut();
  if (grad.size() != p.size()) throw ContractError("sgd step: gradient size mismatch");
  if (velocity.size() != p.size()) velocity.assign(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * p[i]);
    p[i] -= lr * velocity[i];
  }
}

std::vector<double>& SgdMomentum::buffer(const Tensor& param) {
  auto& v = velocity[param.id()];
  if (v.size() != param.size()) v.assign(param.size(), 0.0);
  return v;
}

void SgdMomentum::apply(Tensor param, std::span<const double> grad, double lr, double weight_decay) {
  sgd_momentum_step(param, grad, buffer(param), lr, momentum, weight_decay);
}

Trainer::Trainer(ModelGraph& graph, PruneRunConfig cfg) : graph_(graph), cfg_(std::move(cfg)) {
  opt_.momentum = cfg_.optim.momentum;
}

std::pair<StepLosses, GradientBundle> Trainer::step_gradients(const Batch& batch) {
  const std::vector<Tensor>& theta = graph_.theta();
  const std::vector<Tensor>& us = graph_.mask_logits();
  const Toggles& tog = cfg_.toggles;

  StepLosses losses;
  GradientBundle bundle;
  Tape tape;
  graph_.refresh_masks();

  auto backward_split = [&](const Tensor& root, bool want_theta, bool want_u,
                            GradientMap* theta_out, GradientMap* u_out) {
    std::vector<Tensor> targets;
    if (want_theta) targets.insert(targets.end(), theta.begin(), theta.end());
    if (want_u) targets.insert(targets.end(), us.begin(), us.end());
    if (targets.empty()) return;
    split_map(tape.backward(root, std::span<const Tensor>(targets)), theta, us,
              want_theta ? theta_out : nullptr, want_u ? u_out : nullptr);
  };
  // With every group fixed, the resource term is a constant off the tape.
  auto backward_resource = [&](const Tensor& r, GradientMap* u_out) {
    if (us.empty()) return;
    split_map(tape.backward(r, std::span<const Tensor>(us)), theta, us, nullptr, u_out);
  };

  const RunMode mode = cfg_.mode;
  if (mode == RunMode::s2h || mode == RunMode::finetune || mode == RunMode::soft_only) {
    Tensor y_s = graph_.forward(batch.x, ForwardMode::soft);
    Tensor l = cross_entropy(y_s, batch.y, cfg_.label_smoothing);
    Tensor r = resource_penalty(graph_, cfg_.target);
    losses.task = l.item();
    losses.resource = r.item();
    backward_split(l, tog.task_theta, tog.task_mask, &bundle.task_theta, &bundle.task_mask);
    backward_resource(r, &bundle.resource_mask);

    if (mode != RunMode::soft_only) {
      Tensor y_h = graph_.forward(batch.x, ForwardMode::hard);
      Tensor d1 = gap_measure(y_h, detach(y_s), cfg_.gap_direction, cfg_.gap_temperature);
      Tensor d2 = gap_measure(detach(y_h), y_s, cfg_.gap_direction, cfg_.gap_temperature);
      losses.gap_d1 = d1.item();
      losses.gap_d2 = d2.item();
      backward_split(d1, tog.gap_hard_theta, false, &bundle.gap_hard_theta, nullptr);
      backward_split(d2, tog.gap_soft_theta, tog.gap_mask, &bundle.gap_soft_theta, &bundle.gap_mask);
    }
  } else if (mode == RunMode::alt1) {
    // Straight-through flavor: theta trains on the hard network's own task
    // loss, the mask still follows the soft objective.
    Tensor y_s = graph_.forward(batch.x, ForwardMode::soft);
    Tensor y_h = graph_.forward(batch.x, ForwardMode::hard);
    Tensor l_soft = cross_entropy(y_s, batch.y, cfg_.label_smoothing);
    Tensor l_hard = cross_entropy(y_h, batch.y, cfg_.label_smoothing);
    Tensor r = resource_penalty(graph_, cfg_.target);
    losses.task = l_hard.item();
    losses.resource = r.item();
    backward_split(l_hard, true, false, &bundle.task_theta, nullptr);
    backward_split(l_soft, false, true, nullptr, &bundle.task_mask);
    backward_resource(r, &bundle.resource_mask);
  } else {  // alt2: self-distillation from the unmasked network
    Tensor y_o = graph_.forward(batch.x, ForwardMode::full);
    Tensor y_s = graph_.forward(batch.x, ForwardMode::soft);
    Tensor y_h = graph_.forward(batch.x, ForwardMode::hard);
    Tensor l_orig = cross_entropy(y_o, batch.y, cfg_.label_smoothing);
    Tensor l_soft = cross_entropy(y_s, batch.y, cfg_.label_smoothing);
    Tensor d = gap_measure(y_h, y_o, cfg_.gap_direction, cfg_.gap_temperature);
    Tensor r = resource_penalty(graph_, cfg_.target);
    losses.task = l_orig.item();
    losses.resource = r.item();
    losses.gap_d1 = d.item();
    backward_split(l_orig, true, false, &bundle.task_theta, nullptr);
    backward_split(d, true, false, &bundle.gap_hard_theta, nullptr);
    backward_split(l_soft, false, true, nullptr, &bundle.task_mask);
    backward_resource(r, &bundle.resource_mask);
  }
  return {losses, bundle};
}

GradientMap Trainer::balanced_u_gradient(const GradientBundle& bundle) const {
  const std::vector<Tensor>& us = graph_.mask_logits();
  GradientMap out;
  if (us.empty()) return out;

  auto flatten = [&](const GradientMap& m, std::span<const Tensor> leaves) {
    std::vector<double> flat;
    for (const Tensor& u : leaves) {
      Tensor g = m.get(u);
      flat.insert(flat.end(), g.values().begin(), g.values().end());
    }
    return flat;
  };

  auto balance_over = [&](std::span<const Tensor> leaves) {
    std::vector<Tensor> owned(leaves.begin(), leaves.end());
    std::vector<double> combined = balance_mask_gradients(
        flatten(bundle.task_mask, owned), flatten(bundle.gap_mask, owned),
        flatten(bundle.resource_mask, owned), cfg_.resource_coef, cfg_.balance_reference);
    std::size_t offset = 0;
    for (const Tensor& u : owned) {
      std::vector<double> g(combined.begin() + static_cast<std::ptrdiff_t>(offset),
                            combined.begin() + static_cast<std::ptrdiff_t>(offset + u.size()));
      offset += u.size();
      out.set(u, Tensor::from_values(u.shape(), std::move(g)));
    }
  };

  if (cfg_.balance_scope == BalanceScope::global) {
    balance_over(us);
  } else {
    for (const Tensor& u : us) balance_over(std::span<const Tensor>(&u, 1));
  }
  return out;
}

void Trainer::apply_updates(const GradientBundle& bundle, double lr) {
  const RunMode mode = cfg_.mode;
  const bool plain_coeffs = mode == RunMode::alt1 || mode == RunMode::alt2;
  const double task_coef = plain_coeffs ? 1.0 : cfg_.task_coef;
  const double gap_coef = plain_coeffs ? 1.0 : cfg_.gap_coef;

  for (const Tensor& param : graph_.theta()) {
    std::vector<double> grad(param.size(), 0.0);
    auto accumulate = [&](const GradientMap& m, double coef) {
      if (coef == 0.0) return;
      if (const Tensor* g = m.find(param.id())) {
        auto gv = g->values();
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += coef * gv[i];
      }
    };
    accumulate(bundle.task_theta, task_coef);
    accumulate(bundle.gap_hard_theta, gap_coef);
    if (cfg_.toggles.gap_soft_theta) accumulate(bundle.gap_soft_theta, cfg_.gap_coef);
    opt_.apply(param, grad, lr, cfg_.optim.weight_decay);
  }

  GradientMap u_grad = balanced_u_gradient(bundle);
  for (const Tensor& u : graph_.mask_logits()) {
    Tensor g = u_grad.get(u);
    opt_.apply(u, g.values(), lr * cfg_.optim.u_lr_scale, cfg_.optim.u_weight_decay);
  }

  const double ramp =
      cfg_.mask_sharpen_start >= 1.0
          ? 0.0
          : std::clamp((progress_ - cfg_.mask_sharpen_start) / (1.0 - cfg_.mask_sharpen_start),
                       0.0, 1.0);
  if (cfg_.mask_sharpen > 0.0 && ramp > 0.0) {
    // Gate on the pre-update soft ratio: sharpening pauses whenever the
    // budget drifts, so it cannot fight the resource term.
    const double ratio = graph_.flops_soft().item() / graph_.flops(ForwardMode::full);
    if (std::abs(ratio - cfg_.target) <= cfg_.mask_sharpen_gate) {
      const double push = lr * cfg_.optim.u_lr_scale * cfg_.mask_sharpen * ramp;
      for (GroupMask& group : graph_.groups()) {
        if (group.fixed || group.forced) continue;
        // Raise the logit of the rounded expected width. Softmax
        // renormalization draws retention mass toward that prefix length from
        // everywhere at once, so the distribution sharpens onto the lattice
        // point the resource term already settled on and the thresholded
        // mask converges to the soft channel count.
        const double count = group.count_soft.item();
        auto keep = static_cast<std::size_t>(std::lround(count));
        keep = std::clamp<std::size_t>(keep, 1, group.channels);
        group.u.values_mut()[keep - 1] += push;
      }
    }
  }
}

std::pair<StepLosses, GradientBundle> Trainer::prune_step(const Batch& batch, double lr) {
  auto result = step_gradients(batch);
  apply_updates(result.second, lr);
  graph_.refresh_masks();
  return result;
}

EvalMetrics evaluate(ModelGraph& graph, const Dataset& val, const PruneRunConfig& cfg,
                     std::size_t batch_size) {
  NoGradScope no_grad;
  graph.refresh_masks();

  EvalMetrics m;
  m.samples = val.size();
  m.flops_hard_ratio = graph.flops_ratio(ForwardMode::hard);
  m.flops_soft_ratio = graph.flops_soft().item() / graph.flops(ForwardMode::full);
  const double gap = m.flops_soft_ratio - cfg.target;
  m.resource = gap * gap;

  const std::size_t classes = graph.classes();
  double soft_hits = 0.0, hard_hits = 0.0, js_sum = 0.0, l2_sum = 0.0;
  std::vector<std::size_t> idx(val.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  for (std::size_t start = 0; start < val.size(); start += batch_size) {
    const std::size_t end = std::min(val.size(), start + batch_size);
    std::span<const std::size_t> slice(idx.data() + start, end - start);
    Tensor x = val.gather_features(slice);
    std::vector<int> y = val.gather_labels(slice);
    const double count = static_cast<double>(end - start);

    Tensor soft_logits = graph.forward(x, ForwardMode::soft);
    Tensor hard_logits = graph.forward(x, ForwardMode::hard);
    soft_hits += top1_accuracy(soft_logits, y) * count;
    hard_hits += top1_accuracy(hard_logits, y) * count;

    std::vector<double> hard_probs = softmax_probs(hard_logits);
    std::vector<double> ref_probs;
    if (cfg.mode == RunMode::alt1) {
      SmoothedLabels targets(classes, cfg.label_smoothing);
      Tensor q = targets.distribution(y);
      ref_probs.assign(q.values().begin(), q.values().end());
    } else if (cfg.mode == RunMode::alt2) {
      ref_probs = softmax_probs(graph.forward(x, ForwardMode::full));
    } else {
      ref_probs = softmax_probs(soft_logits);
    }
    js_sum += js_from_probs(ref_probs, hard_probs, classes) * count;
    l2_sum += l2_from_probs(ref_probs, hard_probs, classes) * count;
  }

  const double n = static_cast<double>(val.size());
  m.soft_top1 = soft_hits / n;
  m.hard_top1 = hard_hits / n;
  m.js = js_sum / n;
  m.l2 = l2_sum / n;
  return m;
}

RunResult Trainer::run(const TrainVal& data, const EpochHook& hook) {
  graph_.require_valid();
  if (graph_.min_hard_ratio() > cfg_.target) {
    throw ConfigError("target T=" + std::to_string(cfg_.target) +
                      " is below the architecture's minimum hard ratio " +
                      std::to_string(graph_.min_hard_ratio()));
  }
  const double lr_scale = cfg_.mode == RunMode::finetune ? cfg_.finetune_lr_scale : 1.0;

  RunResult result;
  for (std::size_t epoch = start_epoch_; epoch < cfg_.epochs; ++epoch) {
    progress_ = static_cast<double>(epoch) / static_cast<double>(cfg_.epochs);
    const double lr = cfg_.schedule.at(epoch, cfg_.epochs, cfg_.optim.lr) * lr_scale;
    const auto batches = batch_iter(data.train.size(), cfg_.batch_size, cfg_.seed, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Batch batch{data.train.gather_features(batches[bi]), data.train.gather_labels(batches[bi])};
      try {
        prune_step(batch, lr);
      } catch (const NumericError& e) {
        throw NumericError("step aborted at epoch " + std::to_string(epoch + 1) + " batch " +
                           std::to_string(bi) + ": " + e.what());
      }
    }

    EvalMetrics m;
    try {
      m = evaluate(graph_, data.val, cfg_);
    } catch (const NumericError& e) {
      throw NumericError("step aborted: evaluation after epoch " + std::to_string(epoch + 1) +
                         " hit non-finite values: " + e.what());
    }
    TrajectoryRecord rec;
    rec.epoch = epoch + 1;
    rec.soft_top1 = m.soft_top1;
    rec.hard_top1 = m.hard_top1;
    rec.flops_hard = m.flops_hard_ratio;
    rec.flops_soft = m.flops_soft_ratio;
    rec.js_gap = m.js;
    rec.l2_gap = m.l2;
    rec.resource_penalty = m.resource;
    rec.lr = lr;
    result.trajectory.push_back(rec);
    if (hook) hook(epoch + 1, result.trajectory);
  }

  EvalMetrics final_metrics = evaluate(graph_, data.val, cfg_);
  result.final_gap.js = final_metrics.js;
  result.final_gap.l2 = final_metrics.l2;
  result.final_gap.soft_top1 = final_metrics.soft_top1;
  result.final_gap.hard_top1 = final_metrics.hard_top1;
  result.final_gap.samples = final_metrics.samples;
  result.compact = graph_.export_compact();
  return result;
}

}  // namespace s2h
