#pragma once

#include <functional>
#include <unordered_map>

#include "s2h/data.hpp"
#include "s2h/metrics.hpp"
#include "s2h/model_graph.hpp"

namespace s2h {

enum class RunMode { s2h, alt1, alt2, soft_only, finetune };
enum class GapDirection { soft_teacher, hard_teacher };
enum class BalanceReference { raw, scaled };
enum class BalanceScope { global, per_group };
enum class ScheduleKind { cosine, step };

RunMode parse_run_mode(const std::string& name);
std::string run_mode_name(RunMode mode);

// One switch per gradient term of the combined objective; the resource term
// is always on. gap_soft_theta is the term the modified theta update drops
// and exists only as an ablation.
struct Toggles {
  bool task_theta = true;
  bool gap_hard_theta = true;
  bool gap_soft_theta = false;
  bool task_mask = true;
  bool gap_mask = true;
};

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0003;
  double u_lr_scale = 1.0;
  double u_weight_decay = 0.0;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::cosine;
  std::vector<double> milestones{0.5, 0.75};  // fractions of total epochs
  std::vector<double> factors{0.1, 0.01};
  double warmup_frac = 0.0;  // linear ramp from 0 over this fraction of epochs

  double at(std::size_t epoch, std::size_t total, double base_lr) const;
};

struct PruneRunConfig {
  RunMode mode = RunMode::s2h;
  double target = 1.0;  // T, FLOPs budget as a fraction
  double task_coef = 0.5;
  double gap_coef = 5.0;
  double resource_coef = 5.0;
  Toggles toggles;
  double label_smoothing = 0.0;
  OptimConfig optim;
  ScheduleConfig schedule;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  GapDirection gap_direction = GapDirection::soft_teacher;
  double gap_temperature = 1.0;
  BalanceReference balance_reference = BalanceReference::raw;
  BalanceScope balance_scope = BalanceScope::global;
  // Budget-gated mask sharpening: while |soft ratio - T| <= gate, logits are
  // amplified around their mean by lr * rate per step, steepening the
  // retention profile without moving the constrained channel count. Off by
  // default.
  double mask_sharpen = 0.0;
  double mask_sharpen_gate = 0.02;
  double mask_sharpen_start = 0.0;  // fraction of training before the ramp begins
  double finetune_lr_scale = 0.1;
  std::string source_checkpoint;
  std::size_t checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  double random_tol = 0.02;          // ratio tolerance for random-baseline masks
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

struct StepLosses {
  double task = 0.0;
  double resource = 0.0;
  double gap_d1 = 0.0;
  double gap_d2 = 0.0;
};

// The named gradient terms of the combined objective, kept separate until
// combination so each can be toggled, balanced and tested on its own.
struct GradientBundle {
  GradientMap task_theta;      // task loss -> soft network -> theta
  GradientMap gap_hard_theta;  // gap -> hard network -> theta
  GradientMap gap_soft_theta;  // gap -> soft network -> theta (ablation only)
  GradientMap task_mask;       // task loss -> relaxed mask -> u
  GradientMap resource_mask;   // resource penalty -> u
  GradientMap gap_mask;        // gap -> relaxed mask -> u
};

// (soft FLOPs ratio - T)^2, differentiable w.r.t. every prunable u.
Tensor resource_penalty(const ModelGraph& graph, double target);

// The gap measure G(hard, reference). `soft_teacher` distills the hard
// network under the reference's supervision: KL(softmax(ref) || softmax(hard)).
Tensor gap_measure(const Tensor& hard_logits, const Tensor& ref_logits, GapDirection direction,
                   double temperature);

// L2-norm balancing of the mask-side gradients: the two performance terms are
// normalized individually, their sum is rescaled to the resource gradient's
// norm (raw) or to `resource_coef` times it (scaled), and the weighted
// resource gradient is added. Degenerate norms: a zero-norm performance term
// drops out; a zero-norm resource gradient (constraint met exactly) leaves
// the performance sum unscaled.
std::vector<double> balance_mask_gradients(std::span<const double> task_grad,
                                           std::span<const double> gap_grad,
                                           std::span<const double> resource_grad,
                                           double resource_coef,
                                           BalanceReference reference = BalanceReference::raw);

// v <- mu * v + (grad + wd * param); param <- param - lr * v
void sgd_momentum_step(Tensor param, std::span<const double> grad, std::vector<double>& velocity,
                       double lr, double momentum, double weight_decay);

struct SgdMomentum {
  double momentum = 0.9;
  std::unordered_map<std::uint64_t, std::vector<double>> velocity;

  std::vector<double>& buffer(const Tensor& param);
  void apply(Tensor param, std::span<const double> grad, double lr, double weight_decay);
};

struct TrajectoryRecord {
  std::size_t epoch = 0;  // 1-based, completed epochs
  double soft_top1 = 0.0;
  double hard_top1 = 0.0;
  double flops_hard = 0.0;
  double flops_soft = 0.0;
  double js_gap = 0.0;
  double l2_gap = 0.0;
  double resource_penalty = 0.0;
  double lr = 0.0;
};

struct EvalMetrics {
  double soft_top1 = 0.0;
  double hard_top1 = 0.0;
  double js = 0.0;
  double l2 = 0.0;
  double flops_hard_ratio = 1.0;
  double flops_soft_ratio = 1.0;
  double resource = 0.0;
  std::size_t samples = 0;
};

// Validation metrics, averaged over the whole set in a fixed batch order.
// The gap reference follows the mode: soft network for s2h-style runs,
// smoothed labels for alt1, the unmasked network for alt2.
EvalMetrics evaluate(ModelGraph& graph, const Dataset& val, const PruneRunConfig& cfg,
                     std::size_t batch_size = 256);

struct RunResult {
  std::vector<TrajectoryRecord> trajectory;
  GapReport final_gap;
  CompactModel compact;
};

// Drives one experiment over a built model graph; owns the optimizer state.
class Trainer {
 public:
  Trainer(ModelGraph& graph, PruneRunConfig cfg);

  // Gradient phase of one iteration: dual forwards, selective backwards.
  // Leaves parameters untouched.
  std::pair<StepLosses, GradientBundle> step_gradients(const Batch& batch);
  // Combines bundle terms per the run mode and steps the shared optimizer.
  void apply_updates(const GradientBundle& bundle, double lr);
  // One full training iteration; masks are re-derived after the update.
  std::pair<StepLosses, GradientBundle> prune_step(const Batch& batch, double lr);

  // epoch is 1-based (count of completed epochs at the time of the call).
  using EpochHook = std::function<void(std::size_t epoch, const std::vector<TrajectoryRecord>&)>;
  RunResult run(const TrainVal& data, const EpochHook& hook = {});

  SgdMomentum& optimizer() { return opt_; }
  ModelGraph& graph() { return graph_; }
  const PruneRunConfig& config() const { return cfg_; }
  void set_start_epoch(std::size_t completed) { start_epoch_ = completed; }

  // Fraction of training completed; drives the sharpening ramp. run() keeps
  // it current, direct step calls may set it explicitly.
  void set_progress(double fraction) { progress_ = fraction; }

 private:
  GradientMap balanced_u_gradient(const GradientBundle& bundle) const;

  ModelGraph& graph_;
  PruneRunConfig cfg_;
  SgdMomentum opt_;
  std::size_t start_epoch_ = 0;
  double progress_ = 1.0;
};

}  // namespace s2h
