#include <doctest.h>

#include <cmath>

#include "s2h/nn.hpp"
#include "s2h/pruner.hpp"
#include "s2h/trajectory.hpp"
#include "test_util.hpp"

using namespace s2h;
using test::bit_equal;
using test::random_tensor;

namespace {

ModelSpec tiny_spec() {
  ModelSpec spec;
  spec.input_shape = {3};
  spec.input_group = "in";
  spec.classes = 2;
  spec.output_group = "out";
  spec.fixed_groups = {"in", "out"};
  spec.layers = {
      {.id = "fc1", .kind = "linear", .inputs = {"@input"}, .out = 4, .group = "h"},
      {.id = "act", .kind = "relu", .inputs = {"fc1"}},
      {.id = "fc2", .kind = "linear", .inputs = {"act"}, .out = 2, .group = "out"},
  };
  return spec;
}

Batch tiny_batch(Rng& rng, std::size_t n = 6) {
  Batch batch;
  batch.x = random_tensor({n, 3}, rng, -1.5, 1.5);
  for (std::size_t i = 0; i < n; ++i) batch.y.push_back(static_cast<int>(rng.next_range(2)));
  return batch;
}

std::vector<double> fd_gradient(const std::function<double()>& eval, Tensor leaf, double h = 1e-5) {
  auto xs = leaf.values_mut();
  std::vector<double> g(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double saved = xs[i];
    xs[i] = saved + h;
    const double fp = eval();
    xs[i] = saved - h;
    const double fm = eval();
    xs[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double max_rel_err(std::span<const double> analytic, std::span<const double> fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace

TEST_SUITE_BEGIN("pruner");

TEST_CASE("every bundle term matches a finite-difference oracle of its defining scalar") {
  Rng rng(100);
  ModelGraph graph(tiny_spec(), rng);
  Batch batch = tiny_batch(rng);

  PruneRunConfig cfg;
  cfg.mode = RunMode::s2h;
  cfg.target = 0.5;
  cfg.toggles.gap_soft_theta = true;  // compute all six terms
  Trainer trainer(graph, cfg);

  // frozen reference outputs at the base point
  graph.refresh_masks();
  Tensor base_soft = graph.forward(batch.x, ForwardMode::soft).clone();
  Tensor base_hard = graph.forward(batch.x, ForwardMode::hard).clone();

  auto [losses, bundle] = trainer.step_gradients(batch);
  CHECK(std::isfinite(losses.task));

  auto soft_ce = [&]() {
    graph.refresh_masks();
    return cross_entropy(graph.forward(batch.x, ForwardMode::soft), batch.y, 0.0).item();
  };
  auto hard_gap = [&]() {
    graph.refresh_masks();
    return kl_gap(detach(base_soft), graph.forward(batch.x, ForwardMode::hard)).item();
  };
  auto soft_gap = [&]() {
    graph.refresh_masks();
    return kl_gap(graph.forward(batch.x, ForwardMode::soft), detach(base_hard)).item();
  };
  auto resource = [&]() {
    graph.refresh_masks();
    return resource_penalty(graph, cfg.target).item();
  };

  const double tol = 1e-5;
  for (const Tensor& p : graph.theta()) {
    CHECK(max_rel_err(bundle.task_theta.get(p).values(), fd_gradient(soft_ce, p)) < tol);
    CHECK(max_rel_err(bundle.gap_hard_theta.get(p).values(), fd_gradient(hard_gap, p)) < tol);
    CHECK(max_rel_err(bundle.gap_soft_theta.get(p).values(), fd_gradient(soft_gap, p)) < tol);
  }
  for (const Tensor& u : graph.mask_logits()) {
    CHECK(max_rel_err(bundle.task_mask.get(u).values(), fd_gradient(soft_ce, u)) < tol);
    CHECK(max_rel_err(bundle.resource_mask.get(u).values(), fd_gradient(resource, u)) < tol);
    CHECK(max_rel_err(bundle.gap_mask.get(u).values(), fd_gradient(soft_gap, u)) < tol);
  }
}

TEST_CASE("detach decoupling: default bundles carry no forbidden terms") {
  Rng rng(101);
  ModelGraph graph(tiny_spec(), rng);
  Trainer trainer(graph, PruneRunConfig{.mode = RunMode::s2h, .target = 0.5});

  for (int step = 0; step < 5; ++step) {
    Batch batch = tiny_batch(rng);
    auto [losses, bundle] = trainer.step_gradients(batch);
    CHECK(bundle.gap_soft_theta.empty());  // d2 contributes no theta gradient
    CHECK(bundle.gap_mask.size() == graph.mask_logits().size());
    CHECK(bundle.gap_hard_theta.size() == graph.theta().size());
  }
}

TEST_CASE("theta update is bit-identical whether or not the soft-branch term is computed") {
  Rng rng(102);
  ModelGraph a(tiny_spec(), rng);
  Rng rng2(102);
  ModelGraph b(tiny_spec(), rng2);
  Batch batch = tiny_batch(rng);

  PruneRunConfig base{.mode = RunMode::s2h, .target = 0.5};
  PruneRunConfig with_soft = base;
  with_soft.toggles.gap_soft_theta = true;

  Trainer ta(a, base);
  Trainer tb(b, with_soft);
  auto [la, bundle_a] = ta.step_gradients(batch);
  auto [lb, bundle_b] = tb.step_gradients(batch);
  CHECK(la.task == lb.task);

  for (std::size_t i = 0; i < a.theta().size(); ++i) {
    const Tensor& pa = a.theta()[i];
    const Tensor& pb = b.theta()[i];
    CHECK(bit_equal(bundle_a.task_theta.get(pa).values(), bundle_b.task_theta.get(pb).values()));
    CHECK(bit_equal(bundle_a.gap_hard_theta.get(pa).values(),
                    bundle_b.gap_hard_theta.get(pb).values()));
    // the modified update combines exactly these two terms; the extra
    // soft-branch computation must not perturb them
    std::vector<double> update_a(pa.size()), update_b(pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k) {
      update_a[k] = base.task_coef * bundle_a.task_theta.get(pa).values()[k] +
                    base.gap_coef * bundle_a.gap_hard_theta.get(pa).values()[k];
      update_b[k] = base.task_coef * bundle_b.task_theta.get(pb).values()[k] +
                    base.gap_coef * bundle_b.gap_hard_theta.get(pb).values()[k];
    }
    CHECK(bit_equal(update_a, update_b));
  }
  // the mask-side gradient is also unaffected by requesting theta targets
  for (std::size_t i = 0; i < a.mask_logits().size(); ++i) {
    CHECK(bit_equal(bundle_a.gap_mask.get(a.mask_logits()[i]).values(),
                    bundle_b.gap_mask.get(b.mask_logits()[i]).values()));
  }
}

TEST_CASE("resource penalty values and gradient") {
  Rng rng(103);
  ModelSpec spec;
  spec.input_shape = {4};
  spec.input_group = "in";
  spec.classes = 2;
  spec.output_group = "out";
  spec.fixed_groups = {"in", "out"};
  spec.layers = {
      {.id = "fc1", .kind = "linear", .inputs = {"@input"}, .out = 4, .group = "h"},
      {.id = "fc2", .kind = "linear", .inputs = {"fc1"}, .out = 2, .group = "out"},
  };
  ModelGraph graph(spec, rng);
  graph.refresh_masks();  // uniform logits -> soft ratio 15/24 = 0.625
  CHECK(resource_penalty(graph, 0.625).item() < 1e-30);

  graph.group("h").force_prefix(1);  // soft ratio (4 + 2) / 24 = 0.25
  CHECK(resource_penalty(graph, 0.15).item() == doctest::Approx(0.01).epsilon(1e-12));

  graph.group("h").clear_force();
  auto penalty = [&]() {
    graph.refresh_masks();
    return resource_penalty(graph, 0.15).item();
  };
  Tensor analytic;
  {
    Tape tape;
    graph.refresh_masks();
    Tensor r = resource_penalty(graph, 0.15);
    analytic = tape.backward(r, {graph.group("h").u}).get(graph.group("h").u);
  }
  CHECK(max_rel_err(analytic.values(), fd_gradient(penalty, graph.group("h").u)) < 1e-6);
}

TEST_CASE("balance_mask_gradients hand-arithmetic oracle") {
  std::vector<double> task{3, 0}, gap{0, 4}, res{0.6, 0.8};
  std::vector<double> out = balance_mask_gradients(task, gap, res, 5.0);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  CHECK(std::abs(out[0] - (inv_sqrt2 + 3.0)) < 1e-12);
  CHECK(std::abs(out[1] - (inv_sqrt2 + 4.0)) < 1e-12);

  SUBCASE("zero-norm gap term drops out") {
    std::vector<double> zero{0, 0};
    std::vector<double> r = balance_mask_gradients(task, zero, res, 5.0);
    // |res| = 1, unit(task) = [1, 0]
    CHECK(std::abs(r[0] - (1.0 + 3.0)) < 1e-12);
    CHECK(std::abs(r[1] - 4.0) < 1e-12);
  }
  SUBCASE("zero-norm resource gradient leaves the performance sum unscaled") {
    std::vector<double> zero{0, 0};
    std::vector<double> r = balance_mask_gradients(task, gap, zero, 5.0);
    CHECK(std::abs(r[0] - 1.0) < 1e-15);
    CHECK(std::abs(r[1] - 1.0) < 1e-15);
  }
  SUBCASE("scaled reference multiplies the target norm by the coefficient") {
    std::vector<double> r = balance_mask_gradients(task, gap, res, 5.0, BalanceReference::scaled);
    CHECK(std::abs(r[0] - (5.0 * inv_sqrt2 + 3.0)) < 1e-12);
    CHECK(std::abs(r[1] - (5.0 * inv_sqrt2 + 4.0)) < 1e-12);
  }
}

TEST_CASE("balanced performance component has exactly the resource norm") {
  Rng rng(104);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> task(8), gap(8), res(8);
    for (std::size_t i = 0; i < 8; ++i) {
      task[i] = -1.0 + 2.0 * rng.next_double();
      gap[i] = -1.0 + 2.0 * rng.next_double();
      res[i] = -1.0 + 2.0 * rng.next_double();
    }
    std::vector<double> out = balance_mask_gradients(task, gap, res, 5.0);
    double res_norm = 0.0, perf_norm = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      res_norm += res[i] * res[i];
      const double perf = out[i] - 5.0 * res[i];
      perf_norm += perf * perf;
    }
    CHECK(std::abs(std::sqrt(perf_norm) - std::sqrt(res_norm)) < 1e-12);
  }
}

TEST_CASE("sgd momentum step examples") {
  std::vector<double> v;
  Tensor p = Tensor::leaf({1}, {1.0});
  sgd_momentum_step(p, std::vector<double>{0.5}, v, 0.1, 0.0, 0.0);
  CHECK(p.values()[0] == doctest::Approx(0.95).epsilon(1e-15));

  Tensor q = Tensor::leaf({1}, {1.0});
  std::vector<double> vq;
  sgd_momentum_step(q, std::vector<double>{0.0}, vq, 0.1, 0.0, 0.1);
  CHECK(q.values()[0] == doctest::Approx(0.99).epsilon(1e-15));

  Tensor r = Tensor::leaf({1}, {0.0});
  std::vector<double> vr;
  sgd_momentum_step(r, std::vector<double>{1.0}, vr, 0.1, 0.9, 0.0);
  CHECK(r.values()[0] == doctest::Approx(-0.1).epsilon(1e-15));
  sgd_momentum_step(r, std::vector<double>{1.0}, vr, 0.1, 0.9, 0.0);
  CHECK(r.values()[0] == doctest::Approx(-0.29).epsilon(1e-14));
}

TEST_CASE("lr schedule examples") {
  ScheduleConfig cosine;
  CHECK(cosine.at(0, 100, 0.05) == 0.05);
  CHECK(cosine.at(100, 100, 0.05) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine.at(50, 100, 0.05) == doctest::Approx(0.025).epsilon(1e-12));

  ScheduleConfig warm = cosine;
  warm.warmup_frac = 0.1;  // ten warmup epochs out of 100
  CHECK(warm.at(0, 100, 0.05) == doctest::Approx(0.05 / 11.0).epsilon(1e-12));
  CHECK(warm.at(9, 100, 0.05) < 0.05);
  CHECK(warm.at(10, 100, 0.05) == doctest::Approx(cosine.at(10, 100, 0.05)).epsilon(1e-15));

  ScheduleConfig step;
  step.kind = ScheduleKind::step;
  CHECK(step.at(0, 100, 0.1) == 0.1);
  CHECK(step.at(60, 100, 0.1) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(step.at(80, 100, 0.1) == doctest::Approx(0.001).epsilon(1e-15));

  ScheduleConfig bad;
  bad.kind = ScheduleKind::step;
  bad.milestones = {0.75, 0.5};
  bad.factors = {0.1, 0.01};
  CHECK_THROWS_AS((void)bad.at(80, 100, 0.1), ConfigError);
}

TEST_CASE("apply_updates combines the bundle with the documented coefficients") {
  Rng rng(105);
  ModelGraph graph(tiny_spec(), rng);
  graph.refresh_masks();

  PruneRunConfig cfg{.mode = RunMode::s2h, .target = 0.5};
  cfg.optim.momentum = 0.0;
  cfg.optim.weight_decay = 0.0;
  Trainer trainer(graph, cfg);

  GradientBundle bundle;
  std::vector<Tensor> before;
  std::vector<std::vector<double>> task_grads, gap_grads;
  Rng grng(106);
  for (const Tensor& p : graph.theta()) {
    before.push_back(p.clone());
    Tensor tg = random_tensor(p.shape(), grng);
    Tensor gg = random_tensor(p.shape(), grng);
    task_grads.emplace_back(tg.values().begin(), tg.values().end());
    gap_grads.emplace_back(gg.values().begin(), gg.values().end());
    bundle.task_theta.set(p, Tensor::from_values(p.shape(), task_grads.back()));
    bundle.gap_hard_theta.set(p, Tensor::from_values(p.shape(), gap_grads.back()));
  }
  trainer.apply_updates(bundle, 0.1);

  for (std::size_t i = 0; i < graph.theta().size(); ++i) {
    auto now = graph.theta()[i].values();
    auto was = before[i].values();
    for (std::size_t k = 0; k < now.size(); ++k) {
      const double expected = was[k] - 0.1 * (0.5 * task_grads[i][k] + 5.0 * gap_grads[i][k]);
      CHECK(now[k] == doctest::Approx(expected).epsilon(1e-15));
    }
  }
}

TEST_CASE("fixed-group logits never move") {
  Rng rng(107);
  ModelGraph graph(tiny_spec(), rng);
  Trainer trainer(graph, PruneRunConfig{.mode = RunMode::s2h, .target = 0.5});
  const Tensor in_u = graph.group("in").u;
  const Tensor out_u = graph.group("out").u;
  std::vector<double> in_before(in_u.values().begin(), in_u.values().end());
  std::vector<double> out_before(out_u.values().begin(), out_u.values().end());
  for (int step = 0; step < 4; ++step) trainer.prune_step(tiny_batch(rng), 0.05);
  CHECK(bit_equal(in_u.values(), in_before));
  CHECK(bit_equal(out_u.values(), out_before));
}

TEST_CASE("degenerate config reduces to a plain supervised trainer bitwise") {
  ModelSpec spec = tiny_spec();
  spec.fixed_groups = {"in", "h", "out"};  // nothing prunable

  Rng rng_a(108);
  ModelGraph graph(spec, rng_a);
  Rng rng_b(108);
  ModelGraph reference(spec, rng_b);

  PruneRunConfig cfg{.mode = RunMode::s2h, .target = 1.0};
  cfg.task_coef = 1.0;
  cfg.gap_coef = 0.0;
  cfg.toggles.gap_hard_theta = false;
  cfg.toggles.gap_mask = false;
  cfg.optim.momentum = 0.9;
  cfg.optim.weight_decay = 0.001;
  Trainer trainer(graph, cfg);

  // hand-rolled supervised SGD oracle on the reference copy
  std::unordered_map<std::uint64_t, std::vector<double>> velocity;
  Rng data_rng(109);
  for (int step = 0; step < 5; ++step) {
    Batch batch = tiny_batch(data_rng);
    trainer.prune_step(batch, 0.05);

    Tape tape;
    reference.refresh_masks();
    Tensor loss = cross_entropy(reference.forward(batch.x, ForwardMode::soft), batch.y, 0.0);
    GradientMap grads = tape.backward(loss, std::span<const Tensor>(reference.theta()));
    for (const Tensor& p : reference.theta()) {
      sgd_momentum_step(p, grads.get(p).values(), velocity[p.id()], 0.05, 0.9, 0.001);
    }
  }
  for (std::size_t i = 0; i < graph.theta().size(); ++i) {
    CHECK(bit_equal(graph.theta()[i].values(), reference.theta()[i].values()));
  }
}

TEST_CASE("soft_only and alt modes populate the expected bundle slots") {
  Rng rng(110);
  Batch batch = tiny_batch(rng);

  ModelGraph soft_graph(tiny_spec(), rng);
  Trainer soft_trainer(soft_graph, PruneRunConfig{.mode = RunMode::soft_only, .target = 0.5});
  auto [sl, sb] = soft_trainer.step_gradients(batch);
  CHECK(sb.gap_hard_theta.empty());
  CHECK(sb.gap_mask.empty());
  CHECK(sb.task_theta.size() == soft_graph.theta().size());
  CHECK_FALSE(sb.resource_mask.empty());

  ModelGraph alt1_graph(tiny_spec(), rng);
  PruneRunConfig alt1_cfg{.mode = RunMode::alt1, .target = 0.5};
  alt1_cfg.label_smoothing = 0.1;  // the parser's alt1 default
  Trainer alt1_trainer(alt1_graph, alt1_cfg);
  auto [l1, b1] = alt1_trainer.step_gradients(batch);
  CHECK(b1.gap_hard_theta.empty());
  CHECK(b1.gap_mask.empty());
  // theta gradient comes from the hard network's own cross entropy
  alt1_graph.refresh_masks();
  auto hard_ce = [&]() {
    alt1_graph.refresh_masks();
    return cross_entropy(alt1_graph.forward(batch.x, ForwardMode::hard), batch.y, 0.1).item();
  };
  for (const Tensor& p : alt1_graph.theta()) {
    CHECK(max_rel_err(b1.task_theta.get(p).values(), fd_gradient(hard_ce, p)) < 1e-5);
  }

  ModelGraph alt2_graph(tiny_spec(), rng);
  Trainer alt2_trainer(alt2_graph, PruneRunConfig{.mode = RunMode::alt2, .target = 0.5});
  auto [l2, b2] = alt2_trainer.step_gradients(batch);
  CHECK_FALSE(b2.gap_hard_theta.empty());
  CHECK(b2.gap_mask.empty());
  CHECK(b2.gap_soft_theta.empty());
}

TEST_CASE("budget-gated sharpening locks the hard mask onto the soft count") {
  TrainVal data = gen_synthetic(SyntheticKind::blobs, 400, 2, 0.5, 9);
  ModelSpec spec = tiny_spec();
  spec.input_shape = {2};
  spec.layers[0].out = 8;

  PruneRunConfig cfg{.mode = RunMode::s2h, .target = 0.5};
  cfg.epochs = 60;
  cfg.batch_size = 32;
  cfg.mask_sharpen = 0.3;
  cfg.mask_sharpen_gate = 0.02;
  cfg.schedule.warmup_frac = 0.05;

  Rng rng(77);
  ModelGraph graph(spec, rng);
  Trainer trainer(graph, cfg);
  RunResult result = trainer.run(data);

  const GroupMask& h = graph.group("h");
  const double count = h.count_soft.item();
  CHECK(h.retained == static_cast<std::size_t>(std::lround(count)));
  CHECK(std::abs(count - std::lround(count)) < 0.05);  // mass concentrated on the lattice
  CHECK(std::abs(result.trajectory.back().flops_hard -
                 result.trajectory.back().flops_soft) < 0.02);
}

TEST_CASE("runs are bit-reproducible under a fixed config and seed") {
  TrainVal data = gen_synthetic(SyntheticKind::blobs, 120, 2, 0.6, 5);
  ModelSpec spec = tiny_spec();
  spec.input_shape = {2};
  spec.layers[0].out = 4;

  PruneRunConfig cfg{.mode = RunMode::s2h, .target = 0.6};
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.seed = 7;

  auto run_once = [&]() {
    Rng rng(42);
    ModelGraph graph(spec, rng);
    Trainer trainer(graph, cfg);
    return trajectory_to_csv(trainer.run(data).trajectory);
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("infeasible targets are rejected before training") {
  TrainVal data = gen_synthetic(SyntheticKind::blobs, 60, 2, 0.6, 5);
  ModelSpec spec = tiny_spec();
  spec.input_shape = {2};

  Rng rng(43);
  ModelGraph graph(spec, rng);
  // minimum ratio with one retained channel: (2*1 + 1*2) / (2*4 + 4*2) = 0.25
  PruneRunConfig cfg{.mode = RunMode::s2h, .target = 0.2};
  cfg.epochs = 1;
  Trainer trainer(graph, cfg);
  CHECK_THROWS_AS((void)trainer.run(data), ConfigError);
}

TEST_CASE("non-finite losses abort the step with context") {
  TrainVal data = gen_synthetic(SyntheticKind::blobs, 60, 2, 0.6, 5);
  ModelSpec spec = tiny_spec();
  spec.input_shape = {2};

  Rng rng(44);
  ModelGraph graph(spec, rng);
  PruneRunConfig cfg{.mode = RunMode::s2h, .target = 0.6};
  cfg.epochs = 2;
  cfg.optim.lr = 1e150;  // blows parameters up within a couple of steps
  Trainer trainer(graph, cfg);
  CHECK_THROWS_WITH_AS((void)trainer.run(data), doctest::Contains("step aborted"), NumericError);
}

TEST_SUITE_END();
