#include "s2h/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "s2h/checkpoint.hpp"
#include "s2h/fsio.hpp"
#include "s2h/trajectory.hpp"

namespace s2h {

namespace {

using nlohmann::json;

constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kBaselineStream = 13;

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

RunConfig load_run_config(const CliOptions& options) {
  if (options.config_path.empty()) throw ConfigError("--config is required");
  RunConfig cfg = parse_config(options.config_path);
  if (const char* env_out = std::getenv("S2HPRUNE_OUT")) cfg.out_dir = env_out;
  if (options.seed_override) {
    cfg.seed = *options.seed_override;
    cfg.prune.seed = *options.seed_override;
  }
  return cfg;
}

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string gap_report_json(const RunConfig& cfg, const GapReport& gap) {
  json report;
  report["js"] = gap.js;
  report["l2"] = gap.l2;
  report["soft_top1"] = gap.soft_top1;
  report["hard_top1"] = gap.hard_top1;
  report["samples"] = gap.samples;
  std::string reference = "soft";
  if (cfg.prune.mode == RunMode::alt1) reference = "smoothed_labels";
  if (cfg.prune.mode == RunMode::alt2) reference = "full";
  report["metadata"] = {
      {"mode", run_mode_name(cfg.prune.mode)},
      {"reference", reference},
      {"gap_direction",
       cfg.prune.gap_direction == GapDirection::soft_teacher ? "soft_teacher" : "hard_teacher"},
      {"gap_temperature", cfg.prune.gap_temperature},
      {"l2_space", "probability"},
      {"log_base", "e"}};
  return report.dump(2);
}

CheckpointMeta make_meta(const RunConfig& cfg, std::size_t epoch) {
  CheckpointMeta meta;
  meta.epoch = epoch;
  meta.rng_seed = cfg.seed;
  meta.rng_counter = 0;
  meta.config_echo = config_to_json(cfg);
  return meta;
}

int run_prune(const CliOptions& options, std::ostream& out) {
  RunConfig cfg = load_run_config(options);
  ensure_out_dir(cfg.out_dir);
  TrainVal data = load_dataset(cfg.dataset);
  const std::string expected_hash = model_hash_hex(cfg.model);

  Rng init_rng = Rng(cfg.seed).split(kInitStream);
  ModelGraph graph(cfg.model, init_rng);
  Trainer trainer(graph, cfg.prune);

  if (cfg.prune.mode == RunMode::finetune) {
    // Source parameters only; a fine-tuning stage starts its own optimizer.
    load_checkpoint(cfg.prune.source_checkpoint, graph, nullptr, expected_hash);
  }
  if (!options.checkpoint.empty()) {
    CheckpointMeta meta = load_checkpoint(options.checkpoint, graph, &trainer.optimizer(), expected_hash);
    trainer.set_start_epoch(meta.epoch);
    out << "resumed from '" << options.checkpoint << "' at epoch " << meta.epoch << "\n";
  }

  const auto hook = [&](std::size_t epoch, const std::vector<TrajectoryRecord>&) {
    const bool last = epoch == cfg.prune.epochs;
    if (!last && (cfg.prune.checkpoint_every == 0 || epoch % cfg.prune.checkpoint_every != 0)) {
      return;
    }
    save_checkpoint(join(cfg.out_dir, "epoch_" + std::to_string(epoch) + ".ckpt"), graph,
                    &trainer.optimizer(), make_meta(cfg, epoch));
  };

  RunResult result = trainer.run(data, hook);

  save_checkpoint(join(cfg.out_dir, "final.ckpt"), graph, &trainer.optimizer(),
                  make_meta(cfg, cfg.prune.epochs));
  write_trajectory(result.trajectory, join(cfg.out_dir, "trajectory.csv"));
  write_file_atomic(join(cfg.out_dir, "gap_report.json"), gap_report_json(cfg, result.final_gap));

  const TrajectoryRecord& last = result.trajectory.back();
  out << "prune finished: epochs=" << cfg.prune.epochs << " hard_top1=" << last.hard_top1
      << " soft_top1=" << last.soft_top1 << " flops_hard=" << last.flops_hard << "\n";
  out << "artifacts in " << cfg.out_dir << ": trajectory.csv final.ckpt gap_report.json\n";
  return 0;
}

int run_eval(const CliOptions& options, std::ostream& out) {
  RunConfig cfg = load_run_config(options);
  if (options.checkpoint.empty()) throw ConfigError("eval requires --resume <checkpoint>");
  TrainVal data = load_dataset(cfg.dataset);

  ModelGraph graph;
  load_checkpoint(options.checkpoint, graph, nullptr);
  EvalMetrics m = evaluate(graph, data.val, cfg.prune);

  json report;
  report["checkpoint"] = options.checkpoint;
  report["soft_top1"] = m.soft_top1;
  report["hard_top1"] = m.hard_top1;
  report["js"] = m.js;
  report["l2"] = m.l2;
  report["flops_hard_ratio"] = m.flops_hard_ratio;
  report["flops_soft_ratio"] = m.flops_soft_ratio;
  report["samples"] = m.samples;
  out << report.dump(2) << "\n";
  return 0;
}

int run_export(const CliOptions& options, std::ostream& out) {
  RunConfig cfg = load_run_config(options);
  if (options.checkpoint.empty()) throw ConfigError("export requires --resume <checkpoint>");
  ensure_out_dir(cfg.out_dir);

  ModelGraph graph;
  load_checkpoint(options.checkpoint, graph, nullptr);
  graph.refresh_masks();
  CompactModel compact = graph.export_compact();

  CheckpointMeta meta = make_meta(cfg, 0);
  json extra;
  extra["source_hash"] = compact.source_hash;
  extra["source_checkpoint"] = options.checkpoint;
  extra["retained"] = compact.retained;
  meta.extra = extra.dump();
  const std::string path = join(cfg.out_dir, "compact.ckpt");
  save_checkpoint(path, compact.graph, nullptr, meta);

  out << "exported compact model to " << path
      << " (flops_ratio=" << compact.graph.flops(ForwardMode::full) / graph.flops(ForwardMode::full)
      << ")\n";
  return 0;
}

int run_random_baseline(const CliOptions& options, std::ostream& out) {
  RunConfig cfg = load_run_config(options);
  ensure_out_dir(cfg.out_dir);
  TrainVal data = load_dataset(cfg.dataset);

  Rng init_rng = Rng(cfg.seed).split(kInitStream);
  ModelGraph graph(cfg.model, init_rng);
  graph.require_valid();
  graph.refresh_masks();

  const std::uint64_t mask_seed = Rng(cfg.seed).split(kBaselineStream).next_u64();
  const auto assignment = graph.random_prefix_masks(cfg.prune.target, cfg.prune.random_tol, mask_seed);
  graph.apply_prefix_masks(assignment);

  json masks;
  for (const auto& [name, k] : assignment) masks[name] = k;
  json report;
  report["target"] = cfg.prune.target;
  report["tolerance"] = cfg.prune.random_tol;
  report["ratio"] = graph.flops_ratio_with(assignment);
  report["masks"] = masks;
  write_file_atomic(join(cfg.out_dir, "baseline_masks.json"), report.dump(2));

  // Fresh parameters for the sampled architecture, then plain supervised
  // training of the compact network.
  ModelSpec compact_spec = graph.export_compact().graph.spec();
  Rng compact_rng = Rng(cfg.seed).split(kInitStream + 1);
  ModelGraph compact(compact_spec, compact_rng);

  PruneRunConfig train_cfg = cfg.prune;
  train_cfg.mode = RunMode::soft_only;
  train_cfg.task_coef = 1.0;
  train_cfg.target = 1.0;

  RunConfig echo_cfg = cfg;
  echo_cfg.model = compact_spec;
  echo_cfg.prune = train_cfg;

  Trainer trainer(compact, train_cfg);
  RunResult result = trainer.run(data);
  CheckpointMeta meta;
  meta.epoch = train_cfg.epochs;
  meta.rng_seed = cfg.seed;
  meta.config_echo = config_to_json(echo_cfg);
  save_checkpoint(join(cfg.out_dir, "baseline_final.ckpt"), compact, &trainer.optimizer(), meta);
  write_trajectory(result.trajectory, join(cfg.out_dir, "baseline_trajectory.csv"));

  out << "random baseline: ratio=" << report["ratio"].get<double>()
      << " top1=" << result.trajectory.back().hard_top1 << "\n";
  return 0;
}

}  // namespace

int dispatch(const CliOptions& options, std::ostream& out, std::ostream& err) {
  try {
    if (options.command == "prune") return run_prune(options, out);
    if (options.command == "eval") return run_eval(options, out);
    if (options.command == "export") return run_export(options, out);
    if (options.command == "random-baseline") return run_random_baseline(options, out);
    throw ConfigError("unknown command '" + options.command + "'");
  } catch (const Error& e) {
    err << "error:" << e.category() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error:internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace s2h
