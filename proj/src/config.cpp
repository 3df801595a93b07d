#include "s2h/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace s2h {

namespace {

using nlohmann::json;

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

const std::map<std::string, std::string>& key_aliases() {
  static const std::map<std::string, std::string> aliases = {
      {"flop_target", "T"},  {"flops_target", "T"}, {"target", "T"},
      {"budget", "T"},       {"flops", "T"},        {"learning_rate", "lr"},
      {"wd", "weight_decay"}};
  return aliases;
}

// Object wrapper that tracks the schema keys touched during parsing and
// rejects everything else, suggesting the intended key when one is obvious.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("type error at " + path_ + ": expected an object");
  }

  bool has(const std::string& key) {
    declared_.insert(key);
    return j_.contains(key);
  }

  const json& raw(const std::string& key) {
    mark(key);
    return j_.at(key);
  }

  std::string str(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_string()) throw ConfigError("type error at " + at(key) + ": expected a string");
    return v.get<std::string>();
  }
  std::string str_or(const std::string& key, const std::string& fallback) {
    return has(key) ? str(key) : fallback;
  }

  double number(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number()) throw ConfigError("type error at " + at(key) + ": expected a number");
    return v.get<double>();
  }
  double number_or(const std::string& key, double fallback) {
    return has(key) ? number(key) : fallback;
  }

  std::size_t uint(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number_unsigned()) {
      throw ConfigError("type error at " + at(key) + ": expected an unsigned integer");
    }
    return v.get<std::size_t>();
  }
  std::size_t uint_or(const std::string& key, std::size_t fallback) {
    return has(key) ? uint(key) : fallback;
  }

  bool boolean(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_boolean()) throw ConfigError("type error at " + at(key) + ": expected a boolean");
    return v.get<bool>();
  }
  bool boolean_or(const std::string& key, bool fallback) {
    return has(key) ? boolean(key) : fallback;
  }

  const json& array(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) throw ConfigError("type error at " + at(key) + ": expected an array");
    return v;
  }

  Section object(const std::string& key) { return Section(raw(key), at(key)); }

  std::string at(const std::string& key) const { return path_ + "." + key; }
  const std::string& path() const { return path_; }

  // Call after all expected keys were pulled; any leftovers are schema errors.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (consumed_.count(it.key())) continue;
      std::string message = "unknown key at " + at(it.key());
      const std::string best = suggestion(it.key());
      if (!best.empty()) message += " (did you mean '" + best + "'?)";
      throw ConfigError(message);
    }
  }

 private:
  std::string suggestion(const std::string& key) const {
    auto alias = key_aliases().find(key);
    if (alias != key_aliases().end() && declared_.count(alias->second)) return alias->second;
    std::string best;
    std::size_t best_d = 3;
    for (const std::string& k : declared_) {
      const std::size_t d = edit_distance(key, k);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  }

  void mark(const std::string& key) {
    declared_.insert(key);
    if (!j_.contains(key)) {
      // A present unknown key that clearly aliases the missing one gives a
      // more actionable diagnostic than "missing key".
      for (auto it = j_.begin(); it != j_.end(); ++it) {
        if (declared_.count(it.key())) continue;
        auto alias = key_aliases().find(it.key());
        const bool aliased = alias != key_aliases().end() && alias->second == key;
        const bool near_miss = key.size() >= 4 && edit_distance(it.key(), key) <= 2;
        if (aliased || near_miss) {
          throw ConfigError("unknown key at " + at(it.key()) + " (did you mean '" + key + "'?)");
        }
      }
      throw ConfigError("missing key " + at(key));
    }
    consumed_.insert(key);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> consumed_;
  std::set<std::string> declared_;
};

Shape parse_shape(const json& arr, const std::string& path) {
  Shape shape;
  for (const auto& v : arr) {
    if (!v.is_number_unsigned() || v.get<std::size_t>() == 0) {
      throw ConfigError("range error at " + path + ": extents must be positive integers");
    }
    shape.push_back(v.get<std::size_t>());
  }
  if (shape.empty()) throw ConfigError("range error at " + path + ": shape must be non-empty");
  return shape;
}

ModelSpec parse_model(Section model) {
  ModelSpec spec;
  {
    Section input = model.object("input");
    spec.input_shape = parse_shape(input.array("shape"), input.at("shape"));
    spec.input_group = input.str("group");
    input.finish();
  }
  {
    Section output = model.object("output");
    spec.classes = output.uint("classes");
    if (spec.classes < 2) {
      throw ConfigError("range error at " + output.at("classes") + ": need at least 2 classes");
    }
    spec.output_group = output.str("group");
    output.finish();
  }
  for (const auto& g : model.array("fixed_groups")) {
    if (!g.is_string()) {
      throw ConfigError("type error at " + model.at("fixed_groups") + ": expected strings");
    }
    spec.fixed_groups.push_back(g.get<std::string>());
  }

  const json& layers = model.array("layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Section layer(layers[i], model.at("layers") + "[" + std::to_string(i) + "]");
    LayerSpec l;
    l.id = layer.str("id");
    l.kind = layer.str("kind");
    for (const auto& in : layer.array("inputs")) {
      if (!in.is_string()) {
        throw ConfigError("type error at " + layer.at("inputs") + ": expected strings");
      }
      l.inputs.push_back(in.get<std::string>());
    }
    if (l.kind == "linear" || l.kind == "conv") {
      l.out = layer.uint("out");
      l.group = layer.str("group");
    }
    if (l.kind == "conv") {
      const json& kernel = layer.array("kernel");
      if (kernel.size() != 2 || !kernel[0].is_number_unsigned() || !kernel[1].is_number_unsigned()) {
        throw ConfigError("type error at " + layer.at("kernel") + ": expected [kh, kw]");
      }
      l.kh = kernel[0].get<std::size_t>();
      l.kw = kernel[1].get<std::size_t>();
      l.stride = layer.uint_or("stride", 1);
      l.pad = layer.uint_or("pad", 0);
      if (l.stride != 1 && l.stride != 2) {
        throw ConfigError("range error at " + layer.at("stride") + ": stride must be 1 or 2");
      }
    }
    layer.finish();
    spec.layers.push_back(std::move(l));
  }
  model.finish();
  return spec;
}

DatasetSpec parse_dataset(Section ds) {
  DatasetSpec spec;
  spec.kind = ds.str("kind");
  if (spec.kind == "blobs" || spec.kind == "spirals") {
    spec.n = ds.uint_or("n", spec.n);
    spec.classes = ds.uint_or("classes", spec.classes);
    spec.noise = ds.number_or("noise", spec.noise);
    spec.seed = ds.uint_or("seed", spec.seed);
    if (spec.classes == 0 || spec.n < spec.classes) {
      throw ConfigError("range error at " + ds.path() + ": need n >= classes >= 1");
    }
    if (spec.noise < 0.0) {
      throw ConfigError("range error at " + ds.at("noise") + ": noise must be >= 0");
    }
  } else if (spec.kind == "idx") {
    spec.images = ds.str("images");
    spec.labels = ds.str("labels");
    spec.seed = ds.uint_or("seed", spec.seed);
  } else if (spec.kind == "csv") {
    spec.path = ds.str("path");
    spec.seed = ds.uint_or("seed", spec.seed);
  } else {
    throw ConfigError("range error at " + ds.at("kind") + ": expected blobs|spirals|idx|csv, got '" +
                      spec.kind + "'");
  }
  ds.finish();
  return spec;
}

PruneRunConfig parse_prune(Section prune, std::uint64_t run_seed) {
  PruneRunConfig cfg;
  cfg.seed = run_seed;
  cfg.mode = parse_run_mode(prune.str_or("mode", "s2h"));

  const double target = prune.number("T");
  if (!(target > 0.0 && target <= 1.0)) {
    std::ostringstream os;
    os << "range error at " << prune.at("T") << ": expected T in (0,1], got " << target;
    throw ConfigError(os.str());
  }
  cfg.target = target;

  cfg.task_coef = prune.number_or("task_coef", cfg.task_coef);
  cfg.gap_coef = prune.number_or("gap_coef", cfg.gap_coef);
  cfg.resource_coef = prune.number_or("resource_coef", cfg.resource_coef);
  if (cfg.task_coef < 0.0 || cfg.gap_coef < 0.0 || cfg.resource_coef < 0.0) {
    throw ConfigError("range error at " + prune.path() + ": coefficients must be >= 0");
  }

  cfg.label_smoothing = prune.number_or("label_smoothing", cfg.mode == RunMode::alt1 ? 0.1 : 0.0);
  if (cfg.label_smoothing < 0.0 || cfg.label_smoothing >= 1.0) {
    throw ConfigError("range error at " + prune.at("label_smoothing") + ": expected [0,1)");
  }

  cfg.epochs = prune.uint_or("epochs", cfg.epochs);
  cfg.batch_size = prune.uint_or("batch_size", cfg.batch_size);
  if (cfg.epochs == 0) throw ConfigError("range error at " + prune.at("epochs") + ": need >= 1");
  if (cfg.batch_size == 0) {
    throw ConfigError("range error at " + prune.at("batch_size") + ": need >= 1");
  }

  if (prune.has("optimizer")) {
    Section opt = prune.object("optimizer");
    cfg.optim.lr = opt.number_or("lr", cfg.optim.lr);
    cfg.optim.momentum = opt.number_or("momentum", cfg.optim.momentum);
    cfg.optim.weight_decay = opt.number_or("weight_decay", cfg.optim.weight_decay);
    cfg.optim.u_lr_scale = opt.number_or("u_lr_scale", cfg.optim.u_lr_scale);
    cfg.optim.u_weight_decay = opt.number_or("u_weight_decay", cfg.optim.u_weight_decay);
    if (cfg.optim.lr <= 0.0) throw ConfigError("range error at " + opt.at("lr") + ": need > 0");
    opt.finish();
  }

  if (prune.has("schedule")) {
    Section sched = prune.object("schedule");
    cfg.schedule.warmup_frac = sched.number_or("warmup_frac", cfg.schedule.warmup_frac);
    if (cfg.schedule.warmup_frac < 0.0 || cfg.schedule.warmup_frac >= 1.0) {
      throw ConfigError("range error at " + sched.at("warmup_frac") + ": expected [0,1)");
    }
    const std::string kind = sched.str("kind");
    if (kind == "cosine") {
      cfg.schedule.kind = ScheduleKind::cosine;
    } else if (kind == "step") {
      cfg.schedule.kind = ScheduleKind::step;
      if (sched.has("milestones") != sched.has("factors")) {
        throw ConfigError("config error at " + sched.path() +
                          ": milestones and factors must be given together");
      }
      if (sched.has("milestones")) {
        cfg.schedule.milestones.clear();
        cfg.schedule.factors.clear();
        for (const auto& m : sched.array("milestones")) {
          if (!m.is_number()) {
            throw ConfigError("type error at " + sched.at("milestones") + ": expected numbers");
          }
          cfg.schedule.milestones.push_back(m.get<double>());
        }
        for (const auto& f : sched.array("factors")) {
          if (!f.is_number()) {
            throw ConfigError("type error at " + sched.at("factors") + ": expected numbers");
          }
          cfg.schedule.factors.push_back(f.get<double>());
        }
        if (cfg.schedule.milestones.size() != cfg.schedule.factors.size()) {
          throw ConfigError("config error at " + sched.path() +
                            ": milestones and factors differ in length");
        }
        double prev = 0.0;
        for (double m : cfg.schedule.milestones) {
          if (m <= prev || m >= 1.0) {
            throw ConfigError("range error at " + sched.at("milestones") +
                              ": expected strictly increasing fractions in (0,1)");
          }
          prev = m;
        }
      }
    } else {
      throw ConfigError("range error at " + sched.at("kind") + ": expected cosine|step");
    }
    sched.finish();
  }

  if (prune.has("toggles")) {
    Section tog = prune.object("toggles");
    cfg.toggles.task_theta = tog.boolean_or("task_theta", cfg.toggles.task_theta);
    cfg.toggles.gap_hard_theta = tog.boolean_or("gap_hard_theta", cfg.toggles.gap_hard_theta);
    cfg.toggles.gap_soft_theta = tog.boolean_or("gap_soft_theta", cfg.toggles.gap_soft_theta);
    cfg.toggles.task_mask = tog.boolean_or("task_mask", cfg.toggles.task_mask);
    cfg.toggles.gap_mask = tog.boolean_or("gap_mask", cfg.toggles.gap_mask);
    tog.finish();
  }

  {
    const std::string dir = prune.str_or("gap_direction", "soft_teacher");
    if (dir == "soft_teacher") {
      cfg.gap_direction = GapDirection::soft_teacher;
    } else if (dir == "hard_teacher") {
      cfg.gap_direction = GapDirection::hard_teacher;
    } else {
      throw ConfigError("range error at " + prune.at("gap_direction") +
                        ": expected soft_teacher|hard_teacher");
    }
  }
  cfg.gap_temperature = prune.number_or("gap_temperature", cfg.gap_temperature);
  if (cfg.gap_temperature <= 0.0) {
    throw ConfigError("range error at " + prune.at("gap_temperature") + ": need > 0");
  }

  {
    const std::string ref = prune.str_or("balance_reference", "raw");
    if (ref == "raw") {
      cfg.balance_reference = BalanceReference::raw;
    } else if (ref == "scaled") {
      cfg.balance_reference = BalanceReference::scaled;
    } else {
      throw ConfigError("range error at " + prune.at("balance_reference") + ": expected raw|scaled");
    }
  }
  {
    const std::string scope = prune.str_or("balance_scope", "global");
    if (scope == "global") {
      cfg.balance_scope = BalanceScope::global;
    } else if (scope == "per_group") {
      cfg.balance_scope = BalanceScope::per_group;
    } else {
      throw ConfigError("range error at " + prune.at("balance_scope") +
                        ": expected global|per_group");
    }
  }

  cfg.mask_sharpen = prune.number_or("mask_sharpen", cfg.mask_sharpen);
  cfg.mask_sharpen_gate = prune.number_or("mask_sharpen_gate", cfg.mask_sharpen_gate);
  cfg.mask_sharpen_start = prune.number_or("mask_sharpen_start", cfg.mask_sharpen_start);
  if (cfg.mask_sharpen < 0.0 || cfg.mask_sharpen_gate < 0.0) {
    throw ConfigError("range error at " + prune.path() + ": mask_sharpen settings must be >= 0");
  }
  cfg.finetune_lr_scale = prune.number_or("finetune_lr_scale", cfg.finetune_lr_scale);
  cfg.source_checkpoint = prune.str_or("source_checkpoint", "");
  cfg.checkpoint_every = prune.uint_or("checkpoint_every", 0);
  cfg.random_tol = prune.number_or("random_tol", cfg.random_tol);
  if (cfg.random_tol < 0.0) {
    throw ConfigError("range error at " + prune.at("random_tol") + ": need >= 0");
  }
  if (cfg.mode == RunMode::finetune && cfg.source_checkpoint.empty()) {
    throw ConfigError("config error at " + prune.path() +
                      ": finetune mode requires source_checkpoint");
  }
  prune.finish();
  return cfg;
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  json root_json;
  try {
    root_json = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse '" + origin + "': " + e.what());
  }
  Section root(root_json, "$");
  RunConfig cfg;
  cfg.seed = root.uint_or("seed", 1);
  cfg.model = parse_model(root.object("model"));
  cfg.dataset = parse_dataset(root.object("dataset"));
  cfg.prune = parse_prune(root.object("prune"), cfg.seed);
  cfg.out_dir = root.str_or("out_dir", "out");
  root.finish();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str(), path);
}

namespace {

json model_to_json_obj(const ModelSpec& spec) {
  json model;
  model["input"] = {{"shape", spec.input_shape}, {"group", spec.input_group}};
  model["output"] = {{"classes", spec.classes}, {"group", spec.output_group}};
  model["fixed_groups"] = spec.fixed_groups;
  json layers = json::array();
  for (const LayerSpec& l : spec.layers) {
    json layer;
    layer["id"] = l.id;
    layer["kind"] = l.kind;
    layer["inputs"] = l.inputs;
    if (l.kind == "linear" || l.kind == "conv") {
      layer["out"] = l.out;
      layer["group"] = l.group;
    }
    if (l.kind == "conv") {
      layer["kernel"] = {l.kh, l.kw};
      layer["stride"] = l.stride;
      layer["pad"] = l.pad;
    }
    layers.push_back(layer);
  }
  model["layers"] = layers;
  return model;
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) { return model_to_json_obj(spec).dump(); }

ModelSpec model_spec_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("cannot parse embedded model spec: ") + e.what());
  }
  return parse_model(Section(j, "$.model"));
}

std::string config_to_json(const RunConfig& cfg) {
  json root;
  root["seed"] = cfg.seed;
  root["out_dir"] = cfg.out_dir;
  root["model"] = model_to_json_obj(cfg.model);

  json ds;
  ds["kind"] = cfg.dataset.kind;
  if (cfg.dataset.kind == "blobs" || cfg.dataset.kind == "spirals") {
    ds["n"] = cfg.dataset.n;
    ds["classes"] = cfg.dataset.classes;
    ds["noise"] = cfg.dataset.noise;
  } else if (cfg.dataset.kind == "idx") {
    ds["images"] = cfg.dataset.images;
    ds["labels"] = cfg.dataset.labels;
  } else {
    ds["path"] = cfg.dataset.path;
  }
  ds["seed"] = cfg.dataset.seed;
  root["dataset"] = ds;

  const PruneRunConfig& p = cfg.prune;
  json prune;
  prune["mode"] = run_mode_name(p.mode);
  prune["T"] = p.target;
  prune["task_coef"] = p.task_coef;
  prune["gap_coef"] = p.gap_coef;
  prune["resource_coef"] = p.resource_coef;
  prune["label_smoothing"] = p.label_smoothing;
  prune["epochs"] = p.epochs;
  prune["batch_size"] = p.batch_size;
  prune["optimizer"] = {{"lr", p.optim.lr},
                        {"momentum", p.optim.momentum},
                        {"weight_decay", p.optim.weight_decay},
                        {"u_lr_scale", p.optim.u_lr_scale},
                        {"u_weight_decay", p.optim.u_weight_decay}};
  json sched;
  sched["kind"] = p.schedule.kind == ScheduleKind::cosine ? "cosine" : "step";
  sched["warmup_frac"] = p.schedule.warmup_frac;
  if (p.schedule.kind == ScheduleKind::step) {
    sched["milestones"] = p.schedule.milestones;
    sched["factors"] = p.schedule.factors;
  }
  prune["schedule"] = sched;
  prune["toggles"] = {{"task_theta", p.toggles.task_theta},
                      {"gap_hard_theta", p.toggles.gap_hard_theta},
                      {"gap_soft_theta", p.toggles.gap_soft_theta},
                      {"task_mask", p.toggles.task_mask},
                      {"gap_mask", p.toggles.gap_mask}};
  prune["gap_direction"] =
      p.gap_direction == GapDirection::soft_teacher ? "soft_teacher" : "hard_teacher";
  prune["gap_temperature"] = p.gap_temperature;
  prune["balance_reference"] = p.balance_reference == BalanceReference::raw ? "raw" : "scaled";
  prune["balance_scope"] = p.balance_scope == BalanceScope::global ? "global" : "per_group";
  prune["mask_sharpen"] = p.mask_sharpen;
  prune["mask_sharpen_gate"] = p.mask_sharpen_gate;
  prune["mask_sharpen_start"] = p.mask_sharpen_start;
  prune["finetune_lr_scale"] = p.finetune_lr_scale;
  if (!p.source_checkpoint.empty()) prune["source_checkpoint"] = p.source_checkpoint;
  prune["checkpoint_every"] = p.checkpoint_every;
  prune["random_tol"] = p.random_tol;
  root["prune"] = prune;
  return root.dump(2);
}

TrainVal load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "blobs" || spec.kind == "spirals") {
    return gen_synthetic(spec.kind == "blobs" ? SyntheticKind::blobs : SyntheticKind::spirals,
                         spec.n, spec.classes, spec.noise, spec.seed);
  }

  Dataset full = spec.kind == "idx" ? load_idx(spec.images, spec.labels) : load_csv(spec.path);
  // Seeded 80/20 split, same discipline as the synthetic path.
  const std::size_t n = full.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(spec.seed).split(2);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_range(i));
    std::swap(order[i - 1], order[j]);
  }
  const std::size_t n_train = (n * 8) / 10;

  auto subset = [&](std::size_t begin, std::size_t end, const char* tag) {
    Dataset ds;
    std::span<const std::size_t> slice(order.data() + begin, end - begin);
    ds.features = full.gather_features(slice);
    ds.labels = full.gather_labels(slice);
    ds.num_classes = full.num_classes;
    ds.split = tag;
    ds.provenance = full.provenance;
    return ds;
  };
  TrainVal tv;
  tv.train = subset(0, n_train, "train");
  tv.val = subset(n_train, n, "val");
  return tv;
}

}  // namespace s2h
