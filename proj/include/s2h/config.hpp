#pragma once

#include <string>

#include "s2h/data.hpp"
#include "s2h/model_graph.hpp"
#include "s2h/pruner.hpp"

namespace s2h {

struct DatasetSpec {
  std::string kind = "blobs";  // blobs | spirals | idx | csv
  std::size_t n = 3000;
  std::size_t classes = 3;
  double noise = 0.5;
  std::uint64_t seed = 1;
  std::string images;  // idx
  std::string labels;  // idx
  std::string path;    // csv
};

struct RunConfig {
  ModelSpec model;
  DatasetSpec dataset;
  PruneRunConfig prune;
  std::string out_dir = "out";
  std::uint64_t seed = 1;
};

// Strict parse: unknown keys are rejected with their JSON path (and a
// suggestion when one is obvious), defaults documented in the README are
// applied, cross-field rules checked. T feasibility stays with the trainer.
RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);

// Canonical JSON echo of a fully-defaulted config (stable key order and
// number formatting); embedded in checkpoints and reused by the tests.
std::string config_to_json(const RunConfig& cfg);

std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json_text(const std::string& text);

// Materializes the configured dataset with its train/val split.
TrainVal load_dataset(const DatasetSpec& spec);

}  // namespace s2h
