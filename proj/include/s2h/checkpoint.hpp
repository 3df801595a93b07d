#pragma once

#include <optional>
#include <string>

#include "s2h/model_graph.hpp"
#include "s2h/pruner.hpp"

namespace s2h {

// Container file: magic, little-endian header length, JSON header (format
// version, model spec + hash, epoch, config echo, RNG state, declared tensor
// order), then raw little-endian f64 blobs for every theta leaf, every u and
// the optimizer momentum buffers, in header order. Save -> load -> save is
// byte-identical.
struct CheckpointMeta {
  std::size_t epoch = 0;  // completed epochs
  std::string model_hash;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::string config_echo;      // JSON text
  std::string model_spec_json;  // JSON text
  std::string extra;            // JSON text, optional provenance
};

void save_checkpoint(const std::string& path, const ModelGraph& graph, const SgdMomentum* opt,
                     const CheckpointMeta& meta);

// Rebuilds the model from the embedded spec and restores parameters (and the
// optimizer state when `opt` is given). `expected_model_hash`, when set, must
// match the stored hash; the refusal names both hashes.
CheckpointMeta load_checkpoint(const std::string& path, ModelGraph& graph_out, SgdMomentum* opt,
                               const std::optional<std::string>& expected_model_hash = std::nullopt);

std::string model_hash_hex(const ModelSpec& spec);

}  // namespace s2h
