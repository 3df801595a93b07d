#include "s2h/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include <json.hpp>

#include "s2h/config.hpp"
#include "s2h/fsio.hpp"

namespace s2h {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'S', '2', 'H', 'C', 'K', 'P', 'T', '1'};
constexpr int kVersion = 1;

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// theta leaves then prunable mask logits, in registration order; the
// checkpoint payload and the momentum blobs follow exactly this order.
std::vector<NamedParam> ordered_params(const ModelGraph& graph) {
  std::vector<NamedParam> params;
  for (const LayerNode& n : graph.nodes()) {
    if (n.kind == LayerKind::linear) {
      params.push_back({n.name + ".weight", n.lin.weight});
      params.push_back({n.name + ".bias", n.lin.bias});
    } else if (n.kind == LayerKind::conv) {
      params.push_back({n.name + ".weight", n.conv.weight});
      params.push_back({n.name + ".bias", n.conv.bias});
    }
  }
  for (const GroupMask& g : graph.groups()) {
    if (!g.fixed) params.push_back({"u:" + g.name, g.u});
  }
  return params;
}

void append_blob(std::string& out, std::span<const double> values) {
  const std::size_t offset = out.size();
  out.resize(offset + values.size() * sizeof(double));
  std::memcpy(out.data() + offset, values.data(), values.size() * sizeof(double));
}

}  // namespace

std::string model_hash_hex(const ModelSpec& spec) {
  std::ostringstream os;
  os << std::hex << spec.hash();
  return os.str();
}

void save_checkpoint(const std::string& path, const ModelGraph& graph, const SgdMomentum* opt,
                     const CheckpointMeta& meta) {
  const std::vector<NamedParam> params = ordered_params(graph);

  json header;
  header["version"] = kVersion;
  header["model_hash"] = model_hash_hex(graph.spec());
  header["epoch"] = meta.epoch;
  header["rng"] = {{"seed", meta.rng_seed}, {"counter", meta.rng_counter}};
  header["model_spec"] = json::parse(model_spec_to_json(graph.spec()));
  header["config"] = meta.config_echo.empty() ? json(nullptr) : json::parse(meta.config_echo);
  header["extra"] = meta.extra.empty() ? json(nullptr) : json::parse(meta.extra);

  json tensors = json::array();
  std::string payload;
  for (const NamedParam& p : params) {
    tensors.push_back({{"name", p.name}, {"kind", "param"}, {"shape", p.tensor.shape()}});
    append_blob(payload, p.tensor.values());
  }
  if (opt) {
    for (const NamedParam& p : params) {
      tensors.push_back({{"name", "vel:" + p.name}, {"kind", "velocity"}, {"shape", p.tensor.shape()}});
      auto it = opt->velocity.find(p.tensor.id());
      if (it != opt->velocity.end() && it->second.size() == p.tensor.size()) {
        append_blob(payload, it->second);
      } else {
        append_blob(payload, std::vector<double>(p.tensor.size(), 0.0));
      }
    }
  }
  header["tensors"] = tensors;

  const std::string header_text = header.dump();
  std::string file;
  file.reserve(8 + 8 + header_text.size() + payload.size());
  file.append(kMagic, sizeof(kMagic));
  const std::uint64_t len = header_text.size();
  char len_bytes[8];
  std::memcpy(len_bytes, &len, 8);
  file.append(len_bytes, 8);
  file.append(header_text);
  file.append(payload);
  write_file_atomic(path, file);
}

CheckpointMeta load_checkpoint(const std::string& path, ModelGraph& graph_out, SgdMomentum* opt,
                               const std::optional<std::string>& expected_model_hash) {
  const std::string file = read_file(path);
  if (file.size() < 16 || std::memcmp(file.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint '" + path + "': bad magic");
  }
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, file.data() + 8, 8);
  if (16 + header_len > file.size()) {
    throw FormatError("checkpoint '" + path + "': truncated header");
  }
  json header;
  try {
    header = json::parse(file.substr(16, header_len));
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint '" + path + "': unparsable header: " + e.what());
  }
  if (!header.contains("version") || header["version"].get<int>() != kVersion) {
    throw FormatError("checkpoint '" + path + "': unsupported version");
  }

  CheckpointMeta meta;
  meta.epoch = header.at("epoch").get<std::size_t>();
  meta.model_hash = header.at("model_hash").get<std::string>();
  meta.rng_seed = header.at("rng").at("seed").get<std::uint64_t>();
  meta.rng_counter = header.at("rng").at("counter").get<std::uint64_t>();
  meta.model_spec_json = header.at("model_spec").dump();
  if (!header.at("config").is_null()) meta.config_echo = header.at("config").dump();
  if (!header.at("extra").is_null()) meta.extra = header.at("extra").dump();

  if (expected_model_hash && *expected_model_hash != meta.model_hash) {
    throw FormatError("checkpoint '" + path + "': model hash " + meta.model_hash +
                      " does not match live model " + *expected_model_hash);
  }

  ModelSpec spec = model_spec_from_json_text(meta.model_spec_json);
  if (model_hash_hex(spec) != meta.model_hash) {
    throw FormatError("checkpoint '" + path + "': embedded spec hashes to " + model_hash_hex(spec) +
                      ", header claims " + meta.model_hash);
  }
  Rng throwaway(0);
  graph_out = ModelGraph(spec, throwaway);

  const std::vector<NamedParam> params = ordered_params(graph_out);
  std::map<std::string, Tensor> by_name;
  for (const NamedParam& p : params) by_name.emplace(p.name, p.tensor);

  std::size_t offset = 16 + header_len;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::size_t count = shape_size(shape);
    const std::size_t bytes = count * sizeof(double);
    if (offset + bytes > file.size()) {
      throw FormatError("checkpoint '" + path + "': truncated payload at tensor '" + name + "'");
    }
    std::vector<double> values(count);
    std::memcpy(values.data(), file.data() + offset, bytes);
    offset += bytes;

    const bool is_velocity = name.rfind("vel:", 0) == 0;
    const std::string param_name = is_velocity ? name.substr(4) : name;
    auto it = by_name.find(param_name);
    if (it == by_name.end()) {
      throw FormatError("checkpoint '" + path + "': tensor '" + name + "' not in the model");
    }
    if (it->second.shape() != shape) {
      throw FormatError("checkpoint '" + path + "': tensor '" + name + "' shape " + shape_str(shape) +
                        " does not match model shape " + shape_str(it->second.shape()));
    }
    if (is_velocity) {
      if (opt) opt->velocity[it->second.id()] = std::move(values);
    } else {
      auto dst = it->second.values_mut();
      std::copy(values.begin(), values.end(), dst.begin());
    }
  }
  if (offset != file.size()) {
    throw FormatError("checkpoint '" + path + "': " + std::to_string(file.size() - offset) +
                      " trailing bytes");
  }
  graph_out.refresh_masks();
  return meta;
}

}  // namespace s2h
