#include "s2h/trajectory.hpp"

#include <cstdio>
#include <sstream>

#include "s2h/fsio.hpp"

namespace s2h {

namespace {

constexpr const char* kHeader =
    "epoch,soft_top1,hard_top1,flops_hard,flops_soft,js_gap,l2_gap,resource_penalty,lr";

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string trajectory_to_csv(const std::vector<TrajectoryRecord>& records) {
  std::ostringstream os;
  os << kHeader << '\n';
  std::size_t prev_epoch = 0;
  for (const TrajectoryRecord& r : records) {
    if (r.epoch <= prev_epoch) {
      throw ContractError("trajectory: epochs must be strictly increasing");
    }
    prev_epoch = r.epoch;
    os << r.epoch << ',' << fmt(r.soft_top1) << ',' << fmt(r.hard_top1) << ',' << fmt(r.flops_hard)
       << ',' << fmt(r.flops_soft) << ',' << fmt(r.js_gap) << ',' << fmt(r.l2_gap) << ','
       << fmt(r.resource_penalty) << ',' << fmt(r.lr) << '\n';
  }
  return os.str();
}

void write_trajectory(const std::vector<TrajectoryRecord>& records, const std::string& path) {
  write_file_atomic(path, trajectory_to_csv(records));
}

std::vector<TrajectoryRecord> parse_trajectory_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw FormatError("trajectory: unexpected header");
  }
  std::vector<TrajectoryRecord> records;
  std::size_t prev_epoch = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrajectoryRecord r;
    double epoch = 0.0;
    double* fields[] = {&epoch,     &r.soft_top1, &r.hard_top1,        &r.flops_hard, &r.flops_soft,
                        &r.js_gap,  &r.l2_gap,    &r.resource_penalty, &r.lr};
    std::stringstream ss(line);
    std::string cell;
    std::size_t i = 0;
    while (std::getline(ss, cell, ',')) {
      if (i >= 9) throw FormatError("trajectory: too many columns");
      try {
        *fields[i] = std::stod(cell);
      } catch (const std::exception&) {
        throw FormatError("trajectory: bad value '" + cell + "'");
      }
      ++i;
    }
    if (i != 9) throw FormatError("trajectory: expected 9 columns, got " + std::to_string(i));
    r.epoch = static_cast<std::size_t>(epoch);
    if (r.epoch <= prev_epoch) throw FormatError("trajectory: epochs must be strictly increasing");
    prev_epoch = r.epoch;
    records.push_back(r);
  }
  return records;
}

std::vector<TrajectoryRecord> read_trajectory(const std::string& path) {
  return parse_trajectory_csv(read_file(path));
}

}  // namespace s2h
