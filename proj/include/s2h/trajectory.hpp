#pragma once

#include <string>
#include <vector>

#include "s2h/pruner.hpp"

namespace s2h {

// CSV with header epoch,soft_top1,hard_top1,flops_hard,flops_soft,js_gap,
// l2_gap,resource_penalty,lr; values printed with 17 significant digits so a
// parse round-trip is exact.
std::string trajectory_to_csv(const std::vector<TrajectoryRecord>& records);
void write_trajectory(const std::vector<TrajectoryRecord>& records, const std::string& path);
std::vector<TrajectoryRecord> parse_trajectory_csv(const std::string& text);
std::vector<TrajectoryRecord> read_trajectory(const std::string& path);

}  // namespace s2h
