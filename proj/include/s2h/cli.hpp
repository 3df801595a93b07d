#pragma once

#include <iosfwd>
#include <optional>
#include <string>

#include "s2h/config.hpp"

namespace s2h {

struct CliOptions {
  std::string command;  // prune | eval | export | random-baseline
  std::string config_path;
  std::string checkpoint;  // --resume
  std::optional<std::uint64_t> seed_override;
};

// Runs one command end to end; artifacts land in the config's output
// directory (S2HPRUNE_OUT overrides it). Errors print one machine-parsable
// line "error:<category>: <message>" and return nonzero.
int dispatch(const CliOptions& options, std::ostream& out, std::ostream& err);

}  // namespace s2h
