#pragma once

#include <stdexcept>
#include <string>

namespace s2h {

// Base for all library errors; `category()` is the machine-parsable tag the
// CLI prints in its one-line diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& m) : Error("format", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& m, double closest)
      : Error("infeasible", m), closest_(closest) {}
  double closest() const { return closest_; }

 private:
  double closest_ = 0.0;
};

}  // namespace s2h
