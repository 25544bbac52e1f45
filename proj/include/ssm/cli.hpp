#pragma once

// Command-line driver: parses flags and a TOML (or manifest JSON) config,
// runs one command and writes manifest.json, report.json and results.csv.

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ssm {

inline constexpr const char* kToolVersion = "0.1.0";

/// Exit codes of run_cli.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

/// Invalid configuration; `field` is the dotted path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// 64-bit FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

/// Parse a config file into JSON. `.json` files are read as JSON (a manifest's
/// "config" member is used when present); anything else is TOML.
nlohmann::json load_config_file(const std::string& path);

/// Entry point behind the `ssm` executable. Errors are reported on `err` as
/// one JSON object per line.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssm
