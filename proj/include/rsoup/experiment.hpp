#pragma once

#include <filesystem>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace rsoup {

// Config schema violation; the message names the dotted key path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kManifestSchemaVersion = 1;

// The full default experiment document. Every accepted key appears here.
nlohmann::json default_config();

// Checks `user` against the default schema (unknown keys and type changes are
// errors) and returns the merged document.
nlohmann::json resolve_config(const nlohmann::json& user);

// Applies "a.b.c=value"; value is parsed as JSON when possible, else taken
// as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

std::string config_digest(const nlohmann::json& config);
std::string build_id();

const std::vector<std::string>& command_names();

struct CommandRequest {
  std::string command;
  nlohmann::json config;  // resolved
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path out_dir;
};

// Runs one command, writes its artifacts and manifest.json under out_dir and
// returns the manifest.
nlohmann::json run_command(const CommandRequest& request, std::ostream& log);

struct ReplayResult {
  nlohmann::json manifest;
  std::vector<std::string> mismatched;  // output files whose digest differs
};

// Re-runs the command recorded in `manifest_path` into out_dir and compares
// every output digest with the recorded one.
ReplayResult replay_manifest(const std::filesystem::path& manifest_path,
                             const std::filesystem::path& out_dir, std::ostream& log);

}  // namespace rsoup
