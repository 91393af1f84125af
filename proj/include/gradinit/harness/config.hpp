#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradinit/data/dataset.hpp"
#include "gradinit/diagnostics/diagnostics.hpp"
#include "gradinit/gradinit/gradinit.hpp"
#include "gradinit/harness/train.hpp"
#include "gradinit/nn/init.hpp"
#include "gradinit/nn/model.hpp"

namespace gi::harness {

/// Schema violation; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class InitMethod { kaiming, xavier, fixup, gradinit, gradinit_penalty };
std::string to_string(InitMethod method);
InitMethod init_method_from_string(const std::string& name);
bool uses_gradinit(InitMethod method);

struct DatasetSpec {
  data::DatasetKind kind = data::DatasetKind::mnist;
  // Image tasks: 0 keeps everything, otherwise a seeded subset of this size.
  std::int64_t train_subset = 0;
  std::int64_t test_subset = 0;
  std::uint64_t subset_seed = 0;
  // synth-seq.
  std::int64_t vocab = 16;
  std::int64_t length = 8;
  std::int64_t train_count = 4096;
  std::int64_t test_count = 512;
  data::SeqTaskKind task = data::SeqTaskKind::copy;
};

struct ExperimentSpec {
  std::vector<InitMethod> inits{InitMethod::kaiming, InitMethod::gradinit};
};

struct RunConfig {
  nn::ArchSpec arch;
  DatasetSpec dataset;
  InitMethod init = InitMethod::kaiming;
  // Starting point for gradinit and fixup; the arch default when empty.
  std::optional<nn::BaseInit> base_init;
  // Present iff init uses GradInit; gamma is always filled in.
  std::optional<gradinit::GradInitConfig> gradinit;
  Real penalty_lambda = 1;
  TrainOptions train;
  diag::VarianceOptions diagnose;
  diag::ProfileFormat profile_format = diag::ProfileFormat::csv;
  ExperimentSpec experiment;
  std::vector<std::uint64_t> seeds{0};
  std::string out = "runs";
  std::string data_dir;

  nn::BaseInit resolved_base_init() const;
  /// This config with `method` as its init: solver defaults (gamma filled in)
  /// when the method needs GradInit and none are set, no solver otherwise.
  RunConfig with_init(InitMethod method) const;
};

/// Validates `doc` against the schema, applies defaults and returns the
/// config. Unknown keys are rejected. Throws ConfigError.
RunConfig parse_config(const nlohmann::json& doc);
/// Reads a JSON file; I/O and syntax problems are ConfigErrors at path "<file>".
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Sets a dotted key path (e.g. "train.epochs") to a JSON-parsed value,
/// falling back to a string when the value is not valid JSON.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Fully resolved config as JSON (defaults and gamma included). Parsing the
/// echo gives back an equal config.
nlohmann::json to_json(const RunConfig& config);

/// FNV-1a 64 of the compact dump, as 16 hex digits.
std::string content_hash(const nlohmann::json& doc);

}  // namespace gi::harness
