#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradinit/gradinit/gradinit.hpp"
#include "gradinit/harness/checkpoint.hpp"
#include "gradinit/harness/config.hpp"
#include "gradinit/harness/train.hpp"

namespace gi::harness {

inline constexpr const char* kSoftwareVersion = "0.1.0";

struct Datasets {
  data::Dataset train, test;
};

/// Loads the configured dataset from `data_dir` (or $DATA_DIR). MNIST and
/// CIFAR-10 subsets are drawn with the dataset's subset_seed, so every run
/// seed sees the same examples. Throws data::DataError.
Datasets load_datasets(const DatasetSpec& spec, const std::string& data_dir);

struct PreparedModel {
  nn::Model model;
  std::optional<gradinit::GradInitResult> gradinit;
};

/// Builds the model for `seed` and applies the configured init. GradInit
/// runs on the training set and its scales are folded into the weights.
/// Throws NumericError when the learned scales are not finite.
PreparedModel prepare_model(const RunConfig& config, InitMethod init, const data::Dataset& train_set,
                            std::uint64_t seed);

/// GradInit report as JSON: scales, branch counts and the per-iteration trace.
nlohmann::json report_json(const gradinit::GradInitReport& report, bool with_records = true);

struct TrainRun {
  nn::Model model;
  TrainResult result;
  std::optional<gradinit::GradInitReport> gradinit;
  double seconds = 0;
};

TrainRun run_training(const RunConfig& config, InitMethod init, const Datasets& data, std::uint64_t seed);

/// RunSummary. "metrics" holds everything that must be bit-identical across
/// repeated runs; "content_hash" covers command, seed, config and metrics
/// (not wall times).
nlohmann::json run_summary(const RunConfig& config, InitMethod init, std::uint64_t seed, const TrainRun& run);

struct ExperimentRow {
  InitMethod init = InitMethod::kaiming;
  std::vector<std::uint64_t> seeds;
  std::vector<Real> acc_first, acc_best;
  Real acc_first_mean = 0, acc_first_stderr = 0;
  Real acc_best_mean = 0, acc_best_stderr = 0;
  std::int64_t diverged = 0;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  std::vector<nlohmann::json> summaries;  // per (init, seed), row-major
};

/// Sample mean and standard error (sd with n-1, over sqrt n); stderr is 0
/// for a single value.
std::pair<Real, Real> mean_stderr(const std::vector<Real>& values);

/// Every (init, seed) pair trained independently on up to `jobs` threads;
/// results are collected by index, so the table does not depend on `jobs`.
ExperimentResult run_experiment(const RunConfig& config, const Datasets& data, int jobs);

/// Text table: one row per init with Acc1 and Acc_best as mean ± stderr (%).
std::string format_table(const ExperimentResult& result);

/// Writes `doc` with two-space indentation; throws IoError.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace gi::harness
