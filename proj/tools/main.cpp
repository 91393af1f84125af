#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradinit/autodiff/gradcheck.hpp"
#include "gradinit/diagnostics/diagnostics.hpp"
#include "gradinit/harness/checkpoint.hpp"
#include "gradinit/harness/config.hpp"
#include "gradinit/harness/run.hpp"

namespace fs = std::filesystem;
using namespace gi;
using namespace gi::harness;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailed = 1, kConfig = 2, kData = 3, kNumeric = 4, kIo = 5 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data_dir;
};

RunConfig load(const Common& c, bool config_required) {
  json doc = json::object();
  if (!c.config_path.empty()) {
    doc = read_config_file(c.config_path);
  } else if (config_required) {
    throw ConfigError("--config", "required for this command");
  }
  for (const auto& o : c.overrides) apply_override(doc, o);
  if (!doc.contains("dataset") && !config_required) doc["dataset"] = "mnist";
  if (!doc.contains("arch") && !config_required) doc["arch"] = "mlp";
  RunConfig cfg = parse_config(doc);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.data_dir.empty()) cfg.data_dir = c.data_dir;
  return cfg;
}

fs::path run_dir(const RunConfig& cfg, const std::string& cmd, const std::string& tag) {
  const fs::path dir = fs::path(cfg.out) / (cmd + "-" + content_hash(to_json(cfg)).substr(0, 8) + tag);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

void emit(const diag::LayerProfile& p, const fs::path& path, diag::ProfileFormat f) {
  try {
    diag::emit_profiles(p, path, f);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
}

std::string seed_tag(std::uint64_t seed) { return "-s" + std::to_string(seed); }

int cmd_gradinit(const Common& c) {
  RunConfig cfg = load(c, true);
  if (!uses_gradinit(cfg.init)) throw ConfigError("init", "the gradinit command needs init gradinit or gradinit-penalty");
  const Datasets data = load_datasets(cfg.dataset, cfg.data_dir);
  for (std::uint64_t seed : cfg.seeds) {
    PreparedModel p = prepare_model(cfg, cfg.init, data.train, seed);
    const auto& rep = p.gradinit->report;
    const json echo = to_json(cfg);
    json hashed{{"command", "gradinit"}, {"seed", seed}, {"config", echo}, {"report", report_json(rep)}};
    json doc = hashed;
    doc["software_version"] = kSoftwareVersion;
    doc["config_hash"] = content_hash(echo);
    doc["content_hash"] = content_hash(hashed);
    doc["wall_seconds"] = rep.wall_seconds;
    const fs::path dir = run_dir(cfg, "gradinit", seed_tag(seed));
    write_json(dir / "scales.json", doc);
    std::printf("seed %llu: %zu iterations, %lld constraint, final |g| %.4g (gamma %.4g), %.1fs -> %s\n",
                static_cast<unsigned long long>(seed), rep.records.size(),
                static_cast<long long>(rep.constraint_iterations), rep.final_grad_norm, rep.gamma, rep.wall_seconds,
                (dir / "scales.json").c_str());
  }
  return kOk;
}

int cmd_train(const Common& c) {
  RunConfig cfg = load(c, true);
  const Datasets data = load_datasets(cfg.dataset, cfg.data_dir);
  int code = kOk;
  for (std::uint64_t seed : cfg.seeds) {
    TrainRun run = run_training(cfg, cfg.init, data, seed);
    const json summary = run_summary(cfg, cfg.init, seed, run);
    const fs::path dir = run_dir(cfg, "train", seed_tag(seed));
    write_json(dir / "summary.json", summary);
    save_checkpoint(dir / "model.ckpt", run.model,
                    {{"seed", seed}, {"config_hash", summary["config_hash"]}, {"content_hash", summary["content_hash"]}});
    for (const auto& e : run.result.epochs) {
      std::printf("seed %llu epoch %lld: train loss %.4f, test acc %.2f%%\n", static_cast<unsigned long long>(seed),
                  static_cast<long long>(e.epoch), e.train_loss, 100 * e.test_accuracy);
    }
    std::printf("seed %llu: Acc1 %.2f%%, Acc_best %.2f%% -> %s\n", static_cast<unsigned long long>(seed),
                100 * run.result.acc_first, 100 * run.result.acc_best, dir.c_str());
    if (run.result.diverged) {
      std::fprintf(stderr, "seed %llu: loss became non-finite at step %lld\n", static_cast<unsigned long long>(seed),
                   static_cast<long long>(*run.result.diverged_at_step));
      code = kNumeric;
    }
  }
  return code;
}

int cmd_diagnose(const Common& c) {
  RunConfig cfg = load(c, true);
  const Datasets data = load_datasets(cfg.dataset, cfg.data_dir);
  const std::string ext = cfg.profile_format == diag::ProfileFormat::csv ? ".csv" : ".json";
  for (std::uint64_t seed : cfg.seeds) {
    diag::VarianceOptions vo = cfg.diagnose;
    vo.seed = seed;
    const fs::path dir = run_dir(cfg, "diagnose", seed_tag(seed));
    // The configured base init alone, then with the configured method on top.
    const InitMethod base =
        cfg.resolved_base_init() == nn::BaseInit::kaiming ? InitMethod::kaiming : InitMethod::xavier;
    PreparedModel before = prepare_model(cfg, base, data.train, seed);
    emit(diag::grad_variance_profile(before.model, data.train, vo), dir / ("profile_before" + ext),
                        cfg.profile_format);
    json files{("profile_before" + ext)};
    const json echo = to_json(cfg);
    json hashed{{"command", "diagnose"}, {"seed", seed}, {"config", echo}};
    if (cfg.init != base) {
      PreparedModel after = prepare_model(cfg, cfg.init, data.train, seed);
      emit(diag::grad_variance_profile(after.model, data.train, vo), dir / ("profile_after" + ext),
                          cfg.profile_format);
      files.push_back("profile_after" + ext);
      if (after.gradinit) hashed["gradinit"] = report_json(after.gradinit->report, false);
    }
    hashed["files"] = files;
    json doc = hashed;
    doc["software_version"] = kSoftwareVersion;
    doc["config_hash"] = content_hash(echo);
    doc["content_hash"] = content_hash(hashed);
    write_json(dir / "diagnose.json", doc);
    std::printf("seed %llu: profiles -> %s\n", static_cast<unsigned long long>(seed), dir.c_str());
  }
  return kOk;
}

struct GradcheckArgs {
  std::int64_t instances = 100;
  std::vector<std::string> only;
};

int cmd_gradcheck(const Common& c, const GradcheckArgs& g) {
  RunConfig cfg = load(c, false);
  ad::gradcheck::SuiteOptions o;
  o.instances = g.instances;
  o.seed = cfg.seeds.front();
  o.only = g.only;
  const auto report = ad::gradcheck::run_suite(o);
  json cases = json::array();
  for (const auto& r : report.cases) {
    std::printf("%-32s %-12s n=%-4lld coords=%-6lld rel=%-9.3g abs=%-9.3g tol=%-6.0e %s\n", r.name.c_str(),
                ad::gradcheck::to_string(r.kind).c_str(), static_cast<long long>(r.instances),
                static_cast<long long>(r.coordinates), r.max_rel_err, r.max_abs_err, r.tol, r.pass ? "ok" : "FAIL");
    cases.push_back({{"name", r.name},
                     {"kind", ad::gradcheck::to_string(r.kind)},
                     {"instances", r.instances},
                     {"coordinates", r.coordinates},
                     {"max_rel_err", r.max_rel_err},
                     {"max_abs_err", r.max_abs_err},
                     {"tol", r.tol},
                     {"pass", r.pass},
                     {"worst_instance", r.worst_instance},
                     {"worst_analytic", r.worst_analytic},
                     {"worst_numeric", r.worst_numeric}});
  }
  std::size_t failed = 0;
  for (const auto& r : report.cases) failed += r.pass ? 0 : 1;
  std::printf("%zu cases, %zu failed, %.1fs\n", report.cases.size(), failed, report.seconds);
  json hashed{{"command", "gradcheck"},
              {"seed", o.seed},
              {"instances", o.instances},
              {"h", o.h},
              {"cases", cases},
              {"pass", report.pass()}};
  json doc = hashed;
  doc["software_version"] = kSoftwareVersion;
  doc["content_hash"] = content_hash(hashed);
  doc["wall_seconds"] = report.seconds;
  const fs::path dir = run_dir(cfg, "gradcheck", seed_tag(o.seed));
  write_json(dir / "gradcheck.json", doc);
  return report.pass() ? kOk : kFailed;
}

int cmd_experiment(const Common& c, int jobs) {
  RunConfig cfg = load(c, true);
  const Datasets data = load_datasets(cfg.dataset, cfg.data_dir);
  const ExperimentResult res = run_experiment(cfg, data, jobs);
  const std::string table = format_table(res);
  std::fputs(table.c_str(), stdout);
  json rows = json::array();
  for (const auto& r : res.rows) {
    rows.push_back({{"init", to_string(r.init)},
                    {"seeds", r.seeds},
                    {"acc_first", r.acc_first},
                    {"acc_best", r.acc_best},
                    {"acc_first_mean", r.acc_first_mean},
                    {"acc_first_stderr", r.acc_first_stderr},
                    {"acc_best_mean", r.acc_best_mean},
                    {"acc_best_stderr", r.acc_best_stderr},
                    {"diverged", r.diverged}});
  }
  const json echo = to_json(cfg);
  json hashed{{"command", "experiment"}, {"config", echo}, {"rows", rows}};
  json doc = hashed;
  doc["software_version"] = kSoftwareVersion;
  doc["config_hash"] = content_hash(echo);
  doc["content_hash"] = content_hash(hashed);
  doc["runs"] = res.summaries;
  const fs::path dir = run_dir(cfg, "experiment", "");
  write_json(dir / "experiment.json", doc);
  std::ofstream(dir / "table.txt") << table;
  std::printf("-> %s\n", dir.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GradInit: learned initialization scales, training harness and diagnostics"};
  app.require_subcommand(1);
  Common common;
  GradcheckArgs gc;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run config");
    sub->add_option("--seed", common.seed, "Run this seed only (replaces the config's seeds list)");
    sub->add_option("--out", common.out, "Artifact root (default: config out, else ./runs)");
    sub->add_option("--data-dir", common.data_dir, "Dataset root (default: config data_dir, else $DATA_DIR)");
    sub->add_option("--set", common.overrides, "Override a config key, e.g. --set train.epochs=3")->take_all();
  };
  auto* gradinit_cmd = app.add_subcommand("gradinit", "Learn scales and write them with the report");
  auto* train_cmd = app.add_subcommand("train", "Initialize, train, write the run summary and a checkpoint");
  auto* diagnose_cmd = app.add_subcommand("diagnose", "Weight-norm and gradient-variance profiles before/after init");
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and layer");
  auto* experiment_cmd = app.add_subcommand("experiment", "Seed sweep over init methods, mean +- stderr table");
  for (auto* s : {gradinit_cmd, train_cmd, diagnose_cmd, gradcheck_cmd, experiment_cmd}) add_common(s);
  gradcheck_cmd->add_option("--instances", gc.instances, "Random instances per case")->check(CLI::PositiveNumber);
  gradcheck_cmd->add_option("--only", gc.only, "Case names to run")->delimiter(',');
  experiment_cmd->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gradinit_cmd) return cmd_gradinit(common);
    if (*train_cmd) return cmd_train(common);
    if (*diagnose_cmd) return cmd_diagnose(common);
    if (*gradcheck_cmd) return cmd_gradcheck(common, gc);
    if (*experiment_cmd) return cmd_experiment(common, jobs);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const data::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailed;
  }
  return kFailed;
}
