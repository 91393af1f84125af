#include "gradinit/harness/run.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

namespace gi::harness {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

data::Dataset seeded_subset(const data::Dataset& d, std::int64_t n, std::uint64_t seed) {
  if (n <= 0 || n >= d.size()) return d;
  std::mt19937_64 rng(seed);
  const auto idx = data::sample_indices(d.size(), n, rng);
  return d.subset(idx);
}

std::filesystem::path cifar_dir(const std::filesystem::path& root) {
  for (const char* sub : {"cifar-10-batches-bin", "cifar10", "cifar-10"}) {
    if (std::filesystem::exists(root / sub / "test_batch.bin")) return root / sub;
  }
  return root;
}

json json_number(Real v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

Datasets load_datasets(const DatasetSpec& spec, const std::string& data_dir) {
  if (spec.kind == data::DatasetKind::synth_seq) {
    return {data::synth_seq_task(spec.vocab, spec.length, spec.train_count, spec.task, spec.subset_seed),
            data::synth_seq_task(spec.vocab, spec.length, spec.test_count, spec.task, spec.subset_seed + 1)};
  }
  const auto root = data::resolve_data_dir(data_dir);
  if (root.empty()) throw data::DataError("no data directory: pass --data-dir or set DATA_DIR");
  Datasets d;
  if (spec.kind == data::DatasetKind::mnist) {
    d.train = data::load_mnist_dir(root, true);
    d.test = data::load_mnist_dir(root, false);
  } else {
    const auto dir = cifar_dir(root);
    d.train = data::load_cifar10_bin(dir, true);
    d.test = data::load_cifar10_bin(dir, false);
  }
  d.train = seeded_subset(d.train, spec.train_subset, spec.subset_seed);
  d.test = seeded_subset(d.test, spec.test_subset, spec.subset_seed + 1);
  return d;
}

PreparedModel prepare_model(const RunConfig& config, InitMethod init, const data::Dataset& train_set,
                            std::uint64_t seed) {
  PreparedModel p{nn::build_model(config.arch, seed), std::nullopt};
  const nn::BaseInit arch_default =
      config.arch.kind == nn::ArchKind::postln_transformer ? nn::BaseInit::xavier : nn::BaseInit::kaiming;
  nn::BaseInit base = config.resolved_base_init();
  if (init == InitMethod::kaiming) base = nn::BaseInit::kaiming;
  if (init == InitMethod::xavier) base = nn::BaseInit::xavier;
  if (base != arch_default) nn::initialize(p.model, base, seed);
  if (init == InitMethod::fixup) nn::fixup_init(p.model);
  if (!uses_gradinit(init)) return p;

  gradinit::GradInitConfig g = *config.with_init(init).gradinit;
  g.seed = seed;
  try {
    p.gradinit = init == InitMethod::gradinit ? gradinit::gradinit_run(p.model, train_set, g)
                                              : gradinit::penalty_run(p.model, train_set, g, config.penalty_lambda);
  } catch (const gradinit::DegenerateGradientError& e) {
    throw NumericError(e.what());
  }
  for (std::size_t i = 0; i < p.gradinit->scales.size(); ++i) {
    if (!std::isfinite(p.gradinit->scales.alphas[i])) {
      throw NumericError("gradinit produced a non-finite scale for " + p.model.blocks()[i].name);
    }
  }
  auto learned = gradinit::LearnedScales::from(p.model, p.gradinit->scales);
  gradinit::apply_scales(p.model, learned);
  return p;
}

json report_json(const gradinit::GradInitReport& r, bool with_records) {
  json scales = json::array();
  for (std::size_t i = 0; i < r.alphas.size(); ++i) scales.push_back({{"block_name", r.block_names[i]}, {"alpha", r.alphas[i]}});
  json j{{"gamma", r.gamma},
         {"iterations", r.records.size()},
         {"constraint_iterations", r.constraint_iterations},
         {"final_grad_norm", json_number(r.final_grad_norm)},
         {"scales", scales}};
  if (with_records) {
    json recs = json::array();
    for (const auto& rec : r.records) {
      json e{{"iter", rec.iter},
             {"branch", gradinit::to_string(rec.branch)},
             {"grad_norm", json_number(rec.grad_norm)},
             {"clamp_hits", rec.clamp_hits},
             {"second_order_evals", rec.second_order_evals}};
      e["objective_loss"] = rec.objective_loss ? json_number(*rec.objective_loss) : json(nullptr);
      recs.push_back(e);
    }
    j["records"] = recs;
  }
  return j;
}

TrainRun run_training(const RunConfig& config, InitMethod init, const Datasets& data, std::uint64_t seed) {
  const auto t0 = Clock::now();
  PreparedModel p = prepare_model(config, init, data.train, seed);
  TrainRun run{std::move(p.model), {}, std::nullopt, 0};
  if (p.gradinit) run.gradinit = p.gradinit->report;
  run.result = train(run.model, data.train, data.test, config.train, seed);
  run.seconds = since(t0);
  return run;
}

json run_summary(const RunConfig& config, InitMethod init, std::uint64_t seed, const TrainRun& run) {
  const json echo = to_json(config.with_init(init));

  json epochs = json::array();
  for (const auto& e : run.result.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", json_number(e.train_loss)},
                      {"test_loss", json_number(e.test_loss)},
                      {"test_accuracy", e.test_accuracy},
                      {"steps", e.steps}});
  }
  json metrics{{"epochs", epochs},
               {"acc_first", run.result.acc_first},
               {"acc_best", run.result.acc_best},
               {"steps", run.result.steps},
               {"diverged", run.result.diverged}};
  if (run.result.diverged_at_step) metrics["diverged_at_step"] = *run.result.diverged_at_step;
  if (run.gradinit) metrics["gradinit"] = report_json(*run.gradinit, false);

  json hashed{{"command", "train"}, {"seed", seed}, {"config", echo}, {"metrics", metrics}};
  json s = hashed;
  s["software_version"] = kSoftwareVersion;
  s["config_hash"] = content_hash(echo);
  s["content_hash"] = content_hash(hashed);
  s["wall_seconds"] = run.seconds;
  if (run.gradinit) s["gradinit_wall_seconds"] = run.gradinit->wall_seconds;
  return s;
}

std::pair<Real, Real> mean_stderr(const std::vector<Real>& v) {
  if (v.empty()) return {0, 0};
  Real mean = 0;
  for (Real x : v) mean += x;
  mean /= static_cast<Real>(v.size());
  if (v.size() < 2) return {mean, 0};
  Real ss = 0;
  for (Real x : v) ss += (x - mean) * (x - mean);
  const Real sd = std::sqrt(ss / static_cast<Real>(v.size() - 1));
  return {mean, sd / std::sqrt(static_cast<Real>(v.size()))};
}

ExperimentResult run_experiment(const RunConfig& config, const Datasets& data, int jobs) {
  const auto& inits = config.experiment.inits;
  const std::size_t n = inits.size() * config.seeds.size();
  std::vector<std::optional<TrainRun>> runs(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        runs[k] = run_training(config, inits[k / config.seeds.size()], data, config.seeds[k % config.seeds.size()]);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  ExperimentResult out;
  for (std::size_t i = 0; i < inits.size(); ++i) {
    ExperimentRow row;
    row.init = inits[i];
    for (std::size_t j = 0; j < config.seeds.size(); ++j) {
      const TrainRun& r = *runs[i * config.seeds.size() + j];
      row.seeds.push_back(config.seeds[j]);
      row.acc_first.push_back(r.result.acc_first);
      row.acc_best.push_back(r.result.acc_best);
      row.diverged += r.result.diverged ? 1 : 0;
      out.summaries.push_back(run_summary(config, inits[i], config.seeds[j], r));
    }
    std::tie(row.acc_first_mean, row.acc_first_stderr) = mean_stderr(row.acc_first);
    std::tie(row.acc_best_mean, row.acc_best_stderr) = mean_stderr(row.acc_best);
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::string format_table(const ExperimentResult& result) {
  std::string s = "init               seeds  Acc1 (%)          Acc_best (%)\n";
  char buf[160];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof buf, "%-18s %5zu  %6.2f +- %-6.2f  %6.2f +- %-6.2f\n", to_string(r.init).c_str(),
                  r.seeds.size(), 100 * r.acc_first_mean, 100 * r.acc_first_stderr, 100 * r.acc_best_mean,
                  100 * r.acc_best_stderr);
    s += buf;
  }
  return s;
}

void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace gi::harness
