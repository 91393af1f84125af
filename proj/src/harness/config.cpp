#include "gradinit/harness/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace gi::harness {

using nlohmann::json;

std::string to_string(InitMethod method) {
  switch (method) {
    case InitMethod::kaiming: return "kaiming";
    case InitMethod::xavier: return "xavier";
    case InitMethod::fixup: return "fixup";
    case InitMethod::gradinit: return "gradinit";
    case InitMethod::gradinit_penalty: return "gradinit-penalty";
  }
  return "?";
}

InitMethod init_method_from_string(const std::string& name) {
  for (InitMethod m : {InitMethod::kaiming, InitMethod::xavier, InitMethod::fixup, InitMethod::gradinit,
                       InitMethod::gradinit_penalty}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown init '" + name +
                              "' (expected kaiming, xavier, fixup, gradinit or gradinit-penalty)");
}

bool uses_gradinit(InitMethod method) {
  return method == InitMethod::gradinit || method == InitMethod::gradinit_penalty;
}

nn::BaseInit RunConfig::resolved_base_init() const {
  if (base_init) return *base_init;
  return arch.kind == nn::ArchKind::postln_transformer ? nn::BaseInit::xavier : nn::BaseInit::kaiming;
}

RunConfig RunConfig::with_init(InitMethod method) const {
  RunConfig c = *this;
  c.init = method;
  if (!uses_gradinit(method)) {
    c.gradinit.reset();
  } else if (!c.gradinit) {
    c.gradinit.emplace();
    c.gradinit->gamma = c.gradinit->resolved_gamma();
  }
  return c;
}

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Reads an object field by field and rejects whatever was not read.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string path(const std::string& key) const { return join(path_, key); }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void read(const std::string& key, T& out) {
    const json* v = raw(key);
    if (v) out = convert<T>(*v, path(key));
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
        throw ConfigError(where, "must be non-negative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where, "expected a number");
      return v.get<T>();
    } else {
      if (!v.is_array()) throw ConfigError(where, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

  template <class E, class F>
  void read_enum(const std::string& key, E& out, F from_string) {
    const json* v = raw(key);
    if (!v) return;
    const auto s = convert<std::string>(*v, path(key));
    try {
      out = from_string(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path(key), e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Re-raises invalid_argument from a module validator ("train.lr: ...") as a
// ConfigError at that path.
template <class F>
void validated(F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(": ");
    if (colon == std::string::npos) throw ConfigError("<root>", msg);
    throw ConfigError(msg.substr(0, colon), msg.substr(colon + 2));
  }
}

data::DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "mnist") return data::DatasetKind::mnist;
  if (s == "cifar10") return data::DatasetKind::cifar10;
  if (s == "synth-seq") return data::DatasetKind::synth_seq;
  throw std::invalid_argument("unknown dataset '" + s + "' (expected mnist, cifar10 or synth-seq)");
}

data::SeqTaskKind task_from_string(const std::string& s) {
  if (s == "copy") return data::SeqTaskKind::copy;
  if (s == "reverse") return data::SeqTaskKind::reverse;
  throw std::invalid_argument("unknown task '" + s + "' (expected copy or reverse)");
}

std::string to_string(data::SeqTaskKind k) { return k == data::SeqTaskKind::copy ? "copy" : "reverse"; }

nn::BaseInit base_init_from_string(const std::string& s) {
  if (s == "kaiming") return nn::BaseInit::kaiming;
  if (s == "xavier") return nn::BaseInit::xavier;
  throw std::invalid_argument("unknown base init '" + s + "' (expected kaiming or xavier)");
}

std::string to_string(nn::BaseInit b) { return b == nn::BaseInit::kaiming ? "kaiming" : "xavier"; }

std::string format_name(diag::ProfileFormat f) { return f == diag::ProfileFormat::csv ? "csv" : "json"; }

DatasetSpec parse_dataset(const json& v) {
  DatasetSpec d;
  if (v.is_string()) {
    try {
      d.kind = dataset_kind_from_string(v.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("dataset", e.what());
    }
    return d;
  }
  Fields f(v, "dataset");
  if (!f.has("name")) throw ConfigError("dataset.name", "required");
  f.read_enum("name", d.kind, dataset_kind_from_string);
  f.read("train_subset", d.train_subset);
  f.read("test_subset", d.test_subset);
  f.read("subset_seed", d.subset_seed);
  f.read("vocab", d.vocab);
  f.read("length", d.length);
  f.read("train_count", d.train_count);
  f.read("test_count", d.test_count);
  f.read_enum("task", d.task, task_from_string);
  f.finish();
  if (d.train_subset < 0) throw ConfigError("dataset.train_subset", "must be non-negative");
  if (d.test_subset < 0) throw ConfigError("dataset.test_subset", "must be non-negative");
  if (d.kind == data::DatasetKind::synth_seq) {
    if (d.vocab < 4) throw ConfigError("dataset.vocab", "must be at least 4");
    if (d.length < 1) throw ConfigError("dataset.length", "must be at least 1");
    if (d.train_count < 1) throw ConfigError("dataset.train_count", "must be at least 1");
    if (d.test_count < 1) throw ConfigError("dataset.test_count", "must be at least 1");
  }
  return d;
}

// Shape facts the architecture inherits from the dataset.
void fit_arch_to_data(nn::ArchSpec& a, const DatasetSpec& d, bool widths_given) {
  if (d.kind == data::DatasetKind::synth_seq) {
    a.vocab = d.vocab;
    a.num_classes = d.vocab;
    a.max_length = std::max(a.max_length, d.length + 2);
    return;
  }
  a.in_channels = d.kind == data::DatasetKind::mnist ? 1 : 3;
  a.image_size = d.kind == data::DatasetKind::mnist ? 28 : 32;
  a.num_classes = 10;
  if (widths_given) return;
  switch (a.kind) {
    case nn::ArchKind::mlp: a.widths = {a.in_channels * a.image_size * a.image_size, 256, 256, 10}; break;
    case nn::ArchKind::plaincnn: a.widths = {16, 16, 32, 32, 64, 64, 64, 64}; break;
    case nn::ArchKind::resnet:
      a.widths = {16, 32, 64};
      if (a.residual_blocks.empty()) a.residual_blocks = {1, 1, 1};
      break;
    case nn::ArchKind::postln_transformer: break;
  }
}

nn::ArchSpec parse_arch(const json& v, const DatasetSpec& d) {
  nn::ArchSpec a;
  bool widths_given = false;
  if (v.is_string()) {
    try {
      a.kind = nn::arch_kind_from_string(v.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("arch", e.what());
    }
  } else {
    Fields f(v, "arch");
    if (!f.has("kind")) throw ConfigError("arch.kind", "required");
    f.read_enum("kind", a.kind, nn::arch_kind_from_string);
    widths_given = f.has("widths");
    f.read("widths", a.widths);
    f.read("batchnorm", a.use_batchnorm);
    f.read("layernorm", a.use_layernorm);
    f.read("residual_blocks", a.residual_blocks);
    f.read("model_dim", a.model_dim);
    f.read("heads", a.heads);
    f.read("ffn_dim", a.ffn_dim);
    f.read("encoder_layers", a.encoder_layers);
    f.read("decoder_layers", a.decoder_layers);
    f.read("max_length", a.max_length);
    f.finish();
  }
  if (a.kind == nn::ArchKind::postln_transformer) a.use_layernorm = true;
  const bool seq = d.kind == data::DatasetKind::synth_seq;
  if (seq != (a.kind == nn::ArchKind::postln_transformer)) {
    throw ConfigError("arch.kind", "postln-transformer goes with the synth-seq dataset and only with it");
  }
  if (a.kind == nn::ArchKind::mlp && widths_given && !a.widths.empty()) {
    // The input width is implied by the dataset; accept it stated or omitted.
    const std::int64_t in = d.kind == data::DatasetKind::mnist ? 784 : 3072;
    if (a.widths.front() != in) a.widths.insert(a.widths.begin(), in);
  }
  fit_arch_to_data(a, d, widths_given);
  if (a.kind == nn::ArchKind::mlp && !a.widths.empty() && a.widths.back() != a.num_classes) {
    throw ConfigError("arch.widths", "last width must equal the class count " + std::to_string(a.num_classes));
  }
  validated([&] {
    try {
      a.validate();
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string("arch: ") + e.what());
    }
  });
  return a;
}

gradinit::GradInitConfig parse_gradinit(const json* v, Real& lambda) {
  gradinit::GradInitConfig g;
  if (v) {
    Fields f(*v, "gradinit");
    f.read_enum("algo", g.algo, gradinit::step_algo_from_string);
    f.read("eta", g.eta);
    if (const json* gamma = f.raw("gamma"); gamma && !gamma->is_null()) {
      g.gamma = Fields::convert<Real>(*gamma, "gradinit.gamma");
    }
    f.read("tau", g.tau);
    f.read("iterations", g.iterations);
    f.read("overlap", g.overlap);
    f.read("alpha_lower", g.alpha_lower);
    f.read("meta_beta1", g.meta_beta1);
    f.read("meta_beta2", g.meta_beta2);
    f.read("meta_eps", g.meta_eps);
    f.read("batch_size", g.batch_size);
    f.read("fix_norm_scales", g.fix_norm_scales);
    f.read("only_norm_scales", g.only_norm_scales);
    f.read("penalty_lambda", lambda);
    f.finish();
  }
  validated([&] { g.validate(); });
  if (!(lambda >= 0)) throw ConfigError("gradinit.penalty_lambda", "must be non-negative");
  g.gamma = g.resolved_gamma();
  return g;
}

TrainOptions parse_train(const json* v) {
  TrainOptions t;
  if (v) {
    Fields f(*v, "train");
    f.read_enum("optimizer", t.optimizer, optimizer_kind_from_string);
    f.read("lr", t.lr);
    f.read("momentum", t.momentum);
    f.read("weight_decay", t.weight_decay);
    f.read("beta1", t.beta1);
    f.read("beta2", t.beta2);
    f.read("eps", t.eps);
    f.read_enum("schedule", t.schedule, optim::schedule_kind_from_string);
    f.read("warmup_steps", t.warmup_steps);
    f.read("epochs", t.epochs);
    f.read("steps_per_epoch", t.steps_per_epoch);
    f.read("batch_size", t.batch_size);
    f.read("clip_norm", t.clip_norm);
    f.read("augment", t.augment);
    f.read("eval_batch_size", t.eval_batch_size);
    f.finish();
  }
  validated([&] { t.validate(); });
  return t;
}

}  // namespace

RunConfig parse_config(const json& doc) {
  Fields root(doc, "");
  RunConfig c;
  const json* ds = root.raw("dataset");
  if (!ds) throw ConfigError("dataset", "required");
  c.dataset = parse_dataset(*ds);
  const json* arch = root.raw("arch");
  if (!arch) throw ConfigError("arch", "required");
  c.arch = parse_arch(*arch, c.dataset);
  root.read_enum("init", c.init, init_method_from_string);
  if (const json* b = root.raw("base_init")) {
    try {
      c.base_init = base_init_from_string(Fields::convert<std::string>(*b, "base_init"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("base_init", e.what());
    }
  }
  const json* gi = root.raw("gradinit");
  if (uses_gradinit(c.init)) {
    c.gradinit = parse_gradinit(gi, c.penalty_lambda);
  } else if (gi) {
    throw ConfigError("gradinit", "only valid with init gradinit or gradinit-penalty");
  }
  if (c.init == InitMethod::fixup &&
      (c.arch.kind != nn::ArchKind::resnet || c.arch.use_batchnorm)) {
    throw ConfigError("init", "fixup needs a resnet without batchnorm");
  }
  c.train = parse_train(root.raw("train"));

  if (const json* d = root.raw("diagnose")) {
    Fields f(*d, "diagnose");
    f.read("batches", c.diagnose.batches);
    f.read("batch_size", c.diagnose.batch_size);
    f.read_enum("format", c.profile_format, diag::profile_format_from_string);
    f.finish();
    if (c.diagnose.batches < 2) throw ConfigError("diagnose.batches", "must be at least 2");
    if (c.diagnose.batch_size < 1) throw ConfigError("diagnose.batch_size", "must be at least 1");
  }
  if (const json* e = root.raw("experiment")) {
    Fields f(*e, "experiment");
    if (const json* inits = f.raw("inits")) {
      const auto names = Fields::convert<std::vector<std::string>>(*inits, "experiment.inits");
      if (names.empty()) throw ConfigError("experiment.inits", "must not be empty");
      c.experiment.inits.clear();
      for (std::size_t i = 0; i < names.size(); ++i) {
        try {
          c.experiment.inits.push_back(init_method_from_string(names[i]));
        } catch (const std::invalid_argument& ex) {
          throw ConfigError("experiment.inits[" + std::to_string(i) + "]", ex.what());
        }
      }
    }
    f.finish();
  }
  root.read("seeds", c.seeds);
  if (c.seeds.empty()) throw ConfigError("seeds", "must not be empty");
  root.read("out", c.out);
  root.read("data_dir", c.data_dir);
  root.finish();

  return c;
}

json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open config file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    // "arch": "mlp" becomes {"kind": "mlp"} so a nested key can be set.
    if (next.is_string()) next = json{{parts[i] == "dataset" ? "name" : "kind", next}};
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError(key, "cannot set a field inside a non-object");
    node = &next;
  }
  (*node)[parts.back()] = value;
}

json to_json(const RunConfig& c) {
  json j;
  const auto& a = c.arch;
  json arch{{"kind", nn::to_string(a.kind)}};
  if (a.kind == nn::ArchKind::postln_transformer) {
    arch["model_dim"] = a.model_dim;
    arch["heads"] = a.heads;
    arch["ffn_dim"] = a.ffn_dim;
    arch["encoder_layers"] = a.encoder_layers;
    arch["decoder_layers"] = a.decoder_layers;
    arch["max_length"] = a.max_length;
  } else {
    arch["widths"] = a.widths;
    arch["batchnorm"] = a.use_batchnorm;
    if (a.kind == nn::ArchKind::resnet) arch["residual_blocks"] = a.residual_blocks;
  }
  j["arch"] = arch;

  const auto& d = c.dataset;
  json ds{{"name", data::to_string(d.kind)}};
  if (d.kind == data::DatasetKind::synth_seq) {
    ds["vocab"] = d.vocab;
    ds["length"] = d.length;
    ds["train_count"] = d.train_count;
    ds["test_count"] = d.test_count;
    ds["task"] = to_string(d.task);
  } else {
    ds["train_subset"] = d.train_subset;
    ds["test_subset"] = d.test_subset;
  }
  ds["subset_seed"] = d.subset_seed;
  j["dataset"] = ds;

  j["init"] = to_string(c.init);
  if (c.base_init) j["base_init"] = to_string(*c.base_init);
  if (c.gradinit) {
    const auto& g = *c.gradinit;
    j["gradinit"] = {{"algo", gradinit::to_string(g.algo)},
                     {"eta", g.eta},
                     {"gamma", g.resolved_gamma()},
                     {"tau", g.tau},
                     {"iterations", g.iterations},
                     {"overlap", g.overlap},
                     {"alpha_lower", g.alpha_lower},
                     {"meta_beta1", g.meta_beta1},
                     {"meta_beta2", g.meta_beta2},
                     {"meta_eps", g.meta_eps},
                     {"batch_size", g.batch_size},
                     {"fix_norm_scales", g.fix_norm_scales},
                     {"only_norm_scales", g.only_norm_scales},
                     {"penalty_lambda", c.penalty_lambda}};
  }
  const auto& t = c.train;
  j["train"] = {{"optimizer", to_string(t.optimizer)},
                {"lr", t.lr},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"schedule", optim::to_string(t.schedule)},
                {"warmup_steps", t.warmup_steps},
                {"epochs", t.epochs},
                {"steps_per_epoch", t.steps_per_epoch},
                {"batch_size", t.batch_size},
                {"clip_norm", t.clip_norm},
                {"augment", t.augment},
                {"eval_batch_size", t.eval_batch_size}};
  j["diagnose"] = {{"batches", c.diagnose.batches},
                   {"batch_size", c.diagnose.batch_size},
                   {"format", format_name(c.profile_format)}};
  json inits = json::array();
  for (InitMethod m : c.experiment.inits) inits.push_back(to_string(m));
  j["experiment"] = {{"inits", inits}};
  j["seeds"] = c.seeds;
  j["out"] = c.out;
  j["data_dir"] = c.data_dir;
  return j;
}

std::string content_hash(const json& doc) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : doc.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace gi::harness
