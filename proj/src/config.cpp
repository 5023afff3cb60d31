#include "qeebm/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace qeebm {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError(key, "expected a finite number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}
std::string fmt(bool v) { return v ? "true" : "false"; }
template <typename T>
  requires std::is_integral_v<T>
std::string fmt(T v) {
  return std::to_string(v);
}

struct Entry {
  std::string doc;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Binds a key to a field reached through `field(cfg)`.
template <typename Field>
Entry bind(std::string doc, Field field) {
  using T = std::remove_reference_t<decltype(field(std::declval<RunConfig&>()))>;
  Entry e;
  e.doc = std::move(doc);
  e.set = [field](RunConfig& c, const std::string& key, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>) field(c) = parse_bool(key, v);
    else if constexpr (std::is_floating_point_v<T>) field(c) = parse_double(key, v);
    else field(c) = parse_integer<T>(key, v);
  };
  e.get = [field](const RunConfig& c) { return fmt(field(const_cast<RunConfig&>(c))); };
  return e;
}

struct Table {
  std::vector<std::string> order;
  std::map<std::string, Entry> entries;

  void add(std::string key, Entry e) {
    order.push_back(key);
    entries.emplace(std::move(key), std::move(e));
  }
};

const Table& table() {
  static const Table t = [] {
    Table t;
    // Task.
    t.add("task.vocab", bind("vocabulary size including 4 special tokens (also the model vocabulary)",
                             [](RunConfig& c) -> int& { return c.task.vocab; }));
    t.entries.at("task.vocab").set = [](RunConfig& c, const std::string& key, const std::string& v) {
      c.task.vocab = parse_integer<int>(key, v);
      c.trainer.dims.vocab = c.task.vocab;
    };
    t.add("task.substitute", bind("substitution cipher over content tokens; false gives the copy task",
                                  [](RunConfig& c) -> bool& { return c.task.substitute; }));
    t.add("task.swap_pairs", bind("swap adjacent target tokens pairwise",
                                  [](RunConfig& c) -> bool& { return c.task.swap_pairs; }));
    t.add("task.min_len", bind("minimum source length", [](RunConfig& c) -> int& { return c.task.min_len; }));
    t.add("task.max_len", bind("maximum source length", [](RunConfig& c) -> int& { return c.task.max_len; }));
    t.add("task.pool_size", bind("preprocessed pool size; one fifth is labeled, all of it unlabeled",
                                 [](RunConfig& c) -> int& { return c.task.pool_size; }));
    t.add("task.valid_size", bind("validation pairs", [](RunConfig& c) -> int& { return c.task.valid_size; }));
    t.add("task.test_size", bind("test pairs", [](RunConfig& c) -> int& { return c.task.test_size; }));
    t.add("task.rating_size", bind("rated pairs reserved for scorer pretraining",
                                   [](RunConfig& c) -> int& { return c.task.rating_size; }));
    t.add("task.noise_fraction", bind("fraction of labeled targets corrupted",
                                      [](RunConfig& c) -> double& { return c.task.noise_fraction; }));

    Entry seed = bind("seed for the corpus, model initialization, sampling and pretraining",
                      [](RunConfig& c) -> std::uint64_t& { return c.trainer.seed; });
    seed.set = [](RunConfig& c, const std::string& key, const std::string& v) {
      const auto s = parse_integer<std::uint64_t>(key, v);
      c.task.seed = c.trainer.seed = c.pretrain.seed = s;
    };
    t.add("seed", std::move(seed));

    Entry algo;
    algo.doc = "supervised | qe-static | qe-dynamic | reinforce | ppo";
    algo.set = [](RunConfig& c, const std::string& key, const std::string& v) {
      try {
        c.trainer.algorithm = parse_algorithm(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(key, e.what());
      }
    };
    algo.get = [](const RunConfig& c) { return std::string(algorithm_name(c.trainer.algorithm)); };
    t.add("algorithm", std::move(algo));

    // Trainer.
    t.add("epochs", bind("training epochs", [](RunConfig& c) -> int& { return c.trainer.epochs; }));
    t.add("batch_labeled", bind("labeled batch size", [](RunConfig& c) -> int& { return c.trainer.batch_labeled; }));
    t.add("batch_unlabeled",
          bind("unlabeled batch size", [](RunConfig& c) -> int& { return c.trainer.batch_unlabeled; }));
    t.add("k", bind("samples per unlabeled source", [](RunConfig& c) -> int& { return c.trainer.k; }));
    t.add("n", bind("NCE negatives per labeled pair", [](RunConfig& c) -> int& { return c.trainer.n; }));
    t.add("lr_task", bind("task net Adam learning rate", [](RunConfig& c) -> double& { return c.trainer.lr_task; }));
    t.add("lr_energy",
          bind("scorer Adam learning rate", [](RunConfig& c) -> double& { return c.trainer.lr_energy; }));
    t.add("adam_beta1", bind("Adam beta1", [](RunConfig& c) -> double& { return c.trainer.adam_beta1; }));
    t.add("adam_beta2", bind("Adam beta2", [](RunConfig& c) -> double& { return c.trainer.adam_beta2; }));
    t.add("adam_eps", bind("Adam epsilon", [](RunConfig& c) -> double& { return c.trainer.adam_eps; }));
    t.add("grad_clip", bind("global gradient-norm clip; 0 disables",
                            [](RunConfig& c) -> double& { return c.trainer.grad_clip; }));
    t.add("mono", bind("use the unlabeled pool; when false the labeled sources stand in",
                       [](RunConfig& c) -> bool& { return c.trainer.mono; }));
    t.add("filter", bind("keep only the best-scored labeled pairs", [](RunConfig& c) -> bool& { return c.trainer.filter; }));
    t.add("nn", bind("pair each labeled batch with its nearest unlabeled batch",
                     [](RunConfig& c) -> bool& { return c.trainer.nn; }));
    t.add("adapters", bind("qe-dynamic trains scorer adapters instead of all scorer weights",
                           [](RunConfig& c) -> bool& { return c.trainer.adapters; }));
    t.add("adapter_rank", bind("adapter bottleneck width", [](RunConfig& c) -> int& { return c.trainer.adapter_rank; }));
    t.add("keep_fraction",
          bind("share of labeled pairs kept by filter", [](RunConfig& c) -> double& { return c.trainer.keep_fraction; }));
    t.add("ppo_epochs", bind("PPO update passes per sampled batch", [](RunConfig& c) -> int& { return c.trainer.ppo_epochs; }));
    t.add("ppo_clip", bind("PPO ratio clip", [](RunConfig& c) -> double& { return c.trainer.ppo_clip; }));
    t.add("temperature", bind("sampling temperature", [](RunConfig& c) -> double& { return c.trainer.temperature; }));
    t.add("energy_weight_max", bind("final energy (unlabeled) weight of the linear ramp",
                                    [](RunConfig& c) -> double& { return c.trainer.energy_weight_max; }));
    t.add("ramp_steps", bind("steps over which the energy weight ramps up",
                             [](RunConfig& c) -> long& { return c.trainer.ramp_steps; }));

    // Model.
    t.add("model.d_model", bind("model width", [](RunConfig& c) -> int& { return c.trainer.dims.d_model; }));
    t.add("model.heads", bind("attention heads", [](RunConfig& c) -> int& { return c.trainer.dims.heads; }));
    t.add("model.ff", bind("feed-forward width", [](RunConfig& c) -> int& { return c.trainer.dims.ff; }));
    t.add("model.init_range", bind("uniform init half-width",
                                   [](RunConfig& c) -> double& { return c.trainer.dims.init_range; }));

    // Scorer pretraining.
    t.add("pretrain.max_steps", bind("scorer pretraining step budget",
                                     [](RunConfig& c) -> int& { return c.pretrain.max_steps; }));
    t.add("pretrain.batch", bind("scorer pretraining batch", [](RunConfig& c) -> int& { return c.pretrain.batch; }));
    t.add("pretrain.lr", bind("scorer pretraining learning rate", [](RunConfig& c) -> double& { return c.pretrain.lr; }));
    t.add("pretrain.eval_every", bind("steps between held-out checks",
                                      [](RunConfig& c) -> int& { return c.pretrain.eval_every; }));
    t.add("pretrain.target_pearson", bind("stop once held-out correlation reaches this",
                                          [](RunConfig& c) -> double& { return c.pretrain.target_pearson; }));
    t.add("pretrain.abort_below", bind("fail the run if the budget ends below this correlation",
                                       [](RunConfig& c) -> double& { return c.pretrain.abort_below; }));
    t.add("pretrain.holdout", bind("held-out share of the rating split",
                                   [](RunConfig& c) -> double& { return c.pretrain.holdout; }));
    t.add("pretrain.grad_clip", bind("pretraining gradient-norm clip",
                                     [](RunConfig& c) -> double& { return c.pretrain.grad_clip; }));

    // Runner.
    Entry out;
    out.doc = "output directory (created if missing)";
    out.set = [](RunConfig& c, const std::string& key, const std::string& v) {
      if (v.empty()) throw ConfigError(key, "must not be empty");
      c.out_dir = v;
    };
    out.get = [](const RunConfig& c) { return c.out_dir.string(); };
    t.add("out_dir", std::move(out));
    Entry id;
    id.doc = "run identifier written into every metrics record";
    id.set = [](RunConfig& c, const std::string& key, const std::string& v) {
      if (v.empty() || v.find_first_of("/\\ \t\"") != std::string::npos)
        throw ConfigError(key, "must be non-empty without spaces, quotes or slashes");
      c.run_id = v;
    };
    id.get = [](const RunConfig& c) { return c.run_id; };
    t.add("run_id", std::move(id));
    t.add("ablate.seeds", bind("seeds per ablation cell", [](RunConfig& c) -> int& { return c.ablate_seeds; }));
    t.add("jobs", bind("parallel workers for the ablation grid", [](RunConfig& c) -> int& { return c.jobs; }));
    return t;
  }();
  return t;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& k : table().order) out.push_back({k, table().entries.at(k).doc});
    return out;
  }();
  return keys;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = table().entries.find(key);
  if (it == table().entries.end()) throw ConfigError(key, "unknown key");
  it->second.set(cfg, key, value);
}

std::string get_setting(const RunConfig& cfg, const std::string& key) {
  const auto it = table().entries.find(key);
  if (it == table().entries.end()) throw ConfigError(key, "unknown key");
  return it->second.get(cfg);
}

RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(key, "set more than once");
    apply_setting(cfg, key, value);
  }
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  return parse_config(in);
}

void validate(const RunConfig& c) {
  auto check = [](bool ok, const char* key, const char* why) {
    if (!ok) throw ConfigError(key, why);
  };
  check(c.task.max_len >= c.task.min_len, "task.max_len", "must be >= task.min_len");
  check(c.trainer.epochs >= 1, "epochs", "must be >= 1");
  check(c.trainer.batch_labeled >= 1, "batch_labeled", "must be >= 1");
  check(c.trainer.batch_unlabeled >= 1, "batch_unlabeled", "must be >= 1");
  check(c.trainer.k >= 1, "k", "must be >= 1");
  check(c.trainer.n >= 1, "n", "must be >= 1");
  check(c.trainer.lr_task > 0.0, "lr_task", "must be > 0");
  check(c.trainer.lr_energy > 0.0, "lr_energy", "must be > 0");
  check(c.trainer.adam_beta1 >= 0.0 && c.trainer.adam_beta1 < 1.0, "adam_beta1", "must be in [0, 1)");
  check(c.trainer.adam_beta2 >= 0.0 && c.trainer.adam_beta2 < 1.0, "adam_beta2", "must be in [0, 1)");
  check(c.trainer.adam_eps > 0.0, "adam_eps", "must be > 0");
  check(c.trainer.temperature > 0.0, "temperature", "must be > 0");
  check(c.trainer.dims.d_model >= 2, "model.d_model", "must be >= 2");
  check(c.trainer.dims.heads >= 1 && c.trainer.dims.d_model % c.trainer.dims.heads == 0, "model.heads",
        "must divide model.d_model");
  check(c.trainer.dims.ff >= 1, "model.ff", "must be >= 1");
  check(c.trainer.dims.init_range > 0.0, "model.init_range", "must be > 0");
  check(c.trainer.adapter_rank >= 1 && c.trainer.adapter_rank < c.trainer.dims.d_model, "adapter_rank",
        "must be in [1, model.d_model)");
  check(c.pretrain.max_steps >= 1, "pretrain.max_steps", "must be >= 1");
  check(c.pretrain.batch >= 1, "pretrain.batch", "must be >= 1");
  check(c.pretrain.eval_every >= 1, "pretrain.eval_every", "must be >= 1");
  check(c.pretrain.lr > 0.0, "pretrain.lr", "must be > 0");
  check(c.pretrain.holdout > 0.0 && c.pretrain.holdout < 1.0, "pretrain.holdout", "must be in (0, 1)");
  check(c.task.rating_size >= 10, "task.rating_size", "must be >= 10 for scorer pretraining");
  check(c.ablate_seeds >= 2, "ablate.seeds", "must be >= 2 (the grid reports a standard deviation)");
  check(c.jobs >= 1, "jobs", "must be >= 1");
  try {
    validate(c.trainer);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("trainer", e.what());
  }
  try {
    validate(c.task);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("task", e.what());
  }
}

std::string render_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& k : table().order) {
    const auto& e = table().entries.at(k);
    out << "# " << e.doc << "\n" << k << " = " << e.get(cfg) << "\n";
  }
  return out.str();
}

}  // namespace qeebm
