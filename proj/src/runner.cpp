#include "qeebm/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "qeebm/checkpoint.hpp"
#include "qeebm/rng.hpp"

namespace qeebm {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

const std::vector<std::string>& loss_fields() {
  static const std::vector<std::string> f{"ce", "energy", "total", "b_l", "b_u", "k", "n"};
  return f;
}

void write_atomically(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& body) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  body(out);
}

/// Runs fn(0..count-1) on up to `jobs` threads. fn must not throw.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

ordered_json eval_json(const EvalResult& e) {
  return ordered_json{{"bleu_proxy", e.bleu_proxy}, {"qe_score", e.qe_score}, {"oracle_quality", e.oracle_quality}};
}

ordered_json report_json(const PretrainReport& r) {
  return ordered_json{{"steps", r.steps},
                      {"pearson", r.pearson},
                      {"gold_over_random", r.gold_over_random},
                      {"gold_over_corrupted", r.gold_over_corrupted},
                      {"reached_target", r.reached_target}};
}

void write_corpus(const fs::path& dir, const DataPools& pools) {
  fs::create_directories(dir);
  const std::pair<const char*, const std::vector<ParallelPair>*> splits[] = {
      {"labeled.tsv", &pools.labeled}, {"valid.tsv", &pools.valid}, {"test.tsv", &pools.test}, {"rating.tsv", &pools.rating}};
  for (const auto& [name, pairs] : splits) write_file(dir / name, [&](std::ostream& o) { write_pairs(o, *pairs); });
  write_file(dir / "unlabeled.txt", [&](std::ostream& o) { write_sources(o, pools.unlabeled); });
}

std::optional<int> checkpoint_epoch(const fs::path& p) {
  const std::string name = p.filename().string();
  if (name.rfind("epoch-", 0) != 0 || p.extension() != ".ckpt") return std::nullopt;
  try {
    std::size_t used = 0;
    const int e = std::stoi(name.substr(6), &used);
    return e;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void prune_checkpoints(const fs::path& dir, const std::set<int>& keep) {
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto e = checkpoint_epoch(entry.path());
    if (e && !keep.contains(*e)) fs::remove(entry.path());
  }
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string number(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

// --- metrics records -------------------------------------------------------------------------

const std::vector<std::string>& metrics_fields() {
  static const std::vector<std::string> f{"run_id",     "algorithm",      "seed", "epoch", "split",
                                          "bleu_proxy", "qe_score",       "oracle_quality",
                                          "loss",       "alpha",          "beta", "wall_clock"};
  return f;
}

std::string metrics_json(const MetricsRecord& r) {
  ordered_json loss{{"ce", r.loss.ce},     {"energy", r.loss.energy}, {"total", r.loss.total},
                    {"b_l", r.loss.b_l},   {"b_u", r.loss.b_u},       {"k", r.loss.k},
                    {"n", r.loss.n}};
  ordered_json j{{"run_id", r.run_id},
                 {"algorithm", r.algorithm},
                 {"seed", r.seed},
                 {"epoch", r.epoch},
                 {"split", r.split},
                 {"bleu_proxy", r.bleu_proxy},
                 {"qe_score", r.qe_score},
                 {"oracle_quality", r.oracle_quality},
                 {"loss", std::move(loss)},
                 {"alpha", r.alpha},
                 {"beta", r.beta},
                 {"wall_clock", r.wall_clock}};
  return j.dump();
}

MetricsRecord parse_metrics_json(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("metrics record is not JSON: ") + e.what());
  }
  auto require_keys = [](const nlohmann::json& obj, const std::vector<std::string>& want, const char* what) {
    if (!obj.is_object() || obj.size() != want.size())
      throw std::invalid_argument(std::string(what) + " does not have the expected fields");
    for (const auto& k : want)
      if (!obj.contains(k)) throw std::invalid_argument(std::string(what) + " lacks field '" + k + "'");
  };
  require_keys(j, metrics_fields(), "metrics record");
  require_keys(j["loss"], loss_fields(), "loss breakdown");
  try {
    MetricsRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.algorithm = j.at("algorithm").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.epoch = j.at("epoch").get<int>();
    r.split = j.at("split").get<std::string>();
    r.bleu_proxy = j.at("bleu_proxy").get<double>();
    r.qe_score = j.at("qe_score").get<double>();
    r.oracle_quality = j.at("oracle_quality").get<double>();
    const auto& l = j.at("loss");
    r.loss.ce = l.at("ce").get<double>();
    r.loss.energy = l.at("energy").get<double>();
    r.loss.total = l.at("total").get<double>();
    r.loss.b_l = l.at("b_l").get<int>();
    r.loss.b_u = l.at("b_u").get<int>();
    r.loss.k = l.at("k").get<int>();
    r.loss.n = l.at("n").get<int>();
    r.alpha = r.loss.alpha = j.at("alpha").get<double>();
    r.beta = r.loss.beta = j.at("beta").get<double>();
    r.wall_clock = j.at("wall_clock").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("metrics record has a mistyped field: ") + e.what());
  }
}

// --- single runs -----------------------------------------------------------------------------

std::string scorer_key(const RunConfig& cfg) {
  std::string text;
  for (const auto& k : config_keys()) {
    const bool relevant = k.name == "seed" || k.name.rfind("task.", 0) == 0 || k.name.rfind("model.", 0) == 0 ||
                          k.name.rfind("pretrain.", 0) == 0;
    if (relevant) text += k.name + "=" + get_setting(cfg, k.name) + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(text));
  return buf;
}

ScorerResult obtain_scorer(const RunConfig& cfg, const DataPools& pools, const fs::path& cache_dir,
                           std::ostream& log) {
  fs::create_directories(cache_dir);
  const std::string key = scorer_key(cfg);
  const fs::path ckpt = cache_dir / ("scorer-" + key + ".ckpt");
  const fs::path report = cache_dir / ("scorer-" + key + ".json");
  ScorerResult out{EnergyNet(cfg.trainer.dims, derive_seed(cfg.pretrain.seed, "init:scorer")), {}, false};

  if (fs::exists(ckpt) && fs::exists(report)) {
    try {
      load_checkpoint(ckpt, out.scorer, ModelKind::kEnergy);
      std::ifstream in(report);
      const auto j = nlohmann::json::parse(in);
      out.report.steps = j.at("steps").get<int>();
      out.report.pearson = j.at("pearson").get<double>();
      out.report.gold_over_random = j.at("gold_over_random").get<double>();
      out.report.gold_over_corrupted = j.at("gold_over_corrupted").get<double>();
      out.report.reached_target = j.at("reached_target").get<bool>();
      out.from_cache = true;
      log << "scorer: loaded " << ckpt.string() << " (held-out pearson " << fixed6(out.report.pearson) << ")\n";
      return out;
    } catch (const std::exception& e) {
      log << "scorer: cache unusable (" << e.what() << "), pretraining again\n";
      out.scorer = EnergyNet(cfg.trainer.dims, derive_seed(cfg.pretrain.seed, "init:scorer"));
    }
  }

  out.report = pretrain_energy(out.scorer, pools, cfg.pretrain);
  save_checkpoint(ckpt, out.scorer, ModelKind::kEnergy);
  write_atomically(report, report_json(out.report).dump(2) + "\n");
  log << "scorer: pretrained in " << out.report.steps << " steps, held-out pearson " << fixed6(out.report.pearson)
      << ", gold over random " << fixed6(out.report.gold_over_random) << "\n";
  return out;
}

RunSummary execute_run(const RunConfig& cfg, const DataPools& pools, const ScorerResult& scorer) {
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  fs::remove(dir / "summary.json");
  prune_checkpoints(dir, {});
  write_corpus(dir / "corpus", pools);
  write_atomically(dir / "config.txt", render_config(cfg));

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
  int best = 0;
  TrainHooks hooks;
  hooks.on_record = [&](const MetricsRecord& r) {
    metrics << metrics_json(r) << '\n';
    metrics.flush();
  };
  hooks.on_epoch = [&](int epoch, const TaskNet& net, const EnergyNet* energy, bool is_best) {
    const std::string stem = "epoch-" + std::to_string(epoch);
    save_checkpoint(dir / (stem + ".task.ckpt"), net, ModelKind::kTask);
    if (energy) save_checkpoint(dir / (stem + ".energy.ckpt"), *energy, ModelKind::kEnergy);
    if (is_best) best = epoch;
    prune_checkpoints(dir, {best, epoch});
  };

  const TrainResult res = train(cfg.trainer, pools, scorer.scorer, cfg.run_id, hooks);
  if (!metrics) throw std::runtime_error("metrics stream failed");

  RunSummary s;
  s.run_id = cfg.run_id;
  s.algorithm = std::string(algorithm_name(cfg.trainer.algorithm));
  s.seed = cfg.trainer.seed;
  s.best_epoch = res.best_epoch;
  s.steps = res.steps;
  s.best_test = res.best_test;
  s.scorer_pearson = scorer.report.pearson;

  ordered_json j{{"run_id", s.run_id},
                 {"algorithm", s.algorithm},
                 {"seed", s.seed},
                 {"best_epoch", s.best_epoch},
                 {"steps", s.steps},
                 {"test", eval_json(s.best_test)},
                 {"scorer", report_json(scorer.report)},
                 {"best_checkpoint", "epoch-" + std::to_string(s.best_epoch) + ".task.ckpt"}};
  write_atomically(dir / "summary.json", j.dump(2) + "\n");
  return s;
}

std::string summary_line(const RunSummary& s) {
  std::ostringstream o;
  o << "run " << s.run_id << " algorithm=" << s.algorithm << " seed=" << s.seed << " best_epoch=" << s.best_epoch
    << " steps=" << s.steps << " test_bleu=" << fixed6(s.best_test.bleu_proxy)
    << " test_qe=" << fixed6(s.best_test.qe_score) << " test_oracle=" << fixed6(s.best_test.oracle_quality);
  return o.str();
}

int cmd_run(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    const DataPools pools = generate_corpus(cfg.task);
    const ScorerResult scorer = obtain_scorer(cfg, pools, cfg.out_dir, err);
    out << summary_line(execute_run(cfg, pools, scorer)) << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << "\n";
    return 1;
  }
}

// --- ablation grid ---------------------------------------------------------------------------

std::string AblationCell::label() const {
  std::string s(algorithm_name(algorithm));
  if (algorithm != Algorithm::kSupervised) s += mono ? "+mono" : "-mono";
  if (filter) s += "+filter";
  if (nn) s += "+nn";
  return s;
}

std::vector<AblationCell> ablation_grid() {
  using A = Algorithm;
  std::vector<AblationCell> g{
      {A::kSupervised, false, false, false}, {A::kSupervised, false, true, false},
      {A::kReinforce, false, false, false},  {A::kReinforce, true, false, false},
      {A::kPpo, false, false, false},        {A::kPpo, true, false, false},
  };
  for (A a : {A::kQeStatic, A::kQeDynamic}) {
    g.push_back({a, false, false, false});
    g.push_back({a, true, false, false});
    g.push_back({a, true, false, true});
    g.push_back({a, true, true, false});
    g.push_back({a, true, true, true});
  }
  return g;
}

namespace {

std::optional<EvalResult> read_cell_summary(const fs::path& dir) {
  const fs::path p = dir / "summary.json";
  if (!fs::exists(p)) return std::nullopt;
  try {
    std::ifstream in(p);
    const auto j = nlohmann::json::parse(in);
    const auto& t = j.at("test");
    return EvalResult{t.at("bleu_proxy").get<double>(), t.at("qe_score").get<double>(),
                      t.at("oracle_quality").get<double>()};
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

std::vector<AblationRow> run_ablation(const RunConfig& cfg, std::ostream& log) {
  const auto grid = ablation_grid();
  const auto seeds = static_cast<std::size_t>(cfg.ablate_seeds);
  std::mutex log_mu;
  auto say = [&](const std::string& text) {
    std::lock_guard lock(log_mu);
    log << text << std::flush;
  };
  fs::create_directories(cfg.out_dir);

  struct SeedData {
    RunConfig cfg;
    std::optional<DataPools> pools;
    std::optional<ScorerResult> scorer;
  };
  std::vector<SeedData> data(seeds);
  parallel_for(seeds, cfg.jobs, [&](std::size_t i) {
    std::ostringstream msg;
    SeedData& d = data[i];
    d.cfg = cfg;
    apply_setting(d.cfg, "seed", std::to_string(cfg.trainer.seed + i));
    msg << "seed " << d.cfg.trainer.seed << ": ";
    try {
      d.pools = generate_corpus(d.cfg.task);
      d.scorer = obtain_scorer(d.cfg, *d.pools, cfg.out_dir / "scorers", msg);
    } catch (const std::exception& e) {
      d.pools.reset();
      msg << "setup failed: " << e.what() << "\n";
    }
    say(msg.str());
  });

  auto cell_dir = [&](const AblationCell& c, std::uint64_t seed) {
    return cfg.out_dir / "cells" / c.label() / ("seed-" + std::to_string(seed));
  };
  parallel_for(grid.size() * seeds, cfg.jobs, [&](std::size_t t) {
    const AblationCell& cell = grid[t / seeds];
    const SeedData& d = data[t % seeds];
    RunConfig c = d.cfg;
    c.trainer.algorithm = cell.algorithm;
    c.trainer.mono = cell.mono;
    c.trainer.filter = cell.filter;
    c.trainer.nn = cell.nn;
    c.run_id = cell.label() + "-seed" + std::to_string(c.trainer.seed);
    c.out_dir = cell_dir(cell, c.trainer.seed);
    fs::create_directories(c.out_dir);
    fs::remove(c.out_dir / "summary.json");
    fs::remove(c.out_dir / "error.txt");
    if (!d.scorer) {
      write_atomically(c.out_dir / "error.txt", "seed setup failed\n");
      return;
    }
    try {
      const RunSummary s = execute_run(c, *d.pools, *d.scorer);
      say(summary_line(s) + "\n");
    } catch (const std::exception& e) {
      write_atomically(c.out_dir / "error.txt", std::string(e.what()) + "\n");
      say("cell " + c.run_id + " failed: " + e.what() + "\n");
    }
  });

  std::vector<AblationRow> rows;
  for (const auto& cell : grid) {
    AblationRow row{cell, 0, false, {}, {}};
    std::vector<EvalResult> got;
    for (std::size_t i = 0; i < seeds; ++i)
      if (auto r = read_cell_summary(cell_dir(cell, cfg.trainer.seed + i))) got.push_back(*r);
    row.completed = static_cast<int>(got.size());
    row.failed = got.size() != seeds;
    if (!got.empty()) {
      auto stat = [&](double EvalResult::*f, double& mean, double& sd) {
        double s = 0.0;
        for (const auto& r : got) s += r.*f;
        mean = s / static_cast<double>(got.size());
        double ss = 0.0;
        for (const auto& r : got) ss += (r.*f - mean) * (r.*f - mean);
        sd = got.size() > 1 ? std::sqrt(ss / static_cast<double>(got.size() - 1)) : 0.0;
      };
      stat(&EvalResult::bleu_proxy, row.mean.bleu_proxy, row.stddev.bleu_proxy);
      stat(&EvalResult::qe_score, row.mean.qe_score, row.stddev.qe_score);
      stat(&EvalResult::oracle_quality, row.mean.oracle_quality, row.stddev.oracle_quality);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << "algorithm,mono,filter,nn,status,seeds,bleu_proxy_mean,bleu_proxy_std,qe_score_mean,qe_score_std,"
       "oracle_quality_mean,oracle_quality_std\n";
  for (const auto& r : rows) {
    o << algorithm_name(r.cell.algorithm) << ',' << r.cell.mono << ',' << r.cell.filter << ',' << r.cell.nn << ','
      << (r.failed ? "failed" : "ok") << ',' << r.completed;
    for (auto f : {&EvalResult::bleu_proxy, &EvalResult::qe_score, &EvalResult::oracle_quality}) {
      if (r.completed == 0) o << ",,";
      else o << ',' << fixed6(r.mean.*f) << ',' << fixed6(r.stddev.*f);
    }
    o << '\n';
  }
  return o.str();
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    const auto rows = run_ablation(cfg, err);
    const fs::path csv = cfg.out_dir / "ablation.csv";
    write_atomically(csv, ablation_csv(rows));
    const auto failed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.failed; });
    out << "ablation: " << rows.size() << " rows, " << failed << " failed, written to " << csv.string() << "\n";
    return failed == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    err << "ablation failed: " << e.what() << "\n";
    return 1;
  }
}

// --- plot data -------------------------------------------------------------------------------

PlotdataResult plotdata(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
  static const std::vector<std::string> splits{"train", "valid", "test"};
  struct Point {
    std::string algorithm;
    std::uint64_t seed = 0;
    std::map<std::string, EvalResult> by_split;
    LossBreakdown loss;
  };
  PlotdataResult res;
  std::map<std::string, std::map<int, Point>> runs;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      MetricsRecord r;
      try {
        r = parse_metrics_json(line);
      } catch (const std::invalid_argument&) {
        ++res.skipped;
        continue;
      }
      if (std::find(splits.begin(), splits.end(), r.split) == splits.end() || r.run_id.empty() ||
          r.run_id.find_first_of("/\\") != std::string::npos) {
        ++res.skipped;
        continue;
      }
      Point& p = runs[r.run_id][r.epoch];
      p.algorithm = r.algorithm;
      p.seed = r.seed;
      p.by_split[r.split] = {r.bleu_proxy, r.qe_score, r.oracle_quality};
      p.loss = r.loss;
    }
  }

  fs::create_directories(out_dir);
  for (const auto& [run_id, epochs] : runs) {
    std::vector<double> qe, oracle;
    std::vector<int> valid_epochs;
    for (const auto& [epoch, p] : epochs)
      if (auto it = p.by_split.find("valid"); it != p.by_split.end()) {
        valid_epochs.push_back(epoch);
        qe.push_back(it->second.qe_score);
        oracle.push_back(it->second.oracle_quality);
      }
    std::map<int, bool> flag;
    const auto flags = reward_gaming_flags(qe, oracle);
    for (std::size_t i = 0; i < flags.size(); ++i) flag[valid_epochs[i]] = flags[i];

    std::ostringstream o;
    o << "epoch,algorithm,seed";
    for (const auto& s : splits) o << ',' << s << "_bleu_proxy," << s << "_qe_score," << s << "_oracle_quality";
    o << ",loss_ce,loss_energy,loss_total,alpha,beta,gaming_flag\n";
    for (const auto& [epoch, p] : epochs) {
      o << epoch << ',' << p.algorithm << ',' << p.seed;
      for (const auto& s : splits) {
        if (auto it = p.by_split.find(s); it != p.by_split.end())
          o << ',' << number(it->second.bleu_proxy) << ',' << number(it->second.qe_score) << ','
            << number(it->second.oracle_quality);
        else o << ",,,";
      }
      o << ',' << number(p.loss.ce) << ',' << number(p.loss.energy) << ',' << number(p.loss.total) << ','
        << number(p.loss.alpha) << ',' << number(p.loss.beta) << ',' << (flag.contains(epoch) && flag[epoch] ? 1 : 0)
        << '\n';
    }
    const fs::path file = out_dir / (run_id + ".csv");
    write_atomically(file, o.str());
    res.files.push_back(file);
  }
  return res;
}

int cmd_plotdata(const std::vector<fs::path>& inputs, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  try {
    const auto res = plotdata(inputs, out_dir);
    if (res.skipped > 0) err << "warning: skipped " << res.skipped << " malformed record(s)\n";
    for (const auto& f : res.files) out << f.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "plotdata failed: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace qeebm
