#pragma once

// Experiment runner behind the command-line tool: single runs, the ablation grid, metrics
// serialization and plot-ready series.
//
// Run directory layout:
//   corpus/{labeled,valid,test,rating}.tsv, corpus/unlabeled.txt
//   scorer-<key>.ckpt, scorer-<key>.json   pretrained scorer cache and its report
//   metrics.jsonl                          one MetricsRecord per line, flushed per record
//   epoch-<e>.task.ckpt [epoch-<e>.energy.ckpt]  best and last epoch only
//   summary.json                           written last

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "qeebm/config.hpp"
#include "qeebm/training.hpp"

namespace qeebm {

/// Field names of a serialized MetricsRecord, in output order.
const std::vector<std::string>& metrics_fields();
/// Single-line JSON object. Doubles are written with round-trip precision.
std::string metrics_json(const MetricsRecord& r);
/// Inverse of metrics_json. Throws std::invalid_argument on malformed JSON or a field set
/// other than metrics_fields().
MetricsRecord parse_metrics_json(std::string_view line);

/// Cache key of the pretrained scorer: covers the task, model and pretraining settings.
std::string scorer_key(const RunConfig& cfg);

struct ScorerResult {
  EnergyNet scorer;
  PretrainReport report;
  bool from_cache = false;
};

/// Loads scorer-<key>.ckpt from cache_dir when present and valid, else pretrains and caches.
ScorerResult obtain_scorer(const RunConfig& cfg, const DataPools& pools,
                           const std::filesystem::path& cache_dir, std::ostream& log);

struct RunSummary {
  std::string run_id;
  std::string algorithm;
  std::uint64_t seed = 0;
  int best_epoch = 0;
  long steps = 0;
  EvalResult best_test;
  double scorer_pearson = 0.0;
};

/// Trains one configuration into cfg.out_dir with an already pretrained scorer.
RunSummary execute_run(const RunConfig& cfg, const DataPools& pools, const ScorerResult& scorer);

std::string summary_line(const RunSummary& s);

/// Exit status 0 on success, 1 when the run fails. Config errors are the caller's (status 2).
int cmd_run(const RunConfig& cfg, std::ostream& out, std::ostream& err);

struct AblationCell {
  Algorithm algorithm;
  bool mono;
  bool filter;
  bool nn;

  std::string label() const;
};

/// The 16 grid rows: supervised +-filter, reinforce and ppo +-mono, and for each energy
/// variant -mono plus +mono x {none, nn, filter, filter & nn}.
std::vector<AblationCell> ablation_grid();

struct AblationRow {
  AblationCell cell;
  /// Seeds whose run completed.
  int completed = 0;
  bool failed = false;
  EvalResult mean;
  /// Sample standard deviation across seeds.
  EvalResult stddev;
};

std::vector<AblationRow> run_ablation(const RunConfig& cfg, std::ostream& log);
std::string ablation_csv(const std::vector<AblationRow>& rows);
/// Writes <out_dir>/ablation.csv. Exit status 1 when any row failed.
int cmd_ablate(const RunConfig& cfg, std::ostream& out, std::ostream& err);

struct PlotdataResult {
  std::vector<std::filesystem::path> files;
  int skipped = 0;
};

/// One CSV per run id: epoch-sorted metrics of every split, loss terms and the reward-gaming
/// flag computed on the validation split. Malformed lines are skipped and counted.
PlotdataResult plotdata(const std::vector<std::filesystem::path>& inputs,
                        const std::filesystem::path& out_dir);
int cmd_plotdata(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out_dir,
                 std::ostream& out, std::ostream& err);

}  // namespace qeebm
