#pragma once

// Trainers (supervised, QE-static, QE-dynamic, REINFORCE, PPO), scorer pretraining,
// evaluation and model selection.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qeebm/data.hpp"
#include "qeebm/losses.hpp"
#include "qeebm/models.hpp"

namespace qeebm {

enum class Algorithm { kSupervised, kQeStatic, kQeDynamic, kReinforce, kPpo };

std::string_view algorithm_name(Algorithm a);
/// Accepts supervised | qe-static | qe-dynamic | reinforce | ppo.
Algorithm parse_algorithm(std::string_view name);
bool uses_scorer_in_loss(Algorithm a);

struct TrainerConfig {
  Algorithm algorithm = Algorithm::kSupervised;
  int epochs = 10;
  int batch_labeled = 16;
  int batch_unlabeled = 16;
  /// Samples per unlabeled source (energy term, RL).
  int k = 5;
  /// NCE negatives per labeled pair.
  int n = 5;
  double lr_task = 1e-3;
  double lr_energy = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;
  bool mono = true;
  bool filter = false;
  bool nn = false;
  /// Train scorer adapters instead of all scorer weights (QE-dynamic).
  bool adapters = false;
  int adapter_rank = 4;
  double keep_fraction = 0.8;
  int ppo_epochs = 1;
  double ppo_clip = 0.2;
  double temperature = 1.0;
  /// Energy weight ramps linearly from 0 to energy_weight_max over ramp_steps.
  double energy_weight_max = 0.001;
  long ramp_steps = 1000;
  ModelDims dims;
  std::uint64_t seed = 1;
};

void validate(const TrainerConfig& cfg);

struct Weights {
  double ce;
  double energy;
};

/// Energy weight min(1, t / ramp) * max_energy and CE weight max(0, 1 - 10 * energy weight).
Weights schedule(long step, double max_energy = 0.001, long ramp = 1000);

struct MetricsRecord {
  std::string run_id;
  std::string algorithm;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string split;
  double bleu_proxy = 0.0;
  double qe_score = 0.0;
  double oracle_quality = 0.0;
  LossBreakdown loss;
  double alpha = 0.0;
  double beta = 0.0;
  double wall_clock = 0.0;
};

struct EvalResult {
  double bleu_proxy = 0.0;
  double qe_score = 0.0;
  double oracle_quality = 0.0;
};

/// Corpus BLEU in [0, 100] over 1..4-grams with add-one smoothing and brevity penalty.
double corpus_bleu(std::span<const TokenSeq> hyps, std::span<const TokenSeq> refs);

/// Greedy-decodes every source of the split and scores the outputs.
EvalResult evaluate(const TaskNet& net, const EnergyNet& scorer, std::span<const ParallelPair> split);

/// 1-based epoch with the highest validation score, earliest on ties.
int early_stop(std::span<const double> valid_qe);

/// Epochs (0-based) where the qe score rises while oracle quality drops by more than
/// `drop` relative to the previous epoch.
std::vector<bool> reward_gaming_flags(std::span<const double> qe, std::span<const double> oracle,
                                      double drop = 0.02);

struct PretrainConfig {
  int max_steps = 10000;
  int batch = 16;
  double lr = 1e-3;
  int eval_every = 200;
  double target_pearson = 0.8;
  double abort_below = 0.5;
  /// Fraction of the rating split held out for correlation checks.
  double holdout = 0.2;
  double grad_clip = 5.0;
  std::uint64_t seed = 1;
};

struct PretrainReport {
  int steps = 0;
  double pearson = 0.0;
  /// Share of held-out sources whose gold target outscores a random hypothesis.
  double gold_over_random = 0.0;
  /// Share of held-out sources whose gold target outscores a corrupted copy of it.
  double gold_over_corrupted = 0.0;
  bool reached_target = false;
};

double pearson(std::span<const double> a, std::span<const double> b);

/// A rated hypothesis for scorer regression.
struct RatedExample {
  TokenSeq src;
  TokenSeq hyp;
  double quality;
};

/// Gold, token-substituted, random, truncated and extended hypotheses for each pair, rated
/// by oracle quality against the gold target.
std::vector<RatedExample> rated_mixture(std::span<const ParallelPair> pairs, int vocab,
                                        std::uint64_t seed);

/// Regresses the scorer output onto oracle quality. Throws std::runtime_error when the step
/// budget ends below abort_below held-out correlation.
PretrainReport pretrain_energy(EnergyNet& qe, const DataPools& pools, const PretrainConfig& cfg);

struct TrainHooks {
  /// Called with "sample-neg", "theta-update", "sample-unl", "phi-update" (or "ce-update" for
  /// the supervised trainer) and the global step.
  std::function<void(std::string_view event, long step)> on_event;
  /// Called for every metrics record as soon as it exists.
  std::function<void(const MetricsRecord&)> on_record;
  /// Called after each epoch's evaluation with the current models.
  std::function<void(int epoch, const TaskNet& net, const EnergyNet* energy, bool is_best)> on_epoch;
};

struct TrainResult {
  /// Task net restored to the best validation epoch.
  TaskNet net;
  /// The scorer as trained by QE-dynamic; the frozen scorer otherwise.
  EnergyNet energy;
  std::vector<MetricsRecord> records;
  int best_epoch = 0;
  EvalResult best_test;
  long steps = 0;
};

/// Runs the configured algorithm. `scorer` must already be pretrained; it is never modified.
TrainResult train(const TrainerConfig& cfg, const DataPools& pools, const EnergyNet& scorer,
                  const std::string& run_id = "run", const TrainHooks& hooks = {});

TrainResult train_supervised(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer);
TrainResult train_qe_static(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer);
TrainResult train_qe_dynamic(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer);
TrainResult train_reinforce(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer);
TrainResult train_ppo(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer);

}  // namespace qeebm
