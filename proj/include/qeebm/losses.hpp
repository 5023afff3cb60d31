#pragma once

// Training objectives for the task net and the scorer.
//
// Gradient partitioning is structural: the energy term only reads scorer parameters bound as
// constants, and the NCE loss only sees task-net log-probabilities as plain numbers.

#include <span>
#include <vector>

#include "qeebm/autodiff.hpp"
#include "qeebm/data.hpp"
#include "qeebm/decoding.hpp"
#include "qeebm/models.hpp"

namespace qeebm {

struct LossBreakdown {
  double ce = 0.0;
  double energy = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  int b_l = 0;
  int b_u = 0;
  int k = 0;
  int n = 0;
};

/// -sum_t log P(y_t | x, y_<t) for an EOS-terminated target.
ad::Tensor cross_entropy(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                         std::span<const Token> src, std::span<const Token> tgt);

/// (1/K) sum_j -s(x, y_j). Each sample is re-scored teacher-forced; its one-hot rows come from
/// ste_onehot on the decoder logits at the sampled tokens. qe_b must be a constant binding.
ad::Tensor energy_term(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                       const ad::Tensor& memory, const Bound& qe_b, const EnergyNet& qe,
                       std::span<const Token> src, std::span<const Hypothesis> samples);
ad::Tensor energy_term(ad::Graph& g, const Bound& task_b, const TaskNet& net, const Bound& qe_b,
                       const EnergyNet& qe, std::span<const Token> src,
                       std::span<const Hypothesis> samples);

struct UnlabeledItem {
  TokenSeq src;
  std::vector<Hypothesis> samples;
};

struct JointLoss {
  ad::Tensor loss;
  LossBreakdown breakdown;
};

/// alpha * mean CE over the labeled batch + beta * mean energy term over the unlabeled batch.
JointLoss joint_nmt_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net, const Bound& qe_b,
                         const EnergyNet& qe, std::span<const ParallelPair> labeled,
                         std::span<const UnlabeledItem> unlabeled, double alpha, double beta);

/// Adjusted scores of one labeled pair: the gold target and its negatives.
struct NceScores {
  ad::Tensor gold;
  std::vector<ad::Tensor> negatives;
};

/// -(1/B) sum_i [log sigma(g_i) + sum_j log(1 - sigma(n_ij))].
ad::Tensor nce_objective(std::span<const NceScores> batch);

struct NceExample {
  TokenSeq src;
  TokenSeq gold;
  std::vector<Hypothesis> negatives;
};

/// NCE loss with adjusted score s(x, y) - log P(y | x). The task net enters only through
/// gradient-free log-probabilities.
ad::Tensor nce_loss(ad::Graph& g, const Bound& qe_b, const EnergyNet& qe, const TaskNet& net,
                    std::span<const NceExample> batch);

/// Reward scaling by the running min and max of the current epoch, centred by the running
/// mean of scaled rewards.
class RewardNormalizer {
 public:
  static constexpr double kEps = 1e-8;

  /// Folds the batch into the statistics and returns the normalized rewards.
  std::vector<double> normalize_batch(std::span<const double> rewards);
  void reset();

  std::size_t count() const { return count_; }
  double min() const { return min_; }
  double max() const { return max_; }
  double mean_scaled() const { return count_ ? scaled_sum_ / static_cast<double>(count_) : 0.0; }

 private:
  double min_ = 0.0;
  double max_ = 0.0;
  double scaled_sum_ = 0.0;
  std::size_t count_ = 0;
};

/// -(1/K) sum_j w_j log P(y_j | x).
ad::Tensor policy_gradient_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                                const ad::Tensor& memory, std::span<const Hypothesis> samples,
                                std::span<const double> weights);

/// REINFORCE with normalized rewards.
ad::Tensor reinforce_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                          std::span<const Token> src, std::span<const Hypothesis> samples,
                          std::span<const double> rewards, RewardNormalizer& norm);

/// -(1/K) sum_j min(rho_j A_j, clip(rho_j, 1-eps, 1+eps) A_j), rho_j = exp(new_j - old_j).
ad::Tensor ppo_surrogate(std::span<const ad::Tensor> new_logprobs,
                         std::span<const double> old_logprobs, std::span<const double> advantages,
                         double clip);

struct PpoLoss {
  ad::Tensor loss;
  double policy = 0.0;
  double value = 0.0;
};

/// Clipped surrogate with advantage (reward - value estimate) plus value_weight times the
/// mean squared value error. rewards are already normalized.
PpoLoss ppo_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net, const Bound& value_b,
                 const ValueHead& head, std::span<const Token> src,
                 std::span<const Hypothesis> samples, std::span<const double> old_logprobs,
                 std::span<const double> rewards, double clip = 0.2, double value_weight = 0.5);

}  // namespace qeebm
