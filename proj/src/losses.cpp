#include "qeebm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qeebm {

ad::Tensor cross_entropy(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                         std::span<const Token> src, std::span<const Token> tgt) {
  return ad::scale(sequence_logprob(g, task_b, net, src, tgt), -1.0);
}

ad::Tensor energy_term(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                       const ad::Tensor& memory, const Bound& qe_b, const EnergyNet& qe,
                       std::span<const Token> src, std::span<const Hypothesis> samples) {
  if (samples.empty()) throw std::invalid_argument("energy_term: no samples");
  for (const auto& t : qe_b)
    if (t.requires_grad())
      throw std::invalid_argument("energy_term: scorer parameters must be bound as constants");
  std::vector<ad::Tensor> energies;
  energies.reserve(samples.size());
  for (const auto& hyp : samples) {
    if (hyp.tokens.empty()) throw std::invalid_argument("energy_term: empty sample");
    const auto logits = net.decode(g, task_b, memory, decoder_input(hyp.tokens)).logits;
    const auto rows = ad::ste_onehot(logits, hyp.tokens);
    energies.push_back(ad::scale(qe.score(g, qe_b, src, rows), -1.0));
  }
  return ad::reduce_mean(ad::stack(energies));
}

ad::Tensor energy_term(ad::Graph& g, const Bound& task_b, const TaskNet& net, const Bound& qe_b,
                       const EnergyNet& qe, std::span<const Token> src,
                       std::span<const Hypothesis> samples) {
  return energy_term(g, task_b, net, net.encode(g, task_b, src), qe_b, qe, src, samples);
}

JointLoss joint_nmt_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net, const Bound& qe_b,
                         const EnergyNet& qe, std::span<const ParallelPair> labeled,
                         std::span<const UnlabeledItem> unlabeled, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("joint loss: negative weight");
  if (labeled.empty()) throw std::invalid_argument("joint loss: empty labeled batch");
  if (beta > 0.0 && unlabeled.empty())
    throw std::invalid_argument("joint loss: energy weight set but unlabeled batch is empty");

  JointLoss out;
  auto& br = out.breakdown;
  br.alpha = alpha;
  br.beta = beta;
  br.b_l = static_cast<int>(labeled.size());
  br.b_u = static_cast<int>(unlabeled.size());

  std::vector<ad::Tensor> ce;
  ce.reserve(labeled.size());
  for (const auto& p : labeled) ce.push_back(cross_entropy(g, task_b, net, p.src, p.tgt));
  const ad::Tensor ce_mean = ad::reduce_mean(ad::stack(ce));
  br.ce = ce_mean.item();
  ad::Tensor total = ad::scale(ce_mean, alpha);

  if (!unlabeled.empty()) {
    std::vector<ad::Tensor> energy;
    energy.reserve(unlabeled.size());
    for (const auto& u : unlabeled) {
      energy.push_back(energy_term(g, task_b, net, qe_b, qe, u.src, u.samples));
      br.k = std::max(br.k, static_cast<int>(u.samples.size()));
    }
    const ad::Tensor energy_mean = ad::reduce_mean(ad::stack(energy));
    br.energy = energy_mean.item();
    total = ad::add(total, ad::scale(energy_mean, beta));
  }
  br.total = total.item();
  out.loss = total;
  return out;
}

ad::Tensor nce_objective(std::span<const NceScores> batch) {
  if (batch.empty()) throw std::invalid_argument("nce: empty batch");
  std::vector<ad::Tensor> per_pair;
  per_pair.reserve(batch.size());
  for (const auto& item : batch) {
    if (item.negatives.empty()) throw std::invalid_argument("nce: pair without negatives");
    std::vector<ad::Tensor> terms{ad::log_sigmoid(item.gold)};
    // log(1 - sigma(x)) = log sigma(-x)
    for (const auto& neg : item.negatives) terms.push_back(ad::log_sigmoid(ad::scale(neg, -1.0)));
    per_pair.push_back(ad::reduce_sum(ad::stack(terms)));
  }
  return ad::scale(ad::reduce_mean(ad::stack(per_pair)), -1.0);
}

ad::Tensor nce_loss(ad::Graph& g, const Bound& qe_b, const EnergyNet& qe, const TaskNet& net,
                    std::span<const NceExample> batch) {
  std::vector<NceScores> scores;
  scores.reserve(batch.size());
  auto adjusted = [&](std::span<const Token> src, std::span<const Token> hyp) {
    const double logp = sequence_logprob_value(net, src, hyp);
    return ad::add_scalar(qe.score_tokens(g, qe_b, src, hyp), -logp);
  };
  for (const auto& ex : batch) {
    NceScores s{adjusted(ex.src, ex.gold), {}};
    for (const auto& neg : ex.negatives) s.negatives.push_back(adjusted(ex.src, neg.tokens));
    scores.push_back(std::move(s));
  }
  return nce_objective(scores);
}

std::vector<double> RewardNormalizer::normalize_batch(std::span<const double> rewards) {
  if (rewards.empty()) return {};
  if (count_ == 0) min_ = max_ = rewards.front();
  for (double r : rewards) {
    if (!std::isfinite(r)) throw std::invalid_argument("reward is not finite");
    min_ = std::min(min_, r);
    max_ = std::max(max_, r);
  }
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) {
    const double scaled = (r - min_) / (max_ - min_ + kEps);
    scaled_sum_ += scaled;
    ++count_;
    out.push_back(scaled);
  }
  const double mean = mean_scaled();
  for (double& r : out) r -= mean;
  return out;
}

void RewardNormalizer::reset() { *this = RewardNormalizer(); }

ad::Tensor policy_gradient_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                                const ad::Tensor& memory, std::span<const Hypothesis> samples,
                                std::span<const double> weights) {
  if (samples.empty()) throw std::invalid_argument("policy gradient: no samples");
  if (samples.size() != weights.size())
    throw std::invalid_argument("policy gradient: " + std::to_string(samples.size()) +
                                " samples but " + std::to_string(weights.size()) + " rewards");
  std::vector<ad::Tensor> terms;
  terms.reserve(samples.size());
  for (std::size_t j = 0; j < samples.size(); ++j)
    terms.push_back(ad::scale(sequence_logprob(g, task_b, net, memory, samples[j].tokens), weights[j]));
  return ad::scale(ad::reduce_mean(ad::stack(terms)), -1.0);
}

ad::Tensor reinforce_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net,
                          std::span<const Token> src, std::span<const Hypothesis> samples,
                          std::span<const double> rewards, RewardNormalizer& norm) {
  if (samples.size() != rewards.size())
    throw std::invalid_argument("reinforce: " + std::to_string(samples.size()) + " samples but " +
                                std::to_string(rewards.size()) + " rewards");
  const auto weights = norm.normalize_batch(rewards);
  return policy_gradient_loss(g, task_b, net, net.encode(g, task_b, src), samples, weights);
}

ad::Tensor ppo_surrogate(std::span<const ad::Tensor> new_logprobs,
                         std::span<const double> old_logprobs, std::span<const double> advantages,
                         double clip) {
  if (new_logprobs.empty()) throw std::invalid_argument("ppo: no samples");
  if (old_logprobs.size() != new_logprobs.size() || advantages.size() != new_logprobs.size())
    throw std::invalid_argument("ppo: need one old logprob and one advantage per sample");
  if (!(clip > 0.0 && clip < 1.0)) throw std::invalid_argument("ppo: clip must be in (0, 1)");
  std::vector<ad::Tensor> terms;
  terms.reserve(new_logprobs.size());
  for (std::size_t j = 0; j < new_logprobs.size(); ++j) {
    const auto ratio = ad::exp(ad::add_scalar(new_logprobs[j], -old_logprobs[j]));
    const auto unclipped = ad::scale(ratio, advantages[j]);
    const auto clipped = ad::scale(ad::clamp(ratio, 1.0 - clip, 1.0 + clip), advantages[j]);
    terms.push_back(ad::minimum(unclipped, clipped));
  }
  return ad::scale(ad::reduce_mean(ad::stack(terms)), -1.0);
}

PpoLoss ppo_loss(ad::Graph& g, const Bound& task_b, const TaskNet& net, const Bound& value_b,
                 const ValueHead& head, std::span<const Token> src,
                 std::span<const Hypothesis> samples, std::span<const double> old_logprobs,
                 std::span<const double> rewards, double clip, double value_weight) {
  if (old_logprobs.size() != samples.size())
    throw std::invalid_argument("ppo: " + std::to_string(samples.size()) + " samples but " +
                                std::to_string(old_logprobs.size()) + " old logprobs");
  if (rewards.size() != samples.size())
    throw std::invalid_argument("ppo: " + std::to_string(samples.size()) + " samples but " +
                                std::to_string(rewards.size()) + " rewards");
  const auto memory = net.encode(g, task_b, src);
  std::vector<ad::Tensor> new_lp, value_err;
  std::vector<double> advantages;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto& tokens = samples[j].tokens;
    const auto dec = net.decode(g, task_b, memory, decoder_input(tokens));
    new_lp.push_back(ad::reduce_sum(ad::pick(ad::log_softmax(dec.logits), tokens)));
    const auto v = head.value(g, value_b, dec.states);
    advantages.push_back(rewards[j] - v.item());
    const auto err = ad::add_scalar(v, -rewards[j]);
    value_err.push_back(ad::mul(err, err));
  }
  PpoLoss out;
  const auto policy = ppo_surrogate(new_lp, old_logprobs, advantages, clip);
  const auto value = ad::reduce_mean(ad::stack(value_err));
  out.policy = policy.item();
  out.value = value.item();
  out.loss = ad::add(policy, ad::scale(value, value_weight));
  return out;
}

}  // namespace qeebm
