#include "qeebm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

#include "qeebm/decoding.hpp"
#include "qeebm/optim.hpp"
#include "qeebm/rng.hpp"

namespace qeebm {

std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kSupervised: return "supervised";
    case Algorithm::kQeStatic: return "qe-static";
    case Algorithm::kQeDynamic: return "qe-dynamic";
    case Algorithm::kReinforce: return "reinforce";
    case Algorithm::kPpo: return "ppo";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  for (auto a : {Algorithm::kSupervised, Algorithm::kQeStatic, Algorithm::kQeDynamic,
                 Algorithm::kReinforce, Algorithm::kPpo})
    if (algorithm_name(a) == name) return a;
  throw std::invalid_argument("unknown algorithm '" + std::string(name) + "'");
}

bool uses_scorer_in_loss(Algorithm a) { return a != Algorithm::kSupervised; }

void validate(const TrainerConfig& c) {
  auto fail = [](const std::string& why) { throw std::invalid_argument("trainer config: " + why); };
  if (c.epochs < 1) fail("epochs must be >= 1");
  if (c.batch_labeled < 1 || c.batch_unlabeled < 1) fail("batch sizes must be >= 1");
  if (c.k < 1 || c.n < 1) fail("k and n must be >= 1");
  if (!(c.lr_task > 0.0) || !(c.lr_energy > 0.0)) fail("learning rates must be > 0");
  if (!(c.temperature > 0.0)) fail("temperature must be > 0");
  if (!(c.keep_fraction > 0.0 && c.keep_fraction <= 1.0)) fail("keep_fraction must be in (0, 1]");
  if (c.adapter_rank < 1 || c.adapter_rank >= c.dims.d_model) fail("adapter_rank must be in [1, d)");
  if (c.ppo_epochs < 1) fail("ppo_epochs must be >= 1");
  if (!(c.ppo_clip > 0.0 && c.ppo_clip < 1.0)) fail("ppo_clip must be in (0, 1)");
  if (c.energy_weight_max < 0.0 || c.energy_weight_max > 0.1) fail("energy_weight_max must be in [0, 0.1]");
  if (c.ramp_steps < 1) fail("ramp_steps must be >= 1");
  if (c.grad_clip < 0.0) fail("grad_clip must be >= 0");
}

Weights schedule(long step, double max_energy, long ramp) {
  if (step < 0) throw std::invalid_argument("schedule: negative step");
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(ramp));
  const double energy = progress * max_energy;
  return {std::max(0.0, 1.0 - 10.0 * energy), energy};
}

// --- evaluation ------------------------------------------------------------------------------

double corpus_bleu(std::span<const TokenSeq> hyps, std::span<const TokenSeq> refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("bleu: hypothesis/reference count mismatch");
  constexpr int kOrder = 4;
  double matches[kOrder] = {}, totals[kOrder] = {};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& r = refs[s];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (int n = 1; n <= kOrder; ++n) {
      const auto un = static_cast<std::size_t>(n);
      std::map<TokenSeq, int> ref_counts;
      for (std::size_t i = 0; i + un <= r.size(); ++i) ++ref_counts[TokenSeq(r.begin() + i, r.begin() + i + un)];
      for (std::size_t i = 0; i + un <= h.size(); ++i) {
        auto it = ref_counts.find(TokenSeq(h.begin() + i, h.begin() + i + un));
        if (it != ref_counts.end() && it->second > 0) {
          --it->second;
          matches[n - 1] += 1.0;
        }
        totals[n - 1] += 1.0;
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (int n = 0; n < kOrder; ++n) log_p += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_p / kOrder);
}

EvalResult evaluate(const TaskNet& net, const EnergyNet& scorer, std::span<const ParallelPair> split) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  std::vector<TokenSeq> hyps, refs;
  double qe = 0.0, oracle = 0.0;
  for (const auto& p : split) {
    const auto hyp = greedy_decode(net, p.src, default_max_len(p.src.size()));
    qe += scorer.score_value(p.src, hyp.tokens);
    hyps.push_back(strip_eos(hyp.tokens));
    refs.push_back(strip_eos(p.tgt));
    oracle += oracle_quality(hyps.back(), refs.back());
  }
  const auto n = static_cast<double>(split.size());
  return {corpus_bleu(hyps, refs), qe / n, oracle / n};
}

int early_stop(std::span<const double> valid_qe) {
  if (valid_qe.empty()) throw std::invalid_argument("early_stop: no epochs recorded");
  std::size_t best = 0;
  for (std::size_t i = 1; i < valid_qe.size(); ++i)
    if (valid_qe[i] > valid_qe[best]) best = i;
  return static_cast<int>(best) + 1;
}

std::vector<bool> reward_gaming_flags(std::span<const double> qe, std::span<const double> oracle,
                                      double drop) {
  if (qe.size() != oracle.size()) throw std::invalid_argument("gaming monitor: trace length mismatch");
  std::vector<bool> flags(qe.size(), false);
  for (std::size_t e = 1; e < qe.size(); ++e)
    flags[e] = qe[e] > qe[e - 1] && oracle[e - 1] - oracle[e] > drop;
  return flags;
}

// --- scorer pretraining ----------------------------------------------------------------------

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need >= 2 paired values");
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

namespace {

TokenSeq random_hypothesis(std::size_t len, int vocab, RngStream& rng) {
  TokenSeq out(len);
  for (auto& t : out) t = rng.uniform_int(special::kCount, vocab - 1);
  out.push_back(special::kEos);
  return out;
}

}  // namespace

std::vector<RatedExample> rated_mixture(std::span<const ParallelPair> pairs, int vocab,
                                        std::uint64_t seed) {
  std::vector<RatedExample> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    RngStream rng(seed, "pretrain:mixture", i);
    const TokenSeq gold = strip_eos(p.tgt);
    auto add = [&](TokenSeq hyp) {
      const double q = oracle_quality(strip_eos(hyp), gold);
      out.push_back({p.src, std::move(hyp), q});
    };
    add(p.tgt);
    add(corrupt_target(p.tgt, vocab, rng));
    // A single substitution: close to gold, so the scorer must look at every position.
    TokenSeq one = p.tgt;
    const auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(gold.size()) - 1));
    Token t = rng.uniform_int(special::kCount, vocab - 2);
    if (t >= one[pos]) ++t;
    one[pos] = t;
    add(one);
    add(random_hypothesis(static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(gold.size()) + 2)), vocab, rng));
    TokenSeq truncated(gold.begin(), gold.begin() + rng.uniform_int(0, static_cast<int>(gold.size()) - 1));
    truncated.push_back(special::kEos);
    add(truncated);
    TokenSeq extended = gold;
    const int extra = rng.uniform_int(1, 3);
    for (int e = 0; e < extra; ++e) extended.push_back(rng.uniform_int(special::kCount, vocab - 1));
    extended.push_back(special::kEos);
    add(extended);
  }
  return out;
}

PretrainReport pretrain_energy(EnergyNet& qe, const DataPools& pools, const PretrainConfig& cfg) {
  if (pools.rating.size() < 10) throw std::invalid_argument("pretrain: rating split too small");
  if (cfg.batch < 1 || cfg.max_steps < 1 || cfg.eval_every < 1)
    throw std::invalid_argument("pretrain: batch, max_steps and eval_every must be >= 1");
  const int vocab = qe.dims().vocab;
  const auto n_hold = std::max<std::size_t>(
      2, static_cast<std::size_t>(std::llround(cfg.holdout * static_cast<double>(pools.rating.size()))));
  const std::span<const ParallelPair> all(pools.rating);
  const auto train_pairs = all.first(all.size() - n_hold);
  const auto hold_pairs = all.last(n_hold);
  const auto train_set = rated_mixture(train_pairs, vocab, cfg.seed);
  const auto hold_set = rated_mixture(hold_pairs, vocab, cfg.seed ^ 0x5bd1e995ULL);

  auto held_out_pearson = [&] {
    std::vector<double> s, q;
    for (const auto& ex : hold_set) {
      s.push_back(qe.score_value(ex.src, ex.hyp));
      q.push_back(ex.quality);
    }
    return pearson(s, q);
  };

  Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
  ParameterStore* stores[] = {&qe};
  PretrainReport rep;
  for (int step = 1; step <= cfg.max_steps; ++step) {
    RngStream rng(cfg.seed, "pretrain:batch", static_cast<std::uint64_t>(step));
    ad::Graph g;
    const Bound b = qe.bind(g);
    std::vector<ad::Tensor> errs;
    for (int i = 0; i < cfg.batch; ++i) {
      const auto& ex = train_set[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(train_set.size()) - 1))];
      const auto err = ad::add_scalar(qe.score_tokens(g, b, ex.src, ex.hyp), -ex.quality);
      errs.push_back(ad::mul(err, err));
    }
    const auto loss = ad::reduce_mean(ad::stack(errs));
    const auto grads = ad::backward(g, loss);
    ad::accumulate_parameter_grads(g, grads);
    opt.step(stores, cfg.grad_clip);
    qe.zero_grad();
    rep.steps = step;
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      rep.pearson = held_out_pearson();
      if (rep.pearson >= cfg.target_pearson) {
        rep.reached_target = true;
        break;
      }
    }
  }

  std::size_t over_random = 0, over_corrupt = 0;
  for (std::size_t i = 0; i < hold_pairs.size(); ++i) {
    const auto& p = hold_pairs[i];
    RngStream rng(cfg.seed, "pretrain:check", i);
    const double gold = qe.score_value(p.src, p.tgt);
    const auto rnd = random_hypothesis(p.tgt.size() - 1, vocab, rng);
    const auto bad = corrupt_target(p.tgt, vocab, rng);
    if (gold > qe.score_value(p.src, rnd)) ++over_random;
    if (gold > qe.score_value(p.src, bad)) ++over_corrupt;
  }
  rep.gold_over_random = static_cast<double>(over_random) / static_cast<double>(hold_pairs.size());
  rep.gold_over_corrupted = static_cast<double>(over_corrupt) / static_cast<double>(hold_pairs.size());

  if (rep.pearson < cfg.abort_below) {
    throw std::runtime_error("scorer pretraining failed: held-out pearson " +
                             std::to_string(rep.pearson) + " after " + std::to_string(rep.steps) +
                             " steps (need >= " + std::to_string(cfg.abort_below) + ")");
  }
  return rep;
}

// --- trainers --------------------------------------------------------------------------------

namespace {

std::string step_purpose(std::string_view what, long step) {
  return std::string(what) + ":" + std::to_string(step);
}

double backward_into(ad::Graph& g, const ad::Tensor& loss) {
  const auto grads = ad::backward(g, loss);
  ad::accumulate_parameter_grads(g, grads);
  return loss.item();
}

class Trainer {
 public:
  Trainer(const TrainerConfig& cfg, const DataPools& pools, const EnergyNet& scorer,
          const std::string& run_id, const TrainHooks& hooks)
      : cfg_(cfg),
        pools_(pools),
        scorer_(scorer),
        run_id_(run_id),
        hooks_(hooks),
        net_(cfg.dims, derive_seed(cfg.seed, "init:task")),
        energy_(scorer),
        value_(cfg.dims.d_model, derive_seed(cfg.seed, "init:value")),
        opt_task_({cfg.lr_task, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps}),
        opt_energy_({cfg.lr_energy, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps}) {
    validate(cfg);
    if (net_.dims().vocab != scorer.dims().vocab)
      throw std::invalid_argument("task net and scorer vocabularies differ");
    if (pools.labeled.empty()) throw std::invalid_argument("train: empty labeled pool");

    labeled_ = cfg.filter ? filter_labeled(pools.labeled, scorer, cfg.keep_fraction) : pools.labeled;
    if (cfg.algorithm == Algorithm::kQeDynamic && cfg.adapters)
      energy_.attach_adapters(cfg.adapter_rank, derive_seed(cfg.seed, "init:energy-adapter"));

    if (uses_unlabeled()) {
      if (cfg.mono) {
        unlabeled_ = pools.unlabeled;
      } else {
        for (const auto& p : labeled_) unlabeled_.push_back(p.src);
      }
      if (unlabeled_.size() < static_cast<std::size_t>(cfg.batch_unlabeled))
        throw std::invalid_argument("unlabeled pool smaller than one batch");
      if (cfg.nn) {
        for (const auto& p : labeled_) emb_labeled_.push_back(net_.embed_source(p.src));
        for (const auto& s : unlabeled_) emb_unlabeled_.push_back(net_.embed_source(s));
      }
    }
  }

  TrainResult run() {
    const auto start = std::chrono::steady_clock::now();
    std::vector<double> valid_qe;
    std::optional<TaskNet> best_net;
    EvalResult best_test;
    int best_epoch = 0;
    std::vector<MetricsRecord> records;

    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      norm_.reset();
      const auto plan = plan_epoch(epoch);
      LossBreakdown sum;
      for (std::size_t i = 0; i < plan.labeled.size(); ++i) {
        const auto br = train_step(plan.labeled[i], plan.unlabeled.empty() ? nullptr : &plan.unlabeled[i]);
        sum.ce += br.ce;
        sum.energy += br.energy;
        sum.total += br.total;
        sum.alpha = br.alpha;
        sum.beta = br.beta;
        ++step_;
      }
      const auto steps = static_cast<double>(plan.labeled.size());
      LossBreakdown mean = sum;
      mean.ce /= steps;
      mean.energy /= steps;
      mean.total /= steps;
      mean.b_l = cfg_.batch_labeled;
      mean.b_u = uses_unlabeled() ? cfg_.batch_unlabeled : 0;
      mean.k = uses_unlabeled() ? cfg_.k : 0;
      mean.n = cfg_.algorithm == Algorithm::kQeDynamic ? cfg_.n : 0;

      const EvalResult tr = evaluate(net_, scorer_, labeled_);
      const EvalResult va = evaluate(net_, scorer_, pools_.valid);
      const EvalResult te = evaluate(net_, scorer_, pools_.test);
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      for (auto [split, res] : {std::pair{"train", tr}, std::pair{"valid", va}, std::pair{"test", te}}) {
        MetricsRecord r;
        r.run_id = run_id_;
        r.algorithm = std::string(algorithm_name(cfg_.algorithm));
        r.seed = cfg_.seed;
        r.epoch = epoch;
        r.split = split;
        r.bleu_proxy = res.bleu_proxy;
        r.qe_score = res.qe_score;
        r.oracle_quality = res.oracle_quality;
        r.loss = mean;
        r.alpha = mean.alpha;
        r.beta = mean.beta;
        r.wall_clock = wall;
        records.push_back(r);
        if (hooks_.on_record) hooks_.on_record(records.back());
      }

      valid_qe.push_back(va.qe_score);
      const bool is_best = early_stop(valid_qe) == epoch;
      if (is_best) {
        best_net = net_;
        best_test = te;
        best_epoch = epoch;
      }
      if (hooks_.on_epoch)
        hooks_.on_epoch(epoch, net_, cfg_.algorithm == Algorithm::kQeDynamic ? &energy_ : nullptr, is_best);
    }

    return TrainResult{std::move(*best_net), energy_, std::move(records), best_epoch, best_test, step_};
  }

 private:
  struct EpochPlan {
    std::vector<std::vector<std::size_t>> labeled;
    std::vector<std::vector<std::size_t>> unlabeled;  // paired with labeled[i]
  };

  bool uses_unlabeled() const { return cfg_.algorithm != Algorithm::kSupervised; }

  EpochPlan plan_epoch(int epoch) const {
    EpochPlan plan;
    std::vector<std::size_t> order(labeled_.size());
    std::iota(order.begin(), order.end(), 0);
    RngStream(cfg_.seed, "order:labeled", static_cast<std::uint64_t>(epoch)).shuffle(order);
    plan.labeled = make_batches(order, static_cast<std::size_t>(cfg_.batch_labeled), false);
    if (!uses_unlabeled()) return plan;

    std::vector<std::size_t> uorder(unlabeled_.size());
    std::iota(uorder.begin(), uorder.end(), 0);
    RngStream(cfg_.seed, "order:unlabeled", static_cast<std::uint64_t>(epoch)).shuffle(uorder);
    const auto ubatches = make_batches(uorder, static_cast<std::size_t>(cfg_.batch_unlabeled), true);

    if (cfg_.nn) {
      EmbeddingIndex queries, candidates;
      for (std::size_t i = 0; i < plan.labeled.size(); ++i)
        queries.add(i, centroid(emb_labeled_, plan.labeled[i]));
      for (std::size_t i = 0; i < ubatches.size(); ++i)
        candidates.add(i, centroid(emb_unlabeled_, ubatches[i]));
      for (std::size_t pick : nn_pair_batches(queries, candidates)) plan.unlabeled.push_back(ubatches[pick]);
    } else {
      for (std::size_t i = 0; i < plan.labeled.size(); ++i)
        plan.unlabeled.push_back(ubatches[i % ubatches.size()]);
    }
    return plan;
  }

  void emit(std::string_view event) {
    if (hooks_.on_event) hooks_.on_event(event, step_);
  }

  std::vector<ParallelPair> gather_labeled(const std::vector<std::size_t>& idx) const {
    std::vector<ParallelPair> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labeled_[i]);
    return out;
  }

  std::vector<UnlabeledItem> sample_unlabeled(const std::vector<std::size_t>& idx) {
    std::vector<UnlabeledItem> out;
    const auto purpose = step_purpose("sample:unlabeled", step_);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto& src = unlabeled_[idx[j]];
      RngStream rng(cfg_.seed, purpose, j);
      out.push_back({src, sample_k(net_, src, cfg_.k, cfg_.temperature, rng, default_max_len(src.size()))});
    }
    emit("sample-unl");
    return out;
  }

  void update_task(bool with_value_head = false) {
    std::vector<ParameterStore*> stores{&net_};
    if (with_value_head) stores.push_back(&value_);
    opt_task_.step(stores, cfg_.grad_clip);
    net_.zero_grad();
    value_.zero_grad();
  }

  LossBreakdown train_step(const std::vector<std::size_t>& lidx, const std::vector<std::size_t>* uidx) {
    const auto labeled = gather_labeled(lidx);
    switch (cfg_.algorithm) {
      case Algorithm::kSupervised: return supervised_step(labeled);
      case Algorithm::kQeStatic: return energy_step(labeled, *uidx, false);
      case Algorithm::kQeDynamic: return energy_step(labeled, *uidx, true);
      case Algorithm::kReinforce: return reinforce_step(labeled, *uidx);
      case Algorithm::kPpo: return ppo_step(labeled, *uidx);
    }
    throw std::logic_error("unreachable");
  }

  LossBreakdown supervised_step(const std::vector<ParallelPair>& labeled) {
    ad::Graph g;
    const Bound b = net_.bind(g);
    auto jl = joint_nmt_loss(g, b, net_, {}, scorer_, labeled, {}, 1.0, 0.0);
    backward_into(g, jl.loss);
    update_task();
    emit("ce-update");
    return jl.breakdown;
  }

  LossBreakdown energy_step(const std::vector<ParallelPair>& labeled,
                            const std::vector<std::size_t>& uidx, bool dynamic) {
    if (dynamic) update_energy(labeled);
    const auto unlabeled = sample_unlabeled(uidx);
    const Weights w = schedule(step_, cfg_.energy_weight_max, cfg_.ramp_steps);
    ad::Graph g;
    const Bound b = net_.bind(g);
    const EnergyNet& qe = dynamic ? energy_ : scorer_;
    const Bound qb = qe.bind_constant(g);
    // With zero energy weight the term contributes nothing; skip building it.
    const std::span<const UnlabeledItem> used =
        w.energy > 0.0 ? std::span<const UnlabeledItem>(unlabeled) : std::span<const UnlabeledItem>();
    auto jl = joint_nmt_loss(g, b, net_, qb, qe, labeled, used, w.ce, w.energy);
    backward_into(g, jl.loss);
    update_task();
    emit("phi-update");
    return jl.breakdown;
  }

  void update_energy(const std::vector<ParallelPair>& labeled) {
    std::vector<NceExample> batch;
    const auto purpose = step_purpose("sample:negatives", step_);
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      RngStream rng(cfg_.seed, purpose, i);
      const auto& p = labeled[i];
      batch.push_back({p.src, p.tgt,
                       sample_k(net_, p.src, cfg_.n, cfg_.temperature, rng, default_max_len(p.src.size()))});
    }
    emit("sample-neg");
    ad::Graph g;
    const Bound qb = energy_.bind(g);
    backward_into(g, nce_loss(g, qb, energy_, net_, batch));
    ParameterStore* stores[] = {&energy_};
    opt_energy_.step(stores, cfg_.grad_clip);
    energy_.zero_grad();
    emit("theta-update");
  }

  std::vector<double> rewards_for(const UnlabeledItem& item) const {
    std::vector<double> r;
    for (const auto& h : item.samples) r.push_back(scorer_.score_value(item.src, h.tokens));
    return r;
  }

  LossBreakdown reinforce_step(const std::vector<ParallelPair>& labeled,
                               const std::vector<std::size_t>& uidx) {
    const auto unlabeled = sample_unlabeled(uidx);
    std::vector<std::vector<double>> weights;
    for (const auto& u : unlabeled) weights.push_back(norm_.normalize_batch(rewards_for(u)));
    const Weights w = schedule(step_, cfg_.energy_weight_max, cfg_.ramp_steps);

    ad::Graph g;
    const Bound b = net_.bind(g);
    auto jl = joint_nmt_loss(g, b, net_, {}, scorer_, labeled, {}, w.ce, 0.0);
    auto& br = jl.breakdown;
    br.beta = w.energy;
    br.b_u = static_cast<int>(unlabeled.size());
    br.k = cfg_.k;
    ad::Tensor total = jl.loss;
    if (w.energy > 0.0) {
      std::vector<ad::Tensor> terms;
      for (std::size_t i = 0; i < unlabeled.size(); ++i)
        terms.push_back(policy_gradient_loss(g, b, net_, net_.encode(g, b, unlabeled[i].src),
                                             unlabeled[i].samples, weights[i]));
      const auto rl = ad::reduce_mean(ad::stack(terms));
      br.energy = rl.item();
      total = ad::add(total, ad::scale(rl, w.energy));
    }
    br.total = total.item();
    backward_into(g, total);
    update_task();
    emit("phi-update");
    return br;
  }

  LossBreakdown ppo_step(const std::vector<ParallelPair>& labeled, const std::vector<std::size_t>& uidx) {
    const auto unlabeled = sample_unlabeled(uidx);
    std::vector<std::vector<double>> rewards, old_lp;
    for (const auto& u : unlabeled) {
      rewards.push_back(norm_.normalize_batch(rewards_for(u)));
      std::vector<double> lp;
      for (const auto& h : u.samples) lp.push_back(h.logprob);
      old_lp.push_back(std::move(lp));
    }
    LossBreakdown br;
    for (int e = 0; e < cfg_.ppo_epochs; ++e) {
      const Weights w = schedule(step_, cfg_.energy_weight_max, cfg_.ramp_steps);
      ad::Graph g;
      const Bound b = net_.bind(g);
      const Bound vb = value_.bind(g);
      auto jl = joint_nmt_loss(g, b, net_, {}, scorer_, labeled, {}, w.ce, 0.0);
      br = jl.breakdown;
      br.beta = w.energy;
      br.b_u = static_cast<int>(unlabeled.size());
      br.k = cfg_.k;
      ad::Tensor total = jl.loss;
      if (w.energy > 0.0) {
        std::vector<ad::Tensor> terms;
        for (std::size_t i = 0; i < unlabeled.size(); ++i)
          terms.push_back(ppo_loss(g, b, net_, vb, value_, unlabeled[i].src, unlabeled[i].samples,
                                   old_lp[i], rewards[i], cfg_.ppo_clip)
                              .loss);
        const auto rl = ad::reduce_mean(ad::stack(terms));
        br.energy = rl.item();
        total = ad::add(total, ad::scale(rl, w.energy));
      }
      br.total = total.item();
      backward_into(g, total);
      update_task(true);
      emit("phi-update");
    }
    return br;
  }

  const TrainerConfig& cfg_;
  const DataPools& pools_;
  const EnergyNet& scorer_;
  std::string run_id_;
  const TrainHooks& hooks_;
  TaskNet net_;
  EnergyNet energy_;
  ValueHead value_;
  Adam opt_task_, opt_energy_;
  RewardNormalizer norm_;
  std::vector<ParallelPair> labeled_;
  std::vector<TokenSeq> unlabeled_;
  std::vector<std::vector<double>> emb_labeled_, emb_unlabeled_;
  long step_ = 0;
};

TrainResult train_as(TrainerConfig cfg, Algorithm a, const DataPools& pools, const EnergyNet& scorer) {
  cfg.algorithm = a;
  return train(cfg, pools, scorer);
}

}  // namespace

TrainResult train(const TrainerConfig& cfg, const DataPools& pools, const EnergyNet& scorer,
                  const std::string& run_id, const TrainHooks& hooks) {
  return Trainer(cfg, pools, scorer, run_id, hooks).run();
}

TrainResult train_supervised(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer) {
  return train_as(std::move(cfg), Algorithm::kSupervised, pools, scorer);
}
TrainResult train_qe_static(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer) {
  return train_as(std::move(cfg), Algorithm::kQeStatic, pools, scorer);
}
TrainResult train_qe_dynamic(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer) {
  return train_as(std::move(cfg), Algorithm::kQeDynamic, pools, scorer);
}
TrainResult train_reinforce(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer) {
  return train_as(std::move(cfg), Algorithm::kReinforce, pools, scorer);
}
TrainResult train_ppo(TrainerConfig cfg, const DataPools& pools, const EnergyNet& scorer) {
  return train_as(std::move(cfg), Algorithm::kPpo, pools, scorer);
}

}  // namespace qeebm
