#include "qeebm/decoding.hpp"

#include <cmath>
#include <stdexcept>

namespace qeebm {

namespace {

double log_sum_exp(std::span<const double> x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

std::size_t argmax(std::span<const double> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

template <class Choose>
Hypothesis run_decoder(TaskNet::Stepper stepper, int max_len, Choose&& choose) {
  Hypothesis hyp;
  Token input = special::kBos;
  for (int t = 0; t < max_len; ++t) {
    const auto logits = stepper.step(input);
    const Token next = static_cast<Token>(choose(std::span<const double>(logits)));
    const double lp = logits[static_cast<std::size_t>(next)] - log_sum_exp(logits);
    hyp.tokens.push_back(next);
    hyp.token_logprobs.push_back(lp);
    hyp.logprob += lp;
    if (next == special::kEos) break;
    input = next;
  }
  return hyp;
}

}  // namespace

int default_max_len(std::size_t src_len) { return static_cast<int>(2 * src_len + 4); }

TokenSeq decoder_input(std::span<const Token> tgt) {
  TokenSeq in{special::kBos};
  if (!tgt.empty()) in.insert(in.end(), tgt.begin(), tgt.end() - 1);
  return in;
}

TokenSeq strip_eos(std::span<const Token> tokens) {
  TokenSeq out;
  for (Token t : tokens) {
    if (t == special::kEos) break;
    out.push_back(t);
  }
  return out;
}

Hypothesis greedy_decode(const TaskNet& net, std::span<const Token> src, int max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  return run_decoder(TaskNet::Stepper(net, src), max_len,
                     [](std::span<const double> logits) { return argmax(logits); });
}

std::vector<Hypothesis> sample_k(const TaskNet& net, std::span<const Token> src, int k,
                                 double temperature, RngStream& rng, int max_len) {
  if (k < 1) throw std::invalid_argument("sample_k: k must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("sample_k: temperature must be > 0");
  if (max_len < 1) throw std::invalid_argument("sample_k: max_len must be >= 1");
  const TaskNet::Stepper fresh(net, src);
  std::vector<Hypothesis> out;
  out.reserve(static_cast<std::size_t>(k));
  std::vector<double> scaled, probs;
  for (int j = 0; j < k; ++j) {
    out.push_back(run_decoder(fresh, max_len, [&](std::span<const double> logits) {
      scaled.resize(logits.size());
      probs.resize(logits.size());
      for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
      ad::softmax_row(scaled, probs);
      return rng.categorical(probs);
    }));
  }
  return out;
}

double sequence_logprob_value(const TaskNet& net, std::span<const Token> src,
                              std::span<const Token> tgt) {
  if (tgt.empty()) throw std::invalid_argument("sequence_logprob: empty target");
  TaskNet::Stepper stepper(net, src);
  double total = 0.0;
  Token input = special::kBos;
  for (Token next : tgt) {
    const auto logits = stepper.step(input);
    net.check_tokens(std::span<const Token>(&next, 1));
    total += logits[static_cast<std::size_t>(next)] - log_sum_exp(logits);
    input = next;
  }
  return total;
}

ad::Tensor sequence_logprob(ad::Graph& g, const Bound& b, const TaskNet& net,
                            const ad::Tensor& memory, std::span<const Token> tgt) {
  if (tgt.empty()) throw std::invalid_argument("sequence_logprob: empty target");
  const auto logits = net.decode(g, b, memory, decoder_input(tgt)).logits;
  return ad::reduce_sum(ad::pick(ad::log_softmax(logits), tgt));
}

ad::Tensor sequence_logprob(ad::Graph& g, const Bound& b, const TaskNet& net,
                            std::span<const Token> src, std::span<const Token> tgt) {
  return sequence_logprob(g, b, net, net.encode(g, b, src), tgt);
}

}  // namespace qeebm
