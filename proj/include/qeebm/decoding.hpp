#pragma once

#include <span>
#include <vector>

#include "qeebm/autodiff.hpp"
#include "qeebm/models.hpp"
#include "qeebm/rng.hpp"

namespace qeebm {

/// A decoded target sequence. tokens end with EOS unless the length cap was hit.
struct Hypothesis {
  TokenSeq tokens;
  /// Sum of the model's (temperature 1) log-probabilities of the tokens.
  double logprob = 0.0;
  std::vector<double> token_logprobs;

  bool finished() const { return !tokens.empty() && tokens.back() == special::kEos; }
};

/// Decoding length cap for a source of the given length.
int default_max_len(std::size_t src_len);

/// BOS followed by all but the last token of tgt: the teacher-forced decoder input.
TokenSeq decoder_input(std::span<const Token> tgt);

/// Tokens before the first EOS.
TokenSeq strip_eos(std::span<const Token> tokens);

Hypothesis greedy_decode(const TaskNet& net, std::span<const Token> src, int max_len);

/// k independent ancestral samples from softmax(logits / temperature).
std::vector<Hypothesis> sample_k(const TaskNet& net, std::span<const Token> src, int k,
                                 double temperature, RngStream& rng, int max_len);

/// Gradient-free teacher-forced log P(tgt | src).
double sequence_logprob_value(const TaskNet& net, std::span<const Token> src,
                              std::span<const Token> tgt);

/// Teacher-forced sum of log P(tgt_t | src, tgt_<t), differentiable w.r.t. the bound parameters.
ad::Tensor sequence_logprob(ad::Graph& g, const Bound& b, const TaskNet& net,
                            std::span<const Token> src, std::span<const Token> tgt);
/// Same, reusing an encoder memory already in the graph.
ad::Tensor sequence_logprob(ad::Graph& g, const Bound& b, const TaskNet& net,
                            const ad::Tensor& memory, std::span<const Token> tgt);

}  // namespace qeebm
