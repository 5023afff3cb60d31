#pragma once

// The translation model (task net) and the quality scorer (energy net).
//
// Both are single-block pre-norm transformers over one shared vocabulary. Each model exposes
// two forward routes: a taped route (bind() + forward functions) for training, and a
// gradient-free route used for decoding and scoring that must agree with the taped one.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qeebm/autodiff.hpp"

namespace qeebm {

using Token = int;
using TokenSeq = std::vector<Token>;

namespace special {
inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;
inline constexpr Token kEos = 2;
inline constexpr Token kSep = 3;
inline constexpr int kCount = 4;
}  // namespace special

struct ModelDims {
  int vocab = 24;
  int d_model = 32;
  int heads = 2;
  int ff = 64;
  double init_range = 0.08;
};

/// Parameter tensors bound into one graph, indexed like the owning store.
using Bound = std::vector<ad::Tensor>;

class ParameterStore {
 public:
  std::vector<ad::Parameter>& parameters() { return params_; }
  const std::vector<ad::Parameter>& parameters() const { return params_; }
  const ad::Parameter& parameter(const std::string& name) const;

  /// With track=false every parameter enters the graph as a constant.
  Bound bind(ad::Graph& graph, bool track = true);
  Bound bind_constant(ad::Graph& graph) const;
  void zero_grad();
  std::size_t trainable_count() const;
  /// FNV-1a over the bytes of the selected parameters, in manifest order.
  std::uint64_t hash(bool include_frozen = true, bool include_trainable = true) const;
  bool all_finite() const;

 protected:
  std::size_t add_uniform(std::string name, ad::Shape shape, double range, std::uint64_t seed);
  std::size_t add_constant(std::string name, ad::Shape shape, double value);

  std::vector<ad::Parameter> params_;
};

struct NormIx {
  std::size_t gain, bias;
};
struct AttentionIx {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FeedForwardIx {
  std::size_t w1, b1, w2, b2;
};
struct AdapterIx {
  std::size_t down, down_b, up, up_b;
};

/// Sinusoidal position code of width d for positions [0, n).
std::vector<double> positional_encoding(std::size_t n, std::size_t d);

class TaskNet : public ParameterStore {
 public:
  TaskNet(const ModelDims& dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }

  /// Encoder memory (|src|, d).
  ad::Tensor encode(ad::Graph& g, const Bound& b, std::span<const Token> src) const;
  struct Decoded {
    ad::Tensor logits;  // (|tgt_in|, V)
    ad::Tensor states;  // (|tgt_in|, d), final-norm decoder states
  };
  Decoded decode(ad::Graph& g, const Bound& b, const ad::Tensor& memory,
                 std::span<const Token> tgt_in) const;
  /// Logits for every position of a decoder input that starts with BOS.
  ad::Tensor forward(ad::Graph& g, const Bound& b, std::span<const Token> src,
                     std::span<const Token> tgt_in) const;

  /// Freezes host weights and adds zero-output bottleneck adapters to both blocks.
  void attach_adapters(int rank, std::uint64_t seed);
  bool has_adapters() const { return enc_adapter_.has_value(); }

  void check_tokens(std::span<const Token> tokens) const;

  /// Mean-pooled encoder memory; used as a sentence embedding.
  std::vector<double> embed_source(std::span<const Token> src) const;

  /// Gradient-free incremental decoder with cached self-attention keys and values.
  class Stepper {
   public:
    Stepper(const TaskNet& net, std::span<const Token> src);
    /// Feeds the next decoder input token and returns next-token logits (V).
    std::vector<double> step(Token token);
    std::size_t position() const { return pos_; }

   private:
    const TaskNet* net_;
    std::vector<std::vector<double>> cross_k_, cross_v_;  // per head, (|src|, dh)
    std::vector<std::vector<double>> self_k_, self_v_;    // per head, growing (pos, dh)
    std::size_t src_len_ = 0;
    std::size_t pos_ = 0;
  };

 private:
  friend class Stepper;

  ModelDims dims_;
  std::size_t src_embed_, tgt_embed_;
  NormIx enc_ln1_, enc_ln2_, enc_final_;
  AttentionIx enc_attn_;
  FeedForwardIx enc_ffn_;
  NormIx dec_ln1_, dec_ln2_, dec_ln3_, dec_final_;
  AttentionIx dec_self_, dec_cross_;
  FeedForwardIx dec_ffn_;
  std::size_t out_w_, out_b_;
  std::optional<AdapterIx> enc_adapter_, dec_adapter_;

  std::vector<double> encode_plain(std::span<const Token> src) const;
};

class EnergyNet : public ParameterStore {
 public:
  EnergyNet(const ModelDims& dims, std::uint64_t seed, int head_hidden = 32);

  const ModelDims& dims() const { return dims_; }

  /// Pre-sigmoid score of [src ; SEP ; hyp]. Rows of hyp_rows must each sum to 1.
  ad::Tensor score_logit(ad::Graph& g, const Bound& b, std::span<const Token> src,
                         const ad::Tensor& hyp_rows) const;
  /// Quality score s in (0, 1).
  ad::Tensor score(ad::Graph& g, const Bound& b, std::span<const Token> src,
                   const ad::Tensor& hyp_rows) const;
  /// Same score, hypothesis given as token ids.
  ad::Tensor score_tokens(ad::Graph& g, const Bound& b, std::span<const Token> src,
                          std::span<const Token> hyp) const;
  /// Gradient-free score.
  double score_value(std::span<const Token> src, std::span<const Token> hyp) const;

  void attach_adapters(int rank, std::uint64_t seed);
  bool has_adapters() const { return adapter_.has_value(); }

 private:
  ModelDims dims_;
  std::size_t embed_, segment_;
  NormIx ln1_, ln2_, final_;
  AttentionIx attn_;
  FeedForwardIx ffn_;
  std::size_t head_w1_, head_b1_, head_w2_, head_b2_;
  std::optional<AdapterIx> adapter_;

  ad::Tensor logit_from_embeddings(ad::Graph& g, const Bound& b, std::span<const Token> src,
                                   const ad::Tensor& hyp_embed) const;
};

/// Linear value estimate on mean-pooled decoder states (PPO baseline).
class ValueHead : public ParameterStore {
 public:
  ValueHead(int d_model, std::uint64_t seed, double init_range = 0.08);
  ad::Tensor value(ad::Graph& g, const Bound& b, const ad::Tensor& states) const;
};

}  // namespace qeebm
