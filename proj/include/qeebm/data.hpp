#pragma once

// Synthetic translation tasks, data pools, the oracle quality metric, and the two batch
// selection techniques (quality filtering of the labeled pool, nearest-neighbour pairing of
// unlabeled batches).

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "qeebm/models.hpp"
#include "qeebm/rng.hpp"

namespace qeebm {

struct TaskSpec {
  int vocab = 24;
  /// Random permutation of the content tokens; identity (copy task) when false.
  bool substitute = true;
  /// Swap adjacent target tokens pairwise after substitution.
  bool swap_pairs = false;
  int min_len = 4;
  int max_len = 12;
  /// Size of the preprocessed pool. One fifth becomes the labeled pool; all of it is unlabeled.
  int pool_size = 2000;
  int valid_size = 200;
  int test_size = 200;
  /// Extra rated pairs reserved for scorer pretraining.
  int rating_size = 1000;
  double noise_fraction = 0.2;
  std::uint64_t seed = 1;
};

struct ParallelPair {
  TokenSeq src;
  /// EOS-terminated. Empty for unlabeled sources.
  TokenSeq tgt;
  std::optional<double> qe;
  /// Set when the target was deliberately corrupted.
  bool noisy = false;
};

struct DataPools {
  TaskSpec spec;
  /// Content-token substitution: mapping[t] for every token id (specials map to themselves).
  std::vector<Token> mapping;
  std::vector<ParallelPair> labeled;
  std::vector<TokenSeq> unlabeled;
  std::vector<ParallelPair> valid, test, rating;
};

/// Gold EOS-terminated target for a source under the task's rule.
TokenSeq task_target(const TaskSpec& spec, std::span<const Token> mapping,
                     std::span<const Token> src);

/// Throws std::invalid_argument for degenerate specs.
void validate(const TaskSpec& spec);
DataPools generate_corpus(const TaskSpec& spec);

/// Copy of an EOS-terminated target where each content position is replaced by a different
/// random content token with probability 1/2 (at least one position changes).
TokenSeq corrupt_target(std::span<const Token> tgt, int vocab, RngStream& rng);

/// 1 - levenshtein(hyp, gold) / max(|hyp|, |gold|); 1 when both are empty.
double oracle_quality(std::span<const Token> hyp, std::span<const Token> gold);
std::size_t edit_distance(std::span<const Token> a, std::span<const Token> b);

/// Indices of the top ceil(keep_fraction * n) scores (ties by lower index), ascending.
std::vector<std::size_t> top_fraction(std::span<const double> scores, double keep_fraction);

/// Scores every pair once with the scorer and keeps the best ceil(keep_fraction * n), in
/// their original order, with the score cached on each kept pair.
std::vector<ParallelPair> filter_labeled(std::span<const ParallelPair> pool,
                                         const EnergyNet& scorer, double keep_fraction);

double cosine(std::span<const double> a, std::span<const double> b);

/// Unit-normalized vectors with caller-chosen ids.
struct EmbeddingIndex {
  std::vector<std::vector<double>> vectors;
  std::vector<std::size_t> ids;

  void add(std::size_t id, std::vector<double> v);
};

/// Unit-normalized mean of the selected rows.
std::vector<double> centroid(std::span<const std::vector<double>> embeddings,
                             std::span<const std::size_t> members);

/// For each query in order, the not-yet-used candidate with the largest cosine similarity
/// (lowest position on ties). Returns positions into candidates.vectors.
std::vector<std::size_t> nn_pair_batches(const EmbeddingIndex& queries,
                                         const EmbeddingIndex& candidates);

/// Consecutive chunks of `order` of the given size. The last chunk may be short unless
/// drop_last is set.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order,
                                                   std::size_t batch_size, bool drop_last);

void write_pairs(std::ostream& out, std::span<const ParallelPair> pairs);
void write_sources(std::ostream& out, std::span<const TokenSeq> sources);
/// Reads `src TAB tgt` lines; a missing or empty target column yields an unlabeled pair.
std::vector<ParallelPair> read_pairs(std::istream& in);

}  // namespace qeebm
