#include "qeebm/data.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "qeebm/rng.hpp"

namespace qeebm {

namespace {

TokenSeq draw_source(const TaskSpec& s, RngStream& rng) {
  const int len = rng.uniform_int(s.min_len, s.max_len);
  TokenSeq src(static_cast<std::size_t>(len));
  for (auto& t : src) t = rng.uniform_int(special::kCount, s.vocab - 1);
  return src;
}

}  // namespace

void validate(const TaskSpec& s) {
  auto fail = [](const std::string& why) { throw std::invalid_argument("task spec: " + why); };
  if (s.vocab < 8) fail("vocab must be >= 8");
  if (s.min_len < 2) fail("min_len must be >= 2");
  if (s.max_len < s.min_len) fail("max_len must be >= min_len");
  if (s.pool_size < 1 || s.valid_size < 1 || s.test_size < 1 || s.rating_size < 0)
    fail("split sizes must be positive");
  if (!(s.noise_fraction >= 0.0 && s.noise_fraction <= 1.0)) fail("noise_fraction outside [0, 1]");

  // Sources are deduplicated across splits, so the length range must hold enough of them.
  const double content = s.vocab - special::kCount;
  double distinct = 0.0;
  for (int len = s.min_len; len <= s.max_len; ++len) distinct += std::pow(content, len);
  const double wanted = static_cast<double>(s.pool_size) + s.valid_size + s.test_size + s.rating_size;
  if (distinct < 2.0 * wanted) fail("too few distinct sources for the requested split sizes");
}

TokenSeq corrupt_target(std::span<const Token> tgt, int vocab, RngStream& rng) {
  if (tgt.size() < 2) throw std::invalid_argument("corrupt_target: nothing to corrupt");
  TokenSeq out(tgt.begin(), tgt.end());
  const std::size_t n = out.size() - 1;  // keep EOS
  bool changed = false;
  while (!changed) {
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() >= 0.5) continue;
      const Token old = out[i];
      Token t = rng.uniform_int(special::kCount, vocab - 2);
      if (t >= old) ++t;
      out[i] = t;
      changed = true;
    }
  }
  return out;
}

TokenSeq task_target(const TaskSpec& spec, std::span<const Token> mapping,
                     std::span<const Token> src) {
  TokenSeq tgt;
  tgt.reserve(src.size() + 1);
  for (Token t : src) tgt.push_back(mapping[static_cast<std::size_t>(t)]);
  if (spec.swap_pairs)
    for (std::size_t i = 0; i + 1 < tgt.size(); i += 2) std::swap(tgt[i], tgt[i + 1]);
  tgt.push_back(special::kEos);
  return tgt;
}

DataPools generate_corpus(const TaskSpec& spec) {
  validate(spec);
  DataPools pools;
  pools.spec = spec;
  pools.mapping.resize(static_cast<std::size_t>(spec.vocab));
  std::iota(pools.mapping.begin(), pools.mapping.end(), 0);
  if (spec.substitute) {
    std::vector<Token> content(pools.mapping.begin() + special::kCount, pools.mapping.end());
    RngStream(spec.seed, "corpus:mapping").shuffle(content);
    std::copy(content.begin(), content.end(), pools.mapping.begin() + special::kCount);
  }

  std::set<TokenSeq> seen;
  auto draw_split = [&](int n, std::string_view purpose) {
    RngStream rng(spec.seed, purpose);
    std::vector<ParallelPair> out;
    out.reserve(static_cast<std::size_t>(n));
    while (static_cast<int>(out.size()) < n) {
      TokenSeq src = draw_source(spec, rng);
      if (!seen.insert(src).second) continue;
      TokenSeq tgt = task_target(spec, pools.mapping, src);
      out.push_back(ParallelPair{std::move(src), std::move(tgt), std::nullopt, false});
    }
    return out;
  };

  pools.valid = draw_split(spec.valid_size, "corpus:valid");
  pools.test = draw_split(spec.test_size, "corpus:test");
  pools.rating = draw_split(spec.rating_size, "corpus:rating");
  std::vector<ParallelPair> pool = draw_split(spec.pool_size, "corpus:pool");

  // Pool sources are i.i.d., so the first fifth is a uniformly random labeled subset.
  const std::size_t n_labeled = (pool.size() + 4) / 5;
  pools.unlabeled.reserve(pool.size());
  for (const auto& p : pool) pools.unlabeled.push_back(p.src);
  pools.labeled.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_labeled));

  const auto n_noisy = static_cast<std::size_t>(
      std::llround(spec.noise_fraction * static_cast<double>(n_labeled)));
  std::vector<std::size_t> order(n_labeled);
  std::iota(order.begin(), order.end(), 0);
  RngStream noise(spec.seed, "corpus:noise");
  noise.shuffle(order);
  for (std::size_t i = 0; i < n_noisy; ++i) {
    auto& pair = pools.labeled[order[i]];
    pair.tgt = corrupt_target(pair.tgt, spec.vocab, noise);
    pair.noisy = true;
  }
  return pools;
}

std::size_t edit_distance(std::span<const Token> a, std::span<const Token> b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

double oracle_quality(std::span<const Token> hyp, std::span<const Token> gold) {
  const std::size_t longest = std::max(hyp.size(), gold.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(edit_distance(hyp, gold)) / static_cast<double>(longest);
}

std::vector<std::size_t> top_fraction(std::span<const double> scores, double keep_fraction) {
  if (scores.empty()) throw std::invalid_argument("filter: empty pool");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw std::invalid_argument("filter: keep_fraction must be in (0, 1]");
  const auto keep = std::min(
      scores.size(),
      static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(scores.size()))));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<ParallelPair> filter_labeled(std::span<const ParallelPair> pool,
                                         const EnergyNet& scorer, double keep_fraction) {
  if (pool.empty()) throw std::invalid_argument("filter: empty pool");
  std::vector<double> scores;
  scores.reserve(pool.size());
  for (const auto& p : pool) scores.push_back(scorer.score_value(p.src, p.tgt));
  std::vector<ParallelPair> kept;
  for (std::size_t i : top_fraction(scores, keep_fraction)) {
    kept.push_back(pool[i]);
    kept.back().qe = scores[i];
  }
  return kept;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void EmbeddingIndex::add(std::size_t id, std::vector<double> v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  if (!(n2 > 0.0) || !std::isfinite(n2)) throw std::invalid_argument("embedding has no direction");
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  vectors.push_back(std::move(v));
  ids.push_back(id);
}

std::vector<double> centroid(std::span<const std::vector<double>> embeddings,
                             std::span<const std::size_t> members) {
  if (members.empty()) throw std::invalid_argument("centroid: empty batch");
  std::vector<double> c(embeddings[members[0]].size(), 0.0);
  for (std::size_t m : members) {
    const auto& e = embeddings[m];
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += e[i];
  }
  double n2 = 0.0;
  for (double& x : c) {
    x /= static_cast<double>(members.size());
    n2 += x * x;
  }
  if (n2 > 0.0)
    for (double& x : c) x /= std::sqrt(n2);
  return c;
}

std::vector<std::size_t> nn_pair_batches(const EmbeddingIndex& queries,
                                         const EmbeddingIndex& candidates) {
  if (candidates.vectors.size() < queries.vectors.size())
    throw std::invalid_argument("nn pairing: " + std::to_string(queries.vectors.size()) +
                                " labeled batches but only " +
                                std::to_string(candidates.vectors.size()) + " unlabeled batches");
  std::vector<bool> used(candidates.vectors.size(), false);
  std::vector<std::size_t> picks;
  picks.reserve(queries.vectors.size());
  for (const auto& q : queries.vectors) {
    std::size_t best = candidates.vectors.size();
    double best_sim = -2.0;
    for (std::size_t c = 0; c < candidates.vectors.size(); ++c) {
      if (used[c]) continue;
      const double sim = cosine(q, candidates.vectors[c]);
      if (sim > best_sim) {
        best_sim = sim;
        best = c;
      }
    }
    used[best] = true;
    picks.push_back(best);
  }
  return picks;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order,
                                                   std::size_t batch_size, bool drop_last) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    if (drop_last && end - i < batch_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

namespace {

void write_tokens(std::ostream& out, std::span<const Token> tokens) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out << ' ';
    out << tokens[i];
  }
}

TokenSeq parse_tokens(const std::string& text) {
  std::istringstream in(text);
  TokenSeq out;
  std::string word;
  while (in >> word) {
    std::size_t used = 0;
    const int t = std::stoi(word, &used);
    if (used != word.size()) throw std::invalid_argument("bad token id '" + word + "'");
    out.push_back(t);
  }
  return out;
}

}  // namespace

void write_pairs(std::ostream& out, std::span<const ParallelPair> pairs) {
  for (const auto& p : pairs) {
    write_tokens(out, p.src);
    out << '\t';
    write_tokens(out, p.tgt);
    out << '\n';
  }
}

void write_sources(std::ostream& out, std::span<const TokenSeq> sources) {
  for (const auto& s : sources) {
    write_tokens(out, s);
    out << "\t\n";
  }
}

std::vector<ParallelPair> read_pairs(std::istream& in) {
  std::vector<ParallelPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    ParallelPair p;
    try {
      p.src = parse_tokens(line.substr(0, tab));
      if (tab != std::string::npos) p.tgt = parse_tokens(line.substr(tab + 1));
    } catch (const std::exception& e) {
      throw std::invalid_argument("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace qeebm
