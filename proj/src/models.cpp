#include "qeebm/models.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "qeebm/rng.hpp"

namespace qeebm {

using ad::Graph;
using ad::Parameter;
using ad::Shape;
using ad::Tensor;

namespace {

constexpr double kMaskValue = -1e9;

// --- taped building blocks -------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ad::add_row(ad::matmul(x, w), b);
}

Tensor norm(const Tensor& x, const Bound& b, const NormIx& ix) {
  return ad::add_row(ad::mul_row(ad::layer_norm(x), b[ix.gain]), b[ix.bias]);
}

Tensor attention(Graph& g, const Bound& b, const AttentionIx& ix, const Tensor& q_in,
                 const Tensor& kv_in, int heads, bool causal) {
  const Tensor q = linear(q_in, b[ix.wq], b[ix.bq]);
  const Tensor k = linear(kv_in, b[ix.wk], b[ix.bk]);
  const Tensor v = linear(kv_in, b[ix.wv], b[ix.bv]);
  const std::size_t d = q.cols(), dh = d / static_cast<std::size_t>(heads);
  const std::size_t tq = q.rows(), tk = k.rows();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor mask;
  if (causal) {
    std::vector<double> m(tq * tk, 0.0);
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = i + 1; j < tk; ++j) m[i * tk + j] = kMaskValue;
    mask = g.constant({tq, tk}, std::move(m));
  }

  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    const Tensor qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    if (causal) scores = ad::add(scores, mask);
    outs.push_back(ad::matmul(ad::softmax(scores), vh));
  }
  const Tensor merged = heads == 1 ? outs[0] : ad::concat_cols(outs);
  return linear(merged, b[ix.wo], b[ix.bo]);
}

Tensor feed_forward(const Bound& b, const FeedForwardIx& ix, const Tensor& x) {
  return linear(ad::relu(linear(x, b[ix.w1], b[ix.b1])), b[ix.w2], b[ix.b2]);
}

Tensor adapter(const Bound& b, const AdapterIx& ix, const Tensor& x) {
  return ad::add(x, linear(ad::relu(linear(x, b[ix.down], b[ix.down_b])), b[ix.up], b[ix.up_b]));
}

Tensor embed_with_positions(Graph& g, const Tensor& rows, std::span<const std::size_t> positions,
                            std::size_t d) {
  std::vector<double> pe(positions.size() * d);
  std::size_t max_pos = 0;
  for (auto p : positions) max_pos = std::max(max_pos, p);
  const auto table = positional_encoding(max_pos + 1, d);
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) pe[i * d + j] = table[positions[i] * d + j];
  const Tensor scaled = ad::scale(rows, std::sqrt(static_cast<double>(d)));
  return ad::add(scaled, g.constant({positions.size(), d}, std::move(pe)));
}

std::vector<std::size_t> iota(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = start + i;
  return v;
}

// --- gradient-free mirrors -------------------------------------------------------------------
// Same arithmetic in the same order as the taped blocks, so both routes agree bitwise.

using Mat = std::vector<double>;

Mat plain_linear(const Mat& x, std::size_t n, const Parameter& w, const Parameter& b) {
  const std::size_t in = w.shape[0], out = w.shape[1];
  Mat y(n * out, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = y.data() + i * out;
    for (std::size_t p = 0; p < in; ++p) {
      const double s = x[i * in + p];
      const double* wrow = w.value.data() + p * out;
      for (std::size_t j = 0; j < out; ++j) row[j] += s * wrow[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) y[i * out + j] = y[i * out + j] + b.value[j];
  return y;
}

Mat plain_norm(const Mat& x, std::size_t n, const Parameter& gain, const Parameter& bias) {
  const std::size_t c = gain.value.size();
  Mat y(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[i * c + j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv_std = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = (x[i * c + j] - mean) * inv_std;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = y[i * c + j] * gain.value[j];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = y[i * c + j] + bias.value[j];
  return y;
}

void plain_relu(Mat& x) {
  for (auto& v : x) v = v > 0.0 ? v : 0.0;
}

void plain_add(Mat& x, const Mat& y) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = x[i] + y[i];
}

// Single-query attention of one head over `keys`/`values` rows of width dh.
void attend(const double* q, const std::vector<double>& keys, const std::vector<double>& values,
            std::size_t n, std::size_t dh, double* out) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(n, 0.0), probs(n);
  for (std::size_t t = 0; t < n; ++t) {
    double s = 0.0;
    for (std::size_t p = 0; p < dh; ++p) s += q[p] * keys[t * dh + p];
    scores[t] = s * inv_sqrt;
  }
  ad::softmax_row(scores, probs);
  for (std::size_t j = 0; j < dh; ++j) out[j] = 0.0;
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < dh; ++j) out[j] += probs[t] * values[t * dh + j];
}

std::vector<double> head_slice(const Mat& x, std::size_t n, std::size_t d, std::size_t h,
                               std::size_t dh) {
  std::vector<double> out(n * dh);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dh; ++j) out[i * dh + j] = x[i * d + h * dh + j];
  return out;
}

}  // namespace

std::vector<double> positional_encoding(std::size_t n, std::size_t d) {
  std::vector<double> pe(n * d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

// --- ParameterStore --------------------------------------------------------------------------

const Parameter& ParameterStore::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("no parameter named " + name);
}

Bound ParameterStore::bind(Graph& graph, bool track) {
  Bound b;
  b.reserve(params_.size());
  for (auto& p : params_) b.push_back(graph.parameter(p, track));
  return b;
}

Bound ParameterStore::bind_constant(Graph& graph) const {
  Bound b;
  b.reserve(params_.size());
  for (const auto& p : params_) b.push_back(graph.constant(p.shape, p.value));
  return b;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (!p.frozen) n += p.size();
  return n;
}

std::uint64_t ParameterStore::hash(bool include_frozen, bool include_trainable) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if ((p.frozen && !include_frozen) || (!p.frozen && !include_trainable)) continue;
    h = fnv1a64(std::span<const unsigned char>(
                    reinterpret_cast<const unsigned char*>(p.value.data()),
                    p.value.size() * sizeof(double)),
                h);
  }
  return h;
}

bool ParameterStore::all_finite() const {
  for (const auto& p : params_)
    for (double v : p.value)
      if (!std::isfinite(v)) return false;
  return true;
}

std::size_t ParameterStore::add_uniform(std::string name, Shape shape, double range,
                                        std::uint64_t seed) {
  RngStream rng(seed, "init:" + name);
  Parameter p(std::move(name), std::move(shape));
  for (auto& v : p.value) v = rng.uniform(-range, range);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::size_t ParameterStore::add_constant(std::string name, Shape shape, double value) {
  Parameter p(std::move(name), std::move(shape));
  std::fill(p.value.begin(), p.value.end(), value);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

namespace {

void validate_dims(const ModelDims& dims, int min_vocab) {
  if (dims.vocab < min_vocab) {
    throw std::invalid_argument("vocabulary of " + std::to_string(dims.vocab) +
                                " tokens is smaller than " + std::to_string(min_vocab));
  }
  if (dims.d_model <= 0 || dims.heads <= 0 || dims.d_model % dims.heads != 0 || dims.ff <= 0) {
    throw std::invalid_argument("model width must be positive and divisible by the head count");
  }
}

}  // namespace

// --- TaskNet ---------------------------------------------------------------------------------

TaskNet::TaskNet(const ModelDims& dims, std::uint64_t seed) : dims_(dims) {
  validate_dims(dims, special::kCount + 1);
  const auto V = static_cast<std::size_t>(dims.vocab);
  const auto d = static_cast<std::size_t>(dims.d_model);
  const auto f = static_cast<std::size_t>(dims.ff);
  const double r = dims.init_range;

  auto mat = [&](const std::string& n, std::size_t a, std::size_t b) {
    return add_uniform(n, {a, b}, r, seed);
  };
  auto zeros = [&](const std::string& n, std::size_t a) { return add_constant(n, {a}, 0.0); };
  auto ln = [&](const std::string& n) {
    return NormIx{add_constant(n + ".gain", {d}, 1.0), zeros(n + ".bias", d)};
  };
  auto attn = [&](const std::string& n) {
    AttentionIx ix{};
    ix.wq = mat(n + ".wq", d, d);
    ix.bq = zeros(n + ".bq", d);
    ix.wk = mat(n + ".wk", d, d);
    ix.bk = zeros(n + ".bk", d);
    ix.wv = mat(n + ".wv", d, d);
    ix.bv = zeros(n + ".bv", d);
    ix.wo = mat(n + ".wo", d, d);
    ix.bo = zeros(n + ".bo", d);
    return ix;
  };
  auto ffn = [&](const std::string& n) {
    return FeedForwardIx{mat(n + ".w1", d, f), zeros(n + ".b1", f), mat(n + ".w2", f, d),
                         zeros(n + ".b2", d)};
  };

  src_embed_ = mat("src_embed", V, d);
  tgt_embed_ = mat("tgt_embed", V, d);
  enc_ln1_ = ln("enc.ln1");
  enc_attn_ = attn("enc.attn");
  enc_ln2_ = ln("enc.ln2");
  enc_ffn_ = ffn("enc.ffn");
  enc_final_ = ln("enc.final");
  dec_ln1_ = ln("dec.ln1");
  dec_self_ = attn("dec.self");
  dec_ln2_ = ln("dec.ln2");
  dec_cross_ = attn("dec.cross");
  dec_ln3_ = ln("dec.ln3");
  dec_ffn_ = ffn("dec.ffn");
  dec_final_ = ln("dec.final");
  out_w_ = mat("out.w", d, V);
  out_b_ = zeros("out.b", V);
}

void TaskNet::check_tokens(std::span<const Token> tokens) const {
  for (Token t : tokens) {
    if (t < 0 || t >= dims_.vocab) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(dims_.vocab));
    }
  }
}

Tensor TaskNet::encode(Graph& g, const Bound& b, std::span<const Token> src) const {
  if (src.empty()) throw std::invalid_argument("encode: empty source");
  check_tokens(src);
  const auto d = static_cast<std::size_t>(dims_.d_model);
  const auto pos = iota(src.size());
  Tensor x = embed_with_positions(g, ad::gather_rows(b[src_embed_], src), pos, d);
  const Tensor h = norm(x, b, enc_ln1_);
  x = ad::add(x, attention(g, b, enc_attn_, h, h, dims_.heads, false));
  x = ad::add(x, feed_forward(b, enc_ffn_, norm(x, b, enc_ln2_)));
  if (enc_adapter_) x = adapter(b, *enc_adapter_, x);
  return norm(x, b, enc_final_);
}

TaskNet::Decoded TaskNet::decode(Graph& g, const Bound& b, const Tensor& memory,
                                 std::span<const Token> tgt_in) const {
  if (tgt_in.empty()) throw std::invalid_argument("decode: empty target prefix");
  check_tokens(tgt_in);
  const auto d = static_cast<std::size_t>(dims_.d_model);
  const auto pos = iota(tgt_in.size());
  Tensor x = embed_with_positions(g, ad::gather_rows(b[tgt_embed_], tgt_in), pos, d);
  const Tensor h1 = norm(x, b, dec_ln1_);
  x = ad::add(x, attention(g, b, dec_self_, h1, h1, dims_.heads, true));
  x = ad::add(x, attention(g, b, dec_cross_, norm(x, b, dec_ln2_), memory, dims_.heads, false));
  x = ad::add(x, feed_forward(b, dec_ffn_, norm(x, b, dec_ln3_)));
  if (dec_adapter_) x = adapter(b, *dec_adapter_, x);
  const Tensor states = norm(x, b, dec_final_);
  return {linear(states, b[out_w_], b[out_b_]), states};
}

Tensor TaskNet::forward(Graph& g, const Bound& b, std::span<const Token> src,
                        std::span<const Token> tgt_in) const {
  return decode(g, b, encode(g, b, src), tgt_in).logits;
}

namespace {

AdapterIx make_adapter(std::vector<Parameter>& params, const std::string& prefix, std::size_t d,
                       std::size_t rank, double range, std::uint64_t seed) {
  auto push = [&](Parameter p) {
    params.push_back(std::move(p));
    return params.size() - 1;
  };
  RngStream rng(seed, "init:" + prefix + ".down");
  Parameter down(prefix + ".down", {d, rank});
  for (auto& v : down.value) v = rng.uniform(-range, range);
  AdapterIx ix{};
  ix.down = push(std::move(down));
  ix.down_b = push(Parameter(prefix + ".down_b", {rank}));
  ix.up = push(Parameter(prefix + ".up", {rank, d}));  // zero: adapter starts as identity
  ix.up_b = push(Parameter(prefix + ".up_b", {d}));
  return ix;
}

void check_rank(int rank, int d) {
  if (rank < 1 || rank >= d) {
    throw std::invalid_argument("adapter rank " + std::to_string(rank) +
                                " must be in [1, " + std::to_string(d) + ")");
  }
}

}  // namespace

void TaskNet::attach_adapters(int rank, std::uint64_t seed) {
  check_rank(rank, dims_.d_model);
  if (has_adapters()) throw std::logic_error("adapters already attached");
  for (auto& p : params_) p.frozen = true;
  const auto d = static_cast<std::size_t>(dims_.d_model);
  const auto r = static_cast<std::size_t>(rank);
  enc_adapter_ = make_adapter(params_, "enc.adapter", d, r, dims_.init_range, seed);
  dec_adapter_ = make_adapter(params_, "dec.adapter", d, r, dims_.init_range, seed);
}

std::vector<double> TaskNet::encode_plain(std::span<const Token> src) const {
  if (src.empty()) throw std::invalid_argument("encode: empty source");
  check_tokens(src);
  const auto d = static_cast<std::size_t>(dims_.d_model);
  const auto heads = static_cast<std::size_t>(dims_.heads);
  const std::size_t dh = d / heads, n = src.size();
  const auto& P = params_;
  const double sq = std::sqrt(static_cast<double>(d));
  const auto pe = positional_encoding(n, d);

  Mat x(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[i * d + j] = P[src_embed_].value[static_cast<std::size_t>(src[i]) * d + j] * sq + pe[i * d + j];

  {
    const Mat h = plain_norm(x, n, P[enc_ln1_.gain], P[enc_ln1_.bias]);
    const Mat q = plain_linear(h, n, P[enc_attn_.wq], P[enc_attn_.bq]);
    const Mat k = plain_linear(h, n, P[enc_attn_.wk], P[enc_attn_.bk]);
    const Mat v = plain_linear(h, n, P[enc_attn_.wv], P[enc_attn_.bv]);
    Mat merged(n * d);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const auto qh = head_slice(q, n, d, hd, dh);
      const auto kh = head_slice(k, n, d, hd, dh);
      const auto vh = head_slice(v, n, d, hd, dh);
      std::vector<double> o(dh);
      for (std::size_t i = 0; i < n; ++i) {
        attend(qh.data() + i * dh, kh, vh, n, dh, o.data());
        for (std::size_t j = 0; j < dh; ++j) merged[i * d + hd * dh + j] = o[j];
      }
    }
    plain_add(x, plain_linear(merged, n, P[enc_attn_.wo], P[enc_attn_.bo]));
  }
  {
    Mat h = plain_linear(plain_norm(x, n, P[enc_ln2_.gain], P[enc_ln2_.bias]), n,
                         P[enc_ffn_.w1], P[enc_ffn_.b1]);
    plain_relu(h);
    plain_add(x, plain_linear(h, n, P[enc_ffn_.w2], P[enc_ffn_.b2]));
  }
  if (enc_adapter_) {
    Mat h = plain_linear(x, n, P[enc_adapter_->down], P[enc_adapter_->down_b]);
    plain_relu(h);
    plain_add(x, plain_linear(h, n, P[enc_adapter_->up], P[enc_adapter_->up_b]));
  }
  return plain_norm(x, n, P[enc_final_.gain], P[enc_final_.bias]);
}

std::vector<double> TaskNet::embed_source(std::span<const Token> src) const {
  const auto d = static_cast<std::size_t>(dims_.d_model);
  const auto memory = encode_plain(src);
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += memory[i * d + j];
  for (auto& v : mean) v /= static_cast<double>(src.size());
  return mean;
}

TaskNet::Stepper::Stepper(const TaskNet& net, std::span<const Token> src)
    : net_(&net), src_len_(src.size()) {
  const auto d = static_cast<std::size_t>(net.dims_.d_model);
  const auto heads = static_cast<std::size_t>(net.dims_.heads);
  const std::size_t dh = d / heads;
  const auto& P = net.params_;
  const Mat memory = net.encode_plain(src);
  const Mat k = plain_linear(memory, src_len_, P[net.dec_cross_.wk], P[net.dec_cross_.bk]);
  const Mat v = plain_linear(memory, src_len_, P[net.dec_cross_.wv], P[net.dec_cross_.bv]);
  for (std::size_t h = 0; h < heads; ++h) {
    cross_k_.push_back(head_slice(k, src_len_, d, h, dh));
    cross_v_.push_back(head_slice(v, src_len_, d, h, dh));
  }
  self_k_.resize(heads);
  self_v_.resize(heads);
}

std::vector<double> TaskNet::Stepper::step(Token token) {
  const TaskNet& net = *net_;
  net.check_tokens(std::span<const Token>(&token, 1));
  const auto d = static_cast<std::size_t>(net.dims_.d_model);
  const auto heads = static_cast<std::size_t>(net.dims_.heads);
  const std::size_t dh = d / heads;
  const auto& P = net.params_;
  const double sq = std::sqrt(static_cast<double>(d));
  const auto pe = positional_encoding(pos_ + 1, d);

  Mat x(d);
  for (std::size_t j = 0; j < d; ++j)
    x[j] = P[net.tgt_embed_].value[static_cast<std::size_t>(token) * d + j] * sq + pe[pos_ * d + j];

  {
    const Mat h = plain_norm(x, 1, P[net.dec_ln1_.gain], P[net.dec_ln1_.bias]);
    const Mat q = plain_linear(h, 1, P[net.dec_self_.wq], P[net.dec_self_.bq]);
    const Mat k = plain_linear(h, 1, P[net.dec_self_.wk], P[net.dec_self_.bk]);
    const Mat v = plain_linear(h, 1, P[net.dec_self_.wv], P[net.dec_self_.bv]);
    Mat merged(d);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      for (std::size_t j = 0; j < dh; ++j) {
        self_k_[hd].push_back(k[hd * dh + j]);
        self_v_[hd].push_back(v[hd * dh + j]);
      }
      attend(q.data() + hd * dh, self_k_[hd], self_v_[hd], pos_ + 1, dh, merged.data() + hd * dh);
    }
    plain_add(x, plain_linear(merged, 1, P[net.dec_self_.wo], P[net.dec_self_.bo]));
  }
  {
    const Mat h = plain_norm(x, 1, P[net.dec_ln2_.gain], P[net.dec_ln2_.bias]);
    const Mat q = plain_linear(h, 1, P[net.dec_cross_.wq], P[net.dec_cross_.bq]);
    Mat merged(d);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      attend(q.data() + hd * dh, cross_k_[hd], cross_v_[hd], src_len_, dh,
             merged.data() + hd * dh);
    }
    plain_add(x, plain_linear(merged, 1, P[net.dec_cross_.wo], P[net.dec_cross_.bo]));
  }
  {
    Mat h = plain_linear(plain_norm(x, 1, P[net.dec_ln3_.gain], P[net.dec_ln3_.bias]), 1,
                         P[net.dec_ffn_.w1], P[net.dec_ffn_.b1]);
    plain_relu(h);
    plain_add(x, plain_linear(h, 1, P[net.dec_ffn_.w2], P[net.dec_ffn_.b2]));
  }
  if (net.dec_adapter_) {
    Mat h = plain_linear(x, 1, P[net.dec_adapter_->down], P[net.dec_adapter_->down_b]);
    plain_relu(h);
    plain_add(x, plain_linear(h, 1, P[net.dec_adapter_->up], P[net.dec_adapter_->up_b]));
  }
  const Mat states = plain_norm(x, 1, P[net.dec_final_.gain], P[net.dec_final_.bias]);
  ++pos_;
  return plain_linear(states, 1, P[net.out_w_], P[net.out_b_]);
}

// --- EnergyNet -------------------------------------------------------------------------------

EnergyNet::EnergyNet(const ModelDims& dims, std::uint64_t seed, int head_hidden) : dims_(dims) {
  validate_dims(dims, special::kCount + 1);
  if (head_hidden <= 0) throw std::invalid_argument("scorer head width must be positive");
  const auto V = static_cast<std::size_t>(dims.vocab);
  const auto d = static_cast<std::size_t>(dims.d_model);
  const auto f = static_cast<std::size_t>(dims.ff);
  const auto hh = static_cast<std::size_t>(head_hidden);
  const double r = dims.init_range;

  auto mat = [&](const std::string& n, std::size_t a, std::size_t b) {
    return add_uniform(n, {a, b}, r, seed);
  };
  auto zeros = [&](const std::string& n, std::size_t a) { return add_constant(n, {a}, 0.0); };
  auto ln = [&](const std::string& n) {
    return NormIx{add_constant(n + ".gain", {d}, 1.0), zeros(n + ".bias", d)};
  };

  embed_ = mat("embed", V, d);
  segment_ = mat("segment", 2, d);
  ln1_ = ln("enc.ln1");
  attn_ = AttentionIx{mat("enc.attn.wq", d, d), zeros("enc.attn.bq", d),
                      mat("enc.attn.wk", d, d), zeros("enc.attn.bk", d),
                      mat("enc.attn.wv", d, d), zeros("enc.attn.bv", d),
                      mat("enc.attn.wo", d, d), zeros("enc.attn.bo", d)};
  ln2_ = ln("enc.ln2");
  ffn_ = FeedForwardIx{mat("enc.ffn.w1", d, f), zeros("enc.ffn.b1", f),
                       mat("enc.ffn.w2", f, d), zeros("enc.ffn.b2", d)};
  final_ = ln("enc.final");
  head_w1_ = mat("head.w1", d, hh);
  head_b1_ = zeros("head.b1", hh);
  head_w2_ = mat("head.w2", hh, 1);
  head_b2_ = zeros("head.b2", 1);
}

Tensor EnergyNet::logit_from_embeddings(Graph& g, const Bound& b, std::span<const Token> src,
                                        const Tensor& hyp_embed) const {
  if (src.empty()) throw std::invalid_argument("scorer: empty source");
  const auto d = static_cast<std::size_t>(dims_.d_model);
  const std::size_t n_src = src.size(), n_hyp = hyp_embed.rows();

  std::vector<Token> prefix(src.begin(), src.end());
  prefix.push_back(special::kSep);
  for (Token t : prefix) {
    if (t < 0 || t >= dims_.vocab) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  std::vector<Tensor> parts{ad::gather_rows(b[embed_], prefix)};
  if (n_hyp > 0) parts.push_back(hyp_embed);
  const Tensor tokens = ad::concat_rows(parts);

  // Positions restart at zero for the hypothesis segment so aligned tokens share a code.
  std::vector<std::size_t> pos = iota(n_src + 1);
  const auto hyp_pos = iota(n_hyp);
  pos.insert(pos.end(), hyp_pos.begin(), hyp_pos.end());
  std::vector<int> seg(n_src + 1, 0);
  seg.resize(n_src + 1 + n_hyp, 1);

  Tensor x = embed_with_positions(g, tokens, pos, d);
  x = ad::add(x, ad::gather_rows(b[segment_], seg));
  const Tensor h = norm(x, b, ln1_);
  x = ad::add(x, attention(g, b, attn_, h, h, dims_.heads, false));
  x = ad::add(x, feed_forward(b, ffn_, norm(x, b, ln2_)));
  if (adapter_) x = adapter(b, *adapter_, x);
  const Tensor pooled = ad::reshape(ad::mean_rows(norm(x, b, final_)), {1, d});
  const Tensor hidden = ad::tanh(linear(pooled, b[head_w1_], b[head_b1_]));
  return ad::reshape(linear(hidden, b[head_w2_], b[head_b2_]), {});
}

Tensor EnergyNet::score_logit(Graph& g, const Bound& b, std::span<const Token> src,
                              const Tensor& hyp_rows) const {
  if (hyp_rows.rank() != 2 || hyp_rows.cols() != static_cast<std::size_t>(dims_.vocab)) {
    throw std::invalid_argument("scorer: hypothesis rows have shape " +
                                ad::shape_string(hyp_rows.shape()) + ", expected (T, " +
                                std::to_string(dims_.vocab) + ")");
  }
  const auto data = hyp_rows.data();
  const std::size_t V = hyp_rows.cols();
  for (std::size_t i = 0; i < hyp_rows.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += data[i * V + j];
    if (std::abs(s - 1.0) > 1e-9) {
      throw std::invalid_argument("scorer: hypothesis row " + std::to_string(i) + " sums to " +
                                  std::to_string(s));
    }
  }
  return logit_from_embeddings(g, b, src, ad::matmul(hyp_rows, b[embed_]));
}

Tensor EnergyNet::score(Graph& g, const Bound& b, std::span<const Token> src,
                        const Tensor& hyp_rows) const {
  return ad::sigmoid(score_logit(g, b, src, hyp_rows));
}

Tensor EnergyNet::score_tokens(Graph& g, const Bound& b, std::span<const Token> src,
                               std::span<const Token> hyp) const {
  for (Token t : hyp) {
    if (t < 0 || t >= dims_.vocab) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  const auto d = static_cast<std::size_t>(dims_.d_model);
  const Tensor rows = hyp.empty() ? g.constant({0, d}, {}) : ad::gather_rows(b[embed_], hyp);
  return ad::sigmoid(logit_from_embeddings(g, b, src, rows));
}

double EnergyNet::score_value(std::span<const Token> src, std::span<const Token> hyp) const {
  Graph g;
  const Bound b = bind_constant(g);
  return score_tokens(g, b, src, hyp).item();
}

void EnergyNet::attach_adapters(int rank, std::uint64_t seed) {
  check_rank(rank, dims_.d_model);
  if (has_adapters()) throw std::logic_error("adapters already attached");
  for (auto& p : params_) p.frozen = true;
  adapter_ = make_adapter(params_, "enc.adapter", static_cast<std::size_t>(dims_.d_model),
                          static_cast<std::size_t>(rank), dims_.init_range, seed);
}

// --- ValueHead -------------------------------------------------------------------------------

ValueHead::ValueHead(int d_model, std::uint64_t seed, double init_range) {
  add_uniform("value.w", {static_cast<std::size_t>(d_model), 1}, init_range, seed);
  add_constant("value.b", {1}, 0.0);
}

Tensor ValueHead::value(Graph&, const Bound& b, const Tensor& states) const {
  const Tensor pooled = ad::reshape(ad::mean_rows(states), {1, states.cols()});
  return ad::reshape(linear(pooled, b[0], b[1]), {});
}

}  // namespace qeebm
