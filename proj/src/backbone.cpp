// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace slowrec {

using num::Tensor;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMat = Eigen::Map<const RowMat>;
using CVec = Eigen::Map<const Eigen::RowVectorXd>;
using Vec = Eigen::Map<Eigen::RowVectorXd>;

constexpr double kLnEps = 1e-5;

void round_all(std::span<double> v) {
  if (num::precision() == num::Precision::f64) return;
  for (auto& x : v) x = num::round_to_precision(x);
}

// y = x W + b for a single row.
void linear_row(const num::Linear& l, std::span<const double> x, std::span<double> y) {
  const auto in = l.weight.rows(), out = l.weight.cols();
  CMat w(l.weight.data().data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  Vec yv(y.data(), static_cast<Eigen::Index>(out));
  yv.noalias() = CVec(x.data(), static_cast<Eigen::Index>(in)) * w;
  yv += CVec(l.bias.data().data(), static_cast<Eigen::Index>(out));
  round_all(y);
}

void layer_norm_row(const num::LayerNorm& ln, std::span<const double> x, std::span<double> y) {
  const auto c = x.size();
  auto g = ln.gamma.data(), b = ln.beta.data();
  double mu = 0.0;
  for (std::size_t j = 0; j < c; ++j) mu += x[j];
  mu /= static_cast<double>(c);
  double var = 0.0;
  for (std::size_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= static_cast<double>(c);
  const double is = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t j = 0; j < c; ++j) y[j] = g[j] * ((x[j] - mu) * is) + b[j];
  round_all(y);
}

// One query row against `n` cached key/value rows, all heads.
void attend_row(std::span<const double> q, const double* keys, const double* values, std::size_t n,
                std::size_t h, std::size_t heads, std::span<double> out) {
  const auto dh = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> s(n);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const auto off = hd * dh;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < dh; ++c) d += q[off + c] * keys[j * h + off + c];
      s[j] = d * scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = std::exp(s[j] - mx);
      z += s[j];
    }
    for (std::size_t c = 0; c < dh; ++c) out[off + c] = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = s[j] / z;
      for (std::size_t c = 0; c < dh; ++c) out[off + c] += p * values[j * h + off + c];
    }
  }
  round_all(out);
}

Tensor maybe_dropout(const Tensor& x, double p, num::Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  return num::dropout(x, p, *rng);
}

std::vector<std::size_t> as_ids(std::span<const Token> t) { return {t.begin(), t.end()}; }

}  // namespace

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary(std::size_t levels, std::size_t codebook_size, std::size_t suffix_range)
    : levels_(levels), codebook_size_(codebook_size), suffix_range_(suffix_range) {
  if (levels == 0 || codebook_size == 0) throw std::invalid_argument("vocabulary: empty code space");
}

Token Vocabulary::code_token(std::size_t level, Code code) const {
  if (level >= levels_ || code >= codebook_size_) {
    throw std::out_of_range(fmt::format("vocabulary: code {} at level {} out of range", code, level));
  }
  return static_cast<Token>(kFirstCode + level * codebook_size_ + code);
}

Token Vocabulary::suffix_token(Code suffix) const {
  if (suffix >= suffix_range_) throw std::out_of_range(fmt::format("vocabulary: suffix {} out of range", suffix));
  return static_cast<Token>(kFirstCode + num_code_tokens() + suffix);
}

std::vector<Token> Vocabulary::tokens_for(const SemanticId& id) const {
  if (id.codes.size() != levels_) throw std::invalid_argument("vocabulary: semantic id has the wrong length");
  std::vector<Token> out;
  for (std::size_t d = 0; d < levels_; ++d) out.push_back(code_token(d, id.codes[d]));
  if (id.suffix) out.push_back(suffix_token(*id.suffix));
  return out;
}

// ------------------------------------------------------------------ catalog

ItemCatalog::ItemCatalog(const SemanticIdMap& ids, const Vocabulary& vocab) : vocab_(vocab), ids_(ids.ids) {
  nodes_.push_back(Node{Vocabulary::kBos, -1, {}, -1});
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    items_.push_back(vocab_.tokens_for(ids_[i]));
    max_len_ = std::max(max_len_, items_.back().size());
    std::int32_t cur = 0;
    for (auto t : items_.back()) {
      if (nodes_[static_cast<std::size_t>(cur)].item >= 0) {
        throw DataError(fmt::format("item {} extends the token sequence of item {}", i, nodes_[static_cast<std::size_t>(cur)].item));
      }
      auto next = child(cur, t);
      if (next < 0) {
        next = static_cast<std::int32_t>(nodes_.size());
        nodes_.push_back(Node{t, cur, {}, -1});
        auto& ch = nodes_[static_cast<std::size_t>(cur)].children;
        auto pos = std::lower_bound(ch.begin(), ch.end(), t,
                                    [&](std::int32_t n, Token tok) { return nodes_[static_cast<std::size_t>(n)].token < tok; });
        ch.insert(pos, next);
      }
      cur = next;
    }
    auto& leaf = nodes_[static_cast<std::size_t>(cur)];
    if (leaf.item >= 0 || !leaf.children.empty()) {
      throw DataError(fmt::format("items {} and {} share a token sequence", leaf.item, i));
    }
    leaf.item = static_cast<std::int32_t>(i);
  }
}

std::int32_t ItemCatalog::child(std::int32_t node, Token token) const {
  for (auto c : nodes_[static_cast<std::size_t>(node)].children) {
    if (nodes_[static_cast<std::size_t>(c)].token == token) return c;
  }
  return -1;
}

std::optional<ItemIndex> ItemCatalog::parse(std::span<const Token> tokens) const {
  std::int32_t cur = 0;
  for (auto t : tokens) {
    if (nodes_[static_cast<std::size_t>(cur)].item >= 0) return std::nullopt;
    cur = child(cur, t);
    if (cur < 0) return std::nullopt;
  }
  const auto item = nodes_[static_cast<std::size_t>(cur)].item;
  if (item < 0) return std::nullopt;
  return static_cast<ItemIndex>(item);
}

bool ItemCatalog::is_terminal(std::span<const Token> tokens) const {
  std::int32_t cur = 0;
  for (auto t : tokens) {
    cur = child(cur, t);
    if (cur < 0) return true;
    if (nodes_[static_cast<std::size_t>(cur)].item >= 0) return true;
  }
  return false;
}

std::vector<Token> history_tokens(const ItemCatalog& catalog, std::span<const ItemIndex> history) {
  std::vector<Token> out;
  for (auto i : history) {
    const auto& t = catalog.tokens(i);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

// -------------------------------------------------------------------- model

num::ParamList SharedEncoder::params() const {
  num::ParamList out{{"encoder.token_embedding", token_embedding}, {"encoder.positions", positions}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto p = fmt::format("encoder.layer{}", i);
    const auto& l = layers[i];
    l.ln_attn.collect(p + ".ln_attn", out);
    l.q.collect(p + ".q", out);
    l.k.collect(p + ".k", out);
    l.v.collect(p + ".v", out);
    l.o.collect(p + ".o", out);
    l.ln_ffn.collect(p + ".ln_ffn", out);
    l.ff1.collect(p + ".ff1", out);
    l.ff2.collect(p + ".ff2", out);
  }
  final_norm.collect("encoder.final_norm", out);
  return out;
}

num::ParamList DecoderStack::params() const {
  num::ParamList out{{"decoder.positions", positions}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto p = fmt::format("decoder.layer{}", i);
    const auto& l = layers[i];
    l.ln_self.collect(p + ".ln_self", out);
    l.q.collect(p + ".q", out);
    l.k.collect(p + ".k", out);
    l.v.collect(p + ".v", out);
    l.o.collect(p + ".o", out);
    l.ln_cross.collect(p + ".ln_cross", out);
    l.cq.collect(p + ".cq", out);
    l.ck.collect(p + ".ck", out);
    l.cv.collect(p + ".cv", out);
    l.co.collect(p + ".co", out);
    l.ln_ffn.collect(p + ".ln_ffn", out);
    l.ff1.collect(p + ".ff1", out);
    l.ff2.collect(p + ".ff2", out);
  }
  final_norm.collect("decoder.final_norm", out);
  output.collect("decoder.output", out);
  return out;
}

namespace {

void check_config(const BackboneConfig& c, std::size_t vocab_size) {
  if (c.hidden == 0 || c.heads == 0 || c.hidden % c.heads != 0) {
    throw std::invalid_argument(fmt::format("backbone: hidden {} not divisible by {} heads", c.hidden, c.heads));
  }
  if (vocab_size < 4) throw std::invalid_argument("backbone: vocabulary too small");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw std::invalid_argument("backbone: dropout must be in [0, 1)");
  if (!(c.tau > 0.0)) throw std::invalid_argument("backbone: tau must be positive");
}

DecoderStack make_decoder(const BackboneConfig& c, std::size_t vocab_size, num::Rng& rng) {
  DecoderStack d;
  const auto h = c.hidden;
  d.positions = num::randn({c.max_target_len + 1, h}, 0.1, rng);
  for (std::size_t i = 0; i < c.decoder_layers; ++i) {
    DecoderLayer l;
    l.ln_self = num::LayerNorm(h);
    l.ln_cross = num::LayerNorm(h);
    l.ln_ffn = num::LayerNorm(h);
    l.q = num::Linear(h, h, rng);
    l.k = num::Linear(h, h, rng);
    l.v = num::Linear(h, h, rng);
    l.o = num::Linear(h, h, rng);
    l.cq = num::Linear(h, h, rng);
    l.ck = num::Linear(h, h, rng);
    l.cv = num::Linear(h, h, rng);
    l.co = num::Linear(h, h, rng);
    l.ff1 = num::Linear(h, c.ffn, rng);
    l.ff2 = num::Linear(c.ffn, h, rng);
    d.layers.push_back(std::move(l));
  }
  d.final_norm = num::LayerNorm(h);
  d.output = num::Linear(h, vocab_size, rng, c.output_std);
  return d;
}

}  // namespace

EncoderDecoder::EncoderDecoder(const BackboneConfig& config, std::size_t vocab_size)
    : config_(config), vocab_size_(vocab_size) {
  check_config(config, vocab_size);
  num::Rng rng(num::derive_seed(config.seed, 0x454e43));
  const auto h = config.hidden;
  encoder_ = std::make_shared<SharedEncoder>();
  encoder_->token_embedding = num::randn({vocab_size, h}, config.embedding_std, rng);
  encoder_->positions = num::randn({config.max_source_len, h}, 0.1, rng);
  for (std::size_t i = 0; i < config.encoder_layers; ++i) {
    EncoderLayer l;
    l.ln_attn = num::LayerNorm(h);
    l.ln_ffn = num::LayerNorm(h);
    l.q = num::Linear(h, h, rng);
    l.k = num::Linear(h, h, rng);
    l.v = num::Linear(h, h, rng);
    l.o = num::Linear(h, h, rng);
    l.ff1 = num::Linear(h, config.ffn, rng);
    l.ff2 = num::Linear(config.ffn, h, rng);
    encoder_->layers.push_back(std::move(l));
  }
  encoder_->final_norm = num::LayerNorm(h);
  num::Rng drng(num::derive_seed(config.seed, 0x444543));
  decoder_ = make_decoder(config, vocab_size, drng);
}

EncoderDecoder::EncoderDecoder(const BackboneConfig& config, std::size_t vocab_size,
                               std::shared_ptr<SharedEncoder> encoder, num::Rng& rng)
    : config_(config), vocab_size_(vocab_size), encoder_(std::move(encoder)) {
  check_config(config, vocab_size);
  if (!encoder_ || encoder_->token_embedding.rows() != vocab_size || encoder_->token_embedding.cols() != config.hidden) {
    throw std::invalid_argument("backbone: shared encoder does not match the configuration");
  }
  decoder_ = make_decoder(config, vocab_size, rng);
}

num::ParamList EncoderDecoder::params() const {
  auto out = encoder_params();
  auto dec = decoder_params();
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

void EncoderDecoder::validate_tokens(std::span<const Token> tokens, const char* what) const {
  for (auto t : tokens) {
    if (t >= vocab_size_) throw std::invalid_argument(fmt::format("{}: unknown token {}", what, t));
  }
}

namespace {

Tensor encoder_stack(const EncoderDecoder& m, const std::vector<std::size_t>& ids, const std::vector<std::size_t>& pos,
                     const std::vector<std::size_t>& offsets, num::Rng* rng) {
  const auto& enc = *m.encoder();
  const auto& c = m.config();
  Tensor x = num::embedding(enc.token_embedding, ids) + num::embedding(enc.positions, pos);
  x = maybe_dropout(x, c.dropout, rng);
  for (const auto& l : enc.layers) {
    auto h = l.ln_attn(x);
    auto a = num::attention(l.q(h), l.k(h), l.v(h), c.heads, false, offsets, offsets);
    x = x + maybe_dropout(l.o(a), c.dropout, rng);
    h = l.ln_ffn(x);
    x = x + maybe_dropout(l.ff2(num::gelu(l.ff1(h))), c.dropout, rng);
  }
  return enc.final_norm(x);
}

}  // namespace

ForwardResult EncoderDecoder::forward(std::span<const std::vector<Token>> sources,
                                      std::span<const std::vector<Token>> decoder_inputs, num::Rng* rng) const {
  if (sources.empty() || sources.size() != decoder_inputs.size()) {
    throw std::invalid_argument("forward: need one decoder input per source");
  }
  ForwardResult r;
  std::vector<std::size_t> sid, spos, tid, tpos;
  r.source_offsets.push_back(0);
  r.target_offsets.push_back(0);
  for (std::size_t b = 0; b < sources.size(); ++b) {
    const auto& s = sources[b];
    const auto& t = decoder_inputs[b];
    validate_tokens(s, "encode");
    validate_tokens(t, "decode");
    if (s.empty() || std::all_of(s.begin(), s.end(), [](Token x) { return x == Vocabulary::kPad; })) {
      throw std::invalid_argument(fmt::format("encode: source {} is empty or all padding", b));
    }
    if (std::find(s.begin(), s.end(), Vocabulary::kPad) != s.end()) {
      throw std::invalid_argument(fmt::format("encode: source {} contains padding", b));
    }
    if (s.size() > config_.max_source_len) {
      throw std::invalid_argument(fmt::format("encode: source of {} tokens exceeds {}", s.size(), config_.max_source_len));
    }
    if (t.empty() || t[0] != Vocabulary::kBos) throw std::invalid_argument("decode: prefix must start with BOS");
    if (t.size() > config_.max_target_len + 1) {
      throw std::invalid_argument(fmt::format("decode: prefix of {} exceeds max decode length {}", t.size(),
                                              config_.max_target_len + 1));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      sid.push_back(s[i]);
      spos.push_back(i);
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      tid.push_back(t[i]);
      tpos.push_back(i);
    }
    r.source_offsets.push_back(sid.size());
    r.target_offsets.push_back(tid.size());
  }
  r.memory = encoder_stack(*this, sid, spos, r.source_offsets, rng);
  r.pooled = num::segment_mean_rows(r.memory, r.source_offsets);

  const auto& c = config_;
  Tensor y = num::embedding(encoder_->token_embedding, tid) + num::embedding(decoder_.positions, tpos);
  y = maybe_dropout(y, c.dropout, rng);
  for (const auto& l : decoder_.layers) {
    auto h = l.ln_self(y);
    auto a = num::attention(l.q(h), l.k(h), l.v(h), c.heads, true, r.target_offsets, r.target_offsets);
    y = y + maybe_dropout(l.o(a), c.dropout, rng);
    h = l.ln_cross(y);
    a = num::attention(l.cq(h), l.ck(r.memory), l.cv(r.memory), c.heads, false, r.target_offsets, r.source_offsets);
    y = y + maybe_dropout(l.co(a), c.dropout, rng);
    h = l.ln_ffn(y);
    y = y + maybe_dropout(l.ff2(num::gelu(l.ff1(h))), c.dropout, rng);
  }
  r.hidden = decoder_.final_norm(y);
  r.logits = decoder_.output(r.hidden);
  return r;
}

std::pair<Tensor, Tensor> EncoderDecoder::encode_tape(std::span<const Token> source) const {
  validate_tokens(source, "encode");
  if (source.empty() || std::all_of(source.begin(), source.end(), [](Token x) { return x == Vocabulary::kPad; })) {
    throw std::invalid_argument("encode: source is empty or all padding");
  }
  if (std::find(source.begin(), source.end(), Vocabulary::kPad) != source.end()) {
    throw std::invalid_argument("encode: source contains padding");
  }
  if (source.size() > config_.max_source_len) {
    throw std::invalid_argument(fmt::format("encode: source of {} tokens exceeds {}", source.size(), config_.max_source_len));
  }
  std::vector<std::size_t> pos(source.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  std::vector<std::size_t> offsets{0, source.size()};
  auto memory = encoder_stack(*this, as_ids(source), pos, offsets, nullptr);
  auto pooled = num::segment_mean_rows(memory, offsets);
  return {memory, pooled};
}

Encoding EncoderDecoder::encode(std::span<const Token> source) const {
  num::NoGradGuard guard;
  auto [memory, pooled] = encode_tape(source);
  Encoding e;
  e.length = source.size();
  e.hidden = config_.hidden;
  e.memory.assign(memory.data().begin(), memory.data().end());
  e.pooled.assign(pooled.data().begin(), pooled.data().end());
  return e;
}

std::vector<std::vector<double>> EncoderDecoder::decode_logits(const Encoding& enc, std::span<const Token> prefix) const {
  if (prefix.empty() || prefix[0] != Vocabulary::kBos) throw std::invalid_argument("decode: prefix must start with BOS");
  if (prefix.size() > config_.max_target_len + 1) {
    throw std::invalid_argument(fmt::format("decode: prefix of {} exceeds max decode length {}", prefix.size(),
                                            config_.max_target_len + 1));
  }
  validate_tokens(prefix, "decode");
  IncrementalDecoder dec(*this, enc);
  std::vector<std::vector<double>> out;
  for (auto t : prefix) {
    dec.push(t);
    out.push_back(dec.logits());
  }
  return out;
}

double EncoderDecoder::log_prob(const Encoding& enc, std::span<const Token> target, std::span<const Token> prefix) const {
  if (target.empty()) throw std::invalid_argument("log_prob: empty target");
  validate_tokens(target, "log_prob");
  validate_tokens(prefix, "log_prob");
  if (1 + prefix.size() + target.size() - 1 > config_.max_target_len + 1) {
    throw std::invalid_argument("log_prob: sequence exceeds max decode length");
  }
  IncrementalDecoder dec(*this, enc);
  dec.push(Vocabulary::kBos);
  for (auto t : prefix) dec.push(t);
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto lp = num::log_softmax_temp(dec.logits(), config_.tau);
    total += lp[target[i]];
    if (i + 1 < target.size()) dec.push(target[i]);
  }
  return total;
}

void EncoderDecoder::save(const std::filesystem::path& path) const { num::save_tensors(path, params()); }
void EncoderDecoder::load(const std::filesystem::path& path) { num::load_tensors(path, params()); }

ReferenceDecoder::ReferenceDecoder(const BackboneModel& backbone, std::uint64_t seed) {
  num::Rng rng(num::derive_seed(seed, 0x524546));
  static_cast<EncoderDecoder&>(*this) =
      EncoderDecoder(backbone.config(), backbone.vocab_size(), backbone.encoder(), rng);
}

BackboneModel clone_model(const EncoderDecoder& model) {
  BackboneModel copy(model.config(), model.vocab_size());
  num::copy_values(model.params(), copy.params());
  return copy;
}

// -------------------------------------------------------------- incremental

IncrementalDecoder::IncrementalDecoder(const EncoderDecoder& model, const Encoding& enc) : model_(model), enc_(enc) {
  const auto h = model.hidden();
  if (enc.hidden != h) throw std::invalid_argument("decoder: encoding width does not match the model");
  const auto& layers = model.decoder_.layers;
  const auto cap = (model.config_.max_target_len + 1) * h;
  self_k_.assign(layers.size(), std::vector<double>(cap));
  self_v_.assign(layers.size(), std::vector<double>(cap));
  cross_k_.resize(layers.size());
  cross_v_.resize(layers.size());
  for (std::size_t li = 0; li < layers.size(); ++li) {
    cross_k_[li].resize(enc.length * h);
    cross_v_[li].resize(enc.length * h);
    for (std::size_t j = 0; j < enc.length; ++j) {
      std::span<const double> row(enc.memory.data() + j * h, h);
      linear_row(layers[li].ck, row, std::span(cross_k_[li]).subspan(j * h, h));
      linear_row(layers[li].cv, row, std::span(cross_v_[li]).subspan(j * h, h));
    }
  }
  top_.assign(h, 0.0);
}

void IncrementalDecoder::push(Token token) {
  const auto h = model_.hidden();
  const auto& cfg = model_.config_;
  if (length_ >= cfg.max_target_len + 1) throw std::invalid_argument("decoder: max decode length exceeded");
  if (token >= model_.vocab_size_) throw std::invalid_argument(fmt::format("decoder: unknown token {}", token));
  const auto pos = length_;
  std::vector<double> x(h), ln(h), q(h), a(h), proj(h), ff(cfg.ffn);
  auto emb = model_.encoder_->token_embedding.data().subspan(token * h, h);
  auto pe = model_.decoder_.positions.data().subspan(pos * h, h);
  for (std::size_t c = 0; c < h; ++c) x[c] = emb[c] + pe[c];
  round_all(x);
  const auto& layers = model_.decoder_.layers;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    layer_norm_row(l.ln_self, x, ln);
    linear_row(l.q, ln, q);
    linear_row(l.k, ln, std::span(self_k_[li]).subspan(pos * h, h));
    linear_row(l.v, ln, std::span(self_v_[li]).subspan(pos * h, h));
    attend_row(q, self_k_[li].data(), self_v_[li].data(), pos + 1, h, cfg.heads, a);
    linear_row(l.o, a, proj);
    for (std::size_t c = 0; c < h; ++c) x[c] += proj[c];
    round_all(x);

    layer_norm_row(l.ln_cross, x, ln);
    linear_row(l.cq, ln, q);
    attend_row(q, cross_k_[li].data(), cross_v_[li].data(), enc_.length, h, cfg.heads, a);
    linear_row(l.co, a, proj);
    for (std::size_t c = 0; c < h; ++c) x[c] += proj[c];
    round_all(x);

    layer_norm_row(l.ln_ffn, x, ln);
    linear_row(l.ff1, ln, ff);
    for (auto& v : ff) v = num::gelu_scalar(v);
    round_all(ff);
    linear_row(l.ff2, ff, proj);
    for (std::size_t c = 0; c < h; ++c) x[c] += proj[c];
    round_all(x);
  }
  layer_norm_row(model_.decoder_.final_norm, x, top_);
  ++length_;
}

void IncrementalDecoder::truncate(std::size_t length) {
  if (length > length_) throw std::invalid_argument("decoder: cannot truncate forward");
  length_ = length;
}

std::vector<double> IncrementalDecoder::logits() const {
  if (length_ == 0) throw std::logic_error("decoder: no position decoded yet");
  std::vector<double> out(model_.vocab_size_);
  linear_row(model_.decoder_.output, top_, out);
  return out;
}

// --------------------------------------------------------------- generation

namespace {

Token argmax_token(std::span<const double> lp) {
  return static_cast<Token>(std::max_element(lp.begin(), lp.end()) - lp.begin());
}

Token sample_token(std::span<const double> logits, double temperature, num::Rng& rng) {
  const auto p = num::softmax_temp(logits, temperature);
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return static_cast<Token>(i);
  }
  // rounding slack: last token with positive mass
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return static_cast<Token>(i);
  return 0;
}

}  // namespace

std::vector<Hypothesis> generate(const EncoderDecoder& model, const Encoding& enc, const GenerateOptions& options,
                                 num::Rng* rng, std::span<const Token> prefix) {
  const double tau = model.config().tau;
  auto finished = [&](const Hypothesis& hyp) {
    if (!hyp.tokens.empty() && hyp.tokens.back() == Vocabulary::kEos) return true;
    if (hyp.tokens.size() >= options.max_len) return true;
    return options.done && options.done(hyp.tokens);
  };
  if (options.mode != DecodeMode::beam) {
    if (options.mode == DecodeMode::sample && rng == nullptr) throw std::invalid_argument("generate: sampling needs a generator");
    IncrementalDecoder dec(model, enc);
    dec.push(Vocabulary::kBos);
    for (auto t : prefix) dec.push(t);
    Hypothesis hyp;
    while (!finished(hyp)) {
      const auto logits = dec.logits();
      const auto lp = num::log_softmax_temp(logits, tau);
      const Token t = options.mode == DecodeMode::greedy ? argmax_token(lp)
                                                         : sample_token(logits, options.temperature, *rng);
      hyp.hidden.emplace_back(dec.hidden().begin(), dec.hidden().end());
      hyp.tokens.push_back(t);
      hyp.log_prob += lp[t];
      if (!finished(hyp)) dec.push(t);
    }
    return {hyp};
  }

  if (options.beam_width == 0) throw std::invalid_argument("generate: beam width must be positive");
  std::vector<Hypothesis> alive{Hypothesis{}}, done;
  while (!alive.empty()) {
    struct Cand {
      double score;
      std::size_t hyp;
      Token token;
    };
    std::vector<Cand> cands;
    std::vector<std::vector<double>> hiddens;
    for (std::size_t hi = 0; hi < alive.size(); ++hi) {
      IncrementalDecoder dec(model, enc);
      dec.push(Vocabulary::kBos);
      for (auto t : prefix) dec.push(t);
      for (auto t : alive[hi].tokens) dec.push(t);
      const auto lp = num::log_softmax_temp(dec.logits(), tau);
      hiddens.emplace_back(dec.hidden().begin(), dec.hidden().end());
      for (std::size_t t = 0; t < lp.size(); ++t) cands.push_back({alive[hi].log_prob + lp[t], hi, static_cast<Token>(t)});
    }
    const auto keep = std::min(options.beam_width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h = alive[cands[i].hyp];
      h.tokens.push_back(cands[i].token);
      h.hidden.push_back(hiddens[cands[i].hyp]);
      h.log_prob = cands[i].score;
      (finished(h) ? done : next).push_back(std::move(h));
    }
    // stop once the best finished hypothesis beats everything still alive
    alive = std::move(next);
    if (done.size() >= options.beam_width) break;
  }
  for (auto& h : alive) done.push_back(std::move(h));
  std::stable_sort(done.begin(), done.end(), [](const Hypothesis& a, const Hypothesis& b) { return a.log_prob > b.log_prob; });
  if (done.size() > options.beam_width) done.resize(options.beam_width);
  return done;
}

std::vector<double> score_items(const EncoderDecoder& model, const Encoding& enc, const ItemCatalog& catalog,
                                std::span<const Token> prefix, std::span<const ItemIndex> candidates) {
  const auto& nodes = catalog.nodes();
  std::vector<std::uint8_t> needed(nodes.size(), candidates.empty() ? 1 : 0);
  if (!candidates.empty()) {
    std::vector<std::int32_t> leaf_of(catalog.size(), -1);
    for (std::size_t n = 0; n < nodes.size(); ++n)
      if (nodes[n].item >= 0) leaf_of[static_cast<std::size_t>(nodes[n].item)] = static_cast<std::int32_t>(n);
    for (auto item : candidates) {
      for (auto n = leaf_of.at(item); n >= 0; n = nodes[static_cast<std::size_t>(n)].parent) needed[static_cast<std::size_t>(n)] = 1;
    }
  }
  std::vector<double> scores(catalog.size(), -std::numeric_limits<double>::infinity());
  const double tau = model.config().tau;
  IncrementalDecoder dec(model, enc);
  dec.push(Vocabulary::kBos);
  for (auto t : prefix) dec.push(t);

  // iterative DFS: (node, score) with explicit cache lengths
  struct Frame {
    std::int32_t node;
    double score;
    std::size_t length;
  };
  std::vector<Frame> stack{{0, 0.0, dec.length()}};
  while (!stack.empty()) {
    auto f = stack.back();
    stack.pop_back();
    if (dec.length() > f.length) dec.truncate(f.length);
    if (f.node != 0) dec.push(nodes[static_cast<std::size_t>(f.node)].token);
    const auto lp = num::log_softmax_temp(dec.logits(), tau);
    const auto& ch = nodes[static_cast<std::size_t>(f.node)].children;
    for (auto it = ch.rbegin(); it != ch.rend(); ++it) {
      const auto& n = nodes[static_cast<std::size_t>(*it)];
      if (!needed[static_cast<std::size_t>(*it)]) continue;
      const double s = f.score + lp[n.token];
      if (n.item >= 0) {
        scores[static_cast<std::size_t>(n.item)] = s;
      } else {
        stack.push_back({*it, s, dec.length()});
      }
    }
  }
  return scores;
}

Tensor token_nll(const Tensor& logits, std::span<const Token> targets, double tau) {
  return num::neg(num::pick(num::log_softmax(logits, tau), as_ids(targets)));
}

}  // namespace slowrec
