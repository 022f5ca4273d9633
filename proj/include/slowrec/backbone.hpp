// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder transformer over semantic-id tokens. Training runs on the
// autodiff tape over packed (ragged) batches; inference uses an incremental
// decoder with a key/value cache and a prefix trie over the item catalog.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "slowrec/numerics/layers.hpp"
#include "slowrec/tokenizer.hpp"

namespace slowrec {

using Token = std::uint32_t;

/// Token layout: PAD, BOS, EOS, then `levels` blocks of `codebook_size`
/// code tokens, then `suffix_range` collision-suffix tokens.
class Vocabulary {
 public:
  static constexpr Token kPad = 0;
  static constexpr Token kBos = 1;
  static constexpr Token kEos = 2;
  static constexpr Token kFirstCode = 3;

  Vocabulary() = default;
  Vocabulary(std::size_t levels, std::size_t codebook_size, std::size_t suffix_range = 0);

  std::size_t size() const { return kFirstCode + levels_ * codebook_size_ + suffix_range_; }
  std::size_t levels() const { return levels_; }
  std::size_t codebook_size() const { return codebook_size_; }
  std::size_t suffix_range() const { return suffix_range_; }
  std::size_t num_code_tokens() const { return levels_ * codebook_size_; }

  Token code_token(std::size_t level, Code code) const;
  Token suffix_token(Code suffix) const;
  bool is_code(Token t) const { return t >= kFirstCode && t < kFirstCode + num_code_tokens(); }
  bool is_suffix(Token t) const { return t >= kFirstCode + num_code_tokens() && t < size(); }
  bool is_special(Token t) const { return t < kFirstCode; }
  /// Level of a code token.
  std::size_t level_of(Token t) const { return (t - kFirstCode) / codebook_size_; }
  Code code_of(Token t) const { return static_cast<Code>((t - kFirstCode) % codebook_size_); }

  std::vector<Token> tokens_for(const SemanticId& id) const;

 private:
  std::size_t levels_ = 0;
  std::size_t codebook_size_ = 0;
  std::size_t suffix_range_ = 0;
};

/// Item <-> token sequences plus a prefix trie over all items. Item token
/// sequences are prefix free (colliding items carry a suffix token).
class ItemCatalog {
 public:
  struct Node {
    Token token = 0;
    std::int32_t parent = -1;
    std::vector<std::int32_t> children;
    /// Item ending at this node, or -1.
    std::int32_t item = -1;
  };

  ItemCatalog() = default;
  /// `ids` must be aligned to the corpus item indexing.
  ItemCatalog(const SemanticIdMap& ids, const Vocabulary& vocab);

  const Vocabulary& vocab() const { return vocab_; }
  std::size_t size() const { return items_.size(); }
  std::size_t levels() const { return vocab_.levels(); }
  std::size_t max_item_len() const { return max_len_; }
  const std::vector<Token>& tokens(ItemIndex item) const { return items_.at(item); }
  const SemanticId& semantic_id(ItemIndex item) const { return ids_.at(item); }

  const std::vector<Node>& nodes() const { return nodes_; }
  /// Child of `node` carrying `token`, or -1.
  std::int32_t child(std::int32_t node, Token token) const;
  /// Item spelled exactly by `tokens`, if any.
  std::optional<ItemIndex> parse(std::span<const Token> tokens) const;
  /// True once `tokens` spells a complete item or leaves the trie.
  bool is_terminal(std::span<const Token> tokens) const;

 private:
  Vocabulary vocab_;
  std::vector<SemanticId> ids_;
  std::vector<std::vector<Token>> items_;
  std::vector<Node> nodes_;
  std::size_t max_len_ = 0;
};

/// Concatenated item tokens of a history.
std::vector<Token> history_tokens(const ItemCatalog& catalog, std::span<const ItemIndex> history);

struct BackboneConfig {
  std::size_t hidden = 256;
  std::size_t ffn = 1024;
  std::size_t encoder_layers = 4;
  std::size_t decoder_layers = 4;
  std::size_t heads = 4;
  double dropout = 0.1;
  std::size_t max_source_len = 128;
  std::size_t max_target_len = 32;
  /// Softmax temperature of the output distribution.
  double tau = 1.0;
  double embedding_std = 1.0;
  double output_std = 0.02;
  std::uint64_t seed = 1;
};

struct EncoderLayer {
  num::LayerNorm ln_attn, ln_ffn;
  num::Linear q, k, v, o, ff1, ff2;
};

struct DecoderLayer {
  num::LayerNorm ln_self, ln_cross, ln_ffn;
  num::Linear q, k, v, o, cq, ck, cv, co, ff1, ff2;
};

/// Token embedding and encoder stack; shared by every decoder built on it.
struct SharedEncoder {
  num::Tensor token_embedding;  // [V, H]
  num::Tensor positions;        // [max_source_len, H]
  std::vector<EncoderLayer> layers;
  num::LayerNorm final_norm;

  num::ParamList params() const;
};

struct DecoderStack {
  num::Tensor positions;  // [max_target_len + 1, H]
  std::vector<DecoderLayer> layers;
  num::LayerNorm final_norm;
  num::Linear output;

  num::ParamList params() const;
};

/// Packed forward over a batch of (source, decoder input) pairs.
struct ForwardResult {
  num::Tensor memory;   // [sum source lengths, H]
  num::Tensor pooled;   // [B, H] mean of each source's memory rows
  num::Tensor hidden;   // [sum target lengths, H] top decoder states (after final norm)
  num::Tensor logits;   // [sum target lengths, V]
  std::vector<std::size_t> source_offsets;
  std::vector<std::size_t> target_offsets;
};

/// Encoder output for one source, outside the tape.
struct Encoding {
  std::size_t length = 0;
  std::size_t hidden = 0;
  std::vector<double> memory;  // [length, H]
  std::vector<double> pooled;  // [H]
};

class IncrementalDecoder;

class EncoderDecoder {
 public:
  EncoderDecoder() = default;
  EncoderDecoder(const BackboneConfig& config, std::size_t vocab_size);
  /// New decoder stack on top of `encoder` (shared, not copied).
  EncoderDecoder(const BackboneConfig& config, std::size_t vocab_size, std::shared_ptr<SharedEncoder> encoder,
                 num::Rng& rng);

  const BackboneConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t hidden() const { return config_.hidden; }
  const std::shared_ptr<SharedEncoder>& encoder() const { return encoder_; }
  const DecoderStack& decoder() const { return decoder_; }

  num::ParamList encoder_params() const { return encoder_->params(); }
  num::ParamList decoder_params() const { return decoder_.params(); }
  num::ParamList params() const;

  /// Teacher-forced packed forward. `dropout_rng` null means eval mode.
  /// Every decoder input must start with BOS. Rejects empty or all-padding
  /// sources, out-of-vocabulary tokens and over-long sequences.
  ForwardResult forward(std::span<const std::vector<Token>> sources,
                        std::span<const std::vector<Token>> decoder_inputs, num::Rng* dropout_rng = nullptr) const;

  /// Encoder only, on the tape: (memory [n, H], pooled [1, H]).
  std::pair<num::Tensor, num::Tensor> encode_tape(std::span<const Token> source) const;

  Encoding encode(std::span<const Token> source) const;

  /// Per-position logits for one source and decoder prefix (starting with BOS).
  std::vector<std::vector<double>> decode_logits(const Encoding& enc, std::span<const Token> prefix) const;

  /// Sum over `target` of log p(token | BOS, prefix, earlier target tokens).
  double log_prob(const Encoding& enc, std::span<const Token> target, std::span<const Token> prefix = {}) const;

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 protected:
  BackboneConfig config_;
  std::size_t vocab_size_ = 0;
  std::shared_ptr<SharedEncoder> encoder_;
  DecoderStack decoder_;

  void validate_tokens(std::span<const Token> tokens, const char* what) const;
  friend class IncrementalDecoder;
};

/// Policy model: owns the shared encoder.
class BackboneModel : public EncoderDecoder {
 public:
  using EncoderDecoder::EncoderDecoder;
};

/// Direct decoder used as a reference: its own decoder stack on top of the
/// backbone's encoder object.
class ReferenceDecoder : public EncoderDecoder {
 public:
  ReferenceDecoder() = default;
  explicit ReferenceDecoder(const BackboneModel& backbone, std::uint64_t seed);
};

/// Deep copy of all parameters (including a private copy of the encoder).
BackboneModel clone_model(const EncoderDecoder& model);

/// Key/value-cached decoding for one encoded source.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const EncoderDecoder& model, const Encoding& enc);

  /// Appends a token at the next position.
  void push(Token token);
  /// Drops positions beyond `length`.
  void truncate(std::size_t length);
  std::size_t length() const { return length_; }
  /// Top (post-norm) hidden state of the last pushed position.
  std::span<const double> hidden() const { return top_; }
  /// Output logits of the last pushed position.
  std::vector<double> logits() const;

 private:
  const EncoderDecoder& model_;
  const Encoding& enc_;
  std::size_t length_ = 0;
  std::vector<double> top_;
  // per layer: cached self-attention keys/values [max_target_len + 1, H]
  std::vector<std::vector<double>> self_k_, self_v_;
  // per layer: cross-attention keys/values over memory
  std::vector<std::vector<double>> cross_k_, cross_v_;
};

enum class DecodeMode { greedy, sample, beam };

struct GenerateOptions {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::size_t beam_width = 4;
  std::size_t max_len = 8;
  /// Optional early stop, called with the tokens generated so far.
  std::function<bool(std::span<const Token>)> done;
};

struct Hypothesis {
  std::vector<Token> tokens;
  double log_prob = 0.0;
  /// Top hidden states at the decoder inputs that produced each token.
  std::vector<std::vector<double>> hidden;
};

/// Greedy and sampling return one hypothesis; beam returns up to `beam_width`
/// sorted by total log-probability. EOS terminates a hypothesis (kept).
std::vector<Hypothesis> generate(const EncoderDecoder& model, const Encoding& enc, const GenerateOptions& options,
                                 num::Rng* rng = nullptr, std::span<const Token> prefix = {});

/// log p(item tokens | BOS, prefix) for every catalog item (or the items in
/// `candidates` when non-empty). Each score is computed along the item's own
/// trie path, so it does not depend on which other items are scored.
std::vector<double> score_items(const EncoderDecoder& model, const Encoding& enc, const ItemCatalog& catalog,
                                std::span<const Token> prefix = {}, std::span<const ItemIndex> candidates = {});

/// Per-position cross entropy (-log p) of `targets` under packed logits.
num::Tensor token_nll(const num::Tensor& logits, std::span<const Token> targets, double tau);

}  // namespace slowrec
