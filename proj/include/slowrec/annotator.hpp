// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reasoning-trace annotation by iterative residual inference. Starting from
// the pooled history state, each step maps the gap to the target
// representation through a residual head, snaps it to the nearest code-token
// embedding, feeds that token to the decoder and folds the new decoder state
// into the running state through a state head.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "slowrec/backbone.hpp"

namespace slowrec {

struct AnnotatorConfig {
  /// Number of reasoning tokens per trace.
  std::size_t steps = 4;
  std::size_t width = 256;
  /// Scale of the output layer at init; small keeps each head near identity.
  double output_std = 1e-3;
  std::uint64_t seed = 1;
};

/// Two residual MLPs (x + W2 gelu(W1 x + b1) + b2) with separate parameters.
class AnnotatorHeads {
 public:
  AnnotatorHeads() = default;
  AnnotatorHeads(std::size_t hidden, const AnnotatorConfig& config);

  std::size_t hidden() const { return hidden_; }
  /// Applied to (t - s).
  num::Tensor residual(const num::Tensor& x) const { return apply(res_in_, res_out_, x); }
  /// Applied to the running sum of decoder states.
  num::Tensor state(const num::Tensor& x) const { return apply(state_in_, state_out_, x); }

  num::ParamList params() const;
  void save(const std::filesystem::path& path) const { num::save_tensors(path, params()); }
  void load(const std::filesystem::path& path) { num::load_tensors(path, params()); }

 private:
  static num::Tensor apply(const num::Linear& in, const num::Linear& out, const num::Tensor& x);
  std::size_t hidden_ = 0;
  num::Linear res_in_, res_out_, state_in_, state_out_;
};

/// Mean of the token embeddings of an item, on the tape: [1, H].
num::Tensor target_representation(const EncoderDecoder& model, std::span<const Token> item_tokens);

/// Code token whose embedding is nearest to `r` (ties go to the lowest id).
Token pseudo_label(std::span<const double> r, const num::Tensor& embedding, const Vocabulary& vocab);

struct ReasoningTrace {
  UserIndex user = 0;
  ItemIndex target_item = 0;
  std::vector<Token> history;
  std::vector<Token> think;
  std::vector<Token> target;
  // Per-step vectors, each of hidden width. Empty when loaded from a cache.
  std::vector<std::vector<double>> residuals;       // r_1..r_l
  std::vector<std::vector<double>> states;          // s_0..s_l
  std::vector<std::vector<double>> decoder_states;  // d_0..d_l
  std::vector<double> target_repr;

  /// Think tokens followed by the target tokens.
  std::vector<Token> label() const;
};

/// Runs the two-step alternation for `steps` iterations.
ReasoningTrace annotate(const EncoderDecoder& model, const AnnotatorHeads& heads, std::span<const Token> history,
                        ItemIndex target_item, const ItemCatalog& catalog, std::size_t steps, UserIndex user = 0);

/// The trace quantities on the tape, recomputed from a teacher-forced
/// forward whose decoder inputs are [BOS, think, target[:-1]]. Every trace
/// must have the same number of think tokens.
struct TraceTensors {
  std::vector<num::Tensor> residuals;  // per step, [B, H]
  std::vector<num::Tensor> states;     // s_1..s_l, each [B, H]
  std::vector<num::Tensor> labels;     // embeddings of the think tokens, per step [B, H]
  num::Tensor targets;                 // [B, H]
};

TraceTensors trace_tensors(const EncoderDecoder& model, const AnnotatorHeads& heads, const ForwardResult& forward,
                           std::span<const ReasoningTrace> traces);

struct AnnotationBatch {
  std::vector<ReasoningTrace> traces;
  /// Examples that could not be annotated (for instance length overflow).
  std::size_t skipped = 0;
};

AnnotationBatch annotate_all(const EncoderDecoder& model, const AnnotatorHeads& heads,
                             std::span<const Example> examples, const ItemCatalog& catalog, std::size_t steps);

/// One line per trace: `user<TAB>history | think | target` (token ids).
void save_traces(std::span<const ReasoningTrace> traces, const std::filesystem::path& path);
std::vector<ReasoningTrace> load_traces(const std::filesystem::path& path, const ItemCatalog& catalog);

}  // namespace slowrec
