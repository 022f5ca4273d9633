// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning on annotated reasoning traces: likelihood on the full label
// sequence plus a preference term against the direct decoder, a quantization
// term tying residuals to their pseudo-labels and a state/target contrastive
// term. Annotation and training alternate in rounds.

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "slowrec/annotator.hpp"
#include "slowrec/metrics.hpp"
#include "slowrec/pretrain.hpp"

namespace slowrec {

struct SftConfig {
  double dpo_weight = 1.0;
  double quant_weight = 1.0;
  double state_weight = 0.5;
  /// Commitment factor of the quantization term.
  double commitment = 0.25;
  double dpo_beta = 0.1;
  std::size_t rounds = 3;
  std::size_t epochs = 10;
  /// Dispreferred items are drawn from this many nearest neighbors.
  std::size_t negative_pool = 20;
  /// Drop the think tokens from the likelihood term.
  bool mask_think = false;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
};

/// w_j = j / l for j = 1..l.
std::vector<double> step_weights(std::size_t steps);

/// -sum_j w_j sum_i log softmax_k(s_ij . t_k)[i]; states[j] and targets are [B, H].
num::Tensor state_contrastive_loss(std::span<const num::Tensor> states, const num::Tensor& targets,
                                   std::span<const double> weights);

/// sum ||sg[r] - o||^2 + beta ||r - sg[o]||^2 over all steps and rows.
num::Tensor quantization_loss(std::span<const num::Tensor> residuals, std::span<const num::Tensor> labels,
                              double beta);

/// Sum over the batch of -log softmax([beta l+, beta l-])[0]; inputs are [B, 1].
num::Tensor dpo_loss(const num::Tensor& logit_plus, const num::Tensor& logit_minus, double beta);

/// Uniform draw among the `pool` nearest neighbors of `target`.
ItemIndex sample_negative(ItemIndex target, const NeighborIndex& neighbors, std::size_t pool, num::Rng& rng);

struct SftLosses {
  double nll = 0.0;
  double dpo = 0.0;
  double quant = 0.0;
  double state = 0.0;
  double total = 0.0;
};

struct SftBatchLoss {
  num::Tensor total;
  SftLosses parts;
};

/// Loss of one batch of traces (all with the same number of think tokens).
/// The likelihood is a per-token mean; the other terms are batch means.
/// The reference is evaluated without gradients.
SftBatchLoss sft_loss(const BackboneModel& model, const AnnotatorHeads& heads, const ReferenceDecoder& reference,
                      std::span<const ReasoningTrace> traces, std::span<const ItemIndex> negatives,
                      const ItemCatalog& catalog, const SftConfig& config, num::Rng* dropout_rng);

/// sft_loss followed by one clipped optimizer update.
SftLosses sft_step(const BackboneModel& model, const AnnotatorHeads& heads, const ReferenceDecoder& reference,
                   std::span<const ReasoningTrace> traces, std::span<const ItemIndex> negatives,
                   const ItemCatalog& catalog, num::AdamW& optimizer, const SftConfig& config, num::Rng& rng);

num::ParamList sft_params(const BackboneModel& model, const AnnotatorHeads& heads);

/// One pass over `traces` in shuffled batches; returns token/batch-averaged losses.
SftLosses sft_epoch(const BackboneModel& model, const AnnotatorHeads& heads, const ReferenceDecoder& reference,
                    std::span<const ReasoningTrace> traces, const NeighborIndex& neighbors,
                    const ItemCatalog& catalog, num::AdamW& optimizer, const SftConfig& config, num::Rng& rng);

struct SftRecord {
  std::size_t round = 0;
  std::size_t epoch = 0;
  SftLosses losses;
  /// Validation metrics; only set on the last epoch of a round.
  bool validated = false;
  RankingMetrics validation;
  std::size_t annotated = 0;
  std::size_t skipped = 0;
};

struct SftRunResult {
  std::vector<SftRecord> log;
  std::size_t best_round = 0;
  double best_ndcg10 = -1.0;
  /// Traces of every round, kept for inspection.
  std::vector<std::vector<ReasoningTrace>> traces;
};

using Validator = std::function<RankingMetrics(const BackboneModel&)>;

/// Staggered collect/train loop. Restores the parameters (model and heads)
/// of the round with the best validation NDCG@10.
SftRunResult staggered_training(BackboneModel& model, AnnotatorHeads& heads, const ReferenceDecoder& reference,
                                std::span<const Example> train, const NeighborIndex& neighbors,
                                const ItemCatalog& catalog, std::size_t steps, const SftConfig& config,
                                const Validator& validate, const std::function<void(const SftRecord&)>& on_record = {});

}  // namespace slowrec
