// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Group-relative policy optimization over sampled (think, item) generations,
// with format, exact-match, similarity, likelihood and ranking rewards.

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "slowrec/metrics.hpp"
#include "slowrec/pretrain.hpp"

namespace slowrec {

struct RlConfig {
  /// Rollouts per prompt.
  std::size_t group_size = 8;
  double clip = 0.2;
  double kl_weight = 0.04;
  double temperature = 1.0;
  /// Hard negatives for the ranking reward.
  std::size_t negatives = 50;
  double lr = 1e-5;
  double weight_decay = 0.0;
  std::size_t prompts_per_iteration = 16;
  std::size_t iterations = 100;
  /// Validate every this many iterations (and at iteration 0).
  std::size_t validate_every = 10;
  bool freeze_encoder = false;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
};

/// 0 when the generation is `think_len` code tokens followed by a complete
/// catalog item, -1 otherwise.
double reward_format(std::span<const Token> generation, std::size_t think_len, const ItemCatalog& catalog);

/// Number of leading positions where the two sequences agree.
int reward_em(std::span<const Token> generated, std::span<const Token> truth);

/// g_i = (1/B) #{j : S_ij <= S_ii} for a similarity matrix given row-major.
std::vector<double> similarity_fractions(std::span<const double> sim, std::size_t batch);
double similarity_tier(double g);
/// Cosine similarity between pooled decoder states and target
/// representations (both B rows of width H), mapped to tiers.
std::vector<double> reward_similarity(std::span<const std::vector<double>> pooled,
                                      std::span<const std::vector<double>> targets);

/// log p_policy(target | history, think) - log p_reference(target | history).
double reward_likelihood(const EncoderDecoder& policy, const Encoding& policy_enc, const EncoderDecoder& reference,
                         const Encoding& reference_enc, std::span<const Token> think, std::span<const Token> target);

/// Tier of a 1-based rank among `candidates` = K_neg + 1 items.
double ranking_tier(std::size_t rank, std::size_t candidates);
/// Rank of `positive` among itself and `negatives` by log p(item | history,
/// think); ties rank the positive last. Requires at least 10 negatives.
std::size_t ranking_position(const EncoderDecoder& policy, const Encoding& enc, std::span<const Token> think,
                             ItemIndex positive, std::span<const ItemIndex> negatives, const ItemCatalog& catalog);

/// (r - mean) / max(std, 1e-6) with the population standard deviation.
std::vector<double> group_advantages(std::span<const double> rewards);

struct RewardBreakdown {
  double format = 0.0;
  double em = 0.0;
  double similarity = 0.0;
  double likelihood = 0.0;
  double ranking = 0.0;
  double total() const { return format + em + similarity + likelihood + ranking; }
};

struct Rollout {
  std::vector<Token> tokens;
  std::vector<Token> think;
  std::vector<Token> target;
  std::optional<ItemIndex> item;
  /// Sequence log-probability under the policy at rollout time.
  double old_log_prob = 0.0;
  std::vector<double> pooled_hidden;
  RewardBreakdown reward;
  double advantage = 0.0;
};

struct RolloutGroup {
  UserIndex user = 0;
  ItemIndex target_item = 0;
  std::vector<Token> prompt;
  std::vector<Rollout> rollouts;
};

struct RolloutContext {
  const ItemCatalog& catalog;
  const NeighborIndex& neighbors;
  /// Direct decoder used by the likelihood reward.
  const EncoderDecoder& direct;
  std::size_t think_len;
};

/// Samples `group_size` generations per example and scores them. The
/// similarity reward compares rollouts with the same index across examples,
/// so at least two examples are required.
std::vector<RolloutGroup> collect_rollouts(const EncoderDecoder& policy, std::span<const Example> examples,
                                           const RolloutContext& ctx, const RlConfig& config, num::Rng& rng);

/// Sequence log-probabilities of every rollout under `model` (policy order).
std::vector<double> rollout_log_probs(const EncoderDecoder& model, std::span<const RolloutGroup> groups);

struct GrpoStats {
  /// Objective value (to be maximized), averaged over groups.
  double objective = 0.0;
  double surrogate = 0.0;
  double kl = 0.0;
  /// Fraction of rollouts whose clipped branch was selected by min().
  double clip_fraction = 0.0;
  std::size_t skipped_groups = 0;
};

struct GrpoLoss {
  num::Tensor loss;  // negated objective; undefined when every group was skipped
  GrpoStats stats;
};

/// Clipped surrogate with sequence-level ratios against the stored
/// old log-probs, minus kl_weight times the per-token k3 estimate of
/// KL(policy || kl_reference), averaged over each rollout's tokens.
GrpoLoss grpo_loss(const EncoderDecoder& policy, const EncoderDecoder& kl_reference,
                   std::span<const RolloutGroup> groups, const RlConfig& config);

num::ParamList rl_params(const EncoderDecoder& policy, bool freeze_encoder);

GrpoStats grpo_step(const EncoderDecoder& policy, const EncoderDecoder& kl_reference,
                    std::span<const RolloutGroup> groups, num::AdamW& optimizer, const RlConfig& config);

struct RlRecord {
  std::size_t iteration = 0;
  GrpoStats grpo;
  RewardBreakdown mean_reward;
  RewardBreakdown max_reward;
  bool validated = false;
  RankingMetrics validation;
};

struct RlRunResult {
  std::vector<RlRecord> log;
  std::size_t best_iteration = 0;
  double best_ndcg10 = -1.0;
};

/// Runs GRPO from the current policy; the KL anchor is a frozen copy taken
/// at the start. Restores the best validated parameters (iteration 0
/// included).
RlRunResult rl_training(BackboneModel& policy, std::span<const Example> train, const RolloutContext& ctx,
                        const RlConfig& config, const std::function<RankingMetrics(const BackboneModel&)>& validate,
                        const std::function<void(const RlRecord&)>& on_record = {});

}  // namespace slowrec
