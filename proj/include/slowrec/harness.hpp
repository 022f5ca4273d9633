// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Ranking protocol for leave-one-out evaluation, the popularity baseline and
// the early-stopping rule.

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "slowrec/metrics.hpp"

namespace slowrec {

/// Candidates in descending score order, ties by item index.
struct RankedList {
  std::vector<ItemIndex> items;
  std::vector<double> scores;

  std::size_t size() const { return items.size(); }
  /// 1-based position of `item`, or nullopt when it is not listed.
  std::optional<std::size_t> position(ItemIndex item) const;
};

/// Sorts `candidates` by `scores` (aligned to `candidates`). Throws
/// std::invalid_argument on duplicate candidates.
RankedList rank_by_score(std::span<const ItemIndex> candidates, std::span<const double> scores);

struct RankOptions {
  std::size_t think_steps = 0;
  /// Alternatively, a prefix of this many greedily decoded whole items.
  std::size_t think_items = 0;
  /// 0 scores every candidate; otherwise only items reached by a beam of this
  /// width over the item trie are listed.
  std::size_t beam_width = 0;
};

/// Greedy think prefix (`think_steps` tokens or `think_items` items), then
/// every candidate scored by log p(item | history, think). An unusable think output is replaced by an empty prefix and
/// reported through `fallback`.
RankedList rank_items(const EncoderDecoder& model, std::span<const ItemIndex> history,
                      std::span<const ItemIndex> candidates, const ItemCatalog& catalog, const RankOptions& options,
                      bool* fallback = nullptr);

/// HR@5/10 and NDCG@5/10 averaged over lists. A target missing from its list
/// counts as a miss.
RankingMetrics hr_ndcg(std::span<const RankedList> lists, std::span<const ItemIndex> targets);

/// Interaction counts over the per-user training portions.
std::vector<std::size_t> training_counts(const SplitSet& split, std::size_t n_items);

/// Every item ranked by training interaction count, ties by lower index.
/// The same list serves every user.
RankedList popularity_baseline(const SplitSet& split, std::size_t n_items);

struct EarlyStopDecision {
  bool stop = false;
  /// 1-based epoch of the best value (0 for an empty history).
  std::size_t best_epoch = 0;
};

/// Stop once `patience` consecutive epochs fail to exceed the best value.
EarlyStopDecision early_stop(std::span<const double> history, std::size_t patience = 10);

/// Distinct items that occur in the given examples (histories and targets),
/// ascending.
std::vector<ItemIndex> example_item_pool(std::span<const Example> examples);

struct PoolEvalOptions {
  RankOptions rank;
  /// Empty means the whole catalog.
  std::vector<ItemIndex> pool;
  /// Worker threads over examples; results do not depend on this.
  std::size_t threads = 1;
};

/// Ranks the pool for every example (target must be in the pool).
EvalResult evaluate_pool(const EncoderDecoder& model, std::span<const Example> examples, const ItemCatalog& catalog,
                         const PoolEvalOptions& options);

}  // namespace slowrec
