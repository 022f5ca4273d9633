// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Leave-one-out ranking metrics and the evaluation loop shared by every
// training stage.

#pragma once

#include <span>
#include <vector>

#include "slowrec/backbone.hpp"

namespace slowrec {

/// 1-based rank of `target` when items are sorted by descending score.
/// Equal scores are ordered by item index.
std::size_t rank_of(std::span<const double> scores, ItemIndex target);

double hit_at(std::size_t rank, std::size_t cutoff);
/// 1 / log2(rank + 1) inside the cutoff, else 0.
double ndcg_at(std::size_t rank, std::size_t cutoff);

struct RankingMetrics {
  double hr5 = 0.0;
  double hr10 = 0.0;
  double ndcg5 = 0.0;
  double ndcg10 = 0.0;
  std::size_t count = 0;
};

RankingMetrics summarize_ranks(std::span<const std::size_t> ranks);

/// Greedy think tokens for an encoded history. Returns an empty prefix (and
/// sets `fallback`) when the output contains anything but code tokens.
std::vector<Token> generate_think(const EncoderDecoder& model, const Encoding& enc, const ItemCatalog& catalog,
                                  std::size_t steps, bool* fallback = nullptr);

/// Greedy prefix of `items` whole catalog items (the retrieved-item segment a
/// pretrained model emits before its answer). Returns an empty prefix (and
/// sets `fallback`) when the output leaves the item trie.
std::vector<Token> generate_item_prefix(const EncoderDecoder& model, const Encoding& enc, const ItemCatalog& catalog,
                                        std::size_t items, bool* fallback = nullptr);

struct EvalResult {
  RankingMetrics metrics;
  std::vector<std::size_t> ranks;
  /// Examples whose think output was unusable and were scored without it.
  std::size_t fallbacks = 0;
};

/// Ranks every catalog item for each example by log p(item | history, think).
EvalResult evaluate(const EncoderDecoder& model, std::span<const Example> examples, const ItemCatalog& catalog,
                    std::size_t think_steps);

}  // namespace slowrec
