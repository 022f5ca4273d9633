// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/harness.hpp"

#include <algorithm>
#include <exception>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

namespace slowrec {

std::optional<std::size_t> RankedList::position(ItemIndex item) const {
  auto it = std::find(items.begin(), items.end(), item);
  if (it == items.end()) return std::nullopt;
  return static_cast<std::size_t>(it - items.begin()) + 1;
}

RankedList rank_by_score(std::span<const ItemIndex> candidates, std::span<const double> scores) {
  if (candidates.size() != scores.size()) throw std::invalid_argument("rank_by_score: size mismatch");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  RankedList out;
  out.items.reserve(order.size());
  out.scores.reserve(order.size());
  for (auto i : order) {
    out.items.push_back(candidates[i]);
    out.scores.push_back(scores[i]);
  }
  auto sorted = out.items;
  std::sort(sorted.begin(), sorted.end());
  if (auto dup = std::adjacent_find(sorted.begin(), sorted.end()); dup != sorted.end()) {
    throw std::invalid_argument(fmt::format("rank_by_score: item {} listed twice", *dup));
  }
  return out;
}

RankedList rank_items(const EncoderDecoder& model, std::span<const ItemIndex> history,
                      std::span<const ItemIndex> candidates, const ItemCatalog& catalog, const RankOptions& options,
                      bool* fallback) {
  const auto enc = model.encode(history_tokens(catalog, history));
  const auto think = options.think_items > 0
                         ? generate_item_prefix(model, enc, catalog, options.think_items, fallback)
                         : generate_think(model, enc, catalog, options.think_steps, fallback);
  if (options.beam_width == 0) {
    const auto all = score_items(model, enc, catalog, think, candidates);
    std::vector<double> scores;
    scores.reserve(candidates.size());
    for (auto c : candidates) scores.push_back(all.at(c));
    return rank_by_score(candidates, scores);
  }
  GenerateOptions opts;
  opts.mode = DecodeMode::beam;
  opts.beam_width = options.beam_width;
  opts.max_len = catalog.max_item_len();
  opts.done = [&](std::span<const Token> t) { return catalog.is_terminal(t); };
  std::vector<bool> allowed(catalog.size(), false);
  for (auto c : candidates) allowed.at(c) = true;
  std::vector<ItemIndex> items;
  std::vector<double> scores;
  for (const auto& h : generate(model, enc, opts, nullptr, think)) {
    auto item = catalog.parse(h.tokens);
    if (!item || !allowed[*item] || std::find(items.begin(), items.end(), *item) != items.end()) continue;
    items.push_back(*item);
    scores.push_back(h.log_prob);
  }
  return rank_by_score(items, scores);
}

RankingMetrics hr_ndcg(std::span<const RankedList> lists, std::span<const ItemIndex> targets) {
  if (lists.size() != targets.size()) throw std::invalid_argument("hr_ndcg: one target per list");
  std::vector<std::size_t> ranks;
  ranks.reserve(lists.size());
  for (std::size_t i = 0; i < lists.size(); ++i) {
    // a missing target is placed past every cutoff
    ranks.push_back(lists[i].position(targets[i]).value_or(std::numeric_limits<std::size_t>::max()));
  }
  return summarize_ranks(ranks);
}

std::vector<std::size_t> training_counts(const SplitSet& split, std::size_t n_items) {
  std::vector<std::size_t> counts(n_items, 0);
  for (const auto& seq : split.train_prefixes) {
    for (auto i : seq) ++counts.at(i);
  }
  return counts;
}

RankedList popularity_baseline(const SplitSet& split, std::size_t n_items) {
  const auto counts = training_counts(split, n_items);
  std::vector<ItemIndex> items(n_items);
  std::iota(items.begin(), items.end(), 0);
  std::vector<double> scores(counts.begin(), counts.end());
  return rank_by_score(items, scores);
}

EarlyStopDecision early_stop(std::span<const double> history, std::size_t patience) {
  EarlyStopDecision d;
  if (history.empty()) return d;
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > history[best]) best = i;
  }
  d.best_epoch = best + 1;
  d.stop = history.size() - d.best_epoch >= patience;
  return d;
}

std::vector<ItemIndex> example_item_pool(std::span<const Example> examples) {
  std::vector<ItemIndex> pool;
  for (const auto& ex : examples) {
    pool.insert(pool.end(), ex.history.begin(), ex.history.end());
    pool.push_back(ex.target);
  }
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  return pool;
}

EvalResult evaluate_pool(const EncoderDecoder& model, std::span<const Example> examples, const ItemCatalog& catalog,
                         const PoolEvalOptions& options) {
  std::vector<ItemIndex> pool = options.pool;
  if (pool.empty()) {
    pool.resize(catalog.size());
    std::iota(pool.begin(), pool.end(), 0);
  }
  std::vector<bool> in_pool(catalog.size(), false);
  for (auto i : pool) in_pool.at(i) = true;
  for (const auto& ex : examples) {
    if (!in_pool.at(ex.target)) {
      throw std::invalid_argument(fmt::format("evaluate: target {} of user {} is not in the pool", ex.target, ex.user));
    }
  }
  const std::size_t n = examples.size();
  std::vector<std::size_t> ranks(n, 0);
  std::vector<char> fell_back(n, 0);
  std::vector<std::exception_ptr> errors(options.threads + 1);
  auto work = [&](std::size_t begin, std::size_t stride) {
    try {
      for (std::size_t i = begin; i < n; i += stride) {
        bool fb = false;
        auto list = rank_items(model, examples[i].history, pool, catalog, options.rank, &fb);
        ranks[i] = list.position(examples[i].target).value_or(std::numeric_limits<std::size_t>::max());
        fell_back[i] = fb ? 1 : 0;
      }
    } catch (...) {
      errors[begin] = std::current_exception();
    }
  };
  const auto threads = std::max<std::size_t>(1, std::min(options.threads, n));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool_threads;
    for (std::size_t t = 0; t < threads; ++t) pool_threads.emplace_back(work, t, threads);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  EvalResult out;
  out.ranks = std::move(ranks);
  for (auto f : fell_back) out.fallbacks += static_cast<std::size_t>(f);
  out.metrics = summarize_ranks(out.ranks);
  return out;
}

}  // namespace slowrec
