// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace slowrec {

std::size_t rank_of(std::span<const double> scores, ItemIndex target) {
  if (target >= scores.size()) throw std::out_of_range("rank_of: target outside the score list");
  const double s = scores[target];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > s || (scores[i] == s && i < target)) ++rank;
  }
  return rank;
}

double hit_at(std::size_t rank, std::size_t cutoff) { return rank >= 1 && rank <= cutoff ? 1.0 : 0.0; }

double ndcg_at(std::size_t rank, std::size_t cutoff) {
  if (rank < 1 || rank > cutoff) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

RankingMetrics summarize_ranks(std::span<const std::size_t> ranks) {
  RankingMetrics m;
  m.count = ranks.size();
  if (ranks.empty()) return m;
  for (auto r : ranks) {
    m.hr5 += hit_at(r, 5);
    m.hr10 += hit_at(r, 10);
    m.ndcg5 += ndcg_at(r, 5);
    m.ndcg10 += ndcg_at(r, 10);
  }
  const double n = static_cast<double>(ranks.size());
  m.hr5 /= n;
  m.hr10 /= n;
  m.ndcg5 /= n;
  m.ndcg10 /= n;
  return m;
}

std::vector<Token> generate_think(const EncoderDecoder& model, const Encoding& enc, const ItemCatalog& catalog,
                                  std::size_t steps, bool* fallback) {
  if (fallback) *fallback = false;
  if (steps == 0) return {};
  GenerateOptions opts;
  opts.mode = DecodeMode::greedy;
  opts.max_len = steps;
  auto hyp = generate(model, enc, opts);
  auto& t = hyp.front().tokens;
  bool ok = t.size() == steps;
  for (auto tok : t) ok = ok && catalog.vocab().is_code(tok);
  if (!ok) {
    if (fallback) *fallback = true;
    return {};
  }
  return t;
}

std::vector<Token> generate_item_prefix(const EncoderDecoder& model, const Encoding& enc, const ItemCatalog& catalog,
                                        std::size_t items, bool* fallback) {
  if (fallback) *fallback = false;
  if (items == 0) return {};
  // tokens after the last complete item must stay on a trie path
  auto complete_items = [&](std::span<const Token> t, bool* off_trie) {
    std::size_t n = 0, start = 0;
    *off_trie = false;
    for (std::size_t k = start; k < t.size(); ++k) {
      const auto part = t.subspan(start, k + 1 - start);
      if (catalog.parse(part)) {
        ++n;
        start = k + 1;
      } else if (catalog.is_terminal(part)) {
        *off_trie = true;
        return n;
      }
    }
    return n;
  };
  GenerateOptions opts;
  opts.mode = DecodeMode::greedy;
  opts.max_len = items * catalog.max_item_len();
  opts.done = [&](std::span<const Token> t) {
    bool off = false;
    return complete_items(t, &off) >= items || off;
  };
  auto hyp = generate(model, enc, opts);
  const auto& t = hyp.front().tokens;
  bool off = false;
  if (complete_items(t, &off) != items || off) {
    if (fallback) *fallback = true;
    return {};
  }
  return t;
}

EvalResult evaluate(const EncoderDecoder& model, std::span<const Example> examples, const ItemCatalog& catalog,
                    std::size_t think_steps) {
  EvalResult out;
  out.ranks.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto enc = model.encode(history_tokens(catalog, ex.history));
    bool fell_back = false;
    const auto think = generate_think(model, enc, catalog, think_steps, &fell_back);
    if (fell_back) ++out.fallbacks;
    const auto scores = score_items(model, enc, catalog, think);
    out.ranks.push_back(rank_of(scores, ex.target));
  }
  out.metrics = summarize_ranks(out.ranks);
  return out;
}

}  // namespace slowrec
