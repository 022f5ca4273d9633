// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace slowrec {

using num::Tensor;

NeighborIndex::NeighborIndex(const ItemEmbeddingTable& embeddings, std::size_t depth) {
  const auto n = embeddings.size(), dim = embeddings.dim();
  depth_ = std::min(depth, n == 0 ? 0 : n - 1);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : embeddings.row(i)) s += v * v;
    norms[i] = std::sqrt(s);
  }
  const auto& ids = embeddings.ids();
  lists_.resize(n);
  std::vector<std::pair<double, ItemIndex>> sims;
  for (std::size_t i = 0; i < n; ++i) {
    sims.clear();
    auto a = embeddings.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto b = embeddings.row(j);
      double dot = 0.0;
      for (std::size_t c = 0; c < dim; ++c) dot += a[c] * b[c];
      const double denom = norms[i] * norms[j];
      sims.emplace_back(denom > 0.0 ? dot / denom : 0.0, static_cast<ItemIndex>(j));
    }
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(depth_), sims.end(),
                      [&](const auto& x, const auto& y) {
                        if (x.first != y.first) return x.first > y.first;
                        return ids[x.second] < ids[y.second];
                      });
    for (std::size_t k = 0; k < depth_; ++k) lists_[i].push_back(sims[k].second);
  }
}

std::span<const ItemIndex> NeighborIndex::neighbors(ItemIndex item) const { return lists_.at(item); }

std::span<const ItemIndex> NeighborIndex::nearest(ItemIndex item, std::size_t n) const {
  const auto& l = lists_.at(item);
  if (n > l.size()) {
    throw DataError(fmt::format("retrieval: {} neighbors requested, {} available", n, l.size()));
  }
  return std::span(l).first(n);
}

std::vector<Token> build_pretrain_target(ItemIndex target, const NeighborIndex& neighbors, std::size_t n_retrieve,
                                         const ItemCatalog& catalog) {
  std::vector<Token> y;
  for (auto r : neighbors.nearest(target, n_retrieve)) {
    const auto& t = catalog.tokens(r);
    y.insert(y.end(), t.begin(), t.end());
  }
  const auto& t = catalog.tokens(target);
  y.insert(y.end(), t.begin(), t.end());
  return y;
}

std::vector<PretrainExample> build_pretrain_examples(std::span<const Example> examples, const NeighborIndex& neighbors,
                                                     std::size_t n_retrieve, const ItemCatalog& catalog) {
  std::vector<PretrainExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    out.push_back({ex.user, ex.target, catalog.tokens(ex.target).size(), history_tokens(catalog, ex.history),
                   build_pretrain_target(ex.target, neighbors, n_retrieve, catalog)});
  }
  return out;
}

BatchLoss sequence_nll(const EncoderDecoder& model, std::span<const std::vector<Token>> sources,
                       std::span<const std::vector<Token>> targets, num::Rng* dropout_rng) {
  std::vector<std::vector<Token>> inputs;
  std::vector<Token> labels;
  for (const auto& y : targets) {
    if (y.empty()) throw std::invalid_argument("sequence_nll: empty target");
    std::vector<Token> in{Vocabulary::kBos};
    in.insert(in.end(), y.begin(), y.end() - 1);
    inputs.push_back(std::move(in));
    labels.insert(labels.end(), y.begin(), y.end());
  }
  auto f = model.forward(sources, inputs, dropout_rng);
  return {num::sum(token_nll(f.logits, labels, model.config().tau)), labels.size()};
}

num::ParamList pretrain_params(const BackboneModel& model, const ReferenceDecoder* reference) {
  auto p = model.params();
  if (reference != nullptr) {
    auto d = reference->decoder_params();
    for (auto& x : d) x.name = "reference." + x.name;
    p.insert(p.end(), d.begin(), d.end());
  }
  return p;
}

PretrainEpochStats pretrain_epoch(BackboneModel& model, ReferenceDecoder* reference,
                                  std::span<const PretrainExample> examples, num::AdamW& optimizer,
                                  const PretrainConfig& config, num::Rng& rng) {
  PretrainEpochStats stats;
  if (examples.empty()) return stats;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto bs = std::max<std::size_t>(1, config.batch_size);
  const bool with_ref = reference != nullptr && config.train_reference;
  double loss_sum = 0.0, ref_sum = 0.0;
  std::size_t tokens = 0, ref_tokens = 0;
  const auto params = pretrain_params(model, with_ref ? reference : nullptr);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const auto end = std::min(order.size(), start + bs);
    std::vector<std::vector<Token>> src, tgt, direct;
    for (auto i = start; i < end; ++i) {
      const auto& ex = examples[order[i]];
      src.push_back(ex.history);
      tgt.push_back(ex.target);
    }
    auto main = sequence_nll(model, src, tgt, &rng);
    Tensor loss = main.sum * (1.0 / static_cast<double>(main.tokens));
    if (with_ref) {
      for (auto i = start; i < end; ++i) {
        const auto& y = examples[order[i]].target;
        direct.emplace_back(y.end() - static_cast<std::ptrdiff_t>(examples[order[i]].item_len), y.end());
      }
      auto r = sequence_nll(*reference, src, direct, &rng);
      loss = loss + r.sum * (1.0 / static_cast<double>(r.tokens));
      ref_sum += r.sum.item();
      ref_tokens += r.tokens;
    }
    if (!std::isfinite(loss.item())) {
      throw num::NumericalError(fmt::format("pretraining loss is {} at batch {} (first user {})", loss.item(),
                                            start / bs, examples[order[start]].user));
    }
    loss.backward();
    if (config.grad_clip > 0.0) num::clip_grad_norm(params, config.grad_clip);
    optimizer.step();
    optimizer.zero_grad();
    loss_sum += main.sum.item();
    tokens += main.tokens;
    ++stats.steps;
  }
  stats.loss = loss_sum / static_cast<double>(tokens);
  stats.reference_loss = ref_tokens ? ref_sum / static_cast<double>(ref_tokens) : 0.0;
  return stats;
}

void save_pretrain_cache(std::span<const PretrainExample> examples, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError(fmt::format("cannot write {}", path.string()));
  for (const auto& ex : examples) {
    os << fmt::format("{}\t{} | {}\n", ex.user, fmt::join(ex.history, " "), fmt::join(ex.target, " "));
  }
}

std::vector<PretrainExample> load_pretrain_cache(const std::filesystem::path& path, const ItemCatalog& catalog) {
  std::ifstream is(path);
  if (!is) throw DataError(fmt::format("{}: cannot open", path.string()));
  std::vector<PretrainExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t'), bar = line.find(" | ");
    if (tab == std::string::npos || bar == std::string::npos || bar < tab) {
      throw DataError(fmt::format("{}:{}: expected user<TAB>history | target", path.string(), lineno));
    }
    PretrainExample ex;
    ex.user = static_cast<UserIndex>(std::stoul(line.substr(0, tab)));
    auto read = [](const std::string& s) {
      std::istringstream ss(s);
      std::vector<Token> v;
      unsigned long t;
      while (ss >> t) v.push_back(static_cast<Token>(t));
      return v;
    };
    ex.history = read(line.substr(tab + 1, bar - tab - 1));
    ex.target = read(line.substr(bar + 3));
    bool found = false;
    for (auto len = catalog.levels(); len <= catalog.max_item_len() && len <= ex.target.size(); ++len) {
      if (auto item = catalog.parse(std::span(ex.target).last(len))) {
        ex.target_item = *item;
        ex.item_len = len;
        found = true;
        break;
      }
    }
    if (!found) throw DataError(fmt::format("{}:{}: target does not end with an item", path.string(), lineno));
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace slowrec
