// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/sft.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace slowrec {

using num::Tensor;

std::vector<double> step_weights(std::size_t steps) {
  std::vector<double> w(steps);
  for (std::size_t j = 0; j < steps; ++j) w[j] = static_cast<double>(j + 1) / static_cast<double>(steps);
  return w;
}

Tensor state_contrastive_loss(std::span<const Tensor> states, const Tensor& targets, std::span<const double> weights) {
  if (states.empty() || states.size() != weights.size()) {
    throw std::invalid_argument("state_contrastive_loss: one weight per step is required");
  }
  const auto b = targets.rows();
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), 0);
  Tensor loss;
  for (std::size_t j = 0; j < states.size(); ++j) {
    if (states[j].rows() != b || states[j].cols() != targets.cols()) {
      throw std::invalid_argument("state_contrastive_loss: state and target shapes differ");
    }
    auto term = num::sum(num::pick(num::log_softmax(num::matmul_nt(states[j], targets)), diag)) * -weights[j];
    loss = loss.defined() ? loss + term : term;
  }
  return loss;
}

Tensor quantization_loss(std::span<const Tensor> residuals, std::span<const Tensor> labels, double beta) {
  if (residuals.empty() || residuals.size() != labels.size()) {
    throw std::invalid_argument("quantization_loss: residual and label counts differ");
  }
  Tensor loss;
  for (std::size_t j = 0; j < residuals.size(); ++j) {
    const auto& r = residuals[j];
    const auto& o = labels[j];
    if (r.shape() != o.shape()) throw std::invalid_argument("quantization_loss: shape mismatch");
    auto term = num::squared_norm(r.detach() - o) + num::squared_norm(r - o.detach()) * beta;
    loss = loss.defined() ? loss + term : term;
  }
  return loss;
}

Tensor dpo_loss(const Tensor& logit_plus, const Tensor& logit_minus, double beta) {
  const auto b = logit_plus.size();
  if (b == 0 || logit_minus.size() != b) throw std::invalid_argument("dpo_loss: batch mismatch");
  auto plus = num::reshape(logit_plus, {b, 1});
  auto minus = num::reshape(logit_minus, {b, 1});
  const std::size_t first = 0;
  Tensor loss;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<Tensor> pair{num::slice_rows(plus, i, i + 1), num::slice_rows(minus, i, i + 1)};
    auto logits = num::reshape(num::concat_rows(pair), {1, 2}) * beta;
    auto term = -num::pick(num::log_softmax(logits), std::span(&first, 1));
    loss = loss.defined() ? loss + term : term;
  }
  return num::sum(loss);
}

ItemIndex sample_negative(ItemIndex target, const NeighborIndex& neighbors, std::size_t pool, num::Rng& rng) {
  const auto n = std::min(pool, neighbors.neighbors(target).size());
  if (n == 0) throw DataError(fmt::format("no neighbors for item {}", target));
  auto cand = neighbors.nearest(target, n);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  return cand[pick(rng)];
}

namespace {

std::vector<Token> shifted(std::span<const Token> y) {
  std::vector<Token> in{Vocabulary::kBos};
  in.insert(in.end(), y.begin(), y.end() - 1);
  return in;
}

// Per-sample sums of the given token rows of a per-position NLL vector.
Tensor block_sums(const Tensor& nll, std::span<const std::size_t> rows, std::span<const std::size_t> offsets) {
  auto col = num::reshape(nll, {nll.size(), 1});
  return num::segment_sum_rows(num::embedding(col, rows), offsets);
}

// log p of each trace's trailing `tail` tokens under the reference decoder.
std::vector<double> reference_log_probs(const ReferenceDecoder& ref, std::span<const std::vector<Token>> sources,
                                        std::span<const std::vector<Token>> items) {
  num::NoGradGuard g;
  std::vector<std::vector<Token>> in;
  std::vector<Token> labels;
  std::vector<std::size_t> rows, offsets{0};
  for (const auto& y : items) {
    in.push_back(shifted(y));
    for (std::size_t k = 0; k < y.size(); ++k) rows.push_back(labels.size() + k);
    labels.insert(labels.end(), y.begin(), y.end());
    offsets.push_back(rows.size());
  }
  auto f = ref.forward(sources, in);
  auto sums = block_sums(token_nll(f.logits, labels, ref.config().tau), rows, offsets);
  std::vector<double> out(items.size());
  for (std::size_t b = 0; b < out.size(); ++b) out[b] = -sums.data()[b];
  return out;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw num::NumericalError(fmt::format("fine-tuning: {} loss is {}", what, v));
}

}  // namespace

SftBatchLoss sft_loss(const BackboneModel& model, const AnnotatorHeads& heads, const ReferenceDecoder& reference,
                      std::span<const ReasoningTrace> traces, std::span<const ItemIndex> negatives,
                      const ItemCatalog& catalog, const SftConfig& config, num::Rng* dropout_rng) {
  const auto b = traces.size();
  if (b == 0 || negatives.size() != b) throw std::invalid_argument("sft_loss: need one negative per trace");
  const auto steps = traces[0].think.size();
  const double tau = model.config().tau;
  std::vector<std::vector<Token>> src, dec, dec_neg, pos_items, neg_items;
  std::vector<Token> labels, labels_neg;
  std::vector<std::size_t> nll_rows, pos_rows, neg_rows, pos_off{0}, neg_off{0};
  for (std::size_t i = 0; i < b; ++i) {
    const auto& tr = traces[i];
    if (negatives[i] == tr.target_item) {
      throw std::invalid_argument(fmt::format("sft_loss: negative equals the target item {}", tr.target_item));
    }
    src.push_back(tr.history);
    const auto y = tr.label();
    dec.push_back(shifted(y));
    const auto& neg = catalog.tokens(negatives[i]);
    auto y_neg = tr.think;
    y_neg.insert(y_neg.end(), neg.begin(), neg.end());
    dec_neg.push_back(shifted(y_neg));
    for (std::size_t k = steps; k < y.size(); ++k) pos_rows.push_back(labels.size() + k);
    for (std::size_t k = config.mask_think ? steps : 0; k < y.size(); ++k) nll_rows.push_back(labels.size() + k);
    for (std::size_t k = steps; k < y_neg.size(); ++k) neg_rows.push_back(labels_neg.size() + k);
    pos_off.push_back(pos_rows.size());
    neg_off.push_back(neg_rows.size());
    labels.insert(labels.end(), y.begin(), y.end());
    labels_neg.insert(labels_neg.end(), y_neg.begin(), y_neg.end());
    pos_items.push_back(tr.target);
    neg_items.push_back(neg);
  }

  auto f = model.forward(src, dec, dropout_rng);
  auto nll = token_nll(f.logits, labels, tau);
  const std::vector<std::size_t> all{0, nll_rows.size()};
  Tensor l_sft = num::sum(block_sums(nll, nll_rows, all)) * (1.0 / static_cast<double>(nll_rows.size()));

  auto f_neg = model.forward(src, dec_neg, dropout_rng);
  auto lp_plus = -block_sums(nll, pos_rows, pos_off);
  auto lp_minus = -block_sums(token_nll(f_neg.logits, labels_neg, tau), neg_rows, neg_off);
  auto ref_plus = reference_log_probs(reference, src, pos_items);
  auto ref_minus = reference_log_probs(reference, src, neg_items);
  auto logit_plus = lp_plus - Tensor::from({b, 1}, ref_plus);
  auto logit_minus = lp_minus - Tensor::from({b, 1}, ref_minus);
  const double inv_b = 1.0 / static_cast<double>(b);
  Tensor l_dpo = dpo_loss(logit_plus, logit_minus, config.dpo_beta) * inv_b;

  auto tt = trace_tensors(model, heads, f, traces);
  Tensor l_quant = quantization_loss(tt.residuals, tt.labels, config.commitment) * inv_b;
  const auto w = step_weights(steps);
  Tensor l_state = state_contrastive_loss(tt.states, tt.targets, w) * inv_b;

  SftBatchLoss out;
  out.parts.nll = l_sft.item();
  out.parts.dpo = l_dpo.item();
  out.parts.quant = l_quant.item();
  out.parts.state = l_state.item();
  check_finite(out.parts.nll, "likelihood");
  check_finite(out.parts.dpo, "preference");
  check_finite(out.parts.quant, "quantization");
  check_finite(out.parts.state, "state contrastive");
  out.total = num::sum(l_sft + l_dpo * config.dpo_weight + l_quant * config.quant_weight +
                       l_state * config.state_weight);
  out.parts.total = out.total.item();
  return out;
}

num::ParamList sft_params(const BackboneModel& model, const AnnotatorHeads& heads) {
  auto p = model.params();
  for (auto x : heads.params()) {
    x.name = "heads." + x.name;
    p.push_back(std::move(x));
  }
  return p;
}

SftLosses sft_step(const BackboneModel& model, const AnnotatorHeads& heads, const ReferenceDecoder& reference,
                   std::span<const ReasoningTrace> traces, std::span<const ItemIndex> negatives,
                   const ItemCatalog& catalog, num::AdamW& optimizer, const SftConfig& config, num::Rng& rng) {
  auto loss = sft_loss(model, heads, reference, traces, negatives, catalog, config, &rng);
  loss.total.backward();
  if (config.grad_clip > 0.0) num::clip_grad_norm(sft_params(model, heads), config.grad_clip);
  optimizer.step();
  optimizer.zero_grad();
  return loss.parts;
}

SftLosses sft_epoch(const BackboneModel& model, const AnnotatorHeads& heads, const ReferenceDecoder& reference,
                    std::span<const ReasoningTrace> traces, const NeighborIndex& neighbors,
                    const ItemCatalog& catalog, num::AdamW& optimizer, const SftConfig& config, num::Rng& rng) {
  SftLosses avg;
  if (traces.empty()) return avg;
  std::vector<std::size_t> order(traces.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto bs = std::max<std::size_t>(1, config.batch_size);
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const auto end = std::min(order.size(), start + bs);
    std::vector<ReasoningTrace> batch;
    std::vector<ItemIndex> negatives;
    for (auto i = start; i < end; ++i) {
      batch.push_back(traces[order[i]]);
      negatives.push_back(sample_negative(batch.back().target_item, neighbors, config.negative_pool, rng));
    }
    auto l = sft_step(model, heads, reference, batch, negatives, catalog, optimizer, config, rng);
    avg.nll += l.nll;
    avg.dpo += l.dpo;
    avg.quant += l.quant;
    avg.state += l.state;
    avg.total += l.total;
    ++batches;
  }
  const double n = static_cast<double>(batches);
  avg.nll /= n;
  avg.dpo /= n;
  avg.quant /= n;
  avg.state /= n;
  avg.total /= n;
  return avg;
}

namespace {

std::vector<Tensor> snapshot(const num::ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor.clone());
  return out;
}

void restore(const std::vector<Tensor>& saved, const num::ParamList& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor;
    auto src = saved[i].data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

}  // namespace

SftRunResult staggered_training(BackboneModel& model, AnnotatorHeads& heads, const ReferenceDecoder& reference,
                                std::span<const Example> train, const NeighborIndex& neighbors,
                                const ItemCatalog& catalog, std::size_t steps, const SftConfig& config,
                                const Validator& validate, const std::function<void(const SftRecord&)>& on_record) {
  if (config.rounds == 0) throw std::invalid_argument("staggered_training: at least one round is required");
  SftRunResult result;
  const auto params = sft_params(model, heads);
  num::AdamW opt(params, {.lr = config.lr, .weight_decay = config.weight_decay});
  num::Rng rng(num::derive_seed(config.seed, 0x534654));
  std::vector<Tensor> best;
  for (std::size_t round = 1; round <= config.rounds; ++round) {
    auto batch = annotate_all(model, heads, train, catalog, steps);
    if (batch.traces.empty()) throw DataError("fine-tuning: no example could be annotated");
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      SftRecord rec;
      rec.round = round;
      rec.epoch = epoch;
      rec.annotated = batch.traces.size();
      rec.skipped = batch.skipped;
      rec.losses = sft_epoch(model, heads, reference, batch.traces, neighbors, catalog, opt, config, rng);
      if (epoch == config.epochs) {
        rec.validated = true;
        rec.validation = validate(model);
        if (rec.validation.ndcg10 > result.best_ndcg10) {
          result.best_ndcg10 = rec.validation.ndcg10;
          result.best_round = round;
          best = snapshot(params);
        }
      }
      if (on_record) on_record(rec);
      result.log.push_back(rec);
    }
    result.traces.push_back(std::move(batch.traces));
  }
  if (!best.empty()) restore(best, params);
  return result;
}

}  // namespace slowrec
