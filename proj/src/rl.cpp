// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/rl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "slowrec/annotator.hpp"

namespace slowrec {

using num::Tensor;

double reward_format(std::span<const Token> generation, std::size_t think_len, const ItemCatalog& catalog) {
  if (generation.size() <= think_len) return -1.0;
  for (std::size_t i = 0; i < think_len; ++i) {
    if (!catalog.vocab().is_code(generation[i])) return -1.0;
  }
  return catalog.parse(generation.subspan(think_len)) ? 0.0 : -1.0;
}

int reward_em(std::span<const Token> generated, std::span<const Token> truth) {
  if (generated.size() != truth.size()) {
    throw std::invalid_argument(fmt::format("reward_em: lengths differ ({} vs {})", generated.size(), truth.size()));
  }
  int n = 0;
  while (static_cast<std::size_t>(n) < truth.size() && generated[n] == truth[n]) ++n;
  return n;
}

std::vector<double> similarity_fractions(std::span<const double> sim, std::size_t batch) {
  if (batch == 0 || sim.size() != batch * batch) throw std::invalid_argument("similarity_fractions: need a B x B matrix");
  std::vector<double> g(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < batch; ++j) count += sim[i * batch + j] <= sim[i * batch + i];
    g[i] = static_cast<double>(count) / static_cast<double>(batch);
  }
  return g;
}

double similarity_tier(double g) {
  if (g >= 0.99) return 0.5;
  if (g >= 0.95) return 0.1;
  if (g >= 0.50) return 0.05;
  return -0.1;
}

std::vector<double> reward_similarity(std::span<const std::vector<double>> pooled,
                                      std::span<const std::vector<double>> targets) {
  const auto b = pooled.size();
  if (b < 2 || targets.size() != b) throw std::invalid_argument("reward_similarity: need a batch of at least two");
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::vector<double> sim(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    const double ni = norm(pooled[i]);
    for (std::size_t j = 0; j < b; ++j) {
      if (pooled[i].size() != targets[j].size()) throw std::invalid_argument("reward_similarity: width mismatch");
      double dot = 0.0;
      for (std::size_t c = 0; c < targets[j].size(); ++c) dot += pooled[i][c] * targets[j][c];
      const double d = ni * norm(targets[j]);
      sim[i * b + j] = d > 0.0 ? dot / d : 0.0;
    }
  }
  auto g = similarity_fractions(sim, b);
  for (auto& x : g) x = similarity_tier(x);
  return g;
}

double reward_likelihood(const EncoderDecoder& policy, const Encoding& policy_enc, const EncoderDecoder& reference,
                         const Encoding& reference_enc, std::span<const Token> think, std::span<const Token> target) {
  return policy.log_prob(policy_enc, target, think) - reference.log_prob(reference_enc, target);
}

double ranking_tier(std::size_t rank, std::size_t candidates) {
  const double p = static_cast<double>(rank), k = static_cast<double>(candidates);
  if (rank == 1) return 0.2;
  if (p < 0.1 * k) return 0.1;
  if (p < 0.2 * k) return 0.05;
  if (p >= 0.5 * k) return -0.1;
  return 0.0;
}

std::size_t ranking_position(const EncoderDecoder& policy, const Encoding& enc, std::span<const Token> think,
                             ItemIndex positive, std::span<const ItemIndex> negatives, const ItemCatalog& catalog) {
  if (negatives.size() < 10) {
    throw std::invalid_argument(fmt::format("ranking reward needs at least 10 negatives, got {}", negatives.size()));
  }
  std::vector<ItemIndex> cand(negatives.begin(), negatives.end());
  cand.push_back(positive);
  const auto scores = score_items(policy, enc, catalog, think, cand);
  std::size_t rank = 1;
  for (auto n : negatives) rank += scores[n] >= scores[positive];
  return rank;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantages: a group needs at least two rollouts");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::max(std::sqrt(var / n), 1e-6);
  std::vector<double> a(rewards.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

namespace {

std::vector<double> mean_of(const std::vector<std::vector<double>>& rows) {
  std::vector<double> m(rows.empty() ? 0 : rows[0].size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < m.size(); ++c) m[c] += r[c];
  for (auto& x : m) x /= static_cast<double>(rows.size());
  return m;
}

struct Packed {
  std::vector<std::vector<Token>> sources, inputs;
  std::vector<Token> labels;
  std::vector<std::size_t> offsets{0};
};

Packed pack(std::span<const RolloutGroup> groups) {
  Packed p;
  for (const auto& g : groups) {
    for (const auto& r : g.rollouts) {
      p.sources.push_back(g.prompt);
      std::vector<Token> in{Vocabulary::kBos};
      in.insert(in.end(), r.tokens.begin(), r.tokens.end() - 1);
      p.inputs.push_back(std::move(in));
      p.labels.insert(p.labels.end(), r.tokens.begin(), r.tokens.end());
      p.offsets.push_back(p.labels.size());
    }
  }
  return p;
}

// Per-position log-probabilities of the packed rollouts, [N].
Tensor token_log_probs(const EncoderDecoder& model, const Packed& p) {
  auto f = model.forward(p.sources, p.inputs);
  return -token_nll(f.logits, p.labels, model.config().tau);
}

}  // namespace

std::vector<double> rollout_log_probs(const EncoderDecoder& model, std::span<const RolloutGroup> groups) {
  num::NoGradGuard g;
  const auto p = pack(groups);
  auto lp = token_log_probs(model, p);
  auto seq = num::segment_sum_rows(num::reshape(lp, {lp.size(), 1}), p.offsets);
  return {seq.data().begin(), seq.data().end()};
}

std::vector<RolloutGroup> collect_rollouts(const EncoderDecoder& policy, std::span<const Example> examples,
                                           const RolloutContext& ctx, const RlConfig& config, num::Rng& rng) {
  if (examples.size() < 2) throw std::invalid_argument("collect_rollouts: need at least two prompts per batch");
  if (config.group_size < 2) throw std::invalid_argument("collect_rollouts: group size must be at least 2");
  const auto& catalog = ctx.catalog;
  const auto l = ctx.think_len;
  std::vector<RolloutGroup> groups;
  std::vector<std::vector<double>> targets;
  for (const auto& ex : examples) {
    RolloutGroup grp;
    grp.user = ex.user;
    grp.target_item = ex.target;
    grp.prompt = history_tokens(catalog, ex.history);
    const auto& truth = catalog.tokens(ex.target);
    const auto enc = policy.encode(grp.prompt);
    const auto direct_enc = ctx.direct.encode(grp.prompt);
    const auto negatives = ctx.neighbors.nearest(ex.target, config.negatives);
    {
      num::NoGradGuard g;
      auto t = target_representation(policy, truth);
      targets.emplace_back(t.data().begin(), t.data().end());
    }
    GenerateOptions opts;
    opts.mode = DecodeMode::sample;
    opts.temperature = config.temperature;
    opts.max_len = l + catalog.max_item_len();
    opts.done = [&](std::span<const Token> toks) {
      return toks.size() > l && catalog.is_terminal(toks.subspan(l));
    };
    for (std::size_t k = 0; k < config.group_size; ++k) {
      auto hyp = std::move(generate(policy, enc, opts, &rng).front());
      Rollout r;
      r.tokens = std::move(hyp.tokens);
      r.pooled_hidden = mean_of(hyp.hidden);
      const auto n_think = std::min(l, r.tokens.size());
      r.think.assign(r.tokens.begin(), r.tokens.begin() + static_cast<std::ptrdiff_t>(n_think));
      if (!r.think.empty() && r.think.back() == Vocabulary::kEos) r.think.pop_back();
      if (r.tokens.size() > l) r.target.assign(r.tokens.begin() + static_cast<std::ptrdiff_t>(l), r.tokens.end());
      r.reward.format = reward_format(r.tokens, l, catalog);
      if (r.reward.format == 0.0) r.item = catalog.parse(r.target);
      std::vector<Token> aligned(truth.size(), Vocabulary::kPad);
      std::copy_n(r.target.begin(), std::min(r.target.size(), truth.size()), aligned.begin());
      r.reward.em = reward_em(aligned, truth);
      r.reward.likelihood = reward_likelihood(policy, enc, ctx.direct, direct_enc, r.think, truth);
      r.reward.ranking = ranking_tier(ranking_position(policy, enc, r.think, ex.target, negatives, catalog),
                                      negatives.size() + 1);
      grp.rollouts.push_back(std::move(r));
    }
    groups.push_back(std::move(grp));
  }
  for (std::size_t k = 0; k < config.group_size; ++k) {
    std::vector<std::vector<double>> pooled;
    for (const auto& g : groups) pooled.push_back(g.rollouts[k].pooled_hidden);
    const auto sim = reward_similarity(pooled, targets);
    for (std::size_t b = 0; b < groups.size(); ++b) groups[b].rollouts[k].reward.similarity = sim[b];
  }
  const auto old = rollout_log_probs(policy, groups);
  std::size_t idx = 0;
  for (auto& g : groups) {
    std::vector<double> rewards;
    for (auto& r : g.rollouts) {
      r.old_log_prob = old[idx++];
      rewards.push_back(r.reward.total());
    }
    const auto adv = group_advantages(rewards);
    for (std::size_t k = 0; k < adv.size(); ++k) g.rollouts[k].advantage = adv[k];
  }
  return groups;
}

GrpoLoss grpo_loss(const EncoderDecoder& policy, const EncoderDecoder& kl_reference,
                   std::span<const RolloutGroup> groups, const RlConfig& config) {
  if (!(config.clip > 0.0) || config.kl_weight < 0.0) throw std::invalid_argument("grpo: invalid clip or KL weight");
  GrpoLoss out;
  const auto p = pack(groups);
  auto lp = num::reshape(token_log_probs(policy, p), {p.labels.size(), 1});
  std::vector<double> ref_lp;
  {
    num::NoGradGuard g;
    auto r = token_log_probs(kl_reference, p);
    ref_lp.assign(r.data().begin(), r.data().end());
  }
  auto seq = num::segment_sum_rows(lp, p.offsets);  // [R, 1]
  // k3 estimator per token with d = log p_ref - log p
  auto d = Tensor::from({ref_lp.size(), 1}, ref_lp) - lp;
  auto kl_tok = num::add_scalar(num::exp(d) - d, -1.0);
  auto kl_seq = num::segment_mean_rows(kl_tok, p.offsets);  // [R, 1]

  // drop groups whose ratios are not finite; each kept group contributes
  // (1/G) sum_i, and the result is averaged over kept groups
  std::vector<std::size_t> keep;
  std::vector<double> old, adv, w;
  std::size_t row = 0;
  for (const auto& g : groups) {
    bool ok = true;
    for (std::size_t k = 0; k < g.rollouts.size(); ++k) {
      ok = ok && std::isfinite(std::exp(seq.data()[row + k] - g.rollouts[k].old_log_prob));
    }
    if (ok) {
      for (std::size_t k = 0; k < g.rollouts.size(); ++k) {
        keep.push_back(row + k);
        old.push_back(g.rollouts[k].old_log_prob);
        adv.push_back(g.rollouts[k].advantage);
        w.push_back(1.0 / static_cast<double>(g.rollouts.size()));
      }
    } else {
      ++out.stats.skipped_groups;
    }
    row += g.rollouts.size();
  }
  if (keep.empty()) return out;
  const auto n = keep.size();
  const double kept_groups = static_cast<double>(groups.size() - out.stats.skipped_groups);
  for (auto& x : w) x /= kept_groups;
  auto seq_k = num::embedding(seq, keep);
  auto kl_k = num::embedding(kl_seq, keep);
  auto a = Tensor::from({n, 1}, adv);
  auto ratio = num::exp(seq_k - Tensor::from({n, 1}, old));
  auto unclipped = ratio * a;
  auto clipped_term = num::clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * a;
  auto surrogate = num::minimum(unclipped, clipped_term);
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < n; ++i) clipped += clipped_term.data()[i] < unclipped.data()[i];
  auto per = surrogate - kl_k * config.kl_weight;
  auto objective = num::sum(num::scale_rows(per, w));
  out.loss = -objective;
  out.stats.objective = objective.item();
  out.stats.surrogate = num::sum(num::scale_rows(surrogate, w)).item();
  out.stats.kl = num::sum(num::scale_rows(kl_k, w)).item();
  out.stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);
  return out;
}

num::ParamList rl_params(const EncoderDecoder& policy, bool freeze_encoder) {
  return freeze_encoder ? policy.decoder_params() : policy.params();
}

GrpoStats grpo_step(const EncoderDecoder& policy, const EncoderDecoder& kl_reference,
                    std::span<const RolloutGroup> groups, num::AdamW& optimizer, const RlConfig& config) {
  auto l = grpo_loss(policy, kl_reference, groups, config);
  if (!l.loss.defined()) return l.stats;
  if (!std::isfinite(l.stats.objective)) {
    throw num::NumericalError(fmt::format("policy optimization: objective is {}", l.stats.objective));
  }
  l.loss.backward();
  if (config.grad_clip > 0.0) num::clip_grad_norm(rl_params(policy, config.freeze_encoder), config.grad_clip);
  optimizer.step();
  optimizer.zero_grad();
  // gradients on frozen tensors are discarded
  for (const auto& p : policy.params()) {
    auto t = p.tensor;
    t.zero_grad();
  }
  return l.stats;
}

namespace {

void accumulate(RewardBreakdown& mean, RewardBreakdown& max, const RewardBreakdown& r, bool first) {
  mean.format += r.format;
  mean.em += r.em;
  mean.similarity += r.similarity;
  mean.likelihood += r.likelihood;
  mean.ranking += r.ranking;
  if (first) {
    max = r;
    return;
  }
  max.format = std::max(max.format, r.format);
  max.em = std::max(max.em, r.em);
  max.similarity = std::max(max.similarity, r.similarity);
  max.likelihood = std::max(max.likelihood, r.likelihood);
  max.ranking = std::max(max.ranking, r.ranking);
}

}  // namespace

RlRunResult rl_training(BackboneModel& policy, std::span<const Example> train, const RolloutContext& ctx,
                        const RlConfig& config, const std::function<RankingMetrics(const BackboneModel&)>& validate,
                        const std::function<void(const RlRecord&)>& on_record) {
  if (train.size() < 2) throw DataError("policy optimization needs at least two training examples");
  RlRunResult result;
  const auto anchor = clone_model(policy);
  const auto params = policy.params();
  num::AdamW opt(rl_params(policy, config.freeze_encoder), {.lr = config.lr, .weight_decay = config.weight_decay});
  num::Rng rng(num::derive_seed(config.seed, 0x524c));
  std::vector<Tensor> best;
  auto consider = [&](RlRecord& rec) {
    rec.validated = true;
    rec.validation = validate(policy);
    if (rec.validation.ndcg10 > result.best_ndcg10) {
      result.best_ndcg10 = rec.validation.ndcg10;
      result.best_iteration = rec.iteration;
      best.clear();
      for (const auto& p : params) best.push_back(p.tensor.clone());
    }
  };
  RlRecord start;
  consider(start);
  if (on_record) on_record(start);
  result.log.push_back(start);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const auto per_iter = std::max<std::size_t>(2, std::min(config.prompts_per_iteration, train.size()));
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    std::vector<Example> batch;
    while (batch.size() < per_iter) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(train[order[cursor++]]);
    }
    auto groups = collect_rollouts(policy, batch, ctx, config, rng);
    RlRecord rec;
    rec.iteration = it;
    rec.grpo = grpo_step(policy, anchor, groups, opt, config);
    std::size_t count = 0;
    for (const auto& g : groups)
      for (const auto& r : g.rollouts) accumulate(rec.mean_reward, rec.max_reward, r.reward, count++ == 0);
    const double c = static_cast<double>(count);
    rec.mean_reward.format /= c;
    rec.mean_reward.em /= c;
    rec.mean_reward.similarity /= c;
    rec.mean_reward.likelihood /= c;
    rec.mean_reward.ranking /= c;
    if ((config.validate_every > 0 && it % config.validate_every == 0) || it == config.iterations) consider(rec);
    if (on_record) on_record(rec);
    result.log.push_back(rec);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor;
    std::copy(best[i].data().begin(), best[i].data().end(), dst.mutable_data().begin());
  }
  return result;
}

}  // namespace slowrec
