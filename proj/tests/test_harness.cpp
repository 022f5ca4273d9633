// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "slowrec/harness.hpp"
#include "slowrec/pipeline.hpp"

using namespace slowrec;
using slowrec::testing::make_world;
namespace fs = std::filesystem;

namespace {

RankedList list_with_target_at(std::size_t rank, std::size_t len, ItemIndex target) {
  std::vector<ItemIndex> items;
  for (ItemIndex i = 0; items.size() + 1 < len; ++i) {
    if (i != target) items.push_back(i);
  }
  items.insert(items.begin() + static_cast<std::ptrdiff_t>(rank - 1), target);
  RankedList l;
  l.items = items;
  for (std::size_t k = 0; k < len; ++k) l.scores.push_back(-static_cast<double>(k));
  return l;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("slowrec_harness_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig tiny_run(const fs::path& out) {
  auto c = default_run_config();
  c.out = out.string();
  c.data.synthetic.n_users = 60;
  c.data.synthetic.n_items = 40;
  c.data.synthetic.n_clusters = 4;
  c.data.synthetic.embedding_dim = 8;
  c.tokenizer.codebook_size = 8;
  c.tokenizer.latent_dim = 8;
  c.tokenizer.epochs = 10;
  c.backbone.hidden = 16;
  c.backbone.ffn = 32;
  c.backbone.encoder_layers = 1;
  c.backbone.decoder_layers = 1;
  c.stage1.max_epochs = 2;
  c.annotator.width = 16;
  c.sft.rounds = 2;
  c.sft.epochs = 1;
  c.sft.negative_pool = 10;
  c.rl.iterations = 2;
  c.rl.validate_every = 1;
  c.rl.group_size = 2;
  c.rl.prompts_per_iteration = 2;
  c.rl.negatives = 10;
  c.eval.validation_users = 20;
  return c;
}

}  // namespace

TEST(Metrics, TargetAtRankOneAndThree) {
  const std::vector<RankedList> one{list_with_target_at(1, 20, 7)};
  const std::vector<ItemIndex> t{7};
  auto m = hr_ndcg(one, t);
  EXPECT_EQ(m.hr5, 1.0);
  EXPECT_EQ(m.ndcg5, 1.0);
  const std::vector<RankedList> three{list_with_target_at(3, 20, 7)};
  m = hr_ndcg(three, t);
  EXPECT_EQ(m.hr5, 1.0);
  EXPECT_EQ(m.ndcg5, 0.5);
  EXPECT_EQ(m.ndcg10, 0.5);
}

TEST(Metrics, HundredListFixtureMatchesHandValues) {
  // ranks cycle through 1, 3, 7, 15, 20: gains 1, 1/2, 1/3, 1/4 and 0
  const std::size_t cycle[] = {1, 3, 7, 15, 20};
  std::vector<RankedList> lists;
  std::vector<ItemIndex> targets;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto target = static_cast<ItemIndex>(i % 30);
    lists.push_back(list_with_target_at(cycle[i % 5], 30, target));
    targets.push_back(target);
  }
  const auto m = hr_ndcg(lists, targets);
  EXPECT_EQ(m.count, 100u);
  EXPECT_EQ(m.hr5, 0.4);
  EXPECT_EQ(m.hr10, 0.6);
  EXPECT_EQ(m.ndcg5, 0.3);
  EXPECT_NEAR(m.ndcg10, 20.0 * (1.0 + 0.5 + 1.0 / 3.0) / 100.0, 1e-15);
  EXPECT_NEAR(m.ndcg10, 11.0 / 30.0, 1e-15);
}

TEST(Metrics, RandomListsMatchSpreadsheetRecomputation) {
  std::mt19937_64 rng(17);
  std::vector<RankedList> lists;
  std::vector<ItemIndex> targets;
  for (int i = 0; i < 100; ++i) {
    const std::size_t len = 5 + rng() % 40;
    std::vector<ItemIndex> items(len);
    std::iota(items.begin(), items.end(), 0);
    std::shuffle(items.begin(), items.end(), rng);
    RankedList l;
    l.items = items;
    for (std::size_t k = 0; k < len; ++k) l.scores.push_back(static_cast<double>(len - k));
    targets.push_back(static_cast<ItemIndex>(rng() % len));
    lists.push_back(l);
  }
  // column of ranks, then one column per metric, then column means
  double hr5 = 0, hr10 = 0, n5 = 0, n10 = 0;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    std::size_t rank = 0;
    for (std::size_t k = 0; k < lists[i].items.size(); ++k) {
      if (lists[i].items[k] == targets[i]) rank = k + 1;
    }
    const double gain = std::log(2.0) / std::log(static_cast<double>(rank) + 1.0);
    hr5 += rank <= 5 ? 1 : 0;
    hr10 += rank <= 10 ? 1 : 0;
    n5 += rank <= 5 ? gain : 0;
    n10 += rank <= 10 ? gain : 0;
  }
  const auto m = hr_ndcg(lists, targets);
  EXPECT_EQ(m.hr5, hr5 / 100.0);
  EXPECT_EQ(m.hr10, hr10 / 100.0);
  EXPECT_NEAR(m.ndcg5, n5 / 100.0, 1e-15);
  EXPECT_NEAR(m.ndcg10, n10 / 100.0, 1e-15);
}

TEST(Metrics, MissingTargetIsAMiss) {
  RankedList l;
  l.items = {1, 2};
  l.scores = {0.0, -1.0};
  const std::vector<RankedList> lists{l};
  const std::vector<ItemIndex> t{5};
  auto m = hr_ndcg(lists, t);
  EXPECT_EQ(m.hr10, 0.0);
  EXPECT_EQ(m.ndcg10, 0.0);
}

TEST(RankByScore, DescendingWithTiesByIdAndInvariantToInputOrder) {
  const std::vector<ItemIndex> c{4, 1, 3, 0, 2};
  const std::vector<double> s{0.5, 0.5, 2.0, -1.0, 0.5};
  auto l = rank_by_score(c, s);
  EXPECT_EQ(l.items, (std::vector<ItemIndex>{3, 1, 2, 4, 0}));
  EXPECT_EQ(l.scores, (std::vector<double>{2.0, 0.5, 0.5, 0.5, -1.0}));

  std::mt19937_64 rng(3);
  std::vector<std::size_t> perm(c.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<ItemIndex> pc;
    std::vector<double> ps;
    for (auto i : perm) {
      pc.push_back(c[i]);
      ps.push_back(s[i]);
    }
    auto p = rank_by_score(pc, ps);
    EXPECT_EQ(p.items, l.items);
    EXPECT_EQ(p.scores, l.scores);
  }
}

TEST(RankByScore, RejectsDuplicates) {
  const std::vector<ItemIndex> c{1, 2, 1};
  const std::vector<double> s{0.0, 1.0, 2.0};
  EXPECT_THROW(rank_by_score(c, s), std::invalid_argument);
}

TEST(RankItems, ScoresAreTheBackboneLogProbs) {
  auto w = make_world();
  BackboneModel m(w.backbone, w.vocab.size());
  const auto& ex = w.split.test[0];
  std::vector<ItemIndex> cand(w.catalog.size());
  std::iota(cand.begin(), cand.end(), 0);
  bool fb = false;
  auto l = rank_items(m, ex.history, cand, w.catalog, {.think_steps = 0}, &fb);
  EXPECT_FALSE(fb);
  ASSERT_EQ(l.size(), cand.size());
  EXPECT_EQ(std::set<ItemIndex>(l.items.begin(), l.items.end()).size(), cand.size());
  const auto enc = m.encode(history_tokens(w.catalog, ex.history));
  for (std::size_t k = 0; k < l.size(); ++k) {
    EXPECT_EQ(l.scores[k], m.log_prob(enc, w.catalog.tokens(l.items[k])));
    if (k > 0) {
      EXPECT_TRUE(l.scores[k - 1] > l.scores[k] || (l.scores[k - 1] == l.scores[k] && l.items[k - 1] < l.items[k]));
    }
  }
}

TEST(RankItems, TwoCandidatesFollowHandSetLogits) {
  auto w = make_world();
  BackboneModel m(w.backbone, w.vocab.size());
  auto weight = m.decoder().output.weight;
  auto bias = m.decoder().output.bias;
  std::fill(weight.mutable_data().begin(), weight.mutable_data().end(), 0.0);
  auto b = bias.mutable_data();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 2.0);
  for (auto& x : b) x = nd(rng);
  // with a zero weight matrix every position sees the same log-softmax
  double lse = 0.0;
  for (double x : b) lse += std::exp(x);
  lse = std::log(lse);
  auto manual = [&](ItemIndex item) {
    double s = 0.0;
    for (auto t : w.catalog.tokens(item)) s += b[t] - lse;
    return s;
  };
  const std::vector<ItemIndex> cand{3, 11};
  const auto l = rank_items(m, w.split.test[0].history, cand, w.catalog, {});
  ASSERT_EQ(l.size(), 2u);
  const bool three_first = manual(3) > manual(11) || (manual(3) == manual(11));
  EXPECT_EQ(l.items[0], three_first ? 3u : 11u);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(l.scores[k], manual(l.items[k]), 1e-12);
}

TEST(RankItems, SingleCandidateIsRankOne) {
  auto w = make_world();
  BackboneModel m(w.backbone, w.vocab.size());
  const std::vector<ItemIndex> cand{9};
  const auto l = rank_items(m, w.split.test[1].history, cand, w.catalog, {.think_steps = 2});
  ASSERT_EQ(l.size(), 1u);
  EXPECT_EQ(l.position(9), 1u);
}

TEST(RankItems, BeamListsOnlyCandidatesWithTheirLogProbs) {
  auto w = make_world();
  BackboneModel m(w.backbone, w.vocab.size());
  std::vector<ItemIndex> cand(w.catalog.size());
  std::iota(cand.begin(), cand.end(), 0);
  const auto& ex = w.split.test[2];
  const auto l = rank_items(m, ex.history, cand, w.catalog, {.think_steps = 0, .beam_width = 8});
  EXPECT_LE(l.size(), 8u);
  const auto enc = m.encode(history_tokens(w.catalog, ex.history));
  for (std::size_t k = 0; k < l.size(); ++k) {
    EXPECT_NEAR(l.scores[k], m.log_prob(enc, w.catalog.tokens(l.items[k])), 1e-12);
    if (k > 0) EXPECT_GE(l.scores[k - 1], l.scores[k]);
  }
}

TEST(EvaluatePool, ThreadCountDoesNotChangeRanks) {
  auto w = make_world();
  BackboneModel m(w.backbone, w.vocab.size());
  std::vector<Example> ex(w.split.test.begin(), w.split.test.begin() + 25);
  PoolEvalOptions one;
  one.rank.think_steps = 2;
  auto a = evaluate_pool(m, ex, w.catalog, one);
  one.threads = 3;
  auto b = evaluate_pool(m, ex, w.catalog, one);
  EXPECT_EQ(a.ranks, b.ranks);
  EXPECT_EQ(a.fallbacks, b.fallbacks);
  EXPECT_EQ(a.metrics.ndcg10, b.metrics.ndcg10);
}

TEST(EvaluatePool, TestPoolHoldsEveryTarget) {
  auto w = make_world();
  BackboneModel m(w.backbone, w.vocab.size());
  auto pool = example_item_pool(w.split.test);
  EXPECT_TRUE(std::is_sorted(pool.begin(), pool.end()));
  PoolEvalOptions opts;
  opts.pool = pool;
  auto r = evaluate_pool(m, w.split.test, w.catalog, opts);
  for (auto rank : r.ranks) EXPECT_LE(rank, pool.size());
  opts.pool = {0};
  EXPECT_THROW(evaluate_pool(m, w.split.test, w.catalog, opts), std::invalid_argument);
}

TEST(Popularity, CountsMatchBruteForceAndTiesGoToLowerId) {
  auto w = make_world();
  const auto n = w.corpus.num_items();
  std::vector<std::size_t> brute(n, 0);
  for (const auto& seq : w.corpus.sequences) {
    if (seq.size() < 3) continue;
    for (std::size_t k = 0; k + 2 < seq.size(); ++k) ++brute[seq[k]];
  }
  EXPECT_EQ(training_counts(w.split, n), brute);
  const auto l = popularity_baseline(w.split, n);
  ASSERT_EQ(l.size(), n);
  EXPECT_EQ(l.scores[0], static_cast<double>(*std::max_element(brute.begin(), brute.end())));
  for (std::size_t k = 1; k < n; ++k) {
    const auto a = l.items[k - 1], b = l.items[k];
    EXPECT_TRUE(brute[a] > brute[b] || (brute[a] == brute[b] && a < b));
  }
}

TEST(Popularity, HandTieRule) {
  SplitSet s;
  s.train_prefixes = {{2, 0}, {0, 3}, {3, 1}};
  const auto l = popularity_baseline(s, 5);
  EXPECT_EQ(l.items, (std::vector<ItemIndex>{0, 3, 1, 2, 4}));
}

TEST(EarlyStop, RuleTrace) {
  EXPECT_FALSE(early_stop({}).stop);
  EXPECT_EQ(early_stop({}).best_epoch, 0u);

  std::vector<double> rising;
  for (int e = 1; e <= 40; ++e) {
    rising.push_back(e);
    const auto d = early_stop(rising);
    EXPECT_FALSE(d.stop);
    EXPECT_EQ(d.best_epoch, rising.size());
  }

  std::vector<double> h{0.1, 0.2, 0.3};
  for (int e = 4; e <= 13; ++e) {
    h.push_back(0.3);
    const auto d = early_stop(h);
    EXPECT_EQ(d.best_epoch, 3u);
    EXPECT_EQ(d.stop, e == 13) << "epoch " << e;
  }
}

TEST(RunConfigJson, RoundTripAndDefaults) {
  auto c = default_run_config();
  c.seed = 42;
  c.sft.dpo_beta = 0.3;
  c.data.prefix_mode = TrainPrefixMode::all;
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));

  // a partial section keeps the desk defaults for the other keys
  const auto partial = run_config_from_json(nlohmann::json::parse(R"({"backbone": {"hidden": 48}})"));
  EXPECT_EQ(partial.backbone.hidden, 48u);
  EXPECT_EQ(partial.backbone.heads, default_run_config().backbone.heads);
  EXPECT_EQ(partial.rl.iterations, default_run_config().rl.iterations);
}

TEST(RunConfigJson, RejectsBadInput) {
  auto bad = [](const char* text) { return run_config_from_json(nlohmann::json::parse(text)); };
  EXPECT_THROW(bad(R"({"stage9": {}})"), ConfigError);
  EXPECT_THROW(bad(R"({"sft": {"dpo_betta": 1}})"), ConfigError);
  EXPECT_THROW(bad(R"({"sft": {"seed": 3}})"), ConfigError);
  EXPECT_THROW(bad(R"({"backbone": {"hidden": "wide"}})"), ConfigError);
  EXPECT_THROW(bad(R"({"backbone": {"hidden": 30, "heads": 4}})"), ConfigError);
  EXPECT_THROW(bad(R"({"precision": 16})"), ConfigError);
  EXPECT_THROW(bad(R"({"eval": {"pool": "some"}})"), ConfigError);
  EXPECT_THROW(bad(R"({"data": {"prefix_mode": "first"}})"), ConfigError);
}

TEST(RunConfigJson, SeedsFollowTheRunSeed) {
  auto c = default_run_config();
  c.seed = 5;
  const auto a = with_derived_seeds(c), b = with_derived_seeds(c);
  EXPECT_EQ(a.sft.seed, b.sft.seed);
  c.seed = 6;
  const auto d = with_derived_seeds(c);
  EXPECT_NE(a.sft.seed, d.sft.seed);
  EXPECT_NE(a.rl.seed, a.sft.seed);
  EXPECT_NE(a.data.synthetic.seed, d.data.synthetic.seed);
}

TEST(Pipeline, MissingPrerequisitesNameTheStage) {
  const auto dir = fresh_dir("missing");
  const auto c = tiny_run(dir);
  try {
    run_stage1(c);
    FAIL() << "stage1 ran without semantic ids";
  } catch (const MissingPrerequisite& e) {
    EXPECT_EQ(e.stage(), "fit-tokenizer");
  }
  run_fit_tokenizer(c);
  try {
    run_stage2(c);
    FAIL() << "stage2 ran without a stage-1 checkpoint";
  } catch (const MissingPrerequisite& e) {
    EXPECT_EQ(e.stage(), "stage1");
    EXPECT_NE(std::string(e.what()).find("stage1"), std::string::npos);
  }
  try {
    run_stage3(c);
    FAIL() << "stage3 ran without checkpoints";
  } catch (const MissingPrerequisite& e) {
    EXPECT_EQ(e.stage(), "stage1");
  }
  try {
    run_eval(c, "stage2");
    FAIL();
  } catch (const MissingPrerequisite& e) {
    EXPECT_EQ(e.stage(), "stage2");
  }
  fs::remove_all(dir);
}

TEST(Pipeline, EvalOnlyNeedsTheStage1Checkpoint) {
  const auto dir = fresh_dir("eval_only");
  const auto c = tiny_run(dir);
  run_fit_tokenizer(c);
  run_stage1(c);
  run_eval(c, "all");
  const auto rows = read_summary(dir / "summary.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].stage, "popularity");
  EXPECT_EQ(rows[1].stage, "stage1");
  EXPECT_EQ(rows[1].pool, "all");
  EXPECT_TRUE(fs::exists(dir / "stage1" / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "eval" / "config.json"));
  fs::remove_all(dir);
}

TEST(Pipeline, FullRunEmitsCheckpointsAndRepeatsExactly) {
  const auto a = fresh_dir("full_a"), b = fresh_dir("full_b");
  run_pipeline(tiny_run(a));
  run_pipeline(tiny_run(b));
  for (const auto* s : {"stage1", "stage2", "stage3"}) {
    EXPECT_TRUE(fs::exists(a / s / "backbone.bin")) << s;
    EXPECT_TRUE(fs::exists(a / s / "metrics.jsonl")) << s;
  }
  EXPECT_TRUE(fs::exists(a / "stage2" / "heads.bin"));
  EXPECT_TRUE(fs::exists(a / "stage2" / "traces_round2.tsv"));
  const auto sa = slurp(a / "summary.csv");
  EXPECT_EQ(read_summary(a / "summary.csv").size(), 4u);
  EXPECT_EQ(sa, slurp(b / "summary.csv"));
  EXPECT_EQ(slurp(a / "stage2" / "traces_round1.tsv"), slurp(b / "stage2" / "traces_round1.tsv"));

  // the resolved config names the seed
  const auto cfg = nlohmann::json::parse(slurp(a / "stage3" / "config.json"));
  EXPECT_EQ(cfg.at("seed").get<std::uint64_t>(), 1u);

  run_report(tiny_run(a));
  const auto curves = slurp(a / "curves.csv");
  EXPECT_EQ(curves.rfind("stage,step,round,loss", 0), 0u);
  EXPECT_NE(curves.find("\nstage3,"), std::string::npos);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(ItemPrefix, SpellsWholeItemsOrFallsBack) {
  auto w = make_world();
  BackboneModel m(w.backbone, w.vocab.size());
  std::size_t produced = 0;
  for (std::size_t u = 0; u < 30; ++u) {
    const auto enc = m.encode(history_tokens(w.catalog, w.split.test[u].history));
    bool fb = true;
    const auto t = generate_item_prefix(m, enc, w.catalog, 2, &fb);
    if (fb) {
      EXPECT_TRUE(t.empty());
      continue;
    }
    ++produced;
    // split greedily into catalog items
    std::size_t items = 0, start = 0;
    for (std::size_t k = 0; k < t.size(); ++k) {
      if (w.catalog.parse(std::span(t).subspan(start, k + 1 - start))) {
        ++items;
        start = k + 1;
      }
    }
    EXPECT_EQ(items, 2u);
    EXPECT_EQ(start, t.size());
  }
  bool fb = true;
  const auto enc = m.encode(history_tokens(w.catalog, w.split.test[0].history));
  EXPECT_TRUE(generate_item_prefix(m, enc, w.catalog, 0, &fb).empty());
  EXPECT_FALSE(fb);
  RecordProperty("produced", static_cast<int>(produced));
}
