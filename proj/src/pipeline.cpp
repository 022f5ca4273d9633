// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "slowrec/numerics/init.hpp"
#include "slowrec/numerics/optim.hpp"

namespace slowrec {

namespace fs = std::filesystem;
using nlohmann::json;

MissingPrerequisite::MissingPrerequisite(const std::string& stage, const std::string& detail)
    : std::runtime_error(fmt::format("run `{}` first: {}", stage, detail)), stage_(stage) {}

namespace {

fs::path root(const RunConfig& c) { return fs::path(c.out); }

fs::path stage_dir(const RunConfig& c, const std::string& name) {
  auto d = root(c) / name;
  fs::create_directories(d);
  save_run_config(c, d / "config.json");
  return d;
}

void require(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) throw MissingPrerequisite(stage, fmt::format("{} not found", p.string()));
}

template <class... Args>
void note(fmt::format_string<Args...> f, Args&&... args) {
  fmt::print(stderr, "{}\n", fmt::format(f, std::forward<Args>(args)...));
}

json metrics_json(const RankingMetrics& m) {
  return {{"hr5", m.hr5}, {"hr10", m.hr10}, {"ndcg5", m.ndcg5}, {"ndcg10", m.ndcg10}, {"users", m.count}};
}

// One JSON record per line, stamped with seconds since the stage started.
class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& path) : os_(path), start_(std::chrono::steady_clock::now()) {
    if (!os_) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  }
  void write(json record) {
    record["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    os_ << record.dump() << "\n";
    os_.flush();
  }

 private:
  std::ofstream os_;
  std::chrono::steady_clock::time_point start_;
};

// Stage 1 answers after its retrieved items; later stages after l think tokens.
RankOptions inference_for(const Workspace& ws, const std::string& stage) {
  RankOptions r;
  if (stage == "stage1") {
    r.think_items = ws.config.stage1.pretrain.n_retrieve;
  } else {
    r.think_steps = ws.config.annotator.steps;
  }
  return r;
}

Validator make_validator(const Workspace& ws, const std::string& stage) {
  return [&ws, rank = inference_for(ws, stage)](const BackboneModel& model) {
    PoolEvalOptions opts;
    opts.rank = rank;
    opts.threads = ws.config.eval.threads;
    return evaluate_pool(model, ws.validation, ws.catalog, opts).metrics;
  };
}

BackboneModel new_backbone(const Workspace& ws) { return BackboneModel(ws.config.backbone, ws.vocab.size()); }

void save_reference(const ReferenceDecoder& ref, const fs::path& path) {
  num::save_tensors(path, ref.decoder_params());
}

ReferenceDecoder load_reference(const Workspace& ws, const BackboneModel& backbone, const fs::path& path) {
  ReferenceDecoder ref(backbone, ws.config.backbone.seed);
  num::load_tensors(path, ref.decoder_params());
  return ref;
}

}  // namespace

Workspace open_workspace(const RunConfig& config, bool with_ids) {
  validate(config);
  num::set_precision(config.precision == 32 ? num::Precision::f32 : num::Precision::f64);
  Workspace ws;
  ws.config = with_derived_seeds(config);
  const auto& dc = ws.config.data;
  if (dc.source == "synthetic") {
    auto synth = synth_corpus(dc.synthetic);
    ws.corpus = std::move(synth.corpus);
    ws.embeddings = std::move(synth.embeddings);
  } else {
    std::vector<std::string> diag;
    ws.corpus = load_interactions(dc.interactions, &diag);
    if (dc.five_core) ws.corpus = five_core_filter(ws.corpus);
    ws.embeddings = load_embeddings(dc.embeddings, &diag);
    for (const auto& d : diag) note("data: {}", d);
  }
  ws.corpus.max_seq_len = dc.max_seq_len;
  ws.embeddings = ws.embeddings.aligned_to(ws.corpus);
  ws.split = leave_one_out_split(ws.corpus, dc.prefix_mode, dc.max_seq_len);
  if (ws.split.train.empty() || ws.split.test.empty()) throw DataError("no user has three or more interactions");

  // seeded validation subsample, kept in user order
  std::vector<std::size_t> order(ws.split.valid.size());
  std::iota(order.begin(), order.end(), 0);
  const auto want = ws.config.eval.validation_users;
  if (want > 0 && want < order.size()) {
    num::Rng rng(num::derive_seed(ws.config.seed, 8));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(want);
    std::sort(order.begin(), order.end());
  }
  for (auto i : order) ws.validation.push_back(ws.split.valid[i]);

  if (!with_ids) return ws;
  const auto ids_path = root(config) / "tokenizer" / "semantic_ids.tsv";
  require(ids_path, "fit-tokenizer");
  ws.ids = aligned_to(load_semantic_ids(ids_path), ws.corpus);
  ws.vocab = Vocabulary(ws.ids.levels, ws.ids.codebook_size, ws.ids.suffix_range());
  ws.catalog = ItemCatalog(ws.ids, ws.vocab);

  auto& bc = ws.config.backbone;
  const auto item_len = ws.catalog.max_item_len();
  if (bc.max_source_len == 0) bc.max_source_len = dc.max_seq_len * item_len;
  if (bc.max_target_len == 0) {
    bc.max_target_len =
        std::max((ws.config.stage1.pretrain.n_retrieve + 1) * item_len, ws.config.annotator.steps + item_len);
  }
  const auto depth = std::max({ws.config.stage1.pretrain.n_retrieve, ws.config.sft.negative_pool,
                               ws.config.rl.negatives});
  ws.neighbors = NeighborIndex(ws.embeddings, depth);
  return ws;
}

void run_synth(const RunConfig& config) {
  const auto c = with_derived_seeds(config);
  if (c.data.source != "synthetic") throw ConfigError("synth needs data.source = \"synthetic\"");
  auto dir = stage_dir(c, "data");
  auto synth = synth_corpus(c.data.synthetic);
  save_interactions(synth.corpus, dir / "interactions.tsv");
  save_embeddings(synth.embeddings, dir / "embeddings.tsv");
  const auto st = corpus_stats(synth.corpus);
  note("synth: {} users, {} items, {} actions, avg length {:.2f}", st.sequences, st.items, st.actions, st.avg_length);
}

void run_fit_tokenizer(const RunConfig& config) {
  auto ws = open_workspace(config, false);
  auto dir = stage_dir(ws.config, "tokenizer");
  MetricsLog log(dir / "metrics.jsonl");
  auto fit = train_rqvae(ws.embeddings, ws.config.tokenizer);
  for (const auto& e : fit.log) {
    log.write({{"stage", "tokenizer"},
               {"epoch", e.epoch},
               {"loss", e.loss},
               {"recon", e.recon},
               {"quant", e.quant},
               {"reseeded", e.reseeded}});
  }
  auto ids = assign_ids(fit.model, ws.embeddings);
  save_semantic_ids(ids, dir / "semantic_ids.tsv");
  note("tokenizer: {} items, collision rate {:.4f}, final loss {:.5f}", ids.size(), ids.collision_rate,
       fit.log.empty() ? 0.0 : fit.log.back().loss);
}

void run_stage1(const RunConfig& config) {
  auto ws = open_workspace(config);
  const auto& c = ws.config;
  auto dir = stage_dir(c, "stage1");
  MetricsLog log(dir / "metrics.jsonl");

  auto model = new_backbone(ws);
  ReferenceDecoder reference(model, c.backbone.seed);
  const auto examples = build_pretrain_examples(ws.split.train, ws.neighbors, c.stage1.pretrain.n_retrieve, ws.catalog);
  save_pretrain_cache(examples, dir / "pretrain_cache.tsv");

  const auto& pc = c.stage1.pretrain;
  num::AdamW opt(pretrain_params(model, pc.train_reference ? &reference : nullptr),
                 {.lr = pc.lr, .weight_decay = pc.weight_decay});
  num::Rng rng(num::derive_seed(c.seed, 7));
  const auto validate = make_validator(ws, "stage1");
  std::vector<double> history;
  for (std::size_t epoch = 1; epoch <= c.stage1.max_epochs; ++epoch) {
    const auto stats = pretrain_epoch(model, &reference, examples, opt, pc, rng);
    const auto m = validate(model);
    history.push_back(m.ndcg10);
    json rec{{"stage", "stage1"}, {"epoch", epoch}, {"loss", stats.loss}, {"reference_loss", stats.reference_loss}};
    rec.update(metrics_json(m));
    log.write(rec);
    const auto decision = early_stop(history, c.stage1.patience);
    if (decision.best_epoch == epoch) {
      model.save(dir / "backbone.bin");
      save_reference(reference, dir / "reference.bin");
    }
    note("stage1 epoch {}: loss {:.4f} ref {:.4f} val ndcg@10 {:.4f} (best epoch {})", epoch, stats.loss,
         stats.reference_loss, m.ndcg10, decision.best_epoch);
    if (decision.stop) break;
  }
}

void run_stage2(const RunConfig& config) {
  auto ws = open_workspace(config);
  const auto& c = ws.config;
  const auto prev = root(c) / "stage1";
  require(prev / "backbone.bin", "stage1");
  require(prev / "reference.bin", "stage1");
  auto dir = stage_dir(c, "stage2");
  MetricsLog log(dir / "metrics.jsonl");

  auto model = new_backbone(ws);
  model.load(prev / "backbone.bin");
  auto reference = load_reference(ws, model, prev / "reference.bin");
  AnnotatorHeads heads(c.backbone.hidden, c.annotator);

  auto on_record = [&](const SftRecord& r) {
    json rec{{"stage", "stage2"}, {"round", r.round},     {"epoch", r.epoch},         {"nll", r.losses.nll},
             {"dpo", r.losses.dpo}, {"quant", r.losses.quant}, {"state", r.losses.state}, {"loss", r.losses.total},
             {"annotated", r.annotated}, {"skipped", r.skipped}};
    if (r.validated) rec.update(metrics_json(r.validation));
    log.write(rec);
    note("stage2 round {} epoch {}: loss {:.4f} (nll {:.4f} dpo {:.4f} quant {:.4f} state {:.4f}){}", r.round, r.epoch,
         r.losses.total, r.losses.nll, r.losses.dpo, r.losses.quant, r.losses.state,
         r.validated ? fmt::format(" val ndcg@10 {:.4f}", r.validation.ndcg10) : std::string());
  };
  auto result = staggered_training(model, heads, reference, ws.split.train, ws.neighbors, ws.catalog,
                                   c.annotator.steps, c.sft, make_validator(ws, "stage2"), on_record);
  for (std::size_t r = 0; r < result.traces.size(); ++r) {
    save_traces(result.traces[r], dir / fmt::format("traces_round{}.tsv", r + 1));
  }
  model.save(dir / "backbone.bin");
  heads.save(dir / "heads.bin");
  note("stage2: best round {} (val ndcg@10 {:.4f})", result.best_round, result.best_ndcg10);
}

void run_stage3(const RunConfig& config) {
  auto ws = open_workspace(config);
  const auto& c = ws.config;
  require(root(c) / "stage1" / "reference.bin", "stage1");
  require(root(c) / "stage2" / "backbone.bin", "stage2");
  auto dir = stage_dir(c, "stage3");
  MetricsLog log(dir / "metrics.jsonl");

  auto policy = new_backbone(ws);
  policy.load(root(c) / "stage2" / "backbone.bin");
  // the likelihood reward's direct decoder sits on a frozen copy of the
  // post-SFT encoder
  const auto frozen = clone_model(policy);
  const auto direct = load_reference(ws, frozen, root(c) / "stage1" / "reference.bin");
  const RolloutContext ctx{ws.catalog, ws.neighbors, direct, c.annotator.steps};

  auto on_record = [&](const RlRecord& r) {
    json rec{{"stage", "stage3"},
             {"iteration", r.iteration},
             {"objective", r.grpo.objective},
             {"surrogate", r.grpo.surrogate},
             {"kl", r.grpo.kl},
             {"clip_fraction", r.grpo.clip_fraction},
             {"skipped_groups", r.grpo.skipped_groups},
             {"reward", r.mean_reward.total()},
             {"reward_format", r.mean_reward.format},
             {"reward_em", r.mean_reward.em},
             {"reward_similarity", r.mean_reward.similarity},
             {"reward_likelihood", r.mean_reward.likelihood},
             {"reward_ranking", r.mean_reward.ranking},
             {"max_reward", r.max_reward.total()}};
    if (r.validated) rec.update(metrics_json(r.validation));
    log.write(rec);
    if (r.validated || r.iteration % 10 == 0) {
      note("stage3 iteration {}: reward {:.3f} kl {:.5f} clip {:.3f}{}", r.iteration, r.mean_reward.total(), r.grpo.kl,
           r.grpo.clip_fraction, r.validated ? fmt::format(" val ndcg@10 {:.4f}", r.validation.ndcg10) : std::string());
    }
  };
  auto result = rl_training(policy, ws.split.train, ctx, c.rl, make_validator(ws, "stage3"), on_record);
  policy.save(dir / "backbone.bin");
  note("stage3: best iteration {} (val ndcg@10 {:.4f})", result.best_iteration, result.best_ndcg10);
}

namespace {

const std::vector<std::string> kEvalStages{"popularity", "stage1", "stage2", "stage3"};

void write_summary(const RunConfig& c) {
  const auto path = root(c) / "summary.csv";
  std::ofstream os(path);
  if (!os) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  os << "stage,pool,users,hr5,hr10,ndcg5,ndcg10,fallbacks\n";
  for (const auto& s : kEvalStages) {
    const auto p = root(c) / "eval" / (s + ".json");
    if (!fs::exists(p)) continue;
    std::ifstream is(p);
    const auto j = json::parse(is);
    os << fmt::format("{},{},{},{:.10f},{:.10f},{:.10f},{:.10f},{}\n", s, j.at("pool").get<std::string>(),
                      j.at("users").get<std::size_t>(), j.at("hr5").get<double>(), j.at("hr10").get<double>(),
                      j.at("ndcg5").get<double>(), j.at("ndcg10").get<double>(), j.at("fallbacks").get<std::size_t>());
  }
}

}  // namespace

void run_eval(const RunConfig& config, const std::string& stage) {
  if (stage != "all" && std::find(kEvalStages.begin(), kEvalStages.end(), stage) == kEvalStages.end()) {
    throw ConfigError(fmt::format("unknown stage \"{}\" (popularity, stage1, stage2, stage3 or all)", stage));
  }
  auto ws = open_workspace(config);
  const auto& c = ws.config;
  auto dir = stage_dir(c, "eval");
  std::vector<ItemIndex> pool;
  if (c.eval.pool == "test") pool = example_item_pool(ws.split.test);

  auto record = [&](const std::string& name, const RankingMetrics& m, std::size_t fallbacks) {
    json j = metrics_json(m);
    j["stage"] = name;
    j["pool"] = c.eval.pool;
    j["fallbacks"] = fallbacks;
    std::ofstream os(dir / (name + ".json"));
    os << j.dump(2) << "\n";
    note("eval {} ({} pool, {} users): HR@5 {:.4f} HR@10 {:.4f} NDCG@5 {:.4f} NDCG@10 {:.4f}, {} fallbacks", name,
         c.eval.pool, m.count, m.hr5, m.hr10, m.ndcg5, m.ndcg10, fallbacks);
  };

  if (stage == "all" || stage == "popularity") {
    auto list = popularity_baseline(ws.split, ws.corpus.num_items());
    if (!pool.empty()) {
      std::vector<bool> keep(ws.corpus.num_items(), false);
      for (auto i : pool) keep[i] = true;
      RankedList filtered;
      for (std::size_t k = 0; k < list.size(); ++k) {
        if (!keep[list.items[k]]) continue;
        filtered.items.push_back(list.items[k]);
        filtered.scores.push_back(list.scores[k]);
      }
      list = std::move(filtered);
    }
    std::vector<RankedList> lists(ws.split.test.size(), list);
    std::vector<ItemIndex> targets;
    for (const auto& ex : ws.split.test) targets.push_back(ex.target);
    record("popularity", hr_ndcg(lists, targets), 0);
  }
  for (const std::string s : {"stage1", "stage2", "stage3"}) {
    if (stage != "all" && stage != s) continue;
    const auto ckpt = root(c) / s / "backbone.bin";
    if (!fs::exists(ckpt)) {
      if (stage == s) require(ckpt, s);
      continue;
    }
    auto model = new_backbone(ws);
    model.load(ckpt);
    PoolEvalOptions opts;
    opts.rank = inference_for(ws, s);
    opts.rank.beam_width = c.eval.beam_width;
    opts.pool = pool;
    opts.threads = c.eval.threads;
    const auto r = evaluate_pool(model, ws.split.test, ws.catalog, opts);
    record(s, r.metrics, r.fallbacks);
  }
  write_summary(c);
}

void run_report(const RunConfig& config) {
  const auto out = root(config) / "curves.csv";
  std::ofstream os(out);
  if (!os) throw std::runtime_error(fmt::format("cannot write {}", out.string()));
  const std::vector<std::string> cols{"loss", "hr5", "hr10", "ndcg5", "ndcg10", "wall_time"};
  os << "stage,step,round,loss,hr5,hr10,ndcg5,ndcg10,wall_time\n";
  std::size_t rows = 0;
  for (const std::string s : {"tokenizer", "stage1", "stage2", "stage3"}) {
    const auto p = root(config) / s / "metrics.jsonl";
    if (!fs::exists(p)) continue;
    std::ifstream is(p);
    std::string line;
    std::size_t step = 0;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      ++step;
      os << s << "," << step << "," << (j.contains("round") ? std::to_string(j.at("round").get<std::size_t>()) : "");
      for (const auto& col : cols) {
        os << ",";
        // stage3 records the mean reward in place of a loss
        const auto key = (col == "loss" && s == "stage3") ? std::string("reward") : col;
        if (j.contains(key)) os << fmt::format("{:.10g}", j.at(key).get<double>());
      }
      os << "\n";
      ++rows;
    }
  }
  if (rows == 0) throw MissingPrerequisite("fit-tokenizer", "no metrics.jsonl under " + root(config).string());
  note("report: {} rows written to {}", rows, out.string());
}

void run_pipeline(const RunConfig& config) {
  fs::create_directories(root(config));
  save_run_config(with_derived_seeds(config), root(config) / "config.json");
  run_fit_tokenizer(config);
  run_stage1(config);
  run_stage2(config);
  run_stage3(config);
  run_eval(config, "all");
}

std::vector<SummaryRow> read_summary(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  std::vector<SummaryRow> rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw std::runtime_error(fmt::format("{}: malformed row \"{}\"", path.string(), line));
    SummaryRow r;
    r.stage = f[0];
    r.pool = f[1];
    r.metrics.count = std::stoul(f[2]);
    r.metrics.hr5 = std::stod(f[3]);
    r.metrics.hr10 = std::stod(f[4]);
    r.metrics.ndcg5 = std::stod(f[5]);
    r.metrics.ndcg10 = std::stod(f[6]);
    r.fallbacks = std::stoul(f[7]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace slowrec
