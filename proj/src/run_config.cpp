// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/run_config.hpp"

#include <fstream>

#include <fmt/format.h>

#include "slowrec/numerics/init.hpp"

namespace slowrec {

using nlohmann::json;

// Seeds are left out on purpose: they all follow from the run seed.
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, n_users, n_items, n_clusters, transition_sharpness,
                                                popularity_skew, min_length, max_length, embedding_dim,
                                                embedding_noise)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RqVaeConfig, levels, codebook_size, latent_dim, epochs, batch_size, lr,
                                                weight_decay, commitment, kmeans_iters, reseed_dead_codes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneConfig, hidden, ffn, encoder_layers, decoder_layers, heads,
                                                dropout, max_source_len, max_target_len, tau, embedding_std,
                                                output_std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, n_retrieve, lr, weight_decay, batch_size, grad_clip,
                                                train_reference)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Stage1Config, pretrain, max_epochs, patience)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AnnotatorConfig, steps, width, output_std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SftConfig, dpo_weight, quant_weight, state_weight, commitment,
                                                dpo_beta, rounds, epochs, negative_pool, mask_think, lr,
                                                weight_decay, batch_size, grad_clip)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RlConfig, group_size, clip, kl_weight, temperature, negatives, lr,
                                                weight_decay, prompts_per_iteration, iterations, validate_every,
                                                freeze_encoder, grad_clip)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, pool, validation_users, beam_width, threads)

namespace {

json data_to_json(const DataConfig& d) {
  return {{"source", d.source},
          {"synthetic", d.synthetic},
          {"interactions", d.interactions},
          {"embeddings", d.embeddings},
          {"five_core", d.five_core},
          {"max_seq_len", d.max_seq_len},
          {"prefix_mode", d.prefix_mode == TrainPrefixMode::all ? "all" : "last"}};
}

DataConfig data_from_json(const json& j) {
  DataConfig d;
  d.source = j.value("source", d.source);
  if (j.contains("synthetic")) d.synthetic = j.at("synthetic").get<SynthConfig>();
  d.interactions = j.value("interactions", d.interactions);
  d.embeddings = j.value("embeddings", d.embeddings);
  d.five_core = j.value("five_core", d.five_core);
  d.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  const auto mode = j.value("prefix_mode", std::string("last"));
  if (mode == "last") {
    d.prefix_mode = TrainPrefixMode::last;
  } else if (mode == "all") {
    d.prefix_mode = TrainPrefixMode::all;
  } else {
    throw ConfigError(fmt::format("data.prefix_mode must be \"last\" or \"all\", got \"{}\"", mode));
  }
  return d;
}

// Every key of `given` must exist in `known` (recursively for objects).
void check_keys(const json& given, const json& known, const std::string& where) {
  if (!given.is_object()) throw ConfigError(fmt::format("{}: expected an object", where.empty() ? "config" : where));
  for (const auto& [key, value] : given.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!known.contains(key)) {
      if (key == "seed") throw ConfigError(fmt::format("{}: only the top-level seed can be set", path));
      throw ConfigError(fmt::format("unknown config key \"{}\"", path));
    }
    if (known.at(key).is_object()) check_keys(value, known.at(key), path);
  }
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.tokenizer.levels = 3;
  c.tokenizer.codebook_size = 32;
  c.tokenizer.latent_dim = 16;
  c.tokenizer.epochs = 60;
  c.tokenizer.batch_size = 64;

  c.backbone.hidden = 32;
  c.backbone.ffn = 64;
  c.backbone.encoder_layers = 2;
  c.backbone.decoder_layers = 2;
  c.backbone.heads = 2;
  c.backbone.dropout = 0.1;
  // 0 sizes the position tables from the data
  c.backbone.max_source_len = 0;
  c.backbone.max_target_len = 0;

  c.stage1.pretrain.lr = 2e-3;
  c.stage1.max_epochs = 40;

  c.annotator.steps = 3;
  c.annotator.width = 64;

  c.sft.rounds = 3;
  c.sft.epochs = 4;
  c.sft.lr = 5e-4;

  c.rl.iterations = 300;
  c.rl.validate_every = 25;
  c.rl.prompts_per_iteration = 16;
  // cooler rollouts keep most generations well formed at this scale
  c.rl.temperature = 0.5;
  return c;
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"precision", c.precision},
          {"out", c.out},
          {"data", data_to_json(c.data)},
          {"tokenizer", c.tokenizer},
          {"backbone", c.backbone},
          {"stage1", c.stage1},
          {"annotator", c.annotator},
          {"sft", c.sft},
          {"rl", c.rl},
          {"eval", c.eval}};
}

RunConfig run_config_from_json(const json& j) {
  const auto defaults = default_run_config();
  RunConfig c = defaults;
  try {
    check_keys(j, to_json(defaults), "");
    c.seed = j.value("seed", c.seed);
    c.precision = j.value("precision", c.precision);
    c.out = j.value("out", c.out);
    if (j.contains("data")) c.data = data_from_json(j.at("data"));
    // a section falls back to the desk defaults key by key
    auto merged = [&](const char* key) {
      json base = to_json(defaults).at(key);
      if (j.contains(key)) base.merge_patch(j.at(key));
      return base;
    };
    c.tokenizer = merged("tokenizer").get<RqVaeConfig>();
    c.backbone = merged("backbone").get<BackboneConfig>();
    c.stage1 = merged("stage1").get<Stage1Config>();
    c.annotator = merged("annotator").get<AnnotatorConfig>();
    c.sft = merged("sft").get<SftConfig>();
    c.rl = merged("rl").get<RlConfig>();
    c.eval = merged("eval").get<EvalConfig>();
    if (j.contains("data") && j.at("data").contains("synthetic")) {
      json base = json(defaults.data.synthetic);
      base.merge_patch(j.at("data").at("synthetic"));
      c.data.synthetic = base.get<SynthConfig>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config: {}", e.what()));
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(fmt::format("cannot open config {}", path.string()));
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError(fmt::format("cannot write {}", path.string()));
  os << to_json(config).dump(2) << "\n";
}

void validate(const RunConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (c.precision != 32 && c.precision != 64) fail(fmt::format("precision must be 32 or 64, got {}", c.precision));
  if (c.out.empty()) fail("out must name a directory");
  if (c.data.source != "synthetic" && c.data.source != "files") {
    fail(fmt::format("data.source must be \"synthetic\" or \"files\", got \"{}\"", c.data.source));
  }
  if (c.data.source == "files" && (c.data.interactions.empty() || c.data.embeddings.empty())) {
    fail("data.source \"files\" needs data.interactions and data.embeddings");
  }
  if (c.data.max_seq_len == 0) fail("data.max_seq_len must be positive");
  if (c.tokenizer.levels == 0 || c.tokenizer.codebook_size < 2) fail("tokenizer needs levels >= 1 and codebook_size >= 2");
  if (c.backbone.hidden == 0 || c.backbone.heads == 0 || c.backbone.hidden % c.backbone.heads != 0) {
    fail(fmt::format("backbone.hidden ({}) must be a positive multiple of backbone.heads ({})", c.backbone.hidden,
                     c.backbone.heads));
  }
  if (c.backbone.dropout < 0.0 || c.backbone.dropout >= 1.0) fail("backbone.dropout must lie in [0, 1)");
  if (c.backbone.tau <= 0.0) fail("backbone.tau must be positive");
  if (c.stage1.max_epochs == 0) fail("stage1.max_epochs must be positive");
  if (c.annotator.steps == 0) fail("annotator.steps must be positive");
  if (c.sft.rounds == 0 || c.sft.epochs == 0) fail("sft.rounds and sft.epochs must be positive");
  if (c.rl.group_size < 2) fail("rl.group_size must be at least 2");
  if (c.rl.prompts_per_iteration < 2) fail("rl.prompts_per_iteration must be at least 2");
  if (c.rl.negatives < 10) fail("rl.negatives must be at least 10");
  if (c.rl.validate_every == 0) fail("rl.validate_every must be positive");
  if (c.eval.pool != "all" && c.eval.pool != "test") {
    fail(fmt::format("eval.pool must be \"all\" or \"test\", got \"{}\"", c.eval.pool));
  }
  if (c.eval.threads == 0) fail("eval.threads must be positive");
}

RunConfig with_derived_seeds(const RunConfig& config) {
  RunConfig c = config;
  c.data.synthetic.seed = num::derive_seed(c.seed, 1);
  c.tokenizer.seed = num::derive_seed(c.seed, 2);
  c.backbone.seed = num::derive_seed(c.seed, 3);
  c.annotator.seed = num::derive_seed(c.seed, 4);
  c.sft.seed = num::derive_seed(c.seed, 5);
  c.rl.seed = num::derive_seed(c.seed, 6);
  return c;
}

}  // namespace slowrec
