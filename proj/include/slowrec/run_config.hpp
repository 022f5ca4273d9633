// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: every module's settings plus data source, seed and
// output directory, read from and written to JSON.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "slowrec/annotator.hpp"
#include "slowrec/pretrain.hpp"
#include "slowrec/rl.hpp"
#include "slowrec/sft.hpp"
#include "slowrec/tokenizer.hpp"

namespace slowrec {

/// Invalid or unreadable run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  /// "synthetic" (generated from `synthetic`) or "files".
  std::string source = "synthetic";
  SynthConfig synthetic;
  std::string interactions;
  std::string embeddings;
  /// Applied to file data only.
  bool five_core = true;
  std::size_t max_seq_len = kDefaultMaxSeqLen;
  TrainPrefixMode prefix_mode = TrainPrefixMode::last;
};

struct Stage1Config {
  PretrainConfig pretrain;
  std::size_t max_epochs = 60;
  /// Early-stopping patience, in epochs.
  std::size_t patience = 10;
};

struct EvalConfig {
  /// "all" items of the corpus or the items of the "test" examples.
  std::string pool = "all";
  /// Users sampled for validation during training (0 = all).
  std::size_t validation_users = 300;
  /// 0 scores every candidate; > 0 ranks only beam-decoded items.
  std::size_t beam_width = 0;
  std::size_t threads = 1;
};

struct RunConfig {
  std::uint64_t seed = 1;
  /// Storage precision in bits (32 or 64).
  int precision = 64;
  std::string out = "runs/default";
  DataConfig data;
  RqVaeConfig tokenizer;
  BackboneConfig backbone;
  Stage1Config stage1;
  AnnotatorConfig annotator;
  SftConfig sft;
  RlConfig rl;
  EvalConfig eval;
};

/// Desk-scale defaults used when no config file is given.
RunConfig default_run_config();

nlohmann::json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys, wrong types and invalid
/// values raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

/// Rejects inconsistent settings with ConfigError.
void validate(const RunConfig& config);

/// Copy whose per-module seeds are all derived from `config.seed`.
RunConfig with_derived_seeds(const RunConfig& config);

}  // namespace slowrec
