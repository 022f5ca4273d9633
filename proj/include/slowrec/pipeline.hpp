// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Stage orchestration. Every stage reads its inputs from and writes its
// artifacts under the run's output directory:
//
//   data/          interactions.tsv, embeddings.tsv (synth)
//   tokenizer/     semantic_ids.tsv, metrics.jsonl
//   stage1/        backbone.bin, reference.bin, pretrain_cache.tsv, metrics.jsonl
//   stage2/        backbone.bin, heads.bin, traces_round<r>.tsv, metrics.jsonl
//   stage3/        backbone.bin, metrics.jsonl
//   eval/          <stage>.json per evaluated stage
//   summary.csv    test metrics of every evaluated stage
//   curves.csv     training curves (report)
//
// Each directory also receives config.json, the resolved configuration.

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "slowrec/harness.hpp"
#include "slowrec/run_config.hpp"

namespace slowrec {

/// A stage's input artifacts are missing; the message names the stage that
/// has to run first.
class MissingPrerequisite : public std::runtime_error {
 public:
  MissingPrerequisite(const std::string& stage, const std::string& detail);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Corpus, split, ids and lookup structures shared by the stages.
struct Workspace {
  RunConfig config;  // seeds derived, backbone lengths resolved
  Corpus corpus;
  ItemEmbeddingTable embeddings;
  SplitSet split;
  SemanticIdMap ids;
  Vocabulary vocab;
  ItemCatalog catalog;
  NeighborIndex neighbors;
  /// Validation examples used while training (a seeded user sample).
  std::vector<Example> validation;
};

/// Loads the corpus and, when `with_ids`, the fitted semantic ids.
Workspace open_workspace(const RunConfig& config, bool with_ids = true);

void run_synth(const RunConfig& config);
void run_fit_tokenizer(const RunConfig& config);
void run_stage1(const RunConfig& config);
void run_stage2(const RunConfig& config);
void run_stage3(const RunConfig& config);

/// `stage` is popularity, stage1, stage2, stage3 or all (every stage whose
/// checkpoint exists, plus the baseline). Rewrites summary.csv.
void run_eval(const RunConfig& config, const std::string& stage = "all");

/// Writes curves.csv from the stages' metrics.jsonl files.
void run_report(const RunConfig& config);

/// fit-tokenizer, stage1, stage2, stage3, eval.
void run_pipeline(const RunConfig& config);

struct SummaryRow {
  std::string stage;
  std::string pool;
  RankingMetrics metrics;
  std::size_t fallbacks = 0;
};

/// Rows of summary.csv.
std::vector<SummaryRow> read_summary(const std::filesystem::path& path);

}  // namespace slowrec
