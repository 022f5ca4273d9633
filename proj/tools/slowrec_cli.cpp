// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command line driver for the training stages.
//
//   slowrec <verb> [--config run.json] [--seed N] [--out DIR] [--precision 32|64] [--stage NAME]
//
// Exit codes: 0 success, 1 config error, 2 missing prerequisite, 3 numerical failure.

#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "slowrec/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 1, kMissing = 2, kNumerical = 3 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slowrec: generative recommendation with latent reasoning"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> precision;
  std::string stage = "all";

  app.add_option("--config", config_path, "run configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "run seed; fixes every random draw");
  app.add_option("--out", out, "output directory");
  app.add_option("--precision", precision, "storage precision in bits")->check(CLI::IsMember({32, 64}));
  app.add_option("--stage", stage, "stage to evaluate: popularity, stage1, stage2, stage3 or all");
  app.fallthrough();

  slowrec::RunConfig config;
  const std::map<std::string, std::function<void()>> verbs{
      {"synth", [&] { slowrec::run_synth(config); }},
      {"fit-tokenizer", [&] { slowrec::run_fit_tokenizer(config); }},
      {"stage1", [&] { slowrec::run_stage1(config); }},
      {"stage2", [&] { slowrec::run_stage2(config); }},
      {"stage3", [&] { slowrec::run_stage3(config); }},
      {"eval", [&] { slowrec::run_eval(config, stage); }},
      {"report", [&] { slowrec::run_report(config); }},
      {"run", [&] { slowrec::run_pipeline(config); }},
  };
  const std::map<std::string, std::string> help{
      {"synth", "write a synthetic corpus to <out>/data"},
      {"fit-tokenizer", "train the residual quantizer and assign semantic ids"},
      {"stage1", "retrieval-augmented pretraining"},
      {"stage2", "reasoning-trace annotation and fine-tuning"},
      {"stage3", "reinforcement learning on the reasoning policy"},
      {"eval", "test metrics of the selected stage(s); writes summary.csv"},
      {"report", "training curves as CSV"},
      {"run", "fit-tokenizer, stage1, stage2, stage3 and eval in one go"},
  };
  for (const auto& [name, _] : verbs) app.add_subcommand(name, help.at(name));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    config = config_path.empty() ? slowrec::default_run_config() : slowrec::load_run_config(config_path);
    if (seed) config.seed = *seed;
    if (out) config.out = *out;
    if (precision) config.precision = *precision;
    slowrec::validate(config);
    verbs.at(app.get_subcommands().front()->get_name())();
  } catch (const slowrec::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfig;
  } catch (const slowrec::DataError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kConfig;
  } catch (const slowrec::MissingPrerequisite& e) {
    fmt::print(stderr, "missing prerequisite: {}\n", e.what());
    return kMissing;
  } catch (const slowrec::num::NumericalError& e) {
    fmt::print(stderr, "numerical failure: {}\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kConfig;
  }
  return kOk;
}
