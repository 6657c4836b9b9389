#pragma once

#include <string>
#include <vector>

#include "gplab/attack.hpp"
#include "gplab/common.hpp"
#include "gplab/eval.hpp"
#include "gplab/pretrain.hpp"
#include "gplab/prompts.hpp"

namespace gplab::cli {

// One declarative experiment document. Every enum/range is validated at parse
// time, before any compute; the canonical hash is stamped on every result row.
struct ExperimentConfig {
  std::string dataset = "cora";
  std::string pretrain_dataset;  // cross-dataset scenario: pretrain side
  std::string backbone = "gcn";
  std::string pretrainer = "simgrace";
  std::string gpl = "graphprompt";
  std::string header = "prototype";
  std::string method = "tgpa";
  int hidden = 128;
  int shots = 100;
  int partition_k = 100;
  int svd_dim = 100;
  std::vector<std::string> scenarios = {"direct"};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::string out_dir = "out";
  std::string encoder_path;  // defaults to <out>/encoder.json
  double prune_threshold = 0.1;
  pre::PretrainCfg pretrain;
  atk::AttackConfig attack;          // scheme/header mirror gpl/header fields
  prompt::TrainCfg finetune;         // scenario fine-tuning stage
  std::string sweep_kind = "trigger_size";
  std::vector<double> sweep_values = {1, 5, 10, 15, 50};

  json to_json() const;
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::string& path);

  // FNV-1a over the canonical JSON dump, hex-encoded.
  std::string hash() const;
};

const std::vector<std::string>& known_scenarios();

// Subcommand bodies (shared by the binary and the tests). All return 0 and
// signal failure through the error taxonomy; the binary maps error types to
// exit codes.
int cmd_pretrain(const ExperimentConfig& cfg, const std::string& out_dir);
int cmd_attack(const ExperimentConfig& cfg, const std::string& out_dir);
int cmd_eval(const ExperimentConfig& cfg, const std::string& out_dir);
int cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir);
int cmd_report(const std::string& results_path, const std::string& out_dir);

// Results plumbing for report generation.
std::vector<json> load_results(const std::string& path);

struct ReportTables {
  std::string text;
  std::string csv;
};

// Deterministic "CA | ASR" tables (one decimal, per-seed rows averaged,
// missing cells rendered as an em dash), grouped per scenario with
// dataset x method rows and one column per prompting scheme.
ReportTables render_report(const std::vector<json>& rows);

// Full argv-level entry point: subcommand dispatch, flag parsing and the
// exit-code contract (0 ok, 2 config, 3 data, 4 runtime).
int run_cli(int argc, const char* const* argv);

}  // namespace gplab::cli
