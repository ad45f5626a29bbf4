#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dsba/config.hpp"

namespace dsba {

enum class Stage { Pretrain, Attack, Evaluate, Defend, Report };

const char* to_string(Stage stage);
/// "all" expands to every stage in dependency order. Throws ConfigError for unknown names.
std::vector<Stage> parse_command(const std::string& command);

struct StageOutcome {
  Stage stage;
  bool cached = false;
  std::string key;
};

/// Run directory layout under `config.output_dir`:
///   config.json                      config snapshot
///   log.jsonl                        one record per attack epoch
///   pretrain/encoder.*               clean encoder
///   attack/best/*, attack/last/*     backdoor encoder and generator checkpoints
///   evaluate/metrics.json            attack and image-quality metrics
///   defend/defenses.json             defense scores
///   report.json                      merged metrics report
///   plots/*.png
/// Each stage directory holds stage.json with a content hash of its inputs; a stage
/// whose hash matches is skipped.
class Experiment {
 public:
  explicit Experiment(RunConfig config);

  const RunConfig& config() const { return config_; }
  const std::filesystem::path& dir() const { return config_.output_dir; }

  /// Runs the stages of `command`. A stage whose upstream output is missing or stale
  /// throws DependencyError naming the upstream stage, unless that stage is part of
  /// the same command.
  std::vector<StageOutcome> run(const std::string& command);
  StageOutcome run_stage(Stage stage);

  /// Content hash of the inputs of `stage`.
  std::string stage_key(Stage stage) const;
  std::filesystem::path stage_dir(Stage stage) const;
  std::filesystem::path plots_dir() const { return dir() / "plots"; }
  std::filesystem::path report_path() const { return dir() / "report.json"; }

 private:
  void require(Stage upstream) const;
  bool is_current(Stage stage) const;
  void mark_done(Stage stage) const;

  void pretrain();
  void attack();
  void evaluate();
  void defend();
  void report();

  RunConfig config_;
};

}  // namespace dsba
