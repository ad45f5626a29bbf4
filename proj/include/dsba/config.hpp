#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "dsba/data.hpp"
#include "dsba/defenses.hpp"
#include "dsba/evaluation.hpp"
#include "dsba/models.hpp"
#include "dsba/trainer.hpp"

namespace dsba {

struct EvaluationSettings {
  ProbeConfig probe;
  /// Test images used for the image-quality metrics.
  std::int64_t stealth_samples = 256;
  std::int64_t residual_examples = 8;
  double residual_gain = 10.0;
};

struct DefenseSettings {
  bool strip = true;
  bool separability = true;
  bool nc = true;
  int strip_overlays = 64;
  std::int64_t strip_samples = 128;
  std::int64_t separability_samples = 128;
  std::int64_t nc_samples = 64;
  int nc_steps = 200;
  double nc_lambda = 0.01;
  double nc_learning_rate = 0.1;
};

/// Attack settings tuned for the synthetic 32x32 desk-scale run.
TrainConfig desk_attack_defaults();
DatasetSpec desk_dataset_defaults();
PretrainConfig desk_pretrain_defaults();

/// Everything one experiment needs. A default-constructed value is the synthetic
/// desk-scale experiment. A single `seed` drives every stochastic component.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/desk";
  std::int64_t target_class = 0;
  DatasetSpec dataset = desk_dataset_defaults();
  EncoderArch encoder;
  PretrainConfig pretrain = desk_pretrain_defaults();
  TrainConfig attack = desk_attack_defaults();
  EvaluationSettings evaluation;
  DefenseSettings defenses;

  /// Copies of the module configs with the global seed and shared architecture applied.
  DatasetSpec dataset_spec() const;
  PretrainConfig pretrain_config() const;
  TrainConfig attack_config() const;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Strict parse: unknown keys and type mismatches raise ConfigError with the dotted
/// field path. Missing keys keep their defaults. An empty dataset root falls back to
/// the DSBA_DATA_ROOT environment variable.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& file);
/// Every field, nested by section.
nlohmann::json to_json(const RunConfig& config);

}  // namespace dsba
