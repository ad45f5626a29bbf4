#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "dsba/data.hpp"
#include "dsba/losses.hpp"
#include "dsba/models.hpp"
#include "dsba/scheduler.hpp"

namespace dsba {

enum class Phase { Foundation, CoOptimization };
enum class Branch { Generator, Encoder };
enum class Decision { Continue, Converged, EarlyStop };

const char* to_string(Phase phase);
const char* to_string(Branch branch);
const char* to_string(Decision decision);

/// Names accepted by the loss-ablation switch.
inline constexpr const char* kLossNames[6] = {"align", "perc", "dist", "eff", "ste", "cons"};

struct ConvergenceConstants {
  double asr_gate = 0.9;
  double ssim_gate = 0.95;
  double feat_gate = 0.1;
  double stable_eps = 0.01;
  int stable_epochs = 10;
  double plateau_eps = 0.005;
  int plateau_epochs = 15;
};

struct SchedulerConfig {
  bool adaptive = true;
  Triple outer_base{0.5, 0.3, 0.2};
  Triple phase1_inner_base{0.3, 0.5, 0.2};
  Triple phase2_inner_base{0.5, 0.3, 0.2};
  double eta_attack = 0.01;
  double eta_preserve = 0.01;
  double eta_dist = 0.01;
  double eta_inner = 0.01;
  double momentum = 0.9;
  double asr_target = 0.95;
  double tau_asr = 0.1;
  double delta_preserve = 0.1;
  double d_threshold = 0.05;
  double eff_loss_target = 0.1;
  double ssim_target = 0.9;
  bool flip_distribution_direction = false;
};

struct TrainConfig {
  int total_epochs = 30;
  double phase1_fraction = 0.5;
  int alternation_modulus = 4;
  std::int64_t batch_size = 64;
  /// Optimizer steps per epoch; 0 means one pass over the shadow set.
  int steps_per_epoch = 0;
  double generator_lr = 1e-3;
  double encoder_lr = 1e-3;
  double encoder_momentum = 0.0;
  /// "sgd" or "adam".
  std::string encoder_optimizer = "sgd";
  /// Size of the fixed slice of the clean pool used for per-epoch signals.
  std::int64_t validation_size = 128;
  /// Size of the fixed shadow batch on which every loss term is logged each epoch.
  std::int64_t monitor_size = 32;
  bool multiscale_perceptual = true;
  ConvergenceConstants convergence;
  SchedulerConfig scheduler;
  LossCoefficients coefficients;
  GeneratorArch generator;
  PoisonSchedule poison;
  AugmentPolicy trigger_augment = AugmentPolicy::light();
  std::vector<std::string> disabled_losses;
  std::uint64_t seed = 0;
  /// Polled after every epoch; returning true stops training early.
  std::function<bool()> resource_limit;

  /// Epoch index (1-based) of the last foundation epoch: ceil(total * phase1_fraction).
  int phase1_end() const;
  bool loss_enabled(const std::string& name) const;
  /// Throws ConfigError describing the first invalid field.
  void validate() const;
};

/// What one epoch does. `counter` is the alternation counter after the epoch.
struct EpochPlan {
  Phase phase;
  Branch branch;
  int counter;
};

/// Phase I trains the generator. In Phase II the counter is incremented first; a
/// nonzero residue modulo `alternation_modulus` trains the generator, zero trains
/// the encoder and resets the counter.
EpochPlan plan_epoch(int epoch, int counter, const TrainConfig& config);

struct MetricHistory {
  std::vector<double> asr;
  std::vector<double> ssim;
  std::vector<double> feature_diff;

  void push(double asr_value, double ssim_value, double feature_diff_value);
  std::size_t size() const { return asr.size(); }
};

struct TrainState {
  int epoch = 0;
  Phase phase = Phase::Foundation;
  int alternation_counter = 0;
  WeightState weights;
  /// Co-optimization epochs only; the stopping rules read these.
  MetricHistory history;
  int best_epoch = 0;
  int last_epoch = 0;
};

/// Stopping decision from the co-optimization history. `resource_limit_hit` comes
/// from the pluggable resource callback.
Decision check_convergence(const TrainState& state, const TrainConfig& config, bool resource_limit_hit = false);

struct EpochMeasurements {
  double asr = 0.0;
  double ssim = 1.0;
  double psnr = 0.0;
  double feature_diff = 0.0;
  double js = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  Phase phase = Phase::Foundation;
  Branch branch = Branch::Generator;
  int alternation_counter = 0;
  double rho = 0.0;
  std::int64_t poisoned_per_batch = 0;
  int steps = 0;
  double mean_step_loss = 0.0;
  LossBreakdown losses;
  WeightState weights;
  ScheduleSignals signals;
  EpochMeasurements measured;
  std::string encoder_checksum;
  std::string generator_checksum;
  Decision decision = Decision::Continue;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  /// "completed", "converged", "early_stop" or "diverged".
  std::string stop_reason = "completed";
  int best_epoch = 0;
  /// Signals measured before the first epoch.
  EpochMeasurements initial;
};

nlohmann::json to_json(const LossBreakdown& losses);
nlohmann::json to_json(const WeightState& weights);
nlohmann::json to_json(const EpochRecord& record);

struct TrainResult {
  EncoderParams backdoor;
  GeneratorParams generator;
  EncoderParams best_backdoor;
  GeneratorParams best_generator;
  TrainingLog log;
};

/// Every loss term on one poisoned batch, no gradients. `clean` and `x` may coincide.
LossBreakdown evaluate_losses(const EncoderParams& clean_encoder, const EncoderParams& backdoor,
                              const GeneratorParams& generator, const torch::Tensor& x,
                              const torch::Tensor& target_feature, const PerceptualTaps& taps,
                              const WeightState& weights, const TrainConfig& config, std::uint64_t augment_seed);

/// Nearest-centroid attack success: fraction of triggered `images` whose backdoor
/// feature is closest (cosine) to the target class centroid of `labeled`.
double centroid_attack_success(const EncoderParams& backdoor, const GeneratorParams& generator,
                               const torch::Tensor& images, const ImageBatch& labeled, std::int64_t target_class);

/// Mean L2 distance between unit-normalized backdoor and clean features.
double normalized_feature_drift(const EncoderParams& backdoor, const EncoderParams& clean_encoder,
                                const torch::Tensor& images);

/// Two-phase alternating co-training of the trigger generator and the backdoor encoder.
/// The clean encoder is never modified. Throws PreconditionError when refs carry no
/// target feature.
TrainResult run_attack_training(const EncoderParams& clean_encoder, const DatasetSplit& data,
                                const ReferenceSet& refs, const TrainConfig& config,
                                const PerceptualTaps& taps = PerceptualTaps::make());

}  // namespace dsba
