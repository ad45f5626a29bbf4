#pragma once

#include <array>
#include <map>
#include <string>

namespace dsba {

using Triple = std::array<double, 3>;
using Mask = std::array<bool, 3>;

/// Live adaptive loss weights.
/// Outer slots: attack alignment, perceptual preservation, distribution alignment.
/// Inner slots: effectiveness, visual stealth, constraints.
struct WeightState {
  Triple omega{0.5, 0.3, 0.2};
  Triple omega_base{0.5, 0.3, 0.2};
  Triple mu{0.3, 0.5, 0.2};
  Triple mu_base{0.3, 0.5, 0.2};

  /// Last raw (sigmoid-gated) targets, before smoothing, clamping and normalization.
  Triple omega_raw{0.5, 0.3, 0.2};
  Triple mu_raw{0.3, 0.5, 0.2};
  /// Smoothed pre-normalization outer weights; seeds the next momentum step.
  Triple omega_memory{0.5, 0.3, 0.2};

  Mask outer_enabled{true, true, true};
  Mask inner_enabled{true, true, true};

  double eta_attack = 0.01;
  double eta_preserve = 0.01;
  double eta_dist = 0.01;
  double eta_inner = 0.01;
  double momentum = 0.9;
  double clamp_low = 0.01;
  double clamp_high = 10.0;
  /// Raise the distribution weight when divergence exceeds its threshold instead of
  /// when it falls below.
  bool flip_distribution_direction = false;

  /// Bases copied into live weights and memory; live weights normalized over enabled slots.
  static WeightState initial(const Triple& outer_base, const Triple& inner_base,
                             const Mask& outer_enabled = {true, true, true},
                             const Mask& inner_enabled = {true, true, true});

  /// Switches inner bases (phase change) and resets the inner weights to them.
  void set_inner_base(const Triple& base);

  /// Throws ConfigError for negative bases, nonpositive clamp bounds or rates outside [0,inf),
  /// momentum outside [0,1).
  void validate() const;
};

struct ScheduleSignals {
  double asr_current = 0.0;
  double asr_target = 0.95;
  double tau_asr = 0.1;
  double feature_diff = 0.0;
  double delta_preserve = 0.1;
  double js_current = 0.0;
  double d_threshold = 0.05;
  double eff_loss_avg = 0.0;
  double eff_loss_target = 0.1;
  double ssim_current = 1.0;
  double ssim_target = 0.9;
  double training_progress = 0.0;
};

double logistic(double x);

/// Momentum-smoothed, clamped, normalized outer update.
/// Throws ConfigError for nonpositive thresholds or non-finite signals.
WeightState update_outer_weights(const WeightState& state, const ScheduleSignals& signals);

/// Sigmoid-gated inner update without momentum; the constraint weight stays at its base.
WeightState update_inner_weights(const WeightState& state, const ScheduleSignals& signals);

/// True when a larger value of `metric` is better ("ssim", "fsim", "psnr").
/// "lpips" and "fid" are minimized. Anything else throws ConfigError.
bool metric_is_maximized(const std::string& metric);

/// Per-metric stealth weights scaled by how far each metric is on the wrong side of
/// its threshold, times 1 + 0.5 progress, clamped to [0.01, 10].
std::map<std::string, double> schedule_stealth_weights(const std::map<std::string, double>& metric_values,
                                                       const std::map<std::string, double>& thresholds,
                                                       double training_progress);

}  // namespace dsba
