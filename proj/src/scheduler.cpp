#include "dsba/scheduler.hpp"

#include <algorithm>
#include <cmath>

#include "dsba/errors.hpp"
#include "dsba/warnings.hpp"

namespace dsba {

namespace {

void require_positive(double value, const char* name) {
  if (!(value > 0.0) || !std::isfinite(value)) throw ConfigError(std::string(name) + " must be positive and finite");
}

void require_finite(double value, const char* name) {
  if (!std::isfinite(value)) throw ConfigError(std::string("schedule signal ") + name + " is not finite");
}

Triple normalized(const Triple& w, const Mask& enabled) {
  double sum = 0.0;
  for (int i = 0; i < 3; ++i)
    if (enabled[i]) sum += w[i];
  Triple out{0.0, 0.0, 0.0};
  if (sum <= 0.0) return out;
  for (int i = 0; i < 3; ++i)
    if (enabled[i]) out[i] = w[i] / sum;
  return out;
}

double clamp_weight(double w, const WeightState& s) { return std::clamp(w, s.clamp_low, s.clamp_high); }

}  // namespace

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

WeightState WeightState::initial(const Triple& outer_base, const Triple& inner_base, const Mask& outer_enabled,
                                 const Mask& inner_enabled) {
  WeightState s;
  s.outer_enabled = outer_enabled;
  s.inner_enabled = inner_enabled;
  s.omega_base = outer_base;
  s.omega_raw = outer_base;
  s.omega_memory = outer_base;
  s.omega = normalized(outer_base, s.outer_enabled);
  s.mu_base = inner_base;
  s.mu_raw = inner_base;
  s.mu = normalized(inner_base, s.inner_enabled);
  s.validate();
  return s;
}

void WeightState::set_inner_base(const Triple& base) {
  mu_base = base;
  mu_raw = base;
  mu = normalized(base, inner_enabled);
}

void WeightState::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (!(omega_base[i] >= 0.0) || !(mu_base[i] >= 0.0)) throw ConfigError("base weights must be nonnegative");
  }
  for (double eta : {eta_attack, eta_preserve, eta_dist, eta_inner})
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("adjustment rates must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(clamp_low > 0.0 && clamp_low < clamp_high)) throw ConfigError("clamp bounds must satisfy 0 < low < high");
}

WeightState update_outer_weights(const WeightState& state, const ScheduleSignals& sig) {
  require_positive(sig.tau_asr, "tau_asr");
  require_positive(sig.delta_preserve, "delta_preserve");
  require_positive(sig.d_threshold, "d_threshold");
  require_finite(sig.asr_current, "asr_current");
  require_finite(sig.asr_target, "asr_target");
  require_finite(sig.feature_diff, "feature_diff");
  require_finite(sig.js_current, "js_current");

  WeightState next = state;
  const double dist_arg = state.flip_distribution_direction
                              ? (sig.js_current - sig.d_threshold) / sig.d_threshold
                              : (sig.d_threshold - sig.js_current) / sig.d_threshold;
  next.omega_raw = {
      state.omega_base[0] * (1.0 + state.eta_attack * logistic((sig.asr_target - sig.asr_current) / sig.tau_asr)),
      state.omega_base[1] *
          (1.0 + state.eta_preserve * logistic((sig.feature_diff - sig.delta_preserve) / sig.delta_preserve)),
      state.omega_base[2] * (1.0 + state.eta_dist * logistic(dist_arg)),
  };
  Triple smoothed{};
  for (int i = 0; i < 3; ++i) {
    const double s = state.momentum * state.omega_memory[i] + (1.0 - state.momentum) * next.omega_raw[i];
    smoothed[i] = clamp_weight(s, state);
  }
  next.omega_memory = smoothed;
  next.omega = normalized(smoothed, state.outer_enabled);
  return next;
}

WeightState update_inner_weights(const WeightState& state, const ScheduleSignals& sig) {
  require_positive(sig.eff_loss_target, "eff_loss_target");
  require_positive(sig.ssim_target, "ssim_target");
  require_finite(sig.eff_loss_avg, "eff_loss_avg");
  require_finite(sig.ssim_current, "ssim_current");

  WeightState next = state;
  next.mu_raw = {
      state.mu_base[0] *
          (1.0 + state.eta_inner * logistic((sig.eff_loss_avg - sig.eff_loss_target) / sig.eff_loss_target)),
      state.mu_base[1] * (1.0 + state.eta_inner * logistic((sig.ssim_target - sig.ssim_current) / sig.ssim_target)),
      state.mu_base[2],
  };
  Triple clamped{};
  for (int i = 0; i < 3; ++i) clamped[i] = clamp_weight(next.mu_raw[i], state);
  next.mu = normalized(clamped, state.inner_enabled);
  return next;
}

bool metric_is_maximized(const std::string& metric) {
  if (metric == "ssim" || metric == "fsim" || metric == "psnr") return true;
  if (metric == "lpips" || metric == "fid") return false;
  throw ConfigError("unknown stealth metric '" + metric + "'");
}

std::map<std::string, double> schedule_stealth_weights(const std::map<std::string, double>& metric_values,
                                                       const std::map<std::string, double>& thresholds,
                                                       double training_progress) {
  if (!(training_progress >= 0.0 && training_progress <= 1.0))
    throw PreconditionError("training_progress must lie in [0, 1]");
  constexpr double kLow = 0.01, kHigh = 10.0;
  const double progress_factor = 1.0 + training_progress * 0.5;
  std::map<std::string, double> weights;
  for (const auto& [metric, value] : metric_values) {
    const auto it = thresholds.find(metric);
    if (it == thresholds.end()) throw ConfigError("no threshold for stealth metric '" + metric + "'");
    const double threshold = it->second;
    require_positive(threshold, ("threshold for " + metric).c_str());
    double ratio = 1.0;
    if (metric_is_maximized(metric)) {
      if (value < threshold) {
        if (value <= 0.0) {
          warn("stealth metric '" + metric + "' is zero; weight clamped to the upper bound");
          ratio = kHigh;
        } else {
          ratio = threshold / value;
        }
      }
    } else if (value > threshold) {
      ratio = value / threshold;
    }
    weights[metric] = std::clamp(ratio * progress_factor, kLow, kHigh);
  }
  return weights;
}

}  // namespace dsba
