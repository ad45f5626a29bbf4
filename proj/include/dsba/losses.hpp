#pragma once

#include <string>

#include <torch/torch.h>

#include "dsba/models.hpp"

namespace dsba {

class WeightState;

/// Sign convention for the sample-level effectiveness loss.
enum class EffectivenessSign {
  /// (1 - S) - lambda_temp exp(-(1 - S)/tau) + lambda_content ||G(x) - G(Aug x)||^2.
  Corrected,
  /// -[(1 - S) + lambda_temp exp(-(1 - S)/tau)] - lambda_content ||G(x) - G(Aug x)||^2.
  AsPrinted,
};

struct LossCoefficients {
  double lambda_clean = 1.0;  // weight of clean-feature preservation in the alignment loss
  double lambda_js = 1.0;
  double lambda_stat = 1.0;
  double lambda_temp = 0.5;
  double lambda_content = 1.0;
  double tau = 0.5;
  double alpha_ssim = 1.0;
  double beta_l2 = 0.1;
  double lambda_norm = 10.0;
  double lambda_sm = 0.1;
  double lambda_freq = 0.001;
  double epsilon = 8.0 / 255.0;
  EffectivenessSign effectiveness_sign = EffectivenessSign::Corrected;

  /// Throws ConfigError for negative coefficients or tau <= 0.
  void validate() const;
};

/// Scalar value of every loss term and both weighted totals.
struct LossBreakdown {
  double align = 0.0;
  double perc = 0.0;
  double dist = 0.0;
  double eff = 0.0;
  double ste = 0.0;
  double cons = 0.0;
  double outer = 0.0;
  double inner = 0.0;
};

/// Row-wise cosine similarity. Throws NormalizationError naming the first zero-norm row.
torch::Tensor rowwise_cosine(const torch::Tensor& a, const torch::Tensor& b, const char* a_name,
                             const char* b_name);

/// -mean cos(f'(x+delta), z_target) - lambda * mean cos(f'(x), f(x)).
torch::Tensor alignment_loss(const torch::Tensor& backdoor_feats, const torch::Tensor& targets,
                             const torch::Tensor& clean_feats_backdoor, const torch::Tensor& clean_feats_reference,
                             double lambda_clean);

/// Perceptual loss at one scale: sum_l alpha_l [1 - cos(phi_l(x), phi_l(x'))], batch mean.
torch::Tensor perceptual_loss_at_scale(const torch::Tensor& x, const torch::Tensor& x_poison,
                                       const PerceptualTaps& taps, double scale);

/// Multi-scale perceptual loss sum_s beta_s L^(s). Scales at which the deepest tap
/// would vanish are skipped with a warning and beta is renormalized over the rest.
/// With `multiscale == false` only scale 1 is used.
torch::Tensor perceptual_loss(const torch::Tensor& x, const torch::Tensor& x_poison, const PerceptualTaps& taps,
                              bool multiscale = true);

/// Per-dimension soft histograms (32 bins over the pooled range, Gaussian kernel of one
/// bin width), Jensen-Shannon divergence in nats averaged over dimensions.
torch::Tensor soft_histogram_js(const torch::Tensor& a, const torch::Tensor& b, std::int64_t bins = 32);

/// lambda_js JS + lambda_stat (||mu_c - mu_p||^2 + ||sigma_c - sigma_p||^2), population std.
torch::Tensor distribution_alignment_loss(const torch::Tensor& clean_feats, const torch::Tensor& poison_feats,
                                          double lambda_js, double lambda_stat);

torch::Tensor effectiveness_loss(const torch::Tensor& backdoor_feats, const torch::Tensor& targets,
                                 const torch::Tensor& trigger_orig, const torch::Tensor& trigger_aug,
                                 const LossCoefficients& coeffs);

/// alpha (1 - SSIM(x, clamp(x + delta))) + beta mean_i ||delta_i||^2.
torch::Tensor visual_stealth_loss(const torch::Tensor& x, const torch::Tensor& delta, double alpha_ssim,
                                  double beta_l2);

/// Anisotropic TV per sample: sum of |horizontal| + |vertical| neighbor differences. Shape [N].
torch::Tensor total_variation(const torch::Tensor& delta);
/// Sum of magnitudes of the unnormalized per-channel 2-D DFT, per sample. Shape [N].
torch::Tensor fft_l1(const torch::Tensor& delta);

/// mean_i [lambda_norm max(0, ||delta_i||_inf - eps) + lambda_sm TV + lambda_freq FFT-L1].
torch::Tensor constraint_loss(const torch::Tensor& delta, const LossCoefficients& coeffs);

struct OuterTerms {
  torch::Tensor align, perc, dist;
};
struct InnerTerms {
  torch::Tensor eff, ste, cons;
};

/// omega_1 L_align + omega_2 L_perc + omega_3 L_dist.
double outer_total(const LossBreakdown& components, const WeightState& weights);
torch::Tensor outer_total(const OuterTerms& terms, const WeightState& weights);
/// mu_1 L_eff + mu_2 L_ste + mu_3 L_cons.
double inner_total(const LossBreakdown& components, const WeightState& weights);
torch::Tensor inner_total(const InnerTerms& terms, const WeightState& weights);

}  // namespace dsba
