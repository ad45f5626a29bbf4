#include "dsba/losses.hpp"

#include <cmath>
#include <sstream>

#include "dsba/errors.hpp"
#include "dsba/metrics.hpp"
#include "dsba/scheduler.hpp"
#include "dsba/warnings.hpp"

namespace dsba {

namespace F = torch::nn::functional;

void LossCoefficients::validate() const {
  const std::pair<const char*, double> fields[] = {
      {"lambda_clean", lambda_clean}, {"lambda_js", lambda_js},     {"lambda_stat", lambda_stat},
      {"lambda_temp", lambda_temp},   {"lambda_content", lambda_content}, {"alpha_ssim", alpha_ssim},
      {"beta_l2", beta_l2},           {"lambda_norm", lambda_norm}, {"lambda_sm", lambda_sm},
      {"lambda_freq", lambda_freq},   {"epsilon", epsilon},
  };
  for (const auto& [name, value] : fields)
    if (!(value >= 0.0) || !std::isfinite(value)) throw ConfigError(std::string("losses.") + name + " must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("losses.tau must be > 0");
}

namespace {

void require_rows_match(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(0) != b.size(0) || a.size(1) != b.size(1)) {
    std::ostringstream os;
    os << what << ": paired feature matrices must have equal shape, got " << a.sizes() << " and " << b.sizes();
    throw PreconditionError(os.str());
  }
}

torch::Tensor check_row_norms(const torch::Tensor& m, const char* name) {
  auto norms = m.norm(2, 1);
  auto zero = (norms.detach() == 0).nonzero();
  if (zero.size(0) > 0)
    throw NormalizationError(std::string("zero-norm row ") + std::to_string(zero[0][0].item<std::int64_t>()) +
                             " in " + name);
  return norms;
}

}  // namespace

torch::Tensor rowwise_cosine(const torch::Tensor& a, const torch::Tensor& b, const char* a_name,
                             const char* b_name) {
  const auto na = check_row_norms(a, a_name);
  const auto nb = check_row_norms(b, b_name);
  return (a * b).sum(1) / (na * nb);
}

torch::Tensor alignment_loss(const torch::Tensor& backdoor_feats, const torch::Tensor& targets,
                             const torch::Tensor& clean_feats_backdoor, const torch::Tensor& clean_feats_reference,
                             double lambda_clean) {
  require_rows_match(backdoor_feats, targets, "alignment_loss");
  require_rows_match(clean_feats_backdoor, clean_feats_reference, "alignment_loss");
  const auto attack = rowwise_cosine(backdoor_feats, targets, "backdoor features", "target features").mean();
  const auto keep =
      rowwise_cosine(clean_feats_backdoor, clean_feats_reference, "backdoor-encoder clean features",
                     "clean-encoder features")
          .mean();
  return -attack - lambda_clean * keep;
}

namespace {

torch::Tensor resize(const torch::Tensor& x, double scale) {
  if (scale == 1.0) return x;
  const auto h = static_cast<std::int64_t>(std::floor(static_cast<double>(x.size(2)) * scale));
  const auto w = static_cast<std::int64_t>(std::floor(static_cast<double>(x.size(3)) * scale));
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

bool scale_fits(const torch::Tensor& x, double scale, std::int64_t min_side) {
  const auto side = std::min(x.size(2), x.size(3));
  return static_cast<std::int64_t>(std::floor(static_cast<double>(side) * scale)) >= min_side;
}

}  // namespace

torch::Tensor perceptual_loss_at_scale(const torch::Tensor& x, const torch::Tensor& x_poison,
                                       const PerceptualTaps& taps, double scale) {
  require_same_shape(x, x_poison, "perceptual_loss");
  if (!scale_fits(x, scale, taps.min_input_size()))
    throw PreconditionError("image too small for the perceptual network at scale " + std::to_string(scale));
  auto& net = const_cast<PerceptualNet&>(taps.net);
  const auto fa = net->forward(resize(x, scale));
  const auto fb = net->forward(resize(x_poison, scale));
  auto total = torch::zeros({}, x.options());
  for (std::size_t l = 0; l < fa.size(); ++l) {
    if (taps.alpha[l] == 0.0) continue;
    const auto cos = F::cosine_similarity(fa[l].flatten(1), fb[l].flatten(1),
                                          F::CosineSimilarityFuncOptions().dim(1).eps(1e-12));
    total = total + taps.alpha[l] * (1.0 - cos).mean();
  }
  return total;
}

torch::Tensor perceptual_loss(const torch::Tensor& x, const torch::Tensor& x_poison, const PerceptualTaps& taps,
                              bool multiscale) {
  require_same_shape(x, x_poison, "perceptual_loss");
  if (!multiscale) return perceptual_loss_at_scale(x, x_poison, taps, 1.0);

  std::vector<std::size_t> usable;
  double beta_sum = 0.0;
  for (std::size_t s = 0; s < taps.scales.size(); ++s) {
    if (!scale_fits(x, taps.scales[s], taps.min_input_size())) {
      warn("perceptual scale " + std::to_string(taps.scales[s]) + " skipped: " + std::to_string(x.size(2)) + "x" +
           std::to_string(x.size(3)) + " input is below the deepest tap's extent");
      continue;
    }
    usable.push_back(s);
    beta_sum += taps.beta[s];
  }
  if (usable.empty() || beta_sum <= 0.0)
    throw PreconditionError("no perceptual scale fits the input size");
  auto total = torch::zeros({}, x.options());
  for (auto s : usable) {
    const double beta = taps.beta[s] / beta_sum;
    if (beta == 0.0) continue;
    total = total + beta * perceptual_loss_at_scale(x, x_poison, taps, taps.scales[s]);
  }
  return total;
}

torch::Tensor soft_histogram_js(const torch::Tensor& a, const torch::Tensor& b, std::int64_t bins) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1))
    throw PreconditionError("soft_histogram_js: feature matrices must share their feature dimension");
  if (a.size(0) == 0 || b.size(0) == 0) throw PreconditionError("soft_histogram_js: empty batch");
  const auto pooled = torch::cat({a, b}, 0).detach();
  const auto lo = std::get<0>(pooled.min(0));                            // [d]
  const auto hi = std::get<0>(pooled.max(0));                            // [d]
  const auto width = ((hi - lo) / static_cast<double>(bins)).clamp_min(1e-6);  // [d]
  const auto k = torch::arange(bins, a.options()).add(0.5);             // [K]
  const auto centers = lo.unsqueeze(1) + width.unsqueeze(1) * k.unsqueeze(0);  // [d, K]

  const auto hist = [&](const torch::Tensor& m) {
    const auto z = (m.unsqueeze(2) - centers.unsqueeze(0)) / width.view({1, -1, 1});  // [n, d, K]
    auto w = torch::exp(-0.5 * z * z);
    w = w / w.sum(2, true);
    return w.mean(0);  // [d, K]
  };
  const auto p = hist(a);
  const auto q = hist(b);
  const auto m = 0.5 * (p + q);
  constexpr double kEps = 1e-12;
  const auto kl_pm = (p * (torch::log(p + kEps) - torch::log(m + kEps))).sum(1);
  const auto kl_qm = (q * (torch::log(q + kEps) - torch::log(m + kEps))).sum(1);
  return (0.5 * (kl_pm + kl_qm)).mean();
}

torch::Tensor distribution_alignment_loss(const torch::Tensor& clean_feats, const torch::Tensor& poison_feats,
                                          double lambda_js, double lambda_stat) {
  if (clean_feats.dim() != 2 || poison_feats.dim() != 2 || clean_feats.size(1) != poison_feats.size(1))
    throw PreconditionError("distribution_alignment_loss: feature matrices must share their feature dimension");
  if (clean_feats.size(0) < 2 || poison_feats.size(0) < 2)
    throw PreconditionError("distribution_alignment_loss: batch statistics need at least two samples per side");
  auto total = torch::zeros({}, clean_feats.options());
  if (lambda_js != 0.0) total = total + lambda_js * soft_histogram_js(clean_feats, poison_feats);
  if (lambda_stat != 0.0) {
    const auto mu_c = clean_feats.mean(0), mu_p = poison_feats.mean(0);
    const auto sd_c = torch::sqrt(clean_feats.var(0, /*unbiased=*/false) + 1e-12);
    const auto sd_p = torch::sqrt(poison_feats.var(0, /*unbiased=*/false) + 1e-12);
    total = total + lambda_stat * ((mu_c - mu_p).pow(2).sum() + (sd_c - sd_p).pow(2).sum());
  }
  return total;
}

torch::Tensor effectiveness_loss(const torch::Tensor& backdoor_feats, const torch::Tensor& targets,
                                 const torch::Tensor& trigger_orig, const torch::Tensor& trigger_aug,
                                 const LossCoefficients& coeffs) {
  require_rows_match(backdoor_feats, targets, "effectiveness_loss");
  require_same_shape(trigger_orig, trigger_aug, "effectiveness_loss");
  if (trigger_orig.size(0) != backdoor_feats.size(0))
    throw PreconditionError("effectiveness_loss: trigger batch and feature rows differ in count");
  if (!(coeffs.tau > 0.0)) throw PreconditionError("effectiveness_loss: tau must be > 0");
  const auto dist = 1.0 - rowwise_cosine(backdoor_feats, targets, "backdoor features", "target features");
  const auto temp = coeffs.lambda_temp * torch::exp(-dist / coeffs.tau);
  const auto content = coeffs.lambda_content * (trigger_orig - trigger_aug).pow(2).flatten(1).sum(1);
  if (coeffs.effectiveness_sign == EffectivenessSign::AsPrinted) return (-(dist + temp) - content).mean();
  return (dist - temp + content).mean();
}

torch::Tensor visual_stealth_loss(const torch::Tensor& x, const torch::Tensor& delta, double alpha_ssim,
                                  double beta_l2) {
  require_same_shape(x, delta, "visual_stealth_loss");
  auto total = beta_l2 * delta.pow(2).flatten(1).sum(1).mean();
  if (alpha_ssim != 0.0) total = total + alpha_ssim * (1.0 - ssim_tensor(x, (x + delta).clamp(0.0, 1.0)));
  return total;
}

torch::Tensor total_variation(const torch::Tensor& delta) {
  const auto dh = (delta.slice(3, 1) - delta.slice(3, 0, -1)).abs().flatten(1).sum(1);
  const auto dv = (delta.slice(2, 1) - delta.slice(2, 0, -1)).abs().flatten(1).sum(1);
  return dh + dv;
}

torch::Tensor fft_l1(const torch::Tensor& delta) {
  return torch::fft::fft2(delta).abs().flatten(1).sum(1);
}

torch::Tensor constraint_loss(const torch::Tensor& delta, const LossCoefficients& coeffs) {
  if (delta.dim() != 4) throw PreconditionError("constraint_loss: perturbation batch must be [N,C,H,W]");
  const auto linf = delta.abs().flatten(1).amax(1);
  auto per_sample = coeffs.lambda_norm * (linf - coeffs.epsilon).clamp_min(0.0);
  if (coeffs.lambda_sm != 0.0) per_sample = per_sample + coeffs.lambda_sm * total_variation(delta);
  if (coeffs.lambda_freq != 0.0) per_sample = per_sample + coeffs.lambda_freq * fft_l1(delta);
  return per_sample.mean();
}

namespace {
void require_finite(std::initializer_list<double> values) {
  for (double v : values)
    if (!std::isfinite(v)) throw TrainingDivergedError("non-finite loss component", 0);
}
}  // namespace

double outer_total(const LossBreakdown& c, const WeightState& w) {
  require_finite({c.align, c.perc, c.dist});
  return w.omega[0] * c.align + w.omega[1] * c.perc + w.omega[2] * c.dist;
}

double inner_total(const LossBreakdown& c, const WeightState& w) {
  require_finite({c.eff, c.ste, c.cons});
  return w.mu[0] * c.eff + w.mu[1] * c.ste + w.mu[2] * c.cons;
}

torch::Tensor outer_total(const OuterTerms& t, const WeightState& w) {
  return w.omega[0] * t.align + w.omega[1] * t.perc + w.omega[2] * t.dist;
}

torch::Tensor inner_total(const InnerTerms& t, const WeightState& w) {
  return w.mu[0] * t.eff + w.mu[1] * t.ste + w.mu[2] * t.cons;
}

}  // namespace dsba
