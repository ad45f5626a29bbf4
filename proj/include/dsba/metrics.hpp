#pragma once

#include <limits>

#include <torch/torch.h>

#include "dsba/models.hpp"

namespace dsba {

/// Side of the square SSIM window.
inline constexpr std::int64_t kSsimWindow = 7;
/// PSNR reported for identical images.
inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

/// Local SSIM over every valid 7x7 window (uniform weights, population statistics,
/// k1 = 0.01, k2 = 0.03, dynamic range 1). Shape [N, C, H-6, W-6]; differentiable.
/// Throws PreconditionError for images smaller than the window or mismatched shapes.
torch::Tensor ssim_map(const torch::Tensor& x, const torch::Tensor& y);

/// Mean of `ssim_map` over windows, channels and batch (differentiable scalar).
torch::Tensor ssim_tensor(const torch::Tensor& x, const torch::Tensor& y);

/// Mean SSIM as a reported metric, clamped into [0,1].
double compute_ssim(const torch::Tensor& x, const torch::Tensor& y);

/// 10 log10(max^2 / MSE); +infinity when MSE is zero.
double compute_psnr(const torch::Tensor& x, const torch::Tensor& y, double max_value = 1.0);

/// Uncalibrated LPIPS-style distance: for each tap, channel-normalize both feature
/// maps, take the squared difference summed over channels, average spatially; then
/// average over taps and batch.
double lpips_proxy(const torch::Tensor& x, const torch::Tensor& y, const PerceptualTaps& taps);

/// Luminance FSIM (log-Gabor phase congruency with 3 scales x 4 orientations plus
/// Scharr gradient magnitude), averaged over the batch. In [0,1].
double compute_fsim(const torch::Tensor& x, const torch::Tensor& y);

/// Phase congruency map of a single grayscale image [H, W] scaled to [0,255].
torch::Tensor phase_congruency(const torch::Tensor& gray);

/// Frechet distance between Gaussian fits of spatially pooled final-tap features.
/// Needs at least two images per side.
double compute_fid(const torch::Tensor& x, const torch::Tensor& y, const PerceptualTaps& taps);

/// Frechet distance between two feature sets [n, d] (rows are samples).
double frechet_distance(const torch::Tensor& features_x, const torch::Tensor& features_y);

struct StealthSuite {
  double lpips = 0.0;
  double fsim = 1.0;
  double fid = 0.0;
};

StealthSuite compute_stealth_suite(const torch::Tensor& x, const torch::Tensor& y, const PerceptualTaps& taps);

}  // namespace dsba
