#include "dsba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dsba/errors.hpp"
#include "dsba/warnings.hpp"

namespace dsba {

namespace F = torch::nn::functional;

namespace {

void require_same_images(const torch::Tensor& x, const torch::Tensor& y, const char* what) {
  if (x.dim() != 4 || !x.sizes().equals(y.sizes())) {
    std::ostringstream os;
    os << what << ": expected equal [N,C,H,W] shapes, got " << x.sizes() << " and " << y.sizes();
    throw PreconditionError(os.str());
  }
}

}  // namespace

torch::Tensor ssim_map(const torch::Tensor& x, const torch::Tensor& y) {
  require_same_images(x, y, "ssim");
  if (x.size(2) < kSsimWindow || x.size(3) < kSsimWindow)
    throw PreconditionError("ssim: images must be at least 7x7");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto pool = [](const torch::Tensor& t) { return F::avg_pool2d(t, F::AvgPool2dFuncOptions(kSsimWindow).stride(1)); };
  const auto mx = pool(x), my = pool(y);
  const auto sxx = pool(x * x) - mx * mx;
  const auto syy = pool(y * y) - my * my;
  const auto sxy = pool(x * y) - mx * my;
  return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
}

torch::Tensor ssim_tensor(const torch::Tensor& x, const torch::Tensor& y) { return ssim_map(x, y).mean(); }

double compute_ssim(const torch::Tensor& x, const torch::Tensor& y) {
  torch::NoGradGuard no_grad;
  const double v = ssim_tensor(x.to(torch::kFloat64), y.to(torch::kFloat64)).item<double>();
  return std::clamp(v, 0.0, 1.0);
}

double compute_psnr(const torch::Tensor& x, const torch::Tensor& y, double max_value) {
  require_same_images(x, y, "psnr");
  torch::NoGradGuard no_grad;
  const double mse = (x.to(torch::kFloat64) - y.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse == 0.0) return kPsnrInfinity;
  return 10.0 * std::log10(max_value * max_value / mse);
}

double lpips_proxy(const torch::Tensor& x, const torch::Tensor& y, const PerceptualTaps& taps) {
  require_same_images(x, y, "lpips");
  torch::NoGradGuard no_grad;
  auto& net = const_cast<PerceptualNet&>(taps.net);
  const auto fa = net->forward(x.to(torch::kFloat32));
  const auto fb = net->forward(y.to(torch::kFloat32));
  double total = 0.0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const auto na = fa[l] / (fa[l].norm(2, 1, true) + 1e-10);
    const auto nb = fb[l] / (fb[l].norm(2, 1, true) + 1e-10);
    total += (na - nb).pow(2).sum(1).mean().item<double>();
  }
  return total / static_cast<double>(fa.size());
}

// ---------------------------------------------------------------------------
// FSIM
// ---------------------------------------------------------------------------

namespace {

constexpr int kScales = 3;
constexpr int kOrientations = 4;
constexpr double kMinWavelength = 6.0;
constexpr double kMult = 2.0;
constexpr double kSigmaOnf = 0.55;
constexpr double kDThetaOnSigma = 1.2;
constexpr double kNoiseK = 2.0;
constexpr double kEpsilon = 1e-4;

torch::Tensor frequency_axis(std::int64_t n) {
  // Matches fftshift-free ordering of the DFT bins: 0, 1/n, ..., then negatives.
  return torch::fft::fftfreq(n, torch::TensorOptions().dtype(torch::kFloat64));
}

}  // namespace

torch::Tensor phase_congruency(const torch::Tensor& gray_in) {
  if (gray_in.dim() != 2) throw PreconditionError("phase_congruency expects a single [H,W] image");
  const auto gray = gray_in.to(torch::kFloat64);
  const auto rows = gray.size(0), cols = gray.size(1);
  const auto u = frequency_axis(cols).view({1, cols}).expand({rows, cols});
  const auto v = frequency_axis(rows).view({rows, 1}).expand({rows, cols});
  auto radius = torch::sqrt(u * u + v * v);
  radius.index_put_({0, 0}, 1.0);
  const auto theta = torch::atan2(-v, u);
  const auto sin_t = torch::sin(theta), cos_t = torch::cos(theta);
  const auto lowpass = 1.0 / (1.0 + torch::pow(radius / 0.45, 2 * 15));

  std::vector<torch::Tensor> log_gabor;
  for (int s = 0; s < kScales; ++s) {
    const double fo = 1.0 / (kMinWavelength * std::pow(kMult, s));
    auto g = torch::exp(-torch::pow(torch::log(radius / fo), 2) / (2.0 * std::pow(std::log(kSigmaOnf), 2)));
    g = g * lowpass;
    g.index_put_({0, 0}, 0.0);
    log_gabor.push_back(g);
  }

  const auto image_fft = torch::fft::fft2(gray);
  const double theta_sigma = std::numbers::pi / kOrientations / kDThetaOnSigma;
  auto energy_all = torch::zeros({rows, cols}, gray.options());
  auto an_all = torch::zeros({rows, cols}, gray.options());

  for (int o = 0; o < kOrientations; ++o) {
    const double angle = o * std::numbers::pi / kOrientations;
    const auto ds = sin_t * std::cos(angle) - cos_t * std::sin(angle);
    const auto dc = cos_t * std::cos(angle) + sin_t * std::sin(angle);
    const auto dtheta = torch::abs(torch::atan2(ds, dc));
    const auto spread = torch::exp(-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma));

    auto sum_e = torch::zeros_like(gray), sum_o = torch::zeros_like(gray), sum_an = torch::zeros_like(gray);
    std::vector<torch::Tensor> even, odd;
    double tau = 0.0;
    for (int s = 0; s < kScales; ++s) {
      const auto eo = torch::fft::ifft2(image_fft * (log_gabor[s] * spread));
      const auto e = torch::real(eo), od = torch::imag(eo);
      const auto an = torch::sqrt(e * e + od * od);
      sum_e += e;
      sum_o += od;
      sum_an += an;
      even.push_back(e);
      odd.push_back(od);
      if (s == 0) tau = an.flatten().median().item<double>() / std::sqrt(std::log(4.0));
    }
    const auto x_energy = torch::sqrt(sum_e * sum_e + sum_o * sum_o) + kEpsilon;
    const auto mean_e = sum_e / x_energy, mean_o = sum_o / x_energy;
    auto energy = torch::zeros_like(gray);
    for (int s = 0; s < kScales; ++s)
      energy += even[s] * mean_e + odd[s] * mean_o - torch::abs(even[s] * mean_o - odd[s] * mean_e);

    // Rayleigh noise model fitted to the smallest-scale amplitude.
    const double total_tau = tau * (1.0 - std::pow(1.0 / kMult, kScales)) / (1.0 - 1.0 / kMult);
    const double noise_mean = total_tau * std::sqrt(std::numbers::pi / 2.0);
    const double noise_sigma = total_tau * std::sqrt((4.0 - std::numbers::pi) / 2.0);
    const double threshold = std::max(noise_mean + kNoiseK * noise_sigma, kEpsilon);
    energy_all += (energy - threshold).clamp_min(0.0);
    an_all += sum_an;
  }
  return energy_all / (an_all + kEpsilon);
}

namespace {

torch::Tensor luminance_255(const torch::Tensor& img) {  // [C,H,W] in [0,1] -> [H,W] in [0,255]
  const auto x = img.to(torch::kFloat64) * 255.0;
  if (x.size(0) == 1) return x[0];
  if (x.size(0) != 3) throw PreconditionError("fsim supports 1- or 3-channel images");
  return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
}

torch::Tensor scharr_magnitude(const torch::Tensor& gray) {
  const auto opts = gray.options();
  const auto kx = torch::tensor({3.0, 0.0, -3.0, 10.0, 0.0, -10.0, 3.0, 0.0, -3.0}, opts).view({1, 1, 3, 3}) / 16.0;
  const auto ky = kx.transpose(2, 3);
  const auto g = gray.view({1, 1, gray.size(0), gray.size(1)});
  const auto gx = F::conv2d(g, kx, F::Conv2dFuncOptions().padding(1));
  const auto gy = F::conv2d(g, ky, F::Conv2dFuncOptions().padding(1));
  return torch::sqrt(gx * gx + gy * gy).view({gray.size(0), gray.size(1)});
}

double fsim_single(const torch::Tensor& a, const torch::Tensor& b) {
  constexpr double t1 = 0.85, t2 = 160.0;
  const auto ya = luminance_255(a), yb = luminance_255(b);
  const auto pc1 = phase_congruency(ya), pc2 = phase_congruency(yb);
  const auto g1 = scharr_magnitude(ya), g2 = scharr_magnitude(yb);
  const auto s_pc = (2 * pc1 * pc2 + t1) / (pc1 * pc1 + pc2 * pc2 + t1);
  const auto s_g = (2 * g1 * g2 + t2) / (g1 * g1 + g2 * g2 + t2);
  const auto pcm = torch::maximum(pc1, pc2);
  const double denom = pcm.sum().item<double>();
  if (denom <= 0.0) return (s_pc * s_g).mean().item<double>();
  return std::clamp((s_pc * s_g * pcm).sum().item<double>() / denom, 0.0, 1.0);
}

}  // namespace

double compute_fsim(const torch::Tensor& x, const torch::Tensor& y) {
  require_same_images(x, y, "fsim");
  torch::NoGradGuard no_grad;
  double total = 0.0;
  for (std::int64_t i = 0; i < x.size(0); ++i) total += fsim_single(x[i], y[i]);
  return total / static_cast<double>(x.size(0));
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

namespace {

torch::Tensor pooled_final_tap(const torch::Tensor& x, const PerceptualTaps& taps) {
  auto& net = const_cast<PerceptualNet&>(taps.net);
  std::vector<torch::Tensor> chunks;
  for (std::int64_t b = 0; b < x.size(0); b += 256) {
    const auto feats = net->forward(x.slice(0, b, std::min(b + 256, x.size(0))).to(torch::kFloat32));
    chunks.push_back(feats.back().mean({2, 3}).to(torch::kFloat64));
  }
  return torch::cat(chunks, 0);
}

double trace_sqrt_product(const torch::Tensor& c1, const torch::Tensor& c2) {
  // tr sqrt(C1 C2) = tr sqrt(sqrt(C1) C2 sqrt(C1)), whose argument is symmetric PSD.
  const auto [e1, v1] = torch::linalg_eigh(c1);
  const auto s1 = v1.matmul(torch::diag(e1.clamp_min(0.0).sqrt())).matmul(v1.t());
  auto m = s1.matmul(c2).matmul(s1);
  m = 0.5 * (m + m.t());
  const auto e = torch::linalg_eigvalsh(m);
  return e.clamp_min(0.0).sqrt().sum().item<double>();
}

bool covariance_is_sane(const torch::Tensor& c) {
  if (!torch::isfinite(c).all().item<bool>()) return false;
  const auto e = torch::linalg_eigvalsh(c);
  const double lo = e.min().item<double>(), hi = e.abs().max().item<double>();
  return lo >= -1e-8 * std::max(hi, 1.0);
}

}  // namespace

double frechet_distance(const torch::Tensor& fx_in, const torch::Tensor& fy_in) {
  if (fx_in.dim() != 2 || fy_in.dim() != 2 || fx_in.size(1) != fy_in.size(1))
    throw PreconditionError("frechet_distance: feature sets must be [n,d] with equal d");
  if (fx_in.size(0) < 2 || fy_in.size(0) < 2) throw PreconditionError("frechet_distance: need at least two samples per set");
  const auto fx = fx_in.to(torch::kFloat64), fy = fy_in.to(torch::kFloat64);
  const auto mx = fx.mean(0), my = fy.mean(0);
  auto cx = torch::cov(fx.t()), cy = torch::cov(fy.t());
  if (cx.dim() == 0) cx = cx.view({1, 1});
  if (cy.dim() == 0) cy = cy.view({1, 1});
  if (!covariance_is_sane(cx) || !covariance_is_sane(cy)) {
    warn("covariance square root ill-conditioned; adding 1e-6 to the diagonal");
    const auto reg = 1e-6 * torch::eye(cx.size(0), cx.options());
    cx = cx + reg;
    cy = cy + reg;
  }
  const double mean_term = (mx - my).pow(2).sum().item<double>();
  const double trace_term = (cx.trace() + cy.trace()).item<double>() - 2.0 * trace_sqrt_product(cx, cy);
  return std::max(0.0, mean_term + trace_term);
}

double compute_fid(const torch::Tensor& x, const torch::Tensor& y, const PerceptualTaps& taps) {
  if (x.size(0) < 2 || y.size(0) < 2) throw PreconditionError("fid: need at least two images per side");
  torch::NoGradGuard no_grad;
  return frechet_distance(pooled_final_tap(x, taps), pooled_final_tap(y, taps));
}

StealthSuite compute_stealth_suite(const torch::Tensor& x, const torch::Tensor& y, const PerceptualTaps& taps) {
  StealthSuite s;
  s.lpips = lpips_proxy(x, y, taps);
  s.fsim = compute_fsim(x, y);
  s.fid = compute_fid(x, y, taps);
  return s;
}

}  // namespace dsba
