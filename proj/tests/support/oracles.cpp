#include "oracles.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace dsba::oracle {

namespace {

std::vector<double> row(const torch::Tensor& m, std::int64_t i) {
  const auto r = m[i].flatten().to(torch::kFloat64).contiguous();
  return {r.data_ptr<double>(), r.data_ptr<double>() + r.numel()};
}

double cos_vec(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

}  // namespace

double cosine(const torch::Tensor& a, const torch::Tensor& b) {
  return cos_vec(row(a.unsqueeze(0), 0), row(b.unsqueeze(0), 0));
}

double alignment(const torch::Tensor& bd, const torch::Tensor& tgt, const torch::Tensor& cbd,
                 const torch::Tensor& cref, double lambda) {
  double attack = 0.0, keep = 0.0;
  for (std::int64_t i = 0; i < bd.size(0); ++i) attack += cos_vec(row(bd, i), row(tgt, i));
  for (std::int64_t i = 0; i < cbd.size(0); ++i) keep += cos_vec(row(cbd, i), row(cref, i));
  return -attack / static_cast<double>(bd.size(0)) - lambda * keep / static_cast<double>(cbd.size(0));
}

double perceptual(const torch::Tensor& x, const torch::Tensor& xp, const PerceptualTaps& taps, bool multiscale) {
  torch::NoGradGuard no_grad;
  auto& net = const_cast<PerceptualNet&>(taps.net);
  const std::vector<double> scales = multiscale ? taps.scales : std::vector<double>{1.0};
  const std::vector<double> betas = multiscale ? taps.beta : std::vector<double>{1.0};
  double total = 0.0;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    auto rx = x, rp = xp;
    if (scales[s] != 1.0) {
      const auto side = static_cast<std::int64_t>(std::floor(static_cast<double>(x.size(2)) * scales[s]));
      const auto opts = torch::nn::functional::InterpolateFuncOptions()
                            .size(std::vector<std::int64_t>{side, side})
                            .mode(torch::kBilinear)
                            .align_corners(false);
      rx = torch::nn::functional::interpolate(x, opts);
      rp = torch::nn::functional::interpolate(xp, opts);
    }
    const auto fa = net->forward(rx), fb = net->forward(rp);
    double at_scale = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
      double mean = 0.0;
      for (std::int64_t i = 0; i < x.size(0); ++i) mean += 1.0 - cos_vec(row(fa[l], i), row(fb[l], i));
      at_scale += taps.alpha[l] * mean / static_cast<double>(x.size(0));
    }
    total += betas[s] * at_scale;
  }
  return total;
}

double js_soft_histogram(const torch::Tensor& a, const torch::Tensor& b, int bins) {
  const auto d = a.size(1);
  double total = 0.0;
  for (std::int64_t j = 0; j < d; ++j) {
    std::vector<double> va, vb;
    for (std::int64_t i = 0; i < a.size(0); ++i) va.push_back(a[i][j].item<double>());
    for (std::int64_t i = 0; i < b.size(0); ++i) vb.push_back(b[i][j].item<double>());
    double lo = va[0], hi = va[0];
    for (double v : va) lo = std::min(lo, v), hi = std::max(hi, v);
    for (double v : vb) lo = std::min(lo, v), hi = std::max(hi, v);
    const double width = std::max((hi - lo) / bins, 1e-6);
    const auto hist = [&](const std::vector<double>& vals) {
      std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
      for (double v : vals) {
        std::vector<double> w(static_cast<std::size_t>(bins));
        double sum = 0.0;
        for (int k = 0; k < bins; ++k) {
          const double z = (v - (lo + width * (k + 0.5))) / width;
          w[static_cast<std::size_t>(k)] = std::exp(-0.5 * z * z);
          sum += w[static_cast<std::size_t>(k)];
        }
        for (int k = 0; k < bins; ++k) h[static_cast<std::size_t>(k)] += w[static_cast<std::size_t>(k)] / sum / static_cast<double>(vals.size());
      }
      return h;
    };
    const auto p = hist(va), q = hist(vb);
    double js = 0.0;
    for (int k = 0; k < bins; ++k) {
      const double pk = p[static_cast<std::size_t>(k)], qk = q[static_cast<std::size_t>(k)];
      const double m = 0.5 * (pk + qk);
      js += 0.5 * pk * (std::log(pk + 1e-12) - std::log(m + 1e-12)) + 0.5 * qk * (std::log(qk + 1e-12) - std::log(m + 1e-12));
    }
    total += js;
  }
  return total / static_cast<double>(d);
}

double distribution(const torch::Tensor& c, const torch::Tensor& p, double lambda_js, double lambda_stat) {
  double moments = 0.0;
  for (std::int64_t j = 0; j < c.size(1); ++j) {
    const auto stats = [&](const torch::Tensor& m) {
      double mean = 0.0, sq = 0.0;
      const auto n = static_cast<double>(m.size(0));
      for (std::int64_t i = 0; i < m.size(0); ++i) mean += m[i][j].item<double>() / n;
      for (std::int64_t i = 0; i < m.size(0); ++i) sq += std::pow(m[i][j].item<double>() - mean, 2) / n;
      return std::pair{mean, std::sqrt(sq)};
    };
    const auto [mc, sc] = stats(c);
    const auto [mp, sp] = stats(p);
    moments += (mc - mp) * (mc - mp) + (sc - sp) * (sc - sp);
  }
  return lambda_js * js_soft_histogram(c, p) + lambda_stat * moments;
}

double effectiveness(const torch::Tensor& bd, const torch::Tensor& tgt, const torch::Tensor& t0,
                     const torch::Tensor& t1, const LossCoefficients& k) {
  double total = 0.0;
  const auto n = bd.size(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double dist = 1.0 - cos_vec(row(bd, i), row(tgt, i));
    const auto a = row(t0, i), b = row(t1, i);
    double content = 0.0;
    for (std::size_t q = 0; q < a.size(); ++q) content += (a[q] - b[q]) * (a[q] - b[q]);
    const double temp = k.lambda_temp * std::exp(-dist / k.tau);
    total += k.effectiveness_sign == EffectivenessSign::Corrected ? dist - temp + k.lambda_content * content
                                                                  : -(dist + temp) - k.lambda_content * content;
  }
  return total / static_cast<double>(n);
}

double ssim(const torch::Tensor& x, const torch::Tensor& y) {
  const auto xa = x.to(torch::kFloat64).contiguous(), ya = y.to(torch::kFloat64).contiguous();
  const auto X = xa.accessor<double, 4>(), Y = ya.accessor<double, 4>();
  const double c1 = 1e-4, c2 = 9e-4;
  const int w = 7;
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t n = 0; n < x.size(0); ++n)
    for (std::int64_t c = 0; c < x.size(1); ++c)
      for (std::int64_t r = 0; r + w <= x.size(2); ++r)
        for (std::int64_t q = 0; q + w <= x.size(3); ++q) {
          double mx = 0, my = 0;
          for (int i = 0; i < w; ++i)
            for (int j = 0; j < w; ++j) mx += X[n][c][r + i][q + j], my += Y[n][c][r + i][q + j];
          mx /= w * w, my /= w * w;
          double vx = 0, vy = 0, cxy = 0;
          for (int i = 0; i < w; ++i)
            for (int j = 0; j < w; ++j) {
              const double a = X[n][c][r + i][q + j] - mx, b = Y[n][c][r + i][q + j] - my;
              vx += a * a, vy += b * b, cxy += a * b;
            }
          vx /= w * w, vy /= w * w, cxy /= w * w;
          total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
  return total / static_cast<double>(count);
}

double stealth(const torch::Tensor& x, const torch::Tensor& delta, double alpha, double beta) {
  double l2 = 0.0;
  for (std::int64_t i = 0; i < delta.size(0); ++i)
    for (double v : row(delta, i)) l2 += v * v;
  l2 /= static_cast<double>(delta.size(0));
  const auto poisoned = (x + delta).clamp(0.0, 1.0);
  return alpha * (1.0 - ssim(x, poisoned)) + beta * l2;
}

double dft_l1(const torch::Tensor& channel) {
  const auto m = channel.to(torch::kFloat64).contiguous();
  const auto A = m.accessor<double, 2>();
  const auto h = m.size(0), w = m.size(1);
  double total = 0.0;
  for (std::int64_t u = 0; u < h; ++u)
    for (std::int64_t v = 0; v < w; ++v) {
      double re = 0.0, im = 0.0;
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t q = 0; q < w; ++q) {
          const double phase = -2.0 * std::numbers::pi *
                               (static_cast<double>(u * r) / static_cast<double>(h) + static_cast<double>(v * q) / static_cast<double>(w));
          re += A[r][q] * std::cos(phase);
          im += A[r][q] * std::sin(phase);
        }
      total += std::hypot(re, im);
    }
  return total;
}

double constraint(const torch::Tensor& delta, const LossCoefficients& k) {
  const auto d = delta.to(torch::kFloat64).contiguous();
  const auto D = d.accessor<double, 4>();
  double total = 0.0;
  for (std::int64_t n = 0; n < d.size(0); ++n) {
    double linf = 0.0, tv = 0.0, freq = 0.0;
    for (std::int64_t c = 0; c < d.size(1); ++c) {
      for (std::int64_t r = 0; r < d.size(2); ++r)
        for (std::int64_t q = 0; q < d.size(3); ++q) {
          linf = std::max(linf, std::abs(D[n][c][r][q]));
          if (q + 1 < d.size(3)) tv += std::abs(D[n][c][r][q + 1] - D[n][c][r][q]);
          if (r + 1 < d.size(2)) tv += std::abs(D[n][c][r + 1][q] - D[n][c][r][q]);
        }
      freq += dft_l1(d[n][c]);
    }
    total += k.lambda_norm * std::max(0.0, linf - k.epsilon) + k.lambda_sm * tv + k.lambda_freq * freq;
  }
  return total / static_cast<double>(d.size(0));
}

double outer(double align, double perc, double dist, const Triple& omega) {
  return omega[0] * align + omega[1] * perc + omega[2] * dist;
}

double inner(double eff, double ste, double cons, const Triple& mu) { return mu[0] * eff + mu[1] * ste + mu[2] * cons; }

}  // namespace dsba::oracle
