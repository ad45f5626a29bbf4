#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dsba::testing {

GradCheck gradcheck(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& input,
                    int coords, std::uint64_t seed, double step, const std::function<bool(std::int64_t)>& skip) {
  auto x = input.detach().to(torch::kFloat64).clone().set_requires_grad(true);
  const auto analytic = torch::autograd::grad({f(x)}, {x})[0].contiguous();

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, x.numel() - 1);
  GradCheck result;
  auto probe = x.detach().clone().contiguous();
  auto flat = probe.view({-1});
  const auto eval = [&] {
    torch::NoGradGuard no_grad;
    return f(probe).item<double>();
  };
  int attempts = 0;
  while (result.coordinates < coords && attempts++ < 100 * coords) {
    const auto i = pick(rng);
    if (skip && skip(i)) continue;
    const double orig = flat[i].item<double>();
    flat[i] = orig + step;
    const double up = eval();
    flat[i] = orig - step;
    const double down = eval();
    flat[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double exact = analytic.view({-1})[i].item<double>();
    const double scale = std::max({std::abs(numeric), std::abs(exact), 1e-4});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(numeric - exact) / scale);
    ++result.coordinates;
  }
  return result;
}

}  // namespace dsba::testing

namespace dsba::testing {

GradCheck gradcheck_parameter(const std::function<torch::Tensor()>& loss, torch::Tensor parameter, int coords,
                              std::uint64_t seed, double step) {
  const auto analytic = torch::autograd::grad({loss()}, {parameter})[0].contiguous().view({-1});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, parameter.numel() - 1);
  torch::NoGradGuard no_grad;
  auto flat = parameter.view({-1});
  GradCheck result;
  for (int k = 0; k < coords; ++k) {
    const auto i = pick(rng);
    const double orig = flat[i].item<double>();
    flat[i] = orig + step;
    const double up = loss().item<double>();
    flat[i] = orig - step;
    const double down = loss().item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double exact = analytic[i].item<double>();
    const double scale = std::max({std::abs(numeric), std::abs(exact), 1e-4});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(numeric - exact) / scale);
    ++result.coordinates;
  }
  return result;
}

}  // namespace dsba::testing
