#include "doctest_torch.hpp"

#include <cmath>

#include "dsba/errors.hpp"
#include "dsba/evaluation.hpp"
#include "dsba/metrics.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dsba;

namespace {

torch::Tensor images(std::int64_t n, std::int64_t side, std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand({n, 3, side, side});
}

GeneratorParams zero_generator() {
  GeneratorParams gen(GeneratorArch{}, 0);
  torch::NoGradGuard no_grad;
  for (auto& p : gen.net()->parameters()) p.zero_();
  return gen;
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("SSIM identities") {
    const auto x = images(2, 16, 1);
    CHECK(compute_ssim(x, x) == doctest::Approx(1.0).epsilon(1e-6));
    const auto zero = torch::zeros({1, 1, 8, 8}, torch::kFloat64), one = torch::ones({1, 1, 8, 8}, torch::kFloat64);
    const double c1 = 0.01 * 0.01;
    CHECK(ssim_tensor(zero, one).item<double>() == doctest::Approx(c1 / (1.0 + c1)).epsilon(1e-9));
    const auto y = images(2, 16, 2);
    CHECK(compute_ssim(x, y) == doctest::Approx(compute_ssim(y, x)).epsilon(1e-6));
    CHECK(compute_ssim(x, y) >= 0.0);
    CHECK(compute_ssim(x, y) <= 1.0);
    CHECK_THROWS_AS(compute_ssim(images(1, 6, 3), images(1, 6, 4)), PreconditionError);
  }

  TEST_CASE("SSIM matches a windowed loop") {
    const auto x = images(2, 12, 5).to(torch::kFloat64), y = images(2, 12, 6).to(torch::kFloat64);
    CHECK(ssim_tensor(x, y).item<double>() == doctest::Approx(oracle::ssim(x, y)).epsilon(1e-5));
  }

  TEST_CASE("PSNR reference values") {
    const auto x = images(1, 8, 7);
    CHECK(std::isinf(compute_psnr(x, x)));
    CHECK(compute_psnr(torch::zeros({1, 3, 8, 8}), torch::ones({1, 3, 8, 8})) == doctest::Approx(0.0));
    CHECK(compute_psnr(torch::zeros({1, 3, 8, 8}), torch::full({1, 3, 8, 8}, 0.1)) ==
          doctest::Approx(20.0).epsilon(1e-5));
  }

  TEST_CASE("stealth suite identities and symmetry") {
    const auto taps = PerceptualTaps::make();
    const auto x = images(4, 32, 8), y = images(4, 32, 9);
    const auto same = compute_stealth_suite(x, x, taps);
    CHECK(same.lpips == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(same.fsim == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(same.fid) < 1e-3);
    const auto ab = compute_stealth_suite(x, y, taps), ba = compute_stealth_suite(y, x, taps);
    CHECK(ab.lpips == doctest::Approx(ba.lpips).epsilon(1e-5));
    CHECK(ab.fsim == doctest::Approx(ba.fsim).epsilon(1e-5));
    CHECK(ab.fid == doctest::Approx(ba.fid).epsilon(1e-3));
  }

  TEST_CASE("every stealth metric degrades monotonically with noise") {
    const auto taps = PerceptualTaps::make();
    const auto x = images(4, 32, 10);
    torch::manual_seed(11);
    const auto noise = torch::randn_like(x);
    double ssim = 2.0, psnr = 1e9, lpips = -1.0, fsim = 2.0;
    for (double sigma : {0.01, 0.05, 0.2}) {
      const auto y = (x + sigma * noise).clamp(0, 1);
      const auto suite = compute_stealth_suite(x, y, taps);
      CHECK(compute_ssim(x, y) < ssim);
      CHECK(compute_psnr(x, y) < psnr);
      CHECK(suite.lpips > lpips);
      CHECK(suite.fsim < fsim);
      ssim = compute_ssim(x, y);
      psnr = compute_psnr(x, y);
      lpips = suite.lpips;
      fsim = suite.fsim;
    }
  }

  TEST_CASE("Frechet distance of shifted Gaussians") {
    torch::manual_seed(12);
    const auto a = torch::randn({4000, 2}, torch::kFloat64);
    const auto b = torch::randn({4000, 2}, torch::kFloat64) + 1.0;
    CHECK(frechet_distance(a, b) == doctest::Approx(2.0).epsilon(0.1));
  }

  TEST_CASE("a linear probe separates separable features") {
    torch::manual_seed(13);
    const auto labels = torch::arange(300, torch::kLong) % 3;
    const auto centers = 4.0 * torch::eye(3).repeat({1, 4}).reshape({3, 12});
    const auto features = centers.index({labels}) + 0.5 * torch::randn({300, 12});
    const auto probe = train_probe_on_features(features, labels, 3, ProbeConfig{});
    const double acc = probe.predict(features).eq(labels).to(torch::kFloat64).mean().item<double>();
    CHECK(acc >= 0.99);
  }

  TEST_CASE("a zero-epoch probe is its seeded initialization") {
    const auto features = torch::randn({20, 5});
    const auto labels = torch::arange(20, torch::kLong) % 2;
    auto probe = train_probe_on_features(features, labels, 2, ProbeConfig{0, 0.05, 21});
    LinearProbe fresh(5, 2, 21);
    CHECK(torch::equal(probe.layer()->weight, fresh.layer()->weight));
    CHECK_THROWS_AS(train_probe_on_features(features, torch::zeros({20}, torch::kLong), 2, ProbeConfig{}),
                    DegenerateLabelsError);
  }

  TEST_CASE("downstream probing leaves the encoder untouched") {
    const auto& world = testing::small_world();
    const auto before = world.clean.checksum();
    const auto probe = train_downstream_probe(world.clean, world.data.downstream_train, world.data.num_classes,
                                              ProbeConfig{50, 0.05, 0});
    CHECK(world.clean.checksum() == before);
    const double acc = probe_accuracy(probe, world.clean, world.data.downstream_test);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
  }

  TEST_CASE("a zero trigger on an unmodified encoder gives CA = BA and the target prediction share") {
    const auto& world = testing::small_world();
    const auto gen = zero_generator();
    CHECK(generate_trigger(gen, world.data.downstream_test.pixels).abs().max().item<double>() == 0.0);
    const auto eval = evaluate_attack(world.clean, world.clean, gen, 0, world.data, ProbeConfig{50, 0.05, 0});
    CHECK(eval.metrics.ca == doctest::Approx(eval.metrics.ba));
    const auto pred = eval.backdoor_probe.predict(encode_no_grad(world.clean, world.data.downstream_test.pixels));
    const double share = 100.0 * pred.eq(0).to(torch::kFloat64).mean().item<double>();
    CHECK(eval.metrics.asr == doctest::Approx(share));
  }

  TEST_CASE("metrics report round-trips through JSON") {
    MetricsReport r;
    r.ca = 81.5;
    r.ba = 80.25;
    r.asr = 64.0;
    r.ssim = 0.97;
    r.psnr = kPsnrInfinity;
    r.lpips_proxy = 0.01;
    r.fsim = 0.99;
    r.fid = 1.5;
    r.strip_auroc = 0.52;
    r.nc_anomaly_index = 1.1;
    r.metadata["seed"] = "0";
    CHECK_NOTHROW(r.validate());
    const auto j = to_json(r);
    CHECK(j["psnr"] == "inf");
    CHECK(j["separability_auroc"].is_null());
    const auto back = metrics_report_from_json(nlohmann::json::parse(j.dump()));
    CHECK(back.ca == r.ca);
    CHECK(std::isinf(back.psnr));
    CHECK(back.strip_auroc == r.strip_auroc);
    CHECK_FALSE(back.separability_auroc.has_value());
    CHECK(back.metadata == r.metadata);
    CHECK(to_json(back) == j);
    r.asr = 120.0;
    CHECK_THROWS_AS(r.validate(), PreconditionError);
  }
}
