#include "doctest_torch.hpp"

#include <cmath>
#include <random>

#include "dsba/errors.hpp"
#include "dsba/scheduler.hpp"
#include "dsba/warnings.hpp"

using namespace dsba;

namespace {

double sum(const Triple& t) { return t[0] + t[1] + t[2]; }

WeightState no_momentum(Triple outer = {0.5, 0.3, 0.2}, Triple inner = {0.3, 0.5, 0.2}) {
  auto s = WeightState::initial(outer, inner);
  s.momentum = 0.0;
  return s;
}

}  // namespace

TEST_SUITE("scheduler") {
  TEST_CASE("logistic is stable and symmetric") {
    CHECK(logistic(0.0) == 0.5);
    CHECK(logistic(800.0) == 1.0);
    CHECK(logistic(-800.0) == doctest::Approx(0.0));
    CHECK(std::isfinite(logistic(-800.0)));
    for (double x : {0.1, 1.0, 5.0}) CHECK(logistic(x) + logistic(-x) == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("initial weights are normalized bases over enabled slots") {
    const auto s = WeightState::initial({2.0, 1.0, 1.0}, {1.0, 1.0, 2.0});
    CHECK(s.omega[0] == doctest::Approx(0.5));
    CHECK(s.mu[2] == doctest::Approx(0.5));
    const auto masked = WeightState::initial({2.0, 1.0, 1.0}, {1.0, 1.0, 2.0}, {true, false, true});
    CHECK(masked.omega[1] == 0.0);
    CHECK(masked.omega[0] == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(WeightState::initial({-1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}), ConfigError);
  }

  TEST_CASE("outer update at the sigmoid midpoints") {
    auto s = no_momentum();
    s.eta_attack = s.eta_preserve = s.eta_dist = 1.0;
    ScheduleSignals sig;
    sig.asr_current = sig.asr_target;
    sig.feature_diff = sig.delta_preserve;
    sig.js_current = sig.d_threshold;
    const auto next = update_outer_weights(s, sig);
    CHECK(next.omega_raw[0] == doctest::Approx(0.75));
    CHECK(next.omega_raw[1] == doctest::Approx(0.45));
    CHECK(next.omega_raw[2] == doctest::Approx(0.30));
    // Equal gates preserve the base proportions.
    CHECK(next.omega[0] == doctest::Approx(0.5));
    CHECK(next.omega[1] == doctest::Approx(0.3));
    CHECK(next.omega[2] == doctest::Approx(0.2));
  }

  TEST_CASE("outer update saturates at base (1 + eta)") {
    auto s = no_momentum();
    s.eta_attack = 1.0;
    ScheduleSignals sig;
    sig.asr_current = -1e6;
    CHECK(update_outer_weights(s, sig).omega_raw[0] == doctest::Approx(1.0));
    sig.asr_current = 1e6;
    CHECK(update_outer_weights(s, sig).omega_raw[0] == doctest::Approx(0.5));
  }

  TEST_CASE("weights stay normalized and clamped over random signals") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    auto s = WeightState::initial({0.5, 0.3, 0.2}, {0.3, 0.5, 0.2});
    s.eta_attack = s.eta_preserve = s.eta_dist = s.eta_inner = 50.0;
    for (int i = 0; i < 1000; ++i) {
      ScheduleSignals sig;
      sig.asr_current = u(rng);
      sig.feature_diff = u(rng);
      sig.js_current = u(rng);
      sig.eff_loss_avg = u(rng);
      sig.ssim_current = u(rng);
      s = update_inner_weights(update_outer_weights(s, sig), sig);
      CHECK(sum(s.omega) == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(sum(s.mu) == doctest::Approx(1.0).epsilon(1e-9));
      for (int k = 0; k < 3; ++k) {
        CHECK(s.omega_memory[k] >= s.clamp_low);
        CHECK(s.omega_memory[k] <= s.clamp_high);
      }
    }
  }

  TEST_CASE("momentum contracts the step toward the raw target") {
    auto s = WeightState::initial({0.5, 0.3, 0.2}, {0.3, 0.5, 0.2});
    s.eta_attack = 1.0;
    ScheduleSignals sig;
    sig.asr_current = -1e6;
    const auto next = update_outer_weights(s, sig);
    const double expect = 0.9 * 0.5 + 0.1 * 1.0;
    CHECK(next.omega_memory[0] == doctest::Approx(expect));
    CHECK(std::abs(next.omega_memory[0] - next.omega_raw[0]) < std::abs(s.omega_memory[0] - next.omega_raw[0]));
  }

  TEST_CASE("clamp bounds apply before normalization") {
    auto s = no_momentum({100.0, 0.0, 1.0});
    const auto next = update_outer_weights(s, ScheduleSignals{});
    CHECK(next.omega_memory[0] == 10.0);
    CHECK(next.omega_memory[1] == 0.01);
  }

  TEST_CASE("each outer weight moves in the documented direction") {
    const auto s = no_momentum();
    ScheduleSignals low, high;
    low.asr_current = 0.2;
    high.asr_current = 0.9;
    CHECK(update_outer_weights(s, low).omega_raw[0] > update_outer_weights(s, high).omega_raw[0]);
    low = high = {};
    low.feature_diff = 0.05;
    high.feature_diff = 0.5;
    CHECK(update_outer_weights(s, high).omega_raw[1] > update_outer_weights(s, low).omega_raw[1]);
    low = high = {};
    low.js_current = 0.01;
    high.js_current = 0.5;
    CHECK(update_outer_weights(s, low).omega_raw[2] > update_outer_weights(s, high).omega_raw[2]);
    auto flipped = s;
    flipped.flip_distribution_direction = true;
    CHECK(update_outer_weights(flipped, high).omega_raw[2] > update_outer_weights(flipped, low).omega_raw[2]);
  }

  TEST_CASE("inner weights react to effectiveness and SSIM, constraint stays at base") {
    const auto s = no_momentum();
    ScheduleSignals poor, good;
    poor.eff_loss_avg = 1.0;
    poor.ssim_current = 0.5;
    good.eff_loss_avg = 0.0;
    good.ssim_current = 1.0;
    const auto a = update_inner_weights(s, poor), b = update_inner_weights(s, good);
    CHECK(a.mu_raw[0] > b.mu_raw[0]);
    CHECK(a.mu_raw[1] > b.mu_raw[1]);
    CHECK(a.mu_raw[2] == s.mu_base[2]);
    CHECK(b.mu_raw[2] == s.mu_base[2]);
  }

  TEST_CASE("invalid thresholds and non-finite signals are rejected") {
    const auto s = no_momentum();
    ScheduleSignals sig;
    sig.tau_asr = 0.0;
    CHECK_THROWS_AS(update_outer_weights(s, sig), ConfigError);
    sig = {};
    sig.js_current = std::nan("");
    CHECK_THROWS_AS(update_outer_weights(s, sig), ConfigError);
    sig = {};
    sig.eff_loss_target = -1.0;
    CHECK_THROWS_AS(update_inner_weights(s, sig), ConfigError);
    auto bad = s;
    bad.momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("stealth weights scale with violation and progress") {
    const std::map<std::string, double> thr{{"ssim", 0.9}, {"lpips", 0.1}};
    auto w = schedule_stealth_weights({{"ssim", 0.9}, {"lpips", 0.05}}, thr, 0.0);
    CHECK(w["ssim"] == doctest::Approx(1.0));
    CHECK(w["lpips"] == doctest::Approx(1.0));
    w = schedule_stealth_weights({{"ssim", 0.9}}, thr, 1.0);
    CHECK(w["ssim"] == doctest::Approx(1.5));
    w = schedule_stealth_weights({{"ssim", 0.45}, {"lpips", 0.2}}, thr, 0.0);
    CHECK(w["ssim"] == doctest::Approx(2.0));
    CHECK(w["lpips"] == doctest::Approx(2.0));
    w = schedule_stealth_weights({{"lpips", 1e6}}, thr, 1.0);
    CHECK(w["lpips"] == 10.0);
  }

  TEST_CASE("a zero maximized metric hits the upper clamp with a warning") {
    WarningCapture warnings;
    const auto w = schedule_stealth_weights({{"ssim", 0.0}}, {{"ssim", 0.9}}, 0.0);
    CHECK(w.at("ssim") == 10.0);
    CHECK(warnings.contains("ssim"));
  }

  TEST_CASE("unknown metrics and missing thresholds are configuration errors") {
    CHECK_THROWS_AS(metric_is_maximized("bleu"), ConfigError);
    CHECK(metric_is_maximized("psnr"));
    CHECK_FALSE(metric_is_maximized("fid"));
    CHECK_THROWS_AS(schedule_stealth_weights({{"fsim", 0.5}}, {}, 0.0), ConfigError);
    CHECK_THROWS_AS(schedule_stealth_weights({}, {}, 1.5), PreconditionError);
  }
}
