#include "dsba/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dsba/errors.hpp"
#include "dsba/metrics.hpp"
#include "dsba/warnings.hpp"

namespace dsba {

const char* to_string(Phase phase) { return phase == Phase::Foundation ? "foundation" : "co-optimization"; }
const char* to_string(Branch branch) { return branch == Branch::Generator ? "generator" : "encoder"; }
const char* to_string(Decision decision) {
  switch (decision) {
    case Decision::Continue: return "continue";
    case Decision::Converged: return "converged";
    case Decision::EarlyStop: return "early_stop";
  }
  return "?";
}

int TrainConfig::phase1_end() const {
  return static_cast<int>(std::ceil(static_cast<double>(total_epochs) * phase1_fraction - 1e-9));
}

bool TrainConfig::loss_enabled(const std::string& name) const {
  return std::find(disabled_losses.begin(), disabled_losses.end(), name) == disabled_losses.end();
}

void TrainConfig::validate() const {
  if (total_epochs < 1) throw ConfigError("train.total_epochs must be >= 1");
  if (!(phase1_fraction > 0.0 && phase1_fraction < 1.0)) throw ConfigError("train.phase1_fraction must lie in (0, 1)");
  if (alternation_modulus < 2) throw ConfigError("train.alternation_modulus must be >= 2");
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (steps_per_epoch < 0) throw ConfigError("train.steps_per_epoch must be >= 0");
  if (!(generator_lr > 0.0) || !(encoder_lr > 0.0)) throw ConfigError("train learning rates must be > 0");
  if (!(encoder_momentum >= 0.0 && encoder_momentum < 1.0)) throw ConfigError("train.encoder_momentum must lie in [0, 1)");
  if (encoder_optimizer != "sgd" && encoder_optimizer != "adam")
    throw ConfigError("train.encoder_optimizer must be \"sgd\" or \"adam\"");
  if (validation_size < 2) throw ConfigError("train.validation_size must be >= 2");
  if (monitor_size < 2) throw ConfigError("train.monitor_size must be >= 2");
  const auto& c = convergence;
  if (!(c.asr_gate > 0 && c.ssim_gate > 0 && c.feat_gate > 0 && c.stable_eps > 0 && c.plateau_eps > 0) ||
      c.stable_epochs < 1 || c.plateau_epochs < 1)
    throw ConfigError("train.convergence gates must be positive");
  for (const auto& name : disabled_losses)
    if (std::find_if(std::begin(kLossNames), std::end(kLossNames), [&](const char* n) { return name == n; }) ==
        std::end(kLossNames))
      throw ConfigError("unknown loss '" + name + "' in disabled_losses (expected align|perc|dist|eff|ste|cons)");
  coefficients.validate();
  poison.validate();
}

EpochPlan plan_epoch(int epoch, int counter, const TrainConfig& config) {
  if (epoch <= config.phase1_end()) return {Phase::Foundation, Branch::Generator, counter};
  const int next = counter + 1;
  if (next % config.alternation_modulus != 0) return {Phase::CoOptimization, Branch::Generator, next};
  return {Phase::CoOptimization, Branch::Encoder, 0};
}

void MetricHistory::push(double a, double s, double f) {
  asr.push_back(a);
  ssim.push_back(s);
  feature_diff.push_back(f);
}

namespace {

/// Every consecutive change among the last `window` entries is below `eps`.
bool flat_tail(const std::vector<double>& values, int window, double eps) {
  if (static_cast<int>(values.size()) < window) return false;
  for (std::size_t i = values.size() - window + 1; i < values.size(); ++i)
    if (!(std::abs(values[i] - values[i - 1]) < eps)) return false;
  return true;
}

}  // namespace

Decision check_convergence(const TrainState& state, const TrainConfig& config, bool resource_limit_hit) {
  const auto& h = state.history;
  const auto& c = config.convergence;
  if (h.size() > 0) {
    const bool gates = h.asr.back() >= c.asr_gate && h.ssim.back() >= c.ssim_gate && h.feature_diff.back() <= c.feat_gate;
    if (gates && flat_tail(h.asr, c.stable_epochs, c.stable_eps) && flat_tail(h.ssim, c.stable_epochs, c.stable_eps) &&
        flat_tail(h.feature_diff, c.stable_epochs, c.stable_eps))
      return Decision::Converged;
    if (flat_tail(h.asr, c.plateau_epochs, c.plateau_eps)) return Decision::EarlyStop;
  }
  return resource_limit_hit ? Decision::EarlyStop : Decision::Continue;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {
nlohmann::json number(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
}
}  // namespace

nlohmann::json to_json(const LossBreakdown& l) {
  return {{"align", number(l.align)}, {"perc", number(l.perc)}, {"dist", number(l.dist)},
          {"eff", number(l.eff)},     {"ste", number(l.ste)},   {"cons", number(l.cons)},
          {"outer", number(l.outer)}, {"inner", number(l.inner)}};
}

nlohmann::json to_json(const WeightState& w) {
  return {{"omega", w.omega},       {"mu", w.mu},         {"omega_raw", w.omega_raw},
          {"mu_raw", w.mu_raw},     {"omega_memory", w.omega_memory}, {"omega_base", w.omega_base},
          {"mu_base", w.mu_base}};
}

nlohmann::json to_json(const EpochRecord& r) {
  return {
      {"epoch", r.epoch},
      {"phase", to_string(r.phase)},
      {"branch", to_string(r.branch)},
      {"alternation_counter", r.alternation_counter},
      {"rho", r.rho},
      {"poisoned_per_batch", r.poisoned_per_batch},
      {"steps", r.steps},
      {"mean_step_loss", number(r.mean_step_loss)},
      {"losses", to_json(r.losses)},
      {"weights", to_json(r.weights)},
      {"signals",
       {{"asr_current", r.signals.asr_current},
        {"feature_diff", r.signals.feature_diff},
        {"js_current", r.signals.js_current},
        {"eff_loss_avg", r.signals.eff_loss_avg},
        {"ssim_current", r.signals.ssim_current},
        {"training_progress", r.signals.training_progress}}},
      {"measured",
       {{"asr", r.measured.asr},
        {"ssim", r.measured.ssim},
        {"psnr", number(r.measured.psnr)},
        {"feature_diff", r.measured.feature_diff},
        {"js", r.measured.js}}},
      {"encoder_checksum", r.encoder_checksum},
      {"generator_checksum", r.generator_checksum},
      {"decision", to_string(r.decision)},
  };
}

// ---------------------------------------------------------------------------
// Measurements
// ---------------------------------------------------------------------------

double centroid_attack_success(const EncoderParams& backdoor, const GeneratorParams& generator,
                               const torch::Tensor& images, const ImageBatch& labeled, std::int64_t target_class) {
  if (!labeled.has_labels()) throw PreconditionError("centroid_attack_success needs a labeled pool");
  torch::NoGradGuard no_grad;
  const auto feats = torch::nn::functional::normalize(
      encode_no_grad(backdoor, labeled.pixels), torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto labels = labeled.labels_tensor();
  const std::int64_t classes = labels.max().item<std::int64_t>() + 1;
  if (target_class >= classes) throw PreconditionError("target class absent from the labeled pool");
  auto centroids = torch::zeros({classes, feats.size(1)}, feats.options());
  centroids.index_add_(0, labels, feats);
  centroids = torch::nn::functional::normalize(centroids, torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto poisoned = apply_trigger(images, generate_trigger(generator, images));
  const auto pf = torch::nn::functional::normalize(encode_no_grad(backdoor, poisoned),
                                                   torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto predicted = pf.matmul(centroids.t()).argmax(1);
  return predicted.eq(target_class).to(torch::kFloat64).mean().item<double>();
}

double normalized_feature_drift(const EncoderParams& backdoor, const EncoderParams& clean_encoder,
                                const torch::Tensor& images) {
  namespace F = torch::nn::functional;
  const auto opts = F::NormalizeFuncOptions().dim(1);
  const auto a = F::normalize(encode_no_grad(backdoor, images), opts);
  const auto b = F::normalize(encode_no_grad(clean_encoder, images), opts);
  return (a - b).norm(2, 1).mean().item<double>();
}

namespace {

struct StepTensors {
  OuterTerms outer;
  InnerTerms inner;
};

torch::Tensor zero_like_scalar(const torch::Tensor& ref) { return torch::zeros({}, ref.options()); }

InnerTerms inner_terms(const EncoderParams& backdoor, const GeneratorParams& generator, const torch::Tensor& xp,
                       const torch::Tensor& target_feature, const WeightState& w, const TrainConfig& cfg,
                       std::uint64_t augment_seed, bool all_terms) {
  const auto& co = cfg.coefficients;
  const auto delta = generate_trigger(generator, xp);
  InnerTerms t{zero_like_scalar(xp), zero_like_scalar(xp), zero_like_scalar(xp)};
  if (all_terms || w.mu[0] > 0.0) {
    const auto feats = encode(backdoor, apply_trigger(xp, delta));
    const auto targets = target_feature.unsqueeze(0).expand({xp.size(0), target_feature.size(0)});
    const auto aug = light_augment(xp, augment_seed, cfg.trigger_augment);
    t.eff = effectiveness_loss(feats, targets, delta, generate_trigger(generator, aug), co);
  }
  if (all_terms || w.mu[1] > 0.0) t.ste = visual_stealth_loss(xp, delta, co.alpha_ssim, co.beta_l2);
  if (all_terms || w.mu[2] > 0.0) t.cons = constraint_loss(delta, co);
  return t;
}

OuterTerms outer_terms(const EncoderParams& clean_encoder, const EncoderParams& backdoor,
                       const GeneratorParams& generator, const torch::Tensor& x, const torch::Tensor& xp,
                       const torch::Tensor& target_feature, const PerceptualTaps& taps, const WeightState& w,
                       const TrainConfig& cfg, bool all_terms) {
  torch::Tensor poisoned;
  {
    torch::NoGradGuard no_grad;
    poisoned = apply_trigger(xp, generate_trigger(generator, xp));
  }
  OuterTerms t{zero_like_scalar(x), zero_like_scalar(x), zero_like_scalar(x)};
  const bool need_align = all_terms || w.omega[0] > 0.0;
  const bool need_dist = all_terms || w.omega[2] > 0.0;
  torch::Tensor bd, fc;
  if (need_align || need_dist) {
    bd = encode(backdoor, poisoned);
    fc = encode(backdoor, x);
  }
  if (need_align) {
    const auto targets = target_feature.unsqueeze(0).expand({xp.size(0), target_feature.size(0)});
    const auto reference = encode_no_grad(clean_encoder, x);
    t.align = alignment_loss(bd, targets, fc, reference, cfg.coefficients.lambda_clean);
  }
  if (all_terms || w.omega[1] > 0.0) {
    torch::NoGradGuard no_grad;  // depends on images only, never on encoder weights
    t.perc = perceptual_loss(xp, poisoned, taps, cfg.multiscale_perceptual);
  }
  if (need_dist)
    t.dist = distribution_alignment_loss(fc, bd, cfg.coefficients.lambda_js, cfg.coefficients.lambda_stat);
  return t;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::mt19937_64 rng(seq);
  return rng();
}

Mask enabled_mask(const TrainConfig& cfg, int first) {
  Mask m{};
  for (int i = 0; i < 3; ++i) m[i] = cfg.loss_enabled(kLossNames[first + i]);
  return m;
}

bool finite(const torch::Tensor& t) { return std::isfinite(t.item<double>()); }

}  // namespace

LossBreakdown evaluate_losses(const EncoderParams& clean_encoder, const EncoderParams& backdoor,
                              const GeneratorParams& generator, const torch::Tensor& x,
                              const torch::Tensor& target_feature, const PerceptualTaps& taps,
                              const WeightState& weights, const TrainConfig& config, std::uint64_t augment_seed) {
  torch::NoGradGuard no_grad;
  const auto o = outer_terms(clean_encoder, backdoor, generator, x, x, target_feature, taps, weights, config, true);
  const auto i = inner_terms(backdoor, generator, x, target_feature, weights, config, augment_seed, true);
  LossBreakdown b;
  b.align = o.align.item<double>();
  b.perc = o.perc.item<double>();
  b.dist = o.dist.item<double>();
  b.eff = i.eff.item<double>();
  b.ste = i.ste.item<double>();
  b.cons = i.cons.item<double>();
  b.outer = weights.omega[0] * b.align + weights.omega[1] * b.perc + weights.omega[2] * b.dist;
  b.inner = weights.mu[0] * b.eff + weights.mu[1] * b.ste + weights.mu[2] * b.cons;
  return b;
}

TrainResult run_attack_training(const EncoderParams& clean_encoder, const DatasetSplit& data,
                                const ReferenceSet& refs, const TrainConfig& cfg, const PerceptualTaps& taps) {
  cfg.validate();
  if (!refs.target_feature.defined() || refs.target_feature.numel() == 0)
    throw PreconditionError("run_attack_training: reference set has no target feature");
  if (data.shadow.size() < 2) throw PreconditionError("run_attack_training: shadow set needs at least two images");
  if (data.clean.empty()) throw PreconditionError("run_attack_training: clean set is empty");

  torch::manual_seed(cfg.seed);
  EncoderParams backdoor = clean_encoder.backdoor_copy();
  GeneratorParams generator(cfg.generator, cfg.seed + 1);
  const torch::Tensor target = refs.target_feature.detach().to(torch::kFloat32);

  torch::optim::Adam gen_opt(generator.net()->parameters(), torch::optim::AdamOptions(cfg.generator_lr));
  std::unique_ptr<torch::optim::Optimizer> enc_opt;
  if (cfg.encoder_optimizer == "adam")
    enc_opt = std::make_unique<torch::optim::Adam>(backdoor.net()->parameters(),
                                                   torch::optim::AdamOptions(cfg.encoder_lr));
  else
    enc_opt = std::make_unique<torch::optim::SGD>(
        backdoor.net()->parameters(), torch::optim::SGDOptions(cfg.encoder_lr).momentum(cfg.encoder_momentum));

  TrainState state;
  state.weights = WeightState::initial(cfg.scheduler.outer_base, cfg.scheduler.phase1_inner_base,
                                       enabled_mask(cfg, 0), enabled_mask(cfg, 3));
  state.weights.eta_attack = cfg.scheduler.eta_attack;
  state.weights.eta_preserve = cfg.scheduler.eta_preserve;
  state.weights.eta_dist = cfg.scheduler.eta_dist;
  state.weights.eta_inner = cfg.scheduler.eta_inner;
  state.weights.momentum = cfg.scheduler.momentum;
  state.weights.flip_distribution_direction = cfg.scheduler.flip_distribution_direction;
  state.weights.validate();

  const auto validation = data.clean.pixels.slice(0, 0, std::min(cfg.validation_size, data.clean.size()));
  const auto monitor = data.shadow.pixels.slice(0, 0, std::min(cfg.monitor_size, data.shadow.size()));

  const auto measure = [&]() {
    torch::NoGradGuard no_grad;
    EpochMeasurements m;
    const auto poisoned = apply_trigger(validation, generate_trigger(generator, validation));
    m.asr = centroid_attack_success(backdoor, generator, validation, data.downstream_train, refs.target_class);
    m.ssim = compute_ssim(validation, poisoned);
    m.psnr = compute_psnr(validation, poisoned);
    m.feature_diff = normalized_feature_drift(backdoor, clean_encoder, validation);
    m.js = soft_histogram_js(encode_no_grad(backdoor, validation), encode_no_grad(backdoor, poisoned)).item<double>();
    return m;
  };

  TrainResult result{backdoor, generator, backdoor, generator, {}};
  result.log.initial = measure();
  EpochMeasurements latest = result.log.initial;
  LossBreakdown latest_losses =
      evaluate_losses(clean_encoder, backdoor, generator, monitor, target, taps, state.weights, cfg, mix_seed(cfg.seed, 0, 1));

  const auto signals_from = [&](const EpochMeasurements& m, const LossBreakdown& l, int epoch) {
    const auto& s = cfg.scheduler;
    ScheduleSignals sig;
    sig.asr_current = m.asr;
    sig.asr_target = s.asr_target;
    sig.tau_asr = s.tau_asr;
    sig.feature_diff = m.feature_diff;
    sig.delta_preserve = s.delta_preserve;
    sig.js_current = m.js;
    sig.d_threshold = s.d_threshold;
    sig.eff_loss_avg = l.eff;
    sig.eff_loss_target = s.eff_loss_target;
    sig.ssim_current = m.ssim;
    sig.ssim_target = s.ssim_target;
    sig.training_progress = static_cast<double>(epoch) / cfg.total_epochs;
    return sig;
  };
  ScheduleSignals signals = signals_from(latest, latest_losses, 0);

  double best_asr = -1.0, best_ssim = -1.0;
  const std::int64_t n = data.shadow.size();
  const std::int64_t batch = std::min(cfg.batch_size, n);
  const int steps = cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch : static_cast<int>((n + batch - 1) / batch);
  EncoderParams last_good_backdoor = backdoor;
  GeneratorParams last_good_generator = generator;

  for (int epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
    const EpochPlan plan = plan_epoch(epoch, state.alternation_counter, cfg);
    if (plan.phase == Phase::CoOptimization && state.phase == Phase::Foundation)
      state.weights.set_inner_base(cfg.scheduler.phase2_inner_base);
    state.epoch = epoch;
    state.phase = plan.phase;
    state.alternation_counter = plan.counter;

    const double rho = poison_rate_at_epoch(cfg.poison, epoch);
    const std::int64_t k =
        std::min<std::int64_t>(batch, std::max<std::int64_t>(2, std::llround(rho * static_cast<double>(batch))));

    const bool train_generator = plan.branch == Branch::Generator;
    generator.set_requires_grad(train_generator);
    backdoor.set_requires_grad(!train_generator);

    std::vector<std::int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 2));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    bool diverged = false;
    for (int step = 0; step < steps; ++step) {
      std::vector<std::int64_t> idx(batch);
      for (std::int64_t j = 0; j < batch; ++j) idx[j] = order[(step * batch + j) % n];
      const auto x = data.shadow.pixels.index({torch::tensor(idx)});
      const auto xp = x.slice(0, 0, k);

      torch::Tensor loss;
      if (train_generator) {
        const auto t = inner_terms(backdoor, generator, xp, target, state.weights, cfg,
                                   mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 1000 + step), false);
        loss = inner_total(t, state.weights);
      } else {
        const auto t = outer_terms(clean_encoder, backdoor, generator, x, xp, target, taps, state.weights, cfg, false);
        loss = outer_total(t, state.weights);
      }
      if (!finite(loss)) {
        diverged = true;
        break;
      }
      loss_sum += loss.item<double>();
      if (!loss.requires_grad()) continue;
      torch::optim::Optimizer& opt = train_generator ? static_cast<torch::optim::Optimizer&>(gen_opt) : *enc_opt;
      opt.zero_grad();
      loss.backward();
      opt.step();
    }

    if (!diverged) {
      latest_losses = evaluate_losses(clean_encoder, backdoor, generator, monitor, target, taps, state.weights, cfg,
                                      mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 1));
      latest = measure();
      diverged = !std::isfinite(latest_losses.outer) || !std::isfinite(latest_losses.inner);
    }
    if (diverged) {
      warn("non-finite loss at epoch " + std::to_string(epoch) + "; restoring the last good weights");
      backdoor = last_good_backdoor;
      generator = last_good_generator;
      result.log.stop_reason = "diverged";
      break;
    }

    signals = signals_from(latest, latest_losses, epoch);
    if (cfg.scheduler.adaptive) {
      state.weights = update_outer_weights(state.weights, signals);
      state.weights = update_inner_weights(state.weights, signals);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.phase = plan.phase;
    record.branch = plan.branch;
    record.alternation_counter = plan.counter;
    record.rho = rho;
    record.poisoned_per_batch = k;
    record.steps = steps;
    record.mean_step_loss = loss_sum / steps;
    record.losses = latest_losses;
    record.weights = state.weights;
    record.signals = signals;
    record.measured = latest;
    record.encoder_checksum = backdoor.checksum();
    record.generator_checksum = generator.checksum();

    if (latest.asr > best_asr || (latest.asr == best_asr && latest.ssim > best_ssim)) {
      best_asr = latest.asr;
      best_ssim = latest.ssim;
      state.best_epoch = epoch;
      result.best_backdoor = backdoor;
      result.best_generator = generator;
    }
    state.last_epoch = epoch;
    last_good_backdoor = backdoor;
    last_good_generator = generator;

    const bool resource_hit = cfg.resource_limit && cfg.resource_limit();
    if (plan.phase == Phase::CoOptimization) state.history.push(latest.asr, latest.ssim, latest.feature_diff);
    record.decision = plan.phase == Phase::CoOptimization ? check_convergence(state, cfg, resource_hit)
                                                          : (resource_hit ? Decision::EarlyStop : Decision::Continue);
    result.log.epochs.push_back(record);
    if (record.decision == Decision::Converged) {
      result.log.stop_reason = "converged";
      break;
    }
    if (record.decision == Decision::EarlyStop) {
      result.log.stop_reason = "early_stop";
      break;
    }
  }

  backdoor.set_requires_grad(false);
  generator.set_requires_grad(false);
  result.best_backdoor.set_requires_grad(false);
  result.best_generator.set_requires_grad(false);
  result.backdoor = std::move(backdoor);
  result.generator = std::move(generator);
  result.log.best_epoch = state.best_epoch;
  if (state.best_epoch == 0) {
    result.best_backdoor = result.backdoor;
    result.best_generator = result.generator;
  }
  return result;
}

}  // namespace dsba
