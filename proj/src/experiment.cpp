#include "dsba/experiment.hpp"

#include <array>
#include <cmath>
#include <fstream>

#include "dsba/checkpoint.hpp"
#include "dsba/errors.hpp"
#include "dsba/hashing.hpp"
#include "dsba/metrics.hpp"
#include "dsba/plot.hpp"

namespace dsba {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr Stage kAllStages[] = {Stage::Pretrain, Stage::Attack, Stage::Evaluate, Stage::Defend, Stage::Report};

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("missing " + file.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw LoadError("unreadable " + file.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& file) {
  fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw Error("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

torch::Tensor head(const torch::Tensor& x, std::int64_t n) { return x.slice(0, 0, std::min(n, x.size(0))); }

double finite_or(const json& v, double fallback) { return v.is_number() ? v.get<double>() : fallback; }

}  // namespace

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Attack: return "attack";
    case Stage::Evaluate: return "evaluate";
    case Stage::Defend: return "defend";
    case Stage::Report: return "report";
  }
  return "?";
}

std::vector<Stage> parse_command(const std::string& command) {
  if (command == "all") return {std::begin(kAllStages), std::end(kAllStages)};
  for (auto s : kAllStages)
    if (command == to_string(s)) return {s};
  throw ConfigError("unknown command '" + command + "' (expected pretrain, attack, evaluate, defend, report or all)");
}

Experiment::Experiment(RunConfig config) : config_(std::move(config)) { config_.validate(); }

fs::path Experiment::stage_dir(Stage stage) const { return dir() / to_string(stage); }

std::string Experiment::stage_key(Stage stage) const {
  const auto full = to_json(config_);
  json inputs;
  switch (stage) {
    case Stage::Pretrain:
      inputs = {{"seed", full["seed"]}, {"dataset", full["dataset"]}, {"encoder", full["encoder"]},
                {"pretrain", full["pretrain"]}};
      break;
    case Stage::Attack:
      inputs = {{"up", stage_key(Stage::Pretrain)}, {"attack", full["attack"]}, {"target_class", full["target_class"]}};
      break;
    case Stage::Evaluate:
      inputs = {{"up", stage_key(Stage::Attack)}, {"evaluation", full["evaluation"]}};
      break;
    case Stage::Defend:
      inputs = {{"up", stage_key(Stage::Attack)}, {"evaluation", full["evaluation"]}, {"defenses", full["defenses"]}};
      break;
    case Stage::Report:
      inputs = {{"evaluate", stage_key(Stage::Evaluate)}, {"defend", stage_key(Stage::Defend)}};
      break;
  }
  inputs["stage"] = to_string(stage);
  return sha256_hex(inputs.dump());
}

bool Experiment::is_current(Stage stage) const {
  const auto marker = stage_dir(stage) / "stage.json";
  if (!fs::exists(marker)) return false;
  try {
    return read_json(marker).value("key", "") == stage_key(stage);
  } catch (const LoadError&) {
    return false;
  }
}

void Experiment::mark_done(Stage stage) const {
  write_json({{"stage", to_string(stage)}, {"key", stage_key(stage)}}, stage_dir(stage) / "stage.json");
}

void Experiment::require(Stage upstream) const {
  if (!is_current(upstream))
    throw DependencyError(std::string("stage '") + to_string(upstream) +
                              "' has no current output in " + dir().string() + "; run it first",
                          to_string(upstream));
}

std::vector<StageOutcome> Experiment::run(const std::string& command) {
  std::vector<StageOutcome> out;
  for (auto stage : parse_command(command)) out.push_back(run_stage(stage));
  return out;
}

StageOutcome Experiment::run_stage(Stage stage) {
  switch (stage) {
    case Stage::Pretrain: break;
    case Stage::Attack: require(Stage::Pretrain); break;
    case Stage::Evaluate:
    case Stage::Defend: require(Stage::Attack), require(Stage::Pretrain); break;
    case Stage::Report: require(Stage::Evaluate), require(Stage::Defend), require(Stage::Attack); break;
  }
  fs::create_directories(dir());
  write_json(to_json(config_), dir() / "config.json");
  StageOutcome outcome{stage, is_current(stage), stage_key(stage)};
  if (outcome.cached) return outcome;
  fs::remove(stage_dir(stage) / "stage.json");
  switch (stage) {
    case Stage::Pretrain: pretrain(); break;
    case Stage::Attack: attack(); break;
    case Stage::Evaluate: evaluate(); break;
    case Stage::Defend: defend(); break;
    case Stage::Report: report(); break;
  }
  mark_done(stage);
  return outcome;
}

void Experiment::pretrain() {
  const auto data = load_image_dataset(config_.dataset_spec());
  const auto clean = pretrain_clean_encoder(concat(data.shadow, data.clean), config_.pretrain_config());
  save_encoder(clean, stage_dir(Stage::Pretrain));
}

void Experiment::attack() {
  const auto data = load_image_dataset(config_.dataset_spec());
  const auto clean = load_encoder(stage_dir(Stage::Pretrain));
  ReferenceSelectionInfo info;
  auto refs = select_reference_inputs(config_.target_class, data.downstream_train, clean, std::nullopt, &info);
  compute_target_feature(refs, clean);

  const auto result = run_attack_training(clean, data, refs, config_.attack_config());
  const auto out = stage_dir(Stage::Attack);
  save_encoder(result.best_backdoor, out / "best");
  save_generator(result.best_generator, out / "best");
  save_encoder(result.backdoor, out / "last");
  save_generator(result.generator, out / "last");

  std::ofstream log(dir() / "log.jsonl");
  for (const auto& e : result.log.epochs) log << to_json(e).dump() << '\n';
  write_json({{"stop_reason", result.log.stop_reason},
              {"best_epoch", result.log.best_epoch},
              {"epochs_run", result.log.epochs.size()},
              {"reference_count", refs.count},
              {"reference_ids", refs.inputs.ids},
              {"reference_variance", info.variance}},
             out / "summary.json");
}

void Experiment::evaluate() {
  const auto data = load_image_dataset(config_.dataset_spec());
  const auto clean = load_encoder(stage_dir(Stage::Pretrain));
  const auto attack_dir = stage_dir(Stage::Attack);
  const auto backdoor = load_encoder(attack_dir / "best");
  const auto generator = load_generator(attack_dir / "best");
  auto probe_cfg = config_.evaluation.probe;
  probe_cfg.seed = config_.seed;

  const auto eval = evaluate_attack(clean, backdoor, generator, config_.target_class, data, probe_cfg);
  const auto x = head(data.downstream_test.pixels, config_.evaluation.stealth_samples);
  torch::Tensor poisoned;
  {
    torch::NoGradGuard no_grad;
    poisoned = apply_trigger(x, generate_trigger(generator, x));
  }
  const auto taps = PerceptualTaps::make();
  const auto suite = compute_stealth_suite(x, poisoned, taps);

  MetricsReport m;
  m.ca = eval.metrics.ca;
  m.ba = eval.metrics.ba;
  m.asr = eval.metrics.asr;
  m.ssim = compute_ssim(x, poisoned);
  m.psnr = compute_psnr(x, poisoned);
  m.lpips_proxy = suite.lpips;
  m.fsim = suite.fsim;
  m.fid = suite.fid;
  m.validate();
  write_json(to_json(m), stage_dir(Stage::Evaluate) / "metrics.json");

  fs::create_directories(plots_dir());
  const auto n = config_.evaluation.residual_examples;
  plot_residuals(head(x, n), head(poisoned, n), config_.evaluation.residual_gain, plots_dir() / "residuals.png");
}

void Experiment::defend() {
  const auto& d = config_.defenses;
  const auto data = load_image_dataset(config_.dataset_spec());
  const auto attack_dir = stage_dir(Stage::Attack);
  const auto backdoor = load_encoder(attack_dir / "best");
  const auto generator = load_generator(attack_dir / "best");
  auto probe_cfg = config_.evaluation.probe;
  probe_cfg.seed = config_.seed;
  const auto probe = train_downstream_probe(backdoor, data.downstream_train, data.num_classes, probe_cfg);
  const auto classify = make_classifier(probe, backdoor);
  const auto triggered = [&](const torch::Tensor& x) {
    torch::NoGradGuard no_grad;
    return apply_trigger(x, generate_trigger(generator, x));
  };
  fs::create_directories(plots_dir());

  json out = json::object();
  if (d.strip) {
    const auto x = head(data.downstream_test.pixels, d.strip_samples);
    const auto r = strip_entropy_test(classify, x, triggered(x), data.downstream_train.pixels,
                                      {d.strip_overlays, config_.seed});
    out["strip"] = to_json(r);
    plot_histograms(r.clean_entropy, r.poisoned_entropy, {"clean", "triggered"}, 20, "STRIP entropy",
                    plots_dir() / "strip_entropy.png");
  }
  if (d.separability) {
    const auto x = head(data.downstream_test.pixels, d.separability_samples);
    const auto r = latent_separability_score(backdoor, x, triggered(x), config_.seed);
    out["separability"] = to_json(r);
    std::vector<int> group(static_cast<std::size_t>(2 * x.size(0)), 0);
    std::fill(group.begin() + x.size(0), group.end(), 1);
    plot_scatter(r.projection, group, {"clean", "triggered"}, "backdoor features, PCA",
                 plots_dir() / "feature_pca.png");
  }
  if (d.nc) {
    const auto x = head(data.downstream_train.pixels, d.nc_samples);
    const auto r = nc_anomaly_index(classify, x, data.num_classes,
                                    {d.nc_steps, d.nc_lambda, d.nc_learning_rate, config_.seed});
    out["nc"] = to_json(r);
  }
  write_json(out, stage_dir(Stage::Defend) / "defenses.json");
}

void Experiment::report() {
  auto m = metrics_report_from_json(read_json(stage_dir(Stage::Evaluate) / "metrics.json"));
  const auto defenses = read_json(stage_dir(Stage::Defend) / "defenses.json");
  if (defenses.contains("strip")) m.strip_auroc = defenses["strip"]["auroc"].get<double>();
  if (defenses.contains("separability")) {
    m.separability_auroc = defenses["separability"]["probe_auroc"].get<double>();
    m.silhouette = defenses["separability"]["silhouette"].get<double>();
  }
  if (defenses.contains("nc")) m.nc_anomaly_index = defenses["nc"]["anomaly_index"].get<double>();

  const auto summary = read_json(stage_dir(Stage::Attack) / "summary.json");
  const auto attack_dir = stage_dir(Stage::Attack);
  m.metadata = {
      {"seed", std::to_string(config_.seed)},
      {"dataset", config_.dataset.name},
      {"target_class", std::to_string(config_.target_class)},
      {"config_sha256", sha256_hex(to_json(config_).dump())},
      {"stop_reason", summary["stop_reason"].get<std::string>()},
      {"best_epoch", std::to_string(summary["best_epoch"].get<int>())},
      {"encoder_checksum", read_manifest(attack_dir / "best" / "encoder.manifest").at("checksum")},
      {"generator_checksum", read_manifest(attack_dir / "best" / "generator.manifest").at("checksum")},
  };
  m.validate();
  write_json(to_json(m), report_path());

  // Training curves from the epoch log.
  std::ifstream log(dir() / "log.jsonl");
  if (!log) throw DependencyError("missing epoch log " + (dir() / "log.jsonl").string(), "attack");
  Series asr{"asr", {}, {}}, ssim{"ssim", {}, {}}, drift{"feature diff", {}, {}};
  std::array<Series, 3> omega{{{"w align", {}, {}}, {"w perc", {}, {}}, {"w dist", {}, {}}}};
  std::array<Series, 3> mu{{{"mu eff", {}, {}}, {"mu ste", {}, {}}, {"mu cons", {}, {}}}};
  std::string line;
  while (std::getline(log, line)) {
    const auto e = json::parse(line);
    const double epoch = e["epoch"].get<double>();
    const auto& meas = e["measured"];
    for (auto* s : {&asr, &ssim, &drift}) s->x.push_back(epoch);
    asr.y.push_back(finite_or(meas["asr"], NAN));
    ssim.y.push_back(finite_or(meas["ssim"], NAN));
    drift.y.push_back(finite_or(meas["feature_diff"], NAN));
    for (std::size_t i = 0; i < 3; ++i) {
      omega[i].x.push_back(epoch);
      omega[i].y.push_back(e["weights"]["omega"][i].get<double>());
      mu[i].x.push_back(epoch);
      mu[i].y.push_back(e["weights"]["mu"][i].get<double>());
    }
  }
  fs::create_directories(plots_dir());
  plot_lines({asr, ssim, drift}, "attack metrics per epoch", "epoch", plots_dir() / "metric_curves.png");
  std::vector<Series> weights(omega.begin(), omega.end());
  weights.insert(weights.end(), mu.begin(), mu.end());
  plot_lines(weights, "loss weights per epoch", "epoch", plots_dir() / "loss_weights.png");
}

}  // namespace dsba
