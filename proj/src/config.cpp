#include "dsba/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "dsba/errors.hpp"

namespace dsba {

namespace fs = std::filesystem;
using nlohmann::json;

TrainConfig desk_attack_defaults() {
  TrainConfig c;
  c.total_epochs = 30;
  c.phase1_fraction = 0.2;
  c.steps_per_epoch = 160;
  c.encoder_optimizer = "adam";
  c.encoder_lr = 1e-3;
  c.generator_lr = 1e-3;
  c.poison.rho_base = 0.3;
  c.coefficients.beta_l2 = 0.03;
  c.coefficients.lambda_sm = 0.01;
  c.coefficients.lambda_content = 0.01;
  c.coefficients.lambda_clean = 3.0;
  return c;
}

DatasetSpec desk_dataset_defaults() {
  DatasetSpec d;
  d.num_images = 2048;
  return d;
}

PretrainConfig desk_pretrain_defaults() {
  PretrainConfig p;
  p.epochs = 10;
  p.batch_size = 128;
  return p;
}

namespace {

std::string join_path(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

// Reads fields from a JSON object, recording which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  void field(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    read(j_.at(key), join_path(path_, key), out);
  }

  template <typename Fn>
  void section(const char* key, Fn&& fn) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    Reader child(j_.at(key), join_path(path_, key));
    fn(child);
    child.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + join_path(path_, k) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }

  static void expect(bool ok, const std::string& path, const char* what) {
    if (!ok) throw ConfigError(path + ": expected " + what);
  }
  static void read(const json& v, const std::string& p, double& out) {
    expect(v.is_number(), p, "a number");
    out = v.get<double>();
  }
  static void read(const json& v, const std::string& p, int& out) {
    expect(v.is_number_integer(), p, "an integer");
    out = v.get<int>();
  }
  static void read(const json& v, const std::string& p, std::int64_t& out) {
    expect(v.is_number_integer(), p, "an integer");
    out = v.get<std::int64_t>();
  }
  static void read(const json& v, const std::string& p, std::uint64_t& out) {
    expect(v.is_number_unsigned(), p, "a nonnegative integer");
    out = v.get<std::uint64_t>();
  }
  static void read(const json& v, const std::string& p, bool& out) {
    expect(v.is_boolean(), p, "a boolean");
    out = v.get<bool>();
  }
  static void read(const json& v, const std::string& p, std::string& out) {
    expect(v.is_string(), p, "a string");
    out = v.get<std::string>();
  }
  static void read(const json& v, const std::string& p, fs::path& out) {
    expect(v.is_string(), p, "a string");
    out = v.get<std::string>();
  }
  static void read(const json& v, const std::string& p, Triple& out) {
    expect(v.is_array() && v.size() == 3, p, "an array of three numbers");
    for (std::size_t i = 0; i < 3; ++i) read(v[i], p + "[" + std::to_string(i) + "]", out[i]);
  }
  template <typename T>
  static void read(const json& v, const std::string& p, std::vector<T>& out) {
    expect(v.is_array(), p, "an array");
    std::vector<T> items(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) read(v[i], p + "[" + std::to_string(i) + "]", items[i]);
    out = std::move(items);
  }
  static void read(const json& v, const std::string& p, EffectivenessSign& out) {
    expect(v.is_string(), p, "a string");
    const auto s = v.get<std::string>();
    if (s == "corrected")
      out = EffectivenessSign::Corrected;
    else if (s == "as_printed")
      out = EffectivenessSign::AsPrinted;
    else
      throw ConfigError(p + ": expected \"corrected\" or \"as_printed\"");
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <typename T>
  void field(const char* key, const T& value) {
    j_[key] = write(value);
  }

  template <typename Fn>
  void section(const char* key, Fn&& fn) {
    Writer child;
    fn(child);
    j_[key] = std::move(child.j_);
  }

  json& result() { return j_; }

 private:
  template <typename T>
  static json write(const T& v) {
    return v;
  }
  static json write(const fs::path& v) { return v.string(); }
  static json write(EffectivenessSign s) { return s == EffectivenessSign::Corrected ? "corrected" : "as_printed"; }

  json j_ = json::object();
};

// One description of the schema drives both reading and writing.
template <typename V, typename Config>
void visit(V& v, Config& c) {
  v.field("seed", c.seed);
  v.field("output_dir", c.output_dir);
  v.field("target_class", c.target_class);
  v.section("dataset", [&](auto& s) {
    s.field("name", c.dataset.name);
    s.field("root", c.dataset.root);
    s.field("num_images", c.dataset.num_images);
    s.field("image_size", c.dataset.image_size);
    s.field("num_classes", c.dataset.num_classes);
  });
  v.section("encoder", [&](auto& s) {
    s.field("widths", c.encoder.widths);
    s.field("feature_dim", c.encoder.feature_dim);
  });
  v.section("pretrain", [&](auto& s) {
    s.field("epochs", c.pretrain.epochs);
    s.field("batch_size", c.pretrain.batch_size);
    s.field("learning_rate", c.pretrain.learning_rate);
    s.field("temperature", c.pretrain.temperature);
    s.field("projection_dim", c.pretrain.projection_dim);
  });
  auto& a = c.attack;
  v.section("attack", [&](auto& s) {
    s.field("total_epochs", a.total_epochs);
    s.field("phase1_fraction", a.phase1_fraction);
    s.field("alternation_modulus", a.alternation_modulus);
    s.field("batch_size", a.batch_size);
    s.field("steps_per_epoch", a.steps_per_epoch);
    s.field("generator_lr", a.generator_lr);
    s.field("encoder_lr", a.encoder_lr);
    s.field("encoder_momentum", a.encoder_momentum);
    s.field("encoder_optimizer", a.encoder_optimizer);
    s.field("validation_size", a.validation_size);
    s.field("monitor_size", a.monitor_size);
    s.field("multiscale_perceptual", a.multiscale_perceptual);
    s.field("disable_losses", a.disabled_losses);
    s.section("coefficients", [&](auto& k) {
      auto& x = a.coefficients;
      k.field("lambda_clean", x.lambda_clean);
      k.field("lambda_js", x.lambda_js);
      k.field("lambda_stat", x.lambda_stat);
      k.field("lambda_temp", x.lambda_temp);
      k.field("lambda_content", x.lambda_content);
      k.field("tau", x.tau);
      k.field("alpha_ssim", x.alpha_ssim);
      k.field("beta_l2", x.beta_l2);
      k.field("lambda_norm", x.lambda_norm);
      k.field("lambda_sm", x.lambda_sm);
      k.field("lambda_freq", x.lambda_freq);
      k.field("epsilon", x.epsilon);
      k.field("effectiveness_sign", x.effectiveness_sign);
    });
    s.section("scheduler", [&](auto& k) {
      auto& x = a.scheduler;
      k.field("adaptive", x.adaptive);
      k.field("outer_base", x.outer_base);
      k.field("phase1_inner_base", x.phase1_inner_base);
      k.field("phase2_inner_base", x.phase2_inner_base);
      k.field("eta_attack", x.eta_attack);
      k.field("eta_preserve", x.eta_preserve);
      k.field("eta_dist", x.eta_dist);
      k.field("eta_inner", x.eta_inner);
      k.field("momentum", x.momentum);
      k.field("asr_target", x.asr_target);
      k.field("tau_asr", x.tau_asr);
      k.field("delta_preserve", x.delta_preserve);
      k.field("d_threshold", x.d_threshold);
      k.field("eff_loss_target", x.eff_loss_target);
      k.field("ssim_target", x.ssim_target);
      k.field("flip_distribution_direction", x.flip_distribution_direction);
    });
    s.section("convergence", [&](auto& k) {
      auto& x = a.convergence;
      k.field("asr_gate", x.asr_gate);
      k.field("ssim_gate", x.ssim_gate);
      k.field("feat_gate", x.feat_gate);
      k.field("stable_eps", x.stable_eps);
      k.field("stable_epochs", x.stable_epochs);
      k.field("plateau_eps", x.plateau_eps);
      k.field("plateau_epochs", x.plateau_epochs);
    });
    s.section("generator", [&](auto& k) {
      k.field("base_width", a.generator.base_width);
      k.field("epsilon", a.generator.epsilon);
    });
    s.section("poison", [&](auto& k) {
      k.field("rho_base", a.poison.rho_base);
      k.field("rho_amp", a.poison.rho_amp);
      k.field("period", a.poison.period);
    });
    s.section("trigger_augment", [&](auto& k) {
      auto& x = a.trigger_augment;
      k.field("enabled", x.enabled);
      k.field("min_crop_area", x.min_crop_area);
      k.field("flip_prob", x.flip_prob);
      k.field("brightness", x.brightness);
      k.field("contrast", x.contrast);
    });
  });
  v.section("evaluation", [&](auto& s) {
    s.field("probe_epochs", c.evaluation.probe.epochs);
    s.field("probe_learning_rate", c.evaluation.probe.learning_rate);
    s.field("stealth_samples", c.evaluation.stealth_samples);
    s.field("residual_examples", c.evaluation.residual_examples);
    s.field("residual_gain", c.evaluation.residual_gain);
  });
  v.section("defenses", [&](auto& s) {
    auto& x = c.defenses;
    s.field("strip", x.strip);
    s.field("separability", x.separability);
    s.field("nc", x.nc);
    s.field("strip_overlays", x.strip_overlays);
    s.field("strip_samples", x.strip_samples);
    s.field("separability_samples", x.separability_samples);
    s.field("nc_samples", x.nc_samples);
    s.field("nc_steps", x.nc_steps);
    s.field("nc_lambda", x.nc_lambda);
    s.field("nc_learning_rate", x.nc_learning_rate);
  });
}

void positive(bool ok, const std::string& field) {
  if (!ok) throw ConfigError(field + " must be positive");
}

}  // namespace

DatasetSpec RunConfig::dataset_spec() const {
  auto d = dataset;
  d.seed = seed;
  return d;
}

PretrainConfig RunConfig::pretrain_config() const {
  auto p = pretrain;
  p.arch = encoder;
  p.arch.image_size = dataset.image_size;
  p.seed = seed;
  return p;
}

TrainConfig RunConfig::attack_config() const {
  auto a = attack;
  a.seed = seed;
  return a;
}

void RunConfig::validate() const {
  if (target_class < 0 || target_class >= dataset.num_classes)
    throw ConfigError("target_class must lie in [0, dataset.num_classes)");
  positive(dataset.num_images > 0, "dataset.num_images");
  positive(dataset.image_size > 0, "dataset.image_size");
  if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes must be at least 2");
  if (encoder.widths.empty()) throw ConfigError("encoder.widths must not be empty");
  for (auto w : encoder.widths) positive(w > 0, "encoder.widths");
  positive(encoder.feature_dim > 0, "encoder.feature_dim");
  positive(pretrain.epochs >= 0, "pretrain.epochs");
  positive(pretrain.batch_size > 1, "pretrain.batch_size");
  positive(pretrain.learning_rate > 0, "pretrain.learning_rate");
  positive(pretrain.temperature > 0, "pretrain.temperature");
  positive(evaluation.probe.epochs >= 0, "evaluation.probe_epochs");
  positive(evaluation.probe.learning_rate > 0, "evaluation.probe_learning_rate");
  positive(evaluation.stealth_samples > 1, "evaluation.stealth_samples");
  positive(evaluation.residual_examples > 0, "evaluation.residual_examples");
  if (defenses.strip_overlays < 8) throw ConfigError("defenses.strip_overlays must be at least 8");
  if (defenses.separability_samples < 16) throw ConfigError("defenses.separability_samples must be at least 16");
  positive(defenses.strip_samples > 0, "defenses.strip_samples");
  positive(defenses.nc_samples > 0, "defenses.nc_samples");
  positive(defenses.nc_steps > 0, "defenses.nc_steps");
  positive(defenses.nc_learning_rate > 0, "defenses.nc_learning_rate");
  if (defenses.nc_lambda < 0) throw ConfigError("defenses.nc_lambda must be nonnegative");
  try {
    attack_config().validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("attack: ") + e.what());
  }
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader r(j, "");
  visit(r, c);
  r.finish();
  if (c.dataset.root.empty())
    if (const char* env = std::getenv("DSBA_DATA_ROOT")) c.dataset.root = env;
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

json to_json(const RunConfig& config) {
  Writer w;
  visit(w, config);
  return w.result();
}

}  // namespace dsba
