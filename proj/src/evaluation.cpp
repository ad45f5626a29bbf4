#include "dsba/evaluation.hpp"

#include <cmath>

#include "dsba/errors.hpp"

namespace dsba {

LinearProbe::LinearProbe(std::int64_t feature_dim, std::int64_t num_classes, std::uint64_t seed)
    : num_classes_(num_classes) {
  torch::manual_seed(seed);
  layer_ = torch::nn::Linear(feature_dim, num_classes);
  mean_ = torch::zeros({feature_dim});
  scale_ = torch::ones({feature_dim});
}

torch::Tensor LinearProbe::logits(const torch::Tensor& features) const {
  return const_cast<torch::nn::Linear&>(layer_)->forward((features - mean_) / scale_);
}

torch::Tensor LinearProbe::probabilities(const torch::Tensor& features) const {
  return torch::softmax(logits(features), 1);
}

torch::Tensor LinearProbe::predict(const torch::Tensor& features) const { return logits(features).argmax(1); }

LinearProbe train_probe_on_features(const torch::Tensor& features, const torch::Tensor& labels,
                                    std::int64_t num_classes, const ProbeConfig& config) {
  if (features.dim() != 2 || features.size(0) == 0 || features.size(0) != labels.size(0))
    throw PreconditionError("probe training needs one nonempty feature row per label");
  if (std::get<0>(at::_unique(labels)).numel() < 2)
    throw DegenerateLabelsError("probe training needs at least two distinct classes");
  const auto x = features.detach().to(torch::kFloat32);
  LinearProbe probe(x.size(1), num_classes, config.seed);
  probe.mean() = x.mean(0);
  probe.scale() = x.std(0, /*unbiased=*/false) + 1e-6;
  if (config.epochs <= 0) return probe;

  torch::AutoGradMode grad_on(true);
  torch::optim::Adam opt(probe.layer()->parameters(), torch::optim::AdamOptions(config.learning_rate));
  const auto y = labels.to(torch::kLong);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto loss = torch::nn::functional::cross_entropy(probe.logits(x), y);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  for (auto& p : probe.layer()->parameters()) p.set_requires_grad(false);
  return probe;
}

LinearProbe train_downstream_probe(const EncoderParams& encoder, const ImageBatch& labeled, std::int64_t num_classes,
                                   const ProbeConfig& config) {
  if (labeled.empty() || !labeled.has_labels()) throw PreconditionError("probe training needs labeled images");
  return train_probe_on_features(encode_no_grad(encoder, labeled.pixels), labeled.labels_tensor(), num_classes,
                                 config);
}

double probe_accuracy(const LinearProbe& probe, const EncoderParams& encoder, const ImageBatch& labeled) {
  if (labeled.empty()) throw PreconditionError("accuracy on an empty batch");
  torch::NoGradGuard no_grad;
  const auto predicted = probe.predict(encode_no_grad(encoder, labeled.pixels));
  return predicted.eq(labeled.labels_tensor()).to(torch::kFloat64).mean().item<double>();
}

torch::Tensor classify_logits(const LinearProbe& probe, const EncoderParams& encoder, const torch::Tensor& images) {
  return probe.logits(encode(encoder, images));
}

AttackEvaluation evaluate_attack(const EncoderParams& clean_encoder, const EncoderParams& backdoor_encoder,
                                 const GeneratorParams& generator, std::int64_t target_class,
                                 const DatasetSplit& data, const ProbeConfig& config) {
  if (data.downstream_test.empty()) throw PreconditionError("evaluate_attack: empty test set");
  auto clean_probe = train_downstream_probe(clean_encoder, data.downstream_train, data.num_classes, config);
  auto backdoor_probe = train_downstream_probe(backdoor_encoder, data.downstream_train, data.num_classes, config);
  AttackMetrics m;
  m.ca = 100.0 * probe_accuracy(clean_probe, clean_encoder, data.downstream_test);
  m.ba = 100.0 * probe_accuracy(backdoor_probe, backdoor_encoder, data.downstream_test);
  {
    torch::NoGradGuard no_grad;
    const auto& x = data.downstream_test.pixels;
    const auto poisoned = apply_trigger(x, generate_trigger(generator, x));
    const auto predicted = backdoor_probe.predict(encode_no_grad(backdoor_encoder, poisoned));
    m.asr = 100.0 * predicted.eq(target_class).to(torch::kFloat64).mean().item<double>();
  }
  return {m, std::move(clean_probe), std::move(backdoor_probe)};
}

void MetricsReport::validate() const {
  const auto pct = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 100.0)) throw PreconditionError(std::string(name) + " outside [0, 100]");
  };
  pct(ca, "ca");
  pct(ba, "ba");
  pct(asr, "asr");
  if (!(ssim >= 0.0 && ssim <= 1.0)) throw PreconditionError("ssim outside [0, 1]");
  if (!(fsim >= 0.0 && fsim <= 1.0)) throw PreconditionError("fsim outside [0, 1]");
  if (!(psnr >= 0.0)) throw PreconditionError("psnr negative");
  if (!(fid >= 0.0)) throw PreconditionError("fid negative");
  if (!(lpips_proxy >= 0.0)) throw PreconditionError("lpips_proxy negative");
}

namespace {

nlohmann::json optional_number(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

std::optional<double> read_optional(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["ca"] = r.ca;
  j["ba"] = r.ba;
  j["asr"] = r.asr;
  j["ssim"] = r.ssim;
  j["psnr"] = std::isinf(r.psnr) ? nlohmann::json("inf") : nlohmann::json(r.psnr);
  j["lpips_proxy"] = r.lpips_proxy;
  j["fsim"] = r.fsim;
  j["fid"] = r.fid;
  j["strip_auroc"] = optional_number(r.strip_auroc);
  j["separability_auroc"] = optional_number(r.separability_auroc);
  j["silhouette"] = optional_number(r.silhouette);
  j["nc_anomaly_index"] = optional_number(r.nc_anomaly_index);
  j["metadata"] = r.metadata;
  return j;
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.ca = j.at("ca").get<double>();
  r.ba = j.at("ba").get<double>();
  r.asr = j.at("asr").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.psnr = j.at("psnr").is_string() ? kPsnrInfinity : j.at("psnr").get<double>();
  r.lpips_proxy = j.at("lpips_proxy").get<double>();
  r.fsim = j.at("fsim").get<double>();
  r.fid = j.at("fid").get<double>();
  r.strip_auroc = read_optional(j, "strip_auroc");
  r.separability_auroc = read_optional(j, "separability_auroc");
  r.silhouette = read_optional(j, "silhouette");
  r.nc_anomaly_index = read_optional(j, "nc_anomaly_index");
  if (j.contains("metadata")) r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  return r;
}

}  // namespace dsba
