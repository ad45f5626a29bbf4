#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "dsba/data.hpp"
#include "dsba/metrics.hpp"
#include "dsba/models.hpp"

namespace dsba {

struct ProbeConfig {
  int epochs = 200;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
};

/// Linear classifier over frozen encoder features. Features are standardized with
/// the training-set statistics stored alongside the weights.
class LinearProbe {
 public:
  LinearProbe(std::int64_t feature_dim, std::int64_t num_classes, std::uint64_t seed);

  torch::Tensor logits(const torch::Tensor& features) const;
  torch::Tensor probabilities(const torch::Tensor& features) const;
  torch::Tensor predict(const torch::Tensor& features) const;
  std::int64_t num_classes() const { return num_classes_; }

  torch::nn::Linear& layer() { return layer_; }
  torch::Tensor& mean() { return mean_; }
  torch::Tensor& scale() { return scale_; }

 private:
  std::int64_t num_classes_;
  torch::nn::Linear layer_{nullptr};
  torch::Tensor mean_;
  torch::Tensor scale_;
};

/// Full-batch cross-entropy training on precomputed features.
/// Throws DegenerateLabelsError when fewer than two classes occur.
LinearProbe train_probe_on_features(const torch::Tensor& features, const torch::Tensor& labels,
                                    std::int64_t num_classes, const ProbeConfig& config);

/// Probe on frozen features of `encoder`; the encoder is never modified.
LinearProbe train_downstream_probe(const EncoderParams& encoder, const ImageBatch& labeled, std::int64_t num_classes,
                                   const ProbeConfig& config);

/// Fraction of correct predictions, in [0,1].
double probe_accuracy(const LinearProbe& probe, const EncoderParams& encoder, const ImageBatch& labeled);

/// Images -> class logits through encoder and probe; differentiable in the images.
torch::Tensor classify_logits(const LinearProbe& probe, const EncoderParams& encoder, const torch::Tensor& images);

struct AttackMetrics {
  double ca = 0.0;   // percent
  double ba = 0.0;   // percent
  double asr = 0.0;  // percent
};

struct AttackEvaluation {
  AttackMetrics metrics;
  LinearProbe clean_probe;
  LinearProbe backdoor_probe;
};

/// CA: clean probe on clean encoder; BA: backdoor-encoder probe on clean test images;
/// ASR: share of triggered test images the backdoor probe assigns to the target class.
AttackEvaluation evaluate_attack(const EncoderParams& clean_encoder, const EncoderParams& backdoor_encoder,
                                 const GeneratorParams& generator, std::int64_t target_class,
                                 const DatasetSplit& data, const ProbeConfig& config);

struct MetricsReport {
  double ca = 0.0;
  double ba = 0.0;
  double asr = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
  double lpips_proxy = 0.0;
  double fsim = 0.0;
  double fid = 0.0;
  std::optional<double> strip_auroc;
  std::optional<double> separability_auroc;
  std::optional<double> silhouette;
  std::optional<double> nc_anomaly_index;
  std::map<std::string, std::string> metadata;

  /// Throws PreconditionError when a field leaves its documented range.
  void validate() const;
};

/// Stable key order; an infinite PSNR is written as the string "inf".
nlohmann::json to_json(const MetricsReport& report);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

}  // namespace dsba
