#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "dsba/evaluation.hpp"
#include "dsba/models.hpp"

namespace dsba {

/// Images [N,C,H,W] -> class logits [N,num_classes]. Must be differentiable in the
/// images for trigger inversion.
using Classifier = std::function<torch::Tensor(const torch::Tensor&)>;

/// Encoder followed by a probe.
Classifier make_classifier(const LinearProbe& probe, const EncoderParams& encoder);

/// Probability that a random positive scores above a random negative; ties count 1/2.
/// Throws PreconditionError when either population is empty.
double auroc(std::span<const double> negatives, std::span<const double> positives);

struct SummaryStats {
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
};
SummaryStats summarize(std::span<const double> values);

// -------------------------------------------------------------------------
// STRIP
// -------------------------------------------------------------------------

struct StripConfig {
  int n_overlays = 64;
  std::uint64_t seed = 0;
};

/// Mean prediction entropy of each sample blended 50/50 with `n_overlays` random
/// images from `clean_pool`. Throws PreconditionError for n_overlays < 8 or an empty pool.
std::vector<double> strip_entropies(const Classifier& classifier, const torch::Tensor& samples,
                                    const torch::Tensor& clean_pool, const StripConfig& config);

struct StripResult {
  std::vector<double> clean_entropy;
  std::vector<double> poisoned_entropy;
  SummaryStats clean_stats;
  SummaryStats poisoned_stats;
  /// Detector score is the negated entropy, poisoned samples are positives.
  double auroc = 0.5;
};

StripResult strip_entropy_test(const Classifier& classifier, const torch::Tensor& clean_samples,
                               const torch::Tensor& poisoned_samples, const torch::Tensor& clean_pool,
                               const StripConfig& config);

// -------------------------------------------------------------------------
// Latent separability
// -------------------------------------------------------------------------

struct SeparabilityResult {
  double probe_auroc = 0.5;
  double silhouette = 0.0;
  /// Pooled features projected onto the first two principal components, clean rows first.
  torch::Tensor projection;
  /// k-means assignment of each projected row.
  std::vector<int> cluster;
};

/// Cross-validated (5-fold, stratified) logistic-regression AUROC for clean vs poisoned
/// features, plus the 2-means silhouette after a 2-component PCA.
/// Throws PreconditionError with fewer than 16 rows per side or rank-0 pooled features.
SeparabilityResult latent_separability_score(const torch::Tensor& clean_features,
                                             const torch::Tensor& poisoned_features, std::uint64_t seed = 0);
SeparabilityResult latent_separability_score(const EncoderParams& encoder, const torch::Tensor& clean,
                                             const torch::Tensor& poisoned, std::uint64_t seed = 0);

/// L2-regularized logistic regression fitted by Newton's method on standardized features.
/// Returns the decision value of every row of `test`.
torch::Tensor logistic_decision_values(const torch::Tensor& train, const torch::Tensor& labels,
                                       const torch::Tensor& test, double l2 = 1e-2);

/// Deterministic k-means (k-means++ seeding). Returns one cluster index per row.
std::vector<int> kmeans(const torch::Tensor& points, int k, std::uint64_t seed, int iterations = 100);

/// Mean silhouette coefficient; 0 when only one cluster is populated.
double silhouette_score(const torch::Tensor& points, std::span<const int> cluster);

/// Rows projected onto the top `components` principal directions of the centered data.
torch::Tensor pca_project(const torch::Tensor& features, int components);

// -------------------------------------------------------------------------
// Trigger inversion anomaly index
// -------------------------------------------------------------------------

struct NcConfig {
  int steps = 200;
  double lambda = 0.01;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
};

struct NcResult {
  /// L1 norm of the inverted mask per class; the pixel count when inversion diverged.
  std::vector<double> norms;
  double anomaly_index = 0.0;
  std::int64_t flagged_class = 0;
};

inline constexpr double kMadFloor = 1e-6;

/// |median - min| / (1.4826 * max(MAD, floor)). Throws PreconditionError for an empty span.
double anomaly_index_from_norms(std::span<const double> norms);

/// Inverts a static mask+pattern per class with identical initialization and reports
/// the anomaly index of the smallest mask. Throws PreconditionError for fewer than two classes.
NcResult nc_anomaly_index(const Classifier& classifier, const torch::Tensor& images, std::int64_t num_classes,
                          const NcConfig& config);

struct DefenseReport {
  StripResult strip;
  SeparabilityResult separability;
  NcResult nc;
};

nlohmann::json to_json(const StripResult& r);
nlohmann::json to_json(const SeparabilityResult& r);
nlohmann::json to_json(const NcResult& r);
nlohmann::json to_json(const DefenseReport& r);

}  // namespace dsba
