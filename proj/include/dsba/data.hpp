#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dsba/image_batch.hpp"
#include "dsba/models.hpp"

namespace dsba {

/// Shadow/clean pools used by the attacker plus the labeled downstream task.
/// Shadow and clean are disjoint by id; downstream test ids never occur elsewhere.
struct DatasetSplit {
  ImageBatch shadow;
  ImageBatch clean;
  ImageBatch downstream_train;
  ImageBatch downstream_test;
  std::int64_t num_classes = 0;
};

struct DatasetSpec {
  /// "synthetic-gaussian" or "cifar10-subset".
  std::string name = "synthetic-gaussian";
  /// Root directory for on-disk datasets; ignored by the synthetic generator.
  std::filesystem::path root;
  std::int64_t num_images = 512;
  std::int64_t image_size = 32;
  std::int64_t num_classes = 10;
  std::uint64_t seed = 0;
};

/// Partition sizes for `n` images: shadow n/2, clean n/4, downstream test n/16,
/// downstream train takes the remainder.
struct SplitSizes {
  std::int64_t shadow, clean, downstream_train, downstream_test;
};
SplitSizes split_sizes(std::int64_t n);

/// Loads (or synthesizes) the dataset and partitions it deterministically by `spec.seed`.
/// Throws ConfigError for an unknown name and LoadError naming the offending file.
DatasetSplit load_image_dataset(const DatasetSpec& spec);

// -------------------------------------------------------------------------
// Augmentation
// -------------------------------------------------------------------------

/// Explicit per-sample augmentation parameters. The crop is a square window of side
/// `crop_side` (fraction of the image side) centered at (`center_x`, `center_y`) in
/// normalized [-1,1] coordinates, resized back to full resolution.
struct AugmentParams {
  double crop_side = 1.0;
  double center_x = 0.0;
  double center_y = 0.0;
  bool flip = false;
  double brightness = 0.0;  // additive
  double contrast = 1.0;    // multiplicative around the per-image mean
};

struct AugmentPolicy {
  bool enabled = true;
  double min_crop_area = 0.8;
  double flip_prob = 0.5;
  double brightness = 0.1;
  double contrast = 0.0;  // jitter half-width; 0 disables

  /// The light policy applied to generator inputs: crop >= 0.8 area, flip p=0.5, brightness +-0.1.
  static AugmentPolicy light() { return {}; }
  /// Stronger views for contrastive pretraining.
  static AugmentPolicy contrastive() { return {true, 0.3, 0.5, 0.25, 0.3}; }
  static AugmentPolicy identity() { return {false, 1.0, 0.0, 0.0, 0.0}; }
};

std::vector<AugmentParams> sample_augment_params(std::int64_t count, std::uint64_t seed,
                                                 const AugmentPolicy& policy);

/// Applies explicit parameters; output is clamped to [0,1]. Differentiable in `pixels`.
torch::Tensor apply_augment(const torch::Tensor& pixels, std::span<const AugmentParams> params);

torch::Tensor light_augment(const torch::Tensor& pixels, std::uint64_t seed,
                            const AugmentPolicy& policy = AugmentPolicy::light());
ImageBatch light_augment(const ImageBatch& batch, std::uint64_t seed,
                         const AugmentPolicy& policy = AugmentPolicy::light());

// -------------------------------------------------------------------------
// Reference inputs and target features
// -------------------------------------------------------------------------

/// Reference inputs R_i for one target class and their aggregated feature.
struct ReferenceSet {
  std::int64_t target_class = 0;
  ImageBatch inputs;
  int count = 0;
  /// Mean clean-encoder feature of `inputs`, shape [feature_dim].
  torch::Tensor target_feature;
};

struct ReferenceThresholds {
  double low = 0.0;
  double high = 0.0;
};

/// Diagnostics of a selection, useful for checking the branch taken.
struct ReferenceSelectionInfo {
  double variance = 0.0;  // mean per-dimension variance of the provisional top-5
  ReferenceThresholds thresholds;
  std::vector<double> scores;  // one per target-class candidate, candidate order
};

/// Number of references for a given provisional-set variance: 3 below `low`,
/// 4 in [low, high), 5 at or above `high`.
int reference_count_for_variance(double variance, const ReferenceThresholds& thresholds);

/// Mean over dimensions of the population variance across rows of `features` [n, d].
double mean_feature_variance(const torch::Tensor& features);

/// Candidate quality: cosine to the own-class centroid minus the largest cosine to
/// any other class centroid (0 when no other class is present).
torch::Tensor score_candidates(const torch::Tensor& features, std::span<const std::int64_t> labels,
                               std::int64_t target_class);

/// Selects the top-r_i candidates of `target_class` from the labeled `candidates`.
/// Thresholds default to the 33rd/66th percentiles of the provisional-set variances
/// of every class with at least three candidates.
/// Throws InsufficientDataError with fewer than three target-class candidates.
ReferenceSet select_reference_inputs(std::int64_t target_class, const ImageBatch& candidates,
                                     const EncoderParams& clean_encoder,
                                     std::optional<ReferenceThresholds> thresholds = std::nullopt,
                                     ReferenceSelectionInfo* info = nullptr);

/// (1/r) * sum of clean-encoder features over the references; also stored into `refs`.
torch::Tensor compute_target_feature(ReferenceSet& refs, const EncoderParams& clean_encoder);

// -------------------------------------------------------------------------
// Poisoning-rate schedule
// -------------------------------------------------------------------------

struct PoisonSchedule {
  double rho_base = 0.2;
  double rho_amp = 0.5;
  int period = 20;

  /// Throws ConfigError unless rho_base in (0,1], rho_amp in [0,1), period > 0
  /// and rho_base * (1 + rho_amp) <= 1.
  void validate() const;
};

/// rho_base * (1 + rho_amp * sin(2*pi*epoch/period)), clamped into (0, 1].
double poison_rate_at_epoch(const PoisonSchedule& schedule, int epoch);

}  // namespace dsba
