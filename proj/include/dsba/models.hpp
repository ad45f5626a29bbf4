#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dsba/image_batch.hpp"

namespace dsba {

// -------------------------------------------------------------------------
// Encoder f / f'
// -------------------------------------------------------------------------

struct EncoderArch {
  std::int64_t in_channels = 3;
  std::int64_t image_size = 32;
  /// Channel width of each conv block; the first three blocks halve resolution.
  std::vector<std::int64_t> widths{16, 32, 64, 128};
  std::int64_t feature_dim = 128;

  std::string describe() const;
};

enum class EncoderRole { Clean, Backdoor };
const char* to_string(EncoderRole role);

/// Conv blocks (3x3 conv, ReLU, 2x max pooling) followed by global average
/// pooling and a linear head. Swapping in another backbone only requires an
/// implementation with the same forward contract ([N,C,H,W] -> [N,feature_dim]).
class EncoderNetImpl : public torch::nn::Module {
 public:
  explicit EncoderNetImpl(const EncoderArch& arch);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Sequential blocks_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(EncoderNet);

/// Weights plus architecture descriptor. Copies are deep: a copy never aliases the
/// source's parameters.
class EncoderParams {
 public:
  EncoderParams(const EncoderArch& arch, EncoderRole role, std::uint64_t seed);
  EncoderParams(const EncoderParams& other);
  EncoderParams& operator=(const EncoderParams& other);
  EncoderParams(EncoderParams&&) noexcept = default;
  EncoderParams& operator=(EncoderParams&&) noexcept = default;

  /// f' initialized as an exact copy of this encoder ("f' = f").
  EncoderParams backdoor_copy() const;

  const EncoderArch& arch() const { return arch_; }
  EncoderRole role() const { return role_; }
  std::uint64_t seed() const { return seed_; }
  EncoderNet& net() { return net_; }
  const EncoderNet& net() const { return net_; }
  std::string checksum() const;
  void set_requires_grad(bool on);
  void to(torch::Dtype dtype);

 private:
  EncoderArch arch_;
  EncoderRole role_;
  std::uint64_t seed_;
  EncoderNet net_;
};

/// One feature row per sample; differentiable in both weights and inputs.
/// Throws PreconditionError when the input shape does not match the architecture.
torch::Tensor encode(const EncoderParams& encoder, const torch::Tensor& pixels);
torch::Tensor encode(const EncoderParams& encoder, const ImageBatch& batch);

/// Inference-mode features computed in chunks of `chunk` samples.
torch::Tensor encode_no_grad(const EncoderParams& encoder, const torch::Tensor& pixels,
                             std::int64_t chunk = 256);

// -------------------------------------------------------------------------
// Trigger generator G_phi
// -------------------------------------------------------------------------

struct GeneratorArch {
  std::int64_t in_channels = 3;
  std::int64_t base_width = 16;
  /// Soft L_inf budget; the hard output bound is 2 * epsilon.
  double epsilon = 8.0 / 255.0;

  std::string describe() const;
};

/// Two-level U-Net: stride-2 downsampling, bilinear upsampling and skip
/// concatenations, tanh output scaled to [-2eps, 2eps].
class GeneratorNetImpl : public torch::nn::Module {
 public:
  explicit GeneratorNetImpl(const GeneratorArch& arch);
  torch::Tensor forward(torch::Tensor x);

 private:
  double bound_;
  torch::nn::Conv2d in_{nullptr}, down1_{nullptr}, down2_{nullptr};
  torch::nn::Conv2d up1_{nullptr}, fuse1_{nullptr}, up2_{nullptr}, fuse2_{nullptr}, out_{nullptr};
};
TORCH_MODULE(GeneratorNet);

class GeneratorParams {
 public:
  GeneratorParams(const GeneratorArch& arch, std::uint64_t seed);
  GeneratorParams(const GeneratorParams& other);
  GeneratorParams& operator=(const GeneratorParams& other);
  GeneratorParams(GeneratorParams&&) noexcept = default;
  GeneratorParams& operator=(GeneratorParams&&) noexcept = default;

  const GeneratorArch& arch() const { return arch_; }
  double bound() const { return 2.0 * arch_.epsilon; }
  std::uint64_t seed() const { return seed_; }
  GeneratorNet& net() { return net_; }
  const GeneratorNet& net() const { return net_; }
  std::string checksum() const;
  void set_requires_grad(bool on);
  void to(torch::Dtype dtype);

 private:
  GeneratorArch arch_;
  std::uint64_t seed_;
  GeneratorNet net_;
};

/// Per-sample additive trigger, same shape as the input, |delta| <= 2 eps.
torch::Tensor generate_trigger(const GeneratorParams& generator, const torch::Tensor& pixels);

/// clamp(x + delta, 0, 1). Throws PreconditionError on shape mismatch.
torch::Tensor apply_trigger(const torch::Tensor& pixels, const torch::Tensor& delta);
ImageBatch apply_trigger(const ImageBatch& batch, const torch::Tensor& delta);

// -------------------------------------------------------------------------
// Fixed perceptual feature network
// -------------------------------------------------------------------------

struct PerceptualArch {
  std::int64_t in_channels = 3;
  std::vector<std::int64_t> widths{8, 16, 32, 32};
  std::uint64_t seed = 1234;
};

class PerceptualNetImpl : public torch::nn::Module {
 public:
  explicit PerceptualNetImpl(const PerceptualArch& arch);
  /// Activations after each block.
  std::vector<torch::Tensor> forward(torch::Tensor x);
  std::size_t num_taps() const { return blocks_.size(); }

 private:
  std::vector<torch::nn::Sequential> blocks_;
};
TORCH_MODULE(PerceptualNet);

/// Frozen multi-layer feature extractor with tap weights alpha_l and scale
/// weights beta_s for scales {1, 0.5, 0.25}.
struct PerceptualTaps {
  PerceptualNet net{nullptr};
  std::vector<double> alpha;
  std::vector<double> scales{1.0, 0.5, 0.25};
  std::vector<double> beta;

  /// Seeded random network, uniform alpha, uniform beta.
  static PerceptualTaps make(const PerceptualArch& arch = {});
  /// Smallest input side for which the deepest tap still has spatial extent.
  std::int64_t min_input_size() const;
  /// Throws ConfigError unless weights are nonnegative and each group sums to 1.
  void validate() const;
};

// -------------------------------------------------------------------------
// Contrastive pretraining of the clean encoder
// -------------------------------------------------------------------------

struct PretrainConfig {
  EncoderArch arch;
  int epochs = 20;
  std::int64_t batch_size = 256;
  double learning_rate = 3e-3;
  double temperature = 0.5;
  std::int64_t projection_dim = 64;
  std::uint64_t seed = 0;
};

/// Normalized-temperature cross-entropy over 2N views, positives at (i, i+N).
torch::Tensor nt_xent_loss(const torch::Tensor& z1, const torch::Tensor& z2, double temperature);

/// Contrastive pretraining on `unlabeled`; the projection head is discarded.
/// Throws TrainingDivergedError carrying the epoch on a non-finite loss.
EncoderParams pretrain_clean_encoder(const ImageBatch& unlabeled, const PretrainConfig& config);

}  // namespace dsba
