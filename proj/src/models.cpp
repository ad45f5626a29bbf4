#include "dsba/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dsba/data.hpp"
#include "dsba/errors.hpp"
#include "dsba/hashing.hpp"

namespace F = torch::nn::functional;

namespace dsba {
namespace {

torch::nn::Conv2d conv3x3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

void copy_weights(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto dst_params = dst.named_parameters();
  for (const auto& p : src.named_parameters()) dst_params[p.key()].copy_(p.value());
  auto dst_buffers = dst.named_buffers();
  for (const auto& b : src.named_buffers()) dst_buffers[b.key()].copy_(b.value());
}

torch::Dtype module_dtype(const torch::nn::Module& m) {
  auto params = m.parameters();
  return params.empty() ? torch::kFloat32 : params.front().scalar_type();
}

template <typename Net>
void set_grad(Net& net, bool on) {
  for (auto& p : net->parameters()) p.set_requires_grad(on);
}

}  // namespace

// ------------------------------------------------------------------ encoder

std::string EncoderArch::describe() const {
  std::ostringstream os;
  os << "conv-encoder(in=" << in_channels << ",size=" << image_size << ",widths=";
  for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "-" : "") << widths[i];
  os << ",dim=" << feature_dim << ")";
  return os.str();
}

const char* to_string(EncoderRole role) { return role == EncoderRole::Clean ? "clean" : "backdoor"; }

EncoderNetImpl::EncoderNetImpl(const EncoderArch& arch) {
  if (arch.widths.empty()) throw ConfigError("encoder needs at least one conv block");
  blocks_ = torch::nn::Sequential();
  std::int64_t in = arch.in_channels;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) {
    blocks_->push_back(conv3x3(in, arch.widths[i]));
    blocks_->push_back(torch::nn::ReLU());
    if (i + 1 < arch.widths.size()) blocks_->push_back(torch::nn::MaxPool2d(2));
    in = arch.widths[i];
  }
  blocks_ = register_module("blocks", blocks_);
  head_ = register_module("head", torch::nn::Linear(in, arch.feature_dim));
}

torch::Tensor EncoderNetImpl::forward(torch::Tensor x) {
  auto h = blocks_->forward(x);
  h = h.mean({2, 3});
  return head_->forward(h);
}

EncoderParams::EncoderParams(const EncoderArch& arch, EncoderRole role, std::uint64_t seed)
    : arch_(arch), role_(role), seed_(seed), net_(nullptr) {
  torch::manual_seed(seed);
  net_ = EncoderNet(arch);
}

EncoderParams::EncoderParams(const EncoderParams& other)
    : arch_(other.arch_), role_(other.role_), seed_(other.seed_), net_(EncoderNet(other.arch_)) {
  net_->to(module_dtype(*other.net_));
  copy_weights(*net_, *other.net_);
  for (auto& p : net_->parameters()) p.set_requires_grad(true);
}

EncoderParams& EncoderParams::operator=(const EncoderParams& other) {
  if (this != &other) *this = EncoderParams(other);
  return *this;
}

EncoderParams EncoderParams::backdoor_copy() const {
  EncoderParams copy(*this);
  copy.role_ = EncoderRole::Backdoor;
  return copy;
}

std::string EncoderParams::checksum() const { return module_checksum(*net_); }
void EncoderParams::set_requires_grad(bool on) { set_grad(net_, on); }
void EncoderParams::to(torch::Dtype dtype) { net_->to(dtype); }

torch::Tensor encode(const EncoderParams& encoder, const torch::Tensor& pixels) {
  const auto& arch = encoder.arch();
  if (pixels.dim() != 4 || pixels.size(1) != arch.in_channels || pixels.size(2) != arch.image_size ||
      pixels.size(3) != arch.image_size) {
    std::ostringstream os;
    os << "encode: expected [N," << arch.in_channels << "," << arch.image_size << "," << arch.image_size
       << "] input, got " << pixels.sizes();
    throw PreconditionError(os.str());
  }
  return const_cast<EncoderNet&>(encoder.net())->forward(pixels);
}

torch::Tensor encode(const EncoderParams& encoder, const ImageBatch& batch) {
  return encode(encoder, batch.pixels);
}

torch::Tensor encode_no_grad(const EncoderParams& encoder, const torch::Tensor& pixels, std::int64_t chunk) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < pixels.size(0); i += chunk) {
    parts.push_back(encode(encoder, pixels.slice(0, i, std::min(i + chunk, pixels.size(0)))));
  }
  if (parts.empty()) return torch::zeros({0, encoder.arch().feature_dim});
  return torch::cat(parts, 0);
}

// ---------------------------------------------------------------- generator

std::string GeneratorArch::describe() const {
  std::ostringstream os;
  os.precision(17);
  os << "unet-generator(in=" << in_channels << ",width=" << base_width << ",eps=" << epsilon << ")";
  return os.str();
}

GeneratorNetImpl::GeneratorNetImpl(const GeneratorArch& arch) : bound_(2.0 * arch.epsilon) {
  const auto c = arch.in_channels;
  const auto w = arch.base_width;
  in_ = register_module("in", conv3x3(c, w));
  down1_ = register_module("down1", conv3x3(w, 2 * w, 2));
  down2_ = register_module("down2", conv3x3(2 * w, 4 * w, 2));
  up1_ = register_module("up1", conv3x3(4 * w, 2 * w));
  fuse1_ = register_module("fuse1", conv3x3(4 * w, 2 * w));
  up2_ = register_module("up2", conv3x3(2 * w, w));
  fuse2_ = register_module("fuse2", conv3x3(2 * w, w));
  out_ = register_module("out", conv3x3(w, c));
}

torch::Tensor GeneratorNetImpl::forward(torch::Tensor x) {
  auto act = [](const torch::Tensor& t) { return F::leaky_relu(t, F::LeakyReLUFuncOptions().negative_slope(0.2)); };
  auto up = [](const torch::Tensor& t, const torch::Tensor& like) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{like.size(2), like.size(3)})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto s0 = act(in_->forward(x));
  auto s1 = act(down1_->forward(s0));
  auto b = act(down2_->forward(s1));
  auto u1 = act(up1_->forward(up(b, s1)));
  u1 = act(fuse1_->forward(torch::cat({u1, s1}, 1)));
  auto u2 = act(up2_->forward(up(u1, s0)));
  u2 = act(fuse2_->forward(torch::cat({u2, s0}, 1)));
  return torch::tanh(out_->forward(u2)) * bound_;
}

GeneratorParams::GeneratorParams(const GeneratorArch& arch, std::uint64_t seed)
    : arch_(arch), seed_(seed), net_(nullptr) {
  if (!(arch.epsilon > 0.0)) throw ConfigError("generator epsilon must be positive");
  torch::manual_seed(seed);
  net_ = GeneratorNet(arch);
}

GeneratorParams::GeneratorParams(const GeneratorParams& other)
    : arch_(other.arch_), seed_(other.seed_), net_(GeneratorNet(other.arch_)) {
  net_->to(module_dtype(*other.net_));
  copy_weights(*net_, *other.net_);
  for (auto& p : net_->parameters()) p.set_requires_grad(true);
}

GeneratorParams& GeneratorParams::operator=(const GeneratorParams& other) {
  if (this != &other) *this = GeneratorParams(other);
  return *this;
}

std::string GeneratorParams::checksum() const { return module_checksum(*net_); }
void GeneratorParams::set_requires_grad(bool on) { set_grad(net_, on); }
void GeneratorParams::to(torch::Dtype dtype) { net_->to(dtype); }

torch::Tensor generate_trigger(const GeneratorParams& generator, const torch::Tensor& pixels) {
  if (pixels.dim() != 4 || pixels.size(1) != generator.arch().in_channels) {
    std::ostringstream os;
    os << "generate_trigger: expected [N," << generator.arch().in_channels << ",H,W] input, got "
       << pixels.sizes();
    throw PreconditionError(os.str());
  }
  return const_cast<GeneratorNet&>(generator.net())->forward(pixels);
}

torch::Tensor apply_trigger(const torch::Tensor& pixels, const torch::Tensor& delta) {
  require_same_shape(pixels, delta, "apply_trigger");
  return torch::clamp(pixels + delta, 0.0, 1.0);
}

ImageBatch apply_trigger(const ImageBatch& batch, const torch::Tensor& delta) {
  ImageBatch out = batch;
  out.pixels = apply_trigger(batch.pixels, delta);
  return out;
}

// --------------------------------------------------------------- perceptual

PerceptualNetImpl::PerceptualNetImpl(const PerceptualArch& arch) {
  std::int64_t in = arch.in_channels;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) {
    torch::nn::Sequential block;
    if (i > 0) block->push_back(torch::nn::AvgPool2d(2));
    block->push_back(conv3x3(in, arch.widths[i]));
    block->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    blocks_.push_back(register_module("block" + std::to_string(i), block));
    in = arch.widths[i];
  }
}

std::vector<torch::Tensor> PerceptualNetImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> taps;
  taps.reserve(blocks_.size());
  for (auto& block : blocks_) {
    x = block->forward(x);
    taps.push_back(x);
  }
  return taps;
}

PerceptualTaps PerceptualTaps::make(const PerceptualArch& arch) {
  PerceptualTaps taps;
  torch::manual_seed(arch.seed);
  taps.net = PerceptualNet(arch);
  for (auto& p : taps.net->parameters()) p.set_requires_grad(false);
  taps.net->eval();
  const auto n = static_cast<double>(arch.widths.size());
  taps.alpha.assign(arch.widths.size(), 1.0 / n);
  taps.beta.assign(taps.scales.size(), 1.0 / static_cast<double>(taps.scales.size()));
  return taps;
}

std::int64_t PerceptualTaps::min_input_size() const {
  return std::int64_t{1} << (net->num_taps() - 1);
}

void PerceptualTaps::validate() const {
  auto check = [](const std::vector<double>& w, std::size_t n, const char* name) {
    if (w.size() != n) throw ConfigError(std::string("perceptual ") + name + " has wrong length");
    double sum = 0.0;
    for (double v : w) {
      if (!(v >= 0.0)) throw ConfigError(std::string("perceptual ") + name + " must be nonnegative");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(std::string("perceptual ") + name + " must sum to 1");
  };
  if (!net) throw ConfigError("perceptual network missing");
  check(alpha, net->num_taps(), "alpha");
  check(beta, scales.size(), "beta");
}

// -------------------------------------------------------------- pretraining

torch::Tensor nt_xent_loss(const torch::Tensor& z1, const torch::Tensor& z2, double temperature) {
  const auto n = z1.size(0);
  auto z = F::normalize(torch::cat({z1, z2}, 0), F::NormalizeFuncOptions().dim(1));
  auto sim = torch::matmul(z, z.t()) / temperature;
  auto self_mask = torch::eye(2 * n, torch::TensorOptions().dtype(torch::kBool));
  sim = sim.masked_fill(self_mask, -1e9);
  auto idx = torch::arange(2 * n, torch::kLong);
  auto positives = torch::cat({idx.slice(0, 0, n) + n, idx.slice(0, 0, n)});
  return F::cross_entropy(sim, positives);
}

EncoderParams pretrain_clean_encoder(const ImageBatch& unlabeled, const PretrainConfig& config) {
  EncoderParams encoder(config.arch, EncoderRole::Clean, config.seed);
  if (config.epochs <= 0) return encoder;
  const auto n = unlabeled.size();
  if (n < 2) throw PreconditionError("pretrain_clean_encoder: need at least two images");
  if (!(config.temperature > 0.0)) throw ConfigError("pretrain temperature must be positive");

  torch::manual_seed(config.seed + 1);
  const auto dim = config.arch.feature_dim;
  torch::nn::Sequential head(torch::nn::Linear(dim, dim), torch::nn::ReLU(),
                             torch::nn::Linear(dim, config.projection_dim));
  std::vector<torch::Tensor> params = encoder.net()->parameters();
  for (auto& p : head->parameters()) params.push_back(p);
  torch::optim::Adam optimizer(params, torch::optim::AdamOptions(config.learning_rate));

  std::mt19937_64 rng(config.seed);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto batch = std::min(config.batch_size, n);
  const auto policy = AugmentPolicy::contrastive();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t start = 0; start + 1 < n; start += batch) {
      const auto end = std::min(start + batch, n);
      if (end - start < 2) break;
      auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + end));
      auto x = unlabeled.pixels.index_select(0, idx);
      auto v1 = apply_augment(x, sample_augment_params(end - start, rng(), policy));
      auto v2 = apply_augment(x, sample_augment_params(end - start, rng(), policy));
      auto loss = nt_xent_loss(head->forward(encode(encoder, v1)), head->forward(encode(encoder, v2)),
                               config.temperature);
      if (!std::isfinite(loss.item<double>())) {
        throw TrainingDivergedError("contrastive pretraining diverged at epoch " + std::to_string(epoch), epoch);
      }
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
    }
  }
  return encoder;
}

}  // namespace dsba
