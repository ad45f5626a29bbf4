#include "dsba/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "dsba/errors.hpp"

namespace F = torch::nn::functional;

namespace dsba {

// ------------------------------------------------------------------ batches

ImageBatch ImageBatch::select(std::span<const std::int64_t> indices) const {
  ImageBatch out;
  auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kLong);
  out.pixels = pixels.index_select(0, idx);
  out.ids.reserve(indices.size());
  for (auto i : indices) {
    out.ids.push_back(ids[static_cast<std::size_t>(i)]);
    if (has_labels()) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

ImageBatch ImageBatch::slice(std::int64_t begin, std::int64_t end) const {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(std::max<std::int64_t>(0, end - begin)));
  std::iota(idx.begin(), idx.end(), begin);
  return select(idx);
}

std::vector<std::int64_t> ImageBatch::indices_of_class(std::int64_t label) const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

torch::Tensor ImageBatch::labels_tensor() const { return torch::tensor(labels, torch::kLong); }

void ImageBatch::validate() const {
  if (!pixels.defined() || pixels.dim() != 4) throw PreconditionError("image batch must be a 4-D tensor");
  const auto n = static_cast<std::size_t>(pixels.size(0));
  if (ids.size() != n) throw PreconditionError("image batch ids do not match batch size");
  if (!labels.empty() && labels.size() != n) throw PreconditionError("image batch labels do not match batch size");
  if (n > 0) {
    const auto lo = pixels.min().item<double>();
    const auto hi = pixels.max().item<double>();
    if (lo < 0.0 || hi > 1.0) throw PreconditionError("image batch pixels must lie in [0,1]");
  }
}

ImageBatch concat(const ImageBatch& a, const ImageBatch& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.has_labels() != b.has_labels()) throw PreconditionError("concat: labeled and unlabeled batches");
  ImageBatch out;
  out.pixels = torch::cat({a.pixels, b.pixels}, 0);
  out.ids = a.ids;
  out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.defined() || !b.defined() || a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch";
    if (a.defined() && b.defined()) os << " " << a.sizes() << " vs " << b.sizes();
    throw PreconditionError(os.str());
  }
}

// ----------------------------------------------------------------- datasets

SplitSizes split_sizes(std::int64_t n) {
  SplitSizes s{};
  s.shadow = n / 2;
  s.clean = n / 4;
  s.downstream_test = n / 16;
  s.downstream_train = n - s.shadow - s.clean - s.downstream_test;
  return s;
}

namespace {

// Sum of a few random low-frequency plane waves, one field per channel.
torch::Tensor smooth_field(std::mt19937_64& rng, std::int64_t channels, std::int64_t size, int waves,
                           double max_cycles) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto coords = torch::arange(size, torch::kDouble) / static_cast<double>(size);
  auto yy = coords.view({size, 1});
  auto xx = coords.view({1, size});
  auto field = torch::zeros({channels, size, size}, torch::kDouble);
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int w = 0; w < waves; ++w) {
      const double fx = (unit(rng) * 2.0 - 1.0) * max_cycles;
      const double fy = (unit(rng) * 2.0 - 1.0) * max_cycles;
      const double phase = unit(rng) * 2.0 * std::numbers::pi;
      field[c] += torch::cos(2.0 * std::numbers::pi * (fx * xx + fy * yy) + phase) / static_cast<double>(waves);
    }
  }
  return field;
}

struct RawImages {
  torch::Tensor pixels;  // float32 [N,C,H,W]
  std::vector<std::int64_t> labels;
  std::int64_t num_classes;
};

// Class-conditional Gaussian images: a per-class smooth color prototype, a per-sample
// smooth variation, and i.i.d. pixel noise.
RawImages synthesize_gaussian(const DatasetSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic-gaussian needs at least two classes");
  const std::int64_t c = 3;
  const auto size = spec.image_size;
  std::mt19937_64 rng(spec.seed * 7919 + 17);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<torch::Tensor> prototypes;
  for (std::int64_t k = 0; k < spec.num_classes; ++k) {
    auto base = torch::empty({c, 1, 1}, torch::kDouble);
    for (std::int64_t ch = 0; ch < c; ++ch) base[ch] = 0.3 + 0.4 * unit(rng);
    prototypes.push_back(base + 0.22 * smooth_field(rng, c, size, 3, 3.0));
  }
  torch::manual_seed(spec.seed * 7919 + 23);
  RawImages raw;
  raw.num_classes = spec.num_classes;
  auto pixels = torch::empty({spec.num_images, c, size, size}, torch::kDouble);
  for (std::int64_t i = 0; i < spec.num_images; ++i) {
    const auto label = i % spec.num_classes;
    raw.labels.push_back(label);
    auto img = prototypes[static_cast<std::size_t>(label)] + 0.12 * smooth_field(rng, c, size, 2, 2.0) +
               0.04 * torch::randn({c, size, size}, torch::kDouble);
    pixels[i] = img.clamp(0.0, 1.0);
  }
  raw.pixels = pixels.to(torch::kFloat32);
  return raw;
}

// CIFAR-10 binary layout: one label byte followed by 3072 bytes of planar RGB.
RawImages load_cifar10(const DatasetSpec& spec) {
  constexpr std::int64_t kRecord = 1 + 3 * 32 * 32;
  std::filesystem::path dir = spec.root;
  if (std::filesystem::exists(dir / "cifar-10-batches-bin")) dir /= "cifar-10-batches-bin";
  RawImages raw;
  raw.num_classes = 10;
  std::vector<std::uint8_t> bytes;
  std::int64_t collected = 0;
  for (int b = 1; b <= 5 && collected < spec.num_images; ++b) {
    const auto file = dir / ("data_batch_" + std::to_string(b) + ".bin");
    std::ifstream in(file, std::ios::binary);
    if (!in) throw LoadError("missing dataset file: " + file.string());
    std::vector<std::uint8_t> chunk((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (chunk.empty() || chunk.size() % kRecord != 0) {
      throw LoadError("corrupt dataset file (size not a multiple of 3073 bytes): " + file.string());
    }
    const auto records = static_cast<std::int64_t>(chunk.size()) / kRecord;
    const auto take = std::min(records, spec.num_images - collected);
    for (std::int64_t r = 0; r < take; ++r) {
      const auto label = chunk[static_cast<std::size_t>(r * kRecord)];
      if (label > 9) throw LoadError("corrupt dataset file (label out of range): " + file.string());
      raw.labels.push_back(label);
    }
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + take * kRecord);
    collected += take;
  }
  if (collected < spec.num_images) {
    throw LoadError("dataset at " + dir.string() + " holds only " + std::to_string(collected) + " images");
  }
  auto all = torch::from_blob(bytes.data(), {collected, kRecord}, torch::kUInt8).clone();
  auto pixels = all.slice(1, 1).reshape({collected, 3, 32, 32}).to(torch::kFloat32) / 255.0;
  if (spec.image_size != 32) {
    pixels = F::interpolate(pixels, F::InterpolateFuncOptions()
                                        .size(std::vector<std::int64_t>{spec.image_size, spec.image_size})
                                        .mode(torch::kBilinear)
                                        .align_corners(false))
                 .clamp(0.0, 1.0);
  }
  raw.pixels = pixels;
  return raw;
}

}  // namespace

DatasetSplit load_image_dataset(const DatasetSpec& spec) {
  if (spec.num_images < 16) throw ConfigError("dataset needs at least 16 images");
  if (spec.image_size < 8) throw ConfigError("image size must be at least 8");
  RawImages raw;
  if (spec.name == "synthetic-gaussian") {
    raw = synthesize_gaussian(spec);
  } else if (spec.name == "cifar10-subset") {
    raw = load_cifar10(spec);
  } else {
    throw ConfigError("unknown dataset id '" + spec.name + "'");
  }

  std::vector<std::int64_t> order(static_cast<std::size_t>(spec.num_images));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);

  ImageBatch all;
  all.pixels = raw.pixels;
  all.labels = raw.labels;
  all.ids.resize(order.size());
  std::iota(all.ids.begin(), all.ids.end(), 0);

  const auto sizes = split_sizes(spec.num_images);
  auto take = [&](std::int64_t begin, std::int64_t count) {
    return all.select(std::span<const std::int64_t>(order).subspan(static_cast<std::size_t>(begin),
                                                                    static_cast<std::size_t>(count)));
  };
  DatasetSplit split;
  split.num_classes = raw.num_classes;
  std::int64_t at = 0;
  split.shadow = take(at, sizes.shadow);
  at += sizes.shadow;
  split.clean = take(at, sizes.clean);
  at += sizes.clean;
  split.downstream_train = take(at, sizes.downstream_train);
  at += sizes.downstream_train;
  split.downstream_test = take(at, sizes.downstream_test);
  // The attacker's pools are unlabeled.
  split.shadow.labels.clear();
  split.clean.labels.clear();
  return split;
}

// ------------------------------------------------------------- augmentation

std::vector<AugmentParams> sample_augment_params(std::int64_t count, std::uint64_t seed,
                                                 const AugmentPolicy& policy) {
  std::vector<AugmentParams> out(static_cast<std::size_t>(count));
  if (!policy.enabled) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& p : out) {
    const double area = policy.min_crop_area + (1.0 - policy.min_crop_area) * unit(rng);
    p.crop_side = std::sqrt(area);
    const double slack = 1.0 - p.crop_side;
    p.center_x = (2.0 * unit(rng) - 1.0) * slack;
    p.center_y = (2.0 * unit(rng) - 1.0) * slack;
    p.flip = unit(rng) < policy.flip_prob;
    p.brightness = (2.0 * unit(rng) - 1.0) * policy.brightness;
    p.contrast = 1.0 + (2.0 * unit(rng) - 1.0) * policy.contrast;
  }
  return out;
}

torch::Tensor apply_augment(const torch::Tensor& pixels, std::span<const AugmentParams> params) {
  if (pixels.dim() != 4 || static_cast<std::size_t>(pixels.size(0)) != params.size()) {
    throw PreconditionError("apply_augment: need one parameter set per image");
  }
  const auto n = pixels.size(0);
  if (n == 0) return pixels;
  auto opts = torch::TensorOptions().dtype(pixels.scalar_type());
  auto theta = torch::zeros({n, 2, 3}, torch::kDouble);
  auto bright = torch::empty({n, 1, 1, 1}, torch::kDouble);
  auto contrast = torch::empty({n, 1, 1, 1}, torch::kDouble);
  auto acc = theta.accessor<double, 3>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& p = params[static_cast<std::size_t>(i)];
    acc[i][0][0] = p.crop_side * (p.flip ? -1.0 : 1.0);
    acc[i][0][2] = p.center_x;
    acc[i][1][1] = p.crop_side;
    acc[i][1][2] = p.center_y;
    bright[i] = p.brightness;
    contrast[i] = p.contrast;
  }
  auto grid = F::affine_grid(theta.to(opts), pixels.sizes(), false);
  auto out = F::grid_sample(pixels, grid,
                            F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
  auto mean = out.mean({1, 2, 3}, true);
  out = (out - mean) * contrast.to(opts) + mean + bright.to(opts);
  return out.clamp(0.0, 1.0);
}

torch::Tensor light_augment(const torch::Tensor& pixels, std::uint64_t seed, const AugmentPolicy& policy) {
  if (!policy.enabled) return pixels;
  return apply_augment(pixels, sample_augment_params(pixels.size(0), seed, policy));
}

ImageBatch light_augment(const ImageBatch& batch, std::uint64_t seed, const AugmentPolicy& policy) {
  batch.validate();
  ImageBatch out = batch;
  out.pixels = light_augment(batch.pixels, seed, policy);
  return out;
}

// --------------------------------------------------------------- references

int reference_count_for_variance(double variance, const ReferenceThresholds& thresholds) {
  if (variance < thresholds.low) return 3;
  if (variance < thresholds.high) return 4;
  return 5;
}

double mean_feature_variance(const torch::Tensor& features) {
  if (features.size(0) == 0) throw PreconditionError("mean_feature_variance: empty feature set");
  return features.to(torch::kDouble).var(0, /*unbiased=*/false).mean().item<double>();
}

torch::Tensor score_candidates(const torch::Tensor& features, std::span<const std::int64_t> labels,
                               std::int64_t target_class) {
  if (static_cast<std::size_t>(features.size(0)) != labels.size()) {
    throw PreconditionError("score_candidates: one label per feature row required");
  }
  auto feats = features.to(torch::kDouble);
  std::vector<std::int64_t> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  auto labels_t = torch::tensor(std::vector<std::int64_t>(labels.begin(), labels.end()), torch::kLong);
  auto cosine_to = [&](const torch::Tensor& rows, const torch::Tensor& centroid) {
    return F::cosine_similarity(rows, centroid.unsqueeze(0).expand_as(rows),
                                F::CosineSimilarityFuncOptions().dim(1).eps(1e-12));
  };
  auto own_rows = feats.index({labels_t == target_class});
  auto own = cosine_to(own_rows, feats.index({labels_t == target_class}).mean(0));
  auto other_max = torch::zeros_like(own);
  bool any_other = false;
  for (auto c : classes) {
    if (c == target_class) continue;
    auto sim = cosine_to(own_rows, feats.index({labels_t == c}).mean(0));
    other_max = any_other ? torch::maximum(other_max, sim) : sim;
    any_other = true;
  }
  return own - other_max;
}

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v.front();
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Indices (into `rows`) sorted by descending score; stable for ties.
std::vector<std::int64_t> rank_by_score(const torch::Tensor& scores) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(scores.size(0)));
  std::iota(order.begin(), order.end(), 0);
  auto acc = scores.accessor<double, 1>();
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return acc[a] > acc[b]; });
  return order;
}

double provisional_variance(const torch::Tensor& class_feats, const torch::Tensor& scores) {
  auto order = rank_by_score(scores);
  order.resize(std::min<std::size_t>(order.size(), 5));
  return mean_feature_variance(class_feats.index_select(0, torch::tensor(order, torch::kLong)));
}

}  // namespace

ReferenceSet select_reference_inputs(std::int64_t target_class, const ImageBatch& candidates,
                                     const EncoderParams& clean_encoder,
                                     std::optional<ReferenceThresholds> thresholds,
                                     ReferenceSelectionInfo* info) {
  if (!candidates.has_labels()) throw PreconditionError("select_reference_inputs: candidates must be labeled");
  const auto target_idx = candidates.indices_of_class(target_class);
  if (target_idx.size() < 3) {
    throw InsufficientDataError("select_reference_inputs: class " + std::to_string(target_class) + " has " +
                                std::to_string(target_idx.size()) + " candidates, need at least 3");
  }
  auto feats = encode_no_grad(clean_encoder, candidates.pixels).to(torch::kDouble);
  auto labels_t = candidates.labels_tensor();

  std::vector<std::int64_t> classes = candidates.labels;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  torch::Tensor target_scores;
  double target_var = 0.0;
  std::vector<double> class_vars;
  for (auto c : classes) {
    auto rows = feats.index({labels_t == c});
    if (rows.size(0) < 3) continue;
    auto scores = score_candidates(feats, candidates.labels, c);
    const double var = provisional_variance(rows, scores);
    class_vars.push_back(var);
    if (c == target_class) {
      target_scores = scores;
      target_var = var;
    }
  }
  ReferenceThresholds th = thresholds.value_or(
      ReferenceThresholds{percentile(class_vars, 1.0 / 3.0), percentile(class_vars, 2.0 / 3.0)});

  const int wanted = reference_count_for_variance(target_var, th);
  auto order = rank_by_score(target_scores);
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(wanted)));
  std::vector<std::int64_t> chosen;
  for (auto o : order) chosen.push_back(target_idx[static_cast<std::size_t>(o)]);

  ReferenceSet refs;
  refs.target_class = target_class;
  refs.inputs = candidates.select(chosen);
  refs.count = static_cast<int>(chosen.size());
  compute_target_feature(refs, clean_encoder);

  if (info) {
    info->variance = target_var;
    info->thresholds = th;
    auto acc = target_scores.accessor<double, 1>();
    info->scores.assign(acc.data(), acc.data() + target_scores.size(0));
  }
  return refs;
}

torch::Tensor compute_target_feature(ReferenceSet& refs, const EncoderParams& clean_encoder) {
  if (refs.inputs.empty()) throw PreconditionError("compute_target_feature: empty reference set");
  refs.target_feature = encode_no_grad(clean_encoder, refs.inputs.pixels).mean(0);
  return refs.target_feature;
}

// ------------------------------------------------------------ poison rates

void PoisonSchedule::validate() const {
  if (!(rho_base > 0.0 && rho_base <= 1.0)) throw ConfigError("poison.rho_base must lie in (0,1]");
  if (!(rho_amp >= 0.0 && rho_amp < 1.0)) throw ConfigError("poison.rho_amp must lie in [0,1)");
  if (period <= 0) throw ConfigError("poison.period must be positive");
  if (rho_base * (1.0 + rho_amp) > 1.0 + 1e-12) throw ConfigError("poison.rho_base * (1 + rho_amp) must not exceed 1");
}

double poison_rate_at_epoch(const PoisonSchedule& schedule, int epoch) {
  // Reduce first so whole periods land exactly on sin(0).
  const int reduced = ((epoch % schedule.period) + schedule.period) % schedule.period;
  const double phase = 2.0 * std::numbers::pi * static_cast<double>(reduced) / static_cast<double>(schedule.period);
  const double rho = schedule.rho_base * (1.0 + schedule.rho_amp * std::sin(phase));
  return std::clamp(rho, 1e-6, 1.0);
}

}  // namespace dsba
