#include "dsba/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dsba/errors.hpp"
#include "dsba/warnings.hpp"

namespace dsba {

Classifier make_classifier(const LinearProbe& probe, const EncoderParams& encoder) {
  return [&probe, &encoder](const torch::Tensor& images) { return probe.logits(encode(encoder, images)); };
}

double auroc(std::span<const double> negatives, std::span<const double> positives) {
  if (negatives.empty() || positives.empty()) throw PreconditionError("auroc needs both populations");
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(negatives.size() + positives.size());
  for (double v : negatives) items.push_back({v, false});
  for (double v : positives) items.push_back({v, true});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Mann-Whitney U from midranks.
  double positive_rank_sum = 0.0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (items[t].positive) positive_rank_sum += midrank;
    i = j;
  }
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

SummaryStats summarize(std::span<const double> values) {
  SummaryStats s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / n);
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  s.min = *lo;
  s.max = *hi;
  return s;
}

// ---------------------------------------------------------------------------
// STRIP
// ---------------------------------------------------------------------------

std::vector<double> strip_entropies(const Classifier& classifier, const torch::Tensor& samples,
                                    const torch::Tensor& clean_pool, const StripConfig& config) {
  if (config.n_overlays < 8) throw PreconditionError("STRIP needs at least 8 overlays");
  if (!clean_pool.defined() || clean_pool.size(0) == 0) throw PreconditionError("STRIP needs a nonempty clean pool");
  require_same_shape(samples[0], clean_pool[0], "STRIP sample vs pool image");
  torch::NoGradGuard no_grad;
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::int64_t> pick(0, clean_pool.size(0) - 1);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(samples.size(0)));
  for (std::int64_t i = 0; i < samples.size(0); ++i) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(config.n_overlays));
    for (auto& v : idx) v = pick(rng);
    const auto overlays = clean_pool.index_select(0, torch::tensor(idx, torch::kLong));
    const auto blended = 0.5 * samples[i].unsqueeze(0) + 0.5 * overlays;
    const auto p = torch::softmax(classifier(blended).to(torch::kFloat64), 1);
    const auto entropy = -(p * p.clamp_min(1e-300).log()).sum(1);
    out.push_back(std::max(0.0, entropy.mean().item<double>()));
  }
  return out;
}

StripResult strip_entropy_test(const Classifier& classifier, const torch::Tensor& clean_samples,
                               const torch::Tensor& poisoned_samples, const torch::Tensor& clean_pool,
                               const StripConfig& config) {
  StripResult r;
  r.clean_entropy = strip_entropies(classifier, clean_samples, clean_pool, config);
  auto poisoned_cfg = config;
  poisoned_cfg.seed = config.seed + 1;
  r.poisoned_entropy = strip_entropies(classifier, poisoned_samples, clean_pool, poisoned_cfg);
  r.clean_stats = summarize(r.clean_entropy);
  r.poisoned_stats = summarize(r.poisoned_entropy);
  std::vector<double> neg, pos;
  for (double e : r.clean_entropy) neg.push_back(-e);
  for (double e : r.poisoned_entropy) pos.push_back(-e);
  r.auroc = auroc(neg, pos);
  return r;
}

// ---------------------------------------------------------------------------
// Latent separability
// ---------------------------------------------------------------------------

torch::Tensor logistic_decision_values(const torch::Tensor& train, const torch::Tensor& labels,
                                       const torch::Tensor& test, double l2) {
  const auto x = train.to(torch::kFloat64);
  const auto y = labels.to(torch::kFloat64);
  const auto mean = x.mean(0);
  auto scale = x.std(0, /*unbiased=*/false);
  scale = torch::where(scale > 1e-12, scale, torch::ones_like(scale));
  const auto with_bias = [&](const torch::Tensor& m) {
    const auto z = (m.to(torch::kFloat64) - mean) / scale;
    return torch::cat({z, torch::ones({z.size(0), 1}, torch::kFloat64)}, 1);
  };
  const auto a = with_bias(x);
  const auto d = a.size(1);
  auto reg = torch::full({d}, l2, torch::kFloat64);
  reg[d - 1] = 1e-9;  // bias is (almost) unregularized
  auto w = torch::zeros({d}, torch::kFloat64);
  for (int it = 0; it < 100; ++it) {
    const auto p = torch::sigmoid(a.matmul(w));
    const auto grad = a.t().matmul(p - y) + reg * w;
    const auto hess = (a.t() * (p * (1.0 - p))).matmul(a) + torch::diag(reg);
    const auto step = torch::linalg_solve(hess, grad);
    if (!torch::isfinite(step).all().item<bool>()) break;
    w = w - step;
    if (step.abs().max().item<double>() < 1e-10) break;
  }
  return with_bias(test).matmul(w);
}

torch::Tensor pca_project(const torch::Tensor& features, int components) {
  const auto x = features.to(torch::kFloat64);
  const auto centered = x - x.mean(0, true);
  if (centered.abs().max().item<double>() < 1e-12) throw PreconditionError("rank-0 features cannot be projected");
  const auto [u, s, vh] = torch::linalg_svd(centered, /*full_matrices=*/false);
  auto basis = vh.slice(0, 0, components).clone();
  // Fix the sign so the largest-magnitude loading of every component is positive.
  for (int c = 0; c < basis.size(0); ++c) {
    const auto pivot = basis[c].abs().argmax().item<std::int64_t>();
    if (basis[c][pivot].item<double>() < 0) basis[c] = -basis[c];
  }
  return centered.matmul(basis.t());
}

std::vector<int> kmeans(const torch::Tensor& points, int k, std::uint64_t seed, int iterations) {
  const auto x = points.to(torch::kFloat64).contiguous();
  const auto n = x.size(0);
  if (n < k) throw PreconditionError("k-means needs at least k points");
  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> chosen{std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng)};
  while (static_cast<int>(chosen.size()) < k) {
    const auto centers = x.index_select(0, torch::tensor(chosen, torch::kLong));
    const auto d2 = torch::cdist(x, centers).pow(2).amin(1).contiguous();
    const std::vector<double> weights(d2.data_ptr<double>(), d2.data_ptr<double>() + n);
    if (std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0) {
      chosen.push_back(std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng));
      continue;
    }
    std::discrete_distribution<std::int64_t> pick(weights.begin(), weights.end());
    chosen.push_back(pick(rng));
  }
  auto centers = x.index_select(0, torch::tensor(chosen, torch::kLong));
  torch::Tensor assign;
  for (int it = 0; it < iterations; ++it) {
    const auto next = torch::cdist(x, centers).argmin(1);
    if (assign.defined() && next.equal(assign)) break;
    assign = next;
    for (int c = 0; c < k; ++c) {
      const auto members = assign.eq(c);
      if (members.any().item<bool>()) centers[c] = x.index({members}).mean(0);
    }
  }
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(assign[i].item<std::int64_t>());
  return out;
}

double silhouette_score(const torch::Tensor& points, std::span<const int> cluster) {
  const auto n = points.size(0);
  if (static_cast<std::size_t>(n) != cluster.size()) throw PreconditionError("one cluster label per point");
  const int k = *std::max_element(cluster.begin(), cluster.end()) + 1;
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  for (int c : cluster) ++counts[static_cast<std::size_t>(c)];
  if (std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) < 2) return 0.0;

  const auto dist = torch::cdist(points.to(torch::kFloat64), points.to(torch::kFloat64)).contiguous();
  const auto* d = dist.data_ptr<double>();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> sums(static_cast<std::size_t>(k), 0.0);
    for (std::int64_t j = 0; j < n; ++j) sums[static_cast<std::size_t>(cluster[j])] += d[i * n + j];
    const auto own = static_cast<std::size_t>(cluster[i]);
    if (counts[own] <= 1) continue;  // singleton contributes 0
    const double a = sums[own] / static_cast<double>(counts[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sums.size(); ++c)
      if (c != own && counts[c] > 0) b = std::min(b, sums[c] / static_cast<double>(counts[c]));
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

namespace {

constexpr int kFolds = 5;

// Fold of each row of a group of size n; depends only on n and the seed, so the two
// groups are treated identically.
std::vector<int> fold_assignment(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> fold(static_cast<std::size_t>(n));
  for (std::size_t pos = 0; pos < perm.size(); ++pos) fold[static_cast<std::size_t>(perm[pos])] = static_cast<int>(pos % kFolds);
  return fold;
}

}  // namespace

SeparabilityResult latent_separability_score(const torch::Tensor& clean_features,
                                             const torch::Tensor& poisoned_features, std::uint64_t seed) {
  if (clean_features.dim() != 2 || poisoned_features.dim() != 2 || clean_features.size(1) != poisoned_features.size(1))
    throw PreconditionError("separability needs two feature matrices of equal width");
  if (clean_features.size(0) < 16 || poisoned_features.size(0) < 16)
    throw PreconditionError("separability needs at least 16 samples per side");

  const auto pooled = torch::cat({clean_features, poisoned_features}).to(torch::kFloat64);
  SeparabilityResult r;
  r.projection = pca_project(pooled, 2);

  const auto nc = clean_features.size(0);
  const auto np = poisoned_features.size(0);
  auto labels = torch::cat({torch::zeros({nc}, torch::kFloat64), torch::ones({np}, torch::kFloat64)});
  std::vector<int> fold = fold_assignment(nc, seed);
  const auto pf = fold_assignment(np, seed);
  fold.insert(fold.end(), pf.begin(), pf.end());
  const auto fold_t = torch::tensor(std::vector<std::int64_t>(fold.begin(), fold.end()), torch::kLong);

  auto scores = torch::zeros({nc + np}, torch::kFloat64);
  for (int f = 0; f < kFolds; ++f) {
    const auto test = fold_t.eq(f);
    const auto train = test.logical_not();
    if (!test.any().item<bool>()) continue;
    scores.index_put_({test}, logistic_decision_values(pooled.index({train}), labels.index({train}),
                                                       pooled.index({test})));
  }
  const auto s = scores.contiguous();
  const std::span<const double> all(s.data_ptr<double>(), static_cast<std::size_t>(nc + np));
  r.probe_auroc = auroc(all.subspan(0, static_cast<std::size_t>(nc)), all.subspan(static_cast<std::size_t>(nc)));

  r.cluster = kmeans(r.projection, 2, seed);
  r.silhouette = silhouette_score(r.projection, r.cluster);
  return r;
}

SeparabilityResult latent_separability_score(const EncoderParams& encoder, const torch::Tensor& clean,
                                             const torch::Tensor& poisoned, std::uint64_t seed) {
  return latent_separability_score(encode_no_grad(encoder, clean), encode_no_grad(encoder, poisoned), seed);
}

// ---------------------------------------------------------------------------
// Trigger inversion
// ---------------------------------------------------------------------------

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double anomaly_index_from_norms(std::span<const double> norms) {
  if (norms.empty()) throw PreconditionError("anomaly index of no norms");
  const std::vector<double> v(norms.begin(), norms.end());
  const double med = median(v);
  std::vector<double> dev;
  for (double x : v) dev.push_back(std::abs(x - med));
  const double mad = std::max(median(dev), kMadFloor);
  const double lo = *std::min_element(v.begin(), v.end());
  return std::abs(med - lo) / (1.4826 * mad);
}

NcResult nc_anomaly_index(const Classifier& classifier, const torch::Tensor& images, std::int64_t num_classes,
                          const NcConfig& config) {
  if (num_classes < 2) throw PreconditionError("trigger inversion needs at least two classes");
  if (images.dim() != 4 || images.size(0) == 0) throw PreconditionError("trigger inversion needs a nonempty image batch");
  const auto c = images.size(1);
  const auto h = images.size(2);
  const auto w = images.size(3);
  const double budget = static_cast<double>(h * w);

  torch::manual_seed(config.seed);
  const auto pattern_init = torch::randn({1, c, h, w});
  const auto x = images.detach();

  NcResult r;
  for (std::int64_t cls = 0; cls < num_classes; ++cls) {
    auto mask_logit = torch::zeros({1, 1, h, w}).set_requires_grad(true);
    auto pattern_logit = pattern_init.clone().set_requires_grad(true);
    torch::optim::Adam opt({mask_logit, pattern_logit}, torch::optim::AdamOptions(config.learning_rate));
    const auto target = torch::full({x.size(0)}, cls, torch::kLong);
    bool diverged = false;
    for (int step = 0; step < config.steps; ++step) {
      const auto mask = torch::sigmoid(mask_logit);
      const auto stamped = (1.0 - mask) * x + mask * torch::sigmoid(pattern_logit);
      const auto loss =
          torch::nn::functional::cross_entropy(classifier(stamped), target) + config.lambda * mask.sum();
      if (!std::isfinite(loss.item<double>())) {
        diverged = true;
        break;
      }
      // Gradients only for the trigger; the classifier's parameters are left untouched.
      auto grads = torch::autograd::grad({loss}, {mask_logit, pattern_logit});
      mask_logit.mutable_grad() = grads[0];
      pattern_logit.mutable_grad() = grads[1];
      opt.step();
    }
    double norm = torch::sigmoid(mask_logit).sum().item<double>();
    if (diverged || !std::isfinite(norm)) {
      warn("trigger inversion diverged for class " + std::to_string(cls) + "; recording the budget cap");
      norm = budget;
    }
    r.norms.push_back(norm);
  }
  r.anomaly_index = anomaly_index_from_norms(r.norms);
  r.flagged_class = std::min_element(r.norms.begin(), r.norms.end()) - r.norms.begin();
  return r;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json to_json(const SummaryStats& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"min", s.min}, {"max", s.max}};
}

}  // namespace

nlohmann::json to_json(const StripResult& r) {
  return {{"auroc", r.auroc}, {"clean_entropy", to_json(r.clean_stats)}, {"poisoned_entropy", to_json(r.poisoned_stats)}};
}

nlohmann::json to_json(const SeparabilityResult& r) {
  return {{"probe_auroc", r.probe_auroc}, {"silhouette", r.silhouette}};
}

nlohmann::json to_json(const NcResult& r) {
  return {{"norms", r.norms}, {"anomaly_index", r.anomaly_index}, {"flagged_class", r.flagged_class}};
}

nlohmann::json to_json(const DefenseReport& r) {
  return {{"strip", to_json(r.strip)}, {"separability", to_json(r.separability)}, {"nc", to_json(r.nc)}};
}

}  // namespace dsba
