#include "fixtures.hpp"

#include <random>

namespace dsba::testing {

const SmallWorld& small_world() {
  static const SmallWorld world = [] {
    DatasetSpec spec;
    spec.num_images = 1024;
    spec.seed = 7;
    auto data = load_image_dataset(spec);
    PretrainConfig pc;
    pc.epochs = 4;
    pc.batch_size = 128;
    pc.seed = 7;
    auto clean = pretrain_clean_encoder(concat(data.shadow, data.clean), pc);
    return SmallWorld{std::move(data), std::move(clean)};
  }();
  return world;
}

torch::Tensor stamp_patch(const torch::Tensor& images) {
  auto out = images.clone();
  const auto h = images.size(2), w = images.size(3);
  auto checker = torch::zeros({5, 5}, images.options());
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) checker[r][c] = (r + c) % 2 == 0 ? 1.0 : 0.0;
  out.slice(2, h - 6, h - 1).slice(3, w - 6, w - 1).copy_(checker.expand({images.size(0), images.size(1), 5, 5}));
  return out;
}

PatchBackdoor plant_static_patch_backdoor(const DatasetSplit& data, const EncoderParams& clean,
                                          std::int64_t target_class, int steps, std::uint64_t seed) {
  auto backdoor = clean.backdoor_copy();
  const auto target_idx = data.downstream_train.indices_of_class(target_class);
  const auto target = encode_no_grad(clean, data.downstream_train.select(target_idx).pixels).mean(0, true);

  torch::optim::Adam opt(backdoor.net()->parameters(), torch::optim::AdamOptions(1e-3));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, data.shadow.size() - 1);
  namespace F = torch::nn::functional;
  for (int step = 0; step < steps; ++step) {
    std::vector<std::int64_t> idx(64);
    for (auto& i : idx) i = pick(rng);
    const auto x = data.shadow.pixels.index_select(0, torch::tensor(idx, torch::kLong));
    const auto reference = encode_no_grad(clean, x);
    const auto attack = F::cosine_similarity(encode(backdoor, stamp_patch(x)), target.expand({64, -1}),
                                             F::CosineSimilarityFuncOptions().dim(1));
    const auto keep = F::cosine_similarity(encode(backdoor, x), reference, F::CosineSimilarityFuncOptions().dim(1));
    const auto loss = -attack.mean() - keep.mean();
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  auto probe = train_downstream_probe(backdoor, data.downstream_train, data.num_classes, ProbeConfig{200, 0.05, seed});
  return {std::move(backdoor), std::move(probe), target_class};
}

}  // namespace dsba::testing
