#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "dsba/data.hpp"
#include "dsba/evaluation.hpp"
#include "dsba/models.hpp"

namespace dsba::testing {

/// Small synthetic split plus a briefly pretrained clean encoder, built once per process.
struct SmallWorld {
  DatasetSplit data;
  EncoderParams clean;
};
const SmallWorld& small_world();

/// Stamps a fixed 5x5 checkerboard into the bottom-right corner.
torch::Tensor stamp_patch(const torch::Tensor& images);

/// Encoder fine-tuned so that patched images map to the target-class mean feature
/// while clean features stay close to the clean encoder.
struct PatchBackdoor {
  EncoderParams backdoor;
  LinearProbe probe;
  std::int64_t target_class;
};
PatchBackdoor plant_static_patch_backdoor(const DatasetSplit& data, const EncoderParams& clean,
                                          std::int64_t target_class, int steps = 200, std::uint64_t seed = 0);

}  // namespace dsba::testing
