#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace dsba {

/// A batch of images in [0,1] pixel space, shaped [batch, channels, height, width].
/// `labels` is empty for unlabeled data; `ids` are stable sample identifiers.
struct ImageBatch {
  torch::Tensor pixels;
  std::vector<std::int64_t> labels;
  std::vector<std::int64_t> ids;

  std::int64_t size() const { return pixels.defined() ? pixels.size(0) : 0; }
  bool empty() const { return size() == 0; }
  bool has_labels() const { return !labels.empty(); }
  std::int64_t channels() const { return pixels.size(1); }
  std::int64_t height() const { return pixels.size(2); }
  std::int64_t width() const { return pixels.size(3); }

  /// Rows at `indices`, in that order.
  ImageBatch select(std::span<const std::int64_t> indices) const;
  /// Contiguous rows [begin, end).
  ImageBatch slice(std::int64_t begin, std::int64_t end) const;
  /// Indices of samples carrying `label`.
  std::vector<std::int64_t> indices_of_class(std::int64_t label) const;
  torch::Tensor labels_tensor() const;

  /// Throws PreconditionError unless the batch is 4-D, labels/ids agree in length
  /// and every pixel lies in [0,1].
  void validate() const;
};

ImageBatch concat(const ImageBatch& a, const ImageBatch& b);

/// Throws PreconditionError unless both tensors have identical shapes.
void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what);

}  // namespace dsba
