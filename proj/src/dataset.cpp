#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "msn/data.hpp"
#include "msn/random.hpp"

namespace msn::data {

void LabeledDataset::validate() const {
  if (images.shape().rank() != 4) throw std::invalid_argument("dataset images must be (N, H, W, C)");
  if (images.shape()[0] != labels.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(images.shape()[0]) + " images but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("dataset label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                                  ")");
    }
  }
}

LabeledDataset LabeledDataset::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw std::invalid_argument("gather: empty index list");
  const std::size_t stride = height() * width() * channels();
  LabeledDataset out;
  out.images = Tensor(Shape{indices.size(), height(), width(), channels()});
  out.labels.reserve(indices.size());
  out.classes = classes;
  out.split = split;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= size()) throw std::out_of_range("gather: index " + std::to_string(src) + " out of range");
    std::copy_n(images.data() + src * stride, stride, out.images.data() + i * stride);
    out.labels.push_back(labels[src]);
  }
  return out;
}

LabeledDataset LabeledDataset::select_classes(const std::vector<int>& keep, std::size_t per_class) const {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> taken(keep.size(), 0);
  std::vector<int> relabel;
  for (std::size_t i = 0; i < size(); ++i) {
    auto it = std::find(keep.begin(), keep.end(), labels[i]);
    if (it == keep.end()) continue;
    const auto k = static_cast<std::size_t>(it - keep.begin());
    if (taken[k] >= per_class) continue;
    ++taken[k];
    indices.push_back(i);
    relabel.push_back(static_cast<int>(k));
  }
  LabeledDataset out = gather(indices);
  out.labels = std::move(relabel);
  out.classes = keep.size();
  return out;
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

Tensor synthetic_templates(const SyntheticOptions& o, std::uint64_t seed) {
  if (!(o.separation > 0.0)) throw std::invalid_argument("synthetic_blobs: separation must be positive");
  if (o.classes < 2 || o.height == 0 || o.width == 0 || o.channels == 0) {
    throw std::invalid_argument("synthetic_blobs: need >= 2 classes and a non-empty image shape");
  }
  auto rng = derive_rng(seed, 0, Stream::synthetic);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor templates(Shape{o.classes, o.height, o.width, o.channels});
  for (std::size_t k = 0; k < o.classes; ++k) {
    std::vector<double> colour(o.channels);
    for (double& c : colour) c = normal(rng);
    for (std::size_t y = 0; y < o.height; ++y) {
      for (std::size_t x = 0; x < o.width; ++x) {
        for (std::size_t c = 0; c < o.channels; ++c) {
          const double texture = 0.5 * normal(rng);
          templates.at(k, y, x, c) = static_cast<float>(o.separation * (colour[c] + texture));
        }
      }
    }
  }
  return templates;
}

LabeledDataset synthetic_blobs(const SyntheticOptions& o, std::uint64_t seed, Split split) {
  const Tensor templates = synthetic_templates(o, seed);
  const std::size_t stride = o.height * o.width * o.channels;
  auto rng = derive_rng(seed, split == Split::train ? 1 : 2, Stream::synthetic);
  std::normal_distribution<double> noise(0.0, 1.0);

  LabeledDataset out;
  out.images = Tensor(Shape{o.classes * o.per_class, o.height, o.width, o.channels});
  out.classes = o.classes;
  out.split = split;
  // Interleave classes so any prefix is balanced.
  for (std::size_t i = 0; i < o.per_class; ++i) {
    for (std::size_t k = 0; k < o.classes; ++k) {
      const std::size_t n = out.labels.size();
      for (std::size_t p = 0; p < stride; ++p) {
        out.images[n * stride + p] = templates[k * stride + p] + static_cast<float>(noise(rng));
      }
      out.labels.push_back(static_cast<int>(k));
    }
  }
  return out;
}

BatchSampler::BatchSampler(std::vector<int> labels, std::size_t classes, std::size_t batch_size, BatchMode mode,
                           std::uint64_t seed)
    : labels_(std::move(labels)), by_class_(classes), batch_size_(batch_size), mode_(mode), seed_(seed) {
  if (batch_size_ < 1) throw std::invalid_argument("batch size must be >= 1");
  if (mode_ == BatchMode::class_aware && batch_size_ < 2) {
    throw std::invalid_argument("class-aware batching needs batch size >= 2");
  }
  if (labels_.empty()) throw std::invalid_argument("cannot batch an empty dataset");
  for (std::size_t i = 0; i < labels_.size(); ++i) by_class_.at(static_cast<std::size_t>(labels_[i])).push_back(i);
}

std::size_t BatchSampler::batches_per_epoch() const {
  return (labels_.size() + batch_size_ - 1) / batch_size_;
}

std::vector<std::size_t> BatchSampler::batch(std::uint64_t iteration) const {
  return mode_ == BatchMode::shuffled ? shuffled_batch(iteration) : class_aware_batch(iteration);
}

std::vector<std::size_t> BatchSampler::shuffled_batch(std::uint64_t iteration) const {
  const std::uint64_t per_epoch = batches_per_epoch();
  const std::uint64_t epoch = iteration / per_epoch;
  if (epoch != cached_epoch_) {
    cached_permutation_.resize(labels_.size());
    for (std::size_t i = 0; i < labels_.size(); ++i) cached_permutation_[i] = i;
    auto rng = derive_rng(seed_, epoch, Stream::shuffle);
    std::shuffle(cached_permutation_.begin(), cached_permutation_.end(), rng);
    cached_epoch_ = epoch;
  }
  const std::size_t begin = static_cast<std::size_t>(iteration % per_epoch) * batch_size_;
  const std::size_t end = std::min(begin + batch_size_, labels_.size());
  return {cached_permutation_.begin() + static_cast<long>(begin), cached_permutation_.begin() + static_cast<long>(end)};
}

std::vector<std::size_t> BatchSampler::class_aware_batch(std::uint64_t iteration) const {
  auto rng = derive_rng(seed_, iteration, Stream::class_batch);
  std::vector<std::size_t> eligible;
  for (std::size_t k = 0; k < by_class_.size(); ++k) {
    if (by_class_[k].size() >= 2) eligible.push_back(k);
  }
  if (eligible.empty()) throw std::invalid_argument("class-aware batching: no class has two samples");
  const std::size_t picked = std::min(eligible.size(), batch_size_ / 2);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(picked);
  std::sort(eligible.begin(), eligible.end());

  std::vector<std::size_t> out;
  out.reserve(batch_size_);
  for (std::size_t j = 0; j < picked; ++j) {
    const auto& pool = by_class_[eligible[j]];
    const std::size_t want = batch_size_ / picked + (j < batch_size_ % picked ? 1 : 0);
    if (want <= pool.size()) {
      // Partial Fisher-Yates over a copy: sampling without replacement.
      std::vector<std::size_t> members = pool;
      for (std::size_t s = 0; s < want; ++s) {
        std::uniform_int_distribution<std::size_t> pick(s, members.size() - 1);
        std::swap(members[s], members[pick(rng)]);
        out.push_back(members[s]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (std::size_t s = 0; s < want; ++s) out.push_back(pool[pick(rng)]);
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

BatchSampler make_batches(const LabeledDataset& dataset, std::size_t batch_size, BatchMode mode, std::uint64_t seed) {
  return BatchSampler(dataset.labels, dataset.classes, batch_size, mode, seed);
}

}  // namespace msn::data
