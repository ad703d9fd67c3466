#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "msn/tensor.hpp"

namespace msn::data {

enum class Split { train, test };

/// Images (N, H, W, C) with one label per image.
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.shape()[1]; }
  std::size_t width() const { return images.shape()[2]; }
  std::size_t channels() const { return images.shape()[3]; }

  /// Throws std::invalid_argument when labels and images disagree.
  void validate() const;
  /// Images and labels at `indices`, in that order.
  LabeledDataset gather(std::span<const std::size_t> indices) const;
  /// Keeps only the listed classes (relabelled 0..k-1 in list order), at most
  /// `per_class` images each, in original order.
  LabeledDataset select_classes(const std::vector<int>& keep, std::size_t per_class) const;
  std::vector<std::size_t> class_counts() const;
};

// ---- CIFAR-10 binary format ------------------------------------------------

inline constexpr std::size_t kCifarImageBytes = 32 * 32 * 3;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarImageBytes;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;
inline constexpr const char* kCifarDirName = "cifar-10-batches-bin";

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes 3,073-byte records (label byte, then 1,024 R, 1,024 G, 1,024 B
/// bytes, row-major) into NHWC images scaled to [0, 1]. Throws FormatError on
/// a partial record or a label above 9.
LabeledDataset decode_cifar10(std::span<const std::uint8_t> bytes, Split split);

/// Encodes images in [0, 1] back into CIFAR-10 records (rounding to bytes).
std::vector<std::uint8_t> encode_cifar10(const LabeledDataset& dataset);

LabeledDataset load_cifar10_file(const std::filesystem::path& file, Split split);

struct CifarFiles {
  std::vector<std::filesystem::path> train;
  std::filesystem::path test;

  /// The standard layout under `root/cifar-10-batches-bin/`.
  static CifarFiles in(const std::filesystem::path& root);
};

struct CifarSplits {
  LabeledDataset train;
  LabeledDataset test;
};

CifarSplits load_cifar10(const CifarFiles& files);

// ---- Acquisition -----------------------------------------------------------

class FetchError : public std::runtime_error {
 public:
  enum class Kind { digest_mismatch, network, format, usage };
  FetchError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct FetchOptions {
  std::string url = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
  /// "sha256:<hex>" or "md5:<hex>".
  std::string digest = "md5:c32a1d4ab5d03f1284b67883e8d87530";
  std::string archive_name = "cifar-10-binary.tar.gz";
  std::size_t records_per_file = kCifarRecordsPerFile;
  int attempts = 3;
};

struct FetchResult {
  CifarFiles files;
  bool downloaded = false;
  bool already_verified = false;
};

/// Ensures a verified copy of the dataset under `dest`: reuses a verified
/// extraction, else verifies a pre-placed archive, else downloads one, then
/// extracts it. Only "cifar10" is known.
FetchResult fetch_dataset(const std::string& name, const std::filesystem::path& dest,
                          const FetchOptions& options = {});

/// Lower-case hex digest of a file; algorithm is "sha256" or "md5".
std::string file_digest(const std::filesystem::path& file, const std::string& algorithm);

// ---- Preprocessing ---------------------------------------------------------

struct GcnOptions {
  double scale = 1.0;
  double min_divisor = 1e-8;
};

/// Per image: subtract the scalar mean, divide by max(RMS deviation, min_divisor).
Tensor global_contrast_normalize(const Tensor& images, const GcnOptions& options = {});

/// Pixel-space ZCA whitening, fitted on one split and reused on others.
struct ZcaTransform {
  std::vector<double> mean;       // length D = H * W * C
  std::vector<double> whitening;  // D x D, row-major, symmetric
  double eps = 1e-2;

  std::size_t dim() const { return mean.size(); }
};

/// Throws std::invalid_argument with fewer than two images.
ZcaTransform zca_fit(const Tensor& images, double eps = 1e-2);
Tensor zca_apply(const ZcaTransform& transform, const Tensor& images);

/// Mirrors image `index` left-right in place.
void flip_horizontal(Tensor& images, std::size_t index);

/// Mirrors each image independently with probability 0.5. Returns the flip mask.
std::vector<bool> random_flip(Tensor& images, std::mt19937_64& rng);

// ---- Batching --------------------------------------------------------------

enum class BatchMode { shuffled, class_aware };

/// Deterministic batch schedule addressed by iteration number.
///
/// shuffled: each epoch is a fresh uniform permutation cut into contiguous
/// slices (the last one may be short), so an epoch covers every index once.
/// class_aware: each batch draws from min(classes, batch/2) randomly chosen
/// classes, at least two samples from each, so every represented class
/// contributes a within-class pair.
class BatchSampler {
 public:
  BatchSampler(std::vector<int> labels, std::size_t classes, std::size_t batch_size, BatchMode mode,
               std::uint64_t seed);

  std::vector<std::size_t> batch(std::uint64_t iteration) const;
  /// Sequential access: returns batch(0), batch(1), ...
  std::vector<std::size_t> next() { return batch(cursor_++); }

  std::size_t batches_per_epoch() const;
  std::size_t batch_size() const { return batch_size_; }

 private:
  std::vector<std::size_t> shuffled_batch(std::uint64_t iteration) const;
  std::vector<std::size_t> class_aware_batch(std::uint64_t iteration) const;

  std::vector<int> labels_;
  std::vector<std::vector<std::size_t>> by_class_;
  std::size_t batch_size_;
  BatchMode mode_;
  std::uint64_t seed_;
  std::uint64_t cursor_ = 0;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  mutable std::vector<std::size_t> cached_permutation_;
};

/// Convenience wrapper over BatchSampler.
BatchSampler make_batches(const LabeledDataset& dataset, std::size_t batch_size, BatchMode mode, std::uint64_t seed);

// ---- Synthetic data --------------------------------------------------------

struct SyntheticOptions {
  std::size_t classes = 4;
  std::size_t per_class = 500;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 3;
  /// Scale of the class templates relative to the unit pixel noise.
  double separation = 1.0;
};

/// Gaussian blobs around one template image per class. A template is a
/// class colour (constant per channel) plus a class texture, both scaled by
/// `separation`; samples add N(0, 1) pixel noise. Throws on separation <= 0.
LabeledDataset synthetic_blobs(const SyntheticOptions& options, std::uint64_t seed, Split split = Split::train);

/// The template images used by synthetic_blobs for (options, seed), one per class.
Tensor synthetic_templates(const SyntheticOptions& options, std::uint64_t seed);

}  // namespace msn::data
