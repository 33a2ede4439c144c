#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpq/perturbation.hpp"
#include "fpq/tensor.hpp"

namespace fpq {

enum class DatasetKind { Mnist, Cifar10 };
enum class Split { Train, Test };

std::string to_string(DatasetKind kind);
DatasetKind dataset_from_string(const std::string& name);
std::string to_string(Split split);

// Per-channel constants applied after scaling pixels to [0, 1].
struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;
};
Normalization default_normalization(DatasetKind kind);

struct Dataset {
  std::string name;
  Split split = Split::Train;
  std::int64_t num_classes = 10;
  Tensor images;  // (n, c, h, w), normalized
  std::vector<std::int32_t> labels;
  Normalization normalization;
  // SHA-256 of the decoded source bytes, hex encoded.
  std::string source_hash;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  Shape sample_shape() const;
};

struct LoadOptions {
  // CIFAR-10 train split: keep the first `cifar_train_subset` records (0 keeps all).
  std::int64_t cifar_train_subset = 5000;
};

// Dataset root: `configured` when non-empty, else $FPQ_DATA_ROOT, else "data".
std::string resolve_data_root(const std::string& configured);

// Standard IDX image/label files (big-endian header, magics 0x803 / 0x801).
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, Split split);
// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar10_bin(const std::vector<std::string>& batch_paths, Split split);

// <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte or
// <root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin. Missing files
// raise an Error with a remediation hint.
Dataset load(DatasetKind kind, const std::string& root, Split split, const LoadOptions& options = {});

struct CalibrationSet {
  std::vector<std::int64_t> indices;  // into the training split
  std::uint64_t seed = 0;
  Tensor images;
};

// Uniform sample without replacement, deterministic under the seed.
CalibrationSet select_calibration(const Dataset& train, std::int64_t n, std::uint64_t seed);

// Index batches of one epoch: a shuffle seeded by (seed, epoch), cut into
// batches of `batch_size` with a final partial batch.
std::vector<std::vector<std::int64_t>> batch_indices(std::int64_t size, std::int64_t batch_size, std::uint64_t seed,
                                                     std::int64_t epoch, bool shuffle = true);

struct Batch {
  Tensor images;
  std::vector<std::int32_t> labels;
};

struct AugmentOptions {
  bool horizontal_flip = false;
  std::int64_t pad_crop = 0;  // zero-pad by this many pixels, then random crop
};
AugmentOptions default_augmentation(DatasetKind kind);

Batch gather(const Dataset& ds, const std::vector<std::int64_t>& indices);
Batch gather_augmented(const Dataset& ds, const std::vector<std::int64_t>& indices, const AugmentOptions& augment,
                       Rng& rng);

}  // namespace fpq
