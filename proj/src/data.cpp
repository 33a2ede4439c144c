#include "fpq/data.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

#include "fpq/error.hpp"
#include "fpq/hash.hpp"

namespace fpq {

std::string to_string(DatasetKind kind) { return kind == DatasetKind::Mnist ? "mnist" : "cifar10"; }

DatasetKind dataset_from_string(const std::string& name) {
  if (name == "mnist") return DatasetKind::Mnist;
  if (name == "cifar10" || name == "cifar-10") return DatasetKind::Cifar10;
  throw ConfigError("unknown dataset '" + name + "' (expected mnist or cifar10)");
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Normalization default_normalization(DatasetKind kind) {
  if (kind == DatasetKind::Mnist) return {{0.1307f}, {0.3081f}};
  return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
}

Shape Dataset::sample_shape() const {
  const Shape& s = images.shape();
  return {s[1], s[2], s[3]};
}

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

std::string hex(std::uint32_t v) {
  std::ostringstream out;
  out << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return out.str();
}

void normalize_into(std::vector<float>& out, const std::uint8_t* pixels, std::size_t count, float mean, float stddev) {
  for (std::size_t i = 0; i < count; ++i) out.push_back((pixels[i] / 255.0f - mean) / stddev);
}

void check_label(std::uint8_t label, std::size_t offset) {
  if (label > 9) throw ParseError("label " + std::to_string(label) + " out of range [0, 9]", offset);
}

}  // namespace

std::string resolve_data_root(const std::string& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("FPQ_DATA_ROOT"); env && *env) return env;
  return "data";
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) throw ParseError("IDX image header truncated in '" + images_path + "'", img.size());
  if (be32(img, 0) != 0x00000803) {
    throw ParseError("bad IDX image magic " + hex(be32(img, 0)) + " in '" + images_path + "' (expected 0x00000803)", 0);
  }
  const std::uint64_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::uint64_t expected = 16 + n * rows * cols;
  if (img.size() < expected) {
    throw ParseError("IDX image payload truncated in '" + images_path + "' (expected " + std::to_string(expected) +
                         " bytes)",
                     img.size());
  }
  if (img.size() > expected) throw ParseError("trailing bytes after IDX image payload in '" + images_path + "'", expected);
  if (lab.size() < 8) throw ParseError("IDX label header truncated in '" + labels_path + "'", lab.size());
  if (be32(lab, 0) != 0x00000801) {
    throw ParseError("bad IDX label magic " + hex(be32(lab, 0)) + " in '" + labels_path + "' (expected 0x00000801)", 0);
  }
  const std::uint64_t nl = be32(lab, 4);
  if (lab.size() < 8 + nl) throw ParseError("IDX label payload truncated in '" + labels_path + "'", lab.size());
  if (nl != n) throw Error("MNIST image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  if (n == 0) throw Error("MNIST file '" + images_path + "' holds no images");

  Dataset ds;
  ds.name = "mnist";
  ds.split = split;
  ds.normalization = default_normalization(DatasetKind::Mnist);
  std::vector<float> values;
  values.reserve(n * rows * cols);
  normalize_into(values, img.data() + 16, n * rows * cols, ds.normalization.mean[0], ds.normalization.stddev[0]);
  ds.images = Tensor::from({static_cast<std::int64_t>(n), 1, static_cast<std::int64_t>(rows),
                            static_cast<std::int64_t>(cols)},
                           std::move(values));
  ds.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    check_label(lab[8 + i], 8 + i);
    ds.labels[i] = lab[8 + i];
  }
  ds.source_hash = sha256_hex({img, lab});
  return ds;
}

Dataset load_cifar10_bin(const std::vector<std::string>& batch_paths, Split split) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072, kPlane = 1024;
  Dataset ds;
  ds.name = "cifar10";
  ds.split = split;
  ds.normalization = default_normalization(DatasetKind::Cifar10);
  std::vector<std::vector<std::uint8_t>> files;
  for (const auto& path : batch_paths) {
    files.push_back(read_file(path));
    const auto& b = files.back();
    if (b.size() % kRecord != 0) {
      throw ParseError("CIFAR-10 batch '" + path + "' ends mid-record (record length 3073)",
                       (b.size() / kRecord) * kRecord);
    }
  }
  std::size_t total = 0;
  for (const auto& b : files) total += b.size() / kRecord;
  if (total == 0) throw Error("CIFAR-10 batches hold no records");
  std::vector<float> values;
  values.reserve(total * kPixels);
  for (const auto& b : files) {
    for (std::size_t off = 0; off < b.size(); off += kRecord) {
      check_label(b[off], off);
      ds.labels.push_back(b[off]);
      for (std::size_t c = 0; c < 3; ++c) {
        normalize_into(values, b.data() + off + 1 + c * kPlane, kPlane, ds.normalization.mean[c],
                       ds.normalization.stddev[c]);
      }
    }
  }
  ds.images = Tensor::from({static_cast<std::int64_t>(total), 3, 32, 32}, std::move(values));
  std::vector<std::span<const std::uint8_t>> parts(files.begin(), files.end());
  ds.source_hash = sha256_hex(parts);
  return ds;
}

namespace {

void require_files(const std::vector<std::string>& paths, DatasetKind kind, const std::string& root) {
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) {
      const std::string hint = kind == DatasetKind::Mnist
                                   ? "place the four IDX files under <root>/mnist/ (python scripts/make_mnist_subset.py "
                                     "<root>/mnist builds a small stand-in)"
                                   : "extract cifar-10-binary.tar.gz so that <root>/cifar-10-batches-bin/ exists";
      throw Error("dataset file '" + p + "' not found under root '" + root + "': " + hint +
                  "; set --data_root or FPQ_DATA_ROOT");
    }
  }
}

Dataset take_first(const Dataset& ds, std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Batch b = gather(ds, idx);
  Dataset out = ds;
  out.images = b.images;
  out.labels = b.labels;
  return out;
}

}  // namespace

Dataset load(DatasetKind kind, const std::string& root, Split split, const LoadOptions& options) {
  namespace fs = std::filesystem;
  if (kind == DatasetKind::Mnist) {
    const std::string stem = split == Split::Train ? "train" : "t10k";
    const std::string dir = (fs::path(root) / "mnist").string();
    const std::string images = dir + "/" + stem + "-images-idx3-ubyte";
    const std::string labels = dir + "/" + stem + "-labels-idx1-ubyte";
    require_files({images, labels}, kind, root);
    return load_mnist_idx(images, labels, split);
  }
  const std::string dir = (fs::path(root) / "cifar-10-batches-bin").string();
  std::vector<std::string> paths;
  if (split == Split::Train) {
    for (int i = 1; i <= 5; ++i) paths.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
  } else {
    paths.push_back(dir + "/test_batch.bin");
  }
  require_files(paths, kind, root);
  Dataset ds = load_cifar10_bin(paths, split);
  if (split == Split::Train && options.cifar_train_subset > 0 && options.cifar_train_subset < ds.size()) {
    ds = take_first(ds, options.cifar_train_subset);
  }
  return ds;
}

CalibrationSet select_calibration(const Dataset& train, std::int64_t n, std::uint64_t seed) {
  if (n < 1 || n > train.size()) {
    throw Error("select_calibration: n = " + std::to_string(n) + " must lie in [1, " + std::to_string(train.size()) +
                "]");
  }
  std::vector<std::int64_t> all(static_cast<std::size_t>(train.size()));
  std::iota(all.begin(), all.end(), 0);
  CalibrationSet cal;
  cal.seed = seed;
  if (n == train.size()) {
    cal.indices = all;
  } else {
    std::mt19937_64 rng(seed);
    std::sample(all.begin(), all.end(), std::back_inserter(cal.indices), n, rng);
  }
  cal.images = gather(train, cal.indices).images;
  return cal;
}

std::vector<std::vector<std::int64_t>> batch_indices(std::int64_t size, std::int64_t batch_size, std::uint64_t seed,
                                                     std::int64_t epoch, bool shuffle) {
  if (batch_size < 1) throw Error("batch_indices: batch size must be >= 1");
  std::vector<std::int64_t> order(static_cast<std::size_t>(size));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::int64_t>> batches;
  for (std::int64_t start = 0; start < size; start += batch_size) {
    const std::int64_t end = std::min(size, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

AugmentOptions default_augmentation(DatasetKind kind) {
  if (kind == DatasetKind::Cifar10) return {true, 4};
  return {};
}

Batch gather(const Dataset& ds, const std::vector<std::int64_t>& indices) {
  if (indices.empty()) throw Error("gather: empty index list");
  const Shape sample = ds.sample_shape();
  const std::int64_t per = shape_numel(sample);
  auto src = ds.images.data();
  std::vector<float> values;
  values.reserve(indices.size() * static_cast<std::size_t>(per));
  Batch b;
  for (auto i : indices) {
    if (i < 0 || i >= ds.size()) throw Error("gather: index " + std::to_string(i) + " out of range");
    values.insert(values.end(), src.begin() + i * per, src.begin() + (i + 1) * per);
    b.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
  }
  b.images = Tensor::from({static_cast<std::int64_t>(indices.size()), sample[0], sample[1], sample[2]}, std::move(values));
  return b;
}

Batch gather_augmented(const Dataset& ds, const std::vector<std::int64_t>& indices, const AugmentOptions& augment,
                       Rng& rng) {
  Batch b = gather(ds, indices);
  if (!augment.horizontal_flip && augment.pad_crop == 0) return b;
  const Shape& s = b.images.shape();
  const std::int64_t c = s[1], h = s[2], w = s[3];
  auto data = b.images.mutable_data();
  std::vector<float> plane(static_cast<std::size_t>(h * w));
  for (std::int64_t n = 0; n < s[0]; ++n) {
    const bool flip = augment.horizontal_flip && rng.bernoulli(0.5);
    std::int64_t dy = 0, dx = 0;
    if (augment.pad_crop > 0) {
      const auto span = static_cast<float>(2 * augment.pad_crop + 1);
      dy = std::min<std::int64_t>(static_cast<std::int64_t>(rng.uniform01() * span), 2 * augment.pad_crop) - augment.pad_crop;
      dx = std::min<std::int64_t>(static_cast<std::int64_t>(rng.uniform01() * span), 2 * augment.pad_crop) - augment.pad_crop;
    }
    for (std::int64_t ch = 0; ch < c; ++ch) {
      float* img = data.data() + (n * c + ch) * h * w;
      // Zero padding in pixel space is -mean/std after normalization.
      const float fill = -ds.normalization.mean[static_cast<std::size_t>(ch)] /
                         ds.normalization.stddev[static_cast<std::size_t>(ch)];
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t sy = y + dy;
          const std::int64_t sx0 = x + dx;
          const std::int64_t sx = flip ? w - 1 - sx0 : sx0;
          const bool inside = sy >= 0 && sy < h && sx0 >= 0 && sx0 < w;
          plane[static_cast<std::size_t>(y * w + x)] = inside ? img[sy * w + sx] : fill;
        }
      }
      std::copy(plane.begin(), plane.end(), img);
    }
  }
  return b;
}

}  // namespace fpq
