#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "copanet/errors.hpp"
#include "copanet/tensor.hpp"

namespace copanet {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageBytes = kImageChannels * kImageSide * kImageSide;
inline constexpr std::size_t kRecordBytes = 1 + kImageBytes;
inline constexpr std::size_t kCifarBatchRecords = 10000;

inline std::vector<std::string> cifar10_class_names() {
  return {"airplane", "automobile", "bird", "cat", "deer",
          "dog",      "frog",       "horse", "ship", "truck"};
}

/// Images stored as raw bytes, one CHW 3x32x32 record per sample.
struct Dataset {
  std::vector<std::uint8_t> images;
  std::vector<int> labels;
  std::string split;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return {images.data() + i * kImageBytes, kImageBytes};
  }

  void validate() const {
    if (images.size() != labels.size() * kImageBytes) {
      throw DataError("dataset '" + split + "' holds " +
                      std::to_string(images.size()) + " image bytes for " +
                      std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes()) {
        throw DataError("dataset '" + split + "' record " + std::to_string(i) +
                        " has label " + std::to_string(labels[i]) + " outside [0, " +
                        std::to_string(num_classes()) + ")");
      }
    }
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{{}, {}, split, class_names};
    out.images.reserve(indices.size() * kImageBytes);
    for (std::size_t i : indices) {
      const auto img = image(i);
      out.images.insert(out.images.end(), img.begin(), img.end());
      out.labels.push_back(labels.at(i));
    }
    return out;
  }

  std::vector<std::size_t> indices_of(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label) out.push_back(i);
    }
    return out;
  }
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Parses CIFAR-10 binary records (1 label byte + 3072 pixel bytes).
/// `expected_records` of 0 accepts any whole number of records.
inline Dataset parse_cifar_batch(std::span<const std::uint8_t> bytes,
                                 const std::string& source,
                                 std::size_t expected_records = 0) {
  if (expected_records != 0 && bytes.size() != expected_records * kRecordBytes) {
    throw DataError(source + ": expected " +
                    std::to_string(expected_records * kRecordBytes) + " bytes (" +
                    std::to_string(expected_records) + " records of " +
                    std::to_string(kRecordBytes) + "), got " +
                    std::to_string(bytes.size()));
  }
  if (bytes.empty() || bytes.size() % kRecordBytes != 0) {
    throw DataError(source + ": expected a positive multiple of " +
                    std::to_string(kRecordBytes) + " bytes, got " +
                    std::to_string(bytes.size()));
  }
  const std::size_t n = bytes.size() / kRecordBytes;
  Dataset out;
  out.class_names = cifar10_class_names();
  out.labels.resize(n);
  out.images.resize(n * kImageBytes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* record = bytes.data() + i * kRecordBytes;
    if (record[0] >= out.class_names.size()) {
      throw DataError(source + ": record " + std::to_string(i) + " has label byte " +
                      std::to_string(record[0]));
    }
    out.labels[i] = record[0];
    std::copy(record + 1, record + kRecordBytes, out.images.begin() + i * kImageBytes);
  }
  return out;
}

inline void write_cifar_batch(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto label = static_cast<char>(ds.labels[i]);
    out.write(&label, 1);
    const auto img = ds.image(i);
    out.write(reinterpret_cast<const char*>(img.data()),
              static_cast<std::streamsize>(img.size()));
  }
  if (!out) throw IoError("short write to " + path.string());
}

/// Reads data_batch_1..5.bin and test_batch.bin from `directory`. Every file
/// must hold exactly 10,000 records; nothing is returned on any failure.
inline std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& directory) {
  auto load = [&](const std::vector<std::string>& files, const std::string& split) {
    Dataset ds;
    ds.split = split;
    ds.class_names = cifar10_class_names();
    for (const auto& name : files) {
      const auto path = directory / name;
      auto part = parse_cifar_batch(read_bytes(path), path.string(), kCifarBatchRecords);
      ds.images.insert(ds.images.end(), part.images.begin(), part.images.end());
      ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
    }
    return ds;
  };
  auto train = load({"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                     "data_batch_4.bin", "data_batch_5.bin"},
                    "train");
  auto test = load({"test_batch.bin"}, "test");
  return {std::move(train), std::move(test)};
}

enum class NormalizationMode { mean_std, scale255 };

/// Per-channel affine map from bytes to network inputs.
struct Normalizer {
  NormalizationMode mode = NormalizationMode::mean_std;
  std::array<double, kImageChannels> mean{0, 0, 0};
  std::array<double, kImageChannels> stddev{1, 1, 1};

  static Normalizer fit(const Dataset& train) {
    if (train.size() == 0) throw DataError("cannot fit normalization on an empty dataset");
    Normalizer n;
    const std::size_t plane = kImageSide * kImageSide;
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      double sum = 0, sq = 0;
      for (std::size_t i = 0; i < train.size(); ++i) {
        const std::uint8_t* p = train.images.data() + i * kImageBytes + c * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          sum += p[j];
          sq += static_cast<double>(p[j]) * p[j];
        }
      }
      const double count = static_cast<double>(train.size() * plane);
      n.mean[c] = sum / count;
      const double var = std::max(0.0, sq / count - n.mean[c] * n.mean[c]);
      n.stddev[c] = std::sqrt(var);
      if (!(n.stddev[c] > 0)) {
        throw DataError("channel " + std::to_string(c) +
                        " is constant; cannot normalize by its deviation");
      }
    }
    return n;
  }

  static Normalizer divide_by_255() {
    Normalizer n;
    n.mode = NormalizationMode::scale255;
    n.stddev = {255, 255, 255};
    return n;
  }

  double normalize(double byte, std::size_t channel) const {
    return (byte - mean[channel]) / stddev[channel];
  }
  double denormalize(double value, std::size_t channel) const {
    return value * stddev[channel] + mean[channel];
  }

  template <typename T>
  void normalize_image(std::span<const std::uint8_t> image, std::span<T> out) const {
    const std::size_t plane = kImageSide * kImageSide;
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      const double scale = 1.0 / stddev[c];
      for (std::size_t j = 0; j < plane; ++j) {
        out[c * plane + j] = static_cast<T>((image[c * plane + j] - mean[c]) * scale);
      }
    }
  }
};

/// Crop offsets into the zero-padded image plus an optional horizontal flip.
struct Translation {
  std::size_t offset_y = 4;
  std::size_t offset_x = 4;
  bool flip = false;
};

inline constexpr std::size_t kAugmentPad = 4;

template <typename Rng>
Translation draw_translation(Rng& rng, std::size_t pad = kAugmentPad) {
  std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
  std::bernoulli_distribution flip(0.5);
  Translation t;
  t.offset_y = offset(rng);
  t.offset_x = offset(rng);
  t.flip = flip(rng);
  return t;
}

/// Pads a CHW image by `pad` zeros per side, crops the original size at
/// (offset_y, offset_x), then mirrors columns if requested.
template <typename T>
void translate(std::span<const T> image, std::span<T> out, std::size_t channels,
               std::size_t height, std::size_t width, const Translation& t,
               std::size_t pad = kAugmentPad) {
  if (t.offset_y > 2 * pad || t.offset_x > 2 * pad) {
    throw UsageError("crop offset outside the padded image");
  }
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < height; ++i) {
      const auto si = static_cast<std::ptrdiff_t>(i + t.offset_y) -
                      static_cast<std::ptrdiff_t>(pad);
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t col = t.flip ? width - 1 - j : j;
        const auto sj = static_cast<std::ptrdiff_t>(col + t.offset_x) -
                        static_cast<std::ptrdiff_t>(pad);
        const bool inside = si >= 0 && si < static_cast<std::ptrdiff_t>(height) &&
                            sj >= 0 && sj < static_cast<std::ptrdiff_t>(width);
        out[(c * height + i) * width + j] =
            inside ? image[(c * height + static_cast<std::size_t>(si)) * width +
                           static_cast<std::size_t>(sj)]
                   : T(0);
      }
    }
  }
}

template <typename T, typename Rng>
void augment(std::span<const T> image, std::span<T> out, Rng& rng) {
  translate(image, out, kImageChannels, kImageSide, kImageSide, draw_translation(rng));
}

/// Independent stream for one item of one epoch, so augmentation does not
/// depend on how items are grouped or processed.
inline std::mt19937_64 item_stream(std::uint64_t seed, std::uint64_t epoch,
                                   std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

struct AugmentSpec {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
};

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// Normalized NCHW batch of the given records, augmented when `augment_spec`
/// is set.
template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                    const Normalizer& normalizer,
                    const AugmentSpec* augment_spec = nullptr) {
  Batch<T> batch;
  batch.images = Tensor<T>({indices.size(), kImageChannels, kImageSide, kImageSide});
  batch.labels.reserve(indices.size());
  std::vector<T> scratch(kImageBytes);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t i = indices[b];
    if (i >= ds.size()) {
      throw UsageError("record " + std::to_string(i) + " outside dataset of " +
                       std::to_string(ds.size()));
    }
    auto dst = batch.images.data().subspan(b * kImageBytes, kImageBytes);
    if (augment_spec) {
      normalizer.normalize_image<T>(ds.image(i), scratch);
      auto rng = item_stream(augment_spec->seed, augment_spec->epoch, i);
      augment<T>(scratch, dst, rng);
    } else {
      normalizer.normalize_image<T>(ds.image(i), dst);
    }
    batch.labels.push_back(ds.labels[i]);
  }
  return batch;
}

/// Splits 0..n-1 into batches, shuffled when `rng` is given. A trailing
/// batch of one record joins the previous batch, since batch statistics
/// need at least two.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n,
                                                          std::size_t batch_size,
                                                          std::mt19937_64* rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (rng) std::shuffle(order.begin(), order.end(), *rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

/// Toy 10-way task: each class is an oriented grating with its own angle
/// and period, drawn with random phase, contrast and tint, over a random
/// Gaussian blob and pixel noise. Random phase means no fixed linear
/// template separates the classes.
inline Dataset make_synthetic(std::size_t classes, std::size_t per_class,
                              std::uint64_t seed, const std::string& split = "train") {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (classes > 255) throw ConfigError("synthetic data supports at most 255 classes");
  constexpr double kPi = 3.14159265358979323846;
  Dataset ds;
  ds.split = split;
  for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  ds.labels.reserve(classes * per_class);
  ds.images.resize(classes * per_class * kImageBytes);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t plane = kImageSide * kImageSide;
  std::vector<double> pixel(kImageBytes);
  std::size_t record = 0;
  for (std::size_t n = 0; n < per_class; ++n) {
    for (std::size_t c = 0; c < classes; ++c, ++record) {
      const double angle = kPi * static_cast<double>(c) / static_cast<double>(classes) +
                           (unit(rng) - 0.5) * (kPi / 6.0);
      const double period = c % 2 == 0 ? 5.0 : 8.0;
      const double phase = 2 * kPi * unit(rng);
      const double contrast = 20.0 + 20.0 * unit(rng);
      const double clutter_angle = kPi * unit(rng);
      const double clutter_period = unit(rng) < 0.5 ? 5.0 : 8.0;
      const double clutter_phase = 2 * kPi * unit(rng);
      const double clutter = 10.0 + 15.0 * unit(rng);
      const double by = 4 + 24 * unit(rng), bx = 4 + 24 * unit(rng);
      const double blob = (unit(rng) < 0.5 ? -1.0 : 1.0) * (30.0 + 30.0 * unit(rng));
      std::array<double, kImageChannels> tint;
      for (auto& t : tint) t = 0.6 + 0.4 * unit(rng);
      const double ca = std::cos(angle), sa = std::sin(angle);
      for (std::size_t i = 0; i < kImageSide; ++i) {
        for (std::size_t j = 0; j < kImageSide; ++j) {
          const double y = static_cast<double>(i), x = static_cast<double>(j);
          const double wave = std::sin(2 * kPi * (x * ca + y * sa) / period + phase);
          const double distractor =
              clutter * std::sin(2 * kPi * (x * std::cos(clutter_angle) + y * std::sin(clutter_angle)) /
                                     clutter_period +
                                 clutter_phase);
          const double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
          const double g = blob * std::exp(-d2 / (2 * 16.0));
          for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
            pixel[ch * plane + i * kImageSide + j] =
                128.0 + tint[ch] * contrast * wave + distractor + g + 20.0 * noise(rng);
          }
        }
      }
      std::uint8_t* dst = ds.images.data() + record * kImageBytes;
      for (std::size_t k = 0; k < kImageBytes; ++k) {
        dst[k] = static_cast<std::uint8_t>(std::clamp(std::lround(pixel[k]), 0L, 255L));
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

/// The first `count` records of the synthetic stream; classes stay balanced
/// to within one record.
inline Dataset make_synthetic_count(std::size_t classes, std::size_t count, std::uint64_t seed,
                                   const std::string& split = "train") {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  Dataset ds = make_synthetic(classes, (count + classes - 1) / classes, seed, split);
  ds.labels.resize(count);
  ds.images.resize(count * kImageBytes);
  return ds;
}

}  // namespace copanet
