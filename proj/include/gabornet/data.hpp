#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gabornet/errors.hpp"
#include "gabornet/rng.hpp"
#include "gabornet/tensor.hpp"

namespace gabornet {

enum class Split { Train, Test };

struct Dataset {
  Tensor4<float> images;  // N x C x H x W, normalized
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::Train;
  bool augment = false;
  std::vector<double> norm_mean;
  std::vector<double> norm_std;

  std::size_t size() const { return labels.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic oriented textures

struct TextureSpec {
  std::uint64_t seed = 1;
  std::size_t n_per_class = 250;
  int num_classes = 4;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  double noise = 0.5;            // std of additive Gaussian noise
  double wavelength = 4.0;       // grating wavelength in pixels
  double wavelength_jitter = 0.15;  // relative, uniform in [-j, j]
  Split split = Split::Train;
};

/// Class c is a sinusoidal grating at orientation c*pi/num_classes with
/// random phase and wavelength jitter; the same grating is written to every
/// channel with independent noise. Samples are interleaved by class.
/// Train and test splits draw from disjoint streams of the same seed.
inline Dataset synth_textures(const TextureSpec& s) {
  if (s.num_classes < 1 || s.num_classes > 8) throw InvalidArgumentError("synth_textures: num_classes must be in 1..8");
  if (s.image_size < 16) throw InvalidArgumentError("synth_textures: image_size must be >= 16");
  Rng rng(derive_seed(s.seed, s.split == Split::Train ? "textures/train" : "textures/test"));
  const std::size_t n = s.n_per_class * static_cast<std::size_t>(s.num_classes);
  Dataset d;
  d.images = Tensor4<float>(n, s.channels, s.image_size, s.image_size);
  d.labels.resize(n);
  d.num_classes = s.num_classes;
  d.split = s.split;
  d.norm_mean.assign(s.channels, 0.0);
  d.norm_std.assign(s.channels, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t j = 0; j < n; ++j) {
    const int c = static_cast<int>(j % static_cast<std::size_t>(s.num_classes));
    d.labels[j] = c;
    const double theta = c * std::numbers::pi / s.num_classes;
    const double lambda = s.wavelength * (1.0 + uniform(rng, -s.wavelength_jitter, s.wavelength_jitter));
    const double phase = uniform(rng, 0.0, two_pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < s.image_size; ++y) {
      for (std::size_t x = 0; x < s.image_size; ++x) {
        const double g = std::cos(two_pi * (x * ct + y * st) / lambda + phase);
        for (std::size_t ch = 0; ch < s.channels; ++ch) {
          d.images(j, ch, y, x) = static_cast<float>(g + s.noise * normal(rng));
        }
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

struct Normalization {
  std::vector<double> mean = {0.4914, 0.4822, 0.4465};
  std::vector<double> std = {0.2470, 0.2435, 0.2616};
};

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

/// Parses whole files of 3073-byte records (label, then R, G, B planes of
/// 32x32 row-major bytes). Validates everything before building the dataset.
inline Dataset parse_cifar10(const std::vector<std::filesystem::path>& files, Split split, const Normalization& norm) {
  std::vector<std::string> blobs;
  std::size_t total = 0;
  for (const auto& f : files) {
    std::string bytes = read_file_bytes(f);
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
      throw FormatError("'" + f.string() + "': length " + std::to_string(bytes.size()) +
                        " is not a positive multiple of 3073");
    }
    for (std::size_t r = 0; r < bytes.size(); r += kCifarRecordBytes) {
      const auto label = static_cast<unsigned char>(bytes[r]);
      if (label > 9) {
        throw FormatError("'" + f.string() + "': label " + std::to_string(label) + " at record " +
                          std::to_string(r / kCifarRecordBytes));
      }
    }
    total += bytes.size() / kCifarRecordBytes;
    blobs.push_back(std::move(bytes));
  }
  if (norm.mean.size() != 3 || norm.std.size() != 3) throw InvalidArgumentError("CIFAR-10 normalization needs 3 channels");
  Dataset d;
  d.images = Tensor4<float>(total, 3, kCifarSide, kCifarSide);
  d.labels.resize(total);
  d.num_classes = 10;
  d.split = split;
  d.augment = split == Split::Train;
  d.norm_mean = norm.mean;
  d.norm_std = norm.std;
  std::size_t j = 0;
  for (const auto& bytes : blobs) {
    for (std::size_t r = 0; r < bytes.size(); r += kCifarRecordBytes, ++j) {
      d.labels[j] = static_cast<unsigned char>(bytes[r]);
      float* dst = d.images.sample(j);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t p = 0; p < kCifarSide * kCifarSide; ++p) {
          const double v = static_cast<unsigned char>(bytes[r + 1 + ch * 1024 + p]) / 255.0;
          dst[ch * 1024 + p] = static_cast<float>((v - norm.mean[ch]) / norm.std[ch]);
        }
      }
    }
  }
  return d;
}

/// Loads data_batch_1..5.bin (train) and test_batch.bin (test) from `dir`.
inline std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir, const Normalization& norm = {}) {
  std::vector<std::filesystem::path> train_files;
  for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  Dataset train = parse_cifar10(train_files, Split::Train, norm);
  Dataset test = parse_cifar10({dir / "test_batch.bin"}, Split::Test, norm);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Augmentation

inline constexpr std::size_t kAugmentPad = 4;

/// Zero-pads by 4, crops H x W at offset (dy, dx) in [0, 8], optionally flips
/// horizontally. (4, 4) without flip is the identity.
inline void augment_with(std::span<const float> src, std::span<float> dst, std::size_t channels, std::size_t h,
                         std::size_t w, std::size_t dy, std::size_t dx, bool flip) {
  if (src.size() != channels * h * w || dst.size() != src.size()) throw DimensionError("augment: size mismatch");
  if (dy > 2 * kAugmentPad || dx > 2 * kAugmentPad) throw InvalidArgumentError("augment: crop offset out of range");
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t xs = flip ? (w - 1 - x) : x;
        // position in the padded image, then back to source coordinates
        const long sy = static_cast<long>(y + dy) - static_cast<long>(kAugmentPad);
        const long sx = static_cast<long>(xs + dx) - static_cast<long>(kAugmentPad);
        float v = 0.0f;
        if (sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w)) {
          v = src[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        }
        dst[(c * h + y) * w + x] = v;
      }
    }
  }
}

struct AugmentDraw {
  std::size_t dy;
  std::size_t dx;
  bool flip;
};

inline AugmentDraw draw_augment(Rng& rng) {
  AugmentDraw d;
  d.dy = uniform_index(rng, 2 * kAugmentPad + 1);
  d.dx = uniform_index(rng, 2 * kAugmentPad + 1);
  d.flip = uniform01(rng) < 0.5;
  return d;
}

/// Random pad-and-crop plus horizontal flip (p = 0.5), in place.
inline AugmentDraw augment(std::span<float> image, std::size_t channels, std::size_t h, std::size_t w, Rng& rng) {
  const AugmentDraw d = draw_augment(rng);
  const std::vector<float> src(image.begin(), image.end());
  augment_with(src, image, channels, h, w, d.dy, d.dx, d.flip);
  return d;
}

/// Gathers `indices` into a batch, augmenting when `rng` is given and the
/// dataset enables augmentation.
template <class T>
Tensor4<T> make_batch(const Dataset& d, std::span<const std::size_t> indices, Rng* rng, std::vector<int>& labels) {
  const auto& im = d.images;
  Tensor4<T> batch(indices.size(), im.c(), im.h(), im.w());
  labels.resize(indices.size());
  std::vector<float> tmp(im.sample_size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const float* src = im.sample(indices[b]);
    std::copy(src, src + im.sample_size(), tmp.begin());
    if (rng != nullptr && d.augment) augment(tmp, im.c(), im.h(), im.w(), *rng);
    std::copy(tmp.begin(), tmp.end(), batch.sample(b));
    labels[b] = d.labels[indices[b]];
  }
  return batch;
}

}  // namespace gabornet
