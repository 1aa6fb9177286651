#include "sbattn/cifar.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>

#include "sbattn/errors.hpp"

namespace sbattn::cifar {

namespace fs = std::filesystem;

std::vector<fs::path> split_files(const fs::path& directory, Split split) {
  if (split == Split::test) return {directory / "test_batch.bin"};
  std::vector<fs::path> files;
  for (int i = 1; i <= 5; ++i) files.push_back(directory / ("data_batch_" + std::to_string(i) + ".bin"));
  return files;
}

Records read_batch_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open CIFAR-10 batch " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kRecordBytes != 0) {
    throw FormatError(file.string() + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kRecordBytes));
  }
  const std::size_t n = bytes.size() / kRecordBytes;
  Records r;
  r.labels.reserve(n);
  r.pixels.reserve(n * kImageBytes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kRecordBytes;
    if (rec[0] >= kNumClasses) {
      throw FormatError(file.string() + ": record " + std::to_string(i) + " has label byte " +
                        std::to_string(static_cast<int>(rec[0])));
    }
    r.labels.push_back(rec[0]);
    r.pixels.insert(r.pixels.end(), rec + 1, rec + kRecordBytes);
  }
  return r;
}

Records read_split(const fs::path& directory, Split split) {
  Records all;
  for (const fs::path& f : split_files(directory, split)) {
    Records r = read_batch_file(f);
    all.labels.insert(all.labels.end(), r.labels.begin(), r.labels.end());
    all.pixels.insert(all.pixels.end(), r.pixels.begin(), r.pixels.end());
  }
  return all;
}

ChannelStats channel_stats(const Records& records) {
  if (records.size() == 0) throw ContractError("channel statistics of an empty record set");
  constexpr std::size_t plane = kSide * kSide;
  ChannelStats s;
  for (std::size_t c = 0; c < kChannels; ++c) {
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const std::uint8_t* p = records.pixels.data() + i * kImageBytes + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        sum += v;
        sum_sq += v * v;
      }
    }
    const double count = static_cast<double>(records.size() * plane);
    s.mean[c] = sum / count;
    s.stddev[c] = std::sqrt(std::max(sum_sq / count - s.mean[c] * s.mean[c], 1e-12));
  }
  return s;
}

std::vector<std::size_t> balanced_subset(std::span<const int> labels, std::size_t subset_size, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const std::size_t want = subset_size / kNumClasses + (c < subset_size % kNumClasses ? 1 : 0);
    if (want > by_class[c].size()) {
      throw ContractError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                          " samples, subset needs " + std::to_string(want));
    }
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    out.insert(out.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(want));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Dataset make_dataset(const Records& records, std::span<const std::size_t> indices, const ChannelStats& stats,
                     Split split) {
  constexpr std::size_t plane = kSide * kSide;
  if (indices.empty()) throw ContractError("dataset would be empty");
  Dataset d;
  d.split = split;
  d.images = Tensor({indices.size(), kChannels, kSide, kSide});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    if (i >= records.size()) throw ContractError("record index out of range");
    d.labels.push_back(records.labels[i]);
    const std::uint8_t* src = records.pixels.data() + i * kImageBytes;
    double* dst = d.images.raw() + j * kImageBytes;
    for (std::size_t c = 0; c < kChannels; ++c) {
      for (std::size_t k = 0; k < plane; ++k) {
        dst[c * plane + k] = (src[c * plane + k] / 255.0 - stats.mean[c]) / stats.stddev[c];
      }
    }
  }
  return d;
}

Dataset load_cifar10(const fs::path& directory, Split split, std::optional<std::size_t> subset_size,
                     std::uint64_t seed, std::optional<ChannelStats> stats) {
  Records records = read_split(directory, split);
  if (!stats) stats = channel_stats(split == Split::train ? records : read_split(directory, Split::train));
  std::vector<std::size_t> indices;
  if (subset_size) {
    indices = balanced_subset(records.labels, *subset_size, seed);
  } else {
    indices.resize(records.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  }
  return make_dataset(records, indices, *stats, split);
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  Tensor out({indices.size(), kChannels, kSide, kSide});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const double* src = images.raw() + indices[j] * kImageBytes;
    std::copy(src, src + kImageBytes, out.raw() + j * kImageBytes);
  }
  return out;
}

Tensor Dataset::image(std::size_t index) const {
  const std::size_t idx[1] = {index};
  return gather(idx).reshaped({kChannels, kSide, kSide});
}

Tensor augment_with(const Tensor& image, std::size_t offset_y, std::size_t offset_x, bool flip) {
  if (image.shape() != Shape{kChannels, kSide, kSide}) {
    throw DimensionError("augment expects [3, 32, 32], got " + shape_str(image.shape()));
  }
  if (offset_y > 2 * kPad || offset_x > 2 * kPad) throw ContractError("crop offset outside [0, 4]");
  Tensor out({kChannels, kSide, kSide});
  for (std::size_t c = 0; c < kChannels; ++c) {
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        // position in the 36x36 padded image
        const auto py = static_cast<std::ptrdiff_t>(y + offset_y) - static_cast<std::ptrdiff_t>(kPad);
        const auto px = static_cast<std::ptrdiff_t>(x + offset_x) - static_cast<std::ptrdiff_t>(kPad);
        double v = 0.0;
        if (py >= 0 && px >= 0 && py < static_cast<std::ptrdiff_t>(kSide) && px < static_cast<std::ptrdiff_t>(kSide)) {
          v = image[(c * kSide + static_cast<std::size_t>(py)) * kSide + static_cast<std::size_t>(px)];
        }
        const std::size_t ox = flip ? kSide - 1 - x : x;
        out[(c * kSide + y) * kSide + ox] = v;
      }
    }
  }
  return out;
}

Tensor augment(const Tensor& image, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> offset(0, 2 * kPad);
  const std::size_t oy = offset(rng);
  const std::size_t ox = offset(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  return augment_with(image, oy, ox, flip);
}

std::optional<fs::path> find_data_dir(const std::optional<fs::path>& explicit_dir) {
  auto complete = [](const fs::path& dir) {
    for (Split s : {Split::train, Split::test}) {
      for (const fs::path& f : split_files(dir, s)) {
        if (!fs::is_regular_file(f)) return false;
      }
    }
    return true;
  };
  if (explicit_dir) return complete(*explicit_dir) ? explicit_dir : std::nullopt;
  if (const char* env = std::getenv("CIFAR10_DIR")) {
    if (complete(env)) return fs::path(env);
  }
  const fs::path local = fs::path("data") / "cifar-10-batches-bin";
  if (complete(local)) return local;
  return std::nullopt;
}

void write_synthetic(const fs::path& directory, std::size_t train_per_class, std::size_t test_per_class,
                     std::uint64_t seed) {
  fs::create_directories(directory);
  std::mt19937_64 rng(seed);
  constexpr double kPi = 3.14159265358979323846;
  // Each class: a base colour and an oriented sinusoidal texture.
  std::array<std::array<double, kChannels>, kNumClasses> colour{};
  std::array<double, kNumClasses> angle{}, freq{};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (double& v : colour[c]) v = 60.0 + 130.0 * unit(rng);
    angle[c] = kPi * static_cast<double>(c) / kNumClasses;
    freq[c] = 0.25 + 0.35 * unit(rng);
  }
  std::normal_distribution<double> noise(0.0, 40.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);

  auto write_records = [&](const fs::path& file, std::size_t per_class) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(per_class * kNumClasses * kRecordBytes);
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        bytes.push_back(static_cast<std::uint8_t>(c));
        const double ph = phase(rng);
        const double ca = std::cos(angle[c]), sa = std::sin(angle[c]);
        for (std::size_t ch = 0; ch < kChannels; ++ch) {
          for (std::size_t y = 0; y < kSide; ++y) {
            for (std::size_t x = 0; x < kSide; ++x) {
              const double t = freq[c] * (ca * static_cast<double>(x) + sa * static_cast<double>(y)) + ph;
              const double v = colour[c][ch] + 50.0 * std::sin(t) + noise(rng);
              bytes.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
            }
          }
        }
      }
    }
    std::ofstream out(file, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed to write " + file.string());
  };
  for (const fs::path& f : split_files(directory, Split::train)) write_records(f, train_per_class);
  write_records(split_files(directory, Split::test).front(), test_per_class);
}

}  // namespace sbattn::cifar
