#pragma once

// CIFAR-10 binary batches: each record is one label byte followed by 3072
// pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32x32).

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "sbattn/tensor.hpp"

namespace sbattn::cifar {

inline constexpr std::size_t kSide = 32;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kImageBytes = kChannels * kSide * kSide;
inline constexpr std::size_t kRecordBytes = kImageBytes + 1;
inline constexpr std::size_t kRecordsPerBatch = 10000;
inline constexpr std::size_t kNumClasses = 10;
inline constexpr std::size_t kPad = 2;

enum class Split { train, test };

struct ChannelStats {
  std::array<double, kChannels> mean{};
  std::array<double, kChannels> stddev{};
};

struct Records {
  std::vector<std::uint8_t> pixels;  // kImageBytes per record
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

struct Dataset {
  Tensor images;  // [M, 3, 32, 32], normalized
  std::vector<int> labels;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  /// Images at the given indices stacked into [B, 3, 32, 32].
  Tensor gather(std::span<const std::size_t> indices) const;
  Tensor image(std::size_t index) const;
};

std::vector<std::filesystem::path> split_files(const std::filesystem::path& directory, Split split);

/// Parses one batch file; rejects lengths that are not whole records and labels >= 10.
Records read_batch_file(const std::filesystem::path& file);
Records read_split(const std::filesystem::path& directory, Split split);

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
ChannelStats channel_stats(const Records& records);

/// Seeded class-balanced sample of record indices, returned in ascending order.
/// A remainder that does not divide by the class count goes to the lowest classes.
std::vector<std::size_t> balanced_subset(std::span<const int> labels, std::size_t subset_size, std::uint64_t seed);

/// Scales to [0, 1] and normalizes with the given statistics.
Dataset make_dataset(const Records& records, std::span<const std::size_t> indices, const ChannelStats& stats,
                     Split split);

/// Loads a split, normalized with statistics of the full training split
/// (computed from the directory unless supplied).
Dataset load_cifar10(const std::filesystem::path& directory, Split split,
                     std::optional<std::size_t> subset_size = std::nullopt, std::uint64_t seed = 0,
                     std::optional<ChannelStats> stats = std::nullopt);

/// Zero-pads to 36x36, crops 32x32 at (offset_y, offset_x), then optionally
/// mirrors horizontally. Offsets lie in [0, 4].
Tensor augment_with(const Tensor& image, std::size_t offset_y, std::size_t offset_x, bool flip);
Tensor augment(const Tensor& image, std::mt19937_64& rng);

/// Directory given explicitly, else $CIFAR10_DIR, else ./data/cifar-10-batches-bin,
/// provided it holds the training and test batches.
std::optional<std::filesystem::path> find_data_dir(const std::optional<std::filesystem::path>& explicit_dir = {});

/// Writes a small class-structured data set in the CIFAR-10 binary layout
/// (five training batches and one test batch). Used for demos and tests when
/// the real data is unavailable.
void write_synthetic(const std::filesystem::path& directory, std::size_t train_per_class, std::size_t test_per_class,
                     std::uint64_t seed);

}  // namespace sbattn::cifar
