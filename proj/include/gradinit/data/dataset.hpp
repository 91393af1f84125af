#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradinit/autodiff/tensor.hpp"

namespace gi::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DatasetKind { mnist, cifar10, synth_seq };
enum class SeqTaskKind { copy, reverse };

std::string to_string(DatasetKind kind);

/// Reserved tokens of the synthetic sequence vocabulary.
inline constexpr std::int64_t kPadToken = 0;
inline constexpr std::int64_t kBosToken = 1;
inline constexpr std::int64_t kEosToken = 2;

/// A minibatch. Image tasks fill `inputs` [N, C, H, W] and `labels`; the
/// sequence task fills the three token arrays (row-major, N rows each).
struct Batch {
  std::vector<std::int64_t> indices;
  ad::Tensor inputs;
  std::vector<std::int32_t> labels;

  std::vector<std::int64_t> source;
  std::vector<std::int64_t> target_in;
  std::vector<std::int64_t> target_out;
  std::int64_t source_length = 0;
  std::int64_t target_length = 0;

  std::size_t size() const { return indices.size(); }
};

/// Immutable dataset. Copies share storage, so a handle can be passed by
/// value to parallel runs.
class Dataset {
 public:
  struct ImageStorage {
    std::int64_t channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> pixels;  // example-major, CHW within an example
    std::vector<std::int32_t> labels;
    std::vector<Real> mean, std;       // per channel, applied after /255
  };
  struct SeqStorage {
    std::int64_t vocab = 0, length = 0;
    SeqTaskKind task = SeqTaskKind::copy;
    std::vector<std::int64_t> source;  // example-major
    std::vector<std::int64_t> target;
  };

  static Dataset images(DatasetKind kind, ImageStorage storage);
  static Dataset sequences(SeqStorage storage);

  DatasetKind kind() const { return kind_; }
  std::int64_t size() const { return count_; }
  /// Per-example input shape: [C, H, W] for images, [length] for sequences.
  Shape input_shape() const;
  /// Number of classes, or vocabulary size for the sequence task.
  std::int64_t num_classes() const;

  Batch batch(std::span<const std::int64_t> indices) const;
  /// Examples `indices`, in that order, as a new dataset.
  Dataset subset(std::span<const std::int64_t> indices) const;

  std::span<const std::uint8_t> raw_image(std::int64_t index) const;
  std::int32_t label(std::int64_t index) const;
  const ImageStorage& image_storage() const;
  const SeqStorage& seq_storage() const;

  Real normalize(std::uint8_t raw, std::int64_t channel) const;
  /// Inverse of normalize, rounded to the nearest byte.
  std::uint8_t denormalize(Real value, std::int64_t channel) const;

 private:
  DatasetKind kind_ = DatasetKind::mnist;
  std::int64_t count_ = 0;
  std::shared_ptr<const ImageStorage> images_;
  std::shared_ptr<const SeqStorage> seqs_;
};

// Standard published normalization statistics.
inline constexpr Real kMnistMean = Real(0.1307);
inline constexpr Real kMnistStd = Real(0.3081);
inline const std::vector<Real> kCifarMean = {Real(0.4914), Real(0.4822), Real(0.4465)};
inline const std::vector<Real> kCifarStd = {Real(0.2470), Real(0.2435), Real(0.2616)};

/// Parses big-endian IDX image (magic 2051) and label (magic 2049) files.
Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path);

/// Loads the train or t10k pair from `root` or `root`/mnist.
Dataset load_mnist_dir(const std::filesystem::path& root, bool train);

/// Parses CIFAR-10 binary batch files of 3073-byte records. When `cap` is
/// positive and smaller than the record count, a seeded subset is kept.
Dataset load_cifar10_files(const std::vector<std::filesystem::path>& files, std::int64_t cap = 0,
                           std::uint64_t seed = 0);
/// data_batch_1..5.bin (train) or test_batch.bin from `dir`.
Dataset load_cifar10_bin(const std::filesystem::path& dir, bool train, std::int64_t cap = 0,
                         std::uint64_t seed = 0);

Dataset synth_seq_task(std::int64_t vocab, std::int64_t length, std::int64_t count,
                       SeqTaskKind kind, std::uint64_t seed);

/// Measured per-channel mean/std of the de-scaled pixels (before
/// standardization).
struct ChannelStats {
  std::vector<double> mean, std;
};
ChannelStats measure_channel_stats(const Dataset& dataset);
/// Throws DataError if the measured statistics differ from the dataset's
/// normalization constants by more than `relative_tolerance`.
void verify_normalization(const Dataset& dataset, double relative_tolerance = 0.01);

/// Random 4-pixel-padded crop plus horizontal flip, applied in place.
void augment_crop_flip(Batch& batch, std::mt19937_64& rng);

/// Uniform sample of `size` distinct indices; advances `rng` deterministically.
std::vector<std::int64_t> sample_indices(std::int64_t population, std::int64_t size,
                                         std::mt19937_64& rng);
Batch sample_batch(const Dataset& dataset, std::int64_t size, std::mt19937_64& rng);

/// Shuffled epoch order split into consecutive batches (last one may be short).
std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t population,
                                                     std::int64_t batch_size,
                                                     std::mt19937_64& rng);

/// Locates dataset files: explicit directory, else $DATA_DIR, else empty.
std::filesystem::path resolve_data_dir(const std::string& explicit_dir);

}  // namespace gi::data
