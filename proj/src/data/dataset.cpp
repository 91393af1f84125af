#include "gradinit/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numeric>

namespace gi::data {
namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw DataError("truncated IDX header in " + path.string());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

constexpr std::uint32_t kIdxImageMagic = 2051;
constexpr std::uint32_t kIdxLabelMagic = 2049;
constexpr std::size_t kCifarRecord = 3073;
constexpr std::int64_t kCifarSide = 32;

}  // namespace

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::synth_seq: return "synth-seq";
  }
  return "unknown";
}

Dataset Dataset::images(DatasetKind kind, ImageStorage storage) {
  const std::int64_t per = storage.channels * storage.height * storage.width;
  if (per <= 0) throw DataError("image dataset with empty example shape");
  if (static_cast<std::int64_t>(storage.pixels.size()) !=
      per * static_cast<std::int64_t>(storage.labels.size())) {
    throw DataError("pixel buffer does not match label count");
  }
  if (storage.mean.size() != static_cast<std::size_t>(storage.channels) ||
      storage.std.size() != static_cast<std::size_t>(storage.channels)) {
    throw DataError("normalization constants do not match channel count");
  }
  Dataset d;
  d.kind_ = kind;
  d.count_ = static_cast<std::int64_t>(storage.labels.size());
  d.images_ = std::make_shared<const ImageStorage>(std::move(storage));
  return d;
}

Dataset Dataset::sequences(SeqStorage storage) {
  if (storage.length <= 0 || storage.vocab < 3) throw DataError("invalid sequence dataset");
  if (storage.source.size() != storage.target.size() ||
      storage.source.size() % static_cast<std::size_t>(storage.length) != 0) {
    throw DataError("sequence buffers do not match length");
  }
  Dataset d;
  d.kind_ = DatasetKind::synth_seq;
  d.count_ = static_cast<std::int64_t>(storage.source.size()) / storage.length;
  d.seqs_ = std::make_shared<const SeqStorage>(std::move(storage));
  return d;
}

Shape Dataset::input_shape() const {
  if (images_) return {images_->channels, images_->height, images_->width};
  if (seqs_) return {seqs_->length};
  return {};
}

std::int64_t Dataset::num_classes() const {
  if (seqs_) return seqs_->vocab;
  return 10;
}

const Dataset::ImageStorage& Dataset::image_storage() const {
  if (!images_) throw DataError("dataset has no image storage");
  return *images_;
}

const Dataset::SeqStorage& Dataset::seq_storage() const {
  if (!seqs_) throw DataError("dataset has no sequence storage");
  return *seqs_;
}

std::span<const std::uint8_t> Dataset::raw_image(std::int64_t index) const {
  const auto& s = image_storage();
  if (index < 0 || index >= count_) throw std::out_of_range("example index out of range");
  const std::int64_t per = s.channels * s.height * s.width;
  return {s.pixels.data() + index * per, static_cast<std::size_t>(per)};
}

std::int32_t Dataset::label(std::int64_t index) const {
  const auto& s = image_storage();
  if (index < 0 || index >= count_) throw std::out_of_range("example index out of range");
  return s.labels[static_cast<std::size_t>(index)];
}

Real Dataset::normalize(std::uint8_t raw, std::int64_t channel) const {
  const auto& s = image_storage();
  const auto c = static_cast<std::size_t>(channel);
  return (static_cast<Real>(raw) / Real(255) - s.mean[c]) / s.std[c];
}

std::uint8_t Dataset::denormalize(Real value, std::int64_t channel) const {
  const auto& s = image_storage();
  const auto c = static_cast<std::size_t>(channel);
  const Real scaled = (value * s.std[c] + s.mean[c]) * Real(255);
  return static_cast<std::uint8_t>(std::clamp<long>(std::lround(scaled), 0, 255));
}

Batch Dataset::batch(std::span<const std::int64_t> indices) const {
  Batch b;
  b.indices.assign(indices.begin(), indices.end());
  const auto n = static_cast<std::int64_t>(indices.size());
  if (images_) {
    const auto& s = *images_;
    const std::int64_t plane = s.height * s.width, per = s.channels * plane;
    ad::Tensor inputs(Shape{n, s.channels, s.height, s.width});
    auto out = inputs.mutable_data();
    b.labels.reserve(indices.size());
    for (std::int64_t i = 0; i < n; ++i) {
      const auto raw = raw_image(indices[static_cast<std::size_t>(i)]);
      for (std::int64_t c = 0; c < s.channels; ++c) {
        const auto uc = static_cast<std::size_t>(c);
        const Real m = s.mean[uc], inv = Real(1) / s.std[uc];
        for (std::int64_t p = 0; p < plane; ++p) {
          out[static_cast<std::size_t>(i * per + c * plane + p)] =
              (static_cast<Real>(raw[static_cast<std::size_t>(c * plane + p)]) / Real(255) - m) * inv;
        }
      }
      b.labels.push_back(label(indices[static_cast<std::size_t>(i)]));
    }
    b.inputs = std::move(inputs);
    return b;
  }
  const auto& s = seq_storage();
  const std::int64_t len = s.length;
  b.source_length = len;
  b.target_length = len + 1;
  b.source.reserve(static_cast<std::size_t>(n * len));
  b.target_in.reserve(static_cast<std::size_t>(n * (len + 1)));
  b.target_out.reserve(static_cast<std::size_t>(n * (len + 1)));
  for (auto idx : indices) {
    if (idx < 0 || idx >= count_) throw std::out_of_range("example index out of range");
    const auto off = static_cast<std::size_t>(idx * len);
    b.source.insert(b.source.end(), s.source.begin() + static_cast<std::ptrdiff_t>(off),
                    s.source.begin() + static_cast<std::ptrdiff_t>(off + static_cast<std::size_t>(len)));
    b.target_in.push_back(kBosToken);
    for (std::int64_t t = 0; t < len; ++t) {
      const auto tok = s.target[off + static_cast<std::size_t>(t)];
      b.target_in.push_back(tok);
      b.target_out.push_back(tok);
    }
    b.target_out.push_back(kEosToken);
  }
  return b;
}

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  if (images_) {
    ImageStorage s;
    s.channels = images_->channels;
    s.height = images_->height;
    s.width = images_->width;
    s.mean = images_->mean;
    s.std = images_->std;
    for (auto idx : indices) {
      const auto raw = raw_image(idx);
      s.pixels.insert(s.pixels.end(), raw.begin(), raw.end());
      s.labels.push_back(label(idx));
    }
    return images(kind_, std::move(s));
  }
  const auto& src = seq_storage();
  SeqStorage s;
  s.vocab = src.vocab;
  s.length = src.length;
  s.task = src.task;
  for (auto idx : indices) {
    if (idx < 0 || idx >= count_) throw std::out_of_range("example index out of range");
    const auto off = static_cast<std::ptrdiff_t>(idx * src.length);
    s.source.insert(s.source.end(), src.source.begin() + off, src.source.begin() + off + src.length);
    s.target.insert(s.target.end(), src.target.begin() + off, src.target.begin() + off + src.length);
  }
  return sequences(std::move(s));
}

Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (read_be32(img, 0, images_path) != kIdxImageMagic) {
    throw DataError("bad magic in " + images_path.string() + " (expected 2051)");
  }
  if (read_be32(lab, 0, labels_path) != kIdxLabelMagic) {
    throw DataError("bad magic in " + labels_path.string() + " (expected 2049)");
  }
  const std::uint32_t count = read_be32(img, 4, images_path);
  const std::uint32_t rows = read_be32(img, 8, images_path);
  const std::uint32_t cols = read_be32(img, 12, images_path);
  const std::uint32_t label_count = read_be32(lab, 4, labels_path);
  if (count != label_count) {
    throw DataError("image count " + std::to_string(count) + " does not match label count " +
                    std::to_string(label_count));
  }
  const std::size_t per = std::size_t{rows} * cols;
  if (img.size() < 16 + per * count) throw DataError("truncated image file " + images_path.string());
  if (lab.size() < 8 + std::size_t{count}) throw DataError("truncated label file " + labels_path.string());

  Dataset::ImageStorage s;
  s.channels = 1;
  s.height = rows;
  s.width = cols;
  s.mean = {kMnistMean};
  s.std = {kMnistStd};
  s.pixels.assign(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(per * count));
  s.labels.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint8_t l = lab[8 + i];
    if (l >= 10) throw DataError("label out of range in " + labels_path.string());
    s.labels.push_back(l);
  }
  return Dataset::images(DatasetKind::mnist, std::move(s));
}

Dataset load_mnist_dir(const std::filesystem::path& root, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  for (const auto& dir : {root, root / "mnist"}) {
    const auto images = dir / (prefix + "-images-idx3-ubyte");
    const auto labels = dir / (prefix + "-labels-idx1-ubyte");
    if (std::filesystem::exists(images) && std::filesystem::exists(labels)) return load_mnist_idx(images, labels);
  }
  throw DataError("MNIST " + prefix + " files not found under " + root.string());
}

Dataset load_cifar10_files(const std::vector<std::filesystem::path>& files, std::int64_t cap,
                           std::uint64_t seed) {
  if (files.empty()) throw DataError("no CIFAR-10 batch files given");
  Dataset::ImageStorage s;
  s.channels = 3;
  s.height = kCifarSide;
  s.width = kCifarSide;
  s.mean = kCifarMean;
  s.std = kCifarStd;
  for (const auto& f : files) {
    const auto bytes = read_file(f);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
      throw DataError(f.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of 3073");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
      if (bytes[off] >= 10) throw DataError(f.string() + ": label " + std::to_string(bytes[off]) + " >= 10");
      s.labels.push_back(bytes[off]);
      s.pixels.insert(s.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                      bytes.begin() + static_cast<std::ptrdiff_t>(off + kCifarRecord));
    }
  }
  Dataset full = Dataset::images(DatasetKind::cifar10, std::move(s));
  if (cap <= 0 || cap >= full.size()) return full;
  std::mt19937_64 rng(seed);
  auto keep = sample_indices(full.size(), cap, rng);
  std::sort(keep.begin(), keep.end());
  return full.subset(keep);
}

Dataset load_cifar10_bin(const std::filesystem::path& dir, bool train, std::int64_t cap,
                         std::uint64_t seed) {
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  for (const auto& f : files) {
    if (!std::filesystem::exists(f)) throw DataError("missing CIFAR-10 file " + f.string());
  }
  return load_cifar10_files(files, cap, seed);
}

Dataset synth_seq_task(std::int64_t vocab, std::int64_t length, std::int64_t count,
                       SeqTaskKind kind, std::uint64_t seed) {
  if (vocab < 4 || length < 1 || count < 1) {
    throw DataError("synth_seq_task needs vocab >= 4 (3 reserved tokens), length >= 1, count >= 1");
  }
  Dataset::SeqStorage s;
  s.vocab = vocab;
  s.length = length;
  s.task = kind;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> token(3, vocab - 1);
  s.source.reserve(static_cast<std::size_t>(length * count));
  s.target.reserve(static_cast<std::size_t>(length * count));
  std::vector<std::int64_t> row(static_cast<std::size_t>(length));
  for (std::int64_t i = 0; i < count; ++i) {
    for (auto& t : row) t = token(rng);
    s.source.insert(s.source.end(), row.begin(), row.end());
    if (kind == SeqTaskKind::reverse) std::reverse(row.begin(), row.end());
    s.target.insert(s.target.end(), row.begin(), row.end());
  }
  return Dataset::sequences(std::move(s));
}

ChannelStats measure_channel_stats(const Dataset& dataset) {
  const auto& s = dataset.image_storage();
  const std::int64_t plane = s.height * s.width, per = s.channels * plane;
  ChannelStats stats;
  stats.mean.assign(static_cast<std::size_t>(s.channels), 0.0);
  stats.std.assign(static_cast<std::size_t>(s.channels), 0.0);
  std::vector<double> sq(static_cast<std::size_t>(s.channels), 0.0);
  for (std::int64_t i = 0; i < dataset.size(); ++i) {
    for (std::int64_t c = 0; c < s.channels; ++c) {
      for (std::int64_t p = 0; p < plane; ++p) {
        const double v = s.pixels[static_cast<std::size_t>(i * per + c * plane + p)] / 255.0;
        stats.mean[static_cast<std::size_t>(c)] += v;
        sq[static_cast<std::size_t>(c)] += v * v;
      }
    }
  }
  const double n = static_cast<double>(dataset.size() * plane);
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    stats.mean[c] /= n;
    stats.std[c] = std::sqrt(std::max(0.0, sq[c] / n - stats.mean[c] * stats.mean[c]));
  }
  return stats;
}

void verify_normalization(const Dataset& dataset, double relative_tolerance) {
  const auto& s = dataset.image_storage();
  const auto stats = measure_channel_stats(dataset);
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    const double dm = std::abs(stats.mean[c] - s.mean[c]) / s.mean[c];
    const double ds = std::abs(stats.std[c] - s.std[c]) / s.std[c];
    if (dm > relative_tolerance || ds > relative_tolerance) {
      throw DataError(to_string(dataset.kind()) + " channel " + std::to_string(c) + ": measured mean/std " +
                      std::to_string(stats.mean[c]) + "/" + std::to_string(stats.std[c]) +
                      " deviate from normalization constants " + std::to_string(s.mean[c]) + "/" +
                      std::to_string(s.std[c]));
    }
  }
}

void augment_crop_flip(Batch& batch, std::mt19937_64& rng) {
  if (!batch.inputs.defined() || batch.inputs.rank() != 4) return;
  const auto n = batch.inputs.dim(0), c = batch.inputs.dim(1), h = batch.inputs.dim(2),
             w = batch.inputs.dim(3);
  constexpr std::int64_t pad = 4;
  std::uniform_int_distribution<std::int64_t> shift(-pad, pad);
  std::bernoulli_distribution flip(0.5);
  auto data = batch.inputs.mutable_data();
  std::vector<Real> tmp(static_cast<std::size_t>(c * h * w));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t dy = shift(rng), dx = shift(rng);
    const bool mirror = flip(rng);
    Real* img = data.data() + i * c * h * w;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t sy = y + dy, sx0 = x + dx;
          const std::int64_t sx = mirror ? (w - 1 - sx0) : sx0;
          tmp[static_cast<std::size_t>((ch * h + y) * w + x)] =
              (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img[(ch * h + sy) * w + sx] : Real(0);
        }
      }
    }
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

std::vector<std::int64_t> sample_indices(std::int64_t population, std::int64_t size,
                                         std::mt19937_64& rng) {
  if (size < 0 || size > population) {
    throw DataError("cannot sample " + std::to_string(size) + " distinct examples from " +
                    std::to_string(population));
  }
  std::vector<std::int64_t> pool(static_cast<std::size_t>(population));
  std::iota(pool.begin(), pool.end(), std::int64_t{0});
  for (std::int64_t i = 0; i < size; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, population - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
  }
  pool.resize(static_cast<std::size_t>(size));
  return pool;
}

Batch sample_batch(const Dataset& dataset, std::int64_t size, std::mt19937_64& rng) {
  const auto idx = sample_indices(dataset.size(), size, rng);
  return dataset.batch(idx);
}

std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t population,
                                                     std::int64_t batch_size,
                                                     std::mt19937_64& rng) {
  if (batch_size <= 0) throw DataError("batch size must be positive");
  const auto order = sample_indices(population, population, rng);
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t start = 0; start < population; start += batch_size) {
    const auto end = std::min(population, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

std::filesystem::path resolve_data_dir(const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* env = std::getenv("DATA_DIR"); env && *env) return env;
  return {};
}

}  // namespace gi::data
