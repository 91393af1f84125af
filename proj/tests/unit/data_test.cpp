#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gradinit/data/dataset.hpp"

using namespace gi;
using namespace gi::data;
namespace fs = std::filesystem;

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("gi_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// 10 images of 4x3 pixels; pixel value (i*12 + p) mod 256, label i mod 10.
void write_idx_fixture(const fs::path& dir, std::uint32_t image_magic = 2051, std::uint32_t label_magic = 2049,
                       std::uint32_t label_count = 10, std::size_t drop_tail = 0) {
  std::vector<std::uint8_t> img, lab;
  put_be32(img, image_magic);
  put_be32(img, 10);
  put_be32(img, 4);
  put_be32(img, 3);
  for (int i = 0; i < 10; ++i)
    for (int p = 0; p < 12; ++p) img.push_back(static_cast<std::uint8_t>((i * 12 + p + 7) % 256));
  img.resize(img.size() - drop_tail);
  put_be32(lab, label_magic);
  put_be32(lab, label_count);
  for (std::uint32_t i = 0; i < label_count; ++i) lab.push_back(static_cast<std::uint8_t>(i % 10));
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", lab);
}

std::vector<std::uint8_t> cifar_records(int n, std::uint8_t first_label = 0) {
  std::vector<std::uint8_t> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(static_cast<std::uint8_t>((first_label + i) % 10));
    for (int p = 0; p < 3072; ++p) out.push_back(static_cast<std::uint8_t>((p + 3 * i) % 256));
  }
  return out;
}

}  // namespace

TEST(Mnist, CraftedFixturePixelRoundTrip) {
  TempDir tmp;
  write_idx_fixture(tmp.path());
  Dataset d = load_mnist_idx(tmp.path() / "img", tmp.path() / "lab");
  EXPECT_EQ(d.size(), 10);
  EXPECT_EQ(d.input_shape(), (Shape{1, 4, 3}));
  EXPECT_EQ(d.label(3), 3);
  const std::vector<std::int64_t> idx{0};
  Batch b = d.batch(idx);
  const double pre = b.inputs.at(0) * kMnistStd + kMnistMean;
  EXPECT_NEAR(pre, 7.0 / 255.0, 1e-12);
}

TEST(Mnist, BadMagicRejected) {
  TempDir tmp;
  write_idx_fixture(tmp.path(), 2051, 2051);
  EXPECT_THROW(load_mnist_idx(tmp.path() / "img", tmp.path() / "lab"), DataError);
  write_idx_fixture(tmp.path(), 2049, 2049);
  EXPECT_THROW(load_mnist_idx(tmp.path() / "img", tmp.path() / "lab"), DataError);
}

TEST(Mnist, TruncatedAndMismatchedRejected) {
  TempDir tmp;
  write_idx_fixture(tmp.path(), 2051, 2049, 10, 5);
  EXPECT_THROW(load_mnist_idx(tmp.path() / "img", tmp.path() / "lab"), DataError);
  write_idx_fixture(tmp.path(), 2051, 2049, 9);
  EXPECT_THROW(load_mnist_idx(tmp.path() / "img", tmp.path() / "lab"), DataError);
  EXPECT_THROW(load_mnist_idx(tmp.path() / "missing", tmp.path() / "lab"), DataError);
}

TEST(Mnist, StandardTrainingFiles) {
  const fs::path root = resolve_data_dir("");
  if (root.empty()) GTEST_SKIP() << "DATA_DIR not set";
  Dataset d;
  try {
    d = load_mnist_dir(root, true);
  } catch (const DataError& e) {
    GTEST_SKIP() << e.what();
  }
  EXPECT_EQ(d.size(), 60000);
  EXPECT_EQ(d.input_shape(), (Shape{1, 28, 28}));
  EXPECT_NO_THROW(verify_normalization(d));
}

TEST(Normalization, DenormalizeRecoversRawBytes) {
  TempDir tmp;
  write_idx_fixture(tmp.path());
  Dataset d = load_mnist_idx(tmp.path() / "img", tmp.path() / "lab");
  std::vector<std::int64_t> all(10);
  for (int i = 0; i < 10; ++i) all[static_cast<std::size_t>(i)] = i;
  Batch b = d.batch(all);
  for (std::int64_t i = 0; i < 10; ++i) {
    const auto raw = d.raw_image(i);
    for (std::size_t p = 0; p < raw.size(); ++p) {
      EXPECT_EQ(d.denormalize(b.inputs.at(i * 12 + static_cast<std::int64_t>(p)), 0), raw[p]);
    }
  }
}

TEST(Normalization, VerifyRejectsWrongConstants) {
  Dataset::ImageStorage s;
  s.channels = 1;
  s.height = 1;
  s.width = 2;
  s.pixels = {0, 255};
  s.labels = {0};
  s.mean = {Real(0.5)};
  s.std = {Real(0.5)};
  EXPECT_NO_THROW(verify_normalization(Dataset::images(DatasetKind::mnist, s)));
  s.mean = {Real(0.4)};
  EXPECT_THROW(verify_normalization(Dataset::images(DatasetKind::mnist, s)), DataError);
}

TEST(Cifar, ParsesRecords) {
  TempDir tmp;
  write_bytes(tmp.path() / "b.bin", cifar_records(4, 6));
  Dataset d = load_cifar10_files({tmp.path() / "b.bin"});
  EXPECT_EQ(d.size(), 4);
  EXPECT_EQ(d.input_shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(d.label(0), 6);
  EXPECT_EQ(d.label(3), 9);
  EXPECT_EQ(d.raw_image(1)[0], 3);
}

TEST(Cifar, LengthAndLabelErrors) {
  TempDir tmp;
  write_bytes(tmp.path() / "short.bin", std::vector<std::uint8_t>(3072, 1));
  EXPECT_THROW(load_cifar10_files({tmp.path() / "short.bin"}), DataError);
  auto bad = cifar_records(2);
  bad[3073] = 10;
  write_bytes(tmp.path() / "bad.bin", bad);
  EXPECT_THROW(load_cifar10_files({tmp.path() / "bad.bin"}), DataError);
  EXPECT_THROW(load_cifar10_bin(tmp.path(), true), DataError);
}

TEST(Cifar, SubsetCapIsDeterministic) {
  TempDir tmp;
  write_bytes(tmp.path() / "b.bin", cifar_records(50));
  Dataset a = load_cifar10_files({tmp.path() / "b.bin"}, 20, 3);
  Dataset b = load_cifar10_files({tmp.path() / "b.bin"}, 20, 3);
  ASSERT_EQ(a.size(), 20);
  for (std::int64_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a.label(i), b.label(i));
    EXPECT_TRUE(std::ranges::equal(a.raw_image(i), b.raw_image(i)));
  }
}

TEST(SynthSeq, CopyAndReverseExamples) {
  Dataset::SeqStorage s;
  s.vocab = 10;
  s.length = 3;
  s.source = {5, 7, 9};
  s.target = {5, 7, 9};
  Batch b = Dataset::sequences(s).batch(std::vector<std::int64_t>{0});
  EXPECT_EQ(b.target_in, (std::vector<std::int64_t>{kBosToken, 5, 7, 9}));
  EXPECT_EQ(b.target_out, (std::vector<std::int64_t>{5, 7, 9, kEosToken}));

  for (auto kind : {SeqTaskKind::copy, SeqTaskKind::reverse}) {
    Dataset d = synth_seq_task(12, 5, 40, kind, 1);
    const auto& st = d.seq_storage();
    for (std::int64_t i = 0; i < d.size(); ++i) {
      std::vector<std::int64_t> src(st.source.begin() + i * 5, st.source.begin() + i * 5 + 5);
      std::vector<std::int64_t> tgt(st.target.begin() + i * 5, st.target.begin() + i * 5 + 5);
      for (auto t : src) {
        EXPECT_GE(t, 3);
        EXPECT_LT(t, 12);
      }
      if (kind == SeqTaskKind::reverse) std::reverse(src.begin(), src.end());
      EXPECT_EQ(src, tgt);
    }
  }
}

TEST(SynthSeq, InvalidSizes) {
  EXPECT_THROW(synth_seq_task(3, 5, 10, SeqTaskKind::copy, 0), DataError);
  EXPECT_THROW(synth_seq_task(10, 0, 10, SeqTaskKind::copy, 0), DataError);
}

TEST(Sampling, SameSeedSameIndices) {
  std::mt19937_64 a(42), b(42);
  EXPECT_EQ(sample_indices(1000, 128, a), sample_indices(1000, 128, b));
  EXPECT_EQ(sample_indices(1000, 128, a), sample_indices(1000, 128, b));
}

TEST(Sampling, FullSizeIsPermutationAndBatchesUnique) {
  std::mt19937_64 rng(1);
  auto idx = sample_indices(200, 200, rng);
  std::sort(idx.begin(), idx.end());
  for (std::int64_t i = 0; i < 200; ++i) EXPECT_EQ(idx[static_cast<std::size_t>(i)], i);
  auto b = sample_indices(200, 64, rng);
  EXPECT_EQ(std::set<std::int64_t>(b.begin(), b.end()).size(), 64u);
  EXPECT_THROW(sample_indices(10, 11, rng), DataError);
}

TEST(Sampling, ChiSquaredUniformity) {
  // 10,000 draws of size-10 batches over 100 indices: each index expected
  // 1,000 times. Critical chi^2 at p = 0.01 with 99 dof is 134.64.
  std::mt19937_64 rng(2024);
  std::vector<double> counts(100, 0);
  for (int t = 0; t < 10000; ++t)
    for (auto i : sample_indices(100, 10, rng)) counts[static_cast<std::size_t>(i)] += 1;
  double chi2 = 0;
  for (double c : counts) chi2 += (c - 1000) * (c - 1000) / 1000;
  EXPECT_LT(chi2, 134.64);
}

TEST(Sampling, EpochBatchesCoverAll) {
  std::mt19937_64 rng(5);
  auto batches = epoch_batches(300, 128, rng);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches.back().size(), 44u);
  std::set<std::int64_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 300u);
}

TEST(Augment, ZeroShiftNoFlipIsIdentityInDistribution) {
  Batch b;
  b.inputs = ad::Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  std::mt19937_64 rng(0);
  augment_crop_flip(b, rng);
  for (Real v : b.inputs.data()) EXPECT_TRUE(v == 0 || v == 1 || v == 2 || v == 3 || v == 4);
}
