#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cifar_fixture.hpp"
#include "msn/data.hpp"

using namespace msn::data;
namespace fs = std::filesystem;

namespace {

class FetchTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("msn_fetch_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_ / "mirror");
    archive_ = root_ / "mirror" / "cifar.tar.gz";
    contents_ = testutil::write_cifar_archive(archive_, 4, 91);
    options_.url = "file://" + archive_.string();
    options_.digest = "sha256:" + file_digest(archive_, "sha256");
    options_.records_per_file = 4;
    options_.attempts = 1;
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path root_;
  fs::path archive_;
  std::vector<std::vector<std::uint8_t>> contents_;
  FetchOptions options_;
};

}  // namespace

TEST(Digest, KnownVectors) {
  const auto p = fs::temp_directory_path() / "msn_digest_abc";
  std::ofstream(p) << "abc";
  EXPECT_EQ(file_digest(p, "md5"), "900150983cd24fb0d6963f7d28e17f72");
  EXPECT_EQ(file_digest(p, "sha256"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_THROW(file_digest(p, "crc32"), FetchError);
  fs::remove(p);
}

TEST_F(FetchTest, DownloadsVerifiesAndExtracts) {
  const auto result = fetch_dataset("cifar10", root_ / "data", options_);
  EXPECT_TRUE(result.downloaded);
  EXPECT_FALSE(result.already_verified);
  const auto splits = load_cifar10(result.files);
  EXPECT_EQ(splits.train.size(), 20u);
  EXPECT_EQ(splits.test.size(), 4u);
  const auto first = decode_cifar10(contents_[0], Split::train);
  EXPECT_EQ(splits.train.labels[0], first.labels[0]);
  EXPECT_EQ(encode_cifar10(load_cifar10_file(result.files.test, Split::test)), contents_[5]);
}

TEST_F(FetchTest, SecondCallReusesVerifiedExtraction) {
  fetch_dataset("cifar10", root_ / "data", options_);
  fs::remove(archive_);
  const auto again = fetch_dataset("cifar10", root_ / "data", options_);
  EXPECT_TRUE(again.already_verified);
  EXPECT_FALSE(again.downloaded);
}

TEST_F(FetchTest, ModifiedExtractionIsRefetched) {
  const auto first = fetch_dataset("cifar10", root_ / "data", options_);
  {
    std::fstream f(first.files.train[2], std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
  }
  const auto again = fetch_dataset("cifar10", root_ / "data", options_);
  EXPECT_FALSE(again.already_verified);
  EXPECT_EQ(encode_cifar10(load_cifar10_file(again.files.train[2], Split::train)), contents_[2]);
}

TEST_F(FetchTest, TamperedArchiveIsRejected) {
  {
    std::fstream f(archive_, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x00');
    f.put('\x01');
  }
  try {
    fetch_dataset("cifar10", root_ / "data", options_);
    FAIL() << "expected a digest mismatch";
  } catch (const FetchError& e) {
    EXPECT_EQ(e.kind(), FetchError::Kind::digest_mismatch);
  }
  EXPECT_FALSE(fs::exists(root_ / "data" / kCifarDirName / "data_batch_1.bin"));
}

TEST_F(FetchTest, WrongRecordCountIsAFormatError) {
  options_.records_per_file = 5;
  try {
    fetch_dataset("cifar10", root_ / "data", options_);
    FAIL() << "expected a format error";
  } catch (const FetchError& e) {
    EXPECT_EQ(e.kind(), FetchError::Kind::format);
  }
}

TEST_F(FetchTest, UnreachableSourceIsANetworkError) {
  options_.url = "file://" + (root_ / "mirror" / "absent.tar.gz").string();
  try {
    fetch_dataset("cifar10", root_ / "data", options_);
    FAIL() << "expected a network error";
  } catch (const FetchError& e) {
    EXPECT_EQ(e.kind(), FetchError::Kind::network);
  }
  EXPECT_FALSE(fs::exists(root_ / "data" / options_.archive_name));
}

TEST_F(FetchTest, UsageErrors) {
  EXPECT_THROW(fetch_dataset("svhn", root_ / "data", options_), FetchError);
  options_.digest = "nodigest";
  try {
    fetch_dataset("cifar10", root_ / "data", options_);
    FAIL();
  } catch (const FetchError& e) {
    EXPECT_EQ(e.kind(), FetchError::Kind::usage);
  }
}
