#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "msn/data.hpp"

namespace testutil {

/// Writes a gzip-compressed ustar archive laid out like the CIFAR-10 binary
/// release, with `records` random records per batch file. Returns the raw
/// bytes written for each file in archive order.
inline std::vector<std::vector<std::uint8_t>> write_cifar_archive(const std::filesystem::path& path, std::size_t records,
                                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> names;
  for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
  names.push_back("test_batch.bin");

  gzFile gz = gzopen(path.c_str(), "wb");
  std::vector<std::vector<std::uint8_t>> contents;
  const auto header = [&](const std::string& name, std::size_t size, char type) {
    char h[512] = {};
    std::snprintf(h, 100, "%s", name.c_str());
    std::snprintf(h + 100, 8, "%07o", 0644);
    std::snprintf(h + 108, 8, "%07o", 0);
    std::snprintf(h + 116, 8, "%07o", 0);
    std::snprintf(h + 124, 12, "%011zo", size);
    std::snprintf(h + 136, 12, "%011o", 0);
    h[156] = type;
    std::memcpy(h + 257, "ustar", 6);
    std::memcpy(h + 263, "00", 2);
    std::memset(h + 148, ' ', 8);
    unsigned sum = 0;
    for (unsigned char c : h) sum += c;
    std::snprintf(h + 148, 8, "%06o", sum);
    gzwrite(gz, h, 512);
  };
  header("cifar-10-batches-bin/", 0, '5');
  for (const auto& name : names) {
    std::vector<std::uint8_t> bytes(records * msn::data::kCifarRecordBytes);
    for (std::size_t r = 0; r < records; ++r) {
      bytes[r * msn::data::kCifarRecordBytes] = static_cast<std::uint8_t>(rng() % 10);
      for (std::size_t b = 1; b < msn::data::kCifarRecordBytes; ++b) {
        bytes[r * msn::data::kCifarRecordBytes + b] = static_cast<std::uint8_t>(rng());
      }
    }
    header("cifar-10-batches-bin/" + name, bytes.size(), '0');
    gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
    const std::size_t pad = (512 - bytes.size() % 512) % 512;
    const std::vector<char> zeros(pad + 1024, 0);
    if (pad > 0) gzwrite(gz, zeros.data(), static_cast<unsigned>(pad));
    contents.push_back(std::move(bytes));
  }
  const std::vector<char> end(1024, 0);
  gzwrite(gz, end.data(), 1024);
  gzclose(gz);
  return contents;
}

}  // namespace testutil
