#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "msn/tensor.hpp"

// Binary checkpoint container:
//
//   "MSN1" | version u16 | count u32 | count x tensor
//   tensor: name_len u16 | name (UTF-8) | dtype u8 (0 = f32, 1 = f64)
//           | rank u8 | extents u32 x rank | values
//
// Every integer and value is little-endian.

namespace msn::ckpt {

inline constexpr std::uint16_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, duplicate_name, malformed };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct NamedTensor {
  std::string name;
  std::variant<Tensor, Tensor64> value;

  bool operator==(const NamedTensor& other) const = default;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  /// Throws CheckpointError(malformed) when absent or of the wrong dtype.
  const Tensor& f32(const std::string& name) const;
  const Tensor64& f64(const std::string& name) const;

  bool operator==(const Checkpoint& other) const = default;
};

std::vector<std::uint8_t> encode(const Checkpoint& checkpoint);
Checkpoint decode(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_file(const std::filesystem::path& path);

}  // namespace msn::ckpt
