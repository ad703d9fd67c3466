#include "msn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace msn::ckpt {
namespace {

using Kind = CheckpointError::Kind;

class Writer {
 public:
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(Kind::truncated, std::string("checkpoint truncated while reading ") + what);
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
void write_values(Writer& w, const BasicTensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : t.values()) w.uint(std::bit_cast<Bits>(v));
}

template <typename T>
BasicTensor<T> read_values(Reader& r, Shape shape) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = std::bit_cast<T>(r.uint<Bits>("tensor values"));
  return t;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const Tensor& Checkpoint::f32(const std::string& name) const {
  const NamedTensor* t = find(name);
  if (t == nullptr || !std::holds_alternative<Tensor>(t->value)) {
    throw CheckpointError(Kind::malformed, "checkpoint has no f32 tensor '" + name + "'");
  }
  return std::get<Tensor>(t->value);
}

const Tensor64& Checkpoint::f64(const std::string& name) const {
  const NamedTensor* t = find(name);
  if (t == nullptr || !std::holds_alternative<Tensor64>(t->value)) {
    throw CheckpointError(Kind::malformed, "checkpoint has no f64 tensor '" + name + "'");
  }
  return std::get<Tensor64>(t->value);
}

std::vector<std::uint8_t> encode(const Checkpoint& checkpoint) {
  Writer w;
  w.raw("MSN1", 4);
  w.uint(kFormatVersion);
  w.uint(static_cast<std::uint32_t>(checkpoint.tensors.size()));
  std::set<std::string> seen;
  for (const auto& t : checkpoint.tensors) {
    if (!seen.insert(t.name).second) {
      throw CheckpointError(Kind::duplicate_name, "duplicate tensor name '" + t.name + "'");
    }
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw CheckpointError(Kind::malformed, "tensor name too long");
    }
    w.uint(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    const bool is_f64 = std::holds_alternative<Tensor64>(t.value);
    const Shape& shape = is_f64 ? std::get<Tensor64>(t.value).shape() : std::get<Tensor>(t.value).shape();
    w.uint(static_cast<std::uint8_t>(is_f64 ? 1 : 0));
    w.uint(static_cast<std::uint8_t>(shape.rank()));
    for (std::size_t e : shape.extents()) w.uint(static_cast<std::uint32_t>(e));
    if (is_f64) {
      write_values(w, std::get<Tensor64>(t.value));
    } else {
      write_values(w, std::get<Tensor>(t.value));
    }
  }
  return w.take();
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), "MSN1", 4) != 0) throw CheckpointError(Kind::bad_magic, "not a checkpoint (bad magic)");
  const auto version = r.uint<std::uint16_t>("version");
  if (version != kFormatVersion) {
    throw CheckpointError(Kind::version_mismatch, "checkpoint format version " + std::to_string(version) +
                                                      ", expected " + std::to_string(kFormatVersion));
  }
  const auto count = r.uint<std::uint32_t>("tensor count");
  Checkpoint out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.uint<std::uint16_t>("name length");
    const auto name_bytes = r.raw(len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    if (!seen.insert(name).second) {
      throw CheckpointError(Kind::duplicate_name, "duplicate tensor name '" + name + "' in checkpoint");
    }
    const auto dtype = r.uint<std::uint8_t>("dtype");
    const auto rank = r.uint<std::uint8_t>("rank");
    if (dtype > 1) throw CheckpointError(Kind::malformed, "unknown dtype code " + std::to_string(dtype));
    if (rank < 1 || rank > 4) throw CheckpointError(Kind::malformed, "invalid rank " + std::to_string(rank));
    std::vector<std::size_t> extents;
    for (std::uint8_t a = 0; a < rank; ++a) {
      const auto e = r.uint<std::uint32_t>("extent");
      if (e == 0) throw CheckpointError(Kind::malformed, "zero extent in tensor '" + name + "'");
      extents.push_back(e);
    }
    Shape shape(std::move(extents));
    if (dtype == 1) {
      out.tensors.push_back({std::move(name), read_values<double>(r, std::move(shape))});
    } else {
      out.tensors.push_back({std::move(name), read_values<float>(r, std::move(shape))});
    }
  }
  if (!r.done()) throw CheckpointError(Kind::malformed, "trailing bytes after the last tensor");
  return out;
}

void write_file(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode(checkpoint);
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(Kind::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::io, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace msn::ckpt
