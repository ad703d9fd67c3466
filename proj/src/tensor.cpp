#include "msn/tensor.hpp"

#include <sstream>

namespace msn {

Shape::Shape(std::initializer_list<std::size_t> extents) : extents_(extents) { validate(); }

Shape::Shape(std::vector<std::size_t> extents) : extents_(std::move(extents)) { validate(); }

void Shape::validate() const {
  if (extents_.empty() || extents_.size() > 4) {
    throw ShapeError("shape rank must be 1-4, got " + std::to_string(extents_.size()));
  }
  for (std::size_t e : extents_) {
    if (e == 0) throw ShapeError("shape extents must be positive: " + str());
  }
}

std::size_t Shape::numel() const {
  if (extents_.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t e : extents_) n *= e;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < extents_.size(); ++i) {
    if (i) os << ", ";
    os << extents_[i];
  }
  os << ')';
  return os.str();
}

void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (a != b) throw ShapeError(what + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace msn
