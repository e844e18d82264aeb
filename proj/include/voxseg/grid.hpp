#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/error.hpp"

namespace voxseg {

/// Integer voxel index or extent. Axis 0 is sagittal (left-right),
/// axis 1 coronal (anterior-posterior), axis 2 axial (inferior-superior).
using Index3 = std::array<int, 3>;

/// Physical voxel spacing in mm per axis.
using Spacing3 = std::array<float, 3>;

inline std::string index_to_string(const Index3& v) {
  return "(" + std::to_string(v[0]) + ", " + std::to_string(v[1]) + ", " +
         std::to_string(v[2]) + ")";
}

/// Dense 3D scalar grid with voxel spacing.
///
/// Storage is contiguous with axis 2 (z) fastest:
/// flat index = (x * Y + y) * Z + z.
template <typename T>
class Grid3 {
 public:
  Grid3() : shape_{0, 0, 0}, spacing_{1.f, 1.f, 1.f} {}

  Grid3(Index3 shape, Spacing3 spacing, T fill = T{})
      : shape_(shape), spacing_(spacing) {
    for (int a = 0; a < 3; ++a) {
      if (shape_[a] < 1)
        throw ValidationError("Grid3: shape component " + std::to_string(a) +
                              " must be >= 1, got " + std::to_string(shape_[a]));
      if (!(spacing_[a] > 0.f) || !std::isfinite(spacing_[a]))
        throw ValidationError("Grid3: spacing component " + std::to_string(a) +
                              " must be > 0");
    }
    data_.assign(size(), fill);
  }

  const Index3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  void set_spacing(const Spacing3& s) { spacing_ = s; }

  int dim(int axis) const { return shape_[axis]; }
  std::size_t size() const {
    return static_cast<std::size_t>(shape_[0]) * shape_[1] * shape_[2];
  }
  bool empty() const { return data_.empty(); }

  std::size_t flat(int x, int y, int z) const {
    return (static_cast<std::size_t>(x) * shape_[1] + y) * shape_[2] + z;
  }

  T& operator()(int x, int y, int z) { return data_[flat(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data_[flat(x, y, z)]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool contains(int x, int y, int z) const {
    return x >= 0 && x < shape_[0] && y >= 0 && y < shape_[1] && z >= 0 &&
           z < shape_[2];
  }

  bool same_shape(const Grid3& other) const { return shape_ == other.shape_; }

  bool same_geometry(const Grid3& other, float spacing_tol = 1e-5f) const {
    if (shape_ != other.shape_) return false;
    for (int a = 0; a < 3; ++a)
      if (std::fabs(spacing_[a] - other.spacing_[a]) > spacing_tol) return false;
    return true;
  }

  bool operator==(const Grid3& other) const {
    return shape_ == other.shape_ && spacing_ == other.spacing_ &&
           data_ == other.data_;
  }

 private:
  Index3 shape_;
  Spacing3 spacing_;
  std::vector<T> data_;
};

}  // namespace voxseg
