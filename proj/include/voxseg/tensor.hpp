#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"

namespace voxseg {

/// Dense channels-first 4D tensor (C, X, Y, Z), z fastest.
/// Each channel is a contiguous block of X*Y*Z scalars, so the tensor
/// doubles as a (C x voxels) row-major matrix.
template <typename T>
class Tensor4 {
 public:
  Tensor4() : shape_{0, 0, 0, 0} {}

  Tensor4(int c, Index3 sp, T fill = T{}) : shape_{c, sp[0], sp[1], sp[2]} {
    if (c < 1 || sp[0] < 1 || sp[1] < 1 || sp[2] < 1)
      throw ValidationError("Tensor4: all dimensions must be >= 1");
    data_.assign(size(), fill);
  }

  int channels() const { return shape_[0]; }
  Index3 spatial() const { return {shape_[1], shape_[2], shape_[3]}; }
  const std::array<int, 4>& shape() const { return shape_; }

  std::size_t voxels() const {
    return static_cast<std::size_t>(shape_[1]) * shape_[2] * shape_[3];
  }
  std::size_t size() const { return voxels() * shape_[0]; }
  bool empty() const { return data_.empty(); }

  std::size_t flat(int c, int x, int y, int z) const {
    return ((static_cast<std::size_t>(c) * shape_[1] + x) * shape_[2] + y) *
               shape_[3] +
           z;
  }

  T& operator()(int c, int x, int y, int z) { return data_[flat(c, x, y, z)]; }
  const T& operator()(int c, int x, int y, int z) const {
    return data_[flat(c, x, y, z)];
  }

  T* channel(int c) { return data_.data() + c * voxels(); }
  const T* channel(int c) const { return data_.data() + c * voxels(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { data_.assign(data_.size(), v); }

  bool operator==(const Tensor4& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_[0], spatial());
    for (std::size_t i = 0; i < data_.size(); ++i)
      out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::array<int, 4> shape_;  // C, X, Y, Z
  std::vector<T> data_;
};

}  // namespace voxseg
