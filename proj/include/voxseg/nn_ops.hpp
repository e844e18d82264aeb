#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg::nn {

template <typename T>
using MatRM =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;

inline int conv_out_dim(int n, int k, int s, int p) {
  return (n + 2 * p - k) / s + 1;
}

inline Index3 conv_out_spatial(const Index3& in, int k, int s, int p) {
  return {conv_out_dim(in[0], k, s, p), conv_out_dim(in[1], k, s, p),
          conv_out_dim(in[2], k, s, p)};
}

/// Unfolds (C, X, Y, Z) into a (C*k^3) x (outX*outY*outZ) row-major
/// matrix; out-of-bounds taps contribute zero. Row order is
/// (c, kx, ky, kz) with kz fastest, matching the flat weight layout.
template <typename T>
inline void im2col(const T* in, int c_in, const Index3& isp, int k, int s,
                   int p, const Index3& osp, T* cols) {
  const int ix = isp[0], iy = isp[1], iz = isp[2];
  const int ox = osp[0], oy = osp[1], oz = osp[2];
  const std::size_t vo = static_cast<std::size_t>(ox) * oy * oz;
  const std::size_t ch_stride = static_cast<std::size_t>(ix) * iy * iz;
  T* dst = cols;
  for (int c = 0; c < c_in; ++c) {
    const T* src_c = in + c * ch_stride;
    for (int kx = 0; kx < k; ++kx)
      for (int ky = 0; ky < k; ++ky)
        for (int kz = 0; kz < k; ++kz) {
          for (int xo = 0; xo < ox; ++xo) {
            const int xi = xo * s - p + kx;
            if (xi < 0 || xi >= ix) {
              std::memset(dst, 0, sizeof(T) * oy * oz);
              dst += static_cast<std::size_t>(oy) * oz;
              continue;
            }
            for (int yo = 0; yo < oy; ++yo) {
              const int yi = yo * s - p + ky;
              if (yi < 0 || yi >= iy) {
                std::memset(dst, 0, sizeof(T) * oz);
                dst += oz;
                continue;
              }
              const T* row = src_c + (static_cast<std::size_t>(xi) * iy + yi) * iz;
              const int zi0 = -p + kz;
              if (s == 1) {
                // contiguous z segment with zero head/tail
                int zo = 0;
                for (; zo < oz && zo + zi0 < 0; ++zo) *dst++ = T(0);
                const int run_end = std::min(oz, iz - zi0);
                if (run_end > zo) {
                  std::memcpy(dst, row + zo + zi0, sizeof(T) * (run_end - zo));
                  dst += run_end - zo;
                  zo = run_end;
                }
                for (; zo < oz; ++zo) *dst++ = T(0);
              } else {
                for (int zo = 0; zo < oz; ++zo) {
                  const int zi = zo * s + zi0;
                  *dst++ = (zi >= 0 && zi < iz) ? row[zi] : T(0);
                }
              }
            }
          }
        }
  }
  (void)vo;
}

/// Adjoint of im2col: scatter-adds column entries back onto the grid.
template <typename T>
inline void col2im(const T* cols, int c_in, const Index3& isp, int k, int s,
                   int p, const Index3& osp, T* grid) {
  const int ix = isp[0], iy = isp[1], iz = isp[2];
  const int ox = osp[0], oy = osp[1], oz = osp[2];
  const std::size_t ch_stride = static_cast<std::size_t>(ix) * iy * iz;
  const T* src = cols;
  for (int c = 0; c < c_in; ++c) {
    T* dst_c = grid + c * ch_stride;
    for (int kx = 0; kx < k; ++kx)
      for (int ky = 0; ky < k; ++ky)
        for (int kz = 0; kz < k; ++kz) {
          for (int xo = 0; xo < ox; ++xo) {
            const int xi = xo * s - p + kx;
            if (xi < 0 || xi >= ix) {
              src += static_cast<std::size_t>(oy) * oz;
              continue;
            }
            for (int yo = 0; yo < oy; ++yo) {
              const int yi = yo * s - p + ky;
              if (yi < 0 || yi >= iy) {
                src += oz;
                continue;
              }
              T* row = dst_c + (static_cast<std::size_t>(xi) * iy + yi) * iz;
              for (int zo = 0; zo < oz; ++zo) {
                const int zi = zo * s - p + kz;
                if (zi >= 0 && zi < iz) row[zi] += *src;
                ++src;
              }
            }
          }
        }
  }
}

/// out = W * unfold(in) + b. Weight layout (co, ci, kx, ky, kz) flattened
/// row-major; 1x1x1 stride-1 convolutions skip the unfold entirely.
template <typename T>
inline void conv_forward(const Tensor4<T>& in, const T* w, const T* b, int co,
                         int k, int s, int p, Tensor4<T>& out,
                         std::vector<T>& scratch) {
  const int ci = in.channels();
  const Index3 osp = conv_out_spatial(in.spatial(), k, s, p);
  if (out.channels() != co || out.spatial() != osp)
    out = Tensor4<T>(co, osp);
  const std::size_t vo = out.voxels();
  const std::size_t ck = static_cast<std::size_t>(ci) * k * k * k;

  const T* cols = nullptr;
  if (k == 1 && s == 1 && p == 0) {
    cols = in.data();
  } else {
    scratch.resize(ck * vo);
    im2col(in.data(), ci, in.spatial(), k, s, p, osp, scratch.data());
    cols = scratch.data();
  }
  MapCM<T> wm(w, co, static_cast<Eigen::Index>(ck));
  MapCM<T> xm(cols, static_cast<Eigen::Index>(ck),
              static_cast<Eigen::Index>(vo));
  MapM<T> om(out.data(), co, static_cast<Eigen::Index>(vo));
  om.noalias() = wm * xm;
  if (b != nullptr)
    for (int c = 0; c < co; ++c) om.row(c).array() += b[c];
}

/// Accumulates dW, db, and (when din is non-null) the input gradient.
template <typename T>
inline void conv_backward(const Tensor4<T>& in, const T* w, int co, int k,
                          int s, int p, const Tensor4<T>& dout, T* dw, T* db,
                          Tensor4<T>* din, std::vector<T>& scratch,
                          std::vector<T>& scratch2) {
  const int ci = in.channels();
  const Index3 osp = dout.spatial();
  const std::size_t vo = dout.voxels();
  const std::size_t ck = static_cast<std::size_t>(ci) * k * k * k;

  const T* cols = nullptr;
  if (k == 1 && s == 1 && p == 0) {
    cols = in.data();
  } else {
    scratch.resize(ck * vo);
    im2col(in.data(), ci, in.spatial(), k, s, p, osp, scratch.data());
    cols = scratch.data();
  }
  MapCM<T> dom(dout.data(), co, static_cast<Eigen::Index>(vo));
  {
    MapCM<T> xm(cols, static_cast<Eigen::Index>(ck),
                static_cast<Eigen::Index>(vo));
    MapM<T> dwm(dw, co, static_cast<Eigen::Index>(ck));
    dwm.noalias() += dom * xm.transpose();
  }
  if (db != nullptr) {
    // fixed-order accumulation keeps results independent of buffer addresses
    for (int c = 0; c < co; ++c) {
      const T* ch = dout.channel(c);
      T acc = T(0);
      for (std::size_t i = 0; i < vo; ++i) acc += ch[i];
      db[c] += acc;
    }
  }
  if (din != nullptr) {
    MapCM<T> wm(w, co, static_cast<Eigen::Index>(ck));
    if (k == 1 && s == 1 && p == 0) {
      MapM<T> dim(din->data(), ci, static_cast<Eigen::Index>(vo));
      dim.noalias() += wm.transpose() * dom;
    } else {
      scratch2.resize(ck * vo);
      MapM<T> dcols(scratch2.data(), static_cast<Eigen::Index>(ck),
                    static_cast<Eigen::Index>(vo));
      dcols.noalias() = wm.transpose() * dom;
      col2im(scratch2.data(), ci, in.spatial(), k, s, p, osp, din->data());
    }
  }
}

/// Transposed convolution, kernel 3 / stride 2 / padding 1 / output
/// padding 1: spatial size exactly doubles. The weight is stored as the
/// adjoint convolution's (c_in_small x c_out_big*27) matrix, so forward
/// is that convolution's input-gradient and vice versa.
template <typename T>
inline void tconv_forward(const Tensor4<T>& in, const T* w, const T* b,
                          int c_out, Tensor4<T>& out,
                          std::vector<T>& scratch) {
  constexpr int k = 3, s = 2, p = 1;
  const int c_in = in.channels();
  const Index3 isp = in.spatial();
  const Index3 osp{isp[0] * 2, isp[1] * 2, isp[2] * 2};
  if (out.channels() != c_out || out.spatial() != osp)
    out = Tensor4<T>(c_out, osp);
  out.fill(T(0));

  const std::size_t ck = static_cast<std::size_t>(c_out) * k * k * k;
  const std::size_t va = in.voxels();
  scratch.resize(ck * va);
  MapCM<T> wm(w, c_in, static_cast<Eigen::Index>(ck));
  MapCM<T> am(in.data(), c_in, static_cast<Eigen::Index>(va));
  MapM<T> cm(scratch.data(), static_cast<Eigen::Index>(ck),
             static_cast<Eigen::Index>(va));
  cm.noalias() = wm.transpose() * am;
  col2im(scratch.data(), c_out, osp, k, s, p, isp, out.data());
  if (b != nullptr) {
    const std::size_t vb = out.voxels();
    for (int c = 0; c < c_out; ++c) {
      T* ch = out.channel(c);
      for (std::size_t i = 0; i < vb; ++i) ch[i] += b[c];
    }
  }
}

template <typename T>
inline void tconv_backward(const Tensor4<T>& in, const T* w, int c_out,
                           const Tensor4<T>& dout, T* dw, T* db,
                           Tensor4<T>* din, std::vector<T>& scratch) {
  constexpr int k = 3, s = 2, p = 1;
  const int c_in = in.channels();
  const Index3 isp = in.spatial();
  const std::size_t va = in.voxels();
  const std::size_t ck = static_cast<std::size_t>(c_out) * k * k * k;

  scratch.resize(ck * va);
  im2col(dout.data(), c_out, dout.spatial(), k, s, p, isp, scratch.data());
  MapCM<T> dcols(scratch.data(), static_cast<Eigen::Index>(ck),
                 static_cast<Eigen::Index>(va));
  {
    MapCM<T> am(in.data(), c_in, static_cast<Eigen::Index>(va));
    MapM<T> dwm(dw, c_in, static_cast<Eigen::Index>(ck));
    dwm.noalias() += am * dcols.transpose();
  }
  if (db != nullptr) {
    const std::size_t vb = dout.voxels();
    for (int c = 0; c < c_out; ++c) {
      const T* ch = dout.channel(c);
      T acc = T(0);
      for (std::size_t i = 0; i < vb; ++i) acc += ch[i];
      db[c] += acc;
    }
  }
  if (din != nullptr) {
    MapCM<T> wm(w, c_in, static_cast<Eigen::Index>(ck));
    MapM<T> dim(din->data(), c_in, static_cast<Eigen::Index>(va));
    dim.noalias() += wm * dcols;
  }
}

/// 2x2x2 stride-2 max pooling; argmax stores the winning spatial index
/// per (channel, output voxel) for the backward scatter.
template <typename T>
inline void maxpool_forward(const Tensor4<T>& in, Tensor4<T>& out,
                            std::vector<std::int32_t>& argmax) {
  const Index3 isp = in.spatial();
  if (isp[0] % 2 || isp[1] % 2 || isp[2] % 2)
    throw ValidationError("maxpool: spatial dims must be even, got " +
                          index_to_string(isp));
  const Index3 osp{isp[0] / 2, isp[1] / 2, isp[2] / 2};
  const int c_n = in.channels();
  if (out.channels() != c_n || out.spatial() != osp)
    out = Tensor4<T>(c_n, osp);
  argmax.resize(out.size());
  const int iy = isp[1], iz = isp[2];
  std::size_t oi = 0;
  for (int c = 0; c < c_n; ++c) {
    const T* src = in.channel(c);
    for (int x = 0; x < osp[0]; ++x)
      for (int y = 0; y < osp[1]; ++y)
        for (int z = 0; z < osp[2]; ++z, ++oi) {
          T best{};
          std::int32_t best_i = -1;
          for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
              for (int dz = 0; dz < 2; ++dz) {
                const std::int32_t idx =
                    ((2 * x + dx) * iy + (2 * y + dy)) * iz + (2 * z + dz);
                const T v = src[idx];
                if (best_i < 0 || v > best) {
                  best = v;
                  best_i = idx;
                }
              }
          out.data()[oi] = best;
          argmax[oi] = best_i;
        }
  }
}

template <typename T>
inline void maxpool_backward(const Tensor4<T>& dout,
                             const std::vector<std::int32_t>& argmax,
                             Tensor4<T>& din) {
  const std::size_t vi = din.voxels();
  std::size_t oi = 0;
  for (int c = 0; c < dout.channels(); ++c) {
    T* dst = din.data() + c * vi;
    const T* src = dout.channel(c);
    const std::size_t vo = dout.voxels();
    for (std::size_t i = 0; i < vo; ++i, ++oi) dst[argmax[oi]] += src[i];
  }
}

/// PReLU with one learned slope per channel.
template <typename T>
inline void prelu_forward(const Tensor4<T>& in, const T* slope,
                          Tensor4<T>& out) {
  if (out.shape() != in.shape()) out = Tensor4<T>(in.channels(), in.spatial());
  const std::size_t v = in.voxels();
  for (int c = 0; c < in.channels(); ++c) {
    const T a = slope[c];
    const T* src = in.channel(c);
    T* dst = out.channel(c);
    for (std::size_t i = 0; i < v; ++i)
      dst[i] = src[i] > T(0) ? src[i] : a * src[i];
  }
}

/// din += d(prelu)/d(in) * dout; dslope accumulates per channel.
template <typename T>
inline void prelu_backward(const Tensor4<T>& in, const T* slope,
                           const Tensor4<T>& dout, Tensor4<T>& din,
                           T* dslope) {
  const std::size_t v = in.voxels();
  for (int c = 0; c < in.channels(); ++c) {
    const T a = slope[c];
    const T* x = in.channel(c);
    const T* dy = dout.channel(c);
    T* dx = din.channel(c);
    T ds = T(0);
    for (std::size_t i = 0; i < v; ++i) {
      if (x[i] > T(0)) {
        dx[i] += dy[i];
      } else {
        dx[i] += a * dy[i];
        ds += x[i] * dy[i];
      }
    }
    dslope[c] += ds;
  }
}

/// Scales whole channels by 0 or 1/(1-rate) (inverted dropout). The mask
/// holds the per-channel factor so backward is the same multiply.
template <typename T>
inline void channel_scale(Tensor4<T>& t, const std::vector<T>& mask) {
  const std::size_t v = t.voxels();
  for (int c = 0; c < t.channels(); ++c) {
    const T m = mask[c];
    T* ch = t.channel(c);
    if (m == T(1)) continue;
    for (std::size_t i = 0; i < v; ++i) ch[i] *= m;
  }
}

/// Per-voxel softmax over the channel axis, max-subtracted.
template <typename T>
inline void softmax_channels(const Tensor4<T>& in, Tensor4<T>& out) {
  const int n = in.channels();
  const std::size_t v = in.voxels();
  if (out.shape() != in.shape()) out = Tensor4<T>(n, in.spatial());
  for (std::size_t i = 0; i < v; ++i) {
    T m = in.data()[i];
    for (int c = 1; c < n; ++c) m = std::max(m, in.data()[c * v + i]);
    T sum = T(0);
    for (int c = 0; c < n; ++c) {
      const T e = std::exp(in.data()[c * v + i] - m);
      out.data()[c * v + i] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (int c = 0; c < n; ++c) out.data()[c * v + i] *= inv;
  }
}

/// dz = p .* (dp - <dp, p>) per voxel, the softmax Jacobian product.
template <typename T>
inline void softmax_backward(const Tensor4<T>& prob, const Tensor4<T>& dprob,
                             Tensor4<T>& dlogits) {
  const int n = prob.channels();
  const std::size_t v = prob.voxels();
  if (dlogits.shape() != prob.shape())
    dlogits = Tensor4<T>(n, prob.spatial());
  for (std::size_t i = 0; i < v; ++i) {
    T dot = T(0);
    for (int c = 0; c < n; ++c)
      dot += dprob.data()[c * v + i] * prob.data()[c * v + i];
    for (int c = 0; c < n; ++c)
      dlogits.data()[c * v + i] =
          prob.data()[c * v + i] * (dprob.data()[c * v + i] - dot);
  }
}

template <typename T>
inline void concat_channels(const Tensor4<T>& a, const Tensor4<T>& b,
                            Tensor4<T>& out) {
  if (a.spatial() != b.spatial())
    throw ValidationError("concat: spatial shapes differ");
  const int ca = a.channels(), cb = b.channels();
  if (out.channels() != ca + cb || out.spatial() != a.spatial())
    out = Tensor4<T>(ca + cb, a.spatial());
  std::memcpy(out.data(), a.data(), sizeof(T) * a.size());
  std::memcpy(out.data() + a.size(), b.data(), sizeof(T) * b.size());
}

template <typename T>
inline void split_channels(const Tensor4<T>& in, Tensor4<T>& a,
                           Tensor4<T>& b, int ca) {
  const int cb = in.channels() - ca;
  if (a.channels() != ca || a.spatial() != in.spatial())
    a = Tensor4<T>(ca, in.spatial());
  if (b.channels() != cb || b.spatial() != in.spatial())
    b = Tensor4<T>(cb, in.spatial());
  std::memcpy(a.data(), in.data(), sizeof(T) * a.size());
  std::memcpy(b.data(), in.data() + a.size(), sizeof(T) * b.size());
}

template <typename T>
inline void add_into(Tensor4<T>& acc, const Tensor4<T>& x) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += x.data()[i];
}

}  // namespace voxseg::nn
