#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/volume.hpp"

namespace voxseg::preprocess {

namespace detail {

using Vec3 = std::array<double, 3>;

struct Mat3 {
  double m[3][3];

  static Mat3 identity() {
    return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  }

  Vec3 operator*(const Vec3& v) const {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += m[i][k] * o.m[k][j];
        r.m[i][j] = s;
      }
    return r;
  }

  Mat3 transposed() const {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
    return r;
  }
};

inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
}
inline Mat3 rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
}
inline Mat3 rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}
inline Mat3 drot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{{0, 0, 0}, {0, -s, -c}, {0, c, -s}}};
}
inline Mat3 drot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{{-s, 0, c}, {0, 0, 0}, {-c, 0, -s}}};
}
inline Mat3 drot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {{{-s, -c, 0}, {c, -s, 0}, {0, 0, 0}}};
}

}  // namespace detail

/// 6-DOF rigid map from moving-image to fixed-image physical coordinates:
/// T(q) = R(q - center) + center + translation, R = Rz(rz) Ry(ry) Rx(rx).
/// Resampling onto the fixed grid samples the moving image at T^-1(p).
struct RigidTransform {
  std::array<double, 3> rotation{0, 0, 0};     // radians (rx, ry, rz)
  std::array<double, 3> translation{0, 0, 0};  // mm
  std::array<double, 3> center{0, 0, 0};       // mm

  detail::Mat3 rotation_matrix() const {
    return detail::rot_z(rotation[2]) * detail::rot_y(rotation[1]) *
           detail::rot_x(rotation[0]);
  }

  detail::Vec3 apply(const detail::Vec3& q) const {
    using namespace detail;
    return rotation_matrix() * (q - Vec3(center)) + Vec3(center) +
           Vec3(translation);
  }

  /// Fixed-space point -> moving-space sample position.
  detail::Vec3 pull(const detail::Vec3& p) const {
    using namespace detail;
    return rotation_matrix().transposed() *
               (p - Vec3(center) - Vec3(translation)) +
           Vec3(center);
  }

  void validate() const {
    for (int k = 0; k < 3; ++k)
      if (!std::isfinite(rotation[k]) || !std::isfinite(translation[k]) ||
          !std::isfinite(center[k]))
        throw ValidationError("rigid transform has non-finite parameters");
  }
};

enum class RegistrationMode { rigid, none, precomputed };

struct RegistrationConfig {
  int pyramid_levels = 3;
  int max_iterations = 150;  // per pyramid level
  double step_size = 2.0;    // initial descent step, mm scale
  double tolerance = 1e-6;   // relative improvement considered converged
  float fill_value = 0.f;
  RegistrationMode mode = RegistrationMode::rigid;
  std::string transform_path;  // for precomputed mode; file or directory

  void validate() const {
    if (pyramid_levels < 1)
      throw ValidationError("registration: pyramid_levels must be >= 1");
    if (max_iterations < 1)
      throw ValidationError("registration: max_iterations must be >= 1");
    if (!(step_size > 0))
      throw ValidationError("registration: step_size must be > 0");
    if (!(tolerance > 0))
      throw ValidationError("registration: tolerance must be > 0");
    if (mode == RegistrationMode::precomputed && transform_path.empty())
      throw ValidationError(
          "registration: precomputed mode needs transform_path");
  }
};

struct RegistrationResult {
  RigidTransform transform;
  bool converged = false;
  int iterations = 0;
  double final_cost = 0.0;
  std::vector<std::vector<double>> level_costs;  // accepted, coarse to fine
  std::vector<std::string> warnings;
};

inline Volume flip_sagittal(const Volume& v) {
  const Index3 s = v.shape();
  Volume out(s, v.spacing());
  for (int x = 0; x < s[0]; ++x)
    for (int y = 0; y < s[1]; ++y)
      for (int z = 0; z < s[2]; ++z)
        out(x, y, z) = v(s[0] - 1 - x, y, z);
  return out;
}

namespace detail {

/// Trilinear sample at a physical position (mm). Fractional coordinates
/// within 1e-6 of a lattice point snap to it, so lattice-aligned
/// transforms reproduce voxel values exactly. A sample needing any
/// out-of-bounds corner returns the fill value.
inline float sample_trilinear(const Volume& v, const Vec3& q, float fill) {
  const Index3 s = v.shape();
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double vc = q[a] / v.spacing()[a];
    double fl = std::floor(vc);
    double fr = vc - fl;
    if (fr < 1e-6) {
      fr = 0.0;
    } else if (fr > 1.0 - 1e-6) {
      fl += 1.0;
      fr = 0.0;
    }
    i0[a] = static_cast<int>(fl);
    f[a] = fr;
  }
  const double w[3][2] = {{1.0 - f[0], f[0]}, {1.0 - f[1], f[1]},
                          {1.0 - f[2], f[2]}};
  double acc = 0;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const double ww = w[0][dx] * w[1][dy] * w[2][dz];
        if (ww == 0.0) continue;
        const int x = i0[0] + dx, y = i0[1] + dy, z = i0[2] + dz;
        if (x < 0 || x >= s[0] || y < 0 || y >= s[1] || z < 0 || z >= s[2])
          return fill;
        acc += ww * v(x, y, z);
      }
  return static_cast<float>(acc);
}

/// Value and gradient (d value / d mm) of the trilinear interpolant.
/// Positions whose 8-corner cell is not fully inside give fill and zero
/// gradient.
inline void sample_trilinear_grad(const Volume& v, const Vec3& q, float fill,
                                  double& value, Vec3& grad) {
  const Index3 s = v.shape();
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double vc = q[a] / v.spacing()[a];
    const double fl = std::floor(vc);
    i0[a] = static_cast<int>(fl);
    f[a] = vc - fl;
    if (i0[a] < 0 || i0[a] + 1 >= s[a]) {
      value = fill;
      grad = {0, 0, 0};
      return;
    }
  }
  double c[2][2][2];
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz)
        c[dx][dy][dz] = v(i0[0] + dx, i0[1] + dy, i0[2] + dz);

  const double wx[2] = {1 - f[0], f[0]};
  const double wy[2] = {1 - f[1], f[1]};
  const double wz[2] = {1 - f[2], f[2]};
  double val = 0, gx = 0, gy = 0, gz = 0;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const double cv = c[dx][dy][dz];
        val += wx[dx] * wy[dy] * wz[dz] * cv;
        gx += (dx ? 1.0 : -1.0) * wy[dy] * wz[dz] * cv;
        gy += (dy ? 1.0 : -1.0) * wx[dx] * wz[dz] * cv;
        gz += (dz ? 1.0 : -1.0) * wx[dx] * wy[dy] * cv;
      }
  value = val;
  grad = {gx / v.spacing()[0], gy / v.spacing()[1], gz / v.spacing()[2]};
}

/// 2x box-average downsample; odd tail cells average what remains.
/// Spacing doubles so physical coordinates stay comparable across levels.
inline Volume downsample2(const Volume& v) {
  const Index3 s = v.shape();
  const Index3 o{std::max(1, (s[0] + 1) / 2), std::max(1, (s[1] + 1) / 2),
                 std::max(1, (s[2] + 1) / 2)};
  Volume out(o, {v.spacing()[0] * 2, v.spacing()[1] * 2, v.spacing()[2] * 2});
  for (int x = 0; x < o[0]; ++x)
    for (int y = 0; y < o[1]; ++y)
      for (int z = 0; z < o[2]; ++z) {
        double acc = 0;
        int n = 0;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              const int ix = 2 * x + dx, iy = 2 * y + dy, iz = 2 * z + dz;
              if (ix < s[0] && iy < s[1] && iz < s[2]) {
                acc += v(ix, iy, iz);
                ++n;
              }
            }
        out(x, y, z) = static_cast<float>(acc / n);
      }
  return out;
}

struct CostGrad {
  double cost = 0;
  std::array<double, 6> grad{};  // rx, ry, rz, tx, ty, tz
};

/// Mean-squared error of resample(moving, T^-1) against fixed, with its
/// analytic gradient in the six transform parameters.
inline CostGrad registration_cost(const Volume& moving, const Volume& fixed,
                                  const RigidTransform& t, float fill) {
  const Mat3 rx = rot_x(t.rotation[0]), ry = rot_y(t.rotation[1]),
             rz = rot_z(t.rotation[2]);
  const Mat3 r = rz * ry * rx;
  const Mat3 rt = r.transposed();
  const Mat3 dr[3] = {rz * ry * drot_x(t.rotation[0]),
                      rz * drot_y(t.rotation[1]) * rx,
                      drot_z(t.rotation[2]) * ry * rx};
  const Vec3 c{t.center[0], t.center[1], t.center[2]};
  const Vec3 tr{t.translation[0], t.translation[1], t.translation[2]};

  const Index3 s = fixed.shape();
  const Spacing3 sp = fixed.spacing();
  CostGrad out;
  std::size_t n = 0;
  for (int x = 0; x < s[0]; ++x)
    for (int y = 0; y < s[1]; ++y)
      for (int z = 0; z < s[2]; ++z, ++n) {
        const Vec3 p{x * static_cast<double>(sp[0]),
                     y * static_cast<double>(sp[1]),
                     z * static_cast<double>(sp[2])};
        const Vec3 u = p - c - tr;
        const Vec3 spos = rt * u + c;
        double val;
        Vec3 g;
        sample_trilinear_grad(moving, spos, fill, val, g);
        const double rres = val - fixed(x, y, z);
        out.cost += rres * rres;
        if (rres != 0.0 && (g[0] != 0 || g[1] != 0 || g[2] != 0)) {
          const Vec3 rg = r * g;
          out.grad[3] -= 2 * rres * rg[0];
          out.grad[4] -= 2 * rres * rg[1];
          out.grad[5] -= 2 * rres * rg[2];
          for (int k = 0; k < 3; ++k)
            out.grad[k] += 2 * rres * dot(dr[k] * g, u);
        }
      }
  const double inv = 1.0 / static_cast<double>(n);
  out.cost *= inv;
  for (double& g : out.grad) g *= inv;
  return out;
}

inline double registration_cost_only(const Volume& moving, const Volume& fixed,
                                     const RigidTransform& t, float fill) {
  const Index3 s = fixed.shape();
  const Spacing3 sp = fixed.spacing();
  double cost = 0;
  std::size_t n = 0;
  for (int x = 0; x < s[0]; ++x)
    for (int y = 0; y < s[1]; ++y)
      for (int z = 0; z < s[2]; ++z, ++n) {
        const Vec3 p{x * static_cast<double>(sp[0]),
                     y * static_cast<double>(sp[1]),
                     z * static_cast<double>(sp[2])};
        const Vec3 spos = t.pull(p);
        const double val = sample_trilinear(moving, spos, fill);
        const double rres = val - fixed(x, y, z);
        cost += rres * rres;
      }
  return cost / static_cast<double>(n);
}

}  // namespace detail

/// Resamples a volume onto the reference grid through the given
/// moving-to-fixed transform (trilinear, fill outside the field).
inline Volume apply_transform(const Volume& volume, const RigidTransform& t,
                              const Volume& reference, float fill = 0.f) {
  t.validate();
  const Index3 s = reference.shape();
  const Spacing3 sp = reference.spacing();
  Volume out(s, sp);
  const detail::Mat3 rt = t.rotation_matrix().transposed();
  const detail::Vec3 c{t.center[0], t.center[1], t.center[2]};
  const detail::Vec3 tr{t.translation[0], t.translation[1], t.translation[2]};
  for (int x = 0; x < s[0]; ++x)
    for (int y = 0; y < s[1]; ++y)
      for (int z = 0; z < s[2]; ++z) {
        using namespace detail;
        const Vec3 p{x * static_cast<double>(sp[0]),
                     y * static_cast<double>(sp[1]),
                     z * static_cast<double>(sp[2])};
        const Vec3 spos = rt * (p - c - tr) + c;
        out(x, y, z) = detail::sample_trilinear(volume, spos, fill);
      }
  return out;
}

/// Coarse-to-fine gradient descent on the 6 rigid parameters, minimizing
/// the MSE of the resampled moving image against the fixed image. Steps
/// are accepted only when the cost decreases, so per-level accepted cost
/// sequences are non-increasing by construction.
inline RegistrationResult rigid_register(const Volume& moving,
                                         const Volume& fixed,
                                         const RegistrationConfig& config) {
  config.validate();
  if (!moving.same_geometry(fixed))
    throw ValidationError("registration: moving and fixed grids differ");

  std::vector<Volume> pyr_m{moving}, pyr_f{fixed};
  for (int l = 1; l < config.pyramid_levels; ++l) {
    pyr_m.push_back(detail::downsample2(pyr_m.back()));
    pyr_f.push_back(detail::downsample2(pyr_f.back()));
  }

  RegistrationResult res;
  RigidTransform t;
  for (int a = 0; a < 3; ++a)
    t.center[a] = 0.5 * (fixed.shape()[a] - 1) * fixed.spacing()[a];

  // rotation scale: mm moved at the phantom boundary per radian
  double rho = 0;
  for (int a = 0; a < 3; ++a) rho += t.center[a];
  rho = std::max(1.0, rho / 3.0);
  const double min_step = 1e-4;

  res.level_costs.resize(pyr_m.size());
  for (int level = static_cast<int>(pyr_m.size()) - 1; level >= 0; --level) {
    const Volume& m = pyr_m[level];
    const Volume& f = pyr_f[level];
    auto& accepted = res.level_costs[level];
    double step = config.step_size;
    bool level_converged = false;

    detail::CostGrad cg =
        detail::registration_cost(m, f, t, config.fill_value);
    accepted.push_back(cg.cost);
    for (int it = 0; it < config.max_iterations; ++it) {
      ++res.iterations;
      // scaled norm: angles weighted by rho so the step is mm-like
      double norm2 = 0;
      for (int k = 0; k < 3; ++k) norm2 += (cg.grad[k] / rho) * (cg.grad[k] / rho);
      for (int k = 3; k < 6; ++k) norm2 += cg.grad[k] * cg.grad[k];
      const double norm = std::sqrt(norm2);
      if (norm == 0.0) {
        level_converged = true;
        break;
      }
      RigidTransform trial = t;
      for (int k = 0; k < 3; ++k)
        trial.rotation[k] -= step * cg.grad[k] / (rho * rho * norm);
      for (int k = 0; k < 3; ++k)
        trial.translation[k] -= step * cg.grad[k + 3] / norm;
      const detail::CostGrad trial_cg =
          detail::registration_cost(m, f, trial, config.fill_value);
      if (trial_cg.cost < cg.cost) {
        const double improvement = cg.cost - trial_cg.cost;
        t = trial;
        cg = trial_cg;
        accepted.push_back(cg.cost);
        step *= 1.3;
        if (improvement <= config.tolerance * (1.0 + cg.cost)) {
          level_converged = true;
          break;
        }
      } else {
        step *= 0.5;
        if (step < min_step) {
          level_converged = true;
          break;
        }
      }
    }
    if (level == 0) {
      res.converged = level_converged;
      res.final_cost = cg.cost;
    }
  }
  res.transform = t;
  if (!res.converged)
    res.warnings.push_back("registration stopped at the iteration budget (" +
                           std::to_string(res.iterations) +
                           " iterations) before meeting tolerance");
  return res;
}

inline void save_transform(const RigidTransform& t, const std::string& path) {
  t.validate();
  nlohmann::json j;
  j["rotation"] = t.rotation;
  j["translation"] = t.translation;
  j["center"] = t.center;
  const std::filesystem::path p(path);
  if (!p.parent_path().empty()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failure: " + path);
}

inline RigidTransform load_transform(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open transform file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("transform parse failure: " + path + ": " + e.what());
  }
  RigidTransform t;
  try {
    t.rotation = j.at("rotation").get<std::array<double, 3>>();
    t.translation = j.at("translation").get<std::array<double, 3>>();
    t.center = j.at("center").get<std::array<double, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed transform file " + path + ": " + e.what());
  }
  t.validate();
  return t;
}

namespace detail {

inline std::string resolve_transform_path(const RegistrationConfig& cfg,
                                          const std::string& case_id) {
  const std::filesystem::path p(cfg.transform_path);
  if (std::filesystem::is_directory(p)) return (p / (case_id + ".json")).string();
  return cfg.transform_path;
}

}  // namespace detail

/// Appends a hemisphere-swapped copy of every modality: each volume is
/// flipped about the mid-sagittal axis and resampled by one transform,
/// estimated once on the first modality. Modality count doubles; names
/// gain a "_sym" suffix; the gold mask is untouched.
inline MultiModalCase symmetric_augment(const MultiModalCase& c,
                                        const RegistrationConfig& config) {
  config.validate();
  c.validate();
  MultiModalCase out = c;

  RigidTransform t;
  if (config.mode == RegistrationMode::rigid) {
    const Volume flipped_ref = flip_sagittal(c.modalities[0]);
    RegistrationResult res =
        rigid_register(flipped_ref, c.modalities[0], config);
    t = res.transform;
    for (const std::string& w : res.warnings)
      out.warnings.push_back("case '" + c.case_id + "': " + w);
  } else if (config.mode == RegistrationMode::precomputed) {
    t = load_transform(detail::resolve_transform_path(config, c.case_id));
  }

  const int count = c.num_modalities();
  for (int i = 0; i < count; ++i) {
    Volume flipped = flip_sagittal(c.modalities[i]);
    if (config.mode == RegistrationMode::none) {
      out.modalities.push_back(std::move(flipped));
    } else {
      out.modalities.push_back(apply_transform(flipped, t, c.modalities[0],
                                               config.fill_value));
    }
    out.modality_names.push_back(c.modality_names[i] + "_sym");
  }
  out.validate();
  return out;
}

}  // namespace voxseg::preprocess
