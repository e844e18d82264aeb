#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

namespace detail {

constexpr bool kHostLittle = std::endian::native == std::endian::little;

template <typename T>
inline T byteswapped(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

/// NIfTI-1 single-file header. Field layout is fixed by the format;
/// the struct is naturally aligned, no packing pragma needed.
struct NiftiHeader {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

inline void swap_header(NiftiHeader& h) {
  auto s = [](auto& v) { v = byteswapped(v); };
  s(h.sizeof_hdr);
  s(h.extents);
  s(h.session_error);
  for (auto& d : h.dim) s(d);
  s(h.intent_p1);
  s(h.intent_p2);
  s(h.intent_p3);
  s(h.intent_code);
  s(h.datatype);
  s(h.bitpix);
  s(h.slice_start);
  for (auto& p : h.pixdim) s(p);
  s(h.vox_offset);
  s(h.scl_slope);
  s(h.scl_inter);
  s(h.slice_end);
  s(h.cal_max);
  s(h.cal_min);
  s(h.slice_duration);
  s(h.toffset);
  s(h.glmax);
  s(h.glmin);
  s(h.qform_code);
  s(h.sform_code);
  s(h.quatern_b);
  s(h.quatern_c);
  s(h.quatern_d);
  s(h.qoffset_x);
  s(h.qoffset_y);
  s(h.qoffset_z);
  for (auto& v : h.srow_x) s(v);
  for (auto& v : h.srow_y) s(v);
  for (auto& v : h.srow_z) s(v);
}

/// Reader over zlib's gzFile: reads .gz streams and plain files alike.
class GzIn {
 public:
  explicit GzIn(const std::string& path) : path_(path) {
    f_ = gzopen(path.c_str(), "rb");
    if (f_ == nullptr) throw IoError("cannot open file: " + path);
    gzbuffer(f_, 1 << 16);
  }
  ~GzIn() {
    if (f_ != nullptr) gzclose(f_);
  }
  GzIn(const GzIn&) = delete;
  GzIn& operator=(const GzIn&) = delete;

  void read_exact(void* dst, std::size_t n) {
    auto* p = static_cast<unsigned char*>(dst);
    while (n > 0) {
      const unsigned chunk =
          static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int got = gzread(f_, p, chunk);
      if (got <= 0) throw IoError("truncated or unreadable file: " + path_);
      p += got;
      n -= static_cast<std::size_t>(got);
    }
  }

  void skip(std::size_t n) {
    unsigned char buf[4096];
    while (n > 0) {
      const std::size_t chunk = std::min<std::size_t>(n, sizeof(buf));
      read_exact(buf, chunk);
      n -= chunk;
    }
  }

 private:
  std::string path_;
  gzFile f_ = nullptr;
};

inline void write_file_bytes(const std::string& path,
                             const std::vector<unsigned char>& bytes) {
  const std::filesystem::path p(path);
  if (!p.parent_path().empty()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory for: " + path);
  }
  if (path.size() > 3 && path.substr(path.size() - 3) == ".gz") {
    gzFile f = gzopen(path.c_str(), "wb");
    if (f == nullptr) throw IoError("cannot open for writing: " + path);
    std::size_t off = 0;
    while (off < bytes.size()) {
      const unsigned chunk = static_cast<unsigned>(
          std::min<std::size_t>(bytes.size() - off, 1u << 30));
      if (gzwrite(f, bytes.data() + off, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw IoError("write failure: " + path);
      }
      off += chunk;
    }
    if (gzclose(f) != Z_OK) throw IoError("write failure: " + path);
  } else {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failure: " + path);
  }
}

template <typename S>
inline void decode_scalars(const unsigned char* src, std::size_t n, bool swap,
                           std::vector<float>& out) {
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    S v;
    std::memcpy(&v, src + i * sizeof(S), sizeof(S));
    if constexpr (sizeof(S) > 1) {
      if (swap) v = byteswapped(v);
    }
    out[i] = static_cast<float>(v);
  }
}

inline std::size_t nifti_elem_size(int datatype) {
  switch (datatype) {
    case 2:    // uint8
    case 256:  // int8
      return 1;
    case 4:    // int16
    case 512:  // uint16
      return 2;
    case 8:    // int32
    case 16:   // float32
    case 768:  // uint32
      return 4;
    case 64:  // float64
      return 8;
    default:
      return 0;
  }
}

inline void decode_nifti_data(int datatype, const unsigned char* src,
                              std::size_t n, bool swap,
                              std::vector<float>& out) {
  switch (datatype) {
    case 2: decode_scalars<std::uint8_t>(src, n, swap, out); break;
    case 4: decode_scalars<std::int16_t>(src, n, swap, out); break;
    case 8: decode_scalars<std::int32_t>(src, n, swap, out); break;
    case 16: decode_scalars<float>(src, n, swap, out); break;
    case 64: decode_scalars<double>(src, n, swap, out); break;
    case 256: decode_scalars<std::int8_t>(src, n, swap, out); break;
    case 512: decode_scalars<std::uint16_t>(src, n, swap, out); break;
    case 768: decode_scalars<std::uint32_t>(src, n, swap, out); break;
    default: throw IoError("unsupported datatype code");
  }
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline Volume load_nifti(const std::string& path) {
  GzIn in(path);
  NiftiHeader h{};
  in.read_exact(&h, sizeof(h));
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    swap = true;
    swap_header(h);
    if (h.sizeof_hdr != 348)
      throw IoError("not a NIfTI-1 file (bad header size): " + path);
  }
  if (!(h.magic[0] == 'n' && h.magic[1] == '+' && h.magic[2] == '1'))
    throw IoError("unsupported format (expected single-file NIfTI-1): " + path);
  const int ndim = h.dim[0];
  if (ndim < 1 || ndim > 7) throw IoError("corrupt dimension count: " + path);
  const int nx = h.dim[1];
  const int ny = ndim >= 2 ? h.dim[2] : 1;
  const int nz = ndim >= 3 ? h.dim[3] : 1;
  for (int k = 4; k <= ndim; ++k)
    if (h.dim[k] > 1)
      throw IoError("unsupported format (more than 3 dimensions): " + path);
  if (nx < 1 || ny < 1 || nz < 1)
    throw IoError("corrupt dimensions: " + path);
  const std::uint64_t count =
      static_cast<std::uint64_t>(nx) * ny * static_cast<std::uint64_t>(nz);
  if (count > (1ull << 31)) throw IoError("implausible volume size: " + path);
  const std::size_t elem = nifti_elem_size(h.datatype);
  if (elem == 0)
    throw IoError("unsupported datatype code " + std::to_string(h.datatype) +
                  ": " + path);
  Spacing3 spacing{h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  for (int a = 0; a < 3; ++a)
    if (!(spacing[a] > 0.f) || !std::isfinite(spacing[a]))
      throw IoError("non-positive voxel spacing in header: " + path);
  const long off = static_cast<long>(h.vox_offset);
  if (off < 348) throw IoError("corrupt data offset: " + path);
  in.skip(static_cast<std::size_t>(off) - sizeof(h));

  std::vector<unsigned char> raw(static_cast<std::size_t>(count) * elem);
  in.read_exact(raw.data(), raw.size());
  std::vector<float> vals;
  decode_nifti_data(h.datatype, raw.data(), static_cast<std::size_t>(count),
                    swap, vals);

  const bool rescale = h.scl_slope != 0.f &&
                       !(h.scl_slope == 1.f && h.scl_inter == 0.f);
  if (rescale)
    for (float& v : vals) v = v * h.scl_slope + h.scl_inter;

  // file order is x fastest; memory order is z fastest
  Volume vol({nx, ny, nz}, spacing);
  std::size_t i = 0;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const float v = vals[i++];
        if (!std::isfinite(v))
          throw IoError("non-finite voxel at " + index_to_string({x, y, z}) +
                        " in: " + path);
        vol(x, y, z) = v;
      }
  return vol;
}

inline NiftiHeader make_nifti_header(const Index3& shape,
                                     const Spacing3& spacing, int datatype,
                                     int bitpix) {
  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(shape[0]);
  h.dim[2] = static_cast<std::int16_t>(shape[1]);
  h.dim[3] = static_cast<std::int16_t>(shape[2]);
  for (int k = 4; k < 8; ++k) h.dim[k] = 1;
  h.datatype = static_cast<std::int16_t>(datatype);
  h.bitpix = static_cast<std::int16_t>(bitpix);
  h.pixdim[0] = 1.f;
  h.pixdim[1] = spacing[0];
  h.pixdim[2] = spacing[1];
  h.pixdim[3] = spacing[2];
  h.vox_offset = 352.f;
  h.scl_slope = 1.f;
  h.scl_inter = 0.f;
  h.xyzt_units = 2;  // millimetres
  h.sform_code = 1;
  h.srow_x[0] = spacing[0];
  h.srow_y[1] = spacing[1];
  h.srow_z[2] = spacing[2];
  h.magic[0] = 'n';
  h.magic[1] = '+';
  h.magic[2] = '1';
  h.magic[3] = '\0';
  return h;
}

/// Serializes header + data to the single-file layout, little-endian.
template <typename T>
inline void save_nifti(const Grid3<T>& g, const std::string& path,
                       int datatype, int bitpix) {
  for (int a = 0; a < 3; ++a)
    if (g.shape()[a] > 32767)
      throw IoError("dimension too large for NIfTI-1: " + path);
  NiftiHeader h = make_nifti_header(g.shape(), g.spacing(), datatype, bitpix);
  if constexpr (!kHostLittle) swap_header(h);

  const std::size_t elem = sizeof(T);
  std::vector<unsigned char> bytes(352 + g.size() * elem, 0);
  std::memcpy(bytes.data(), &h, sizeof(h));
  // bytes 348..351 stay zero: no header extensions

  unsigned char* dst = bytes.data() + 352;
  const Index3 s = g.shape();
  for (int z = 0; z < s[2]; ++z)
    for (int y = 0; y < s[1]; ++y)
      for (int x = 0; x < s[0]; ++x) {
        T v = g(x, y, z);
        if constexpr (sizeof(T) > 1) {
          if constexpr (!kHostLittle) v = byteswapped(v);
        }
        std::memcpy(dst, &v, elem);
        dst += elem;
      }
  write_file_bytes(path, bytes);
}

inline std::string sidecar_path(const std::string& path) {
  return path + ".json";
}

template <typename T>
inline void save_raw(const Grid3<T>& g, const std::string& path,
                     const char* dtype_name) {
  nlohmann::json j;
  j["shape"] = {g.shape()[0], g.shape()[1], g.shape()[2]};
  j["spacing"] = {g.spacing()[0], g.spacing()[1], g.spacing()[2]};
  j["dtype"] = dtype_name;
  j["order"] = "z-fastest";
  j["byte_order"] = "little";
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(sidecar_path(path),
                   std::vector<unsigned char>(text.begin(), text.end()));

  std::vector<unsigned char> bytes(g.size() * sizeof(T));
  unsigned char* dst = bytes.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    T v = g[i];
    if constexpr (sizeof(T) > 1) {
      if constexpr (!kHostLittle) v = byteswapped(v);
    }
    std::memcpy(dst, &v, sizeof(T));
    dst += sizeof(T);
  }
  write_file_bytes(path, bytes);
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open file: " + path);
  const std::streamsize n = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!in) throw IoError("read failure: " + path);
  return bytes;
}

inline Volume load_raw(const std::string& path) {
  const std::string side = sidecar_path(path);
  nlohmann::json j;
  {
    std::ifstream in(side);
    if (!in) throw IoError("missing sidecar file: " + side);
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw IoError("sidecar parse failure: " + side + ": " + e.what());
    }
  }
  try {
    const auto shape_v = j.at("shape").get<std::vector<int>>();
    const auto spacing_v = j.at("spacing").get<std::vector<float>>();
    const auto dtype = j.at("dtype").get<std::string>();
    const auto order = j.at("order").get<std::string>();
    const auto byte_order = j.at("byte_order").get<std::string>();
    if (shape_v.size() != 3 || spacing_v.size() != 3)
      throw IoError("sidecar shape/spacing must have 3 components: " + side);
    if (order != "z-fastest")
      throw IoError("unsupported data order '" + order + "': " + side);
    if (byte_order != "little")
      throw IoError("unsupported byte order '" + byte_order + "': " + side);
    std::size_t elem;
    if (dtype == "float32") {
      elem = 4;
    } else if (dtype == "uint8") {
      elem = 1;
    } else {
      throw IoError("unsupported dtype '" + dtype + "': " + side);
    }
    for (int a = 0; a < 3; ++a) {
      if (shape_v[a] < 1) throw IoError("non-positive shape: " + side);
      if (!(spacing_v[a] > 0.f) || !std::isfinite(spacing_v[a]))
        throw IoError("non-positive spacing: " + side);
    }
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    const std::size_t count = static_cast<std::size_t>(shape_v[0]) *
                              shape_v[1] * static_cast<std::size_t>(shape_v[2]);
    if (bytes.size() != count * elem)
      throw IoError("data size does not match sidecar shape: " + path);
    Volume vol({shape_v[0], shape_v[1], shape_v[2]},
               {spacing_v[0], spacing_v[1], spacing_v[2]});
    if (elem == 1) {
      for (std::size_t i = 0; i < count; ++i)
        vol[i] = static_cast<float>(bytes[i]);
    } else {
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t u;
        std::memcpy(&u, bytes.data() + i * 4, 4);
        if constexpr (!kHostLittle) u = byteswapped(u);
        const float v = std::bit_cast<float>(u);
        if (!std::isfinite(v))
          throw IoError("non-finite voxel at linear index " +
                        std::to_string(i) + " in: " + path);
        vol[i] = v;
      }
    }
    return vol;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed sidecar " + side + ": " + e.what());
  }
}

}  // namespace detail

/// Loads a volume from NIfTI-1 (.nii, .nii.gz) or the raw+sidecar format
/// (.rvol with <path>.json). Intensities become float32; scale/intercept
/// from the NIfTI header are applied. Rejects NaN/Inf voxels.
inline Volume load_volume(const std::string& path) {
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz"))
    return detail::load_nifti(path);
  if (detail::ends_with(path, ".rvol")) return detail::load_raw(path);
  throw IoError("unsupported volume format (want .nii, .nii.gz, .rvol): " +
                path);
}

/// Writes float32 data; the format follows the file extension as in
/// load_volume. Round-trips bit-equal through load_volume.
inline void save_volume(const Volume& v, const std::string& path) {
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz")) {
    detail::save_nifti(v, path, 16, 32);
    return;
  }
  if (detail::ends_with(path, ".rvol")) {
    detail::save_raw(v, path, "float32");
    return;
  }
  throw IoError("unsupported volume format (want .nii, .nii.gz, .rvol): " +
                path);
}

/// Loads a binary mask; every voxel must be exactly 0 or 1.
inline Mask load_mask(const std::string& path) {
  const Volume v = load_volume(path);
  Mask m(v.shape(), v.spacing(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == 0.f) continue;
    if (v[i] == 1.f) {
      m[i] = 1;
      continue;
    }
    throw IoError("mask voxel not in {0,1} (value " + std::to_string(v[i]) +
                  "): " + path);
  }
  return m;
}

/// Writes a mask as unsigned 8-bit data in the extension-selected format.
inline void save_mask(const Mask& m, const std::string& path) {
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz")) {
    detail::save_nifti(m, path, 2, 8);
    return;
  }
  if (detail::ends_with(path, ".rvol")) {
    detail::save_raw(m, path, "uint8");
    return;
  }
  throw IoError("unsupported mask format (want .nii, .nii.gz, .rvol): " +
                path);
}

/// One modality reference inside a case manifest. Paths are stored as
/// written in the manifest; relative paths resolve against the manifest
/// directory.
struct ModalityRef {
  std::string name;
  std::string path;
};

struct CaseEntry {
  std::string case_id;
  std::vector<ModalityRef> modalities;
  std::optional<std::string> gold;
};

/// A dataset manifest: ordered cases with ordered modalities. Modality
/// order fixes channel semantics downstream.
struct Manifest {
  std::filesystem::path root;
  std::vector<CaseEntry> cases;

  std::string resolve(const std::string& p) const {
    std::filesystem::path fp(p);
    if (fp.is_absolute()) return fp.string();
    return (root / fp).string();
  }

  const CaseEntry& find_case(const std::string& case_id) const {
    for (const CaseEntry& c : cases)
      if (c.case_id == case_id) return c;
    throw ValidationError("case '" + case_id + "' not found in manifest");
  }
};

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("manifest parse failure: " + path + ": " + e.what());
  }
  Manifest m;
  m.root = std::filesystem::absolute(std::filesystem::path(path)).parent_path();
  if (!j.is_object() || !j.contains("cases") || !j["cases"].is_array())
    throw ValidationError("manifest must contain a 'cases' array: " + path);
  for (const auto& c : j["cases"]) {
    CaseEntry e;
    try {
      e.case_id = c.at("case_id").get<std::string>();
      for (const auto& mod : c.at("modalities")) {
        ModalityRef r;
        r.name = mod.at("name").get<std::string>();
        r.path = mod.at("path").get<std::string>();
        e.modalities.push_back(std::move(r));
      }
      if (c.contains("gold") && !c["gold"].is_null())
        e.gold = c["gold"].get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError("malformed case entry in " + path + ": " +
                            ex.what());
    }
    if (e.case_id.empty())
      throw ValidationError("empty case_id in manifest: " + path);
    if (e.modalities.empty())
      throw ValidationError("case '" + e.case_id +
                            "' lists no modalities: " + path);
    for (std::size_t i = 0; i < e.modalities.size(); ++i)
      for (std::size_t k = i + 1; k < e.modalities.size(); ++k)
        if (e.modalities[i].name == e.modalities[k].name)
          throw ValidationError("case '" + e.case_id +
                                "' repeats modality name '" +
                                e.modalities[i].name + "': " + path);
    for (const CaseEntry& prev : m.cases)
      if (prev.case_id == e.case_id)
        throw ValidationError("duplicate case_id '" + e.case_id +
                              "' in manifest: " + path);
    m.cases.push_back(std::move(e));
  }
  return m;
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  nlohmann::json cases = nlohmann::json::array();
  for (const CaseEntry& e : m.cases) {
    nlohmann::json c;
    c["case_id"] = e.case_id;
    nlohmann::json mods = nlohmann::json::array();
    for (const ModalityRef& r : e.modalities)
      mods.push_back({{"name", r.name}, {"path", r.path}});
    c["modalities"] = mods;
    if (e.gold) c["gold"] = *e.gold;
    cases.push_back(c);
  }
  nlohmann::json j;
  j["cases"] = cases;
  const std::string text = j.dump(2) + "\n";
  detail::write_file_bytes(path,
                           std::vector<unsigned char>(text.begin(), text.end()));
}

/// Returns the resolved paths of all referenced files that do not exist.
inline std::vector<std::string> preflight_check(const Manifest& m) {
  std::vector<std::string> missing;
  auto check = [&](const std::string& p) {
    const std::string full = m.resolve(p);
    if (!std::filesystem::exists(full)) missing.push_back(full);
  };
  for (const CaseEntry& e : m.cases) {
    for (const ModalityRef& r : e.modalities) check(r.path);
    if (e.gold) check(*e.gold);
  }
  return missing;
}

/// Loads all volumes of one case and validates shared geometry before
/// returning; a failure throws and yields nothing partial.
inline MultiModalCase load_case(const Manifest& m, const CaseEntry& e) {
  MultiModalCase out;
  out.case_id = e.case_id;
  for (const ModalityRef& r : e.modalities) {
    out.modality_names.push_back(r.name);
    out.modalities.push_back(load_volume(m.resolve(r.path)));
  }
  if (e.gold) out.gold = load_mask(m.resolve(*e.gold));
  out.validate();
  return out;
}

inline MultiModalCase load_case(const Manifest& m, const std::string& case_id) {
  return load_case(m, m.find_case(case_id));
}

inline std::vector<MultiModalCase> load_all_cases(const Manifest& m) {
  std::vector<MultiModalCase> out;
  out.reserve(m.cases.size());
  for (const CaseEntry& e : m.cases) out.push_back(load_case(m, e));
  return out;
}

}  // namespace voxseg
