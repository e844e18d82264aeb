#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"

namespace voxseg {

/// A 3D scalar intensity grid. Intensities are float32 regardless of the
/// on-disk type.
using Volume = Grid3<float>;

/// A 3D binary grid; values are exactly 0 or 1.
using Mask = Grid3<std::uint8_t>;

/// Co-registered stack of modality volumes for one subject, plus the
/// optional gold-standard lesion mask. Immutable after construction in
/// normal use; all members share one grid geometry.
struct MultiModalCase {
  std::string case_id;
  std::vector<std::string> modality_names;
  std::vector<Volume> modalities;
  std::optional<Mask> gold;
  std::vector<std::string> warnings;  // e.g. registration convergence notes

  int num_modalities() const { return static_cast<int>(modalities.size()); }

  /// Enforces the shared-geometry invariant and modality-count bounds.
  void validate() const {
    if (modalities.empty())
      throw ValidationError("case '" + case_id + "': needs at least 1 modality");
    if (modality_names.size() != modalities.size())
      throw ValidationError("case '" + case_id +
                            "': modality name/volume count mismatch");
    const Volume& ref = modalities.front();
    for (std::size_t i = 1; i < modalities.size(); ++i)
      if (!modalities[i].same_geometry(ref))
        throw ValidationError("case '" + case_id + "': modality '" +
                              modality_names[i] +
                              "' does not share the reference geometry");
    if (gold && !(gold->shape() == ref.shape()))
      throw ValidationError("case '" + case_id +
                            "': gold mask does not share the reference shape");
  }
};

/// Foreground support: a voxel is foreground iff its intensity is nonzero
/// in at least one modality. Background air is exactly zero by convention,
/// so this separates tissue from air without any thresholding choice.
inline Mask foreground_mask(const MultiModalCase& c) {
  c.validate();
  const Volume& ref = c.modalities.front();
  Mask out(ref.shape(), ref.spacing(), 0);
  for (const Volume& m : c.modalities) {
    const std::size_t n = m.size();
    for (std::size_t i = 0; i < n; ++i)
      if (m[i] != 0.f) out[i] = 1;
  }
  return out;
}

}  // namespace voxseg
