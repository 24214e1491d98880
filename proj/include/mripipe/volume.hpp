#pragma once

#include <optional>
#include <string>

#include "mripipe/common.hpp"
#include "mripipe/tensor.hpp"

namespace mripipe {

enum class Stage { raw, resized, cropped, standardized, augmented };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

/// One 3D scan sequence: (n_slices, height, width) voxels plus its tags.
struct SequenceVolume {
  Tensor voxels;  // shape (n, h, w)
  View view = View::sagittal;
  SequenceType sequence_type = SequenceType::t1;
  bool fat_sat = false;
  Stage stage = Stage::raw;
  std::optional<Partition> partition;  // set when the owning split is known

  int n_slices() const { return voxels.dim(0); }
  int height() const { return voxels.dim(1); }
  int width() const { return voxels.dim(2); }

  double min_value() const;
  double max_value() const;
};

/// On-disk container: raw little-endian float32 voxels at `path` plus a JSON
/// sidecar (same path, .json extension) holding shape and tags.
void write_volume(const SequenceVolume& v, const std::string& path);
SequenceVolume read_volume(const std::string& path);

std::string sidecar_path(const std::string& volume_path);

}  // namespace mripipe
