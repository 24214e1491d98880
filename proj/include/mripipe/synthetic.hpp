#pragma once

#include <string>

#include "json.hpp"
#include "mripipe/manifest.hpp"

namespace mripipe {

/// Desk-scale cohort generator: positives carry a bright ellipsoid lesion
/// whose footprint is guaranteed to survive the resize->crop chain.
struct SyntheticSpec {
  int n_studies = 120;
  double positive_fraction = 0.25;
  int n_views = 3;
  int slices = 6;
  int raw_side = 112;
  double lesion_radius_frac = 0.12;    // of the raw side
  double lesion_depth_radius = 1.8;    // slices
  double lesion_center_jitter = 0.08;  // of the raw side
  double lesion_intensity_delta = 0.6;
  double noise_sigma = 0.04;
  Modality modality = Modality::standard_mri;
  int resize_target = 400;  // mirrors the preprocessing the cohort will see
  int crop_size = 224;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SyntheticSpec from_json(const nlohmann::ordered_json& j);
};

/// Lesion bounding box in preprocessed (crop-space) coordinates.
struct LesionBox {
  int slice_lo = 0, slice_hi = 0;  // inclusive, exclusive
  int y_lo = 0, y_hi = 0;
  int x_lo = 0, x_hi = 0;

  nlohmann::ordered_json to_json() const;
  static LesionBox from_json(const nlohmann::ordered_json& j);
};

/// Writes volumes, manifest.csv, and lesions.json (ground-truth boxes for
/// positives) into out_dir; returns the loaded manifest. Byte-identical
/// output under one spec.
CohortManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

/// Ground truth emitted by generate_synthetic: study_id -> view -> box.
std::map<std::string, std::map<View, LesionBox>> load_lesion_boxes(const std::string& path);

}  // namespace mripipe
