#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mripipe/volume.hpp"

namespace mripipe {

/// Per (sequence_type, fat_sat) intensity statistics fitted on the training
/// partition; `global` pools every key for the optional inference fallback.
struct StandardizationStats {
  struct Entry {
    double mean = 0.0;
    double stddev = 0.0;
  };

  std::map<std::string, Entry> by_key;
  Entry global;
  std::string fitted_on = "train";

  static std::string key_for(SequenceType t, bool fat_sat);
  bool has_key(SequenceType t, bool fat_sat) const;

  nlohmann::ordered_json to_json() const;
  static StandardizationStats from_json(const nlohmann::ordered_json& j);
};

struct AugmentPolicy {
  int multiplier = 10;  // 10 fine-tune, 5 pretrain
  double rotate_deg = 15.0;
  double translate_frac = 0.10;
  double scale_lo = 0.90;
  double scale_hi = 1.10;
  double flip_prob_h = 0.5;
  double flip_prob_v = 0.5;
  double noise_sigma = 0.01;  // of the [0,1] dynamic range
  uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static AugmentPolicy from_json(const nlohmann::ordered_json& j);
};

/// Bilinear per-slice resize to target x target; slice count unchanged.
SequenceVolume resize_volume(const SequenceVolume& v, int target = 400);

/// Center crop to size x size; offset = (dim - size) / 2 rounded down.
SequenceVolume center_crop(const SequenceVolume& v, int size = 224);

/// Pooled per-key mean/std over every voxel of the training sequences.
/// Rejects inputs tagged with a non-train partition.
StandardizationStats fit_standardization(const std::vector<const SequenceVolume*>& train_sequences);
StandardizationStats fit_standardization(const std::vector<SequenceVolume>& train_sequences);

/// Z-score with the key's stats, then per-volume min-max rescale into [0,1].
/// A degenerate range (max == min) maps to all zeros.
SequenceVolume apply_standardization(const SequenceVolume& v, const StandardizationStats& stats,
                                     bool allow_global_fallback = false);

/// Exactly policy.multiplier stochastic rigid-transform copies, each clamped
/// to [0,1]; deterministic under policy.seed.
std::vector<SequenceVolume> augment(const SequenceVolume& v, const AugmentPolicy& policy);

}  // namespace mripipe
