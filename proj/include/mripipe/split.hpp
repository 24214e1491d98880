#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mripipe/manifest.hpp"

namespace mripipe {

/// Shoulder-level train/val/test assignment, stratified by label.
struct SplitAssignment {
  std::map<std::string, Partition> partition_of;  // shoulder_id -> partition
  std::array<double, 3> ratios{0.70, 0.10, 0.20};
  uint64_t seed = 0;

  std::vector<std::string> shoulders_in(Partition p) const;
  nlohmann::ordered_json to_json() const;
  static SplitAssignment from_json(const nlohmann::ordered_json& j);
};

/// Shoulder-level k-fold plan over the recombined train+val pool.
struct FoldPlan {
  int k = 8;
  std::map<std::string, int> fold_of;  // shoulder_id -> fold index
  uint64_t seed = 0;

  std::vector<std::string> shoulders_in(int fold) const;
  nlohmann::ordered_json to_json() const;
  static FoldPlan from_json(const nlohmann::ordered_json& j);
};

SplitAssignment stratified_split(const CohortManifest& manifest,
                                 const std::array<double, 3>& ratios, uint64_t seed);

FoldPlan make_folds(const std::vector<StudyRecord>& pool, int k, uint64_t seed);

struct LeakageViolation {
  std::string shoulder_id;
  std::vector<std::string> partitions;  // distinct partition/fold tokens seen
};

struct LeakageReport {
  std::vector<LeakageViolation> violations;
  bool pass() const { return violations.empty(); }
};

/// Finest-grained placement: keys may be sequence volume paths, study_ids, or
/// shoulder_ids (most specific wins); values are partition/fold tokens. Every
/// key must resolve against the manifest.
using PlacementMap = std::map<std::string, std::string>;

LeakageReport validate_no_leakage(const PlacementMap& placement, const CohortManifest& manifest);
LeakageReport validate_no_leakage(const SplitAssignment& split, const CohortManifest& manifest);
LeakageReport validate_no_leakage(const FoldPlan& plan, const CohortManifest& manifest);

/// Largest-remainder apportionment of `total` units over the given fractional
/// targets (which must sum to ~total). Ties go to the lower index.
std::vector<long> largest_remainder(const std::vector<double>& targets, long total);

}  // namespace mripipe
