#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mripipe/common.hpp"

namespace mripipe {

struct SequenceRef {
  View view;
  SequenceType sequence_type;
  bool fat_sat = false;
  std::string volume_path;  // resolved against the manifest directory
};

struct StudyRecord {
  std::string study_id;
  std::string patient_id;
  std::string shoulder_id;  // patient_id + laterality
  Modality modality = Modality::standard_mri;
  int label = 0;  // 1 = lesion present
  std::vector<SequenceRef> sequences;
};

struct ManifestLoadOptions {
  bool check_files = true;  // reject rows whose volume file does not exist
};

/// Validated cohort: studies aggregated from the one-row-per-sequence CSV.
class CohortManifest {
 public:
  CohortManifest() = default;
  explicit CohortManifest(std::vector<StudyRecord> studies);

  static CohortManifest load(const std::string& csv_path, const ManifestLoadOptions& opts = {});

  const std::vector<StudyRecord>& studies() const { return studies_; }
  std::size_t n_studies() const { return studies_.size(); }
  std::size_t count(Modality m) const;
  std::size_t positive_count() const;

  const StudyRecord* find_study(const std::string& study_id) const;
  bool has_shoulder(const std::string& shoulder_id) const;

  /// Shoulders in first-appearance order with their label (max over studies).
  struct ShoulderInfo {
    std::string shoulder_id;
    int label = 0;
    std::vector<std::size_t> study_indices;
  };
  std::vector<ShoulderInfo> shoulders() const;

  CohortManifest filter(Modality m) const;
  CohortManifest filter_studies(const std::vector<std::string>& study_ids) const;

  static const char* csv_header();

 private:
  void validate_and_index();

  std::vector<StudyRecord> studies_;
  std::map<std::string, std::size_t> by_study_id_;
};

}  // namespace mripipe
