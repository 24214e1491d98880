#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mripipe/manifest.hpp"
#include "mripipe/rng.hpp"

namespace testutil {

/// Self-cleaning scratch directory under the system temp dir.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("mripipe_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline mripipe::StudyRecord make_study(const std::string& id, mripipe::Modality modality,
                                       int label, int n_views = 3) {
  mripipe::StudyRecord s;
  s.study_id = id;
  s.patient_id = "pat_" + id;
  s.shoulder_id = "sh_" + id;
  s.modality = modality;
  s.label = label;
  for (int v = 0; v < n_views; ++v) {
    mripipe::SequenceRef q;
    q.view = mripipe::kAllViews[static_cast<std::size_t>(v)];
    q.sequence_type = mripipe::SequenceType::t1;
    q.fat_sat = false;
    q.volume_path = "vol_" + id + "_" + mripipe::to_string(q.view) + ".f32";
    s.sequences.push_back(q);
  }
  return s;
}

/// Cohort with the stated study counts; positives spread deterministically.
inline mripipe::CohortManifest make_cohort(int n_studies, int n_positive,
                                           mripipe::Modality modality, uint64_t seed = 7,
                                           int n_views = 1) {
  std::vector<int> labels(static_cast<std::size_t>(n_studies), 0);
  for (int i = 0; i < n_positive; ++i) labels[static_cast<std::size_t>(i)] = 1;
  mripipe::Rng rng(seed);
  rng.shuffle(labels);
  std::vector<mripipe::StudyRecord> studies;
  for (int i = 0; i < n_studies; ++i) {
    const std::string id = mripipe::to_string(modality) + "_s" + std::to_string(i);
    studies.push_back(make_study(id, modality, labels[static_cast<std::size_t>(i)], n_views));
  }
  return mripipe::CohortManifest(std::move(studies));
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace testutil
