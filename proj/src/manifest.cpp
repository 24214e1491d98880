#include "mripipe/manifest.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace mripipe {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

int parse_binary(const std::string& s, const std::string& what, std::size_t row) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  fail_validation("manifest row " + std::to_string(row) + ": " + what + " must be 0 or 1, got \"" +
                  s + "\"");
}

}  // namespace

const char* CohortManifest::csv_header() {
  return "study_id,patient_id,shoulder_id,modality,label,view,sequence_type,fat_sat,volume_path";
}

CohortManifest::CohortManifest(std::vector<StudyRecord> studies) : studies_(std::move(studies)) {
  validate_and_index();
}

CohortManifest CohortManifest::load(const std::string& csv_path, const ManifestLoadOptions& opts) {
  std::ifstream in(csv_path);
  if (!in) fail_validation("cannot open manifest: " + csv_path);

  std::string line;
  if (!std::getline(in, line)) fail_validation("manifest is empty (missing header): " + csv_path);
  {
    std::string header = line;
    if (!header.empty() && header.back() == '\r') header.pop_back();
    if (header != csv_header())
      fail_validation("manifest header mismatch in " + csv_path + "; expected \"" +
                      std::string(csv_header()) + "\"");
  }

  const fs::path base = fs::path(csv_path).parent_path();

  std::vector<StudyRecord> studies;
  std::map<std::string, std::size_t> index;
  std::set<std::string> seen_paths;

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 9)
      fail_validation("manifest row " + std::to_string(row) + ": expected 9 fields, got " +
                      std::to_string(fields.size()));

    StudyRecord rec;
    rec.study_id = fields[0];
    rec.patient_id = fields[1];
    rec.shoulder_id = fields[2];
    if (rec.study_id.empty() || rec.patient_id.empty() || rec.shoulder_id.empty())
      fail_validation("manifest row " + std::to_string(row) + ": empty identifier field");

    try {
      rec.modality = modality_from_string(fields[3]);
    } catch (const PipelineError& e) {
      fail_validation("manifest row " + std::to_string(row) + ", field modality: " + e.what());
    }
    rec.label = parse_binary(fields[4], "label", row);

    SequenceRef seq;
    try {
      seq.view = view_from_string(fields[5]);
    } catch (const PipelineError& e) {
      fail_validation("manifest row " + std::to_string(row) + ", field view: " + e.what());
    }
    try {
      seq.sequence_type = sequence_type_from_string(fields[6]);
    } catch (const PipelineError& e) {
      fail_validation("manifest row " + std::to_string(row) + ", field sequence_type: " + e.what());
    }
    seq.fat_sat = parse_binary(fields[7], "fat_sat", row) != 0;
    if (fields[8].empty())
      fail_validation("manifest row " + std::to_string(row) + ": empty volume_path");
    seq.volume_path = fs::path(fields[8]).is_absolute()
                          ? fields[8]
                          : (base / fields[8]).lexically_normal().string();

    if (!seen_paths.insert(seq.volume_path).second)
      fail_validation("manifest row " + std::to_string(row) + ": duplicate volume_path \"" +
                      fields[8] + "\"");
    if (opts.check_files && !fs::exists(seq.volume_path))
      fail_validation("manifest row " + std::to_string(row) + ": volume file not found: " +
                      seq.volume_path);

    auto it = index.find(rec.study_id);
    if (it == index.end()) {
      rec.sequences.push_back(seq);
      index.emplace(rec.study_id, studies.size());
      studies.push_back(std::move(rec));
    } else {
      StudyRecord& existing = studies[it->second];
      if (existing.patient_id != rec.patient_id || existing.shoulder_id != rec.shoulder_id ||
          existing.modality != rec.modality || existing.label != rec.label)
        fail_validation("manifest row " + std::to_string(row) + ": study \"" + rec.study_id +
                        "\" repeats with conflicting study-level fields");
      existing.sequences.push_back(seq);
    }
  }

  return CohortManifest(std::move(studies));
}

void CohortManifest::validate_and_index() {
  by_study_id_.clear();
  std::map<std::pair<std::string, std::string>, std::string> shoulder_study;  // (modality, shoulder)
  for (std::size_t i = 0; i < studies_.size(); ++i) {
    const StudyRecord& s = studies_[i];
    if (s.label != 0 && s.label != 1)
      fail_validation("study \"" + s.study_id + "\": label must be 0 or 1");
    if (s.sequences.empty())
      fail_validation("study \"" + s.study_id + "\": no sequences");
    if (!by_study_id_.emplace(s.study_id, i).second)
      fail_validation("duplicate study_id \"" + s.study_id + "\"");
    const auto key = std::make_pair(to_string(s.modality), s.shoulder_id);
    auto it = shoulder_study.find(key);
    if (it != shoulder_study.end())
      fail_validation("shoulder \"" + s.shoulder_id + "\" appears in two " +
                      to_string(s.modality) + " studies (\"" + it->second + "\", \"" + s.study_id +
                      "\")");
    shoulder_study.emplace(key, s.study_id);
  }
}

std::size_t CohortManifest::count(Modality m) const {
  std::size_t n = 0;
  for (const auto& s : studies_)
    if (s.modality == m) ++n;
  return n;
}

std::size_t CohortManifest::positive_count() const {
  std::size_t n = 0;
  for (const auto& s : studies_)
    if (s.label == 1) ++n;
  return n;
}

const StudyRecord* CohortManifest::find_study(const std::string& study_id) const {
  auto it = by_study_id_.find(study_id);
  return it == by_study_id_.end() ? nullptr : &studies_[it->second];
}

bool CohortManifest::has_shoulder(const std::string& shoulder_id) const {
  for (const auto& s : studies_)
    if (s.shoulder_id == shoulder_id) return true;
  return false;
}

std::vector<CohortManifest::ShoulderInfo> CohortManifest::shoulders() const {
  std::vector<ShoulderInfo> out;
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < studies_.size(); ++i) {
    const StudyRecord& s = studies_[i];
    auto it = pos.find(s.shoulder_id);
    if (it == pos.end()) {
      pos.emplace(s.shoulder_id, out.size());
      out.push_back({s.shoulder_id, s.label, {i}});
    } else {
      ShoulderInfo& info = out[it->second];
      info.label = std::max(info.label, s.label);
      info.study_indices.push_back(i);
    }
  }
  return out;
}

CohortManifest CohortManifest::filter(Modality m) const {
  std::vector<StudyRecord> kept;
  for (const auto& s : studies_)
    if (s.modality == m) kept.push_back(s);
  return CohortManifest(std::move(kept));
}

CohortManifest CohortManifest::filter_studies(const std::vector<std::string>& study_ids) const {
  std::set<std::string> wanted(study_ids.begin(), study_ids.end());
  std::vector<StudyRecord> kept;
  for (const auto& s : studies_)
    if (wanted.count(s.study_id)) kept.push_back(s);
  return CohortManifest(std::move(kept));
}

}  // namespace mripipe
