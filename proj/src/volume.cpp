#include "mripipe/volume.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace mripipe {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::raw: return "raw";
    case Stage::resized: return "resized";
    case Stage::cropped: return "cropped";
    case Stage::standardized: return "standardized";
    case Stage::augmented: return "augmented";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  if (s == "raw") return Stage::raw;
  if (s == "resized") return Stage::resized;
  if (s == "cropped") return Stage::cropped;
  if (s == "standardized") return Stage::standardized;
  if (s == "augmented") return Stage::augmented;
  fail_validation("unknown stage \"" + s + "\"");
}

double SequenceVolume::min_value() const {
  return *std::min_element(voxels.data.begin(), voxels.data.end());
}

double SequenceVolume::max_value() const {
  return *std::max_element(voxels.data.begin(), voxels.data.end());
}

std::string sidecar_path(const std::string& volume_path) {
  std::filesystem::path p(volume_path);
  p.replace_extension(".json");
  return p.string();
}

void write_volume(const SequenceVolume& v, const std::string& path) {
  if (v.voxels.ndim() != 3) fail_validation("write_volume: voxels must be 3D");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_validation("write_volume: cannot open " + path);
  std::vector<float> buf(v.voxels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(v.voxels.data[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  out.close();

  nlohmann::ordered_json j;
  j["shape"] = v.voxels.shape;
  j["view"] = to_string(v.view);
  j["sequence_type"] = to_string(v.sequence_type);
  j["fat_sat"] = v.fat_sat;
  j["stage"] = to_string(v.stage);
  if (v.partition) j["partition"] = to_string(*v.partition);
  std::ofstream side(sidecar_path(path), std::ios::binary);
  if (!side) fail_validation("write_volume: cannot open sidecar for " + path);
  side << j.dump(2) << "\n";
}

SequenceVolume read_volume(const std::string& path) {
  std::ifstream side(sidecar_path(path));
  if (!side) fail_validation("read_volume: missing sidecar for " + path);
  nlohmann::ordered_json j;
  side >> j;

  SequenceVolume v;
  std::vector<int> shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
    fail_validation("read_volume: invalid shape in sidecar for " + path);
  v.view = view_from_string(j.at("view").get<std::string>());
  v.sequence_type = sequence_type_from_string(j.at("sequence_type").get<std::string>());
  v.fat_sat = j.at("fat_sat").get<bool>();
  v.stage = stage_from_string(j.at("stage").get<std::string>());
  if (j.contains("partition")) v.partition = partition_from_string(j["partition"].get<std::string>());

  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("read_volume: cannot open " + path);
  v.voxels = Tensor(shape);
  std::vector<float> buf(v.voxels.size());
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
    fail_validation("read_volume: " + path + " shorter than sidecar shape implies");
  for (std::size_t i = 0; i < buf.size(); ++i) v.voxels.data[i] = static_cast<double>(buf[i]);
  return v;
}

}  // namespace mripipe
