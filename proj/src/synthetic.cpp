#include "mripipe/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mripipe/rng.hpp"
#include "mripipe/volume.hpp"

namespace fs = std::filesystem;

namespace mripipe {

void SyntheticSpec::validate() const {
  if (n_studies < 1) fail_validation("SyntheticSpec: n_studies must be >= 1");
  if (positive_fraction <= 0.0 || positive_fraction >= 1.0)
    fail_validation("SyntheticSpec: positive_fraction must lie strictly inside (0,1)");
  if (n_views < 1 || n_views > 3) fail_validation("SyntheticSpec: n_views must be 1..3");
  if (slices < 1) fail_validation("SyntheticSpec: slices must be >= 1");
  if (raw_side < 16) fail_validation("SyntheticSpec: raw_side must be >= 16");
  if (lesion_intensity_delta <= 0) fail_validation("SyntheticSpec: lesion delta must be positive");

  // The crop keeps the central crop_size/resize_target fraction of the image;
  // lesion center jitter plus radius must stay inside it.
  const double crop_frac = static_cast<double>(crop_size) / resize_target;
  const double margin_lo = 0.5 - crop_frac / 2.0;
  const double margin_hi = 0.5 + crop_frac / 2.0;
  const double extent_lo = 0.5 - lesion_center_jitter - lesion_radius_frac;
  const double extent_hi = 0.5 + lesion_center_jitter + lesion_radius_frac;
  if (extent_lo < margin_lo + 0.02 || extent_hi > margin_hi - 0.02)
    fail_validation("SyntheticSpec: lesion (jitter + radius) can leave the crop region");
}

nlohmann::ordered_json SyntheticSpec::to_json() const {
  return nlohmann::ordered_json{{"n_studies", n_studies},
                                {"positive_fraction", positive_fraction},
                                {"n_views", n_views},
                                {"slices", slices},
                                {"raw_side", raw_side},
                                {"lesion_radius_frac", lesion_radius_frac},
                                {"lesion_depth_radius", lesion_depth_radius},
                                {"lesion_center_jitter", lesion_center_jitter},
                                {"lesion_intensity_delta", lesion_intensity_delta},
                                {"noise_sigma", noise_sigma},
                                {"modality", to_string(modality)},
                                {"resize_target", resize_target},
                                {"crop_size", crop_size},
                                {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::ordered_json& j) {
  SyntheticSpec s;
  if (j.contains("n_studies")) s.n_studies = j["n_studies"].get<int>();
  if (j.contains("positive_fraction")) s.positive_fraction = j["positive_fraction"].get<double>();
  if (j.contains("n_views")) s.n_views = j["n_views"].get<int>();
  if (j.contains("slices")) s.slices = j["slices"].get<int>();
  if (j.contains("raw_side")) s.raw_side = j["raw_side"].get<int>();
  if (j.contains("lesion_radius_frac")) s.lesion_radius_frac = j["lesion_radius_frac"].get<double>();
  if (j.contains("lesion_depth_radius"))
    s.lesion_depth_radius = j["lesion_depth_radius"].get<double>();
  if (j.contains("lesion_center_jitter"))
    s.lesion_center_jitter = j["lesion_center_jitter"].get<double>();
  if (j.contains("lesion_intensity_delta"))
    s.lesion_intensity_delta = j["lesion_intensity_delta"].get<double>();
  if (j.contains("noise_sigma")) s.noise_sigma = j["noise_sigma"].get<double>();
  if (j.contains("modality")) s.modality = modality_from_string(j["modality"].get<std::string>());
  if (j.contains("resize_target")) s.resize_target = j["resize_target"].get<int>();
  if (j.contains("crop_size")) s.crop_size = j["crop_size"].get<int>();
  if (j.contains("seed")) s.seed = j["seed"].get<uint64_t>();
  s.validate();
  return s;
}

nlohmann::ordered_json LesionBox::to_json() const {
  return nlohmann::ordered_json{{"slice_lo", slice_lo}, {"slice_hi", slice_hi},
                                {"y_lo", y_lo},         {"y_hi", y_hi},
                                {"x_lo", x_lo},         {"x_hi", x_hi}};
}

LesionBox LesionBox::from_json(const nlohmann::ordered_json& j) {
  LesionBox b;
  b.slice_lo = j.at("slice_lo").get<int>();
  b.slice_hi = j.at("slice_hi").get<int>();
  b.y_lo = j.at("y_lo").get<int>();
  b.y_hi = j.at("y_hi").get<int>();
  b.x_lo = j.at("x_lo").get<int>();
  b.x_hi = j.at("x_hi").get<int>();
  return b;
}

namespace {

SequenceType view_sequence_type(View view) {
  switch (view) {
    case View::sagittal: return SequenceType::t1;
    case View::axial: return SequenceType::t2;
    case View::coronal: return SequenceType::pd;
  }
  return SequenceType::t1;
}

}  // namespace

CohortManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  if (!fs::is_directory(out_dir))
    fail_validation("generate_synthetic: cannot create output directory " + out_dir);

  const Rng root(spec.seed);
  const int n_pos = static_cast<int>(std::llround(spec.positive_fraction * spec.n_studies));
  if (n_pos < 1 || n_pos >= spec.n_studies)
    fail_validation("generate_synthetic: positive fraction leaves an empty class");

  std::vector<int> labels(static_cast<std::size_t>(spec.n_studies), 0);
  for (int i = 0; i < n_pos; ++i) labels[static_cast<std::size_t>(i)] = 1;
  {
    Rng label_rng = root.fork("labels");
    label_rng.shuffle(labels);
  }

  // Raw -> crop coordinate mapping for the ground-truth boxes.
  const double scale = static_cast<double>(spec.resize_target) / spec.raw_side;
  const int crop_off = (spec.resize_target - spec.crop_size) / 2;
  auto to_crop = [&](double raw_coord) { return raw_coord * scale - crop_off; };

  std::ofstream csv(fs::path(out_dir) / "manifest.csv");
  csv << CohortManifest::csv_header() << "\n";
  nlohmann::ordered_json lesions = nlohmann::ordered_json::object();

  for (int i = 0; i < spec.n_studies; ++i) {
    const std::string study_id = "syn" + std::to_string(i);
    const int label = labels[static_cast<std::size_t>(i)];
    nlohmann::ordered_json study_boxes = nlohmann::ordered_json::object();

    for (int vi = 0; vi < spec.n_views; ++vi) {
      const View view = kAllViews[static_cast<std::size_t>(vi)];
      Rng rng = root.fork("study-" + std::to_string(i) + "-" + to_string(view));

      SequenceVolume vol;
      vol.voxels = Tensor({spec.slices, spec.raw_side, spec.raw_side});
      vol.view = view;
      vol.sequence_type = view_sequence_type(view);
      vol.fat_sat = false;
      vol.stage = Stage::raw;

      // Smooth anatomy-like background plus voxel noise.
      const double cx0 = (spec.raw_side - 1) / 2.0;
      for (int s = 0; s < spec.slices; ++s) {
        for (int y = 0; y < spec.raw_side; ++y) {
          for (int x = 0; x < spec.raw_side; ++x) {
            const double dy = (y - cx0) / spec.raw_side;
            const double dx = (x - cx0) / spec.raw_side;
            const double radial = std::exp(-(dx * dx + dy * dy) / 0.18);
            double value = 0.22 + 0.33 * radial + spec.noise_sigma * rng.normal();
            vol.voxels.at(s, y, x) = std::max(0.0, value);
          }
        }
      }

      if (label == 1) {
        const double jitter = spec.lesion_center_jitter * spec.raw_side;
        const double cy = cx0 + rng.uniform(-jitter, jitter);
        const double cx = cx0 + rng.uniform(-jitter, jitter);
        const double cs = (spec.slices - 1) / 2.0 + rng.uniform(-0.5, 0.5);
        const double r = spec.lesion_radius_frac * spec.raw_side;
        const double rs = spec.lesion_depth_radius;
        for (int s = 0; s < spec.slices; ++s) {
          for (int y = 0; y < spec.raw_side; ++y) {
            for (int x = 0; x < spec.raw_side; ++x) {
              const double ds = (s - cs) / rs;
              const double dy = (y - cy) / r;
              const double dx = (x - cx) / r;
              const double d2 = ds * ds + dy * dy + dx * dx;
              if (d2 <= 1.0) vol.voxels.at(s, y, x) += spec.lesion_intensity_delta * (1.0 - 0.3 * d2);
            }
          }
        }
        LesionBox box;
        box.slice_lo = std::max(0, static_cast<int>(std::floor(cs - rs)));
        box.slice_hi = std::min(spec.slices, static_cast<int>(std::ceil(cs + rs)) + 1);
        box.y_lo = std::max(0, static_cast<int>(std::floor(to_crop(cy - r))));
        box.y_hi = std::min(spec.crop_size, static_cast<int>(std::ceil(to_crop(cy + r))));
        box.x_lo = std::max(0, static_cast<int>(std::floor(to_crop(cx - r))));
        box.x_hi = std::min(spec.crop_size, static_cast<int>(std::ceil(to_crop(cx + r))));
        study_boxes[to_string(view)] = box.to_json();
      }

      // Class-neutral intensity anchors: a fixed bright and a fixed dark
      // marker inside the crop region pin every volume's min/max so the
      // per-volume rescale is identical across classes and global intensity
      // statistics carry no label signal.
      {
        const double crop_frac = static_cast<double>(spec.crop_size) / spec.resize_target;
        const int a = static_cast<int>(std::ceil(spec.raw_side * (0.5 - crop_frac / 2.0))) + 2;
        const double bright = 1.4;  // above any background + lesion + noise excursion
        for (int s = 0; s < spec.slices; ++s) {
          for (int dyy = 0; dyy < 2; ++dyy) {
            for (int dxx = 0; dxx < 2; ++dxx) {
              vol.voxels.at(s, a + dyy, a + dxx) = bright;
              vol.voxels.at(s, a + 3 + dyy, a + dxx) = 0.0;
            }
          }
        }
      }

      const std::string file = study_id + "_" + to_string(view) + ".f32";
      write_volume(vol, (fs::path(out_dir) / file).string());
      csv << study_id << ",pat" << i << ",sh" << i << "," << to_string(spec.modality) << ","
          << label << "," << to_string(view) << "," << to_string(vol.sequence_type) << ",0,"
          << file << "\n";
    }
    if (label == 1) lesions[study_id] = std::move(study_boxes);
  }
  csv.close();

  {
    std::ofstream lf(fs::path(out_dir) / "lesions.json");
    lf << lesions.dump(2) << "\n";
  }
  {
    std::ofstream sf(fs::path(out_dir) / "synthetic_spec.json");
    sf << spec.to_json().dump(2) << "\n";
  }

  return CohortManifest::load((fs::path(out_dir) / "manifest.csv").string());
}

std::map<std::string, std::map<View, LesionBox>> load_lesion_boxes(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_validation("load_lesion_boxes: cannot open " + path);
  nlohmann::ordered_json j;
  in >> j;
  std::map<std::string, std::map<View, LesionBox>> out;
  for (const auto& [study, views] : j.items())
    for (const auto& [view, box] : views.items())
      out[study][view_from_string(view)] = LesionBox::from_json(box);
  return out;
}

}  // namespace mripipe
