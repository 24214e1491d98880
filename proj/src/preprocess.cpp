#include "mripipe/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "mripipe/rng.hpp"

namespace mripipe {

std::string StandardizationStats::key_for(SequenceType t, bool fat_sat) {
  return to_string(t) + (fat_sat ? "+fs" : "");
}

bool StandardizationStats::has_key(SequenceType t, bool fat_sat) const {
  return by_key.count(key_for(t, fat_sat)) != 0;
}

nlohmann::ordered_json StandardizationStats::to_json() const {
  nlohmann::ordered_json j;
  j["fitted_on"] = fitted_on;
  nlohmann::ordered_json keys = nlohmann::ordered_json::object();
  for (const auto& [k, e] : by_key) keys[k] = {{"mean", e.mean}, {"stddev", e.stddev}};
  j["by_key"] = std::move(keys);
  j["global"] = {{"mean", global.mean}, {"stddev", global.stddev}};
  return j;
}

StandardizationStats StandardizationStats::from_json(const nlohmann::ordered_json& j) {
  StandardizationStats s;
  s.fitted_on = j.at("fitted_on").get<std::string>();
  for (const auto& [k, e] : j.at("by_key").items())
    s.by_key[k] = {e.at("mean").get<double>(), e.at("stddev").get<double>()};
  s.global = {j.at("global").at("mean").get<double>(), j.at("global").at("stddev").get<double>()};
  return s;
}

void AugmentPolicy::validate() const {
  if (multiplier < 1) fail_validation("AugmentPolicy: multiplier must be >= 1");
  if (rotate_deg < 0 || translate_frac < 0 || noise_sigma < 0)
    fail_validation("AugmentPolicy: transform ranges must be nonnegative");
  if (scale_lo <= 0 || scale_hi < scale_lo)
    fail_validation("AugmentPolicy: scale range must satisfy 0 < lo <= hi");
  if (flip_prob_h < 0 || flip_prob_h > 1 || flip_prob_v < 0 || flip_prob_v > 1)
    fail_validation("AugmentPolicy: flip probabilities must lie in [0,1]");
}

nlohmann::ordered_json AugmentPolicy::to_json() const {
  return nlohmann::ordered_json{
      {"multiplier", multiplier},     {"rotate_deg", rotate_deg},
      {"translate_frac", translate_frac}, {"scale_lo", scale_lo},
      {"scale_hi", scale_hi},         {"flip_prob_h", flip_prob_h},
      {"flip_prob_v", flip_prob_v},   {"noise_sigma", noise_sigma},
      {"seed", seed}};
}

AugmentPolicy AugmentPolicy::from_json(const nlohmann::ordered_json& j) {
  AugmentPolicy p;
  if (j.contains("multiplier")) p.multiplier = j["multiplier"].get<int>();
  if (j.contains("rotate_deg")) p.rotate_deg = j["rotate_deg"].get<double>();
  if (j.contains("translate_frac")) p.translate_frac = j["translate_frac"].get<double>();
  if (j.contains("scale_lo")) p.scale_lo = j["scale_lo"].get<double>();
  if (j.contains("scale_hi")) p.scale_hi = j["scale_hi"].get<double>();
  if (j.contains("flip_prob_h")) p.flip_prob_h = j["flip_prob_h"].get<double>();
  if (j.contains("flip_prob_v")) p.flip_prob_v = j["flip_prob_v"].get<double>();
  if (j.contains("noise_sigma")) p.noise_sigma = j["noise_sigma"].get<double>();
  if (j.contains("seed")) p.seed = j["seed"].get<uint64_t>();
  p.validate();
  return p;
}

namespace {

/// Bilinear sample with half-pixel centers; out-of-bounds reads clamp to the
/// border so a same-size resize is an exact copy.
double sample_bilinear(const double* slice, int h, int w, double y, double x) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  auto px = [&](int yy, int xx) {
    yy = std::clamp(yy, 0, h - 1);
    xx = std::clamp(xx, 0, w - 1);
    return slice[static_cast<std::size_t>(yy) * static_cast<std::size_t>(w) + xx];
  };
  const double top = px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx;
  const double bot = px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx;
  return top * (1 - fy) + bot * fy;
}

/// Like sample_bilinear but reads outside the slice return 0 (used by the
/// augmentation resampler, where borders roll in).
double sample_bilinear_zero(const double* slice, int h, int w, double y, double x) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  auto px = [&](int yy, int xx) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return slice[static_cast<std::size_t>(yy) * static_cast<std::size_t>(w) + xx];
  };
  const double top = px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx;
  const double bot = px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace

SequenceVolume resize_volume(const SequenceVolume& v, int target) {
  if (target <= 0) fail_validation("resize_volume: target side length must be positive");
  if (v.stage != Stage::raw && v.stage != Stage::resized)
    fail_validation("resize_volume: expected a raw volume, got stage " + to_string(v.stage));
  const int n = v.n_slices(), h = v.height(), w = v.width();
  if (n < 1 || h < 1 || w < 1) fail_validation("resize_volume: non-positive dimensions");

  SequenceVolume out = v;
  out.stage = Stage::resized;
  if (h == target && w == target) return out;

  out.voxels = Tensor({n, target, target});
  const double sy = static_cast<double>(h) / target;
  const double sx = static_cast<double>(w) / target;
  for (int s = 0; s < n; ++s) {
    const double* src = v.voxels.ptr() + static_cast<std::size_t>(s) * h * w;
    double* dst = out.voxels.ptr() + static_cast<std::size_t>(s) * target * target;
    for (int y = 0; y < target; ++y) {
      const double src_y = (y + 0.5) * sy - 0.5;
      for (int x = 0; x < target; ++x) {
        const double src_x = (x + 0.5) * sx - 0.5;
        dst[static_cast<std::size_t>(y) * target + x] = sample_bilinear(src, h, w, src_y, src_x);
      }
    }
  }
  return out;
}

SequenceVolume center_crop(const SequenceVolume& v, int size) {
  if (size <= 0) fail_validation("center_crop: size must be positive");
  if (v.stage != Stage::resized && v.stage != Stage::cropped)
    fail_validation("center_crop: expected a resized volume, got stage " + to_string(v.stage));
  const int n = v.n_slices(), h = v.height(), w = v.width();
  if (h < size || w < size)
    fail_validation("center_crop: spatial dims (" + std::to_string(h) + "x" + std::to_string(w) +
                    ") smaller than crop size " + std::to_string(size));

  SequenceVolume out = v;
  out.stage = Stage::cropped;
  if (h == size && w == size) return out;

  const int oy = (h - size) / 2;
  const int ox = (w - size) / 2;
  out.voxels = Tensor({n, size, size});
  for (int s = 0; s < n; ++s) {
    const double* src = v.voxels.ptr() + static_cast<std::size_t>(s) * h * w;
    double* dst = out.voxels.ptr() + static_cast<std::size_t>(s) * size * size;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        dst[static_cast<std::size_t>(y) * size + x] =
            src[static_cast<std::size_t>(y + oy) * w + (x + ox)];
  }
  return out;
}

StandardizationStats fit_standardization(const std::vector<const SequenceVolume*>& train_sequences) {
  if (train_sequences.empty()) fail_validation("fit_standardization: no sequences");

  struct Acc {
    double sum = 0.0, sum_sq = 0.0;
    std::size_t n = 0;
  };
  std::map<std::string, Acc> accs;
  Acc global;
  for (const auto* v : train_sequences) {
    if (v->partition && *v->partition != Partition::train)
      fail_validation("fit_standardization: sequence tagged partition \"" +
                      to_string(*v->partition) + "\"; stats must be fitted on train only");
    Acc& a = accs[StandardizationStats::key_for(v->sequence_type, v->fat_sat)];
    for (double x : v->voxels.data) {
      a.sum += x;
      a.sum_sq += x * x;
      global.sum += x;
      global.sum_sq += x * x;
    }
    a.n += v->voxels.size();
    global.n += v->voxels.size();
  }

  auto finish = [](const Acc& a, const std::string& key) {
    const double mean = a.sum / static_cast<double>(a.n);
    const double var = std::max(0.0, a.sum_sq / static_cast<double>(a.n) - mean * mean);
    const double stddev = std::sqrt(var);
    if (stddev <= 0.0)
      fail_validation("fit_standardization: constant intensities for key \"" + key +
                      "\" (std = 0)");
    return StandardizationStats::Entry{mean, stddev};
  };

  StandardizationStats stats;
  stats.fitted_on = "train";
  for (const auto& [key, acc] : accs) stats.by_key[key] = finish(acc, key);
  stats.global = finish(global, "<global>");
  return stats;
}

StandardizationStats fit_standardization(const std::vector<SequenceVolume>& train_sequences) {
  std::vector<const SequenceVolume*> ptrs;
  ptrs.reserve(train_sequences.size());
  for (const auto& v : train_sequences) ptrs.push_back(&v);
  return fit_standardization(ptrs);
}

SequenceVolume apply_standardization(const SequenceVolume& v, const StandardizationStats& stats,
                                     bool allow_global_fallback) {
  if (v.stage != Stage::cropped)
    fail_validation("apply_standardization: expected a cropped volume, got stage " +
                    to_string(v.stage));
  const std::string key = StandardizationStats::key_for(v.sequence_type, v.fat_sat);
  const StandardizationStats::Entry* entry = nullptr;
  if (auto it = stats.by_key.find(key); it != stats.by_key.end()) {
    entry = &it->second;
  } else if (allow_global_fallback) {
    entry = &stats.global;
  } else {
    fail_validation("apply_standardization: no statistics for sequence type \"" + key +
                    "\" and global fallback is disabled");
  }

  SequenceVolume out = v;
  out.stage = Stage::standardized;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (auto& x : out.voxels.data) {
    x = (x - entry->mean) / entry->stddev;
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const double range = hi - lo;
  if (range <= 0.0) {
    out.voxels.zero();
    return out;
  }
  for (auto& x : out.voxels.data) x = (x - lo) / range;
  return out;
}

std::vector<SequenceVolume> augment(const SequenceVolume& v, const AugmentPolicy& policy) {
  policy.validate();
  if (v.stage != Stage::standardized)
    fail_validation("augment: expected a standardized volume, got stage " + to_string(v.stage));

  const int n = v.n_slices(), h = v.height(), w = v.width();
  const Rng root(policy.seed);

  std::vector<SequenceVolume> out;
  out.reserve(static_cast<std::size_t>(policy.multiplier));
  for (int i = 0; i < policy.multiplier; ++i) {
    Rng rng = root.fork(static_cast<uint64_t>(i));
    const double angle = rng.uniform(-policy.rotate_deg, policy.rotate_deg) * M_PI / 180.0;
    const double tx = rng.uniform(-policy.translate_frac, policy.translate_frac) * w;
    const double ty = rng.uniform(-policy.translate_frac, policy.translate_frac) * h;
    const double scale = rng.uniform(policy.scale_lo, policy.scale_hi);
    const bool flip_h = rng.bernoulli(policy.flip_prob_h);
    const bool flip_v = rng.bernoulli(policy.flip_prob_v);
    const double c = std::cos(angle), s = std::sin(angle);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;

    SequenceVolume a = v;
    a.stage = Stage::augmented;
    a.voxels = Tensor({n, h, w});
    // One rigid transform for every slice of the volume.
    for (int sl = 0; sl < n; ++sl) {
      const double* src = v.voxels.ptr() + static_cast<std::size_t>(sl) * h * w;
      double* dst = a.voxels.ptr() + static_cast<std::size_t>(sl) * h * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double dx = x - cx - tx;
          const double dy = y - cy - ty;
          double rx = (c * dx + s * dy) / scale;
          double ry = (-s * dx + c * dy) / scale;
          if (flip_h) rx = -rx;
          if (flip_v) ry = -ry;
          dst[static_cast<std::size_t>(y) * w + x] =
              sample_bilinear_zero(src, h, w, cy + ry, cx + rx);
        }
      }
    }
    if (policy.noise_sigma > 0) {
      for (auto& x : a.voxels.data) x += policy.noise_sigma * rng.normal();
    }
    for (auto& x : a.voxels.data) x = std::clamp(x, 0.0, 1.0);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace mripipe
