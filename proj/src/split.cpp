#include "mripipe/split.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mripipe/rng.hpp"

namespace mripipe {

std::vector<long> largest_remainder(const std::vector<double>& targets, long total) {
  const std::size_t n = targets.size();
  std::vector<long> out(n, 0);
  long assigned = 0;
  std::vector<std::pair<double, std::size_t>> frac(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = targets[i];
    out[i] = static_cast<long>(std::floor(t + 1e-9));
    assigned += out[i];
    frac[i] = {t - static_cast<double>(out[i]), i};
  }
  std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  long leftover = total - assigned;
  for (std::size_t i = 0; leftover > 0 && i < n; ++i, --leftover) ++out[frac[i].second];
  return out;
}

namespace {

/// Exact largest-remainder apportionment of `total` units proportional to
/// integer weights: count_i ~ total * w_i / sum(w). Integer arithmetic keeps
/// exact remainder ties, which break to the lower index.
std::vector<long> apportion_integer(const std::vector<long>& weights, long total) {
  const long denom = std::accumulate(weights.begin(), weights.end(), 0L);
  const std::size_t n = weights.size();
  std::vector<long> out(n, 0);
  std::vector<std::pair<long, std::size_t>> rem(n);
  long assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const long long num = static_cast<long long>(total) * weights[i];
    out[i] = static_cast<long>(num / denom);
    assigned += out[i];
    rem[i] = {static_cast<long>(num % denom), i};
  }
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  long leftover = total - assigned;
  for (std::size_t i = 0; leftover > 0 && i < n; ++i, --leftover) ++out[rem[i].second];
  return out;
}

struct ShoulderUnit {
  std::string id;
  int label;
};

std::vector<ShoulderUnit> shoulder_units(const CohortManifest& manifest) {
  std::vector<ShoulderUnit> units;
  for (const auto& info : manifest.shoulders()) units.push_back({info.shoulder_id, info.label});
  return units;
}

std::vector<ShoulderUnit> shoulder_units(const std::vector<StudyRecord>& pool) {
  std::vector<ShoulderUnit> units;
  std::map<std::string, std::size_t> pos;
  for (const auto& s : pool) {
    auto it = pos.find(s.shoulder_id);
    if (it == pos.end()) {
      pos.emplace(s.shoulder_id, units.size());
      units.push_back({s.shoulder_id, s.label});
    } else {
      units[it->second].label = std::max(units[it->second].label, s.label);
    }
  }
  return units;
}

/// Splits units into |sizes| groups: group sizes fixed, per-group positive
/// counts apportioned against realized group sizes so every group's positive
/// fraction sits within 1/size of the pool fraction.
std::vector<std::vector<std::string>> deal_stratified(const std::vector<ShoulderUnit>& units,
                                                      const std::vector<long>& sizes,
                                                      uint64_t seed, const char* what) {
  std::vector<std::string> positives, negatives;
  for (const auto& u : units) (u.label == 1 ? positives : negatives).push_back(u.id);
  const long n_pos = static_cast<long>(positives.size());

  std::vector<long> pos_counts = apportion_integer(sizes, n_pos);

  // Rounding can starve a small class in one partition even when a feasible
  // assignment exists; shift single units from the largest holder until every
  // nonzero partition carries both classes (or genuinely cannot).
  auto starving = [&](bool positive_side) -> int {
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] == 0) continue;
      const long have = positive_side ? pos_counts[i] : sizes[i] - pos_counts[i];
      if (have < 1) return static_cast<int>(i);
    }
    return -1;
  };
  for (int guard = 0; guard < 64; ++guard) {
    int p = starving(true);
    bool positive_side = true;
    if (p < 0) {
      p = starving(false);
      positive_side = false;
    }
    if (p < 0) break;
    int donor = -1;
    long donor_spare = 0;
    for (std::size_t q = 0; q < sizes.size(); ++q) {
      if (static_cast<int>(q) == p) continue;
      const long have = positive_side ? pos_counts[q] : sizes[q] - pos_counts[q];
      const long other = positive_side ? sizes[q] - pos_counts[q] : pos_counts[q];
      (void)other;
      if (have >= 2 && have > donor_spare) {
        donor_spare = have;
        donor = static_cast<int>(q);
      }
    }
    if (donor < 0)
      fail_validation(std::string(what) + ": " + (positive_side ? "positive" : "negative") +
                      " class too small to reach every partition");
    if (positive_side) {
      --pos_counts[static_cast<std::size_t>(donor)];
      ++pos_counts[static_cast<std::size_t>(p)];
    } else {
      ++pos_counts[static_cast<std::size_t>(donor)];
      --pos_counts[static_cast<std::size_t>(p)];
    }
  }

  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) continue;
    if (pos_counts[i] < 1)
      fail_validation(std::string(what) + ": positive class too small to reach every partition");
    if (sizes[i] - pos_counts[i] < 1)
      fail_validation(std::string(what) + ": negative class too small to reach every partition");
  }

  Rng root(seed);
  {
    Rng r = root.fork("positives");
    r.shuffle(positives);
  }
  {
    Rng r = root.fork("negatives");
    r.shuffle(negatives);
  }

  std::vector<std::vector<std::string>> groups(sizes.size());
  std::size_t pi = 0, ni = 0;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    for (long c = 0; c < pos_counts[g]; ++c) groups[g].push_back(positives[pi++]);
    const long negs = sizes[g] - pos_counts[g];
    for (long c = 0; c < negs; ++c) groups[g].push_back(negatives[ni++]);
  }
  return groups;
}

}  // namespace

SplitAssignment stratified_split(const CohortManifest& manifest,
                                 const std::array<double, 3>& ratios, uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) fail_validation("stratified_split: negative ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail_validation("stratified_split: ratios must sum to 1");

  const auto units = shoulder_units(manifest);
  const long n = static_cast<long>(units.size());
  if (n == 0) fail_validation("stratified_split: empty manifest");
  long n_pos = 0;
  for (const auto& u : units) n_pos += u.label;
  if (n_pos == 0 || n_pos == n)
    fail_validation("stratified_split: cannot stratify, only one class present");

  std::vector<double> size_targets(3);
  for (std::size_t i = 0; i < 3; ++i) size_targets[i] = static_cast<double>(n) * ratios[i];
  const std::vector<long> sizes = largest_remainder(size_targets, n);

  const auto groups = deal_stratified(units, sizes, seed, "stratified_split");

  SplitAssignment out;
  out.ratios = ratios;
  out.seed = seed;
  for (std::size_t g = 0; g < 3; ++g)
    for (const auto& id : groups[g]) out.partition_of[id] = kAllPartitions[g];
  return out;
}

FoldPlan make_folds(const std::vector<StudyRecord>& pool, int k, uint64_t seed) {
  if (k < 2) fail_validation("make_folds: k must be >= 2");
  const auto units = shoulder_units(pool);
  const long n = static_cast<long>(units.size());
  long n_pos = 0;
  for (const auto& u : units) n_pos += u.label;
  const long n_neg = n - n_pos;
  if (n_pos < k)
    fail_validation("make_folds: positive class has " + std::to_string(n_pos) +
                    " members, fewer than k=" + std::to_string(k));
  if (n_neg < k)
    fail_validation("make_folds: negative class has " + std::to_string(n_neg) +
                    " members, fewer than k=" + std::to_string(k));

  const std::vector<long> sizes =
      apportion_integer(std::vector<long>(static_cast<std::size_t>(k), 1), n);

  const auto groups = deal_stratified(units, sizes, seed, "make_folds");

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  for (int f = 0; f < k; ++f)
    for (const auto& id : groups[static_cast<std::size_t>(f)]) plan.fold_of[id] = f;
  return plan;
}

std::vector<std::string> SplitAssignment::shoulders_in(Partition p) const {
  std::vector<std::string> out;
  for (const auto& [id, part] : partition_of)
    if (part == p) out.push_back(id);
  return out;
}

std::vector<std::string> FoldPlan::shoulders_in(int fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : fold_of)
    if (f == fold) out.push_back(id);
  return out;
}

nlohmann::ordered_json SplitAssignment::to_json() const {
  nlohmann::ordered_json j;
  j["ratios"] = ratios;
  j["seed"] = seed;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [id, p] : partition_of) m[id] = to_string(p);
  j["partition_of"] = std::move(m);
  return j;
}

SplitAssignment SplitAssignment::from_json(const nlohmann::ordered_json& j) {
  SplitAssignment out;
  const auto& r = j.at("ratios");
  for (std::size_t i = 0; i < 3; ++i) out.ratios[i] = r.at(i).get<double>();
  out.seed = j.at("seed").get<uint64_t>();
  for (const auto& [id, p] : j.at("partition_of").items())
    out.partition_of[id] = partition_from_string(p.get<std::string>());
  return out;
}

nlohmann::ordered_json FoldPlan::to_json() const {
  nlohmann::ordered_json j;
  j["k"] = k;
  j["seed"] = seed;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [id, f] : fold_of) m[id] = f;
  j["fold_of"] = std::move(m);
  return j;
}

FoldPlan FoldPlan::from_json(const nlohmann::ordered_json& j) {
  FoldPlan out;
  out.k = j.at("k").get<int>();
  out.seed = j.at("seed").get<uint64_t>();
  for (const auto& [id, f] : j.at("fold_of").items()) out.fold_of[id] = f.get<int>();
  return out;
}

LeakageReport validate_no_leakage(const PlacementMap& placement, const CohortManifest& manifest) {
  // Every placement key must resolve to a sequence path, study, or shoulder.
  std::set<std::string> paths, studies, shoulders;
  for (const auto& s : manifest.studies()) {
    studies.insert(s.study_id);
    shoulders.insert(s.shoulder_id);
    for (const auto& q : s.sequences) paths.insert(q.volume_path);
  }
  for (const auto& [key, token] : placement) {
    (void)token;
    if (!paths.count(key) && !studies.count(key) && !shoulders.count(key))
      fail_validation("validate_no_leakage: placement key \"" + key +
                      "\" matches no shoulder, study, or sequence in the manifest");
  }

  std::map<std::string, std::set<std::string>> tokens_by_shoulder;
  for (const auto& s : manifest.studies()) {
    for (const auto& q : s.sequences) {
      const std::string* token = nullptr;
      if (auto it = placement.find(q.volume_path); it != placement.end()) token = &it->second;
      else if (auto it2 = placement.find(s.study_id); it2 != placement.end()) token = &it2->second;
      else if (auto it3 = placement.find(s.shoulder_id); it3 != placement.end())
        token = &it3->second;
      if (token) tokens_by_shoulder[s.shoulder_id].insert(*token);
    }
  }

  LeakageReport report;
  for (const auto& [shoulder, tokens] : tokens_by_shoulder) {
    if (tokens.size() >= 2)
      report.violations.push_back({shoulder, {tokens.begin(), tokens.end()}});
  }
  return report;
}

LeakageReport validate_no_leakage(const SplitAssignment& split, const CohortManifest& manifest) {
  PlacementMap placement;
  for (const auto& [id, p] : split.partition_of) placement[id] = to_string(p);
  return validate_no_leakage(placement, manifest);
}

LeakageReport validate_no_leakage(const FoldPlan& plan, const CohortManifest& manifest) {
  PlacementMap placement;
  for (const auto& [id, f] : plan.fold_of) placement[id] = "fold:" + std::to_string(f);
  return validate_no_leakage(placement, manifest);
}

}  // namespace mripipe
