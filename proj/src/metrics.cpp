#include "mripipe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mripipe/rng.hpp"

namespace mripipe {

nlohmann::ordered_json ScanPrediction::to_json() const {
  nlohmann::ordered_json seq = nlohmann::ordered_json::object();
  nlohmann::ordered_json views = nlohmann::ordered_json::object();
  for (const auto& [view, probs] : sequence_probs) seq[to_string(view)] = probs;
  for (const auto& [view, p] : view_probs) views[to_string(view)] = p;
  return nlohmann::ordered_json{{"study_id", study_id},   {"sequence_probs", std::move(seq)},
                                {"view_probs", std::move(views)}, {"ensemble_prob", ensemble_prob},
                                {"label", label},         {"missing_view", missing_view}};
}

ScanPrediction ScanPrediction::from_json(const nlohmann::ordered_json& j) {
  ScanPrediction p;
  p.study_id = j.at("study_id").get<std::string>();
  for (const auto& [view, probs] : j.at("sequence_probs").items())
    p.sequence_probs[view_from_string(view)] = probs.get<std::vector<double>>();
  for (const auto& [view, prob] : j.at("view_probs").items())
    p.view_probs[view_from_string(view)] = prob.get<double>();
  p.ensemble_prob = j.at("ensemble_prob").get<double>();
  p.label = j.at("label").get<int>();
  p.missing_view = j.at("missing_view").get<bool>();
  return p;
}

ScanPrediction aggregate_scan(const std::string& study_id,
                              const std::map<View, std::vector<double>>& seq_probs, int label) {
  ScanPrediction out;
  out.study_id = study_id;
  out.label = label;
  double sum = 0.0;
  int present = 0;
  for (const auto& [view, probs] : seq_probs) {
    if (probs.empty()) continue;
    for (double p : probs)
      if (p < 0.0 || p > 1.0)
        fail_validation("aggregate_scan: probability outside [0,1] for study " + study_id);
    const double mean = std::accumulate(probs.begin(), probs.end(), 0.0) /
                        static_cast<double>(probs.size());
    out.sequence_probs[view] = probs;
    out.view_probs[view] = mean;
    sum += mean;
    ++present;
  }
  if (present == 0)
    fail_validation("aggregate_scan: no sequence probabilities for study " + study_id);
  out.ensemble_prob = sum / present;
  out.missing_view = present < static_cast<int>(kAllViews.size());
  return out;
}

namespace {

void check_binary_labels(const std::vector<int>& labels, const char* what) {
  for (int y : labels)
    if (y != 0 && y != 1) fail_validation(std::string(what) + ": labels must be 0/1");
}

struct ClassCounts {
  long pos = 0, neg = 0;
};

ClassCounts count_classes(const std::vector<int>& labels) {
  ClassCounts c;
  for (int y : labels) (y == 1 ? c.pos : c.neg)++;
  return c;
}

}  // namespace

double calibrate_threshold(const std::vector<std::pair<double, int>>& val_preds) {
  if (val_preds.empty()) fail_validation("calibrate_threshold: empty input");
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(val_preds.size());
  for (const auto& [p, y] : val_preds) {
    scores.push_back(p);
    labels.push_back(y);
  }
  check_binary_labels(labels, "calibrate_threshold");
  const ClassCounts cc = count_classes(labels);
  if (cc.pos == 0 || cc.neg == 0)
    fail_validation("calibrate_threshold: both classes are required");

  std::vector<double> distinct = scores;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  std::vector<double> candidates;
  for (std::size_t i = 0; i + 1 < distinct.size(); ++i)
    candidates.push_back((distinct[i] + distinct[i + 1]) / 2.0);
  if (candidates.empty()) candidates.push_back(distinct.front());

  double best_t = candidates.front();
  double best_gap = std::numeric_limits<double>::infinity();
  double best_sens = -1.0;
  for (double t : candidates) {
    const ConfusionMetrics m = confusion_metrics(scores, labels, t);
    const double gap = std::abs(m.sensitivity - m.specificity);
    const bool better = gap < best_gap - 1e-15 ||
                        (std::abs(gap - best_gap) <= 1e-15 &&
                         (m.sensitivity > best_sens + 1e-15 ||
                          (std::abs(m.sensitivity - best_sens) <= 1e-15 && t < best_t)));
    if (better) {
      best_gap = gap;
      best_sens = m.sensitivity;
      best_t = t;
    }
  }
  return best_t;
}

ConfusionMetrics confusion_metrics(const std::vector<double>& scores,
                                   const std::vector<int>& labels, double threshold) {
  if (scores.size() != labels.size() || scores.empty())
    fail_validation("confusion_metrics: need matching, nonempty scores and labels");
  check_binary_labels(labels, "confusion_metrics");
  ConfusionMetrics m;
  m.threshold = threshold;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] > threshold;
    if (labels[i] == 1)
      predicted ? ++m.counts.tp : ++m.counts.fn;
    else
      predicted ? ++m.counts.fp : ++m.counts.tn;
  }
  m.accuracy = static_cast<double>(m.counts.tp + m.counts.tn) /
               static_cast<double>(m.counts.total());
  const long pos = m.counts.tp + m.counts.fn;
  const long neg = m.counts.tn + m.counts.fp;
  m.sensitivity = pos > 0 ? static_cast<double>(m.counts.tp) / static_cast<double>(pos) : 0.0;
  m.specificity = neg > 0 ? static_cast<double>(m.counts.tn) / static_cast<double>(neg) : 0.0;
  return m;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    fail_validation("roc_auc: need matching, nonempty scores and labels");
  check_binary_labels(labels, "roc_auc");
  const ClassCounts cc = count_classes(labels);
  if (cc.pos == 0 || cc.neg == 0)
    fail_validation("roc_auc: AUC undefined with a single class");

  // Midrank formulation of the Mann-Whitney statistic.
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += midrank;
    i = j + 1;
  }
  const double n_pos = static_cast<double>(cc.pos);
  const double u = pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0;
  return u / (n_pos * static_cast<double>(cc.neg));
}

std::vector<std::pair<double, double>> roc_points(const std::vector<double>& scores,
                                                  const std::vector<int>& labels) {
  const ClassCounts cc = count_classes(labels);
  if (cc.pos == 0 || cc.neg == 0) fail_validation("roc_points: both classes are required");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<std::pair<double, double>> pts;
  pts.emplace_back(0.0, 0.0);
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) labels[order[k]] == 1 ? ++tp : ++fp;
    pts.emplace_back(static_cast<double>(fp) / static_cast<double>(cc.neg),
                     static_cast<double>(tp) / static_cast<double>(cc.pos));
    i = j + 1;
  }
  return pts;
}

nlohmann::ordered_json BootstrapResult::to_json() const {
  nlohmann::ordered_json bands = nlohmann::ordered_json::object();
  for (const auto& [name, band] : ci) bands[name] = {{"lo", band.lo}, {"hi", band.hi}};
  return nlohmann::ordered_json{
      {"iterations", iterations}, {"seed", seed}, {"redraws", redraws}, {"ci", std::move(bands)}};
}

namespace {

double percentile(std::vector<double> values, double pct) {
  std::sort(values.begin(), values.end());
  const double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(values.size() - 1, lo + 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

}  // namespace

BootstrapResult bootstrap_ci(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold, int iterations, uint64_t seed, bool stratified) {
  if (scores.size() != labels.size() || scores.size() < 2)
    fail_validation("bootstrap_ci: need at least two samples");
  check_binary_labels(labels, "bootstrap_ci");
  const ClassCounts cc = count_classes(labels);
  if (cc.pos == 0 || cc.neg == 0) fail_validation("bootstrap_ci: both classes are required");
  if (iterations < 1) fail_validation("bootstrap_ci: iterations must be >= 1");

  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == 1 ? pos_idx : neg_idx).push_back(i);

  BootstrapResult result;
  result.iterations = iterations;
  result.seed = seed;

  std::map<std::string, std::vector<double>> samples;
  const Rng root(seed);
  for (int it = 0; it < iterations; ++it) {
    Rng rng = root.fork(static_cast<uint64_t>(it));
    std::vector<double> s(scores.size());
    std::vector<int> y(labels.size());
    for (;;) {
      if (stratified) {
        std::size_t k = 0;
        for (std::size_t c = 0; c < pos_idx.size(); ++c, ++k) {
          const std::size_t pick = pos_idx[rng.below(pos_idx.size())];
          s[k] = scores[pick];
          y[k] = 1;
        }
        for (std::size_t c = 0; c < neg_idx.size(); ++c, ++k) {
          const std::size_t pick = neg_idx[rng.below(neg_idx.size())];
          s[k] = scores[pick];
          y[k] = 0;
        }
        break;
      }
      long pos_drawn = 0;
      for (std::size_t k = 0; k < scores.size(); ++k) {
        const std::size_t pick = static_cast<std::size_t>(rng.below(scores.size()));
        s[k] = scores[pick];
        y[k] = labels[pick];
        pos_drawn += y[k];
      }
      if (pos_drawn > 0 && pos_drawn < static_cast<long>(scores.size())) break;
      ++result.redraws;  // degenerate single-class resample, draw again
    }
    const ConfusionMetrics m = confusion_metrics(s, y, threshold);
    samples["accuracy"].push_back(m.accuracy);
    samples["sensitivity"].push_back(m.sensitivity);
    samples["specificity"].push_back(m.specificity);
    samples["auc"].push_back(roc_auc(s, y));
  }
  for (const auto& [name, values] : samples)
    result.ci[name] = {percentile(values, 2.5), percentile(values, 97.5)};
  return result;
}

int RaterMatrix::raters_per_subject() const {
  if (counts.empty()) return 0;
  int n = 0;
  for (int c : counts[0]) n += c;
  return n;
}

double fleiss_kappa(const RaterMatrix& m) {
  const std::size_t subjects = m.n_subjects();
  const std::size_t categories = m.n_categories();
  if (subjects < 2) fail_validation("fleiss_kappa: need at least two subjects");
  if (categories < 2) fail_validation("fleiss_kappa: need at least two categories");
  const int n = m.raters_per_subject();
  if (n < 2) fail_validation("fleiss_kappa: need at least two raters");

  double p_bar = 0.0;
  std::vector<double> category_mass(categories, 0.0);
  for (const auto& row : m.counts) {
    if (row.size() != categories)
      fail_validation("fleiss_kappa: ragged rater matrix");
    int row_sum = 0;
    double sq = 0.0;
    for (std::size_t j = 0; j < categories; ++j) {
      if (row[j] < 0) fail_validation("fleiss_kappa: negative count");
      row_sum += row[j];
      sq += static_cast<double>(row[j]) * row[j];
      category_mass[j] += row[j];
    }
    if (row_sum != n)
      fail_validation("fleiss_kappa: row sums differ (every subject needs the same rater count)");
    p_bar += (sq - n) / (static_cast<double>(n) * (n - 1));
  }
  p_bar /= static_cast<double>(subjects);

  double pe = 0.0;
  for (double mass : category_mass) {
    const double pj = mass / (static_cast<double>(subjects) * n);
    pe += pj * pj;
  }
  if (std::abs(1.0 - pe) < 1e-15)
    fail_validation("fleiss_kappa: expected agreement is 1 (all mass in one category), "
                    "kappa undefined");
  return (p_bar - pe) / (1.0 - pe);
}

}  // namespace mripipe
