#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mripipe/common.hpp"

namespace mripipe {

/// Per-study probabilities: sequence level grouped by view, view means, and
/// the unweighted multi-view ensemble mean.
struct ScanPrediction {
  std::string study_id;
  std::map<View, std::vector<double>> sequence_probs;
  std::map<View, double> view_probs;
  double ensemble_prob = 0.0;
  int label = 0;
  bool missing_view = false;  // fewer than all three views were available

  nlohmann::ordered_json to_json() const;
  static ScanPrediction from_json(const nlohmann::ordered_json& j);
};

ScanPrediction aggregate_scan(const std::string& study_id,
                              const std::map<View, std::vector<double>>& seq_probs, int label);

/// Decision threshold from the candidate set {midpoints of adjacent distinct
/// sorted scores} minimizing |sensitivity - specificity|; ties prefer higher
/// sensitivity, then the lower threshold. Decision rule is prob > threshold.
double calibrate_threshold(const std::vector<std::pair<double, int>>& val_preds);

struct ConfusionCounts {
  long tp = 0, fn = 0, tn = 0, fp = 0;
  long total() const { return tp + fn + tn + fp; }
};

struct ConfusionMetrics {
  double threshold = 0.5;
  ConfusionCounts counts;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

ConfusionMetrics confusion_metrics(const std::vector<double>& scores,
                                   const std::vector<int>& labels, double threshold);

/// Mann-Whitney AUC: fraction of (positive, negative) pairs where the positive
/// scores higher, ties counted 1/2. Rank-based; the pairwise oracle lives in
/// the tests.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// ROC curve points (fpr, tpr) swept over distinct score thresholds.
std::vector<std::pair<double, double>> roc_points(const std::vector<double>& scores,
                                                  const std::vector<int>& labels);

struct BootstrapCi {
  double lo = 0.0, hi = 0.0;
};

struct BootstrapResult {
  int iterations = 0;
  uint64_t seed = 0;
  int redraws = 0;  // degenerate single-class resamples that were redrawn
  std::map<std::string, BootstrapCi> ci;  // accuracy, sensitivity, specificity, auc

  nlohmann::ordered_json to_json() const;
};

/// Class-stratified bootstrap of the confusion metrics and AUC at a fixed
/// threshold; 2.5/97.5 percentile band, deterministic under seed.
BootstrapResult bootstrap_ci(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold, int iterations, uint64_t seed,
                             bool stratified = true);

/// Subjects x categories count matrix; every row sums to the rater count.
struct RaterMatrix {
  std::vector<std::vector<int>> counts;

  std::size_t n_subjects() const { return counts.size(); }
  std::size_t n_categories() const { return counts.empty() ? 0 : counts[0].size(); }
  int raters_per_subject() const;
};

double fleiss_kappa(const RaterMatrix& m);

}  // namespace mripipe
