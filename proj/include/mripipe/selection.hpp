#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mripipe/models.hpp"
#include "mripipe/split.hpp"
#include "mripipe/training.hpp"

namespace mripipe {

/// Per-fold validation AUCs for one (view, modality, architecture) triple.
/// mean/stddev (sample, n-1) are recomputed from the fold list when present.
struct CVResult {
  View view = View::sagittal;
  Modality modality = Modality::standard_mri;
  std::string architecture;
  std::vector<double> fold_aucs;
  double mean = 0.0;
  double stddev = 0.0;

  void compute_stats();
  nlohmann::ordered_json to_json() const;
  static CVResult from_json(const nlohmann::ordered_json& j);
};

struct SelectionDecision {
  View view = View::sagittal;
  Modality modality = Modality::standard_mri;
  std::string architecture;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<CVResult> candidates;

  nlohmann::ordered_json to_json() const;
  static SelectionDecision from_json(const nlohmann::ordered_json& j);
};

/// Top k architectures from the pretraining screen, descending AUC, ties by
/// identifier order.
std::vector<std::string> select_top_k(const std::vector<std::pair<std::string, double>>& screen,
                                      int k = 3);

/// Trains fold `fold` (train/val shoulder lists attached) and returns the
/// fold's validation AUC.
using FoldTrainFn = std::function<double(
    int fold, const HyperParams& hp, const TrainBudget& budget, uint64_t fold_seed,
    const std::vector<std::string>& train_shoulders, const std::vector<std::string>& val_shoulders)>;

/// k trainings on the fold plan; fails up front if any fold's validation set
/// is single-class (AUC undefined), naming the fold.
CVResult run_cv(const std::vector<StudyRecord>& pool, const FoldPlan& plan, View view,
                Modality modality, const std::string& architecture, const HyperParams& hp,
                const TrainBudget& budget, uint64_t seed, const FoldTrainFn& fold_fn,
                int workers = 1);

/// Stability selection: minimum fold-AUC standard deviation wins; ties break
/// to the higher mean, then identifier order.
SelectionDecision select_architecture(const std::vector<CVResult>& candidates);

/// Final re-training on the initial split. Validates the split, delegates the
/// actual training to `train_fn`, and stamps the bundle with the decision.
using FinalTrainFn = std::function<ModelBundle(const SelectionDecision& decision,
                                               const SplitAssignment& initial_split,
                                               const HyperParams& hp, const TrainBudget& budget)>;

ModelBundle retrain_final(const SelectionDecision& decision, const SplitAssignment& initial_split,
                          const HyperParams& hp, const TrainBudget& budget,
                          const FinalTrainFn& train_fn);

}  // namespace mripipe
