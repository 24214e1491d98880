#pragma once

#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mripipe/models.hpp"

namespace mripipe {

enum class SchedulerKind { cosine_annealing, reduce_on_plateau };
std::string to_string(SchedulerKind k);
SchedulerKind scheduler_kind_from_string(const std::string& s);

struct HyperParams {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double dropout = 0.0;
  SchedulerKind scheduler = SchedulerKind::cosine_annealing;
  double cosine_t_max = 10.0;
  double plateau_factor = 0.5;
  int plateau_patience = 3;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static HyperParams from_json(const nlohmann::ordered_json& j);
};

struct ClassWeights {
  double w_pos = 1.0;
  double w_neg = 1.0;
};

/// Inverse-prevalence weights: w_c = N / (2 * N_c); balanced data gives (1,1).
ClassWeights class_weights(const std::vector<int>& labels);

/// -[y*w_pos*ln(p) + (1-y)*w_neg*ln(1-p)] with p clamped to [1e-7, 1-1e-7]
/// before the log. p outside [0,1] (or non-finite) is a domain error.
double weighted_bce(double p, int y, const ClassWeights& w);

/// Cosine schedule value after t completed epochs.
double cosine_lr(double lr0, double t, double t_max);

/// Stateful per-epoch schedule. lr() is the rate for the upcoming epoch;
/// step(metric) advances after the epoch finishes. The plateau variant halves
/// after `patience` consecutive epochs without metric improvement.
class LrScheduler {
 public:
  explicit LrScheduler(const HyperParams& hp);
  double lr() const { return lr_; }
  void step(double val_metric);

 private:
  HyperParams hp_;
  int epochs_done_ = 0;
  double lr_;
  double best_metric_ = -std::numeric_limits<double>::infinity();
  int stagnant_ = 0;
};

/// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<nn::ParamView> params, double lr, double weight_decay);
  void set_lr(double lr) { lr_ = lr; }
  void step();

 private:
  std::vector<nn::ParamView> params_;
  double lr_, weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct TrainBudget {
  int max_epochs = 20;  // 20 tuning / 30 CV / 100 final
  int early_stop_patience = 10;

  void validate() const;
};

struct LabeledVolume {
  std::shared_ptr<const SequenceVolume> volume;
  int label = 0;
  std::string study_id;
};
using Dataset = std::vector<LabeledVolume>;

struct EpochStats {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double lr = 0.0;
  double val_accuracy = 0.0;
  double val_auc = 0.0;  // NaN when the val set is single-class

  nlohmann::ordered_json to_json() const;
};

enum class TrainStatus { completed, aborted_non_finite };

struct TrainResult {
  TrainStatus status = TrainStatus::completed;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  double val_auc_at_best = std::numeric_limits<double>::quiet_NaN();
  int epochs_run = 0;
  std::vector<EpochStats> history;
  std::vector<Tensor> best_weights;  // snapshot from the best epoch
  std::string diagnostic;            // populated on abort
};

/// Test seams: override the observed validation accuracy or transform the
/// per-step loss (e.g. forcing a NaN to exercise the abort path).
struct TrainHooks {
  std::function<double(int epoch, double computed)> val_accuracy_override;
  std::function<double(int epoch, double loss)> loss_transform;
  std::function<void(const EpochStats&)> on_epoch_end;
};

/// Weighted-BCE training, batch = one sequence volume, early stopping on
/// validation accuracy, best-epoch weights retained (earliest epoch on ties).
TrainResult train(ScanClassifier& model, const Dataset& train_set, const Dataset& val_set,
                  const HyperParams& hp, const TrainBudget& budget, uint64_t seed,
                  const TrainHooks& hooks = {}, std::ostream* history_jsonl = nullptr);

/// Restores the best-epoch weights captured in a TrainResult.
void apply_best_weights(ScanClassifier& model, const TrainResult& result);

/// Validation metrics of a model on a dataset (accuracy at 0.5, AUC when
/// defined), exactly as the train loop computes them.
std::pair<double, double> evaluate_on(ScanClassifier& model, const Dataset& data);

}  // namespace mripipe
