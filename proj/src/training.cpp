#include "mripipe/training.hpp"

#include <algorithm>
#include <cmath>

#include "mripipe/metrics.hpp"

namespace mripipe {

std::string to_string(SchedulerKind k) {
  return k == SchedulerKind::cosine_annealing ? "cosine_annealing" : "reduce_on_plateau";
}

SchedulerKind scheduler_kind_from_string(const std::string& s) {
  if (s == "cosine_annealing") return SchedulerKind::cosine_annealing;
  if (s == "reduce_on_plateau") return SchedulerKind::reduce_on_plateau;
  fail_validation("unknown scheduler kind \"" + s + "\"");
}

void HyperParams::validate() const {
  if (learning_rate < 1e-8 || learning_rate > 1e-1)
    fail_validation("HyperParams: learning_rate must lie in [1e-8, 1e-1]");
  if (weight_decay < 1e-6 || weight_decay > 1e-1)
    fail_validation("HyperParams: weight_decay must lie in [1e-6, 1e-1]");
  if (dropout < 0.0 || dropout > 0.5)
    fail_validation("HyperParams: dropout must lie in [0, 0.5]");
  if (cosine_t_max <= 0) fail_validation("HyperParams: cosine_t_max must be positive");
  if (plateau_factor <= 0 || plateau_factor >= 1)
    fail_validation("HyperParams: plateau_factor must lie in (0, 1)");
  if (plateau_patience < 1) fail_validation("HyperParams: plateau_patience must be >= 1");
}

nlohmann::ordered_json HyperParams::to_json() const {
  return nlohmann::ordered_json{{"learning_rate", learning_rate},
                                {"weight_decay", weight_decay},
                                {"dropout", dropout},
                                {"scheduler", to_string(scheduler)},
                                {"cosine_t_max", cosine_t_max},
                                {"plateau_factor", plateau_factor},
                                {"plateau_patience", plateau_patience}};
}

HyperParams HyperParams::from_json(const nlohmann::ordered_json& j) {
  HyperParams hp;
  hp.learning_rate = j.at("learning_rate").get<double>();
  hp.weight_decay = j.at("weight_decay").get<double>();
  hp.dropout = j.at("dropout").get<double>();
  hp.scheduler = scheduler_kind_from_string(j.at("scheduler").get<std::string>());
  if (j.contains("cosine_t_max")) hp.cosine_t_max = j["cosine_t_max"].get<double>();
  if (j.contains("plateau_factor")) hp.plateau_factor = j["plateau_factor"].get<double>();
  if (j.contains("plateau_patience")) hp.plateau_patience = j["plateau_patience"].get<int>();
  return hp;
}

ClassWeights class_weights(const std::vector<int>& labels) {
  long pos = 0, neg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) fail_validation("class_weights: labels must be 0/1");
    (y == 1 ? pos : neg)++;
  }
  if (pos == 0 || neg == 0)
    fail_validation("class_weights: both classes must be present");
  const double n = static_cast<double>(pos + neg);
  return {n / (2.0 * static_cast<double>(pos)), n / (2.0 * static_cast<double>(neg))};
}

double weighted_bce(double p, int y, const ClassWeights& w) {
  if (!std::isfinite(p) || p < 0.0 || p > 1.0)
    fail_validation("weighted_bce: probability outside [0,1]");
  if (y != 0 && y != 1) fail_validation("weighted_bce: label must be 0/1");
  constexpr double eps = 1e-7;
  const double pc = std::clamp(p, eps, 1.0 - eps);
  return y == 1 ? -w.w_pos * std::log(pc) : -w.w_neg * std::log(1.0 - pc);
}

double cosine_lr(double lr0, double t, double t_max) {
  return lr0 * (1.0 + std::cos(M_PI * t / t_max)) / 2.0;
}

LrScheduler::LrScheduler(const HyperParams& hp) : hp_(hp), lr_(hp.learning_rate) {}

void LrScheduler::step(double val_metric) {
  ++epochs_done_;
  if (hp_.scheduler == SchedulerKind::cosine_annealing) {
    lr_ = cosine_lr(hp_.learning_rate, epochs_done_, hp_.cosine_t_max);
    return;
  }
  if (val_metric > best_metric_) {
    best_metric_ = val_metric;
    stagnant_ = 0;
  } else if (++stagnant_ >= hp_.plateau_patience) {
    lr_ *= hp_.plateau_factor;
    stagnant_ = 0;
  }
}

AdamW::AdamW(std::vector<nn::ParamView> params, double lr, double weight_decay)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value->shape);
    v_.emplace_back(p.value->shape);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    double* w = params_[i].value->ptr();
    const double* g = params_[i].grad->ptr();
    double* m = m_[i].ptr();
    double* v = v_[i].ptr();
    const std::size_t n = params_[i].value->size();
    for (std::size_t k = 0; k < n; ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[k]);
    }
  }
}

void TrainBudget::validate() const {
  if (max_epochs < 1) fail_validation("TrainBudget: max_epochs must be >= 1");
  if (early_stop_patience < 1) fail_validation("TrainBudget: early_stop_patience must be >= 1");
}

nlohmann::ordered_json EpochStats::to_json() const {
  nlohmann::ordered_json j{{"epoch", epoch},
                           {"mean_loss", mean_loss},
                           {"lr", lr},
                           {"val_accuracy", val_accuracy}};
  if (std::isfinite(val_auc)) j["val_auc"] = val_auc;
  else j["val_auc"] = nullptr;
  return j;
}

std::pair<double, double> evaluate_on(ScanClassifier& model, const Dataset& data) {
  std::vector<double> probs;
  std::vector<int> labels;
  probs.reserve(data.size());
  for (const auto& sample : data) {
    probs.push_back(model.forward(*sample.volume, /*training=*/false, nullptr));
    labels.push_back(sample.label);
  }
  long correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if ((probs[i] > 0.5 ? 1 : 0) == labels[i]) ++correct;
  const double acc = static_cast<double>(correct) / static_cast<double>(probs.size());
  double auc = std::numeric_limits<double>::quiet_NaN();
  try {
    auc = roc_auc(probs, labels);
  } catch (const PipelineError&) {
    // single-class validation set: AUC undefined, accuracy still usable
  }
  return {acc, auc};
}

void apply_best_weights(ScanClassifier& model, const TrainResult& result) {
  if (result.best_weights.empty())
    fail_validation("apply_best_weights: result holds no snapshot");
  model.restore_weights(result.best_weights);
}

TrainResult train(ScanClassifier& model, const Dataset& train_set, const Dataset& val_set,
                  const HyperParams& hp, const TrainBudget& budget, uint64_t seed,
                  const TrainHooks& hooks, std::ostream* history_jsonl) {
  hp.validate();
  budget.validate();
  if (val_set.empty()) fail_validation("train: validation set is empty");
  std::vector<int> train_labels;
  train_labels.reserve(train_set.size());
  for (const auto& s : train_set) train_labels.push_back(s.label);
  const ClassWeights weights = class_weights(train_labels);  // also checks both classes

  AdamW optimizer(model.parameters(), hp.learning_rate, hp.weight_decay);
  LrScheduler scheduler(hp);
  const Rng root(seed);
  Rng dropout_rng = root.fork("dropout");

  TrainResult result;
  int stagnant = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= budget.max_epochs; ++epoch) {
    const double lr = scheduler.lr();
    optimizer.set_lr(lr);

    Rng shuffle_rng = root.fork("epoch-" + std::to_string(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const LabeledVolume& sample = train_set[idx];
      const double p = model.forward(*sample.volume, /*training=*/true, &dropout_rng);
      double loss = weighted_bce(p, sample.label, weights);
      if (hooks.loss_transform) loss = hooks.loss_transform(epoch, loss);
      if (!std::isfinite(loss)) {
        result.status = TrainStatus::aborted_non_finite;
        result.diagnostic = "non-finite loss at epoch " + std::to_string(epoch) + " on study " +
                            sample.study_id;
        result.epochs_run = epoch;
        return result;
      }
      loss_sum += loss;
      const double dlogit = sample.label == 1 ? weights.w_pos * (p - 1.0)
                                              : weights.w_neg * p;
      model.zero_grad();
      model.backward(dlogit);
      optimizer.step();
    }

    auto [val_acc, val_auc] = evaluate_on(model, val_set);
    if (hooks.val_accuracy_override) val_acc = hooks.val_accuracy_override(epoch, val_acc);

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = loss_sum / static_cast<double>(train_set.size());
    stats.lr = lr;
    stats.val_accuracy = val_acc;
    stats.val_auc = val_auc;
    result.history.push_back(stats);
    result.epochs_run = epoch;
    if (history_jsonl) *history_jsonl << stats.to_json().dump() << "\n";
    if (hooks.on_epoch_end) hooks.on_epoch_end(stats);

    // Strict improvement keeps the earliest epoch on ties.
    if (result.best_weights.empty() || val_acc > result.best_val_accuracy) {
      result.best_epoch = epoch;
      result.best_val_accuracy = val_acc;
      result.val_auc_at_best = val_auc;
      result.best_weights = model.snapshot_weights();
      stagnant = 0;
    } else {
      ++stagnant;
    }

    scheduler.step(val_acc);
    if (stagnant >= budget.early_stop_patience) break;
  }

  result.status = TrainStatus::completed;
  return result;
}

}  // namespace mripipe
