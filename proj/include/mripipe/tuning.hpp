#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mripipe/training.hpp"

namespace mripipe {

struct SearchSpace {
  double lr_lo = 1e-8, lr_hi = 1e-1;        // log-uniform
  double wd_lo = 1e-6, wd_hi = 1e-1;        // log-uniform
  double dropout_lo = 0.0, dropout_hi = 0.5;  // uniform
  bool allow_cosine = true;
  bool allow_plateau = true;
  double cosine_t_max = 10.0;
  double plateau_factor = 0.5;
  int plateau_patience = 3;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SearchSpace from_json(const nlohmann::ordered_json& j);
};

HyperParams sample_config(const SearchSpace& space, Rng& rng);

struct Rung {
  int n_configs = 0;
  int epochs = 0;
};

struct Bracket {
  int s = 0;
  std::vector<Rung> rungs;  // rung 0 holds the bracket's initial configs
};

struct HyperbandPlan {
  int R = 20;
  int eta = 3;
  int s_max = 0;
  std::vector<Bracket> brackets;

  long total_planned_epochs() const;  // sum of n_i * r_i over every rung
  int total_configs() const;          // sum of rung-0 config counts
  nlohmann::ordered_json to_json() const;
};

/// One full bracket cycle s = s_max..0 of the successive-halving schedule.
HyperbandPlan plan_hyperband(int R = 20, int eta = 3);

/// Repeats the bracket cycle until `total_configs` distinct configurations
/// have been planned, truncating the final bracket.
HyperbandPlan plan_hyperband_for_configs(int R, int eta, int total_configs);

struct TrialRecord {
  int trial_id = 0;  // global configuration id, stable across rungs
  HyperParams hp;
  int bracket = 0;
  int rung = 0;
  int epochs = 0;          // resource granted at this rung
  double objective = 0.0;  // validation AUC; NaN when failed
  std::string status;      // completed | failed
  uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
  static TrialRecord from_json(const nlohmann::ordered_json& j);
};

/// JSON-lines ledger, one TrialRecord per line; appends flush immediately so
/// an interrupted run can resume from disk.
class TrialLedger {
 public:
  TrialLedger() = default;

  void attach_file(const std::string& path);  // opens for append, loads existing rows
  void append(const TrialRecord& row);

  const std::vector<TrialRecord>& rows() const { return rows_; }
  std::size_t completed_count() const;
  const TrialRecord* find(int bracket, int rung, int trial_id) const;

  static TrialLedger load(const std::string& path);

 private:
  std::vector<TrialRecord> rows_;
  std::string path_;
};

using TuneTrainFn = std::function<double(const HyperParams& hp, int epochs, uint64_t seed)>;

enum class HyperbandStatus { ok, empty };

struct HyperbandResult {
  TrialLedger ledger;
  HyperbandStatus status = HyperbandStatus::ok;
  long epochs_consumed = 0;  // sum of granted epochs over all ledger rows
};

/// Runs the plan: each rung trains from scratch at its granted epochs, the
/// top floor(n/eta) by objective are promoted. Failed trials are excluded
/// from promotion. Rows already present in the attached ledger are reused.
HyperbandResult run_hyperband(const SearchSpace& space, const HyperbandPlan& plan,
                              const TuneTrainFn& train_fn, uint64_t seed,
                              const std::string& ledger_path = "", int workers = 1);

/// Highest objective among completed rows; ties go to the earliest trial_id,
/// then the earliest rung. Throws when nothing completed.
const TrialRecord& best_trial(const TrialLedger& ledger);

/// Initialization-comparison grid: per key, best objective under domain vs
/// generic pretraining and their difference (domain - generic).
nlohmann::ordered_json init_comparison_grid(
    const std::map<std::string, std::pair<double, double>>& domain_vs_generic);

}  // namespace mripipe
