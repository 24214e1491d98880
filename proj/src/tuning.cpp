#include "mripipe/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace mripipe {

void SearchSpace::validate() const {
  if (lr_lo <= 0 || lr_hi < lr_lo) fail_validation("SearchSpace: bad learning-rate bounds");
  if (wd_lo <= 0 || wd_hi < wd_lo) fail_validation("SearchSpace: bad weight-decay bounds");
  if (dropout_lo < 0 || dropout_hi > 0.5 || dropout_hi < dropout_lo)
    fail_validation("SearchSpace: dropout bounds must sit inside [0, 0.5]");
  if (!allow_cosine && !allow_plateau)
    fail_validation("SearchSpace: at least one scheduler must be allowed");
}

nlohmann::ordered_json SearchSpace::to_json() const {
  return nlohmann::ordered_json{{"lr_lo", lr_lo},
                                {"lr_hi", lr_hi},
                                {"wd_lo", wd_lo},
                                {"wd_hi", wd_hi},
                                {"dropout_lo", dropout_lo},
                                {"dropout_hi", dropout_hi},
                                {"allow_cosine", allow_cosine},
                                {"allow_plateau", allow_plateau},
                                {"cosine_t_max", cosine_t_max},
                                {"plateau_factor", plateau_factor},
                                {"plateau_patience", plateau_patience}};
}

SearchSpace SearchSpace::from_json(const nlohmann::ordered_json& j) {
  SearchSpace s;
  if (j.contains("lr_lo")) s.lr_lo = j["lr_lo"].get<double>();
  if (j.contains("lr_hi")) s.lr_hi = j["lr_hi"].get<double>();
  if (j.contains("wd_lo")) s.wd_lo = j["wd_lo"].get<double>();
  if (j.contains("wd_hi")) s.wd_hi = j["wd_hi"].get<double>();
  if (j.contains("dropout_lo")) s.dropout_lo = j["dropout_lo"].get<double>();
  if (j.contains("dropout_hi")) s.dropout_hi = j["dropout_hi"].get<double>();
  if (j.contains("allow_cosine")) s.allow_cosine = j["allow_cosine"].get<bool>();
  if (j.contains("allow_plateau")) s.allow_plateau = j["allow_plateau"].get<bool>();
  if (j.contains("cosine_t_max")) s.cosine_t_max = j["cosine_t_max"].get<double>();
  if (j.contains("plateau_factor")) s.plateau_factor = j["plateau_factor"].get<double>();
  if (j.contains("plateau_patience")) s.plateau_patience = j["plateau_patience"].get<int>();
  s.validate();
  return s;
}

HyperParams sample_config(const SearchSpace& space, Rng& rng) {
  space.validate();
  HyperParams hp;
  hp.learning_rate = std::pow(10.0, rng.uniform(std::log10(space.lr_lo), std::log10(space.lr_hi)));
  hp.weight_decay = std::pow(10.0, rng.uniform(std::log10(space.wd_lo), std::log10(space.wd_hi)));
  hp.dropout = rng.uniform(space.dropout_lo, space.dropout_hi);
  if (space.allow_cosine && space.allow_plateau)
    hp.scheduler = rng.bernoulli(0.5) ? SchedulerKind::cosine_annealing
                                      : SchedulerKind::reduce_on_plateau;
  else
    hp.scheduler = space.allow_cosine ? SchedulerKind::cosine_annealing
                                      : SchedulerKind::reduce_on_plateau;
  hp.cosine_t_max = space.cosine_t_max;
  hp.plateau_factor = space.plateau_factor;
  hp.plateau_patience = space.plateau_patience;
  // Bounds can round outward through the log/pow round trip.
  hp.learning_rate = std::clamp(hp.learning_rate, space.lr_lo, space.lr_hi);
  hp.weight_decay = std::clamp(hp.weight_decay, space.wd_lo, space.wd_hi);
  return hp;
}

namespace {

Bracket make_bracket(int s, int n, int R, int eta) {
  Bracket bracket;
  bracket.s = s;
  for (int i = 0; i <= s; ++i) {
    Rung rung;
    rung.n_configs = static_cast<int>(std::floor(n / std::pow(eta, i)));
    rung.epochs = std::max(
        1, static_cast<int>(std::floor(R * std::pow(eta, i - s) + 1e-9)));
    if (rung.n_configs < 1) break;
    bracket.rungs.push_back(rung);
  }
  return bracket;
}

}  // namespace

HyperbandPlan plan_hyperband(int R, int eta) {
  if (R < 1) fail_validation("plan_hyperband: R must be >= 1");
  if (eta < 2) fail_validation("plan_hyperband: eta must be >= 2");
  HyperbandPlan plan;
  plan.R = R;
  plan.eta = eta;
  plan.s_max = static_cast<int>(std::floor(std::log(static_cast<double>(R)) /
                                           std::log(static_cast<double>(eta)) + 1e-9));
  for (int s = plan.s_max; s >= 0; --s) {
    const int n = static_cast<int>(std::ceil(static_cast<double>(plan.s_max + 1) / (s + 1) *
                                                 std::pow(eta, s) - 1e-9));
    plan.brackets.push_back(make_bracket(s, n, R, eta));
  }
  return plan;
}

HyperbandPlan plan_hyperband_for_configs(int R, int eta, int total_configs) {
  if (total_configs < 1) fail_validation("plan_hyperband_for_configs: need >= 1 config");
  const HyperbandPlan cycle = plan_hyperband(R, eta);
  HyperbandPlan plan;
  plan.R = R;
  plan.eta = eta;
  plan.s_max = cycle.s_max;
  int remaining = total_configs;
  while (remaining > 0) {
    for (const Bracket& proto : cycle.brackets) {
      if (remaining <= 0) break;
      const int n = std::min(proto.rungs[0].n_configs, remaining);
      plan.brackets.push_back(make_bracket(proto.s, n, R, eta));
      remaining -= n;
    }
  }
  return plan;
}

long HyperbandPlan::total_planned_epochs() const {
  long total = 0;
  for (const auto& bracket : brackets)
    for (const auto& rung : bracket.rungs)
      total += static_cast<long>(rung.n_configs) * rung.epochs;
  return total;
}

int HyperbandPlan::total_configs() const {
  int total = 0;
  for (const auto& bracket : brackets) total += bracket.rungs[0].n_configs;
  return total;
}

nlohmann::ordered_json HyperbandPlan::to_json() const {
  nlohmann::ordered_json brackets_json = nlohmann::ordered_json::array();
  for (const auto& b : brackets) {
    nlohmann::ordered_json rungs = nlohmann::ordered_json::array();
    for (const auto& r : b.rungs) rungs.push_back({{"n_configs", r.n_configs}, {"epochs", r.epochs}});
    brackets_json.push_back({{"s", b.s}, {"rungs", std::move(rungs)}});
  }
  return nlohmann::ordered_json{{"R", R},
                                {"eta", eta},
                                {"s_max", s_max},
                                {"total_configs", total_configs()},
                                {"total_planned_epochs", total_planned_epochs()},
                                {"brackets", std::move(brackets_json)}};
}

nlohmann::ordered_json TrialRecord::to_json() const {
  return nlohmann::ordered_json{{"trial_id", trial_id}, {"bracket", bracket},
                                {"rung", rung},         {"epochs", epochs},
                                {"objective", std::isfinite(objective)
                                                  ? nlohmann::ordered_json(objective)
                                                  : nlohmann::ordered_json(nullptr)},
                                {"status", status},     {"seed", seed},
                                {"hyperparams", hp.to_json()}};
}

TrialRecord TrialRecord::from_json(const nlohmann::ordered_json& j) {
  TrialRecord r;
  r.trial_id = j.at("trial_id").get<int>();
  r.bracket = j.at("bracket").get<int>();
  r.rung = j.at("rung").get<int>();
  r.epochs = j.at("epochs").get<int>();
  r.objective = j.at("objective").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : j.at("objective").get<double>();
  r.status = j.at("status").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.hp = HyperParams::from_json(j.at("hyperparams"));
  return r;
}

void TrialLedger::attach_file(const std::string& path) {
  path_ = path;
  if (std::filesystem::exists(path)) {
    TrialLedger existing = load(path);
    rows_ = std::move(existing.rows_);
  }
}

void TrialLedger::append(const TrialRecord& row) {
  rows_.push_back(row);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    if (!out) fail_validation("TrialLedger: cannot append to " + path_);
    out << row.to_json().dump() << "\n";
    out.flush();
  }
}

std::size_t TrialLedger::completed_count() const {
  std::size_t n = 0;
  for (const auto& r : rows_)
    if (r.status == "completed") ++n;
  return n;
}

const TrialRecord* TrialLedger::find(int bracket, int rung, int trial_id) const {
  for (const auto& r : rows_)
    if (r.bracket == bracket && r.rung == rung && r.trial_id == trial_id) return &r;
  return nullptr;
}

TrialLedger TrialLedger::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_validation("TrialLedger: cannot open " + path);
  TrialLedger ledger;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      ledger.rows_.push_back(TrialRecord::from_json(nlohmann::ordered_json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail_validation("TrialLedger: bad JSON at " + path + ":" + std::to_string(line_no) + ": " +
                      e.what());
    }
  }
  return ledger;
}

HyperbandResult run_hyperband(const SearchSpace& space, const HyperbandPlan& plan,
                              const TuneTrainFn& train_fn, uint64_t seed,
                              const std::string& ledger_path, int workers) {
  space.validate();
  const Rng root(seed);

  // All configurations are drawn upfront from one stream so a resumed run
  // regenerates the identical sequence.
  Rng sampler = root.fork("sample-configs");
  std::vector<std::vector<int>> bracket_trials;  // bracket -> trial ids
  std::vector<HyperParams> configs;
  for (const auto& bracket : plan.brackets) {
    std::vector<int> ids;
    for (int i = 0; i < bracket.rungs[0].n_configs; ++i) {
      ids.push_back(static_cast<int>(configs.size()));
      configs.push_back(sample_config(space, sampler));
    }
    bracket_trials.push_back(std::move(ids));
  }

  HyperbandResult result;
  if (!ledger_path.empty()) result.ledger.attach_file(ledger_path);

  for (std::size_t b = 0; b < plan.brackets.size(); ++b) {
    const Bracket& bracket = plan.brackets[b];
    std::vector<int> active = bracket_trials[b];
    for (std::size_t rung_idx = 0; rung_idx < bracket.rungs.size(); ++rung_idx) {
      const Rung& rung = bracket.rungs[rung_idx];
      if (static_cast<int>(active.size()) > rung.n_configs)
        active.resize(static_cast<std::size_t>(rung.n_configs));
      if (active.empty()) break;

      struct Slot {
        TrialRecord record;
        bool from_ledger = false;
      };
      std::vector<Slot> slots(active.size());
      for (std::size_t k = 0; k < active.size(); ++k) {
        const int trial_id = active[k];
        Slot& slot = slots[k];
        slot.record.trial_id = trial_id;
        slot.record.hp = configs[static_cast<std::size_t>(trial_id)];
        slot.record.bracket = static_cast<int>(b);
        slot.record.rung = static_cast<int>(rung_idx);
        slot.record.epochs = rung.epochs;
        slot.record.seed =
            root.fork("trial-" + std::to_string(b) + "-" + std::to_string(rung_idx) + "-" +
                      std::to_string(trial_id)).origin();
        if (const TrialRecord* prior =
                result.ledger.find(static_cast<int>(b), static_cast<int>(rung_idx), trial_id)) {
          if (std::abs(prior->hp.learning_rate - slot.record.hp.learning_rate) > 1e-15)
            fail_validation("run_hyperband: ledger row for trial " + std::to_string(trial_id) +
                            " does not match this seed/plan");
          slot.record = *prior;
          slot.from_ledger = true;
        }
      }

      parallel_for(static_cast<int>(slots.size()), workers, [&](int k) {
        Slot& slot = slots[static_cast<std::size_t>(k)];
        if (slot.from_ledger) return;
        try {
          slot.record.objective = train_fn(slot.record.hp, slot.record.epochs, slot.record.seed);
          if (!std::isfinite(slot.record.objective) || slot.record.objective < 0.0 ||
              slot.record.objective > 1.0)
            fail_training("objective outside [0,1]");
          slot.record.status = "completed";
        } catch (const std::exception&) {
          slot.record.objective = std::numeric_limits<double>::quiet_NaN();
          slot.record.status = "failed";
        }
      });

      for (const Slot& slot : slots)
        if (!slot.from_ledger) result.ledger.append(slot.record);

      // Promote the top floor(n/eta) completed trials by objective.
      std::vector<const TrialRecord*> completed;
      for (const Slot& slot : slots)
        if (slot.record.status == "completed") completed.push_back(&slot.record);
      std::sort(completed.begin(), completed.end(), [](const TrialRecord* a, const TrialRecord* b2) {
        if (a->objective != b2->objective) return a->objective > b2->objective;
        return a->trial_id < b2->trial_id;
      });
      const std::size_t survivors =
          rung_idx + 1 < bracket.rungs.size()
              ? static_cast<std::size_t>(bracket.rungs[rung_idx + 1].n_configs)
              : 0;
      active.clear();
      for (std::size_t k = 0; k < completed.size() && k < survivors; ++k)
        active.push_back(completed[k]->trial_id);
    }
  }

  for (const auto& row : result.ledger.rows()) result.epochs_consumed += row.epochs;
  result.status = result.ledger.completed_count() == 0 ? HyperbandStatus::empty
                                                       : HyperbandStatus::ok;
  return result;
}

const TrialRecord& best_trial(const TrialLedger& ledger) {
  const TrialRecord* best = nullptr;
  std::vector<const TrialRecord*> sorted;
  for (const auto& r : ledger.rows())
    if (r.status == "completed") sorted.push_back(&r);
  if (sorted.empty())
    fail_validation("best_trial: ledger holds no completed trials");
  std::sort(sorted.begin(), sorted.end(), [](const TrialRecord* a, const TrialRecord* b) {
    if (a->trial_id != b->trial_id) return a->trial_id < b->trial_id;
    if (a->bracket != b->bracket) return a->bracket < b->bracket;
    return a->rung < b->rung;
  });
  for (const TrialRecord* r : sorted)
    if (!best || r->objective > best->objective) best = r;
  return *best;
}

nlohmann::ordered_json init_comparison_grid(
    const std::map<std::string, std::pair<double, double>>& domain_vs_generic) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& [key, aucs] : domain_vs_generic)
    rows.push_back({{"key", key},
                    {"domain_auc", aucs.first},
                    {"generic_auc", aucs.second},
                    {"difference", aucs.first - aucs.second}});
  return nlohmann::ordered_json{{"grid", std::move(rows)}};
}

}  // namespace mripipe
