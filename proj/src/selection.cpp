#include "mripipe/selection.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace mripipe {

void CVResult::compute_stats() {
  const std::size_t n = fold_aucs.size();
  if (n == 0) return;
  const bool constant =
      std::all_of(fold_aucs.begin(), fold_aucs.end(), [&](double a) { return a == fold_aucs[0]; });
  if (constant) {
    mean = fold_aucs[0];
    stddev = 0.0;
    return;
  }
  mean = 0.0;
  for (double a : fold_aucs) mean += a;
  mean /= static_cast<double>(n);
  if (n < 2) {
    stddev = 0.0;
    return;
  }
  double sq = 0.0;
  for (double a : fold_aucs) sq += (a - mean) * (a - mean);
  stddev = std::sqrt(sq / static_cast<double>(n - 1));
}

nlohmann::ordered_json CVResult::to_json() const {
  return nlohmann::ordered_json{{"view", to_string(view)},
                                {"modality", to_string(modality)},
                                {"architecture", architecture},
                                {"fold_aucs", fold_aucs},
                                {"mean", mean},
                                {"stddev", stddev}};
}

CVResult CVResult::from_json(const nlohmann::ordered_json& j) {
  CVResult r;
  r.view = view_from_string(j.at("view").get<std::string>());
  r.modality = modality_from_string(j.at("modality").get<std::string>());
  r.architecture = j.at("architecture").get<std::string>();
  r.fold_aucs = j.at("fold_aucs").get<std::vector<double>>();
  r.mean = j.at("mean").get<double>();
  r.stddev = j.at("stddev").get<double>();
  return r;
}

nlohmann::ordered_json SelectionDecision::to_json() const {
  nlohmann::ordered_json cands = nlohmann::ordered_json::array();
  for (const auto& c : candidates) cands.push_back(c.to_json());
  return nlohmann::ordered_json{{"view", to_string(view)},
                                {"modality", to_string(modality)},
                                {"architecture", architecture},
                                {"mean", mean},
                                {"stddev", stddev},
                                {"candidates", std::move(cands)}};
}

SelectionDecision SelectionDecision::from_json(const nlohmann::ordered_json& j) {
  SelectionDecision d;
  d.view = view_from_string(j.at("view").get<std::string>());
  d.modality = modality_from_string(j.at("modality").get<std::string>());
  d.architecture = j.at("architecture").get<std::string>();
  d.mean = j.at("mean").get<double>();
  d.stddev = j.at("stddev").get<double>();
  for (const auto& c : j.at("candidates")) d.candidates.push_back(CVResult::from_json(c));
  return d;
}

std::vector<std::string> select_top_k(const std::vector<std::pair<std::string, double>>& screen,
                                      int k) {
  if (k < 1) fail_validation("select_top_k: k must be >= 1");
  if (static_cast<int>(screen.size()) < k)
    fail_validation("select_top_k: asked for " + std::to_string(k) + " of " +
                    std::to_string(screen.size()) + " entries");
  std::vector<std::pair<std::string, double>> sorted = screen;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (int i = 0; i < k; ++i) out.push_back(sorted[static_cast<std::size_t>(i)].first);
  return out;
}

CVResult run_cv(const std::vector<StudyRecord>& pool, const FoldPlan& plan, View view,
                Modality modality, const std::string& architecture, const HyperParams& hp,
                const TrainBudget& budget, uint64_t seed, const FoldTrainFn& fold_fn,
                int workers) {
  hp.validate();
  budget.validate();
  if (plan.k < 2) fail_validation("run_cv: fold plan must have k >= 2");

  // Shoulder labels (max over a shoulder's studies) drive the degeneracy check.
  std::map<std::string, int> label_of;
  for (const auto& s : pool) {
    auto [it, inserted] = label_of.emplace(s.shoulder_id, s.label);
    if (!inserted) it->second = std::max(it->second, s.label);
  }
  for (const auto& [shoulder, fold] : plan.fold_of) {
    (void)fold;
    if (!label_of.count(shoulder))
      fail_validation("run_cv: fold plan shoulder \"" + shoulder + "\" is not in the pool");
  }

  std::vector<std::vector<std::string>> fold_members(static_cast<std::size_t>(plan.k));
  for (const auto& [shoulder, fold] : plan.fold_of)
    fold_members[static_cast<std::size_t>(fold)].push_back(shoulder);

  for (int f = 0; f < plan.k; ++f) {
    int pos = 0, neg = 0;
    for (const auto& shoulder : fold_members[static_cast<std::size_t>(f)])
      (label_of.at(shoulder) == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0)
      fail_validation("run_cv: validation fold " + std::to_string(f) +
                      " is single-class; AUC is undefined on it");
  }

  const Rng root(seed);
  CVResult result;
  result.view = view;
  result.modality = modality;
  result.architecture = architecture;
  result.fold_aucs.assign(static_cast<std::size_t>(plan.k), 0.0);

  parallel_for(plan.k, workers, [&](int f) {
    std::vector<std::string> train_shoulders, val_shoulders;
    for (int other = 0; other < plan.k; ++other) {
      const auto& members = fold_members[static_cast<std::size_t>(other)];
      auto& dst = other == f ? val_shoulders : train_shoulders;
      dst.insert(dst.end(), members.begin(), members.end());
    }
    const uint64_t fold_seed = root.fork("fold-" + std::to_string(f)).origin();
    const double auc = fold_fn(f, hp, budget, fold_seed, train_shoulders, val_shoulders);
    if (!std::isfinite(auc) || auc < 0.0 || auc > 1.0)
      fail_training("run_cv: fold " + std::to_string(f) + " returned an invalid AUC");
    result.fold_aucs[static_cast<std::size_t>(f)] = auc;
  });

  result.compute_stats();
  return result;
}

SelectionDecision select_architecture(const std::vector<CVResult>& candidates) {
  if (candidates.empty()) fail_validation("select_architecture: no candidates");
  for (const auto& c : candidates) {
    if (c.view != candidates[0].view || c.modality != candidates[0].modality)
      fail_validation("select_architecture: candidates mix view-modality keys (" +
                      to_string(c.view) + "-" + to_string(c.modality) + " vs " +
                      to_string(candidates[0].view) + "-" + to_string(candidates[0].modality) +
                      ")");
  }

  std::vector<CVResult> pool = candidates;
  for (auto& c : pool)
    if (!c.fold_aucs.empty()) c.compute_stats();

  const CVResult* best = &pool[0];
  for (const auto& c : pool) {
    if (c.stddev < best->stddev ||
        (c.stddev == best->stddev &&
         (c.mean > best->mean ||
          (c.mean == best->mean && c.architecture < best->architecture))))
      best = &c;
  }

  SelectionDecision decision;
  decision.view = best->view;
  decision.modality = best->modality;
  decision.architecture = best->architecture;
  decision.mean = best->mean;
  decision.stddev = best->stddev;
  decision.candidates = pool;
  return decision;
}

ModelBundle retrain_final(const SelectionDecision& decision, const SplitAssignment& initial_split,
                          const HyperParams& hp, const TrainBudget& budget,
                          const FinalTrainFn& train_fn) {
  hp.validate();
  budget.validate();
  if (initial_split.partition_of.empty())
    fail_validation("retrain_final: initial split is empty");
  for (Partition p : kAllPartitions) {
    if (initial_split.shoulders_in(p).empty())
      fail_validation("retrain_final: initial split is missing the " + to_string(p) +
                      " partition");
  }
  ModelBundle bundle = train_fn(decision, initial_split, hp, budget);
  bundle.architecture = decision.architecture;
  bundle.view = decision.view;
  bundle.modality = decision.modality;
  bundle.dropout = hp.dropout;
  bundle.hyperparams = hp.to_json();
  return bundle;
}

}  // namespace mripipe
