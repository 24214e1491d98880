#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mripipe/tuning.hpp"
#include "test_helpers.hpp"

using namespace mripipe;

namespace {

/// Independent schedule oracle: the successive-halving arithmetic evaluated
/// directly, with no reference to the planner.
long closed_form_epochs(int R, int eta) {
  const int s_max = static_cast<int>(std::floor(std::log(static_cast<double>(R)) /
                                                std::log(static_cast<double>(eta)) + 1e-9));
  long total = 0;
  for (int s = s_max; s >= 0; --s) {
    const int n = static_cast<int>(
        std::ceil(static_cast<double>(s_max + 1) / (s + 1) * std::pow(eta, s) - 1e-9));
    for (int i = 0; i <= s; ++i) {
      const int n_i = static_cast<int>(std::floor(n / std::pow(eta, i)));
      if (n_i < 1) break;
      const int r_i = std::max(1, static_cast<int>(std::floor(R * std::pow(eta, i - s) + 1e-9)));
      total += static_cast<long>(n_i) * r_i;
    }
  }
  return total;
}

/// Deterministic objective peaked at lr = 1e-4, insensitive to epochs.
double planted_objective(const HyperParams& hp, int, uint64_t) {
  const double dist = std::abs(std::log10(hp.learning_rate) - std::log10(1e-4));
  return std::max(0.0, 1.0 - dist / 8.0);
}

}  // namespace

TEST_SUITE("tuning") {

TEST_CASE("sample_config respects bounds and the log-uniform law") {
  SearchSpace space;
  Rng rng(123);
  int below_mid = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const HyperParams hp = sample_config(space, rng);
    CHECK(hp.learning_rate >= 1e-8);
    CHECK(hp.learning_rate <= 1e-1);
    CHECK(hp.weight_decay >= 1e-6);
    CHECK(hp.weight_decay <= 1e-1);
    CHECK(hp.dropout >= 0.0);
    CHECK(hp.dropout <= 0.5);
    if (hp.learning_rate < std::pow(10.0, -4.5)) ++below_mid;
  }
  // Log-uniform midpoint of [1e-8, 1e-1] sits at 1e-4.5.
  const double frac = static_cast<double>(below_mid) / n;
  CHECK(frac > 0.48);
  CHECK(frac < 0.52);
}

TEST_CASE("sample_config is deterministic under a fixed seed") {
  SearchSpace space;
  Rng a(9), b(9);
  for (int i = 0; i < 50; ++i) {
    const HyperParams ha = sample_config(space, a);
    const HyperParams hb = sample_config(space, b);
    CHECK(ha.learning_rate == hb.learning_rate);
    CHECK(ha.weight_decay == hb.weight_decay);
    CHECK(ha.dropout == hb.dropout);
    CHECK(ha.scheduler == hb.scheduler);
  }
}

TEST_CASE("plan_hyperband lays out the published schedule shapes") {
  const auto plan = plan_hyperband(20, 3);
  CHECK(plan.s_max == 2);
  REQUIRE(plan.brackets.size() == 3);
  // Bracket s=2 starts 9 configs at floor(20/9) = 2 epochs.
  CHECK(plan.brackets[0].s == 2);
  REQUIRE(plan.brackets[0].rungs.size() == 3);
  CHECK(plan.brackets[0].rungs[0].n_configs == 9);
  CHECK(plan.brackets[0].rungs[0].epochs == 2);
  CHECK(plan.brackets[0].rungs[1].n_configs == 3);
  CHECK(plan.brackets[0].rungs[1].epochs == 6);
  CHECK(plan.brackets[0].rungs[2].n_configs == 1);
  CHECK(plan.brackets[0].rungs[2].epochs == 20);

  const auto trivial = plan_hyperband(1, 3);
  CHECK(trivial.s_max == 0);
  REQUIRE(trivial.brackets.size() == 1);
  REQUIRE(trivial.brackets[0].rungs.size() == 1);
  CHECK(trivial.brackets[0].rungs[0].n_configs == 1);
  CHECK(trivial.brackets[0].rungs[0].epochs == 1);

  const auto pow2 = plan_hyperband(4, 2);
  CHECK(pow2.s_max == 2);
  CHECK(pow2.brackets.size() == 3);

  CHECK_THROWS_AS(plan_hyperband(0, 3), PipelineError);
  CHECK_THROWS_AS(plan_hyperband(10, 1), PipelineError);
}

TEST_CASE("planned epochs match the closed-form schedule sum") {
  for (auto [R, eta] : std::vector<std::pair<int, int>>{{20, 3}, {27, 3}, {16, 2}, {9, 3}}) {
    CAPTURE(R);
    CAPTURE(eta);
    CHECK(plan_hyperband(R, eta).total_planned_epochs() == closed_form_epochs(R, eta));
  }
}

TEST_CASE("plan_hyperband_for_configs hits the requested count by truncation") {
  const auto plan = plan_hyperband_for_configs(20, 3, 100);
  CHECK(plan.total_configs() == 100);
  // One cycle of (R=20, eta=3) holds 9+5+3 = 17 configs.
  CHECK(plan.brackets.size() >= 100 / 17);
}

TEST_CASE("run_hyperband consumes exactly the planned budget") {
  const auto plan = plan_hyperband(20, 3);
  std::atomic<long> epochs_used{0};
  auto counting_fn = [&](const HyperParams& hp, int epochs, uint64_t seed) {
    epochs_used += epochs;
    return planted_objective(hp, epochs, seed);
  };
  const auto result = run_hyperband(SearchSpace{}, plan, counting_fn, 555);
  CHECK(result.status == HyperbandStatus::ok);
  CHECK(epochs_used.load() == plan.total_planned_epochs());
  CHECK(result.epochs_consumed == plan.total_planned_epochs());
}

TEST_CASE("run_hyperband finds a planted optimum within one decade") {
  const auto plan = plan_hyperband(20, 3);
  const auto result = run_hyperband(SearchSpace{}, plan, planted_objective, 2027);
  const TrialRecord& best = best_trial(result.ledger);
  CHECK(std::abs(std::log10(best.hp.learning_rate) - std::log10(1e-4)) <= 1.0);
}

TEST_CASE("promotion keeps only top objectives at every rung") {
  Rng seeds(31337);
  for (int run = 0; run < 20; ++run) {
    const auto plan = plan_hyperband(run % 2 == 0 ? 20 : 16, run % 2 == 0 ? 3 : 2);
    // Deterministic pseudo-random objective per (trial, rung).
    auto noisy_fn = [](const HyperParams&, int, uint64_t seed) {
      return Rng(seed).uniform();
    };
    const auto result = run_hyperband(SearchSpace{}, plan, noisy_fn, seeds.next());

    // Reconstruct rungs from the ledger and check the promotion invariant.
    for (std::size_t b = 0; b < plan.brackets.size(); ++b) {
      const auto& bracket = plan.brackets[b];
      for (std::size_t i = 0; i + 1 < bracket.rungs.size(); ++i) {
        std::vector<const TrialRecord*> here;
        std::vector<int> promoted;
        for (const auto& row : result.ledger.rows()) {
          if (row.bracket == static_cast<int>(b) && row.rung == static_cast<int>(i))
            here.push_back(&row);
          if (row.bracket == static_cast<int>(b) && row.rung == static_cast<int>(i + 1))
            promoted.push_back(row.trial_id);
        }
        double min_promoted = 2.0, max_eliminated = -1.0;
        for (const auto* row : here) {
          if (row->status != "completed") continue;
          const bool was_promoted =
              std::find(promoted.begin(), promoted.end(), row->trial_id) != promoted.end();
          if (was_promoted)
            min_promoted = std::min(min_promoted, row->objective);
          else
            max_eliminated = std::max(max_eliminated, row->objective);
        }
        CHECK(min_promoted >= max_eliminated);
      }
    }
  }
}

TEST_CASE("failed trials are excluded; an all-failing run reports empty") {
  const auto plan = plan_hyperband(9, 3);
  auto failing_fn = [](const HyperParams&, int, uint64_t) -> double {
    throw std::runtime_error("synthetic failure");
  };
  const auto result = run_hyperband(SearchSpace{}, plan, failing_fn, 8);
  CHECK(result.status == HyperbandStatus::empty);
  CHECK(result.ledger.completed_count() == 0);
  for (const auto& row : result.ledger.rows()) CHECK(row.status == "failed");
  CHECK_THROWS_WITH_AS(best_trial(result.ledger), doctest::Contains("no completed"),
                       PipelineError);
}

TEST_CASE("interrupted runs resume into an identical ledger") {
  testutil::TempDir dir("tuning_resume");
  const auto plan = plan_hyperband(9, 3);
  const std::string full_path = dir.file("full.jsonl");
  const std::string resumed_path = dir.file("resumed.jsonl");

  run_hyperband(SearchSpace{}, plan, planted_objective, 99, full_path);

  // Simulate an interruption: keep only the first 4 rows, then resume.
  {
    std::ifstream in(full_path);
    std::ofstream out(resumed_path);
    std::string line;
    for (int i = 0; i < 4 && std::getline(in, line); ++i) out << line << "\n";
  }
  run_hyperband(SearchSpace{}, plan, planted_objective, 99, resumed_path);

  std::ifstream a(full_path), b(resumed_path);
  std::string all_a((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string all_b((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(all_a == all_b);
}

TEST_CASE("best_trial tie-breaks by earliest trial id and survives reordering") {
  TrialLedger ledger;
  auto make_row = [](int id, double obj, double lr) {
    TrialRecord r;
    r.trial_id = id;
    r.hp.learning_rate = lr;
    r.hp.weight_decay = 1e-5;
    r.objective = obj;
    r.status = "completed";
    return r;
  };
  // The published Sagittal-MRA winner sits above every other trial.
  TrialRecord winner = make_row(3, 0.93, 5.40e-6);
  winner.hp.weight_decay = 9.98e-6;
  winner.hp.dropout = 0.220;
  winner.hp.scheduler = SchedulerKind::reduce_on_plateau;
  ledger.append(make_row(0, 0.81, 1e-4));
  ledger.append(winner);
  ledger.append(make_row(5, 0.72, 1e-3));
  ledger.append(make_row(7, 0.93, 2e-6));  // equal objective, higher id

  const TrialRecord& best = best_trial(ledger);
  CHECK(best.trial_id == 3);
  CHECK(best.hp.learning_rate == 5.40e-6);
  CHECK(best.hp.weight_decay == 9.98e-6);
  CHECK(best.hp.dropout == 0.220);
  CHECK(best.hp.scheduler == SchedulerKind::reduce_on_plateau);

  // Reordered ledger, same answer.
  TrialLedger shuffled;
  shuffled.append(make_row(7, 0.93, 2e-6));
  shuffled.append(make_row(5, 0.72, 1e-3));
  shuffled.append(winner);
  shuffled.append(make_row(0, 0.81, 1e-4));
  CHECK(best_trial(shuffled).trial_id == 3);

  // Singleton ledger.
  TrialLedger single;
  single.append(make_row(4, 0.5, 1e-4));
  CHECK(best_trial(single).trial_id == 4);
}

TEST_CASE("init comparison grid reports domain minus generic differences") {
  const auto grid = init_comparison_grid({{"sagittal", {0.93, 0.85}}, {"axial", {0.88, 0.86}}});
  REQUIRE(grid.at("grid").size() == 2);
  CHECK(grid.at("grid")[0].at("key") == "axial");
  CHECK(grid.at("grid")[0].at("difference").get<double>() == doctest::Approx(0.02));
  CHECK(grid.at("grid")[1].at("difference").get<double>() == doctest::Approx(0.08));
}

}  // TEST_SUITE
