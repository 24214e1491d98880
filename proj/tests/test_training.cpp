#include <cmath>
#include <sstream>

#include "doctest.h"
#include "mripipe/training.hpp"
#include "test_helpers.hpp"

using namespace mripipe;

namespace {

/// Separable toy cohort: positives carry a bright block in every slice.
Dataset planted_dataset(int n_pos, int n_neg, int slices, uint64_t seed, int first_id = 0) {
  Dataset out;
  Rng rng(seed);
  int id = first_id;
  auto push = [&](int label) {
    auto v = std::make_shared<SequenceVolume>();
    v->voxels = Tensor({slices, kSliceSide, kSliceSide});
    Rng vol_rng = rng.fork(static_cast<uint64_t>(id));
    for (auto& x : v->voxels.data) x = 0.15 + 0.1 * vol_rng.uniform();
    if (label == 1) {
      for (int s = 0; s < slices; ++s)
        for (int y = 60; y < 160; ++y)
          for (int x = 60; x < 160; ++x) v->voxels.at(s, y, x) = 0.95;
    }
    v->stage = Stage::standardized;
    out.push_back({std::move(v), label, "study_" + std::to_string(id)});
    ++id;
  };
  for (int i = 0; i < n_pos; ++i) push(1);
  for (int i = 0; i < n_neg; ++i) push(0);
  return out;
}

HyperParams fast_hp() {
  HyperParams hp;
  hp.learning_rate = 3e-3;
  hp.weight_decay = 1e-5;
  hp.dropout = 0.0;
  hp.scheduler = SchedulerKind::cosine_annealing;
  hp.cosine_t_max = 10;
  return hp;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("class_weights is inverse prevalence") {
  std::vector<int> fifty_fifty(100, 0);
  for (int i = 0; i < 50; ++i) fifty_fifty[static_cast<std::size_t>(i)] = 1;
  const auto balanced = class_weights(fifty_fifty);
  CHECK(balanced.w_pos == 1.0);
  CHECK(balanced.w_neg == 1.0);

  std::vector<int> labels(100, 0);
  for (int i = 0; i < 20; ++i) labels[static_cast<std::size_t>(i)] = 1;
  const auto w = class_weights(labels);
  CHECK(w.w_pos == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(w.w_neg == doctest::Approx(0.625).epsilon(1e-15));

  CHECK_THROWS_AS(class_weights(std::vector<int>(10, 0)), PipelineError);
}

TEST_CASE("weighted_bce formula and clamp policy") {
  CHECK(weighted_bce(1.0 - 1e-9, 1, {1, 1}) < 1e-6);
  CHECK(weighted_bce(0.5, 1, {2, 1}) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(weighted_bce(0.5, 0, {2, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(weighted_bce(0.0, 1, {1, 1}) == doctest::Approx(-std::log(1e-7)).epsilon(1e-9));
  CHECK_THROWS_AS(weighted_bce(1.2, 1, {1, 1}), PipelineError);
  CHECK_THROWS_AS(weighted_bce(std::nan(""), 1, {1, 1}), PipelineError);
}

TEST_CASE("unit weights reduce weighted BCE to plain BCE") {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const double p = 1e-6 + (1.0 - 2e-6) * rng.uniform();
    const int y = rng.bernoulli(0.5) ? 1 : 0;
    const double plain = y == 1 ? -std::log(p) : -std::log(1.0 - p);
    CHECK(weighted_bce(p, y, {1.0, 1.0}) == doctest::Approx(plain).epsilon(1e-12));
  }
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(1e-3, 0, 10) == doctest::Approx(1e-3));
  CHECK(cosine_lr(1e-3, 10, 10) == doctest::Approx(0.0).epsilon(1e-18));
  CHECK(cosine_lr(1e-3, 5, 10) == doctest::Approx(5e-4));
  // Pretrain profile: T_max = 5 reaches zero at epoch 5.
  CHECK(cosine_lr(2e-4, 5, 5) == doctest::Approx(0.0).epsilon(1e-18));

  HyperParams hp = fast_hp();
  hp.cosine_t_max = 10;
  LrScheduler sched(hp);
  for (int e = 0; e < 10; ++e) sched.step(0.5);
  CHECK(sched.lr() == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("plateau schedule halves after patience stagnant epochs") {
  HyperParams hp = fast_hp();
  hp.learning_rate = 1e-4;
  hp.scheduler = SchedulerKind::reduce_on_plateau;
  LrScheduler sched(hp);
  sched.step(0.7);               // sets the best
  CHECK(sched.lr() == 1e-4);
  sched.step(0.7);               // stagnant 1
  sched.step(0.7);               // stagnant 2
  CHECK(sched.lr() == 1e-4);
  sched.step(0.7);               // stagnant 3 -> halve
  CHECK(sched.lr() == doctest::Approx(5e-5));
  sched.step(0.9);               // improvement resets
  sched.step(0.9);
  sched.step(0.9);
  CHECK(sched.lr() == doctest::Approx(5e-5));
  sched.step(0.9);
  CHECK(sched.lr() == doctest::Approx(2.5e-5));
}

TEST_CASE("training fits a separable planted signal") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 400);
  const Dataset train_set = planted_dataset(5, 5, 2, 41);
  const Dataset val_set = planted_dataset(3, 3, 2, 42, /*first_id=*/100);
  TrainBudget budget{20, 10};
  const auto result = train(*model, train_set, val_set, fast_hp(), budget, 4242);
  CHECK(result.status == TrainStatus::completed);
  CHECK(result.best_val_accuracy == 1.0);
  CHECK(result.epochs_run <= budget.max_epochs);

  // best_val_accuracy must equal the max of history.
  double max_acc = 0;
  for (const auto& e : result.history) max_acc = std::max(max_acc, e.val_accuracy);
  CHECK(result.best_val_accuracy == max_acc);
  // Early-stop bound.
  CHECK(result.epochs_run <= result.best_epoch + budget.early_stop_patience);
}

TEST_CASE("frozen validation accuracy stops at 1 + patience") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 401);
  const Dataset train_set = planted_dataset(3, 3, 2, 43);
  const Dataset val_set = planted_dataset(2, 2, 2, 44, 100);
  TrainBudget budget{20, 10};
  TrainHooks hooks;
  hooks.val_accuracy_override = [](int, double) { return 0.5; };
  const auto result = train(*model, train_set, val_set, fast_hp(), budget, 7);
  CHECK(result.epochs_run == 11);  // 1 + patience
  CHECK(result.best_epoch == 1);   // earliest epoch kept on ties
  CHECK(result.best_val_accuracy == 0.5);
}

TEST_CASE("checkpoint reload reproduces best validation accuracy exactly") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 402);
  const Dataset train_set = planted_dataset(4, 4, 2, 45);
  const Dataset val_set = planted_dataset(3, 3, 2, 46, 100);
  TrainBudget budget{6, 10};
  const auto result = train(*model, train_set, val_set, fast_hp(), budget, 99);

  auto fresh = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 12345);
  apply_best_weights(*fresh, result);
  const auto [acc, auc] = evaluate_on(*fresh, val_set);
  CHECK(acc == result.best_val_accuracy);  // bitwise reproduction
  if (std::isfinite(result.val_auc_at_best)) CHECK(auc == result.val_auc_at_best);
}

TEST_CASE("non-finite loss aborts with a diagnostic result") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 403);
  const Dataset train_set = planted_dataset(3, 3, 2, 47);
  const Dataset val_set = planted_dataset(2, 2, 2, 48, 100);
  TrainHooks hooks;
  hooks.loss_transform = [](int epoch, double loss) {
    return epoch == 2 ? std::numeric_limits<double>::quiet_NaN() : loss;
  };
  const auto result = train(*model, train_set, val_set, fast_hp(), {10, 10}, 3, hooks);
  CHECK(result.status == TrainStatus::aborted_non_finite);
  CHECK(result.epochs_run == 2);
  CHECK(result.diagnostic.find("epoch 2") != std::string::npos);
}

TEST_CASE("training is deterministic under a fixed seed") {
  const Dataset train_set = planted_dataset(4, 4, 2, 49);
  const Dataset val_set = planted_dataset(2, 2, 2, 50, 100);
  HyperParams hp = fast_hp();
  hp.dropout = 0.2;

  std::ostringstream hist_a, hist_b;
  auto model_a = build_slice_model(find_backbone("tiny-test-cnn"), hp.dropout, {}, 600);
  const auto ra = train(*model_a, train_set, val_set, hp, {4, 10}, 11, {}, &hist_a);
  auto model_b = build_slice_model(find_backbone("tiny-test-cnn"), hp.dropout, {}, 600);
  const auto rb = train(*model_b, train_set, val_set, hp, {4, 10}, 11, {}, &hist_b);

  CHECK(hist_a.str() == hist_b.str());
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i)
    CHECK(ra.history[i].mean_loss == rb.history[i].mean_loss);
  CHECK(ra.best_val_accuracy == rb.best_val_accuracy);
}

TEST_CASE("train validates inputs") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 404);
  const Dataset train_single = planted_dataset(3, 0, 2, 51);
  const Dataset val_set = planted_dataset(1, 1, 2, 52, 100);
  CHECK_THROWS_AS(train(*model, train_single, val_set, fast_hp(), {5, 10}, 1), PipelineError);
  const Dataset train_ok = planted_dataset(2, 2, 2, 53);
  CHECK_THROWS_AS(train(*model, train_ok, {}, fast_hp(), {5, 10}, 1), PipelineError);

  HyperParams bad = fast_hp();
  bad.learning_rate = 1.0;
  CHECK_THROWS_AS(train(*model, train_ok, val_set, bad, {5, 10}, 1), PipelineError);
}

}  // TEST_SUITE
