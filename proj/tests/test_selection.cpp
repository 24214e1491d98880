#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mripipe/selection.hpp"
#include "test_helpers.hpp"

using namespace mripipe;

namespace {

/// The initial architecture screen, as published: nine models scored on the
/// external knee-corpus validation set.
std::vector<std::pair<std::string, double>> screen_fixture() {
  return {{"alexnet-class", 0.9242},     {"efficientnet-class", 0.6472},
          {"densenet-class", 0.4072},    {"resnet34-class", 0.5848},
          {"resnet50-class", 0.7371},    {"volume3d", 0.7439},
          {"vit-class", 0.9561},         {"swin-class", 0.9465},
          {"swin2-class", 0.9061}};
}

CVResult make_cv(View view, Modality modality, const std::string& arch, double mean,
                 double stddev) {
  CVResult r;
  r.view = view;
  r.modality = modality;
  r.architecture = arch;
  r.mean = mean;
  r.stddev = stddev;
  return r;
}

}  // namespace

TEST_SUITE("selection") {

TEST_CASE("select_top_k returns the published screen winners") {
  const auto top3 = select_top_k(screen_fixture(), 3);
  CHECK(top3 == std::vector<std::string>{"vit-class", "swin-class", "alexnet-class"});
  CHECK(select_top_k(screen_fixture(), 1) == std::vector<std::string>{"vit-class"});
  CHECK_THROWS_AS(select_top_k(screen_fixture(), 10), PipelineError);
}

TEST_CASE("select_top_k breaks ties by identifier order") {
  const auto top2 = select_top_k({{"bbb", 0.9}, {"aaa", 0.9}, {"ccc", 0.1}}, 2);
  CHECK(top2 == std::vector<std::string>{"aaa", "bbb"});
}

TEST_CASE("run_cv collects one AUC per fold and recomputable stats") {
  const auto m = testutil::make_cohort(48, 16, Modality::mra, 3);
  std::vector<StudyRecord> pool(m.studies().begin(), m.studies().end());
  const auto plan = make_folds(pool, 8, 21);

  std::vector<double> planted{0.91, 0.97, 0.94, 0.99, 0.93, 0.95, 0.92, 0.96};
  auto fold_fn = [&](int fold, const HyperParams&, const TrainBudget&, uint64_t,
                     const std::vector<std::string>& train_shoulders,
                     const std::vector<std::string>& val_shoulders) {
    CHECK(train_shoulders.size() + val_shoulders.size() == 48);
    CHECK(val_shoulders.size() == 6);
    return planted[static_cast<std::size_t>(fold)];
  };

  HyperParams hp;
  const auto result = run_cv(pool, plan, View::axial, Modality::mra, "tiny-test-cnn", hp,
                             {30, 10}, 777, fold_fn, /*workers=*/2);
  CHECK(result.fold_aucs == planted);

  double mean = 0;
  for (double a : planted) mean += a;
  mean /= 8.0;
  double sq = 0;
  for (double a : planted) sq += (a - mean) * (a - mean);
  const double stddev = std::sqrt(sq / 7.0);
  CHECK(std::abs(result.mean - mean) <= 1e-12);
  CHECK(std::abs(result.stddev - stddev) <= 1e-12);
}

TEST_CASE("run_cv rejects a single-class validation fold naming it") {
  const auto m = testutil::make_cohort(12, 4, Modality::mra, 9);
  std::vector<StudyRecord> pool(m.studies().begin(), m.studies().end());

  // Hand-built degenerate plan: fold 1 gets only negatives.
  FoldPlan plan;
  plan.k = 2;
  int i = 0;
  for (const auto& info : m.shoulders())
    plan.fold_of[info.shoulder_id] = info.label == 1 ? 0 : (i++ % 2 == 0 ? 0 : 1);

  auto fold_fn = [](int, const HyperParams&, const TrainBudget&, uint64_t,
                    const std::vector<std::string>&, const std::vector<std::string>&) {
    return 0.5;
  };
  CHECK_THROWS_WITH_AS(run_cv(pool, plan, View::axial, Modality::mra, "tiny-test-cnn",
                              HyperParams{}, {30, 10}, 1, fold_fn),
                       doctest::Contains("fold 1"), PipelineError);
}

TEST_CASE("constant fold AUCs give zero standard deviation") {
  CVResult r = make_cv(View::axial, Modality::mra, "x", 0, 0);
  r.fold_aucs = std::vector<double>(8, 0.8);
  r.compute_stats();
  CHECK(r.mean == doctest::Approx(0.8));
  CHECK(r.stddev == 0.0);
}

TEST_CASE("select_architecture reproduces all six published selections") {
  struct Row {
    View view;
    Modality modality;
    double alex_m, alex_s, swin_m, swin_s, vit_m, vit_s;
    const char* expected;
  };
  const std::vector<Row> table = {
      {View::sagittal, Modality::standard_mri, 0.618, 0.179, 0.704, 0.138, 0.690, 0.187,
       "swin-class"},
      {View::axial, Modality::standard_mri, 0.668, 0.183, 0.671, 0.223, 0.688, 0.101,
       "vit-class"},
      {View::coronal, Modality::standard_mri, 0.663, 0.162, 0.681, 0.078, 0.658, 0.155,
       "swin-class"},
      {View::sagittal, Modality::mra, 0.720, 0.076, 0.755, 0.123, 0.725, 0.054, "vit-class"},
      {View::axial, Modality::mra, 0.706, 0.063, 0.705, 0.153, 0.671, 0.101, "alexnet-class"},
      {View::coronal, Modality::mra, 0.636, 0.109, 0.632, 0.172, 0.725, 0.050, "vit-class"},
  };
  for (const auto& row : table) {
    std::vector<CVResult> candidates = {
        make_cv(row.view, row.modality, "alexnet-class", row.alex_m, row.alex_s),
        make_cv(row.view, row.modality, "swin-class", row.swin_m, row.swin_s),
        make_cv(row.view, row.modality, "vit-class", row.vit_m, row.vit_s),
    };
    CAPTURE(to_string(row.view));
    CAPTURE(to_string(row.modality));
    const auto decision = select_architecture(candidates);
    CHECK(decision.architecture == row.expected);
    CHECK(decision.stddev <= candidates[0].stddev);
    CHECK(decision.stddev <= candidates[1].stddev);
    CHECK(decision.stddev <= candidates[2].stddev);

    // Permuting candidate order never changes the decision.
    std::vector<CVResult> reversed(candidates.rbegin(), candidates.rend());
    CHECK(select_architecture(reversed).architecture == row.expected);
    std::swap(candidates[0], candidates[1]);
    CHECK(select_architecture(candidates).architecture == row.expected);
  }
}

TEST_CASE("sagittal MRA picks stability over mean") {
  // ViT wins on the lower standard deviation despite the lower mean.
  std::vector<CVResult> candidates = {
      make_cv(View::sagittal, Modality::mra, "swin-class", 0.755, 0.123),
      make_cv(View::sagittal, Modality::mra, "vit-class", 0.725, 0.054),
  };
  const auto decision = select_architecture(candidates);
  CHECK(decision.architecture == "vit-class");
  CHECK(decision.mean < 0.755);
}

TEST_CASE("selection tie chain: std, then mean, then identifier") {
  std::vector<CVResult> same_std = {
      make_cv(View::axial, Modality::mra, "bbb", 0.7, 0.05),
      make_cv(View::axial, Modality::mra, "aaa", 0.8, 0.05),
  };
  CHECK(select_architecture(same_std).architecture == "aaa");

  std::vector<CVResult> all_same = {
      make_cv(View::axial, Modality::mra, "bbb", 0.8, 0.05),
      make_cv(View::axial, Modality::mra, "aaa", 0.8, 0.05),
  };
  CHECK(select_architecture(all_same).architecture == "aaa");

  std::vector<CVResult> single = {make_cv(View::axial, Modality::mra, "only", 0.6, 0.2)};
  CHECK(select_architecture(single).architecture == "only");
}

TEST_CASE("select_architecture rejects mixed keys") {
  std::vector<CVResult> mixed = {
      make_cv(View::axial, Modality::mra, "a", 0.7, 0.05),
      make_cv(View::coronal, Modality::mra, "b", 0.8, 0.05),
  };
  CHECK_THROWS_WITH_AS(select_architecture(mixed), doctest::Contains("mix"), PipelineError);
}

TEST_CASE("retrain_final validates the split and stamps the bundle") {
  const auto m = testutil::make_cohort(60, 18, Modality::mra, 2);
  const auto split = stratified_split(m, {0.7, 0.1, 0.2}, 4);
  SelectionDecision decision;
  decision.view = View::coronal;
  decision.modality = Modality::standard_mri;
  decision.architecture = "swin-class";

  HyperParams hp;
  hp.learning_rate = 1.60e-6;
  hp.weight_decay = 4.47e-4;
  hp.dropout = 0.059;
  hp.scheduler = SchedulerKind::cosine_annealing;

  int called = 0;
  auto train_fn = [&](const SelectionDecision& d, const SplitAssignment& s, const HyperParams& h,
                      const TrainBudget& b) {
    ++called;
    CHECK(d.architecture == "swin-class");
    CHECK(s.partition_of.size() == 60);
    CHECK(h.learning_rate == 1.60e-6);
    CHECK(b.max_epochs == 100);
    ModelBundle bundle;
    bundle.provenance = InitKind::domain_pretrained;
    bundle.checkpoint_path = "ckpt";
    return bundle;
  };
  const auto bundle = retrain_final(decision, split, hp, {100, 10}, train_fn);
  CHECK(called == 1);
  CHECK(bundle.architecture == "swin-class");
  CHECK(bundle.view == View::coronal);
  CHECK(bundle.provenance == InitKind::domain_pretrained);
  CHECK(bundle.hyperparams.at("learning_rate").get<double>() == 1.60e-6);

  SplitAssignment empty;
  CHECK_THROWS_AS(retrain_final(decision, empty, hp, {100, 10}, train_fn), PipelineError);
}

}  // TEST_SUITE
