#include "mripipe/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "mripipe/interpret.hpp"

namespace fs = std::filesystem;

namespace mripipe {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json views_json = nlohmann::ordered_json::array();
  for (View v : views) views_json.push_back(to_string(v));
  nlohmann::ordered_json archs = architectures;
  nlohmann::ordered_json ckpts = nlohmann::ordered_json::object();
  for (const auto& [view, path] : pretrained_checkpoints) ckpts[to_string(view)] = path;
  return nlohmann::ordered_json{{"manifest", manifest_path},
                                {"modality", to_string(modality)},
                                {"views", std::move(views_json)},
                                {"out_dir", out_dir},
                                {"seed", seed},
                                {"workers", workers},
                                {"split_ratios", split_ratios},
                                {"resize_target", resize_target},
                                {"crop_size", crop_size},
                                {"augment", augment.to_json()},
                                {"architectures", std::move(archs)},
                                {"init", to_string(init)},
                                {"pretrained_checkpoints", std::move(ckpts)},
                                {"search_space", space.to_json()},
                                {"hyperband_r", hyperband_r},
                                {"hyperband_eta", hyperband_eta},
                                {"hyperband_total_configs", hyperband_total_configs},
                                {"early_stop_patience", early_stop_patience},
                                {"cv_folds", cv_folds},
                                {"cv_max_epochs", cv_max_epochs},
                                {"final_max_epochs", final_max_epochs},
                                {"bootstrap_iterations", bootstrap_iterations}};
}

RunConfig RunConfig::from_json(const nlohmann::ordered_json& j) {
  RunConfig cfg;
  if (j.contains("manifest")) cfg.manifest_path = j["manifest"].get<std::string>();
  if (j.contains("modality")) cfg.modality = modality_from_string(j["modality"].get<std::string>());
  if (j.contains("views")) {
    cfg.views.clear();
    for (const auto& v : j["views"]) cfg.views.push_back(view_from_string(v.get<std::string>()));
    if (cfg.views.empty()) fail_validation("RunConfig: views must be nonempty");
  }
  if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
  if (j.contains("workers")) cfg.workers = std::max(1, j["workers"].get<int>());
  if (j.contains("split_ratios")) {
    const auto& r = j["split_ratios"];
    for (std::size_t i = 0; i < 3; ++i) cfg.split_ratios[i] = r.at(i).get<double>();
  }
  if (j.contains("resize_target")) cfg.resize_target = j["resize_target"].get<int>();
  if (j.contains("crop_size")) cfg.crop_size = j["crop_size"].get<int>();
  if (j.contains("augment")) cfg.augment = AugmentPolicy::from_json(j["augment"]);
  if (j.contains("architectures")) {
    cfg.architectures = j["architectures"].get<std::vector<std::string>>();
    if (cfg.architectures.empty()) fail_validation("RunConfig: architectures must be nonempty");
  }
  if (j.contains("init")) cfg.init = init_kind_from_string(j["init"].get<std::string>());
  if (j.contains("pretrained_checkpoints"))
    for (const auto& [view, path] : j["pretrained_checkpoints"].items())
      cfg.pretrained_checkpoints[view_from_string(view)] = path.get<std::string>();
  if (j.contains("search_space")) cfg.space = SearchSpace::from_json(j["search_space"]);
  if (j.contains("hyperband_r")) cfg.hyperband_r = j["hyperband_r"].get<int>();
  if (j.contains("hyperband_eta")) cfg.hyperband_eta = j["hyperband_eta"].get<int>();
  if (j.contains("hyperband_total_configs"))
    cfg.hyperband_total_configs = j["hyperband_total_configs"].get<int>();
  if (j.contains("early_stop_patience"))
    cfg.early_stop_patience = j["early_stop_patience"].get<int>();
  if (j.contains("cv_folds")) cfg.cv_folds = j["cv_folds"].get<int>();
  if (j.contains("cv_max_epochs")) cfg.cv_max_epochs = j["cv_max_epochs"].get<int>();
  if (j.contains("final_max_epochs")) cfg.final_max_epochs = j["final_max_epochs"].get<int>();
  if (j.contains("bootstrap_iterations"))
    cfg.bootstrap_iterations = j["bootstrap_iterations"].get<int>();
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open config file: " + path);
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_validation("config file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::string RunConfig::config_hash() const { return hex64(fnv1a64(to_json().dump())); }

nlohmann::ordered_json PretrainProfile::to_json() const {
  return nlohmann::ordered_json{{"corpus_manifest", corpus_manifest},
                                {"screen_manifest", screen_manifest},
                                {"label_name", label_name},
                                {"dev_set_size", dev_set_size},
                                {"augment_multiplier", augment_multiplier},
                                {"cosine_t_max", cosine_t_max}};
}

PretrainProfile PretrainProfile::from_json(const nlohmann::ordered_json& j) {
  PretrainProfile p;
  if (j.contains("corpus_manifest")) p.corpus_manifest = j["corpus_manifest"].get<std::string>();
  if (j.contains("screen_manifest")) p.screen_manifest = j["screen_manifest"].get<std::string>();
  if (j.contains("label_name")) p.label_name = j["label_name"].get<std::string>();
  if (j.contains("dev_set_size")) p.dev_set_size = j["dev_set_size"].get<int>();
  if (j.contains("augment_multiplier")) p.augment_multiplier = j["augment_multiplier"].get<int>();
  if (j.contains("cosine_t_max")) p.cosine_t_max = j["cosine_t_max"].get<double>();
  return p;
}

PretrainProfile PretrainProfile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open profile file: " + path);
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_validation("profile file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::ordered_json effective_training_config(const RunConfig& cfg, bool pretrain_mode,
                                                 const PretrainProfile* profile) {
  PretrainProfile defaults;
  const PretrainProfile* p = profile ? profile : &defaults;
  return nlohmann::ordered_json{
      {"augment_multiplier", pretrain_mode ? p->augment_multiplier : cfg.augment.multiplier},
      {"cosine_t_max", pretrain_mode ? p->cosine_t_max : cfg.space.cosine_t_max},
      {"objective_dataset", pretrain_mode ? "development" : "validation"},
      {"label_field", pretrain_mode ? p->label_name : "label"},
      {"batch", "one_sequence"},
      {"loss", "weighted_bce"},
      {"early_stop_metric", "val_accuracy"},
      {"early_stop_patience", cfg.early_stop_patience},
      {"tuning_resource_epochs", cfg.hyperband_r},
      {"hyperband_eta", cfg.hyperband_eta}};
}

// ---------------------------------------------------------------------------
// Artifacts and provenance
// ---------------------------------------------------------------------------

ArtifactPaths::ArtifactPaths(const RunConfig& cfg) : out_dir(cfg.out_dir) {
  manifest_report = (fs::path(out_dir) / "manifest_report.json").string();
  split = (fs::path(out_dir) / "split.json").string();
  folds = (fs::path(out_dir) / "folds.json").string();
  cv_results = (fs::path(out_dir) / "cv" / "cv_results.json").string();
  selections = (fs::path(out_dir) / "select" / "selections.json").string();
  evaluation_report = (fs::path(out_dir) / "evaluate" / "evaluation_report.json").string();
  roc_csv = (fs::path(out_dir) / "evaluate" / "roc_ensemble.csv").string();
  pretrain_screen = (fs::path(out_dir) / "pretrain" / "screen.json").string();
}

std::string ArtifactPaths::tune_ledger(View v, const std::string& arch) const {
  return (fs::path(out_dir) / "tune" / (to_string(v) + "_" + arch + ".jsonl")).string();
}
std::string ArtifactPaths::tune_best(View v, const std::string& arch) const {
  return (fs::path(out_dir) / "tune" / (to_string(v) + "_" + arch + "_best.json")).string();
}
std::string ArtifactPaths::bundle(View v) const {
  return (fs::path(out_dir) / "retrain" / (to_string(v) + "_bundle.json")).string();
}
std::string ArtifactPaths::bundle_checkpoint(View v, const std::string& arch) const {
  return (fs::path(out_dir) / "retrain" / (to_string(v) + "_" + arch + ".ckpt")).string();
}
std::string ArtifactPaths::stats(View v) const {
  return (fs::path(out_dir) / "retrain" / ("stats_" + to_string(v) + ".json")).string();
}
std::string ArtifactPaths::history(View v) const {
  return (fs::path(out_dir) / "retrain" / (to_string(v) + "_history.jsonl")).string();
}
std::string ArtifactPaths::pretrain_checkpoint(View v, const std::string& arch) const {
  return (fs::path(out_dir) / "pretrain" / (to_string(v) + "_" + arch + ".ckpt")).string();
}

nlohmann::ordered_json provenance_stamp(const RunConfig& cfg,
                                        const std::vector<std::string>& input_paths) {
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  for (const auto& path : input_paths) inputs[path] = hex64(hash_file(path));
  return nlohmann::ordered_json{
      {"config_hash", cfg.config_hash()}, {"seed", cfg.seed}, {"inputs", std::move(inputs)}};
}

void write_json_artifact(const std::string& path, const nlohmann::ordered_json& payload) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_validation("cannot write artifact: " + path);
  out << payload.dump(2) << "\n";
}

nlohmann::ordered_json read_json_artifact(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot read artifact: " + path);
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_validation("artifact " + path + " is not valid JSON: " + e.what());
  }
  return j;
}

void require_artifact(const std::string& path, const std::string& producer_stage) {
  if (!fs::exists(path))
    fail_dependency("missing artifact " + path + "; run the `" + producer_stage +
                    "` stage first");
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

namespace {

struct PartitionSets {
  std::set<std::string> train, val, test;
};

PartitionSets sets_from_split(const SplitAssignment& split) {
  PartitionSets sets;
  for (const auto& [shoulder, partition] : split.partition_of) {
    if (partition == Partition::train) sets.train.insert(shoulder);
    else if (partition == Partition::val) sets.val.insert(shoulder);
    else sets.test.insert(shoulder);
  }
  return sets;
}

using CroppedCache = std::map<std::string, std::shared_ptr<const SequenceVolume>>;

struct ViewData {
  Dataset train;      // standardized originals
  Dataset train_aug;  // originals followed by their augmented copies
  Dataset val, test;
  StandardizationStats stats;
};

std::shared_ptr<const SequenceVolume> cropped_volume(const RunConfig& cfg, const std::string& path,
                                                     CroppedCache& cache) {
  if (auto it = cache.find(path); it != cache.end()) return it->second;
  SequenceVolume raw = read_volume(path);
  auto cropped = std::make_shared<SequenceVolume>(
      center_crop(resize_volume(raw, cfg.resize_target), cfg.crop_size));
  cache.emplace(path, cropped);
  return cropped;
}

void warm_cache(const RunConfig& cfg, const CohortManifest& manifest, View view,
                CroppedCache& cache) {
  for (const auto& study : manifest.studies())
    for (const auto& seq : study.sequences)
      if (seq.view == view) cropped_volume(cfg, seq.volume_path, cache);
}

/// Loads, preprocesses, and augments one view's data for the given shoulder
/// partition sets. Standardization is fitted on the train set only.
ViewData prepare_view_data(const RunConfig& cfg, const CohortManifest& manifest,
                           const PartitionSets& sets, View view, int augment_multiplier,
                           CroppedCache& cache) {
  struct Row {
    std::shared_ptr<const SequenceVolume> cropped;
    int label;
    std::string study_id;
    int bucket;  // 0 train, 1 val, 2 test
  };
  std::vector<Row> rows;
  for (const auto& study : manifest.studies()) {
    int bucket = -1;
    if (sets.train.count(study.shoulder_id)) bucket = 0;
    else if (sets.val.count(study.shoulder_id)) bucket = 1;
    else if (sets.test.count(study.shoulder_id)) bucket = 2;
    if (bucket < 0) continue;
    for (const auto& seq : study.sequences) {
      if (seq.view != view) continue;
      rows.push_back({cropped_volume(cfg, seq.volume_path, cache), study.label, study.study_id,
                      bucket});
    }
  }

  std::vector<const SequenceVolume*> train_cropped;
  for (const auto& row : rows)
    if (row.bucket == 0) train_cropped.push_back(row.cropped.get());
  if (train_cropped.empty())
    fail_validation("prepare_view_data: no training sequences for view " + to_string(view));

  ViewData data;
  data.stats = fit_standardization(train_cropped);

  for (const auto& row : rows) {
    auto standardized = std::make_shared<SequenceVolume>(
        apply_standardization(*row.cropped, data.stats));
    const LabeledVolume sample{standardized, row.label, row.study_id};
    if (row.bucket == 0) data.train.push_back(sample);
    else if (row.bucket == 1) data.val.push_back(sample);
    else data.test.push_back(sample);
  }

  data.train_aug = data.train;
  if (augment_multiplier >= 1) {
    for (const auto& sample : data.train) {
      AugmentPolicy policy = cfg.augment;
      policy.multiplier = augment_multiplier;
      policy.seed = Rng(cfg.seed).fork("augment:" + sample.study_id + ":" + to_string(view))
                        .origin();
      for (auto& aug : augment(*sample.volume, policy))
        data.train_aug.push_back({std::make_shared<SequenceVolume>(std::move(aug)), sample.label,
                                  sample.study_id});
    }
  }
  return data;
}

CohortManifest load_modality_manifest(const RunConfig& cfg) {
  if (cfg.manifest_path.empty()) fail_validation("config: manifest path is required");
  const CohortManifest full = CohortManifest::load(cfg.manifest_path);
  CohortManifest filtered = full.filter(cfg.modality);
  if (filtered.n_studies() == 0)
    fail_validation("manifest holds no " + to_string(cfg.modality) + " studies");
  return filtered;
}

InitStrategy init_strategy_for(const RunConfig& cfg, View view) {
  InitStrategy init;
  init.kind = cfg.init;
  if (init.kind != InitKind::random) {
    auto it = cfg.pretrained_checkpoints.find(view);
    if (it == cfg.pretrained_checkpoints.end())
      fail_validation("config: init " + to_string(init.kind) + " needs a checkpoint for view " +
                      to_string(view));
    init.checkpoint_path = it->second;
  }
  return init;
}

SplitAssignment load_split(const ArtifactPaths& paths) {
  return SplitAssignment::from_json(read_json_artifact(paths.split).at("assignment"));
}

HyperParams load_best_hp(const ArtifactPaths& paths, View view, const std::string& arch) {
  const auto j = read_json_artifact(paths.tune_best(view, arch));
  return HyperParams::from_json(j.at("trial").at("hyperparams"));
}

/// One tuning loop (Hyperband) for a prepared view; shared by tune and
/// pretrain stages.
TrialRecord tune_one(const RunConfig& cfg, const ViewData& data, const std::string& arch,
                     View view, const SearchSpace& space, const HyperbandPlan& plan,
                     int budget_patience, const std::string& ledger_path, uint64_t seed) {
  const InitStrategy init = init_strategy_for(cfg, view);
  TuneTrainFn train_fn = [&](const HyperParams& hp, int epochs, uint64_t trial_seed) {
    auto model = build_scan_classifier(arch, hp.dropout, init,
                                       Rng(trial_seed).fork("model").origin());
    const TrainBudget budget{epochs, budget_patience};
    const TrainResult result = train(*model, data.train_aug, data.val, hp, budget, trial_seed);
    if (result.status != TrainStatus::completed)
      fail_training("trial aborted: " + result.diagnostic);
    if (!std::isfinite(result.val_auc_at_best))
      fail_training("trial produced an undefined validation AUC");
    return result.val_auc_at_best;
  };
  const HyperbandResult result =
      run_hyperband(space, plan, train_fn, seed, ledger_path, cfg.workers);
  if (result.status == HyperbandStatus::empty)
    fail_training("hyperband for " + to_string(view) + "/" + arch + ": every trial failed");
  return best_trial(result.ledger);
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void stage_ingest(const RunConfig& cfg) {
  if (cfg.manifest_path.empty()) fail_validation("config: manifest path is required");
  const CohortManifest manifest = CohortManifest::load(cfg.manifest_path);
  const ArtifactPaths paths(cfg);

  std::size_t sequences = 0;
  for (const auto& s : manifest.studies()) sequences += s.sequences.size();
  nlohmann::ordered_json report{
      {"n_studies", manifest.n_studies()},
      {"n_mra", manifest.count(Modality::mra)},
      {"n_standard_mri", manifest.count(Modality::standard_mri)},
      {"n_positive", manifest.positive_count()},
      {"n_sequences", sequences},
      {"provenance", provenance_stamp(cfg, {cfg.manifest_path})}};
  write_json_artifact(paths.manifest_report, report);
}

void stage_split(const RunConfig& cfg) {
  if (cfg.manifest_path.empty()) fail_validation("config: manifest path is required");
  // Shoulder-level split over the full manifest; modality filtering happens
  // in the training stages so a dual-modality shoulder can never straddle
  // partitions.
  const CohortManifest manifest = CohortManifest::load(cfg.manifest_path);
  const SplitAssignment split =
      stratified_split(manifest, cfg.split_ratios, Rng(cfg.seed).fork("split").origin());
  const LeakageReport leakage = validate_no_leakage(split, manifest);
  if (!leakage.pass()) fail_validation("stage_split: leakage check failed unexpectedly");

  const ArtifactPaths paths(cfg);
  nlohmann::ordered_json artifact{{"assignment", split.to_json()},
                                  {"leakage_violations", leakage.violations.size()},
                                  {"provenance", provenance_stamp(cfg, {cfg.manifest_path})}};
  write_json_artifact(paths.split, artifact);
}

void stage_tune(const RunConfig& cfg) {
  const ArtifactPaths paths(cfg);
  require_artifact(paths.split, "split");
  const CohortManifest manifest = load_modality_manifest(cfg);
  const SplitAssignment split = load_split(paths);
  PartitionSets sets = sets_from_split(split);
  sets.test.clear();  // the hold-out set is untouched during tuning

  const HyperbandPlan plan =
      cfg.hyperband_total_configs > 0
          ? plan_hyperband_for_configs(cfg.hyperband_r, cfg.hyperband_eta,
                                       cfg.hyperband_total_configs)
          : plan_hyperband(cfg.hyperband_r, cfg.hyperband_eta);

  for (View view : cfg.views) {
    CroppedCache cache;
    const ViewData data =
        prepare_view_data(cfg, manifest, sets, view, cfg.augment.multiplier, cache);
    for (const auto& arch : cfg.architectures) {
      const uint64_t seed =
          Rng(cfg.seed).fork("tune:" + to_string(view) + ":" + arch).origin();
      fs::create_directories(fs::path(paths.tune_ledger(view, arch)).parent_path());
      const TrialRecord best = tune_one(cfg, data, arch, view, cfg.space, plan,
                                        cfg.early_stop_patience,
                                        paths.tune_ledger(view, arch), seed);
      nlohmann::ordered_json artifact{
          {"view", to_string(view)},
          {"modality", to_string(cfg.modality)},
          {"architecture", arch},
          {"plan", plan.to_json()},
          {"trial", best.to_json()},
          {"provenance", provenance_stamp(cfg, {cfg.manifest_path, paths.split})}};
      write_json_artifact(paths.tune_best(view, arch), artifact);
    }
  }
}

void stage_cv(const RunConfig& cfg) {
  const ArtifactPaths paths(cfg);
  require_artifact(paths.split, "split");
  for (View view : cfg.views)
    for (const auto& arch : cfg.architectures)
      require_artifact(paths.tune_best(view, arch), "tune");

  const CohortManifest manifest = load_modality_manifest(cfg);
  const SplitAssignment split = load_split(paths);
  const PartitionSets sets = sets_from_split(split);

  // The recombined train+val pool, folded once and reused by every
  // architecture so the comparison sees identical partitions.
  std::vector<std::string> pool_ids;
  std::vector<StudyRecord> pool;
  for (const auto& study : manifest.studies()) {
    if (sets.train.count(study.shoulder_id) || sets.val.count(study.shoulder_id)) {
      pool.push_back(study);
      pool_ids.push_back(study.study_id);
    }
  }
  const FoldPlan plan = make_folds(pool, cfg.cv_folds, Rng(cfg.seed).fork("folds").origin());
  write_json_artifact(paths.folds,
                      nlohmann::ordered_json{
                          {"plan", plan.to_json()},
                          {"provenance", provenance_stamp(cfg, {cfg.manifest_path, paths.split})}});

  nlohmann::ordered_json results = nlohmann::ordered_json::array();
  for (View view : cfg.views) {
    CroppedCache cache;
    warm_cache(cfg, manifest.filter_studies(pool_ids), view, cache);
    for (const auto& arch : cfg.architectures) {
      const HyperParams hp = load_best_hp(paths, view, arch);
      const InitStrategy init = init_strategy_for(cfg, view);
      FoldTrainFn fold_fn = [&](int fold, const HyperParams& fold_hp, const TrainBudget& budget,
                                uint64_t fold_seed,
                                const std::vector<std::string>& train_shoulders,
                                const std::vector<std::string>& val_shoulders) {
        PartitionSets fold_sets;
        fold_sets.train.insert(train_shoulders.begin(), train_shoulders.end());
        fold_sets.val.insert(val_shoulders.begin(), val_shoulders.end());
        CroppedCache& shared = cache;  // pre-warmed: concurrent reads only
        const ViewData fold_data = prepare_view_data(cfg, manifest, fold_sets, view,
                                                     cfg.augment.multiplier, shared);
        auto model = build_scan_classifier(arch, fold_hp.dropout, init,
                                           Rng(fold_seed).fork("model").origin());
        const TrainResult result =
            train(*model, fold_data.train_aug, fold_data.val, fold_hp, budget, fold_seed);
        if (result.status != TrainStatus::completed)
          fail_training("cv fold " + std::to_string(fold) + " aborted: " + result.diagnostic);
        if (!std::isfinite(result.val_auc_at_best))
          fail_training("cv fold " + std::to_string(fold) + " has undefined AUC");
        return result.val_auc_at_best;
      };
      const CVResult cv = run_cv(pool, plan, view, cfg.modality, arch, hp,
                                 {cfg.cv_max_epochs, cfg.early_stop_patience},
                                 Rng(cfg.seed).fork("cv:" + to_string(view) + ":" + arch).origin(),
                                 fold_fn, cfg.workers);
      results.push_back(cv.to_json());
    }
  }
  write_json_artifact(paths.cv_results,
                      nlohmann::ordered_json{
                          {"results", std::move(results)},
                          {"fold_plan_hash", hex64(fnv1a64(plan.to_json().dump()))},
                          {"provenance", provenance_stamp(cfg, {cfg.manifest_path, paths.split})}});
}

void stage_select(const RunConfig& cfg) {
  const ArtifactPaths paths(cfg);
  require_artifact(paths.cv_results, "cv");
  const auto artifact = read_json_artifact(paths.cv_results);

  std::map<View, std::vector<CVResult>> by_view;
  for (const auto& row : artifact.at("results")) {
    const CVResult cv = CVResult::from_json(row);
    by_view[cv.view].push_back(cv);
  }

  nlohmann::ordered_json decisions = nlohmann::ordered_json::array();
  for (View view : cfg.views) {
    auto it = by_view.find(view);
    if (it == by_view.end())
      fail_validation("stage_select: cv results hold nothing for view " + to_string(view));
    decisions.push_back(select_architecture(it->second).to_json());
  }
  write_json_artifact(paths.selections,
                      nlohmann::ordered_json{
                          {"decisions", std::move(decisions)},
                          {"provenance", provenance_stamp(cfg, {paths.cv_results})}});
}

void stage_retrain(const RunConfig& cfg) {
  const ArtifactPaths paths(cfg);
  require_artifact(paths.split, "split");
  require_artifact(paths.selections, "select");

  const CohortManifest manifest = load_modality_manifest(cfg);
  const SplitAssignment split = load_split(paths);
  PartitionSets sets = sets_from_split(split);
  sets.test.clear();  // the hold-out partition stays untouched

  const auto selections = read_json_artifact(paths.selections);
  for (const auto& row : selections.at("decisions")) {
    const SelectionDecision decision = SelectionDecision::from_json(row);
    if (std::find(cfg.views.begin(), cfg.views.end(), decision.view) == cfg.views.end()) continue;
    require_artifact(paths.tune_best(decision.view, decision.architecture), "tune");
    const HyperParams hp = load_best_hp(paths, decision.view, decision.architecture);

    FinalTrainFn train_fn = [&](const SelectionDecision& d, const SplitAssignment&,
                                const HyperParams& final_hp, const TrainBudget& budget) {
      CroppedCache cache;
      const ViewData data =
          prepare_view_data(cfg, manifest, sets, d.view, cfg.augment.multiplier, cache);
      const InitStrategy init = init_strategy_for(cfg, d.view);
      const uint64_t seed = Rng(cfg.seed).fork("retrain:" + to_string(d.view)).origin();
      auto model = build_scan_classifier(d.architecture, final_hp.dropout, init,
                                         Rng(seed).fork("model").origin());

      fs::create_directories(fs::path(paths.history(d.view)).parent_path());
      std::ofstream history(paths.history(d.view));
      const TrainResult result =
          train(*model, data.train_aug, data.val, final_hp, budget, seed, {}, &history);
      if (result.status != TrainStatus::completed)
        fail_training("retrain for " + to_string(d.view) + " aborted: " + result.diagnostic);
      apply_best_weights(*model, result);

      const std::string ckpt = paths.bundle_checkpoint(d.view, d.architecture);
      nlohmann::ordered_json header = model->architecture_header();
      header["provenance"] = to_string(cfg.init);
      header["config_hash"] = cfg.config_hash();
      header["best_epoch"] = result.best_epoch;
      header["best_val_accuracy"] = result.best_val_accuracy;
      save_checkpoint(ckpt, header, model->state());

      write_json_artifact(paths.stats(d.view),
                          nlohmann::ordered_json{
                              {"view", to_string(d.view)},
                              {"stats", data.stats.to_json()},
                              {"provenance", provenance_stamp(cfg, {paths.split})}});

      ModelBundle bundle;
      bundle.provenance = cfg.init;
      bundle.checkpoint_path = ckpt;
      return bundle;
    };

    const ModelBundle bundle =
        retrain_final(decision, split, hp, {cfg.final_max_epochs, cfg.early_stop_patience},
                      train_fn);
    write_json_artifact(paths.bundle(decision.view),
                        nlohmann::ordered_json{
                            {"bundle", bundle.to_json()},
                            {"provenance", provenance_stamp(cfg, {paths.selections})}});
  }
}

namespace {

std::unique_ptr<ScanClassifier> load_bundle_model(const ModelBundle& bundle) {
  auto model = build_scan_classifier(bundle.architecture, bundle.dropout, {}, /*seed=*/0);
  restore_from_checkpoint(*model, bundle.checkpoint_path);
  return model;
}

}  // namespace

void stage_evaluate(const RunConfig& cfg) {
  const ArtifactPaths paths(cfg);
  require_artifact(paths.split, "split");
  for (View view : cfg.views) {
    require_artifact(paths.bundle(view), "retrain");
    require_artifact(paths.stats(view), "retrain");
  }

  const CohortManifest manifest = load_modality_manifest(cfg);
  const SplitAssignment split = load_split(paths);
  const PartitionSets sets = sets_from_split(split);

  // study -> view -> per-sequence probabilities
  std::map<std::string, std::map<View, std::vector<double>>> probs;
  std::map<std::string, int> label_of;
  std::vector<std::string> input_files{paths.split};

  for (View view : cfg.views) {
    const ModelBundle bundle =
        ModelBundle::from_json(read_json_artifact(paths.bundle(view)).at("bundle"));
    const StandardizationStats stats =
        StandardizationStats::from_json(read_json_artifact(paths.stats(view)).at("stats"));
    auto model = load_bundle_model(bundle);
    input_files.push_back(bundle.checkpoint_path);

    for (const auto& study : manifest.studies()) {
      const bool in_val = sets.val.count(study.shoulder_id) > 0;
      const bool in_test = sets.test.count(study.shoulder_id) > 0;
      if (!in_val && !in_test) continue;
      label_of[study.study_id] = study.label;
      for (const auto& seq : study.sequences) {
        if (seq.view != view) continue;
        CroppedCache scratch;
        const auto cropped = cropped_volume(cfg, seq.volume_path, scratch);
        const SequenceVolume standardized = apply_standardization(*cropped, stats);
        probs[study.study_id][view].push_back(model->forward(standardized, false, nullptr));
      }
    }
  }

  std::vector<ScanPrediction> val_preds, test_preds;
  for (const auto& study : manifest.studies()) {
    auto it = probs.find(study.study_id);
    if (it == probs.end()) continue;
    ScanPrediction pred = aggregate_scan(study.study_id, it->second, study.label);
    if (sets.val.count(study.shoulder_id)) val_preds.push_back(std::move(pred));
    else test_preds.push_back(std::move(pred));
  }
  if (val_preds.empty() || test_preds.empty())
    fail_validation("stage_evaluate: empty validation or test partition for this modality");

  std::vector<std::pair<double, int>> val_pairs;
  for (const auto& p : val_preds) val_pairs.emplace_back(p.ensemble_prob, p.label);
  const double threshold = calibrate_threshold(val_pairs);

  std::vector<double> test_scores;
  std::vector<int> test_labels;
  for (const auto& p : test_preds) {
    test_scores.push_back(p.ensemble_prob);
    test_labels.push_back(p.label);
  }
  const ConfusionMetrics metrics = confusion_metrics(test_scores, test_labels, threshold);
  const double auc = roc_auc(test_scores, test_labels);
  const BootstrapResult bootstrap =
      bootstrap_ci(test_scores, test_labels, threshold, cfg.bootstrap_iterations,
                   Rng(cfg.seed).fork("bootstrap").origin());

  nlohmann::ordered_json per_view_auc = nlohmann::ordered_json::object();
  for (View view : cfg.views) {
    std::vector<double> vs;
    std::vector<int> vl;
    for (const auto& p : test_preds) {
      auto vit = p.view_probs.find(view);
      if (vit == p.view_probs.end()) continue;
      vs.push_back(vit->second);
      vl.push_back(p.label);
    }
    per_view_auc[to_string(view)] = roc_auc(vs, vl);
  }

  // ROC curve points of the ensemble, one CSV row per threshold step.
  {
    fs::create_directories(fs::path(paths.roc_csv).parent_path());
    std::ofstream roc(paths.roc_csv, std::ios::binary);
    roc << "fpr,tpr\n";
    for (const auto& [fpr, tpr] : roc_points(test_scores, test_labels))
      roc << fpr << "," << tpr << "\n";
  }

  nlohmann::ordered_json val_json = nlohmann::ordered_json::array();
  for (const auto& p : val_preds) val_json.push_back(p.to_json());
  nlohmann::ordered_json test_json = nlohmann::ordered_json::array();
  for (const auto& p : test_preds) test_json.push_back(p.to_json());

  nlohmann::ordered_json report{
      {"dataset_tag", "holdout_test"},
      {"modality", to_string(cfg.modality)},
      {"threshold", threshold},
      {"counts",
       {{"tp", metrics.counts.tp},
        {"fn", metrics.counts.fn},
        {"tn", metrics.counts.tn},
        {"fp", metrics.counts.fp}}},
      {"accuracy", metrics.accuracy},
      {"sensitivity", metrics.sensitivity},
      {"specificity", metrics.specificity},
      {"auc", auc},
      {"per_view_auc", std::move(per_view_auc)},
      {"bootstrap", bootstrap.to_json()},
      {"val_predictions", std::move(val_json)},
      {"test_predictions", std::move(test_json)},
      {"provenance", provenance_stamp(cfg, input_files)}};
  write_json_artifact(paths.evaluation_report, report);
}

void stage_gradcam(const RunConfig& cfg, const GradcamRequest& req) {
  const ArtifactPaths paths(cfg);
  require_artifact(paths.bundle(req.view), "retrain");
  require_artifact(paths.stats(req.view), "retrain");
  if (req.out_path.empty()) fail_validation("gradcam: output path is required");

  const CohortManifest manifest = load_modality_manifest(cfg);
  const StudyRecord* study = manifest.find_study(req.study_id);
  if (!study) fail_validation("gradcam: unknown study \"" + req.study_id + "\"");
  const SequenceRef* seq = nullptr;
  for (const auto& s : study->sequences)
    if (s.view == req.view) {
      seq = &s;
      break;
    }
  if (!seq)
    fail_validation("gradcam: study \"" + req.study_id + "\" has no " + to_string(req.view) +
                    " sequence");

  const ModelBundle bundle =
      ModelBundle::from_json(read_json_artifact(paths.bundle(req.view)).at("bundle"));
  if (!architecture_is_slice_model(bundle.architecture))
    fail_validation("gradcam supports slice models; bundle holds " + bundle.architecture);
  const StandardizationStats stats =
      StandardizationStats::from_json(read_json_artifact(paths.stats(req.view)).at("stats"));

  auto classifier = load_bundle_model(bundle);
  auto* model = dynamic_cast<SliceModel*>(classifier.get());

  CroppedCache scratch;
  const auto cropped = cropped_volume(cfg, seq->volume_path, scratch);
  const SequenceVolume standardized = apply_standardization(*cropped, stats);

  const Heatmap heat = gradcam(*model, standardized, req.slice);

  Tensor slice_image({cfg.crop_size, cfg.crop_size});
  const double* src = standardized.voxels.ptr() +
                      static_cast<std::size_t>(req.slice) * cfg.crop_size * cfg.crop_size;
  std::copy(src, src + slice_image.size(), slice_image.data.begin());
  overlay(heat, slice_image, req.out_path);

  nlohmann::ordered_json meta = heat.metadata();
  meta["study_id"] = req.study_id;
  meta["view"] = to_string(req.view);
  meta["probability"] = model->forward(standardized, false, nullptr);
  meta["provenance"] = provenance_stamp(cfg, {bundle.checkpoint_path});
  write_json_artifact(fs::path(req.out_path).replace_extension(".json").string(), meta);
}

void stage_pretrain(const RunConfig& cfg, const PretrainProfile& profile) {
  if (profile.corpus_manifest.empty() || profile.screen_manifest.empty())
    fail_validation("pretrain profile needs corpus_manifest and screen_manifest");
  const ArtifactPaths paths(cfg);
  const CohortManifest corpus = CohortManifest::load(profile.corpus_manifest);
  const CohortManifest screen = CohortManifest::load(profile.screen_manifest);

  const long n = static_cast<long>(corpus.shoulders().size());
  if (profile.dev_set_size < 1 || profile.dev_set_size >= n)
    fail_validation("pretrain: dev_set_size must lie in [1, corpus size)");

  // Carve the development set out of the corpus by stratified sampling.
  const double dev_frac = static_cast<double>(profile.dev_set_size) / static_cast<double>(n);
  const SplitAssignment carve = stratified_split(
      corpus, {1.0 - dev_frac, dev_frac, 0.0}, Rng(cfg.seed).fork("dev-carve").origin());
  PartitionSets sets;
  for (const auto& [shoulder, partition] : carve.partition_of) {
    if (partition == Partition::train) sets.train.insert(shoulder);
    else if (partition == Partition::val) sets.val.insert(shoulder);
  }

  SearchSpace space = cfg.space;
  space.cosine_t_max = profile.cosine_t_max;
  const HyperbandPlan plan =
      cfg.hyperband_total_configs > 0
          ? plan_hyperband_for_configs(cfg.hyperband_r, cfg.hyperband_eta,
                                       cfg.hyperband_total_configs)
          : plan_hyperband(cfg.hyperband_r, cfg.hyperband_eta);

  nlohmann::ordered_json screen_rows = nlohmann::ordered_json::array();
  std::map<View, std::vector<std::pair<std::string, double>>> screen_by_view;

  for (View view : cfg.views) {
    CroppedCache cache;
    const ViewData data =
        prepare_view_data(cfg, corpus, sets, view, profile.augment_multiplier, cache);

    PartitionSets screen_sets;
    for (const auto& info : screen.shoulders()) screen_sets.test.insert(info.shoulder_id);

    for (const auto& arch : cfg.architectures) {
      const uint64_t seed =
          Rng(cfg.seed).fork("pretrain:" + to_string(view) + ":" + arch).origin();
      fs::create_directories(fs::path(paths.pretrain_checkpoint(view, arch)).parent_path());
      const std::string ledger =
          (fs::path(cfg.out_dir) / "pretrain" / (to_string(view) + "_" + arch + ".jsonl"))
              .string();
      const TrialRecord best =
          tune_one(cfg, data, arch, view, space, plan, cfg.early_stop_patience, ledger, seed);

      // Re-run the winning trial deterministically to materialize its weights.
      auto model = build_scan_classifier(arch, best.hp.dropout, init_strategy_for(cfg, view),
                                         Rng(best.seed).fork("model").origin());
      const TrainResult result = train(*model, data.train_aug, data.val, best.hp,
                                       {best.epochs, cfg.early_stop_patience}, best.seed);
      apply_best_weights(*model, result);

      // Screen inference: standardize with the corpus-fitted stats.
      CroppedCache screen_cache;
      std::vector<double> scores;
      std::vector<int> labels;
      for (const auto& study : screen.studies()) {
        for (const auto& seq : study.sequences) {
          if (seq.view != view) continue;
          const auto cropped = cropped_volume(cfg, seq.volume_path, screen_cache);
          const SequenceVolume standardized =
              apply_standardization(*cropped, data.stats, /*allow_global_fallback=*/true);
          scores.push_back(model->forward(standardized, false, nullptr));
          labels.push_back(study.label);
        }
      }
      const double screen_auc = roc_auc(scores, labels);

      nlohmann::ordered_json header = model->architecture_header();
      header["provenance"] = "domain_pretrained";
      header["config_hash"] = cfg.config_hash();
      header["screen_auc"] = screen_auc;
      save_checkpoint(paths.pretrain_checkpoint(view, arch), header, model->state());

      screen_rows.push_back({{"view", to_string(view)},
                             {"architecture", arch},
                             {"dev_auc", best.objective},
                             {"screen_auc", screen_auc},
                             {"checkpoint", paths.pretrain_checkpoint(view, arch)}});
      screen_by_view[view].emplace_back(arch, screen_auc);
    }
  }

  nlohmann::ordered_json top_k = nlohmann::ordered_json::object();
  for (auto& [view, entries] : screen_by_view) {
    const int k = std::min<int>(3, static_cast<int>(entries.size()));
    top_k[to_string(view)] = select_top_k(entries, k);
  }

  write_json_artifact(
      paths.pretrain_screen,
      nlohmann::ordered_json{
          {"screen", std::move(screen_rows)},
          {"top_k", std::move(top_k)},
          {"effective_config", effective_training_config(cfg, true, &profile)},
          {"provenance",
           provenance_stamp(cfg, {profile.corpus_manifest, profile.screen_manifest})}});
}

void run_stage(const RunConfig& cfg, const std::string& stage) {
  if (stage == "ingest") return stage_ingest(cfg);
  if (stage == "split") return stage_split(cfg);
  if (stage == "tune") return stage_tune(cfg);
  if (stage == "cv") return stage_cv(cfg);
  if (stage == "select") return stage_select(cfg);
  if (stage == "retrain") return stage_retrain(cfg);
  if (stage == "evaluate") return stage_evaluate(cfg);
  fail_validation("unknown stage \"" + stage +
                  "\" (expected ingest|split|tune|cv|select|retrain|evaluate)");
}

}  // namespace mripipe
