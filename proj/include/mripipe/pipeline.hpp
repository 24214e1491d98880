#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "mripipe/metrics.hpp"
#include "mripipe/preprocess.hpp"
#include "mripipe/selection.hpp"
#include "mripipe/synthetic.hpp"
#include "mripipe/tuning.hpp"

namespace mripipe {

/// Declarative run configuration; CLI flags override file values.
struct RunConfig {
  std::string manifest_path;
  Modality modality = Modality::standard_mri;
  std::vector<View> views{View::sagittal, View::axial, View::coronal};
  std::string out_dir = "out";
  uint64_t seed = 0;
  int workers = 2;

  std::array<double, 3> split_ratios{0.70, 0.10, 0.20};

  int resize_target = 400;
  int crop_size = 224;
  AugmentPolicy augment;  // multiplier 10 by default (fine-tune mode)

  std::vector<std::string> architectures{"tiny-test-cnn"};
  InitKind init = InitKind::random;
  std::map<View, std::string> pretrained_checkpoints;  // required for pretrained init

  SearchSpace space;
  int hyperband_r = 20;
  int hyperband_eta = 3;
  int hyperband_total_configs = 0;  // 0: one bracket cycle
  int early_stop_patience = 10;
  int cv_folds = 8;
  int cv_max_epochs = 30;
  int final_max_epochs = 100;
  int bootstrap_iterations = 1000;

  nlohmann::ordered_json to_json() const;
  static RunConfig from_json(const nlohmann::ordered_json& j);
  static RunConfig load(const std::string& path);
  std::string config_hash() const;
};

/// Pretraining profile: the external-corpus mode. Only the documented fields
/// differ from fine-tune behavior (see effective_training_config).
struct PretrainProfile {
  std::string corpus_manifest;  // cohort-schema manifest of the public corpus
  std::string screen_manifest;  // held-out screen set (the corpus release's validation split)
  std::string label_name = "abnormal";
  int dev_set_size = 120;
  int augment_multiplier = 5;
  double cosine_t_max = 5.0;

  nlohmann::ordered_json to_json() const;
  static PretrainProfile from_json(const nlohmann::ordered_json& j);
  static PretrainProfile load(const std::string& path);
};

/// The mode-effective training knobs; the pretrain profile differs from
/// fine-tune in exactly: augment multiplier, cosine T_max, objective dataset,
/// and label field.
nlohmann::ordered_json effective_training_config(const RunConfig& cfg, bool pretrain_mode,
                                                 const PretrainProfile* profile = nullptr);

// Stage artifact locations under cfg.out_dir.
struct ArtifactPaths {
  explicit ArtifactPaths(const RunConfig& cfg);
  std::string out_dir;
  std::string manifest_report;
  std::string split;
  std::string folds;
  std::string cv_results;
  std::string selections;
  std::string evaluation_report;
  std::string roc_csv;
  std::string tune_ledger(View v, const std::string& arch) const;
  std::string tune_best(View v, const std::string& arch) const;
  std::string bundle(View v) const;
  std::string bundle_checkpoint(View v, const std::string& arch) const;
  std::string stats(View v) const;
  std::string history(View v) const;
  std::string pretrain_checkpoint(View v, const std::string& arch) const;
  std::string pretrain_screen;
};

void stage_ingest(const RunConfig& cfg);
void stage_split(const RunConfig& cfg);
void stage_tune(const RunConfig& cfg);
void stage_cv(const RunConfig& cfg);
void stage_select(const RunConfig& cfg);
void stage_retrain(const RunConfig& cfg);
void stage_evaluate(const RunConfig& cfg);

struct GradcamRequest {
  std::string study_id;
  View view = View::axial;
  int slice = 0;
  std::string out_path;  // .bmp; metadata lands beside it as .json
};
void stage_gradcam(const RunConfig& cfg, const GradcamRequest& req);

void stage_pretrain(const RunConfig& cfg, const PretrainProfile& profile);

/// Dispatch by stage name with dependency checks; unknown names are
/// validation errors, missing upstream artifacts are dependency errors.
void run_stage(const RunConfig& cfg, const std::string& stage);

/// Provenance stamp embedded in every JSON artifact.
nlohmann::ordered_json provenance_stamp(const RunConfig& cfg,
                                        const std::vector<std::string>& input_paths);

void write_json_artifact(const std::string& path, const nlohmann::ordered_json& payload);
nlohmann::ordered_json read_json_artifact(const std::string& path);

/// Requires `path` to exist, else a dependency error naming `producer_stage`.
void require_artifact(const std::string& path, const std::string& producer_stage);

}  // namespace mripipe
