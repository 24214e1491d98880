#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "mripipe/pipeline.hpp"

using namespace mripipe;

namespace {

struct CommonOpts {
  std::string config;
  std::string manifest;
  std::string out;
  std::string modality;
  long long seed = -1;
  int workers = 0;
};

/// File values first, then explicit flags on top.
RunConfig resolve_config(const CommonOpts& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (!o.manifest.empty()) cfg.manifest_path = o.manifest;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
  if (o.workers > 0) cfg.workers = o.workers;
  if (!o.modality.empty()) cfg.modality = modality_from_string(o.modality);
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config, "run configuration JSON");
  cmd->add_option("--manifest", o.manifest, "override: cohort manifest CSV");
  cmd->add_option("--out", o.out, "override: output directory");
  cmd->add_option("--seed", o.seed, "override: master seed");
  cmd->add_option("--workers", o.workers, "override: worker threads");
  cmd->add_option("--modality", o.modality, "override: standard_mri|mra");
}

int exit_code_for(const PipelineError& e) {
  switch (e.kind()) {
    case PipelineError::Kind::validation: return 2;
    case PipelineError::Kind::dependency: return 3;
    case PipelineError::Kind::training: return 4;
    case PipelineError::Kind::internal: return 4;
  }
  return 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"manifest-driven training, selection, ensembling, and evaluation pipeline "
               "for volumetric scan classifiers"};
  app.require_subcommand(1);

  CommonOpts opts;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort with planted lesions");
  std::string synth_spec_path, synth_out;
  long long synth_seed = -1;
  int synth_n = 0;
  double synth_pos = 0.0;
  synth->add_option("--spec", synth_spec_path, "SyntheticSpec JSON file");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "override: generator seed");
  synth->add_option("--n-studies", synth_n, "override: number of studies");
  synth->add_option("--positive-fraction", synth_pos, "override: positive fraction");

  // pipeline stages
  auto* ingest = app.add_subcommand("ingest", "validate a manifest and report counts");
  auto* split = app.add_subcommand("split", "stratified shoulder-level train/val/test split");
  auto* tune = app.add_subcommand("tune", "hyperband hyperparameter search per view");
  auto* cv = app.add_subcommand("cv", "stratified k-fold stability cross-validation");
  auto* select = app.add_subcommand("select", "pick the most stable architecture per view");
  auto* retrain = app.add_subcommand("retrain", "re-train selections on the initial split");
  auto* evaluate = app.add_subcommand("evaluate", "calibrate, ensemble, and score the test set");
  for (auto* cmd : {ingest, split, tune, cv, select, retrain, evaluate}) add_common(cmd, opts);

  // gradcam
  auto* gradcam_cmd = app.add_subcommand("gradcam", "heatmap overlay for one study slice");
  add_common(gradcam_cmd, opts);
  GradcamRequest grad_req;
  std::string grad_view = "axial";
  gradcam_cmd->add_option("--study", grad_req.study_id, "study id")->required();
  gradcam_cmd->add_option("--view", grad_view, "sagittal|axial|coronal");
  gradcam_cmd->add_option("--slice", grad_req.slice, "slice index");
  gradcam_cmd->add_option("--out-image", grad_req.out_path, "output image path (.bmp)")
      ->required();

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "external-corpus pretraining mode");
  add_common(pretrain_cmd, opts);
  std::string profile_path;
  pretrain_cmd->add_option("--profile", profile_path, "PretrainProfile JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed()) {
      SyntheticSpec spec;
      if (!synth_spec_path.empty()) {
        std::ifstream in(synth_spec_path);
        if (!in) fail_validation("cannot open spec file: " + synth_spec_path);
        nlohmann::ordered_json j;
        in >> j;
        spec = SyntheticSpec::from_json(j);
      }
      if (synth_seed >= 0) spec.seed = static_cast<uint64_t>(synth_seed);
      if (synth_n > 0) spec.n_studies = synth_n;
      if (synth_pos > 0) spec.positive_fraction = synth_pos;
      const auto manifest = generate_synthetic(spec, synth_out);
      std::printf("wrote %zu studies (%zu positive) to %s\n", manifest.n_studies(),
                  manifest.positive_count(), synth_out.c_str());
      return 0;
    }
    if (gradcam_cmd->parsed()) {
      grad_req.view = view_from_string(grad_view);
      stage_gradcam(resolve_config(opts), grad_req);
      std::printf("wrote %s\n", grad_req.out_path.c_str());
      return 0;
    }
    if (pretrain_cmd->parsed()) {
      stage_pretrain(resolve_config(opts), PretrainProfile::load(profile_path));
      return 0;
    }
    for (auto* cmd : {ingest, split, tune, cv, select, retrain, evaluate}) {
      if (cmd->parsed()) {
        run_stage(resolve_config(opts), cmd->get_name());
        return 0;
      }
    }
    std::fprintf(stderr, "no subcommand selected\n");
    return 2;
  } catch (const PipelineError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 4;
  }
}
