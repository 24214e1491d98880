#include "mripipe/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mripipe {

std::string to_string(InitKind k) {
  switch (k) {
    case InitKind::generic_pretrained: return "generic_pretrained";
    case InitKind::domain_pretrained: return "domain_pretrained";
    case InitKind::random: return "random";
  }
  return "?";
}

InitKind init_kind_from_string(const std::string& s) {
  if (s == "generic_pretrained") return InitKind::generic_pretrained;
  if (s == "domain_pretrained") return InitKind::domain_pretrained;
  if (s == "random") return InitKind::random;
  fail_validation("unknown init kind \"" + s + "\"");
}

void ScanClassifier::zero_grad() {
  for (auto& p : parameters()) p.grad->zero();
}

std::vector<nn::ParamView> ScanClassifier::state() {
  auto out = parameters();
  for (auto& b : buffers()) out.push_back(b);
  return out;
}

std::vector<Tensor> ScanClassifier::snapshot_weights() {
  std::vector<Tensor> snap;
  for (auto& p : state()) snap.push_back(*p.value);
  return snap;
}

void ScanClassifier::restore_weights(const std::vector<Tensor>& snapshot) {
  auto params = state();
  if (params.size() != snapshot.size())
    fail_validation("restore_weights: snapshot has " + std::to_string(snapshot.size()) +
                    " tensors, model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value->shape != snapshot[i].shape)
      fail_validation("restore_weights: shape mismatch at " + params[i].name);
    *params[i].value = snapshot[i];
  }
}

// ---------------------------------------------------------------------------
// SliceModel
// ---------------------------------------------------------------------------

SliceModel::SliceModel(std::unique_ptr<FeatureExtractor> backbone, double dropout_rate,
                       uint64_t seed)
    : backbone_(std::move(backbone)), dropout_rate_(dropout_rate), seed_(seed),
      head_(backbone_->spec().feature_dim, 1) {
  if (dropout_rate < 0.0 || dropout_rate > 0.5)
    fail_validation("SliceModel: dropout must lie in [0, 0.5], got " +
                    std::to_string(dropout_rate));
  Rng r = Rng(seed).fork("head");
  head_.init(r);
}

void SliceModel::reinit_head() {
  Rng r = Rng(seed_).fork("head-reinit");
  head_.init(r);
}

double SliceModel::forward(const SequenceVolume& v, bool training, Rng* dropout_rng) {
  if (v.stage != Stage::standardized && v.stage != Stage::augmented)
    fail_validation("SliceModel::forward: expected a standardized volume, got stage " +
                    to_string(v.stage));
  backbone_->forward(v.voxels, training, features_);
  const int n = features_.dim(0);
  const int d = backbone_->spec().feature_dim;
  n_slices_ = n;
  training_mode_ = training;

  // Elementwise max across slices; ties keep the earliest slice so backward
  // routing is deterministic.
  pooled_ = Tensor({d});
  argmax_slice_.assign(static_cast<std::size_t>(d), 0);
  for (int i = 0; i < d; ++i) {
    double best = features_.at(0, i);
    int best_s = 0;
    for (int s = 1; s < n; ++s) {
      if (features_.at(s, i) > best) {
        best = features_.at(s, i);
        best_s = s;
      }
    }
    pooled_.at(i) = best;
    argmax_slice_[static_cast<std::size_t>(i)] = best_s;
  }

  dropout_mask_ = Tensor({d});
  if (training && dropout_rate_ > 0.0) {
    if (!dropout_rng) fail_validation("SliceModel::forward: training dropout needs an rng");
    const double keep = 1.0 - dropout_rate_;
    for (int i = 0; i < d; ++i)
      dropout_mask_.at(i) = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
  } else {
    std::fill(dropout_mask_.data.begin(), dropout_mask_.data.end(), 1.0);
  }

  std::vector<double> dropped(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) dropped[static_cast<std::size_t>(i)] = pooled_.at(i) * dropout_mask_.at(i);
  head_.forward(dropped.data(), &logit_);
  prob_ = nn::sigmoid(logit_);
  return prob_;
}

void SliceModel::backward(double dloss_dlogit) {
  const int d = backbone_->spec().feature_dim;
  std::vector<double> dropped(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) dropped[static_cast<std::size_t>(i)] = pooled_.at(i) * dropout_mask_.at(i);
  std::vector<double> ddropped(static_cast<std::size_t>(d));
  const double g = dloss_dlogit;
  head_.backward(dropped.data(), &g, ddropped.data());

  Tensor dfeatures({n_slices_, d});
  for (int i = 0; i < d; ++i) {
    const double dv = ddropped[static_cast<std::size_t>(i)] * dropout_mask_.at(i);
    dfeatures.at(argmax_slice_[static_cast<std::size_t>(i)], i) = dv;
  }
  backbone_->backward(dfeatures);
}

std::vector<nn::ParamView> SliceModel::parameters() {
  auto out = backbone_->parameters();
  head_.collect(out, "head");
  return out;
}

nlohmann::ordered_json SliceModel::architecture_header() const {
  return nlohmann::ordered_json{{"kind", "slice_model"},
                                {"backbone", backbone_->spec().identifier},
                                {"feature_dim", backbone_->spec().feature_dim},
                                {"family", to_string(backbone_->spec().family)},
                                {"dropout", dropout_rate_}};
}

// ---------------------------------------------------------------------------
// Volume3DModel
// ---------------------------------------------------------------------------

struct Volume3DModel::Cache {
  Tensor input;  // (1, D, 224, 224)
  std::vector<Tensor> conv_out, relu_out, bn_out, pool_out;
  std::vector<nn::BatchNorm3d::Cache> bnc;
  std::vector<nn::MaxPool3d::Cache> poolc;
  Tensor pooled;  // (256, 1, 6, 6)
  std::vector<double> flat, h1, h1r, h2, h2r, h2d, dropout_mask;
  bool training = false;
};

Volume3DModel::~Volume3DModel() = default;

Volume3DModel::Volume3DModel(double dropout_rate, uint64_t seed, int fc_width)
    : dropout_rate_(dropout_rate), seed_(seed), fc_width_(fc_width),
      fc1_(256 * 6 * 6, fc_width), fc2_(fc_width, fc_width), fc3_(fc_width, 1) {
  if (dropout_rate < 0.0 || dropout_rate > 0.5)
    fail_validation("Volume3DModel: dropout must lie in [0, 0.5], got " +
                    std::to_string(dropout_rate));
  const auto ch = conv_channels();
  // Spatial geometry mirrors the 2D AlexNet stage layout; depth kernels stay
  // at 3 with stride 1 so pooling alone shrinks the slice axis.
  convs_.emplace_back(1, ch[0], std::array<int, 3>{3, 11, 11}, std::array<int, 3>{1, 4, 4},
                      std::array<int, 3>{1, 2, 2});
  convs_.emplace_back(ch[0], ch[1], std::array<int, 3>{3, 5, 5}, std::array<int, 3>{1, 1, 1},
                      std::array<int, 3>{1, 2, 2});
  convs_.emplace_back(ch[1], ch[2], std::array<int, 3>{3, 3, 3}, std::array<int, 3>{1, 1, 1},
                      std::array<int, 3>{1, 1, 1});
  convs_.emplace_back(ch[2], ch[3], std::array<int, 3>{3, 3, 3}, std::array<int, 3>{1, 1, 1},
                      std::array<int, 3>{1, 1, 1});
  convs_.emplace_back(ch[3], ch[4], std::array<int, 3>{3, 3, 3}, std::array<int, 3>{1, 1, 1},
                      std::array<int, 3>{1, 1, 1});
  for (int c : ch) norms_.emplace_back(c);

  Rng root(seed);
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    Rng r = root.fork("conv" + std::to_string(i));
    convs_[i].init(r);
  }
  {
    Rng r = root.fork("fc1");
    fc1_.init(r);
  }
  {
    Rng r = root.fork("fc2");
    fc2_.init(r);
  }
  {
    Rng r = root.fork("fc3");
    fc3_.init(r);
  }
  cache_ = std::make_unique<Cache>();
}

int Volume3DModel::min_slices() {
  // Three 3x3x3/stride-2 max pools must each see depth >= 3.
  return 15;
}

long Volume3DModel::classifier_parameter_count() const {
  long count = 0;
  for (const auto* fc : {&fc1_, &fc2_, &fc3_})
    count += static_cast<long>(fc->w.size()) + static_cast<long>(fc->b.size());
  return count;
}

double Volume3DModel::forward(const SequenceVolume& v, bool training, Rng* dropout_rng) {
  if (v.stage != Stage::standardized && v.stage != Stage::augmented)
    fail_validation("Volume3DModel::forward: expected a standardized volume, got stage " +
                    to_string(v.stage));
  const int depth = v.n_slices();
  if (v.height() != kSliceSide || v.width() != kSliceSide)
    fail_validation("Volume3DModel::forward: expected 224x224 slices");
  if (depth < min_slices())
    fail_validation("Volume3DModel::forward: needs at least " + std::to_string(min_slices()) +
                    " slices for the three stride-2 depth pools, got " + std::to_string(depth));

  Cache& c = *cache_;
  c.training = training;
  c.input = Tensor({1, depth, kSliceSide, kSliceSide});
  std::copy(v.voxels.data.begin(), v.voxels.data.end(), c.input.data.begin());

  c.conv_out.resize(convs_.size());
  c.relu_out.resize(convs_.size());
  c.bn_out.resize(convs_.size());
  c.pool_out.resize(convs_.size());
  c.bnc.resize(convs_.size());
  c.poolc.resize(convs_.size());

  const Tensor* cur = &c.input;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].forward(*cur, c.conv_out[i]);
    nn::relu_forward(c.conv_out[i], c.relu_out[i]);
    norms_[i].forward(c.relu_out[i], c.bn_out[i], training, c.bnc[i]);
    if (i == 0 || i == 1 || i == 4) {
      pool_.forward(c.bn_out[i], c.pool_out[i], c.poolc[i]);
      cur = &c.pool_out[i];
    } else {
      cur = &c.bn_out[i];
    }
  }
  head_pool_.forward(*cur, c.pooled);

  c.flat.assign(c.pooled.data.begin(), c.pooled.data.end());
  c.h1.assign(static_cast<std::size_t>(fc_width_), 0.0);
  fc1_.forward(c.flat.data(), c.h1.data());
  c.h1r.resize(c.h1.size());
  for (std::size_t i = 0; i < c.h1.size(); ++i) c.h1r[i] = nn::relu(c.h1[i]);
  c.h2.assign(static_cast<std::size_t>(fc_width_), 0.0);
  fc2_.forward(c.h1r.data(), c.h2.data());
  c.h2r.resize(c.h2.size());
  for (std::size_t i = 0; i < c.h2.size(); ++i) c.h2r[i] = nn::relu(c.h2[i]);

  c.dropout_mask.assign(c.h2r.size(), 1.0);
  if (training && dropout_rate_ > 0.0) {
    if (!dropout_rng) fail_validation("Volume3DModel::forward: training dropout needs an rng");
    const double keep = 1.0 - dropout_rate_;
    for (auto& m : c.dropout_mask) m = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
  }
  c.h2d.resize(c.h2r.size());
  for (std::size_t i = 0; i < c.h2r.size(); ++i) c.h2d[i] = c.h2r[i] * c.dropout_mask[i];

  fc3_.forward(c.h2d.data(), &logit_);
  return nn::sigmoid(logit_);
}

double Volume3DModel::head_forward_from_cache() const {
  const Cache& c = *cache_;
  std::vector<double> h1(static_cast<std::size_t>(fc_width_));
  fc1_.forward(c.flat.data(), h1.data());
  for (auto& x : h1) x = nn::relu(x);
  std::vector<double> h2(static_cast<std::size_t>(fc_width_));
  fc2_.forward(h1.data(), h2.data());
  for (std::size_t i = 0; i < h2.size(); ++i) h2[i] = nn::relu(h2[i]) * c.dropout_mask[i];
  double logit = 0.0;
  fc3_.forward(h2.data(), &logit);
  return nn::sigmoid(logit);
}

void Volume3DModel::backward(double dloss_dlogit, bool through_convs) {
  Cache& c = *cache_;
  std::vector<double> dh2d(c.h2d.size());
  fc3_.backward(c.h2d.data(), &dloss_dlogit, dh2d.data());
  std::vector<double> dh2(c.h2.size());
  for (std::size_t i = 0; i < dh2.size(); ++i)
    dh2[i] = c.h2[i] > 0 ? dh2d[i] * c.dropout_mask[i] : 0.0;
  std::vector<double> dh1r(c.h1r.size());
  fc2_.backward(c.h1r.data(), dh2.data(), dh1r.data());
  std::vector<double> dh1(c.h1.size());
  for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] = c.h1[i] > 0 ? dh1r[i] : 0.0;
  std::vector<double> dflat(c.flat.size());
  fc1_.backward(c.flat.data(), dh1.data(), dflat.data());
  if (!through_convs) return;

  Tensor dpooled(c.pooled.shape);
  std::copy(dflat.begin(), dflat.end(), dpooled.data.begin());
  const Tensor& head_in = c.pool_out[4];
  Tensor dcur;
  head_pool_.backward(head_in, dpooled, dcur);

  for (std::size_t i = convs_.size(); i-- > 0;) {
    if (i == 0 || i == 1 || i == 4) {
      Tensor dbn;
      pool_.backward(c.bn_out[i], dcur, c.poolc[i], dbn);
      dcur = std::move(dbn);
    }
    Tensor drelu;
    norms_[i].backward(dcur, c.bnc[i], drelu);
    Tensor dconv;
    nn::relu_backward(c.conv_out[i], drelu, dconv);
    const Tensor& input = i == 0 ? c.input
                          : ((i == 1 || i == 2) ? (i == 1 ? c.pool_out[0] : c.pool_out[1])
                                                : c.bn_out[i - 1]);
    if (i == 0) {
      convs_[i].backward(input, dconv, nullptr);
    } else {
      Tensor dx;
      convs_[i].backward(input, dconv, &dx);
      dcur = std::move(dx);
    }
  }
}

std::vector<nn::ParamView> Volume3DModel::parameters() {
  std::vector<nn::ParamView> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect(out, "conv" + std::to_string(i));
    norms_[i].collect(out, "bn" + std::to_string(i));
  }
  fc1_.collect(out, "classifier.fc1");
  fc2_.collect(out, "classifier.fc2");
  fc3_.collect(out, "classifier.fc3");
  return out;
}

std::vector<nn::ParamView> Volume3DModel::buffers() {
  std::vector<nn::ParamView> out;
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    out.push_back({"bn" + std::to_string(i) + ".running_mean", &norms_[i].running_mean, nullptr});
    out.push_back({"bn" + std::to_string(i) + ".running_var", &norms_[i].running_var, nullptr});
  }
  return out;
}

nlohmann::ordered_json Volume3DModel::architecture_header() const {
  return nlohmann::ordered_json{{"kind", "volume3d"},
                                {"conv_channels", conv_channels()},
                                {"fc_width", fc_width_},
                                {"dropout", dropout_rate_}};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'M', 'P', 'C', 'K', '0', '0', '1', '\n'};
}

void save_checkpoint(const std::string& path, const nlohmann::ordered_json& header_in,
                     const std::vector<nn::ParamView>& params) {
  nlohmann::ordered_json header = header_in;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  uint64_t offset = 0;
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name}, {"shape", p.value->shape}, {"offset", offset}});
    offset += p.value->size();
  }
  header["tensors"] = std::move(tensors);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail_validation("save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& p : params)
    out.write(reinterpret_cast<const char*>(p.value->ptr()),
              static_cast<std::streamsize>(p.value->size() * sizeof(double)));
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    fail_validation("load_checkpoint: " + path + " is not a checkpoint file");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));

  CheckpointData data;
  data.header = nlohmann::ordered_json::parse(header_str);
  for (const auto& t : data.header.at("tensors")) {
    Tensor tensor(t.at("shape").get<std::vector<int>>());
    in.read(reinterpret_cast<char*>(tensor.ptr()),
            static_cast<std::streamsize>(tensor.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != tensor.size() * sizeof(double))
      fail_validation("load_checkpoint: truncated blob in " + path);
    data.tensors.emplace(t.at("name").get<std::string>(), std::move(tensor));
  }
  return data;
}

nlohmann::ordered_json checkpoint_header_for(const SliceModel& model, InitKind provenance,
                                             const std::string& config_hash) {
  nlohmann::ordered_json h = model.architecture_header();
  h["provenance"] = to_string(provenance);
  h["config_hash"] = config_hash;
  return h;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

std::unique_ptr<SliceModel> build_slice_model(const BackboneSpec& spec, double dropout,
                                              const InitStrategy& init, uint64_t seed) {
  Rng root(seed);
  Rng backbone_rng = root.fork("backbone");
  auto backbone = build_backbone(spec, backbone_rng);
  auto model = std::make_unique<SliceModel>(std::move(backbone), dropout, seed);
  if (init.kind != InitKind::random) {
    if (init.checkpoint_path.empty())
      fail_validation("build_slice_model: pretrained init needs a checkpoint path");
    load_pretrained(*model, init.checkpoint_path, init.kind);
  }
  return model;
}

void load_pretrained(SliceModel& model, const std::string& checkpoint_path, InitKind kind) {
  const CheckpointData data = load_checkpoint(checkpoint_path);
  const auto& header = data.header;
  const std::string ckpt_backbone = header.value("backbone", "");
  const int ckpt_dim = header.value("feature_dim", -1);
  if (ckpt_backbone != model.backbone().spec().identifier)
    fail_validation("load_pretrained: checkpoint backbone \"" + ckpt_backbone +
                    "\" does not match model backbone \"" + model.backbone().spec().identifier +
                    "\"");
  if (ckpt_dim != model.backbone().spec().feature_dim)
    fail_validation("load_pretrained: checkpoint feature_dim " + std::to_string(ckpt_dim) +
                    " does not match model feature_dim " +
                    std::to_string(model.backbone().spec().feature_dim));

  for (auto& p : model.backbone().parameters()) {
    auto it = data.tensors.find(p.name);
    if (it == data.tensors.end())
      fail_validation("load_pretrained: checkpoint missing tensor " + p.name);
    if (it->second.shape != p.value->shape)
      fail_validation("load_pretrained: tensor " + p.name + " has incompatible shape");
    *p.value = it->second;
  }
  model.reinit_head();  // classifier head is always freshly initialized
  model.set_provenance(kind);
}

std::unique_ptr<Volume3DModel> build_3d_cnn(double dropout, const InitStrategy& init,
                                            uint64_t seed, int fc_width) {
  auto model = std::make_unique<Volume3DModel>(dropout, seed, fc_width);
  if (init.kind != InitKind::random) {
    if (init.checkpoint_path.empty())
      fail_validation("build_3d_cnn: pretrained init needs a checkpoint path");
    const CheckpointData data = load_checkpoint(init.checkpoint_path);
    if (data.header.value("kind", "") != "volume3d")
      fail_validation("build_3d_cnn: checkpoint is not a volume3d checkpoint");
    for (auto& p : model->parameters()) {
      if (p.name.rfind("classifier.", 0) == 0) continue;  // head stays random
      auto it = data.tensors.find(p.name);
      if (it == data.tensors.end())
        fail_validation("build_3d_cnn: checkpoint missing tensor " + p.name);
      if (it->second.shape != p.value->shape)
        fail_validation("build_3d_cnn: tensor " + p.name + " has incompatible shape");
      *p.value = it->second;
    }
  }
  return model;
}

void restore_from_checkpoint(ScanClassifier& model, const std::string& checkpoint_path) {
  const CheckpointData data = load_checkpoint(checkpoint_path);
  for (auto& p : model.state()) {
    auto it = data.tensors.find(p.name);
    if (it == data.tensors.end())
      fail_validation("restore_from_checkpoint: checkpoint missing tensor " + p.name);
    if (it->second.shape != p.value->shape)
      fail_validation("restore_from_checkpoint: tensor " + p.name + " has incompatible shape");
    *p.value = it->second;
  }
}

bool architecture_is_slice_model(const std::string& architecture) {
  return architecture != "volume3d";
}

std::unique_ptr<ScanClassifier> build_scan_classifier(const std::string& architecture,
                                                      double dropout, const InitStrategy& init,
                                                      uint64_t seed) {
  if (architecture == "volume3d") return build_3d_cnn(dropout, init, seed);
  return build_slice_model(find_backbone(architecture), dropout, init, seed);
}

double forward_scan(SliceModel& model, const SequenceVolume& v) {
  return model.forward(v, /*training=*/false, nullptr);
}

nlohmann::ordered_json ModelBundle::to_json() const {
  return nlohmann::ordered_json{{"architecture", architecture},
                                {"view", to_string(view)},
                                {"modality", to_string(modality)},
                                {"provenance", to_string(provenance)},
                                {"dropout", dropout},
                                {"checkpoint_path", checkpoint_path},
                                {"hyperparams", hyperparams}};
}

ModelBundle ModelBundle::from_json(const nlohmann::ordered_json& j) {
  ModelBundle b;
  b.architecture = j.at("architecture").get<std::string>();
  b.view = view_from_string(j.at("view").get<std::string>());
  b.modality = modality_from_string(j.at("modality").get<std::string>());
  b.provenance = init_kind_from_string(j.at("provenance").get<std::string>());
  b.dropout = j.at("dropout").get<double>();
  b.checkpoint_path = j.at("checkpoint_path").get<std::string>();
  b.hyperparams = j.at("hyperparams");
  return b;
}

}  // namespace mripipe
