#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "mripipe/rng.hpp"
#include "mripipe/tensor.hpp"

namespace mripipe::nn {

struct ParamView {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

/// Uniform He-style fan-in init, used by every layer.
void init_fan_in(Tensor& w, int fan_in, Rng& rng);

inline double relu(double x) { return x > 0 ? x : 0; }

void relu_forward(const Tensor& x, Tensor& y);
void relu_backward(const Tensor& x, const Tensor& dy, Tensor& dx);

double sigmoid(double x);

// ---------------------------------------------------------------------------
// 2D layers. Activations are (C, H, W); compute methods are const so slices
// can run in parallel with per-slice buffers; backward_* accumulate into the
// layer's own grad tensors and must be called from one thread.
// ---------------------------------------------------------------------------

struct Conv2d {
  int in_ch, out_ch, kh, kw, sh, sw, ph, pw;
  Tensor w, b, gw, gb;

  Conv2d(int in, int out, int k, int stride, int pad)
      : Conv2d(in, out, k, k, stride, stride, pad, pad) {}
  Conv2d(int in, int out, int kh_, int kw_, int sh_, int sw_, int ph_, int pw_);

  int out_h(int h) const { return (h + 2 * ph - kh) / sh + 1; }
  int out_w(int w) const { return (w + 2 * pw - kw) / sw + 1; }

  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& y) const;
  /// dx may be null when input grads are not needed (first layer).
  void backward(const Tensor& x, const Tensor& dy, Tensor* dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

struct MaxPool2d {
  int k, s;
  struct Cache {
    std::vector<int> argmax;
  };

  int out_h(int h) const { return (h - k) / s + 1; }
  int out_w(int w) const { return (w - k) / s + 1; }
  void forward(const Tensor& x, Tensor& y, Cache& c) const;
  void backward(const Tensor& x, const Tensor& dy, const Cache& c, Tensor& dx) const;
};

struct AdaptiveAvgPool2d {
  int oh, ow;
  void forward(const Tensor& x, Tensor& y) const;
  void backward(const Tensor& x, const Tensor& dy, Tensor& dx) const;
};

/// Per-channel normalization over the spatial extent of one activation map.
/// Stateless (no running buffers), so inference is per-sample deterministic.
struct InstanceNorm2d {
  int channels;
  double eps = 1e-5;
  Tensor gamma, beta, ggamma, gbeta;

  struct Cache {
    Tensor xhat;
    std::vector<double> inv_std;
  };

  explicit InstanceNorm2d(int c);
  void forward(const Tensor& x, Tensor& y, Cache& c) const;
  void backward(const Tensor& dy, const Cache& c, Tensor& dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

struct Linear {
  int in, out;
  Tensor w, b, gw, gb;  // w is (out, in)

  Linear(int in_, int out_);
  void init(Rng& rng);
  void forward(const double* x, double* y) const;
  void backward(const double* x, const double* dy, double* dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// 3D layers for the volumetric CNN. Activations are (C, D, H, W).
// ---------------------------------------------------------------------------

struct Conv3d {
  int in_ch, out_ch, kd, kh, kw, sd, sh, sw, pd, ph, pw;
  Tensor w, b, gw, gb;

  Conv3d(int in, int out, std::array<int, 3> k, std::array<int, 3> s, std::array<int, 3> p);

  int out_d(int d) const { return (d + 2 * pd - kd) / sd + 1; }
  int out_h(int h) const { return (h + 2 * ph - kh) / sh + 1; }
  int out_w(int w) const { return (w + 2 * pw - kw) / sw + 1; }

  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& y) const;
  void backward(const Tensor& x, const Tensor& dy, Tensor* dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

struct MaxPool3d {
  int k = 3, s = 2;
  struct Cache {
    std::vector<int> argmax;
  };

  int out_dim(int d) const { return (d - k) / s + 1; }
  void forward(const Tensor& x, Tensor& y, Cache& c) const;
  void backward(const Tensor& x, const Tensor& dy, const Cache& c, Tensor& dx) const;
};

struct AdaptiveAvgPool3d {
  int od, oh, ow;
  void forward(const Tensor& x, Tensor& y) const;
  void backward(const Tensor& x, const Tensor& dy, Tensor& dx) const;
};

struct BatchNorm3d {
  int channels;
  double eps = 1e-5;
  double momentum = 0.1;
  Tensor gamma, beta, ggamma, gbeta;
  Tensor running_mean, running_var;

  struct Cache {
    Tensor xhat;
    std::vector<double> mean, inv_std;
    bool training_mode = true;
  };

  explicit BatchNorm3d(int c);
  void forward(const Tensor& x, Tensor& y, bool training, Cache& c);
  void backward(const Tensor& dy, const Cache& c, Tensor& dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// Token layers for attention backbones. Tokens are (n, d).
// ---------------------------------------------------------------------------

struct LayerNorm {
  int dim;
  double eps = 1e-5;
  Tensor gamma, beta, ggamma, gbeta;

  struct Cache {
    Tensor xhat;
    std::vector<double> inv_std;
  };

  explicit LayerNorm(int d);
  void forward(const Tensor& x, Tensor& y, Cache& c) const;
  void backward(const Tensor& dy, const Cache& c, Tensor& dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

/// Single-head scaled-dot-product self-attention with output projection.
struct SelfAttention {
  int dim;
  Linear wq, wk, wv, wo;

  struct Cache {
    Tensor q, k, v, probs, mix;  // (n,d) except probs (n,n)
  };

  explicit SelfAttention(int d);
  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& y, Cache& c) const;
  void backward(const Tensor& x, const Tensor& dy, const Cache& c, Tensor& dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  int dim, hidden;
  LayerNorm ln1, ln2;
  SelfAttention attn;
  Linear fc1, fc2;

  struct Cache {
    LayerNorm::Cache ln1c, ln2c;
    SelfAttention::Cache attnc;
    Tensor norm1, attn_out, mid, norm2, hidden_pre, hidden_act;
  };

  TransformerBlock(int d, int h);
  void init(Rng& rng);
  void forward(const Tensor& x, Tensor& y, Cache& c) const;
  void backward(const Tensor& x, const Tensor& dy, Cache& c, Tensor& dx);
  void collect(std::vector<ParamView>& out, const std::string& prefix);
};

}  // namespace mripipe::nn
