#include "mripipe/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "mripipe/common.hpp"

namespace mripipe::nn {

void init_fan_in(Tensor& w, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& x : w.data) x = rng.uniform(-limit, limit);
}

void relu_forward(const Tensor& x, Tensor& y) {
  if (!y.same_shape(x)) y = Tensor(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > 0 ? x.data[i] : 0.0;
}

void relu_backward(const Tensor& x, const Tensor& dy, Tensor& dx) {
  if (!dx.same_shape(x)) dx = Tensor(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) dx.data[i] = x.data[i] > 0 ? dy.data[i] : 0.0;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// --------------------------------------------------------------------------
// Conv2d
// --------------------------------------------------------------------------

Conv2d::Conv2d(int in, int out, int kh_, int kw_, int sh_, int sw_, int ph_, int pw_)
    : in_ch(in), out_ch(out), kh(kh_), kw(kw_), sh(sh_), sw(sw_), ph(ph_), pw(pw_),
      w(Tensor({out, in, kh_, kw_})), b(Tensor({out})), gw(Tensor({out, in, kh_, kw_})),
      gb(Tensor({out})) {}

void Conv2d::init(Rng& rng) {
  init_fan_in(w, in_ch * kh * kw, rng);
  b.zero();
}

void Conv2d::forward(const Tensor& x, Tensor& y) const {
  const int h = x.dim(1), wd = x.dim(2);
  const int oh = out_h(h), ow = out_w(wd);
  if (y.shape != std::vector<int>{out_ch, oh, ow}) y = Tensor({out_ch, oh, ow});
  const double* xp = x.ptr();
  double* yp = y.ptr();
  const double* wp = w.ptr();
  for (int oc = 0; oc < out_ch; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = b.data[static_cast<std::size_t>(oc)];
        const int iy0 = oy * sh - ph;
        const int ix0 = ox * sw - pw;
        for (int ic = 0; ic < in_ch; ++ic) {
          const double* xch = xp + (static_cast<std::size_t>(ic) * h) * wd;
          const double* wch =
              wp + ((static_cast<std::size_t>(oc) * in_ch + ic) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = xch + static_cast<std::size_t>(iy) * wd;
            const double* wrow = wch + static_cast<std::size_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += wrow[kx] * xrow[ix];
            }
          }
        }
        yp[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

void Conv2d::backward(const Tensor& x, const Tensor& dy, Tensor* dx) {
  const int h = x.dim(1), wd = x.dim(2);
  const int oh = dy.dim(1), ow = dy.dim(2);
  if (dx && !dx->same_shape(x)) *dx = Tensor(x.shape);
  const double* xp = x.ptr();
  const double* dyp = dy.ptr();
  const double* wp = w.ptr();
  double* gwp = gw.ptr();
  double* dxp = dx ? dx->ptr() : nullptr;
  for (int oc = 0; oc < out_ch; ++oc) {
    double gbias = 0.0;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double g = dyp[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox];
        if (g == 0.0) continue;
        gbias += g;
        const int iy0 = oy * sh - ph;
        const int ix0 = ox * sw - pw;
        for (int ic = 0; ic < in_ch; ++ic) {
          const double* xch = xp + (static_cast<std::size_t>(ic) * h) * wd;
          double* dxch = dxp ? dxp + (static_cast<std::size_t>(ic) * h) * wd : nullptr;
          const std::size_t wbase = ((static_cast<std::size_t>(oc) * in_ch + ic) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              const std::size_t widx = wbase + static_cast<std::size_t>(ky) * kw + kx;
              const std::size_t xidx = static_cast<std::size_t>(iy) * wd + ix;
              gwp[widx] += g * xch[xidx];
              if (dxch) dxch[xidx] += g * wp[widx];
            }
          }
        }
      }
    }
    gb.data[static_cast<std::size_t>(oc)] += gbias;
  }
}

void Conv2d::collect(std::vector<ParamView>& out, const std::string& prefix) {
  out.push_back({prefix + ".w", &w, &gw});
  out.push_back({prefix + ".b", &b, &gb});
}

// --------------------------------------------------------------------------
// MaxPool2d
// --------------------------------------------------------------------------

void MaxPool2d::forward(const Tensor& x, Tensor& y, Cache& c) const {
  const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = out_h(h), ow = out_w(w);
  if (y.shape != std::vector<int>{ch, oh, ow}) y = Tensor({ch, oh, ow});
  c.argmax.assign(y.size(), 0);
  const double* xp = x.ptr();
  double* yp = y.ptr();
  for (int cc = 0; cc < ch; ++cc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int best_idx = 0;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s + ky;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * s + kx;
            const std::size_t idx = (static_cast<std::size_t>(cc) * h + iy) * w + ix;
            if (xp[idx] > best) {
              best = xp[idx];
              best_idx = static_cast<int>(idx);
            }
          }
        }
        const std::size_t oidx = (static_cast<std::size_t>(cc) * oh + oy) * ow + ox;
        yp[oidx] = best;
        c.argmax[oidx] = best_idx;
      }
    }
  }
}

void MaxPool2d::backward(const Tensor& x, const Tensor& dy, const Cache& c, Tensor& dx) const {
  if (!dx.same_shape(x)) dx = Tensor(x.shape);
  dx.zero();
  for (std::size_t i = 0; i < dy.size(); ++i)
    dx.data[static_cast<std::size_t>(c.argmax[i])] += dy.data[i];
}

// --------------------------------------------------------------------------
// AdaptiveAvgPool2d
// --------------------------------------------------------------------------

namespace {
inline int adsta(int i, int in, int out) { return (i * in) / out; }
inline int adend(int i, int in, int out) { return ((i + 1) * in + out - 1) / out; }
}  // namespace

void AdaptiveAvgPool2d::forward(const Tensor& x, Tensor& y) const {
  const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (y.shape != std::vector<int>{ch, oh, ow}) y = Tensor({ch, oh, ow});
  for (int cc = 0; cc < ch; ++cc) {
    for (int i = 0; i < oh; ++i) {
      const int y0 = adsta(i, h, oh), y1 = adend(i, h, oh);
      for (int j = 0; j < ow; ++j) {
        const int x0 = adsta(j, w, ow), x1 = adend(j, w, ow);
        double acc = 0.0;
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) acc += x.at(cc, yy, xx);
        y.at(cc, i, j) = acc / ((y1 - y0) * (x1 - x0));
      }
    }
  }
}

void AdaptiveAvgPool2d::backward(const Tensor& x, const Tensor& dy, Tensor& dx) const {
  const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (!dx.same_shape(x)) dx = Tensor(x.shape);
  dx.zero();
  for (int cc = 0; cc < ch; ++cc) {
    for (int i = 0; i < oh; ++i) {
      const int y0 = adsta(i, h, oh), y1 = adend(i, h, oh);
      for (int j = 0; j < ow; ++j) {
        const int x0 = adsta(j, w, ow), x1 = adend(j, w, ow);
        const double g = dy.at(cc, i, j) / ((y1 - y0) * (x1 - x0));
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) dx.at(cc, yy, xx) += g;
      }
    }
  }
}

// --------------------------------------------------------------------------
// InstanceNorm2d
// --------------------------------------------------------------------------

InstanceNorm2d::InstanceNorm2d(int c)
    : channels(c), gamma(Tensor({c})), beta(Tensor({c})), ggamma(Tensor({c})),
      gbeta(Tensor({c})) {
  std::fill(gamma.data.begin(), gamma.data.end(), 1.0);
}

void InstanceNorm2d::forward(const Tensor& x, Tensor& y, Cache& c) const {
  const int n = static_cast<int>(x.size()) / channels;
  if (!y.same_shape(x)) y = Tensor(x.shape);
  c.xhat = Tensor(x.shape);
  c.inv_std.assign(static_cast<std::size_t>(channels), 0.0);
  for (int cc = 0; cc < channels; ++cc) {
    const double* xc = x.ptr() + static_cast<std::size_t>(cc) * n;
    double* xh = c.xhat.ptr() + static_cast<std::size_t>(cc) * n;
    double* yc = y.ptr() + static_cast<std::size_t>(cc) * n;
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += xc[i];
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    c.inv_std[static_cast<std::size_t>(cc)] = inv;
    const double g = gamma.data[static_cast<std::size_t>(cc)];
    const double bb = beta.data[static_cast<std::size_t>(cc)];
    for (int i = 0; i < n; ++i) {
      xh[i] = (xc[i] - mean) * inv;
      yc[i] = g * xh[i] + bb;
    }
  }
}

void InstanceNorm2d::backward(const Tensor& dy, const Cache& c, Tensor& dx) {
  const int n = static_cast<int>(dy.size()) / channels;
  if (!dx.same_shape(dy)) dx = Tensor(dy.shape);
  for (int cc = 0; cc < channels; ++cc) {
    const double* dyc = dy.ptr() + static_cast<std::size_t>(cc) * n;
    const double* xh = c.xhat.ptr() + static_cast<std::size_t>(cc) * n;
    double* dxc = dx.ptr() + static_cast<std::size_t>(cc) * n;
    const double g = gamma.data[static_cast<std::size_t>(cc)];
    const double inv = c.inv_std[static_cast<std::size_t>(cc)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      sum_dy += dyc[i];
      sum_dy_xhat += dyc[i] * xh[i];
    }
    gbeta.data[static_cast<std::size_t>(cc)] += sum_dy;
    ggamma.data[static_cast<std::size_t>(cc)] += sum_dy_xhat;
    const double scale = g * inv / n;
    for (int i = 0; i < n; ++i)
      dxc[i] = scale * (n * dyc[i] - sum_dy - xh[i] * sum_dy_xhat);
  }
}

void InstanceNorm2d::collect(std::vector<ParamView>& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", &gamma, &ggamma});
  out.push_back({prefix + ".beta", &beta, &gbeta});
}

// --------------------------------------------------------------------------
// Linear
// --------------------------------------------------------------------------

Linear::Linear(int in_, int out_)
    : in(in_), out(out_), w(Tensor({out_, in_})), b(Tensor({out_})), gw(Tensor({out_, in_})),
      gb(Tensor({out_})) {}

void Linear::init(Rng& rng) {
  init_fan_in(w, in, rng);
  b.zero();
}

void Linear::forward(const double* x, double* y) const {
  const double* wp = w.ptr();
  for (int o = 0; o < out; ++o) {
    double acc = b.data[static_cast<std::size_t>(o)];
    const double* wrow = wp + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += wrow[i] * x[i];
    y[o] = acc;
  }
}

void Linear::backward(const double* x, const double* dy, double* dx) {
  const double* wp = w.ptr();
  double* gwp = gw.ptr();
  if (dx)
    for (int i = 0; i < in; ++i) dx[i] = 0.0;
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    gb.data[static_cast<std::size_t>(o)] += g;
    if (g == 0.0) continue;
    const double* wrow = wp + static_cast<std::size_t>(o) * in;
    double* gwrow = gwp + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      gwrow[i] += g * x[i];
      if (dx) dx[i] += g * wrow[i];
    }
  }
}

void Linear::collect(std::vector<ParamView>& out_views, const std::string& prefix) {
  out_views.push_back({prefix + ".w", &w, &gw});
  out_views.push_back({prefix + ".b", &b, &gb});
}

// --------------------------------------------------------------------------
// Conv3d
// --------------------------------------------------------------------------

Conv3d::Conv3d(int in, int out, std::array<int, 3> k, std::array<int, 3> s, std::array<int, 3> p)
    : in_ch(in), out_ch(out), kd(k[0]), kh(k[1]), kw(k[2]), sd(s[0]), sh(s[1]), sw(s[2]),
      pd(p[0]), ph(p[1]), pw(p[2]), w(Tensor({out, in, k[0], k[1], k[2]})), b(Tensor({out})),
      gw(Tensor({out, in, k[0], k[1], k[2]})), gb(Tensor({out})) {}

void Conv3d::init(Rng& rng) {
  init_fan_in(w, in_ch * kd * kh * kw, rng);
  b.zero();
}

void Conv3d::forward(const Tensor& x, Tensor& y) const {
  const int d = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int od = out_d(d), oh = out_h(h), ow = out_w(wd);
  if (y.shape != std::vector<int>{out_ch, od, oh, ow}) y = Tensor({out_ch, od, oh, ow});
  const double* xp = x.ptr();
  const double* wp = w.ptr();
  double* yp = y.ptr();
  const std::size_t x_ch = static_cast<std::size_t>(d) * h * wd;
  const std::size_t w_ch = static_cast<std::size_t>(kd) * kh * kw;

  parallel_for(out_ch, 2, [&](int oc) {
    double* ych = yp + static_cast<std::size_t>(oc) * od * oh * ow;
    const double bias = b.data[static_cast<std::size_t>(oc)];
    for (int oz = 0; oz < od; ++oz) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias;
          const int iz0 = oz * sd - pd, iy0 = oy * sh - ph, ix0 = ox * sw - pw;
          for (int ic = 0; ic < in_ch; ++ic) {
            const double* xch = xp + static_cast<std::size_t>(ic) * x_ch;
            const double* wch = wp + (static_cast<std::size_t>(oc) * in_ch + ic) * w_ch;
            for (int kz = 0; kz < kd; ++kz) {
              const int iz = iz0 + kz;
              if (iz < 0 || iz >= d) continue;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= h) continue;
                const double* xrow = xch + (static_cast<std::size_t>(iz) * h + iy) * wd;
                const double* wrow = wch + (static_cast<std::size_t>(kz) * kh + ky) * kw;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ix0 + kx;
                  if (ix < 0 || ix >= wd) continue;
                  acc += wrow[kx] * xrow[ix];
                }
              }
            }
          }
          ych[(static_cast<std::size_t>(oz) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  });
}

void Conv3d::backward(const Tensor& x, const Tensor& dy, Tensor* dx) {
  const int d = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int od = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  if (dx && !dx->same_shape(x)) *dx = Tensor(x.shape);
  if (dx) dx->zero();
  const double* xp = x.ptr();
  const double* dyp = dy.ptr();
  const double* wp = w.ptr();
  double* gwp = gw.ptr();
  double* dxp = dx ? dx->ptr() : nullptr;
  const std::size_t x_ch = static_cast<std::size_t>(d) * h * wd;
  const std::size_t w_ch = static_cast<std::size_t>(kd) * kh * kw;

  // Parameter grads: disjoint per out-channel, safe to parallelize.
  parallel_for(out_ch, 2, [&](int oc) {
    double gbias = 0.0;
    const double* dych = dyp + static_cast<std::size_t>(oc) * od * oh * ow;
    for (int oz = 0; oz < od; ++oz) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double g = dych[(static_cast<std::size_t>(oz) * oh + oy) * ow + ox];
          if (g == 0.0) continue;
          gbias += g;
          const int iz0 = oz * sd - pd, iy0 = oy * sh - ph, ix0 = ox * sw - pw;
          for (int ic = 0; ic < in_ch; ++ic) {
            const double* xch = xp + static_cast<std::size_t>(ic) * x_ch;
            double* gwch = gwp + (static_cast<std::size_t>(oc) * in_ch + ic) * w_ch;
            for (int kz = 0; kz < kd; ++kz) {
              const int iz = iz0 + kz;
              if (iz < 0 || iz >= d) continue;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= h) continue;
                const double* xrow = xch + (static_cast<std::size_t>(iz) * h + iy) * wd;
                double* gwrow = gwch + (static_cast<std::size_t>(kz) * kh + ky) * kw;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ix0 + kx;
                  if (ix < 0 || ix >= wd) continue;
                  gwrow[kx] += g * xrow[ix];
                }
              }
            }
          }
        }
      }
    }
    gb.data[static_cast<std::size_t>(oc)] += gbias;
  });

  if (!dxp) return;
  // Input grads: serial scatter over out channels keeps accumulation exact
  // and race-free.
  for (int oc = 0; oc < out_ch; ++oc) {
    const double* dych = dyp + static_cast<std::size_t>(oc) * od * oh * ow;
    for (int oz = 0; oz < od; ++oz) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double g = dych[(static_cast<std::size_t>(oz) * oh + oy) * ow + ox];
          if (g == 0.0) continue;
          const int iz0 = oz * sd - pd, iy0 = oy * sh - ph, ix0 = ox * sw - pw;
          for (int ic = 0; ic < in_ch; ++ic) {
            double* dxch = dxp + static_cast<std::size_t>(ic) * x_ch;
            const double* wch = wp + (static_cast<std::size_t>(oc) * in_ch + ic) * w_ch;
            for (int kz = 0; kz < kd; ++kz) {
              const int iz = iz0 + kz;
              if (iz < 0 || iz >= d) continue;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= h) continue;
                double* dxrow = dxch + (static_cast<std::size_t>(iz) * h + iy) * wd;
                const double* wrow = wch + (static_cast<std::size_t>(kz) * kh + ky) * kw;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ix0 + kx;
                  if (ix < 0 || ix >= wd) continue;
                  dxrow[ix] += g * wrow[kx];
                }
              }
            }
          }
        }
      }
    }
  }
}

void Conv3d::collect(std::vector<ParamView>& out, const std::string& prefix) {
  out.push_back({prefix + ".w", &w, &gw});
  out.push_back({prefix + ".b", &b, &gb});
}

// --------------------------------------------------------------------------
// MaxPool3d / AdaptiveAvgPool3d
// --------------------------------------------------------------------------

void MaxPool3d::forward(const Tensor& x, Tensor& y, Cache& c) const {
  const int ch = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int od = out_dim(d), oh = out_dim(h), ow = out_dim(w);
  if (od < 1 || oh < 1 || ow < 1)
    fail_validation("MaxPool3d: input (" + std::to_string(d) + "," + std::to_string(h) + "," +
                    std::to_string(w) + ") smaller than kernel " + std::to_string(k));
  if (y.shape != std::vector<int>{ch, od, oh, ow}) y = Tensor({ch, od, oh, ow});
  c.argmax.assign(y.size(), 0);
  const double* xp = x.ptr();
  double* yp = y.ptr();
  for (int cc = 0; cc < ch; ++cc) {
    for (int oz = 0; oz < od; ++oz) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          int best_idx = 0;
          for (int kz = 0; kz < k; ++kz) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const std::size_t idx =
                    ((static_cast<std::size_t>(cc) * d + (oz * s + kz)) * h + (oy * s + ky)) * w +
                    (ox * s + kx);
                if (xp[idx] > best) {
                  best = xp[idx];
                  best_idx = static_cast<int>(idx);
                }
              }
            }
          }
          const std::size_t oidx =
              ((static_cast<std::size_t>(cc) * od + oz) * oh + oy) * ow + ox;
          yp[oidx] = best;
          c.argmax[oidx] = best_idx;
        }
      }
    }
  }
}

void MaxPool3d::backward(const Tensor& x, const Tensor& dy, const Cache& c, Tensor& dx) const {
  if (!dx.same_shape(x)) dx = Tensor(x.shape);
  dx.zero();
  for (std::size_t i = 0; i < dy.size(); ++i)
    dx.data[static_cast<std::size_t>(c.argmax[i])] += dy.data[i];
}

void AdaptiveAvgPool3d::forward(const Tensor& x, Tensor& y) const {
  const int ch = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (y.shape != std::vector<int>{ch, od, oh, ow}) y = Tensor({ch, od, oh, ow});
  double* yp = y.ptr();
  for (int cc = 0; cc < ch; ++cc) {
    for (int i = 0; i < od; ++i) {
      const int z0 = adsta(i, d, od), z1 = adend(i, d, od);
      for (int j = 0; j < oh; ++j) {
        const int y0 = adsta(j, h, oh), y1 = adend(j, h, oh);
        for (int l = 0; l < ow; ++l) {
          const int x0 = adsta(l, w, ow), x1 = adend(l, w, ow);
          double acc = 0.0;
          for (int zz = z0; zz < z1; ++zz)
            for (int yy = y0; yy < y1; ++yy)
              for (int xx = x0; xx < x1; ++xx)
                acc += x.data[((static_cast<std::size_t>(cc) * d + zz) * h + yy) * w + xx];
          yp[((static_cast<std::size_t>(cc) * od + i) * oh + j) * ow + l] =
              acc / ((z1 - z0) * (y1 - y0) * (x1 - x0));
        }
      }
    }
  }
}

void AdaptiveAvgPool3d::backward(const Tensor& x, const Tensor& dy, Tensor& dx) const {
  const int ch = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (!dx.same_shape(x)) dx = Tensor(x.shape);
  dx.zero();
  for (int cc = 0; cc < ch; ++cc) {
    for (int i = 0; i < od; ++i) {
      const int z0 = adsta(i, d, od), z1 = adend(i, d, od);
      for (int j = 0; j < oh; ++j) {
        const int y0 = adsta(j, h, oh), y1 = adend(j, h, oh);
        for (int l = 0; l < ow; ++l) {
          const int x0 = adsta(l, w, ow), x1 = adend(l, w, ow);
          const double g = dy.data[((static_cast<std::size_t>(cc) * od + i) * oh + j) * ow + l] /
                           ((z1 - z0) * (y1 - y0) * (x1 - x0));
          for (int zz = z0; zz < z1; ++zz)
            for (int yy = y0; yy < y1; ++yy)
              for (int xx = x0; xx < x1; ++xx)
                dx.data[((static_cast<std::size_t>(cc) * d + zz) * h + yy) * w + xx] += g;
        }
      }
    }
  }
}

// --------------------------------------------------------------------------
// BatchNorm3d
// --------------------------------------------------------------------------

BatchNorm3d::BatchNorm3d(int c)
    : channels(c), gamma(Tensor({c})), beta(Tensor({c})), ggamma(Tensor({c})),
      gbeta(Tensor({c})), running_mean(Tensor({c})), running_var(Tensor({c})) {
  std::fill(gamma.data.begin(), gamma.data.end(), 1.0);
  std::fill(running_var.data.begin(), running_var.data.end(), 1.0);
}

void BatchNorm3d::forward(const Tensor& x, Tensor& y, bool training, Cache& c) {
  const int n = static_cast<int>(x.size()) / channels;
  if (!y.same_shape(x)) y = Tensor(x.shape);
  c.xhat = Tensor(x.shape);
  c.mean.assign(static_cast<std::size_t>(channels), 0.0);
  c.inv_std.assign(static_cast<std::size_t>(channels), 0.0);
  for (int cc = 0; cc < channels; ++cc) {
    const double* xc = x.ptr() + static_cast<std::size_t>(cc) * n;
    double mean, var;
    if (training) {
      double sum = 0.0;
      for (int i = 0; i < n; ++i) sum += xc[i];
      mean = sum / n;
      double sq = 0.0;
      for (int i = 0; i < n; ++i) sq += (xc[i] - mean) * (xc[i] - mean);
      var = sq / n;
      running_mean.data[static_cast<std::size_t>(cc)] =
          (1 - momentum) * running_mean.data[static_cast<std::size_t>(cc)] + momentum * mean;
      running_var.data[static_cast<std::size_t>(cc)] =
          (1 - momentum) * running_var.data[static_cast<std::size_t>(cc)] + momentum * var;
    } else {
      mean = running_mean.data[static_cast<std::size_t>(cc)];
      var = running_var.data[static_cast<std::size_t>(cc)];
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    c.mean[static_cast<std::size_t>(cc)] = mean;
    c.inv_std[static_cast<std::size_t>(cc)] = inv;
    const double g = gamma.data[static_cast<std::size_t>(cc)];
    const double bb = beta.data[static_cast<std::size_t>(cc)];
    double* xhatc = c.xhat.ptr() + static_cast<std::size_t>(cc) * n;
    double* yc = y.ptr() + static_cast<std::size_t>(cc) * n;
    for (int i = 0; i < n; ++i) {
      xhatc[i] = (xc[i] - mean) * inv;
      yc[i] = g * xhatc[i] + bb;
    }
  }
  c.training_mode = training;
}

void BatchNorm3d::backward(const Tensor& dy, const Cache& c, Tensor& dx) {
  const int n = static_cast<int>(dy.size()) / channels;
  if (!dx.same_shape(dy)) dx = Tensor(dy.shape);
  for (int cc = 0; cc < channels; ++cc) {
    const double* dyc = dy.ptr() + static_cast<std::size_t>(cc) * n;
    const double* xhatc = c.xhat.ptr() + static_cast<std::size_t>(cc) * n;
    double* dxc = dx.ptr() + static_cast<std::size_t>(cc) * n;
    const double g = gamma.data[static_cast<std::size_t>(cc)];
    const double inv = c.inv_std[static_cast<std::size_t>(cc)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      sum_dy += dyc[i];
      sum_dy_xhat += dyc[i] * xhatc[i];
    }
    gbeta.data[static_cast<std::size_t>(cc)] += sum_dy;
    ggamma.data[static_cast<std::size_t>(cc)] += sum_dy_xhat;
    if (c.training_mode) {
      const double scale = g * inv / n;
      for (int i = 0; i < n; ++i)
        dxc[i] = scale * (n * dyc[i] - sum_dy - xhatc[i] * sum_dy_xhat);
    } else {
      const double scale = g * inv;
      for (int i = 0; i < n; ++i) dxc[i] = scale * dyc[i];
    }
  }
}

void BatchNorm3d::collect(std::vector<ParamView>& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", &gamma, &ggamma});
  out.push_back({prefix + ".beta", &beta, &gbeta});
}

// --------------------------------------------------------------------------
// LayerNorm
// --------------------------------------------------------------------------

LayerNorm::LayerNorm(int d)
    : dim(d), gamma(Tensor({d})), beta(Tensor({d})), ggamma(Tensor({d})), gbeta(Tensor({d})) {
  std::fill(gamma.data.begin(), gamma.data.end(), 1.0);
}

void LayerNorm::forward(const Tensor& x, Tensor& y, Cache& c) const {
  const int n = x.dim(0);
  if (!y.same_shape(x)) y = Tensor(x.shape);
  c.xhat = Tensor(x.shape);
  c.inv_std.assign(static_cast<std::size_t>(n), 0.0);
  for (int t = 0; t < n; ++t) {
    const double* xt = x.ptr() + static_cast<std::size_t>(t) * dim;
    double* xh = c.xhat.ptr() + static_cast<std::size_t>(t) * dim;
    double* yt = y.ptr() + static_cast<std::size_t>(t) * dim;
    double mean = 0.0;
    for (int i = 0; i < dim; ++i) mean += xt[i];
    mean /= dim;
    double var = 0.0;
    for (int i = 0; i < dim; ++i) var += (xt[i] - mean) * (xt[i] - mean);
    var /= dim;
    const double inv = 1.0 / std::sqrt(var + eps);
    c.inv_std[static_cast<std::size_t>(t)] = inv;
    for (int i = 0; i < dim; ++i) {
      xh[i] = (xt[i] - mean) * inv;
      yt[i] = gamma.data[static_cast<std::size_t>(i)] * xh[i] + beta.data[static_cast<std::size_t>(i)];
    }
  }
}

void LayerNorm::backward(const Tensor& dy, const Cache& c, Tensor& dx) {
  const int n = dy.dim(0);
  if (!dx.same_shape(dy)) dx = Tensor(dy.shape);
  for (int t = 0; t < n; ++t) {
    const double* dyt = dy.ptr() + static_cast<std::size_t>(t) * dim;
    const double* xh = c.xhat.ptr() + static_cast<std::size_t>(t) * dim;
    double* dxt = dx.ptr() + static_cast<std::size_t>(t) * dim;
    const double inv = c.inv_std[static_cast<std::size_t>(t)];
    double sum_g = 0.0, sum_gx = 0.0;
    for (int i = 0; i < dim; ++i) {
      const double gd = dyt[i] * gamma.data[static_cast<std::size_t>(i)];
      sum_g += gd;
      sum_gx += gd * xh[i];
      ggamma.data[static_cast<std::size_t>(i)] += dyt[i] * xh[i];
      gbeta.data[static_cast<std::size_t>(i)] += dyt[i];
    }
    for (int i = 0; i < dim; ++i) {
      const double gd = dyt[i] * gamma.data[static_cast<std::size_t>(i)];
      dxt[i] = inv * (gd - sum_g / dim - xh[i] * sum_gx / dim);
    }
  }
}

void LayerNorm::collect(std::vector<ParamView>& out, const std::string& prefix) {
  out.push_back({prefix + ".gamma", &gamma, &ggamma});
  out.push_back({prefix + ".beta", &beta, &gbeta});
}

// --------------------------------------------------------------------------
// SelfAttention
// --------------------------------------------------------------------------

SelfAttention::SelfAttention(int d) : dim(d), wq(d, d), wk(d, d), wv(d, d), wo(d, d) {}

void SelfAttention::init(Rng& rng) {
  wq.init(rng);
  wk.init(rng);
  wv.init(rng);
  wo.init(rng);
}

void SelfAttention::forward(const Tensor& x, Tensor& y, Cache& c) const {
  const int n = x.dim(0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  c.q = Tensor({n, dim});
  c.k = Tensor({n, dim});
  c.v = Tensor({n, dim});
  c.probs = Tensor({n, n});
  c.mix = Tensor({n, dim});
  if (!y.same_shape(x)) y = Tensor(x.shape);

  for (int t = 0; t < n; ++t) {
    const double* xt = x.ptr() + static_cast<std::size_t>(t) * dim;
    wq.forward(xt, c.q.ptr() + static_cast<std::size_t>(t) * dim);
    wk.forward(xt, c.k.ptr() + static_cast<std::size_t>(t) * dim);
    wv.forward(xt, c.v.ptr() + static_cast<std::size_t>(t) * dim);
  }
  for (int i = 0; i < n; ++i) {
    double* row = c.probs.ptr() + static_cast<std::size_t>(i) * n;
    const double* qi = c.q.ptr() + static_cast<std::size_t>(i) * dim;
    double max_s = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      const double* kj = c.k.ptr() + static_cast<std::size_t>(j) * dim;
      double s = 0.0;
      for (int d2 = 0; d2 < dim; ++d2) s += qi[d2] * kj[d2];
      row[j] = s * scale;
      max_s = std::max(max_s, row[j]);
    }
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - max_s);
      denom += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= denom;
    double* mi = c.mix.ptr() + static_cast<std::size_t>(i) * dim;
    for (int d2 = 0; d2 < dim; ++d2) mi[d2] = 0.0;
    for (int j = 0; j < n; ++j) {
      const double p = row[j];
      const double* vj = c.v.ptr() + static_cast<std::size_t>(j) * dim;
      for (int d2 = 0; d2 < dim; ++d2) mi[d2] += p * vj[d2];
    }
    wo.forward(mi, y.ptr() + static_cast<std::size_t>(i) * dim);
  }
}

void SelfAttention::backward(const Tensor& x, const Tensor& dy, const Cache& c, Tensor& dx) {
  const int n = x.dim(0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  if (!dx.same_shape(x)) dx = Tensor(x.shape);
  dx.zero();

  Tensor dmix({n, dim}), dq({n, dim}), dk({n, dim}), dv({n, dim});
  for (int i = 0; i < n; ++i)
    wo.backward(c.mix.ptr() + static_cast<std::size_t>(i) * dim,
                dy.ptr() + static_cast<std::size_t>(i) * dim,
                dmix.ptr() + static_cast<std::size_t>(i) * dim);

  std::vector<double> dprobs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* probs = c.probs.ptr() + static_cast<std::size_t>(i) * n;
    const double* dmi = dmix.ptr() + static_cast<std::size_t>(i) * dim;
    // dprobs and dV from mix = probs * V
    double dot = 0.0;
    for (int j = 0; j < n; ++j) {
      const double* vj = c.v.ptr() + static_cast<std::size_t>(j) * dim;
      double dp = 0.0;
      for (int d2 = 0; d2 < dim; ++d2) dp += dmi[d2] * vj[d2];
      dprobs[static_cast<std::size_t>(j)] = dp;
      dot += dp * probs[j];
      double* dvj = dv.ptr() + static_cast<std::size_t>(j) * dim;
      for (int d2 = 0; d2 < dim; ++d2) dvj[d2] += probs[j] * dmi[d2];
    }
    // softmax backward, then scores -> q, k
    const double* qi = c.q.ptr() + static_cast<std::size_t>(i) * dim;
    double* dqi = dq.ptr() + static_cast<std::size_t>(i) * dim;
    for (int j = 0; j < n; ++j) {
      const double ds = probs[j] * (dprobs[static_cast<std::size_t>(j)] - dot) * scale;
      if (ds == 0.0) continue;
      const double* kj = c.k.ptr() + static_cast<std::size_t>(j) * dim;
      double* dkj = dk.ptr() + static_cast<std::size_t>(j) * dim;
      for (int d2 = 0; d2 < dim; ++d2) {
        dqi[d2] += ds * kj[d2];
        dkj[d2] += ds * qi[d2];
      }
    }
  }

  std::vector<double> tmp(static_cast<std::size_t>(dim));
  for (int t = 0; t < n; ++t) {
    const double* xt = x.ptr() + static_cast<std::size_t>(t) * dim;
    double* dxt = dx.ptr() + static_cast<std::size_t>(t) * dim;
    wq.backward(xt, dq.ptr() + static_cast<std::size_t>(t) * dim, tmp.data());
    for (int i = 0; i < dim; ++i) dxt[i] += tmp[static_cast<std::size_t>(i)];
    wk.backward(xt, dk.ptr() + static_cast<std::size_t>(t) * dim, tmp.data());
    for (int i = 0; i < dim; ++i) dxt[i] += tmp[static_cast<std::size_t>(i)];
    wv.backward(xt, dv.ptr() + static_cast<std::size_t>(t) * dim, tmp.data());
    for (int i = 0; i < dim; ++i) dxt[i] += tmp[static_cast<std::size_t>(i)];
  }
}

void SelfAttention::collect(std::vector<ParamView>& out, const std::string& prefix) {
  wq.collect(out, prefix + ".wq");
  wk.collect(out, prefix + ".wk");
  wv.collect(out, prefix + ".wv");
  wo.collect(out, prefix + ".wo");
}

// --------------------------------------------------------------------------
// TransformerBlock
// --------------------------------------------------------------------------

TransformerBlock::TransformerBlock(int d, int h)
    : dim(d), hidden(h), ln1(d), ln2(d), attn(d), fc1(d, h), fc2(h, d) {}

void TransformerBlock::init(Rng& rng) {
  attn.init(rng);
  fc1.init(rng);
  fc2.init(rng);
}

void TransformerBlock::forward(const Tensor& x, Tensor& y, Cache& c) const {
  const int n = x.dim(0);
  ln1.forward(x, c.norm1, c.ln1c);
  attn.forward(c.norm1, c.attn_out, c.attnc);
  c.mid = Tensor({n, dim});
  for (std::size_t i = 0; i < c.mid.size(); ++i)
    c.mid.data[i] = x.data[i] + c.attn_out.data[i];
  ln2.forward(c.mid, c.norm2, c.ln2c);
  c.hidden_pre = Tensor({n, hidden});
  c.hidden_act = Tensor({n, hidden});
  if (!y.same_shape(x)) y = Tensor(x.shape);
  for (int t = 0; t < n; ++t) {
    fc1.forward(c.norm2.ptr() + static_cast<std::size_t>(t) * dim,
                c.hidden_pre.ptr() + static_cast<std::size_t>(t) * hidden);
    for (int i = 0; i < hidden; ++i)
      c.hidden_act.at(t, i) = relu(c.hidden_pre.at(t, i));
    fc2.forward(c.hidden_act.ptr() + static_cast<std::size_t>(t) * hidden,
                y.ptr() + static_cast<std::size_t>(t) * dim);
  }
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += c.mid.data[i];
}

void TransformerBlock::backward(const Tensor& x, const Tensor& dy, Cache& c, Tensor& dx) {
  const int n = x.dim(0);
  Tensor dmid = dy;  // residual branch
  Tensor dnorm2({n, dim});
  std::vector<double> dhid(static_cast<std::size_t>(hidden));
  for (int t = 0; t < n; ++t) {
    const double* dyt = dy.ptr() + static_cast<std::size_t>(t) * dim;
    fc2.backward(c.hidden_act.ptr() + static_cast<std::size_t>(t) * hidden, dyt, dhid.data());
    for (int i = 0; i < hidden; ++i)
      if (c.hidden_pre.at(t, i) <= 0) dhid[static_cast<std::size_t>(i)] = 0.0;
    fc1.backward(c.norm2.ptr() + static_cast<std::size_t>(t) * dim, dhid.data(),
                 dnorm2.ptr() + static_cast<std::size_t>(t) * dim);
  }
  Tensor dmid2;
  ln2.backward(dnorm2, c.ln2c, dmid2);
  for (std::size_t i = 0; i < dmid.size(); ++i) dmid.data[i] += dmid2.data[i];

  Tensor dnorm1;
  attn.backward(c.norm1, dmid, c.attnc, dnorm1);
  Tensor dx1;
  ln1.backward(dnorm1, c.ln1c, dx1);
  if (!dx.same_shape(x)) dx = Tensor(x.shape);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] = dmid.data[i] + dx1.data[i];
}

void TransformerBlock::collect(std::vector<ParamView>& out, const std::string& prefix) {
  ln1.collect(out, prefix + ".ln1");
  attn.collect(out, prefix + ".attn");
  ln2.collect(out, prefix + ".ln2");
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

}  // namespace mripipe::nn
