#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/config.hpp"
#include "mist/error.hpp"
#include "mist/formats.hpp"
#include "mist/manifest.hpp"
#include "mist/pseudolabel.hpp"
#include "mist/rng.hpp"
#include "mist/tensor.hpp"

namespace mist {

// ---------------------------------------------------------------------------
// 3-D convolution primitive on [C,T,H,W] tensors, cubic kernel.
// ---------------------------------------------------------------------------

struct Conv3d {
  Tensor w;  // [Co, Ci, k, k, k]
  Tensor b;  // [Co]
  int64_t stride = 1;
  int64_t pad = 0;

  int64_t out_channels() const { return w.shape[0]; }
  int64_t in_channels() const { return w.shape[1]; }
  int64_t kernel() const { return w.shape[2]; }
};

inline Conv3d make_conv3d(int64_t co, int64_t ci, int64_t k, int64_t stride, int64_t pad,
                          Rng& rng) {
  Conv3d c;
  const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k * k * k));
  c.w = random_uniform({co, ci, k, k, k}, -bound, bound, rng);
  c.b = random_uniform({co}, -bound, bound, rng);
  c.stride = stride;
  c.pad = pad;
  return c;
}

inline std::vector<int64_t> conv3d_out_shape(const Conv3d& c, const Tensor& x) {
  auto out_dim = [&](int64_t n) { return (n + 2 * c.pad - c.kernel()) / c.stride + 1; };
  return {c.out_channels(), out_dim(x.shape[1]), out_dim(x.shape[2]), out_dim(x.shape[3])};
}

inline Tensor conv3d_forward(const Conv3d& c, const Tensor& x) {
  if (x.ndim() != 4 || x.shape[0] != c.in_channels())
    throw ValidationError("conv3d: input shape " + x.shape_str() + " does not match " +
                          std::to_string(c.in_channels()) + " input channels");
  Tensor y(conv3d_out_shape(c, x));
  if (y.shape[1] < 1 || y.shape[2] < 1 || y.shape[3] < 1)
    throw ValidationError("conv3d: input " + x.shape_str() + " too small for kernel");
  const int64_t ci = c.in_channels(), co = c.out_channels(), k = c.kernel();
  const int64_t ti = x.shape[1], hi = x.shape[2], wi = x.shape[3];
  const int64_t to = y.shape[1], ho = y.shape[2], wo = y.shape[3];
  const int64_t s = c.stride, p = c.pad;
  for (int64_t oc = 0; oc < co; ++oc) {
    const double* wt = c.w.data() + oc * ci * k * k * k;
    for (int64_t ot = 0; ot < to; ++ot)
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          double acc = c.b[static_cast<size_t>(oc)];
          for (int64_t icn = 0; icn < ci; ++icn) {
            const double* xc = x.data() + icn * ti * hi * wi;
            const double* wc = wt + icn * k * k * k;
            for (int64_t kt = 0; kt < k; ++kt) {
              const int64_t it = ot * s - p + kt;
              if (it < 0 || it >= ti) continue;
              for (int64_t kh = 0; kh < k; ++kh) {
                const int64_t ih = oh * s - p + kh;
                if (ih < 0 || ih >= hi) continue;
                const double* xrow = xc + (it * hi + ih) * wi;
                const double* wrow = wc + (kt * k + kh) * k;
                for (int64_t kw = 0; kw < k; ++kw) {
                  const int64_t iw = ow * s - p + kw;
                  if (iw < 0 || iw >= wi) continue;
                  acc += wrow[kw] * xrow[iw];
                }
              }
            }
          }
          y.v[static_cast<size_t>(((oc * to + ot) * ho + oh) * wo + ow)] = acc;
        }
  }
  return y;
}

// Accumulates dw/db and (if dx != nullptr) writes input gradients.
inline void conv3d_backward(const Conv3d& c, const Tensor& x, const Tensor& dy, Tensor& dw,
                            Tensor& db, Tensor* dx) {
  const int64_t ci = c.in_channels(), co = c.out_channels(), k = c.kernel();
  const int64_t ti = x.shape[1], hi = x.shape[2], wi = x.shape[3];
  const int64_t to = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3];
  const int64_t s = c.stride, p = c.pad;
  if (dx) dx->fill(0.0);
  for (int64_t oc = 0; oc < co; ++oc) {
    const double* wt = c.w.data() + oc * ci * k * k * k;
    double* dwt = dw.data() + oc * ci * k * k * k;
    for (int64_t ot = 0; ot < to; ++ot)
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          const double g = dy.v[static_cast<size_t>(((oc * to + ot) * ho + oh) * wo + ow)];
          if (g == 0.0) continue;
          db[static_cast<size_t>(oc)] += g;
          for (int64_t icn = 0; icn < ci; ++icn) {
            const double* xc = x.data() + icn * ti * hi * wi;
            double* dxc = dx ? dx->data() + icn * ti * hi * wi : nullptr;
            const double* wc = wt + icn * k * k * k;
            double* dwc = dwt + icn * k * k * k;
            for (int64_t kt = 0; kt < k; ++kt) {
              const int64_t it = ot * s - p + kt;
              if (it < 0 || it >= ti) continue;
              for (int64_t kh = 0; kh < k; ++kh) {
                const int64_t ih = oh * s - p + kh;
                if (ih < 0 || ih >= hi) continue;
                const double* xrow = xc + (it * hi + ih) * wi;
                double* dxrow = dxc ? dxc + (it * hi + ih) * wi : nullptr;
                const double* wrow = wc + (kt * k + kh) * k;
                double* dwrow = dwc + (kt * k + kh) * k;
                for (int64_t kw = 0; kw < k; ++kw) {
                  const int64_t iw = ow * s - p + kw;
                  if (iw < 0 || iw >= wi) continue;
                  dwrow[kw] += g * xrow[iw];
                  if (dxrow) dxrow[iw] += g * wrow[kw];
                }
              }
            }
          }
        }
  }
}

inline void relu_inplace(Tensor& t) {
  for (auto& v : t.v)
    if (v < 0.0) v = 0.0;
}

// dz = dy * 1{post > 0}, where `post` is the post-ReLU activation.
inline Tensor relu_backward(const Tensor& post, const Tensor& dy) {
  Tensor dz = dy;
  for (size_t i = 0; i < dz.v.size(); ++i)
    if (post.v[i] <= 0.0) dz.v[i] = 0.0;
  return dz;
}

inline void sigmoid_inplace(Tensor& t) {
  for (auto& v : t.v) v = sigmoid(v);
}

// ---------------------------------------------------------------------------
// Trilinear resize of a single-channel map (half-pixel centers).
// ---------------------------------------------------------------------------

namespace detail {

struct AxisTap {
  int64_t lo, hi;
  double w_hi;  // weight of hi; lo gets (1 - w_hi)
};

inline AxisTap axis_tap(int64_t i, int64_t src_n, int64_t dst_n) {
  if (src_n == 1) return {0, 0, 0.0};
  const double scale = static_cast<double>(src_n) / static_cast<double>(dst_n);
  double c = (static_cast<double>(i) + 0.5) * scale - 0.5;
  if (c < 0.0) c = 0.0;
  if (c > static_cast<double>(src_n - 1)) c = static_cast<double>(src_n - 1);
  const auto lo = static_cast<int64_t>(std::floor(c));
  const int64_t hi = std::min(lo + 1, src_n - 1);
  return {lo, hi, c - static_cast<double>(lo)};
}

}  // namespace detail

inline Tensor trilinear_resize(const Tensor& src, int64_t t_d, int64_t h_d, int64_t w_d) {
  const int64_t c = src.shape[0], t_s = src.shape[1], h_s = src.shape[2], w_s = src.shape[3];
  Tensor dst({c, t_d, h_d, w_d});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t t = 0; t < t_d; ++t) {
      const auto at = detail::axis_tap(t, t_s, t_d);
      for (int64_t y = 0; y < h_d; ++y) {
        const auto ay = detail::axis_tap(y, h_s, h_d);
        for (int64_t x = 0; x < w_d; ++x) {
          const auto ax = detail::axis_tap(x, w_s, w_d);
          double acc = 0.0;
          for (int tt = 0; tt < 2; ++tt) {
            const int64_t st = tt ? at.hi : at.lo;
            const double wt = tt ? at.w_hi : 1.0 - at.w_hi;
            if (wt == 0.0) continue;
            for (int yy = 0; yy < 2; ++yy) {
              const int64_t sy = yy ? ay.hi : ay.lo;
              const double wy = yy ? ay.w_hi : 1.0 - ay.w_hi;
              if (wy == 0.0) continue;
              for (int xx = 0; xx < 2; ++xx) {
                const int64_t sx = xx ? ax.hi : ax.lo;
                const double wx = xx ? ax.w_hi : 1.0 - ax.w_hi;
                if (wx == 0.0) continue;
                acc += wt * wy * wx *
                       src.v[static_cast<size_t>(((ch * t_s + st) * h_s + sy) * w_s + sx)];
              }
            }
          }
          dst.v[static_cast<size_t>(((ch * t_d + t) * h_d + y) * w_d + x)] = acc;
        }
      }
    }
  return dst;
}

inline Tensor trilinear_resize_backward(const Tensor& d_dst, int64_t t_s, int64_t h_s,
                                        int64_t w_s) {
  const int64_t c = d_dst.shape[0], t_d = d_dst.shape[1], h_d = d_dst.shape[2],
                w_d = d_dst.shape[3];
  Tensor d_src({c, t_s, h_s, w_s});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t t = 0; t < t_d; ++t) {
      const auto at = detail::axis_tap(t, t_s, t_d);
      for (int64_t y = 0; y < h_d; ++y) {
        const auto ay = detail::axis_tap(y, h_s, h_d);
        for (int64_t x = 0; x < w_d; ++x) {
          const auto ax = detail::axis_tap(x, w_s, w_d);
          const double g = d_dst.v[static_cast<size_t>(((ch * t_d + t) * h_d + y) * w_d + x)];
          if (g == 0.0) continue;
          for (int tt = 0; tt < 2; ++tt) {
            const int64_t st = tt ? at.hi : at.lo;
            const double wt = tt ? at.w_hi : 1.0 - at.w_hi;
            if (wt == 0.0) continue;
            for (int yy = 0; yy < 2; ++yy) {
              const int64_t sy = yy ? ay.hi : ay.lo;
              const double wy = yy ? ay.w_hi : 1.0 - ay.w_hi;
              if (wy == 0.0) continue;
              for (int xx = 0; xx < 2; ++xx) {
                const int64_t sx = xx ? ax.hi : ax.lo;
                const double wx = xx ? ax.w_hi : 1.0 - ax.w_hi;
                if (wx == 0.0) continue;
                d_src.v[static_cast<size_t>(((ch * t_s + st) * h_s + sy) * w_s + sx)] +=
                    g * wt * wy * wx;
              }
            }
          }
        }
      }
    }
  return d_src;
}

// ---------------------------------------------------------------------------
// Encoder: 5-block toy backbone + self-guided attention + two heads.
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int64_t in_channels = 1;
  std::array<int64_t, 5> block_channels = {8, 16, 32, 32, 64};
  int64_t K = 8;          // detectors per class in the guided head
  bool disable_sga = false;
  bool disable_hg = false;
};

struct BackboneOutputs {
  Tensor m_b4;  // block-4 feature map [C4, t, h, w]
  Tensor m_b5;  // block-5 feature map [C5, t', h', w']
};

// Intermediate maps of the SGA module and both heads.
struct SgaTensors {
  Tensor m_star_b4;             // F1 output, 2K channels
  Tensor attention;             // A resized to m_b5 dims, single channel, (0,1)
  Tensor attention_native;      // A at F2's native resolution
  Tensor m_attended;            // M_A = M_b5 + A o M_b5
  Tensor m_guided;              // F3 output, 2K channels
  std::array<double, 2> p_hat{};  // guided probabilities (normal, abnormal)
  std::array<double, 2> p{};      // weighted-head probabilities (normal, abnormal)
};

struct EncoderParams {
  EncoderConfig config;
  std::array<Conv3d, 5> blocks;  // stride-2 conv + ReLU each
  Conv3d f1a;  // 3x3x3 stride-2, C4 -> C4, ReLU
  Conv3d f1b;  // 1x1x1, C4 -> 2K, ReLU
  Conv3d f2;   // 1x1x1, 2K -> 1, sigmoid
  Conv3d f3;   // 1x1x1, 2K -> 2K
  Tensor hc_w;  // [2, C5]
  Tensor hc_b;  // [2]

  std::vector<Tensor*> all() {
    std::vector<Tensor*> out;
    for (auto& blk : blocks) {
      out.push_back(&blk.w);
      out.push_back(&blk.b);
    }
    for (Conv3d* c : {&f1a, &f1b, &f2, &f3}) {
      out.push_back(&c->w);
      out.push_back(&c->b);
    }
    out.push_back(&hc_w);
    out.push_back(&hc_b);
    return out;
  }
};

inline EncoderParams init_encoder(const EncoderConfig& config, Rng& rng) {
  EncoderParams p;
  p.config = config;
  int64_t ci = config.in_channels;
  for (size_t i = 0; i < 5; ++i) {
    p.blocks[i] = make_conv3d(config.block_channels[i], ci, 3, 2, 1, rng);
    ci = config.block_channels[i];
  }
  const int64_t c4 = config.block_channels[3];
  const int64_t c5 = config.block_channels[4];
  const int64_t k2 = 2 * config.K;
  p.f1a = make_conv3d(c4, c4, 3, 2, 1, rng);
  p.f1b = make_conv3d(k2, c4, 1, 1, 0, rng);
  p.f2 = make_conv3d(1, k2, 1, 1, 0, rng);
  p.f3 = make_conv3d(k2, k2, 1, 1, 0, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c5));
  p.hc_w = random_uniform({2, c5}, -bound, bound, rng);
  p.hc_b = random_uniform({2}, -bound, bound, rng);
  return p;
}

inline std::array<double, 2> softmax2(double z0, double z1) {
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  const double inv = 1.0 / (e0 + e1);
  return {e0 * inv, e1 * inv};
}

// Spatiotemporal average pool [C,t,h,w] -> length-C vector.
inline std::vector<double> global_avg_pool(const Tensor& x) {
  const int64_t c = x.shape[0];
  const int64_t vol = x.shape[1] * x.shape[2] * x.shape[3];
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* p = x.data() + ch * vol;
    double acc = 0.0;
    for (int64_t i = 0; i < vol; ++i) acc += p[i];
    out[static_cast<size_t>(ch)] = acc / static_cast<double>(vol);
  }
  return out;
}

// Class-specific channel pooling: channels [0,K) average to the normal
// logit, [K,2K) to the abnormal logit.
inline std::array<double, 2> detector_pool(const std::vector<double>& pooled, int64_t k_det) {
  if (static_cast<int64_t>(pooled.size()) != 2 * k_det)
    throw ValidationError("detector_pool: expected 2K channels");
  std::array<double, 2> logits{0.0, 0.0};
  for (int64_t i = 0; i < k_det; ++i) logits[0] += pooled[static_cast<size_t>(i)];
  for (int64_t i = k_det; i < 2 * k_det; ++i) logits[1] += pooled[static_cast<size_t>(i)];
  logits[0] /= static_cast<double>(k_det);
  logits[1] /= static_cast<double>(k_det);
  return logits;
}

// M_A = M_b5 + A o M_b5 with the single-channel A broadcast over
// channels.
inline Tensor attention_apply(const Tensor& m_b5, const Tensor& a_big) {
  if (a_big.shape[0] != 1 || a_big.shape[1] != m_b5.shape[1] ||
      a_big.shape[2] != m_b5.shape[2] || a_big.shape[3] != m_b5.shape[3])
    throw ValidationError("attention_apply: attention map shape " + a_big.shape_str() +
                          " does not match feature map " + m_b5.shape_str());
  Tensor out = m_b5;
  const int64_t c = m_b5.shape[0];
  const int64_t vol = m_b5.shape[1] * m_b5.shape[2] * m_b5.shape[3];
  for (int64_t ch = 0; ch < c; ++ch) {
    double* o = out.data() + ch * vol;
    const double* m = m_b5.data() + ch * vol;
    const double* a = a_big.data();
    for (int64_t i = 0; i < vol; ++i) o[i] = m[i] + a[i] * m[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass with cached activations.
// ---------------------------------------------------------------------------

struct EncoderActs {
  std::array<Tensor, 5> block_out;  // post-ReLU
  Tensor f1a_out;                   // post-ReLU
  SgaTensors sga;
  std::vector<double> gap;            // pooled M_A
  std::array<double, 2> logits_hc{};
  std::vector<double> pi_m;           // pooled M (2K)
  std::array<double, 2> logits_hg{};
};

inline BackboneOutputs backbone_forward(const EncoderParams& p, const Tensor& clip,
                                        std::array<Tensor, 5>* cache = nullptr) {
  if (clip.ndim() != 4 || clip.shape[0] != p.config.in_channels)
    throw ValidationError("backbone_forward: clip shape " + clip.shape_str() +
                          " does not match configured input channels");
  Tensor x = clip;
  std::array<Tensor, 5> outs;
  for (size_t i = 0; i < 5; ++i) {
    x = conv3d_forward(p.blocks[i], x);
    relu_inplace(x);
    outs[i] = x;
  }
  if (cache) *cache = outs;
  return {outs[3], outs[4]};
}

inline SgaTensors sga_forward(const EncoderParams& p, const BackboneOutputs& outs,
                              Tensor* f1a_cache = nullptr) {
  SgaTensors sga;
  Tensor u = conv3d_forward(p.f1a, outs.m_b4);
  relu_inplace(u);
  if (f1a_cache) *f1a_cache = u;
  sga.m_star_b4 = conv3d_forward(p.f1b, u);
  relu_inplace(sga.m_star_b4);
  sga.attention_native = conv3d_forward(p.f2, sga.m_star_b4);
  sigmoid_inplace(sga.attention_native);
  sga.attention = trilinear_resize(sga.attention_native, outs.m_b5.shape[1], outs.m_b5.shape[2],
                                   outs.m_b5.shape[3]);
  sga.m_attended = attention_apply(outs.m_b5, sga.attention);
  sga.m_guided = conv3d_forward(p.f3, sga.m_star_b4);
  const auto pooled = global_avg_pool(sga.m_guided);
  const auto logits = detector_pool(pooled, p.config.K);
  sga.p_hat = softmax2(logits[0], logits[1]);
  return sga;
}

// Full encoder forward: probability pair from H_c (and H_g when active).
inline void encoder_forward(const EncoderParams& p, const Tensor& clip, EncoderActs& acts) {
  backbone_forward(p, clip, &acts.block_out);
  const Tensor& m_b5 = acts.block_out[4];
  const Tensor* head_input = &m_b5;
  if (!p.config.disable_sga) {
    BackboneOutputs outs{acts.block_out[3], m_b5};
    acts.sga = sga_forward(p, outs, &acts.f1a_out);
    // Recompute the guided logits here so backward can reuse the pooled
    // vector without a second pass.
    acts.pi_m = global_avg_pool(acts.sga.m_guided);
    acts.logits_hg = detector_pool(acts.pi_m, p.config.K);
    acts.sga.p_hat = softmax2(acts.logits_hg[0], acts.logits_hg[1]);
    head_input = &acts.sga.m_attended;
  }
  acts.gap = global_avg_pool(*head_input);
  std::array<double, 2> z{};
  affine_forward(p.hc_w, p.hc_b, acts.gap.data(), z.data());
  acts.logits_hc = z;
  acts.sga.p = softmax2(z[0], z[1]);
}

// ---------------------------------------------------------------------------
// Class-weighted cross-entropy with soft targets.
// ---------------------------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

inline double clamp_prob(double p) {
  return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

// L = -w0 * y * log(p) - w1 * (1-y) * log(1-p), p clamped to
// [1e-7, 1-1e-7].
inline double weighted_ce(double p_abnormal, double y, double w0, double w1) {
  if (y < 0.0 || y > 1.0) throw ValidationError("weighted_ce: target must be in [0,1]");
  const double p = clamp_prob(p_abnormal);
  return -w0 * y * std::log(p) - w1 * (1.0 - y) * std::log(1.0 - p);
}

// dL/dp; zero outside the clamp interval where the loss is flat.
inline double weighted_ce_grad(double p_abnormal, double y, double w0, double w1) {
  if (p_abnormal < kProbClamp || p_abnormal > 1.0 - kProbClamp) return 0.0;
  return -w0 * y / p_abnormal + w1 * (1.0 - y) / (1.0 - p_abnormal);
}

// Gradient of weighted_ce(softmax(z)[1], y) w.r.t. the two logits.
inline std::array<double, 2> wce_softmax_backward(const std::array<double, 2>& p, double y,
                                                  double w0, double w1) {
  const double dp1 = weighted_ce_grad(p[1], y, w0, w1);
  const double dz1 = dp1 * p[1] * p[0];
  return {-dz1, dz1};
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------

// Gradients live in a parallel EncoderParams (same shapes).
inline EncoderParams zero_grads_like(const EncoderParams& p) {
  EncoderParams g = p;
  for (Tensor* t : g.all()) t->fill(0.0);
  return g;
}

// Accumulates d(loss)/d(params) for one clip given upstream CE targets.
// Mirrors encoder_forward exactly.
inline void encoder_backward(const EncoderParams& p, const Tensor& clip, const EncoderActs& acts,
                             double y, double w0, double w1, bool use_hg, EncoderParams& grads) {
  const Tensor& m_b5 = acts.block_out[4];
  const bool sga_on = !p.config.disable_sga;
  const Tensor& head_input = sga_on ? acts.sga.m_attended : m_b5;

  // H_c path.
  const auto dz_hc = wce_softmax_backward(acts.sga.p, y, w0, w1);
  std::vector<double> dgap(acts.gap.size(), 0.0);
  affine_backward(p.hc_w, acts.gap.data(), dz_hc.data(), grads.hc_w, grads.hc_b, dgap.data());
  Tensor d_head(head_input.shape);
  {
    const int64_t c = head_input.shape[0];
    const int64_t vol = head_input.shape[1] * head_input.shape[2] * head_input.shape[3];
    const double inv = 1.0 / static_cast<double>(vol);
    for (int64_t ch = 0; ch < c; ++ch) {
      const double g = dgap[static_cast<size_t>(ch)] * inv;
      double* dst = d_head.data() + ch * vol;
      for (int64_t i = 0; i < vol; ++i) dst[i] = g;
    }
  }

  Tensor d_mb5(m_b5.shape);
  Tensor d_mstar;  // accumulated below when SGA is active
  if (sga_on) {
    // M_A = M_b5 + A o M_b5.
    const Tensor& a_big = acts.sga.attention;
    const int64_t c = m_b5.shape[0];
    const int64_t vol = m_b5.shape[1] * m_b5.shape[2] * m_b5.shape[3];
    Tensor d_abig({1, m_b5.shape[1], m_b5.shape[2], m_b5.shape[3]});
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* dh = d_head.data() + ch * vol;
      const double* m = m_b5.data() + ch * vol;
      const double* a = a_big.data();
      double* dm = d_mb5.data() + ch * vol;
      for (int64_t i = 0; i < vol; ++i) {
        dm[i] = dh[i] * (1.0 + a[i]);
        d_abig.v[static_cast<size_t>(i)] += dh[i] * m[i];
      }
    }
    Tensor d_anative = trilinear_resize_backward(d_abig, acts.sga.attention_native.shape[1],
                                                 acts.sga.attention_native.shape[2],
                                                 acts.sga.attention_native.shape[3]);
    // Sigmoid backward into F2 pre-activation.
    for (size_t i = 0; i < d_anative.v.size(); ++i) {
      const double a = acts.sga.attention_native.v[i];
      d_anative.v[i] *= a * (1.0 - a);
    }
    d_mstar = Tensor(acts.sga.m_star_b4.shape);
    Tensor tmp(acts.sga.m_star_b4.shape);
    conv3d_backward(p.f2, acts.sga.m_star_b4, d_anative, grads.f2.w, grads.f2.b, &tmp);
    for (size_t i = 0; i < d_mstar.v.size(); ++i) d_mstar.v[i] += tmp.v[i];

    // H_g path.
    if (use_hg && !p.config.disable_hg) {
      const auto dz_hg = wce_softmax_backward(acts.sga.p_hat, y, w0, w1);
      const int64_t k_det = p.config.K;
      const int64_t gvol =
          acts.sga.m_guided.shape[1] * acts.sga.m_guided.shape[2] * acts.sga.m_guided.shape[3];
      Tensor d_mguided(acts.sga.m_guided.shape);
      const double inv = 1.0 / (static_cast<double>(k_det) * static_cast<double>(gvol));
      for (int64_t ch = 0; ch < 2 * k_det; ++ch) {
        const double g = dz_hg[ch < k_det ? 0 : 1] * inv;
        double* dst = d_mguided.data() + ch * gvol;
        for (int64_t i = 0; i < gvol; ++i) dst[i] = g;
      }
      conv3d_backward(p.f3, acts.sga.m_star_b4, d_mguided, grads.f3.w, grads.f3.b, &tmp);
      for (size_t i = 0; i < d_mstar.v.size(); ++i) d_mstar.v[i] += tmp.v[i];
    }

    // F1b / F1a chain back to M_b4.
    Tensor d_mstar_pre = relu_backward(acts.sga.m_star_b4, d_mstar);
    Tensor d_f1a(acts.f1a_out.shape);
    conv3d_backward(p.f1b, acts.f1a_out, d_mstar_pre, grads.f1b.w, grads.f1b.b, &d_f1a);
    Tensor d_f1a_pre = relu_backward(acts.f1a_out, d_f1a);
    Tensor d_mb4(acts.block_out[3].shape);
    conv3d_backward(p.f1a, acts.block_out[3], d_f1a_pre, grads.f1a.w, grads.f1a.b, &d_mb4);

    // Backbone chain: block 5 gets d_mb5, block 4 additionally d_mb4.
    Tensor d = relu_backward(m_b5, d_mb5);
    Tensor d_x3(acts.block_out[3].shape);
    conv3d_backward(p.blocks[4], acts.block_out[3], d, grads.blocks[4].w, grads.blocks[4].b,
                    &d_x3);
    for (size_t i = 0; i < d_x3.v.size(); ++i) d_x3.v[i] += d_mb4.v[i];
    Tensor cur = std::move(d_x3);
    for (int i = 3; i >= 0; --i) {
      Tensor dz = relu_backward(acts.block_out[static_cast<size_t>(i)], cur);
      const Tensor& input = i == 0 ? clip : acts.block_out[static_cast<size_t>(i - 1)];
      Tensor d_in(input.shape);
      conv3d_backward(p.blocks[static_cast<size_t>(i)], input, dz,
                      grads.blocks[static_cast<size_t>(i)].w, grads.blocks[static_cast<size_t>(i)].b,
                      i > 0 ? &d_in : nullptr);
      cur = std::move(d_in);
    }
  } else {
    Tensor cur = d_head;
    for (int i = 4; i >= 0; --i) {
      Tensor dz = relu_backward(acts.block_out[static_cast<size_t>(i)], cur);
      const Tensor& input = i == 0 ? clip : acts.block_out[static_cast<size_t>(i - 1)];
      Tensor d_in(input.shape);
      conv3d_backward(p.blocks[static_cast<size_t>(i)], input, dz,
                      grads.blocks[static_cast<size_t>(i)].w, grads.blocks[static_cast<size_t>(i)].b,
                      i > 0 ? &d_in : nullptr);
      cur = std::move(d_in);
    }
  }
}

// Loss of one clip under the current ablation flags.
inline double encoder_clip_loss(const EncoderParams& p, const EncoderActs& acts, double y,
                                double w0, double w1) {
  double loss = weighted_ce(acts.sga.p[1], y, w0, w1);
  if (!p.config.disable_sga && !p.config.disable_hg)
    loss += weighted_ce(acts.sga.p_hat[1], y, w0, w1);
  return loss;
}

// ---------------------------------------------------------------------------
// Fine-tuning (Adam, linear warm-up, L2 weight decay).
// ---------------------------------------------------------------------------

namespace detail {

struct AdamState {
  std::vector<Tensor> m, v;
  int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void init(const std::vector<Tensor*>& params) {
    m.clear();
    v.clear();
    for (const Tensor* p : params) {
      m.push_back(p->zeros_like());
      v.push_back(p->zeros_like());
    }
  }

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads, double lr,
            double weight_decay) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& w = *params[i];
      const Tensor& g0 = *grads[i];
      for (size_t j = 0; j < w.v.size(); ++j) {
        const double g = g0.v[j] + weight_decay * w.v[j];
        m[i].v[j] = beta1 * m[i].v[j] + (1.0 - beta1) * g;
        v[i].v[j] = beta2 * v[i].v[j] + (1.0 - beta2) * g * g;
        const double mhat = m[i].v[j] / bc1;
        const double vhat = v[i].v[j] / bc2;
        w.v[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

}  // namespace detail

struct EncoderTrainResult {
  EncoderParams params;
  std::vector<TrainLogEntry> log;  // one entry per epoch (mean clip loss)
};

// Linear warm-up to ft_lr over ft_warmup_epochs, then constant.
inline double warmup_lr(const HyperParams& hp, int64_t epoch) {
  if (hp.ft_warmup_epochs <= 0 || epoch >= hp.ft_warmup_epochs) return hp.ft_lr;
  return hp.ft_lr * static_cast<double>(epoch + 1) / static_cast<double>(hp.ft_warmup_epochs);
}

// Stage II: fine-tune the encoder on raw clips, supervised by per-clip
// pseudo labels for abnormal videos and zeros for normal videos.
inline EncoderTrainResult finetune(const Manifest& manifest, const std::string& labels_dir,
                                   const HyperParams& hp, uint64_t seed,
                                   const EncoderConfig& config) {
  auto abnormal = manifest.select(Split::train, 1);
  auto normal = manifest.select(Split::train, 0);
  if (abnormal.empty()) throw ValidationError("finetune: no abnormal training videos");
  if (normal.empty()) throw ValidationError("finetune: no normal training videos");

  struct VideoData {
    ClipVolume clips;
    std::vector<double> labels;
  };
  std::vector<VideoData> data_a, data_n;
  auto load = [&](const std::vector<const VideoRecord*>& vids, std::vector<VideoData>& out,
                  bool abnormal_class) {
    for (const auto* v : vids) {
      if (v->clip_path.empty())
        throw ValidationError("finetune: video '" + v->video_id + "' has no clip_path");
      VideoData d;
      d.clips = read_clip_file(v->clip_path, v->video_id);
      if (d.clips.num_clips() != v->num_clips)
        throw ValidationError("video '" + v->video_id + "': clip file count mismatch");
      if (abnormal_class) {
        PseudoLabelSeries pl = read_pseudo_labels(labels_dir, v->video_id);
        if (static_cast<int64_t>(pl.labels.size()) != v->num_clips)
          throw ValidationError("video '" + v->video_id + "': pseudo-label length mismatch");
        d.labels = std::move(pl.labels);
      } else {
        d.labels.assign(static_cast<size_t>(v->num_clips), 0.0);
      }
      out.push_back(std::move(d));
    }
  };
  load(abnormal, data_a, true);
  load(normal, data_n, false);

  Rng root(seed);
  Rng init_rng = root.fork("ft/init");
  EncoderTrainResult result;
  result.params = init_encoder(config, init_rng);
  EncoderParams& params = result.params;

  detail::AdamState opt;
  auto param_ptrs = params.all();
  opt.init(param_ptrs);

  const auto per_class = static_cast<size_t>(hp.ft_videos_per_class_per_batch);
  const size_t max_class = std::max(data_a.size(), data_n.size());
  const size_t batches_per_epoch = (max_class + per_class - 1) / per_class;

  Rng batch_rng = root.fork("ft/batch");
  for (int64_t epoch = 0; epoch < hp.ft_epochs; ++epoch) {
    const double lr = warmup_lr(hp, epoch);
    std::vector<size_t> order_a(data_a.size()), order_n(data_n.size());
    for (size_t i = 0; i < order_a.size(); ++i) order_a[i] = i;
    for (size_t i = 0; i < order_n.size(); ++i) order_n[i] = i;
    batch_rng.shuffle(order_a);
    batch_rng.shuffle(order_n);

    double epoch_loss = 0.0;
    int64_t epoch_clips = 0;
    for (size_t b = 0; b < batches_per_epoch; ++b) {
      EncoderParams grads = zero_grads_like(params);
      auto grad_ptrs = grads.all();
      double batch_loss = 0.0;
      int64_t batch_clips = 0;

      auto run_class = [&](std::vector<VideoData>& data, const std::vector<size_t>& order) {
        for (size_t j = 0; j < per_class; ++j) {
          const VideoData& vd = data[order[(b * per_class + j) % order.size()]];
          const int64_t n = vd.clips.num_clips();
          auto clip_idx = detail::sample_batch_indices(
              static_cast<size_t>(n), static_cast<size_t>(hp.ft_clips_per_video), batch_rng);
          for (size_t ci : clip_idx) {
            Tensor clip(std::vector<int64_t>(vd.clips.data.shape.begin() + 1,
                                             vd.clips.data.shape.end()));
            const int64_t stride = clip.numel();
            std::copy(vd.clips.data.data() + static_cast<int64_t>(ci) * stride,
                      vd.clips.data.data() + (static_cast<int64_t>(ci) + 1) * stride,
                      clip.data());
            EncoderActs acts;
            encoder_forward(params, clip, acts);
            const double y = vd.labels[ci];
            batch_loss += encoder_clip_loss(params, acts, y, hp.w0, hp.w1);
            encoder_backward(params, clip, acts, y, hp.w0, hp.w1, true, grads);
            ++batch_clips;
          }
        }
      };
      run_class(data_a, order_a);
      run_class(data_n, order_n);

      const double inv = 1.0 / static_cast<double>(batch_clips);
      for (Tensor* g : grad_ptrs)
        for (auto& x : g->v) x *= inv;
      opt.step(param_ptrs, grad_ptrs, lr, hp.ft_weight_decay);
      epoch_loss += batch_loss;
      epoch_clips += batch_clips;
    }
    result.log.push_back({epoch, epoch_loss / static_cast<double>(epoch_clips)});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Inference.
// ---------------------------------------------------------------------------

// Per-clip abnormal probability from H_c; optionally collects native
// attention maps (one per clip).
inline ScoreSeries encoder_score_video(const EncoderParams& params, const ClipVolume& clips,
                                       std::vector<Tensor>* attention_out = nullptr) {
  if (attention_out && params.config.disable_sga)
    throw ValidationError("attention export requested but this checkpoint has SGA disabled");
  ScoreSeries out;
  out.video_id = clips.video_id;
  const int64_t n = clips.num_clips();
  Tensor clip(std::vector<int64_t>(clips.data.shape.begin() + 1, clips.data.shape.end()));
  const int64_t stride = clip.numel();
  for (int64_t i = 0; i < n; ++i) {
    std::copy(clips.data.data() + i * stride, clips.data.data() + (i + 1) * stride, clip.data());
    EncoderActs acts;
    encoder_forward(params, clip, acts);
    out.scores.push_back(acts.sga.p[1]);
    if (attention_out) attention_out->push_back(acts.sga.attention_native);
  }
  return out;
}

// Attention maps as a float32 blob + JSON shape header.
inline void write_attention_maps(const std::vector<Tensor>& maps, const std::string& video_id,
                                 const std::string& path) {
  if (maps.empty()) throw ValidationError("write_attention_maps: no maps for " + video_id);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write attention blob: " + path);
  for (const auto& m : maps) {
    std::vector<float> buf(m.v.size());
    for (size_t i = 0; i < m.v.size(); ++i) buf[i] = static_cast<float>(m.v[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failure on attention blob: " + path);
  nlohmann::ordered_json side;
  side["video_id"] = video_id;
  side["clips"] = maps.size();
  side["shape"] = maps.front().shape;
  side["dtype"] = "float32";
  std::ofstream hdr(path + ".json");
  if (!hdr) throw IoError("cannot write attention header: " + path + ".json");
  hdr << side.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Checkpointing.
// ---------------------------------------------------------------------------

inline void save_encoder_checkpoint(const EncoderParams& params, const HyperParams& hp,
                                    uint64_t seed, int64_t epochs, const std::string& path) {
  NamedTensors blob;
  for (size_t i = 0; i < 5; ++i) {
    blob.emplace_back("block" + std::to_string(i) + "_w", params.blocks[i].w);
    blob.emplace_back("block" + std::to_string(i) + "_b", params.blocks[i].b);
  }
  blob.emplace_back("f1a_w", params.f1a.w);
  blob.emplace_back("f1a_b", params.f1a.b);
  blob.emplace_back("f1b_w", params.f1b.w);
  blob.emplace_back("f1b_b", params.f1b.b);
  blob.emplace_back("f2_w", params.f2.w);
  blob.emplace_back("f2_b", params.f2.b);
  blob.emplace_back("f3_w", params.f3.w);
  blob.emplace_back("f3_b", params.f3.b);
  blob.emplace_back("hc_w", params.hc_w);
  blob.emplace_back("hc_b", params.hc_b);
  write_param_blob(blob, path);

  nlohmann::ordered_json side;
  side["kind"] = "encoder";
  side["hyperparams"] = config_to_json(hp);
  side["seed"] = seed;
  side["epochs"] = epochs;
  side["in_channels"] = params.config.in_channels;
  side["block_channels"] = params.config.block_channels;
  side["K"] = params.config.K;
  side["disable_sga"] = params.config.disable_sga;
  side["disable_hg"] = params.config.disable_hg;
  std::ofstream out(path + ".json");
  if (!out) throw IoError("cannot write checkpoint sidecar: " + path + ".json");
  out << side.dump(2) << "\n";
}

struct EncoderCheckpoint {
  EncoderParams params;
  nlohmann::json sidecar;
};

inline EncoderCheckpoint load_encoder_checkpoint(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw IoError("cannot open checkpoint sidecar: " + path + ".json");
  EncoderCheckpoint ck;
  try {
    in >> ck.sidecar;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint sidecar " + path + ".json: " + e.what());
  }
  if (ck.sidecar.value("kind", "") != "encoder")
    throw ValidationError("checkpoint " + path + " is not an encoder checkpoint");
  NamedTensors blob = read_param_blob(path);

  EncoderConfig config;
  config.in_channels = ck.sidecar.at("in_channels").get<int64_t>();
  auto bc = ck.sidecar.at("block_channels").get<std::vector<int64_t>>();
  if (bc.size() != 5) throw FormatError("checkpoint " + path + ": block_channels must have 5 entries");
  std::copy(bc.begin(), bc.end(), config.block_channels.begin());
  config.K = ck.sidecar.at("K").get<int64_t>();
  config.disable_sga = ck.sidecar.value("disable_sga", false);
  config.disable_hg = ck.sidecar.value("disable_hg", false);

  ck.params.config = config;
  for (size_t i = 0; i < 5; ++i) {
    ck.params.blocks[i].w = find_param(blob, "block" + std::to_string(i) + "_w", path);
    ck.params.blocks[i].b = find_param(blob, "block" + std::to_string(i) + "_b", path);
    ck.params.blocks[i].stride = 2;
    ck.params.blocks[i].pad = 1;
  }
  auto setc = [&](Conv3d& c, const std::string& name, int64_t stride, int64_t pad) {
    c.w = find_param(blob, name + "_w", path);
    c.b = find_param(blob, name + "_b", path);
    c.stride = stride;
    c.pad = pad;
  };
  setc(ck.params.f1a, "f1a", 2, 1);
  setc(ck.params.f1b, "f1b", 1, 0);
  setc(ck.params.f2, "f2", 1, 0);
  setc(ck.params.f3, "f3", 1, 0);
  ck.params.hc_w = find_param(blob, "hc_w", path);
  ck.params.hc_b = find_param(blob, "hc_b", path);
  return ck;
}

}  // namespace mist
