#pragma once

#include <cmath>
#include <string>

#include "cntl/autograd.hpp"
#include "cntl/ops.hpp"
#include "cntl/random.hpp"
#include "cntl/tensor.hpp"

namespace cntl {

inline constexpr double kGroupNormEps = 1e-5;

// Zero-mean Gaussian with variance 2 / fan_in.
template <typename T>
Tensor<T> he_normal(Shape s, int fan_in, Rng& rng) {
  Tensor<T> t(s);
  const double stddev = std::sqrt(2.0 / fan_in);
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
Var<T> vector_param(int n, T fill) {
  return leaf(Tensor<T>(1, n, 1, 1, fill));
}

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

// Global context block: attention pooling, bottleneck transform, broadcast add.
template <typename T>
struct GCBlockParams {
  int channels = 0;
  int reduction = 16;
  Var<T> key_w, key_b;      // 1x1 conv C -> 1
  Var<T> down_w, down_b;    // 1x1 conv C -> ceil(C/r)
  Var<T> norm_g, norm_b;    // layer norm over the bottleneck channels
  Var<T> up_w, up_b;        // 1x1 conv ceil(C/r) -> C

  int bottleneck() const { return ceil_div(channels, reduction); }

  static GCBlockParams init(int channels, int reduction, Rng& rng) {
    if (channels < 1 || reduction < 1) throw ConfigError("gc block: channels and reduction must be positive");
    GCBlockParams p;
    p.channels = channels;
    p.reduction = reduction;
    const int cr = p.bottleneck();
    p.key_w = leaf(he_normal<T>({1, channels, 1, 1}, channels, rng));
    p.key_b = vector_param<T>(1, T(0));
    p.down_w = leaf(he_normal<T>({cr, channels, 1, 1}, channels, rng));
    p.down_b = vector_param<T>(cr, T(0));
    p.norm_g = vector_param<T>(cr, T(1));
    p.norm_b = vector_param<T>(cr, T(0));
    p.up_w = leaf(he_normal<T>({channels, cr, 1, 1}, cr, rng));
    p.up_b = vector_param<T>(channels, T(0));
    return p;
  }

  static std::size_t parameter_count(int channels, int reduction) {
    const std::size_t c = channels, cr = ceil_div(channels, reduction);
    return (c + 1) + (c * cr + cr) + (cr * c + c) + 2 * cr;
  }
};

// Convolutional group-wise enhancement: grouped 1x1 conv to one map per group,
// spatial group norm, sigmoid gate multiplied back onto each group.
template <typename T>
struct CGEBlockParams {
  int channels = 0;
  int groups = 0;
  Var<T> group_w, group_b;  // N_G x (C / N_G) x 1 x 1, N_G
  Var<T> gamma, beta;       // N_G

  static CGEBlockParams init(int channels, int groups, Rng& rng) {
    if (groups < 1 || channels % groups != 0)
      throw ConfigError("cge block: N_G=" + std::to_string(groups) + " does not divide C=" + std::to_string(channels));
    CGEBlockParams p;
    p.channels = channels;
    p.groups = groups;
    const int per = channels / groups;
    p.group_w = leaf(he_normal<T>({groups, per, 1, 1}, per, rng));
    p.group_b = vector_param<T>(groups, T(0));
    p.gamma = vector_param<T>(groups, T(1));
    p.beta = vector_param<T>(groups, T(0));
    return p;
  }

  static std::size_t parameter_count(int channels, int groups) {
    return static_cast<std::size_t>(channels) + 3 * static_cast<std::size_t>(groups);
  }
};

template <typename T>
Var<T> gc_block(const Var<T>& x, const GCBlockParams<T>& p) {
  if (x->value.channels() != p.channels)
    throw ConfigError("gc block expects " + std::to_string(p.channels) + " channels, got " +
                      std::to_string(x->value.channels()));
  auto attention = ops::spatial_softmax(ops::conv2d(x, p.key_w, p.key_b, 0));
  auto context = ops::weighted_pool(x, attention);
  auto t = ops::conv2d(context, p.down_w, p.down_b, 0);
  t = ops::relu(ops::layer_norm_channels(t, p.norm_g, p.norm_b, T(kGroupNormEps)));
  t = ops::conv2d(t, p.up_w, p.up_b, 0);
  return ops::add_broadcast(x, t);
}

template <typename T>
struct CGEOutput {
  Var<T> out;
  Var<T> gate;  // B x N_G x H x W importance maps
};

template <typename T>
CGEOutput<T> cge_block(const Var<T>& x, const CGEBlockParams<T>& p) {
  if (x->value.channels() != p.channels)
    throw ConfigError("cge block expects " + std::to_string(p.channels) + " channels, got " +
                      std::to_string(x->value.channels()));
  auto maps = ops::conv2d(x, p.group_w, p.group_b, 0, p.groups);
  auto gate = ops::sigmoid(ops::group_norm_1ch(maps, p.gamma, p.beta, T(kGroupNormEps)));
  return {ops::group_gate(x, gate), gate};
}

// Pure (non-recording) forms.

template <typename T>
FeatureMap<T> coordconv_augment(const FeatureMap<T>& x) {
  NoGradGuard ng;
  return ops::coordconv_augment(constant(x))->value;
}

template <typename T>
FeatureMap<T> spatial_softmax(const FeatureMap<T>& logits) {
  NoGradGuard ng;
  return ops::spatial_softmax(constant(logits))->value;
}

template <typename T>
FeatureMap<T> group_norm_1ch(const FeatureMap<T>& m, const Tensor<T>& gamma, const Tensor<T>& beta) {
  NoGradGuard ng;
  return ops::group_norm_1ch(constant(m), constant(gamma), constant(beta), T(kGroupNormEps))->value;
}

template <typename T>
FeatureMap<T> gc_forward(const FeatureMap<T>& x, const GCBlockParams<T>& p) {
  NoGradGuard ng;
  return gc_block(constant(x), p)->value;
}

template <typename T>
FeatureMap<T> cge_forward(const FeatureMap<T>& x, const CGEBlockParams<T>& p) {
  NoGradGuard ng;
  return cge_block(constant(x), p).out->value;
}

}  // namespace cntl
