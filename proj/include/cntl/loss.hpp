#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cntl/autograd.hpp"
#include "cntl/ops.hpp"
#include "cntl/tensor.hpp"

namespace cntl {

// H x W binary reference map with cached class counts.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int h, int w) : h_(h), w_(w), data_(static_cast<std::size_t>(h) * w, 0) {}
  BinaryMask(int h, int w, std::vector<std::uint8_t> data) : h_(h), w_(w), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(h) * w) throw ShapeError("mask data size does not match dimensions");
    for (auto& v : data_) v = v ? 1 : 0;
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::uint8_t operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * w_ + c]; }
  void set(int r, int c, bool v) { data_[static_cast<std::size_t>(r) * w_ + c] = v ? 1 : 0; }
  const std::vector<std::uint8_t>& data() const { return data_; }

  std::size_t pos_count() const {
    std::size_t n = 0;
    for (auto v : data_) n += v;
    return n;
  }
  std::size_t neg_count() const { return data_.size() - pos_count(); }

  bool operator==(const BinaryMask&) const = default;

 private:
  int h_ = 0;
  int w_ = 0;
  std::vector<std::uint8_t> data_;
};

struct BalanceWeight {
  double omega = 0.0;
  bool no_positives = false;  // degenerate slice: positive term vanishes
};

// omega = |Y-| / |Y+|; 0 (flagged) when the mask has no positives.
inline BalanceWeight class_balance_weight(const BinaryMask& mask) {
  const std::size_t pos = mask.pos_count();
  if (pos == 0) return {0.0, true};
  return {static_cast<double>(mask.size() - pos) / static_cast<double>(pos), false};
}

namespace detail {
// log(1 + exp(z)) without overflow.
template <typename T>
T softplus(T z) {
  return z > T(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}
template <typename T>
T stable_sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}
}  // namespace detail

// Class-balanced binary cross-entropy on B x 1 x H x W logits, one mask per
// item, averaged over the batch. `omega_override` (>= 0) replaces the per-image
// balance weight.
template <typename T>
Var<T> balanced_bce(const Var<T>& logits, const std::vector<BinaryMask>& masks, double omega_override = -1.0) {
  const Shape s = logits->value.shape();
  if (s.c != 1) throw ShapeError("balanced_bce: logits must have one channel, got " + s.str());
  if (static_cast<int>(masks.size()) != s.b)
    throw ShapeError("balanced_bce: " + std::to_string(masks.size()) + " masks for batch of " + std::to_string(s.b));
  const std::size_t hw = s.plane();
  std::vector<double> omegas(s.b);
  double total = 0.0;
  for (int b = 0; b < s.b; ++b) {
    const BinaryMask& m = masks[b];
    if (m.height() != s.h || m.width() != s.w)
      throw ShapeError("balanced_bce: mask " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                       " does not match logits " + s.str());
    const double omega = omega_override >= 0 ? omega_override : class_balance_weight(m).omega;
    omegas[b] = omega;
    const T* o = logits->value.plane(b, 0);
    double pos = 0.0, neg = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      // -log sigma(o) = softplus(-o); -log(1 - sigma(o)) = softplus(o)
      if (m.data()[i])
        pos += static_cast<double>(detail::softplus(-o[i]));
      else
        neg += static_cast<double>(detail::softplus(o[i]));
    }
    total += (omega * pos + neg) / static_cast<double>(hw);
  }
  Tensor<T> out(1, 1, 1, 1, static_cast<T>(total / s.b));
  return make_result<T>(std::move(out), {logits}, [masks, omegas, s, hw](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T scale = self.grad[0] / static_cast<T>(s.b * static_cast<double>(hw));
    for (int b = 0; b < s.b; ++b) {
      const T* o = self.parents[0]->value.plane(b, 0);
      T* d = g.plane(b, 0);
      const auto& m = masks[b].data();
      const T omega = static_cast<T>(omegas[b]);
      for (std::size_t i = 0; i < hw; ++i) {
        const T p = detail::stable_sigmoid(o[i]);
        d[i] += scale * (m[i] ? omega * (p - T(1)) : p);
      }
    }
  });
}

template <typename T>
double balanced_bce_value(const FeatureMap<T>& logits, const std::vector<BinaryMask>& masks,
                          double omega_override = -1.0) {
  NoGradGuard ng;
  return static_cast<double>(balanced_bce(constant(logits), masks, omega_override)->value[0]);
}

template <typename T>
struct NamedOutput {
  std::string name;
  Var<T> logits;
};

template <typename T>
struct LossBreakdown {
  Var<T> total;
  std::vector<std::pair<std::string, double>> terms;
};

// Sum of balanced_bce over every output map.
template <typename T>
LossBreakdown<T> total_loss(const std::vector<NamedOutput<T>>& outputs, const std::vector<BinaryMask>& masks) {
  LossBreakdown<T> r;
  std::vector<Var<T>> terms;
  for (const auto& o : outputs) {
    auto l = balanced_bce(o.logits, masks);
    r.terms.emplace_back(o.name, static_cast<double>(l->value[0]));
    terms.push_back(std::move(l));
  }
  r.total = ops::sum_scalars(terms);
  return r;
}

// Elementwise sigmoid of fused logits.
template <typename T>
FeatureMap<T> predict(const FeatureMap<T>& fused_logits) {
  FeatureMap<T> p(fused_logits.shape());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = detail::stable_sigmoid(fused_logits[i]);
  return p;
}

}  // namespace cntl
