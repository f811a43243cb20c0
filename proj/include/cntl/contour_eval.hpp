#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "cntl/loss.hpp"
#include "cntl/tensor.hpp"

namespace cntl {

struct MatchCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  double threshold = 0.0;

  // 1 when nothing is predicted.
  double precision() const { return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  // 1 when the reference is empty.
  double recall() const { return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double f() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
  bool operator==(const MatchCounts&) const = default;
};

struct EvalSummary {
  std::vector<double> thresholds;
  std::vector<std::vector<MatchCounts>> per_image;  // [image][threshold]
  std::vector<std::size_t> image_best;              // per-image best threshold index
  double ods_f = 0.0;
  double ods_threshold = 0.0;
  double ois_f = 0.0;
};

// 99 uniform thresholds 0.01 .. 0.99.
inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int k = 1; k <= 99; ++k) t.push_back(k / 100.0);
  return t;
}

// Matching radius in pixels for an h x w image.
inline double default_tolerance(int h, int w) { return 0.0075 * std::hypot(static_cast<double>(h), w); }

namespace detail {

// Two-subiteration thinning lookup tables indexed by the 8-neighbourhood code
// with bit k set for neighbour k counter-clockwise from east:
//   3 2 1
//   4 . 0
//   5 6 7
struct ThinTables {
  std::array<bool, 256> first{}, second{};
  ThinTables() {
    for (int n = 0; n < 256; ++n) {
      auto bit = [n](int i) { return ((n >> (i & 7)) & 1) != 0; };
      int crossings = 0;
      for (int i : {0, 2, 4, 6})
        if (!bit(i) && (bit(i + 1) || bit(i + 2))) ++crossings;
      int n1 = 0, n2 = 0;
      for (int k : {1, 3, 5, 7}) {
        n1 += bit(k) || bit(k - 1);
        n2 += bit(k) || bit(k + 1);
      }
      const int m = std::min(n1, n2);
      const bool g12 = crossings == 1 && (m == 2 || m == 3);
      const bool g3 = !((bit(1) || bit(2) || !bit(7)) && bit(0));
      const bool g3p = !((bit(5) || bit(6) || !bit(3)) && bit(4));
      first[n] = g12 && g3;
      second[n] = g12 && g3p;
    }
  }
};

inline const ThinTables& thin_tables() {
  static const ThinTables t;
  return t;
}

}  // namespace detail

// Iterated two-subiteration thinning to a fixed point; 8-connected skeleton,
// one pixel wide.
inline BinaryMask thin(const BinaryMask& in) {
  const int h = in.height(), w = in.width();
  std::vector<std::uint8_t> a = in.data();
  std::vector<std::uint8_t> code(a.size());
  const auto& tab = detail::thin_tables();
  auto px = [&](int r, int c) -> int { return r < 0 || c < 0 || r >= h || c >= w ? 0 : a[std::size_t(r) * w + c]; };
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      const auto& lut = pass == 0 ? tab.first : tab.second;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const std::size_t i = std::size_t(r) * w + c;
          if (!a[i]) continue;
          code[i] = static_cast<std::uint8_t>(px(r, c + 1) | px(r - 1, c + 1) << 1 | px(r - 1, c) << 2 |
                                              px(r - 1, c - 1) << 3 | px(r, c - 1) << 4 | px(r + 1, c - 1) << 5 |
                                              px(r + 1, c) << 6 | px(r + 1, c + 1) << 7);
        }
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && lut[code[i]]) {
          a[i] = 0;
          changed = true;
        }
    }
  }
  return BinaryMask(h, w, std::move(a));
}

namespace detail {

struct Pixel {
  int r, c;
};

inline std::vector<Pixel> pixels_of(const BinaryMask& m) {
  std::vector<Pixel> p;
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c)
      if (m(r, c)) p.push_back({r, c});
  return p;
}

inline void require_match_inputs(const BinaryMask& pred, const BinaryMask& gt, double tol) {
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw ShapeError("match_edges: prediction " + std::to_string(pred.height()) + "x" + std::to_string(pred.width()) +
                     " vs reference " + std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  if (!(tol > 0.0)) throw std::invalid_argument("match_edges: tolerance must be positive");
}

inline MatchCounts counts_from(std::int64_t matched, std::size_t n_pred, std::size_t n_gt) {
  MatchCounts m;
  m.tp = matched;
  m.fp = static_cast<std::int64_t>(n_pred) - matched;
  m.fn = static_cast<std::int64_t>(n_gt) - matched;
  return m;
}

// Maximum-cardinality bipartite matching (Hopcroft-Karp) on adjacency lists
// from left vertices to right vertices.
inline std::int64_t hopcroft_karp(const std::vector<std::vector<int>>& adj, int n_right) {
  const int n_left = static_cast<int>(adj.size());
  constexpr int kInf = std::numeric_limits<int>::max();
  std::vector<int> match_l(n_left, -1), match_r(n_right, -1), dist(n_left);
  std::vector<std::size_t> it(n_left);

  auto bfs = [&] {
    std::queue<int> q;
    bool found = false;
    for (int u = 0; u < n_left; ++u) {
      if (match_l[u] < 0) {
        dist[u] = 0;
        q.push(u);
      } else {
        dist[u] = kInf;
      }
    }
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (int v : adj[u]) {
        const int next = match_r[v];
        if (next < 0) {
          found = true;
        } else if (dist[next] == kInf) {
          dist[next] = dist[u] + 1;
          q.push(next);
        }
      }
    }
    return found;
  };

  // Iterative DFS along the BFS layering; a dead end advances its parent's
  // edge pointer.
  auto dfs = [&](int root) {
    std::vector<int> stack{root};
    while (!stack.empty()) {
      const int u = stack.back();
      if (it[u] == adj[u].size()) {
        dist[u] = kInf;
        stack.pop_back();
        if (!stack.empty()) ++it[stack.back()];
        continue;
      }
      const int next = match_r[adj[u][it[u]]];
      if (next < 0) {
        for (int lu : stack) {
          const int lv = adj[lu][it[lu]];
          match_l[lu] = lv;
          match_r[lv] = lu;
        }
        return true;
      }
      if (dist[next] == dist[u] + 1)
        stack.push_back(next);
      else
        ++it[u];
    }
    return false;
  };

  std::int64_t matching = 0;
  while (bfs()) {
    std::fill(it.begin(), it.end(), 0);
    for (int u = 0; u < n_left; ++u)
      if (match_l[u] < 0 && dfs(u)) ++matching;
  }
  return matching;
}

}  // namespace detail

// Maximum one-to-one correspondence between predicted and reference pixels
// within Euclidean distance `tol_px`.
inline MatchCounts match_edges(const BinaryMask& pred, const BinaryMask& gt, double tol_px) {
  detail::require_match_inputs(pred, gt, tol_px);
  const int h = gt.height(), w = gt.width();
  const auto pp = detail::pixels_of(pred);
  const auto gp = detail::pixels_of(gt);
  std::vector<int> gt_id(static_cast<std::size_t>(h) * w, -1);
  for (std::size_t i = 0; i < gp.size(); ++i) gt_id[std::size_t(gp[i].r) * w + gp[i].c] = static_cast<int>(i);
  const int rad = static_cast<int>(std::floor(tol_px));
  const double tol2 = tol_px * tol_px;
  std::vector<std::vector<int>> adj(pp.size());
  for (std::size_t i = 0; i < pp.size(); ++i) {
    for (int dr = -rad; dr <= rad; ++dr)
      for (int dc = -rad; dc <= rad; ++dc) {
        if (dr * dr + dc * dc > tol2) continue;
        const int r = pp[i].r + dr, c = pp[i].c + dc;
        if (r < 0 || c < 0 || r >= h || c >= w) continue;
        const int g = gt_id[std::size_t(r) * w + c];
        if (g >= 0) adj[i].push_back(g);
      }
  }
  return detail::counts_from(detail::hopcroft_karp(adj, static_cast<int>(gp.size())), pp.size(), gp.size());
}

// Reference matcher for small instances: all-pairs distance graph and one
// exhaustive augmenting-path search per predicted pixel.
inline MatchCounts match_edges_oracle(const BinaryMask& pred, const BinaryMask& gt, double tol_px) {
  detail::require_match_inputs(pred, gt, tol_px);
  const auto pp = detail::pixels_of(pred);
  const auto gp = detail::pixels_of(gt);
  if (pp.size() + gp.size() > 200)
    throw std::invalid_argument("match_edges_oracle: " + std::to_string(pp.size() + gp.size()) +
                                " pixels exceed the 200-pixel limit");
  std::vector<std::vector<bool>> edge(pp.size(), std::vector<bool>(gp.size()));
  for (std::size_t i = 0; i < pp.size(); ++i)
    for (std::size_t j = 0; j < gp.size(); ++j) {
      const double dr = pp[i].r - gp[j].r, dc = pp[i].c - gp[j].c;
      edge[i][j] = dr * dr + dc * dc <= tol_px * tol_px;
    }
  std::vector<int> owner(gp.size(), -1);
  std::vector<bool> seen;
  auto augment = [&](auto&& self, std::size_t u) -> bool {
    for (std::size_t v = 0; v < gp.size(); ++v) {
      if (!edge[u][v] || seen[v]) continue;
      seen[v] = true;
      if (owner[v] < 0 || self(self, static_cast<std::size_t>(owner[v]))) {
        owner[v] = static_cast<int>(u);
        return true;
      }
    }
    return false;
  };
  std::int64_t matched = 0;
  for (std::size_t u = 0; u < pp.size(); ++u) {
    seen.assign(gp.size(), false);
    if (augment(augment, u)) ++matched;
  }
  return detail::counts_from(matched, pp.size(), gp.size());
}

inline BinaryMask binarize(const FeatureMap<float>& prob, double t) {
  if (prob.batch() != 1 || prob.channels() != 1) throw ShapeError("binarize: expects a 1x1xHxW map");
  BinaryMask m(prob.height(), prob.width());
  for (int r = 0; r < prob.height(); ++r)
    for (int c = 0; c < prob.width(); ++c) m.set(r, c, prob.at(0, 0, r, c) >= t);
  return m;
}

// Counts per threshold: binarize at prob >= t, optionally thin, then match.
inline std::vector<MatchCounts> pr_curve(const FeatureMap<float>& prob, const BinaryMask& gt,
                                         const std::vector<double>& thresholds, double tol_px, bool thin_pred = true) {
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] < 0.0 || thresholds[i] > 1.0) throw std::invalid_argument("pr_curve: threshold outside [0,1]");
    if (i > 0 && thresholds[i] <= thresholds[i - 1]) throw std::invalid_argument("pr_curve: thresholds not ascending");
  }
  std::vector<MatchCounts> out;
  BinaryMask previous;
  MatchCounts last;
  for (double t : thresholds) {
    BinaryMask b = binarize(prob, t);
    if (out.empty() || !(b == previous)) {
      last = match_edges(thin_pred ? thin(b) : b, gt, tol_px);
      previous = std::move(b);
    }
    last.threshold = t;
    out.push_back(last);
  }
  return out;
}

// Best-F index over a counts row; ties resolve to the lower threshold.
inline std::size_t best_index(const std::vector<MatchCounts>& row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i].f() > row[best].f()) best = i;
  return best;
}

inline EvalSummary ods_ois(std::vector<std::vector<MatchCounts>> curves) {
  if (curves.empty()) throw std::invalid_argument("ods_ois: empty dataset");
  const std::size_t nt = curves[0].size();
  if (nt == 0) throw std::invalid_argument("ods_ois: empty threshold grid");
  EvalSummary s;
  for (const auto& m : curves[0]) s.thresholds.push_back(m.threshold);
  for (const auto& row : curves) {
    if (row.size() != nt) throw std::invalid_argument("ods_ois: images evaluated on different threshold grids");
    for (std::size_t k = 0; k < nt; ++k)
      if (row[k].threshold != s.thresholds[k])
        throw std::invalid_argument("ods_ois: images evaluated on different threshold grids");
  }
  std::vector<MatchCounts> pooled(nt);
  for (std::size_t k = 0; k < nt; ++k) {
    pooled[k].threshold = s.thresholds[k];
    for (const auto& row : curves) {
      pooled[k].tp += row[k].tp;
      pooled[k].fp += row[k].fp;
      pooled[k].fn += row[k].fn;
    }
  }
  const std::size_t ods = best_index(pooled);
  s.ods_f = pooled[ods].f();
  s.ods_threshold = s.thresholds[ods];
  MatchCounts ois;
  for (const auto& row : curves) {
    const std::size_t b = best_index(row);
    s.image_best.push_back(b);
    ois.tp += row[b].tp;
    ois.fp += row[b].fp;
    ois.fn += row[b].fn;
  }
  s.ois_f = ois.f();
  s.per_image = std::move(curves);
  return s;
}

inline constexpr const char* kResultsHeader = "record,image,threshold,tp,fp,fn,ods_f,ods_threshold,ois_f";

// One "pr" record per (image, threshold), then one "summary" record.
inline void write_results_csv(std::ostream& os, const EvalSummary& s, const std::vector<std::string>& image_names) {
  if (image_names.size() != s.per_image.size())
    throw std::invalid_argument("write_results_csv: one name per evaluated image required");
  auto fixed = [](double v, int digits) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return std::string(buf);
  };
  os << kResultsHeader << "\n";
  for (std::size_t i = 0; i < s.per_image.size(); ++i)
    for (const auto& m : s.per_image[i])
      os << "pr," << image_names[i] << "," << fixed(m.threshold, 2) << "," << m.tp << "," << m.fp << "," << m.fn
         << ",,,\n";
  os << "summary,,,,,," << fixed(s.ods_f, 6) << "," << fixed(s.ods_threshold, 2) << "," << fixed(s.ois_f, 6) << "\n";
}

}  // namespace cntl
