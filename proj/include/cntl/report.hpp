#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cntl/harness.hpp"
#include "cntl/image_io.hpp"

namespace cntl {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
  std::string hex() const {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return buf;
  }
};

// Minimal vector figure rendered to SVG text or a PNG raster.
class Figure {
 public:
  Figure(int width, int height) : w_(width), h_(height) {}

  void line(double x1, double y1, double x2, double y2, Color c, double width = 1) {
    items_.push_back({Kind::line, x1, y1, x2, y2, width, c, {}, 0, false});
  }
  void rect(double x, double y, double w, double h, Color c, bool filled) {
    items_.push_back({Kind::rect, x, y, w, h, 1, c, {}, 0, filled});
  }
  void circle(double cx, double cy, double r, Color c) { items_.push_back({Kind::circle, cx, cy, r, 0, 1, c, {}, 0, true}); }
  // anchor: -1 left, 0 centre, 1 right; y is the text baseline
  void text(double x, double y, const std::string& s, int size, int anchor = -1, Color c = {}) {
    items_.push_back({Kind::text, x, y, 0, 0, 1, c, s, size, false, anchor});
  }

  std::string svg() const {
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w_) + "\" height=\"" +
                      std::to_string(h_) + "\" viewBox=\"0 0 " + std::to_string(w_) + " " + std::to_string(h_) +
                      "\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
    char buf[512];
    for (const auto& it : items_) {
      switch (it.kind) {
        case Kind::line:
          std::snprintf(buf, sizeof buf,
                        "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"%.1f\"/>\n",
                        it.a, it.b, it.c, it.d, it.color.hex().c_str(), it.width);
          break;
        case Kind::rect:
          std::snprintf(buf, sizeof buf, "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" %s=\"%s\"%s/>\n",
                        it.a, it.b, it.c, it.d, it.filled ? "fill" : "stroke", it.color.hex().c_str(),
                        it.filled ? "" : " fill=\"none\"");
          break;
        case Kind::circle:
          std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"%.1f\" fill=\"%s\"/>\n", it.a, it.b, it.c,
                        it.color.hex().c_str());
          break;
        case Kind::text: {
          const char* anchor = it.anchor < 0 ? "start" : it.anchor > 0 ? "end" : "middle";
          std::snprintf(buf, sizeof buf,
                        "<text x=\"%.1f\" y=\"%.1f\" font-family=\"monospace\" font-size=\"%d\" text-anchor=\"%s\" "
                        "fill=\"%s\">",
                        it.a, it.b, it.size, anchor, it.color.hex().c_str());
          out += buf;
          out += escape(it.str) + "</text>\n";
          continue;
        }
      }
      out += buf;
    }
    return out + "</svg>\n";
  }

  RgbImage raster() const {
    RgbImage img(h_, w_);
    for (const auto& it : items_) {
      switch (it.kind) {
        case Kind::line:
          stroke(img, it.a, it.b, it.c, it.d, std::max(0.5, it.width / 2), it.color);
          break;
        case Kind::rect:
          if (it.filled) {
            for (int y = int(std::lround(it.b)); y < int(std::lround(it.b + it.d)); ++y)
              for (int x = int(std::lround(it.a)); x < int(std::lround(it.a + it.c)); ++x)
                img.set(y, x, it.color.r, it.color.g, it.color.b);
          } else {
            const double x0 = it.a, y0 = it.b, x1 = it.a + it.c, y1 = it.b + it.d;
            stroke(img, x0, y0, x1, y0, 0.5, it.color);
            stroke(img, x1, y0, x1, y1, 0.5, it.color);
            stroke(img, x1, y1, x0, y1, 0.5, it.color);
            stroke(img, x0, y1, x0, y0, 0.5, it.color);
          }
          break;
        case Kind::circle:
          disc(img, it.a, it.b, it.c, it.color);
          break;
        case Kind::text: {
          const int scale = std::max(1, static_cast<int>(std::lround(it.size / 8.0)));
          const int adv = 6 * scale;
          const int width = static_cast<int>(it.str.size()) * adv - scale;
          int x = static_cast<int>(std::lround(it.a));
          if (it.anchor == 0) x -= width / 2;
          if (it.anchor > 0) x -= width;
          const int top = static_cast<int>(std::lround(it.b)) - 7 * scale;
          for (char ch : it.str) {
            const auto& g = glyph(ch);
            for (int row = 0; row < 7; ++row)
              for (int col = 0; col < 5; ++col)
                if (g[row] & (0x10 >> col))
                  for (int dy = 0; dy < scale; ++dy)
                    for (int dx = 0; dx < scale; ++dx)
                      img.set(top + row * scale + dy, x + col * scale + dx, it.color.r, it.color.g, it.color.b);
            x += adv;
          }
          break;
        }
      }
    }
    return img;
  }

  void save(const std::filesystem::path& stem) const {
    std::ofstream(stem.string() + ".svg") << svg();
    write_png(stem.string() + ".png", raster());
  }

 private:
  enum class Kind { line, rect, circle, text };
  struct Item {
    Kind kind;
    double a, b, c, d, width;
    Color color;
    std::string str;
    int size;
    bool filled;
    int anchor = -1;
  };

  static void stroke(RgbImage& img, double x1, double y1, double x2, double y2, double r, Color c) {
    const int n = std::max(1, static_cast<int>(std::ceil(std::hypot(x2 - x1, y2 - y1) * 2)));
    for (int i = 0; i <= n; ++i) {
      const double t = double(i) / n;
      disc(img, x1 + t * (x2 - x1), y1 + t * (y2 - y1), r, c);
    }
  }

  static void disc(RgbImage& img, double cx, double cy, double r, Color c) {
    for (int y = int(std::floor(cy - r)); y <= int(std::ceil(cy + r)); ++y)
      for (int x = int(std::floor(cx - r)); x <= int(std::ceil(cx + r)); ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r + 0.25) img.set(y, x, c.r, c.g, c.b);
  }

  static std::string escape(const std::string& s) {
    std::string o;
    for (char ch : s) {
      if (ch == '<') o += "&lt;";
      else if (ch == '>') o += "&gt;";
      else if (ch == '&') o += "&amp;";
      else o += ch;
    }
    return o;
  }

  // 5x7 bitmap glyphs; lowercase letters render as capitals.
  static const std::array<std::uint8_t, 7>& glyph(char ch) {
    static const std::array<std::uint8_t, 7> box{0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F};
    static const std::array<std::uint8_t, 7> space{0, 0, 0, 0, 0, 0, 0};
    static const std::array<std::array<std::uint8_t, 7>, 10> digits{{
        {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
        {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
        {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
        {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
        {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},
    }};
    static const std::array<std::array<std::uint8_t, 7>, 26> letters{{
        {0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11}, {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},
        {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}, {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C},
        {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},
        {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}, {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},
        {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}, {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},
        {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}, {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},
        {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}, {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11},
        {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},
        {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}, {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},
        {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}, {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},
        {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},
        {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}, {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},
        {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F},
    }};
    static const std::string punct = ".,-[]():/_=+%";
    static const std::array<std::array<std::uint8_t, 7>, 13> marks{{
        {0, 0, 0, 0, 0, 0x0C, 0x0C}, {0, 0, 0, 0, 0x0C, 0x04, 0x08}, {0, 0, 0, 0x1F, 0, 0, 0},
        {0x0E, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0E}, {0x0E, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0E},
        {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}, {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08},
        {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}, {0, 0x01, 0x02, 0x04, 0x08, 0x10, 0},
        {0, 0, 0, 0, 0, 0, 0x1F}, {0, 0, 0x1F, 0, 0x1F, 0, 0},
        {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}, {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03},
    }};
    if (ch == ' ') return space;
    if (ch >= '0' && ch <= '9') return digits[ch - '0'];
    if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
    if (ch >= 'A' && ch <= 'Z') return letters[ch - 'A'];
    if (const auto p = punct.find(ch); p != std::string::npos) return marks[p];
    return box;
  }

  int w_, h_;
  std::vector<Item> items_;
};

// ---------------------------------------------------------------------------
// Run summaries and the cross-run report

struct RunSummary {
  std::string name;
  std::filesystem::path dir;
  std::string spec;
  std::vector<double> ods, ois;
  Stat ods_stat, ois_stat;
};

// Reads aggregate.json; returns nothing (with a reason) for incomplete runs.
inline std::optional<RunSummary> load_run(const std::filesystem::path& dir, std::string* why = nullptr) {
  const auto path = dir / "aggregate.json";
  std::ifstream is(path);
  if (!is) {
    if (why) *why = "no aggregate.json";
    return std::nullopt;
  }
  try {
    nlohmann::json j;
    is >> j;
    RunSummary r;
    r.dir = dir;
    r.name = dir.filename().string();
    if (r.name.empty()) r.name = dir.parent_path().filename().string();
    for (const auto& f : j.at("folds")) {
      r.ods.push_back(f.at("ods").get<double>());
      r.ois.push_back(f.at("ois").get<double>());
      if (r.spec.empty()) r.spec = f.at("spec").get<std::string>();
    }
    if (r.ods.empty()) {
      if (why) *why = "aggregate.json lists no folds";
      return std::nullopt;
    }
    r.ods_stat = summarize(r.ods);
    r.ois_stat = summarize(r.ois);
    return r;
  } catch (const std::exception& e) {
    if (why) *why = std::string("unreadable aggregate.json: ") + e.what();
    return std::nullopt;
  }
}

// Box-and-strip plot of one metric across runs; folds are joined between
// neighbouring runs so paired differences are visible.
inline Figure fold_plot(const std::vector<RunSummary>& runs, bool ois) {
  const int col = 160, left = 70, top = 50, plot_h = 300;
  const int width = left + col * static_cast<int>(runs.size()) + 30, height = top + plot_h + 70;
  Figure fig(width, height);
  const char* metric = ois ? "OIS" : "ODS";
  fig.text(width / 2.0, 28, std::string("Fold-wise ") + metric, 16, 0);
  double lo = 1, hi = 0;
  for (const auto& r : runs)
    for (double v : ois ? r.ois : r.ods) lo = std::min(lo, v), hi = std::max(hi, v);
  lo = std::max(0.0, std::floor((lo - 0.02) * 20) / 20);
  hi = std::min(1.0, std::ceil((hi + 0.02) * 20) / 20);
  if (hi <= lo) hi = lo + 0.05;
  auto ypos = [&](double v) { return top + plot_h * (1 - (v - lo) / (hi - lo)); };
  const Color axis{0, 0, 0}, grid{220, 220, 220}, pair{170, 170, 170}, box{40, 90, 160}, dot{200, 60, 40};
  const int ticks = 5;
  for (int t = 0; t <= ticks; ++t) {
    const double v = lo + (hi - lo) * t / ticks;
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    fig.line(left, ypos(v), width - 20, ypos(v), grid);
    fig.text(left - 8, ypos(v) + 4, buf, 11, 1);
  }
  fig.line(left, top, left, top + plot_h, axis);
  fig.line(left, top + plot_h, width - 20, top + plot_h, axis);
  auto xpos = [&](std::size_t run, std::size_t fold, std::size_t n) {
    const double spread = n > 1 ? (double(fold) / double(n - 1) - 0.5) * 40 : 0;
    return left + col * (run + 0.5) + spread;
  };
  for (std::size_t r = 0; r + 1 < runs.size(); ++r) {
    const auto& a = ois ? runs[r].ois : runs[r].ods;
    const auto& b = ois ? runs[r + 1].ois : runs[r + 1].ods;
    for (std::size_t f = 0; f < std::min(a.size(), b.size()); ++f)
      fig.line(xpos(r, f, a.size()), ypos(a[f]), xpos(r + 1, f, b.size()), ypos(b[f]), pair);
  }
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& v = ois ? runs[r].ois : runs[r].ods;
    const Stat s = ois ? runs[r].ois_stat : runs[r].ods_stat;
    const double cx = left + col * (r + 0.5);
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    fig.line(cx, ypos(*mn), cx, ypos(s.q1), box);
    fig.line(cx, ypos(s.q3), cx, ypos(*mx), box);
    fig.rect(cx - 30, ypos(s.q3), 60, std::max(1.0, ypos(s.q1) - ypos(s.q3)), box, false);
    fig.line(cx - 30, ypos(s.median), cx + 30, ypos(s.median), box, 2);
    for (std::size_t f = 0; f < v.size(); ++f) fig.circle(xpos(r, f, v.size()), ypos(v[f]), 3, dot);
    std::string label = runs[r].name.size() > 20 ? runs[r].name.substr(0, 20) : runs[r].name;
    fig.text(cx, top + plot_h + 22, label, 11, 0);
    fig.text(cx, top + plot_h + 40, format_stat(s), 10, 0);
  }
  return fig;
}

inline std::string report_table(const std::vector<RunSummary>& runs) {
  std::size_t w = 5;
  for (const auto& r : runs) w = std::max(w, r.name.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s | folds | ODS                  | OIS\n", int(w), "run");
  out += buf;
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%-*s | %5zu | %s | %s\n", int(w), r.name.c_str(), r.ods.size(),
                  format_stat(r.ods_stat).c_str(), format_stat(r.ois_stat).c_str());
    out += buf;
  }
  return out;
}

inline void write_report(const std::vector<RunSummary>& runs, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  std::ofstream(out / "report.txt") << report_table(runs);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : runs)
    j.push_back({{"run", r.name},
                 {"spec", r.spec},
                 {"ods", r.ods},
                 {"ois", r.ois},
                 {"ods_summary", format_stat(r.ods_stat)},
                 {"ois_summary", format_stat(r.ois_stat)}});
  std::ofstream(out / "report.json") << j.dump(2) << "\n";
  fold_plot(runs, false).save(out / "fold_ods");
  fold_plot(runs, true).save(out / "fold_ois");
}

}  // namespace cntl
