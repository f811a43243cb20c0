#pragma once

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cntl/architectures.hpp"
#include "cntl/harness.hpp"
#include "cntl/synth_data.hpp"

namespace cntl {

struct CvSettings {
  int folds = 10;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
  bool inner_search = false;
  int jobs = 1;
};

struct RunConfig {
  GenConfig gen;
  ArchitectureSpec arch = ArchitectureSpec::defaults(Topology::upinet);
  TrainConfig train;
  CvSettings cv;
  bool thin = true;
  std::string device = "cpu";
  std::string data;  // dataset directory

  void validate() const {
    gen.validate();
    arch.validate();
    train.validate();
    if (cv.folds < 2) throw ConfigError("cv.folds must be at least 2");
    if (cv.val_fraction <= 0 || cv.val_fraction >= 1) throw ConfigError("cv.val_fraction must lie in (0,1)");
    if (cv.jobs < 1) throw ConfigError("cv.jobs must be positive");
    if (device != "cpu") throw ConfigError("device '" + device + "' is not available; this build supports: cpu");
  }
};

namespace config_detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

inline long long parse_int(const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("expected an integer, got '" + v + "'");
  return x;
}

inline double parse_double(const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

}  // namespace config_detail

struct ConfigField {
  std::string key;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// Every configurable key, in snapshot order.
inline const std::vector<ConfigField>& config_fields() {
  using namespace config_detail;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto add_int = [&](std::string key, std::string doc, auto member) {
      f.push_back({key, doc, [member](const RunConfig& c) { return std::to_string(member(c)); },
                   [member](RunConfig& c, const std::string& v) {
                     member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_int(v));
                   }});
    };
    auto add_double = [&](std::string key, std::string doc, auto member) {
      f.push_back({key, doc, [member](const RunConfig& c) { return fmt(member(c)); },
                   [member](RunConfig& c, const std::string& v) { member(c) = parse_double(v); }});
    };
    auto add_bool = [&](std::string key, std::string doc, auto member) {
      f.push_back({key, doc,
                   [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); },
                   [member](RunConfig& c, const std::string& v) { member(c) = parse_bool(v); }});
    };
    auto add_string = [&](std::string key, std::string doc, auto member) {
      f.push_back({key, doc, [member](const RunConfig& c) { return member(c); },
                   [member](RunConfig& c, const std::string& v) { member(c) = v; }});
    };
    // generator
    add_int("gen.seed", "generator seed", [](auto& c) -> auto& { return c.gen.seed; });
    add_int("gen.subjects", "number of volumes", [](auto& c) -> auto& { return c.gen.num_subjects; });
    add_int("gen.slices_min", "fewest slices per volume", [](auto& c) -> auto& { return c.gen.slices_min; });
    add_int("gen.slices_max", "most slices per volume", [](auto& c) -> auto& { return c.gen.slices_max; });
    add_int("gen.height", "slice height (px)", [](auto& c) -> auto& { return c.gen.height; });
    add_int("gen.width", "slice width (px)", [](auto& c) -> auto& { return c.gen.width; });
    add_double("gen.grain", "speckle correlation length (px)", [](auto& c) -> auto& { return c.gen.grain; });
    add_int("gen.control_min", "fewest interface control points", [](auto& c) -> auto& { return c.gen.control_min; });
    add_int("gen.control_max", "most interface control points", [](auto& c) -> auto& { return c.gen.control_max; });
    add_double("gen.walk_step", "per-slice control point drift (fraction of height)",
               [](auto& c) -> auto& { return c.gen.walk_step; });
    add_int("gen.distractors_min", "fewest distractor layers", [](auto& c) -> auto& { return c.gen.distractors_min; });
    add_int("gen.distractors_max", "most distractor layers", [](auto& c) -> auto& { return c.gen.distractors_max; });
    add_double("gen.dropout_probability", "chance a volume has a low-contrast band",
               [](auto& c) -> auto& { return c.gen.dropout_probability; });
    add_double("gen.bulge_fraction", "fraction of volumes with a bulging interface",
               [](auto& c) -> auto& { return c.gen.bulge_fraction; });
    // architecture
    f.push_back({"arch.topology", "hed | casenet | dsfpn | upinet (resets placement and coordconv to its defaults)",
                 [](const RunConfig& c) { return to_string(c.arch.topology); },
                 [](RunConfig& c, const std::string& v) {
                   const auto d = ArchitectureSpec::defaults(parse_topology(v));
                   c.arch.topology = d.topology;
                   c.arch.gc_stages = d.gc_stages;
                   c.arch.cge_stages = d.cge_stages;
                   c.arch.coordconv = d.coordconv;
                 }});
    f.push_back({"arch.placement", "GC/CGE placement mG-nC (upinet only)",
                 [](const RunConfig& c) { return c.arch.placement(); },
                 [](RunConfig& c, const std::string& v) {
                   int m = -1, n = -1;
                   char g = 0, dash = 0, cc = 0;
                   std::istringstream is(v);
                   if (!(is >> m >> g >> dash >> n >> cc) || g != 'G' || dash != '-' || cc != 'C' || is.peek() != EOF)
                     throw ConfigError("expected a placement like 3G-2C, got '" + v + "'");
                   c.arch.gc_stages = m;
                   c.arch.cge_stages = n;
                 }});
    add_int("arch.groups", "CGE groups N_G", [](auto& c) -> auto& { return c.arch.groups; });
    add_int("arch.channels", "fused projection channels N_C", [](auto& c) -> auto& { return c.arch.fuse_channels; });
    add_bool("arch.coordconv", "append coordinate channels to the input", [](auto& c) -> auto& { return c.arch.coordconv; });
    add_bool("arch.side_output", "supervise side outputs", [](auto& c) -> auto& { return c.arch.side_output; });
    add_int("arch.input_channels", "image channels (1 or 3)", [](auto& c) -> auto& { return c.arch.input_channels; });
    add_int("arch.width_divisor", "divide every backbone width by this", [](auto& c) -> auto& { return c.arch.width_divisor; });
    add_int("arch.gc_reduction", "GC bottleneck ratio r", [](auto& c) -> auto& { return c.arch.gc_reduction; });
    add_int("arch.fpn_width", "DS-FPN pyramid width", [](auto& c) -> auto& { return c.arch.fpn_width; });
    // training
    add_double("train.learning_rate", "Adam step size", [](auto& c) -> auto& { return c.train.learning_rate; });
    add_double("train.weight_decay", "decoupled decay on conv weights", [](auto& c) -> auto& { return c.train.weight_decay; });
    add_int("train.batch_size", "mini-batch size", [](auto& c) -> auto& { return c.train.batch_size; });
    add_int("train.max_epochs", "epoch limit", [](auto& c) -> auto& { return c.train.max_epochs; });
    add_int("train.patience", "early-stopping patience (epochs)", [](auto& c) -> auto& { return c.train.patience; });
    add_int("train.crop_height", "training crop height (multiple of 16)", [](auto& c) -> auto& { return c.train.crop_height; });
    add_int("train.crop_width", "training crop width (multiple of 16)", [](auto& c) -> auto& { return c.train.crop_width; });
    add_double("train.beta1", "Adam beta1", [](auto& c) -> auto& { return c.train.beta1; });
    add_double("train.beta2", "Adam beta2", [](auto& c) -> auto& { return c.train.beta2; });
    add_double("train.eps", "Adam epsilon", [](auto& c) -> auto& { return c.train.eps; });
    add_int("train.seed", "initialization and batching seed", [](auto& c) -> auto& { return c.train.seed; });
    add_int("train.max_steps", "optimizer step cap (0 = none)", [](auto& c) -> auto& { return c.train.max_steps; });
    f.push_back({"train.early_stop", "loss | ods",
                 [](const RunConfig& c) { return std::string(c.train.ods_early_stop ? "ods" : "loss"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v != "loss" && v != "ods") throw ConfigError("train.early_stop must be loss or ods");
                   c.train.ods_early_stop = v == "ods";
                 }});
    // cross-validation
    add_int("cv.folds", "outer folds k", [](auto& c) -> auto& { return c.cv.folds; });
    add_double("cv.val_fraction", "validation share of non-test subjects", [](auto& c) -> auto& { return c.cv.val_fraction; });
    add_int("cv.seed", "fold assignment seed", [](auto& c) -> auto& { return c.cv.seed; });
    add_bool("cv.inner_search", "run the 14-trial search inside every fold", [](auto& c) -> auto& { return c.cv.inner_search; });
    add_int("cv.jobs", "folds trained concurrently", [](auto& c) -> auto& { return c.cv.jobs; });
    // evaluation and plumbing
    add_bool("eval.thin", "thin predictions before matching", [](auto& c) -> auto& { return c.thin; });
    add_string("device", "compute device (default from CNTL_DEVICE)", [](auto& c) -> auto& { return c.device; });
    add_string("data", "dataset directory", [](auto& c) -> auto& { return c.data; });
    return f;
  }();
  return fields;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields())
    if (f.key == key) {
      try {
        f.set(c, value);
      } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
      }
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig default_config() {
  RunConfig c;
  if (const char* d = std::getenv("CNTL_DEVICE"); d && *d) c.device = d;
  return c;
}

// Applies "key = value" lines; '#' starts a comment.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(n) + ": expected key = value");
    try {
      set_config_value(c, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig c = default_config();
  apply_config_text(c, ss.str(), path.string());
  return c;
}

// Full effective configuration; loading it reproduces `c` exactly.
inline std::string config_snapshot(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

inline std::string config_reference() {
  const RunConfig d;
  std::string out;
  for (const auto& f : config_fields()) out += f.key + " (default " + f.get(d) + "): " + f.doc + "\n";
  return out;
}

}  // namespace cntl
