#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cntl/checkpoint.hpp"
#include "cntl/config.hpp"
#include "cntl/harness.hpp"
#include "cntl/report.hpp"

namespace cntl {

// Process exit codes.
enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_data = 2, exit_runtime = 3 };

namespace cli_detail {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

inline void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "configuration file of key = value lines");
  app->add_option("--set", c.sets, "override one key, e.g. --set train.max_epochs=5 (repeatable)");
}

// Defaults, then the config file, then `adjust`, then --set overrides.
inline RunConfig resolve(const Common& c, const std::function<void(RunConfig&)>& adjust = {}) {
  RunConfig cfg = c.config.empty() ? default_config() : load_config(c.config);
  if (adjust) adjust(cfg);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

// Refuses to reuse a non-empty directory unless forced.
inline void prepare_out(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir)) throw ConfigError("output path " + dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force)
      throw ConfigError("output directory " + dir.string() + " is not empty (pass --force to overwrite)");
  }
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
}

inline void write_snapshot(const fs::path& dir, const RunConfig& cfg) {
  std::ofstream os(dir / "config.conf");
  os << "# effective configuration\n" << config_snapshot(cfg);
  if (!os) throw DataError("cannot write " + (dir / "config.conf").string());
}

inline std::vector<Volume> load_data(const RunConfig& cfg, std::ostream& out) {
  if (!cfg.data.empty()) return load_dataset(cfg.data);
  out << "no data directory given; generating " << cfg.gen.num_subjects << " subjects in memory (gen.seed "
      << cfg.gen.seed << ")\n";
  return generate_dataset(cfg.gen);
}

inline FoldPlan plan_for(const RunConfig& cfg, const std::vector<Volume>& data) {
  std::vector<std::string> ids;
  for (const auto& v : data) ids.push_back(v.subject_id);
  return make_fold_plan(ids, cfg.cv.folds, cfg.cv.val_fraction, cfg.cv.seed);
}

inline void check_fold(int fold, const FoldPlan& plan) {
  if (fold < 0 || fold >= plan.k)
    throw ConfigError("--fold " + std::to_string(fold) + " is outside 0.." + std::to_string(plan.k - 1));
}

inline ProgressFn printer(std::ostream& out) {
  return [&out](const std::string& s) { out << s << std::endl; };
}

inline std::pair<int, int> parse_size(const std::string& s) {
  int h = 0, w = 0;
  char x = 0;
  std::istringstream is(s);
  if (!(is >> h >> x >> w) || (x != 'x' && x != 'X') || is.peek() != EOF || h <= 0 || w <= 0)
    throw ConfigError("expected a size like 320x480, got '" + s + "'");
  return {h, w};
}

inline GrayImage probability_image(const FeatureMap<float>& p) {
  GrayImage g(p.height(), p.width());
  for (std::size_t i = 0; i < g.pixels.size(); ++i)
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(p[i], 0.0f, 1.0f) * 255.0f));
  return g;
}

inline std::string with_commas(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

inline int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  RunConfig cfg = resolve(a.common);
  if (a.seed) cfg.gen.seed = *a.seed;
  cfg.validate();
  prepare_out(a.out, a.force);
  const auto vols = generate_dataset(cfg.gen);
  write_dataset(a.out, cfg.gen, vols);
  write_snapshot(a.out, cfg);
  std::size_t slices = 0, bulges = 0;
  for (const auto& v : vols) slices += v.slices.size(), bulges += v.bulge;
  out << "generated " << vols.size() << " subjects (" << bulges << " with bulges), " << slices << " slices of "
      << cfg.gen.height << "x" << cfg.gen.width << " in " << a.out << "\n";
  return exit_ok;
}

struct RunArgs {
  Common common;
  std::string out;
  std::string data;
  bool force = false;
  int fold = 0;
  std::optional<int> jobs;
  bool ablation = false;
};

inline RunConfig run_config(const RunArgs& a) {
  RunConfig cfg = resolve(a.common, [&](RunConfig& c) {
    if (!a.data.empty()) c.data = a.data;
  });
  if (a.jobs) cfg.cv.jobs = *a.jobs;
  cfg.validate();
  return cfg;
}

inline int cmd_train(const RunArgs& a, std::ostream& out) {
  const RunConfig cfg = run_config(a);
  const auto data = load_data(cfg, out);
  const FoldPlan plan = plan_for(cfg, data);
  check_fold(a.fold, plan);
  prepare_out(a.out, a.force);
  write_snapshot(a.out, cfg);
  std::ofstream(fs::path(a.out) / "fold_plan.json") << to_json(plan).dump(2) << "\n";
  CvOptions opt;
  opt.run_dir = a.out;
  opt.progress = printer(out);
  opt.thin = cfg.thin;
  run_fold(data, plan, a.fold, cfg.arch, cfg.train, opt);
  out << "checkpoint " << (fs::path(a.out) / fold_dir_name(a.fold) / "checkpoint.cntl").string() << "\n";
  return exit_ok;
}

inline int cmd_tune(const RunArgs& a, std::ostream& out) {
  const RunConfig cfg = run_config(a);
  if (cfg.arch.topology != Topology::upinet) throw ConfigError("tune searches UPI-Net placements; set arch.topology = upinet");
  const auto data = load_data(cfg, out);
  const FoldPlan plan = plan_for(cfg, data);
  check_fold(a.fold, plan);
  const Fold& f = plan.folds[a.fold];
  assert_no_leak(f, a.fold);
  prepare_out(a.out, a.force);
  write_snapshot(a.out, cfg);
  const SampleSet train = samples_of(data, f.train), val = samples_of(data, f.val);
  out << "tuning on fold " << a.fold << ": " << f.train.size() << " training and " << f.val.size()
      << " validation subjects; test subjects are not touched\n";
  const SearchResult res = hyperparam_search(
      cfg.arch,
      [&](const ArchitectureSpec& s) {
        Model<float> m(s, cfg.train.seed);
        train_model(m, cfg.train, train, val);
        return validation_loss(m, val, cfg.train);
      },
      printer(out));
  {
    std::ofstream os(fs::path(a.out) / "search.csv");
    write_search_csv(os, res.trials);
  }
  RunConfig tuned = cfg;
  tuned.arch = res.chosen;
  std::ofstream(fs::path(a.out) / "tuned.conf") << "# configuration with the selected architecture\n"
                                                << config_snapshot(tuned);
  const auto& c = res.chosen;
  out << "chosen m=" << c.gc_stages << " n=" << c.cge_stages << " N_G=" << c.groups << " N_C=" << c.fuse_channels
      << " (" << c.placement() << ")\n";
  return exit_ok;
}

inline int cmd_cv(const RunArgs& a, std::ostream& out) {
  const RunConfig cfg = run_config(a);
  const auto data = load_data(cfg, out);
  const FoldPlan plan = plan_for(cfg, data);
  prepare_out(a.out, a.force);
  write_snapshot(a.out, cfg);
  CvOptions opt;
  opt.inner_search = cfg.cv.inner_search;
  opt.jobs = cfg.cv.jobs;
  opt.run_dir = a.out;
  opt.progress = printer(out);
  opt.thin = cfg.thin;
  if (a.ablation) {
    const auto rows = ablation_suite(data, plan, cfg.arch, cfg.train, opt);
    for (const auto& r : rows)
      out << r.name << " | ODS " << format_stat(r.cv.ods) << " | OIS " << format_stat(r.cv.ois) << "\n";
  } else {
    const CvResult r = run_nested_cv(data, plan, cfg.arch, cfg.train, opt);
    out << "ODS " << format_stat(r.ods) << " | OIS " << format_stat(r.ois) << "\n";
  }
  return exit_ok;
}

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string predictions;
  bool force = false;
  bool no_thin = false;
  bool use_masks = false;
  std::optional<int> fold;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.checkpoint.empty() == !a.use_masks) throw ConfigError("eval needs exactly one of --checkpoint or --use-masks");
  RunConfig cfg = resolve(a.common, [&](RunConfig& c) {
    if (!a.data.empty()) c.data = a.data;
  });
  if (a.no_thin) cfg.thin = false;
  std::optional<Model<float>> model;
  if (!a.checkpoint.empty()) {
    model.emplace(load_checkpoint<float>(a.checkpoint));
    cfg.arch = model->spec();
  }
  cfg.validate();
  const auto data = load_data(cfg, out);
  SampleSet samples;
  if (a.fold) {
    const FoldPlan plan = plan_for(cfg, data);
    check_fold(*a.fold, plan);
    samples = samples_of(data, plan.folds[*a.fold].test);
  } else {
    for (const auto& v : data)
      for (const auto& s : v.slices) samples.push_back(&s);
  }
  if (samples.empty()) throw DataError("no images to evaluate");
  prepare_out(a.out, a.force);
  write_snapshot(a.out, cfg);

  std::vector<BinaryMask> masks;
  std::vector<FeatureMap<float>> probs;
  if (model) {
    probs = predict_samples(*model, samples, &masks);
  } else {
    for (const auto* s : samples) {
      const ImageSample c = eval_window(*s);
      FeatureMap<float> p(1, 1, c.mask.height(), c.mask.width());
      for (std::size_t i = 0; i < c.mask.size(); ++i) p[i] = c.mask.data()[i];
      probs.push_back(std::move(p));
      masks.push_back(c.mask);
    }
  }
  const EvalSummary sum = evaluate_maps(probs, masks, cfg.thin);
  std::vector<std::string> names;
  for (const auto* s : samples) names.push_back(image_name(*s));
  {
    std::ofstream os(fs::path(a.out) / "results.csv");
    write_results_csv(os, sum, names);
  }
  std::ofstream(fs::path(a.out) / "summary.json")
      << nlohmann::json{{"checkpoint", a.checkpoint},
                        {"spec", cfg.arch.canonical()},
                        {"thin", cfg.thin},
                        {"images", names.size()},
                        {"ods", sum.ods_f},
                        {"ods_threshold", sum.ods_threshold},
                        {"ois", sum.ois_f}}
             .dump(2)
      << "\n";
  if (!a.predictions.empty()) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[48];
      std::snprintf(name, sizeof name, "pred_%03d.png", samples[i]->slice_index);
      const fs::path dir = fs::path(a.predictions) / samples[i]->subject_id;
      std::error_code ec;
      fs::create_directories(dir, ec);
      if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
      write_png(dir / name, probability_image(probs[i]));
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu images: ODS %.4f (threshold %.2f) OIS %.4f%s\n", names.size(), sum.ods_f,
                sum.ods_threshold, sum.ois_f, cfg.thin ? "" : " [unthinned]");
  out << buf;
  return exit_ok;
}

struct InspectArgs {
  Common common;
  std::string arch;
  std::string checkpoint;
  std::string input = "320x480";
  bool activations = false;
  std::string image;
  int stage = 4;
  std::string out;
  bool force = false;
};

inline int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  if (!a.arch.empty() && !a.checkpoint.empty()) throw ConfigError("pass --arch or --checkpoint, not both");
  RunConfig cfg = resolve(a.common, [&](RunConfig& c) {
    if (!a.arch.empty()) set_config_value(c, "arch.topology", a.arch);
  });
  std::optional<Model<float>> loaded;
  if (!a.checkpoint.empty()) {
    loaded.emplace(load_checkpoint<float>(a.checkpoint));
    cfg.arch = loaded->spec();
  }
  cfg.validate();
  const auto [h, w] = parse_size(a.input);
  if (h % BackboneSpec::kDownsample || w % BackboneSpec::kDownsample)
    throw ConfigError("--input sides must be multiples of 16, got " + a.input);
  if (!loaded) loaded.emplace(cfg.arch, cfg.train.seed);
  const Model<float>& model = *loaded;
  const std::uint64_t macs = model.count_flops(h, w);
  const std::size_t params = model.count_params(), backbone = model.count_backbone_params();
  char buf[128];
  out << "architecture  " << to_string(cfg.arch.topology) << " " << cfg.arch.placement() << " N_G=" << cfg.arch.groups
      << " N_C=" << cfg.arch.fuse_channels << "\n";
  out << "spec          " << cfg.arch.canonical() << "\n";
  out << "params        " << with_commas(params) << " (backbone " << with_commas(backbone) << " + heads/blocks "
      << with_commas(params - backbone) << ")\n";
  std::snprintf(buf, sizeof buf, "%.2f M", params / 1e6);
  out << "params (M)    " << buf << "\n";
  out << "input         " << h << "x" << w << "\n";
  out << "MACs          " << with_commas(macs) << "\n";
  std::snprintf(buf, sizeof buf, "%.2f G", macs / 1e9);
  out << "FLOPs         " << buf << " (1 MAC = 1 FLOP)\n";
  std::snprintf(buf, sizeof buf, "%.2f G", 2 * macs / 1e9);
  out << "FLOPs         " << buf << " (1 MAC = 2 FLOPs)\n";

  if (a.activations) {
    if (a.image.empty() || a.out.empty()) throw ConfigError("--activations needs --image and --out");
    if (cfg.arch.input_channels != 1) throw ConfigError("--activations supports single-channel models only");
    const GrayImage img = read_png(a.image);
    ImageSample s;
    s.image = img;
    s.mask = BinaryMask(img.height, img.width);
    const ImageSample win = eval_window(s);
    const auto maps = model.export_activation_maps(normalize(win.image), a.stage);
    prepare_out(a.out, a.force);
    write_snapshot(a.out, cfg);
    for (std::size_t g = 0; g < maps.size(); ++g) {
      char name[48];
      std::snprintf(name, sizeof name, "stage%d_group%02zu.png", a.stage, g + 1);
      write_png(fs::path(a.out) / name, probability_image(maps[g]));
    }
    out << "wrote " << maps.size() << " importance maps of " << maps.front().height() << "x" << maps.front().width()
        << " to " << a.out << "\n";
  }
  return exit_ok;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
  bool force = false;
};

inline int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<RunSummary> runs;
  auto add = [&](const fs::path& dir, const std::string& name) {
    std::string why;
    if (auto r = load_run(dir, &why)) {
      if (!name.empty()) r->name = name;
      runs.push_back(std::move(*r));
    } else {
      err << "warning: skipping incomplete run " << dir.string() << ": " << why << "\n";
    }
  };
  for (const auto& d : a.runs) {
    const fs::path dir(d);
    if (!fs::exists(dir / "aggregate.json") && fs::exists(dir / "ablation.json")) {
      nlohmann::json j;
      try {
        std::ifstream(dir / "ablation.json") >> j;
        for (const auto& row : j) {
          const std::string v = row.at("variant").get<std::string>();
          add(dir / v, v);
        }
      } catch (const nlohmann::json::exception& e) {
        err << "warning: skipping " << dir.string() << ": unreadable ablation.json (" << e.what() << ")\n";
      }
      continue;
    }
    add(dir, "");
  }
  if (runs.empty()) throw DataError("none of the given run directories holds a completed run");
  prepare_out(a.out, a.force);
  write_report(runs, a.out);
  out << report_table(runs);
  out << "wrote report.txt, report.json, fold_ods/fold_ois (.svg, .png) to " << a.out << "\n";
  return exit_ok;
}

}  // namespace cli_detail

// Parses and runs one command; never throws.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"cntl: contour detection experiments on synthetic ultrasound data"};
  app.require_subcommand(1);
  app.name("cntl");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic dataset (PNGs + manifest.json)");
  add_common(g, gen.common);
  g->add_option("--out", gen.out, "dataset directory")->required();
  g->add_option("--seed", gen.seed, "generator seed (overrides gen.seed)");
  g->add_flag("--force", gen.force, "write into a non-empty directory");

  RunArgs train, tune, cv;
  auto add_run = [&](const char* name, const char* help, RunArgs& r) {
    auto* s = app.add_subcommand(name, help);
    add_common(s, r.common);
    s->add_option("--data", r.data, "dataset directory (default: generate from gen.* in memory)");
    s->add_option("--out", r.out, "run directory")->required();
    s->add_flag("--force", r.force, "write into a non-empty directory");
    return s;
  };
  add_run("train", "train and test one outer fold", train)
      ->add_option("--fold", train.fold, "outer fold index")
      ->capture_default_str();
  add_run("tune", "14-trial architecture search on one fold's train/validation split", tune)
      ->add_option("--fold", tune.fold, "outer fold index")
      ->capture_default_str();
  auto* c = add_run("cv", "k-fold cross-validation", cv);
  c->add_option("--jobs", cv.jobs, "folds trained concurrently (overrides cv.jobs)");
  c->add_flag("--ablation", cv.ablation, "run the Coord-Conv / side-output ablation variants");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint (ODS/OIS)");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  e->add_option("--data", ev.data, "dataset directory (default: generate from gen.* in memory)");
  e->add_option("--out", ev.out, "results directory")->required();
  e->add_option("--predictions", ev.predictions, "also write probability maps as PNGs under this directory");
  e->add_option("--fold", ev.fold, "evaluate only the test subjects of this outer fold");
  e->add_flag("--no-thin", ev.no_thin, "match predictions without thinning");
  e->add_flag("--use-masks", ev.use_masks, "evaluate the reference masks themselves (sanity check)");
  e->add_flag("--force", ev.force, "write into a non-empty directory");

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "parameter and MAC counts; CGE importance maps");
  add_common(i, in.common);
  i->add_option("--arch", in.arch, "hed | casenet | dsfpn | upinet");
  i->add_option("--checkpoint", in.checkpoint, "inspect a trained checkpoint");
  i->add_option("--input", in.input, "input size HxW")->capture_default_str();
  i->add_flag("--activations", in.activations, "write the CGE importance maps for --image");
  i->add_option("--image", in.image, "grayscale PNG for --activations");
  i->add_option("--stage", in.stage, "stage (1-5) whose CGE maps are written")->capture_default_str();
  i->add_option("--out", in.out, "directory for --activations");
  i->add_flag("--force", in.force, "write into a non-empty directory");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "tables and fold-wise plots across run directories");
  r->add_option("--runs", rep.runs, "run directories (cv outputs)")->required();
  r->add_option("--out", rep.out, "report directory")->required();
  r->add_flag("--force", rep.force, "write into a non-empty directory");

  Common cfg_common;
  bool effective = false;
  auto* k = app.add_subcommand("config", "list every configuration key with its default");
  add_common(k, cfg_common);
  k->add_flag("--effective", effective, "print the resolved configuration instead");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*g) return cmd_generate(gen, out);
    if (app.got_subcommand("train")) return cmd_train(train, out);
    if (app.got_subcommand("tune")) return cmd_tune(tune, out);
    if (*c) return cmd_cv(cv, out);
    if (*e) return cmd_eval(ev, out);
    if (*i) return cmd_inspect(in, out);
    if (*r) return cmd_report(rep, out, err);
    if (*k) {
      out << (effective ? config_snapshot(resolve(cfg_common)) : config_reference());
      return exit_ok;
    }
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_usage;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return exit_data;
  } catch (const LoadError& ex) {
    err << "load error: " << ex.what() << "\n";
    return exit_data;
  } catch (const ShapeError& ex) {
    err << "data error: " << ex.what() << "\n";
    return exit_data;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "data error: " << ex.what() << "\n";
    return exit_data;
  } catch (const LeakError& ex) {
    err << "leak detected: " << ex.what() << "\n";
    return exit_runtime;
  } catch (const TrainingError& ex) {
    err << "training failed: " << ex.what() << "\n";
    return exit_runtime;
  } catch (const std::exception& ex) {
    err << "runtime error: " << ex.what() << "\n";
    return exit_runtime;
  }
  return exit_usage;
}

}  // namespace cntl
