#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cntl/architectures.hpp"
#include "cntl/checkpoint.hpp"
#include "cntl/contour_eval.hpp"
#include "cntl/loss.hpp"
#include "cntl/synth_data.hpp"

namespace cntl {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LeakError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Fold plans

struct Fold {
  std::vector<std::string> test, train, val;
};

struct FoldPlan {
  int k = 10;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
  std::vector<Fold> folds;
};

// Throws LeakError if any subject holds two roles within a fold.
inline void assert_no_leak(const Fold& f, int index) {
  std::map<std::string, std::string> role;
  auto claim = [&](const std::vector<std::string>& ids, const char* name) {
    for (const auto& id : ids) {
      const auto [it, fresh] = role.emplace(id, name);
      if (!fresh)
        throw LeakError("fold " + std::to_string(index) + ": subject " + id + " appears in both " + it->second +
                        " and " + name);
    }
  };
  claim(f.test, "test");
  claim(f.train, "train");
  claim(f.val, "val");
}

inline void validate_plan(const FoldPlan& p, const std::vector<std::string>& subjects) {
  if (static_cast<int>(p.folds.size()) != p.k) throw LeakError("fold plan lists " + std::to_string(p.folds.size()) +
                                                              " folds, expected " + std::to_string(p.k));
  std::multiset<std::string> tested;
  for (int i = 0; i < p.k; ++i) {
    assert_no_leak(p.folds[i], i);
    tested.insert(p.folds[i].test.begin(), p.folds[i].test.end());
  }
  const std::multiset<std::string> all(subjects.begin(), subjects.end());
  if (tested != all) throw LeakError("test folds do not partition the subject set");
}

// Shuffled subjects are dealt into k contiguous test blocks whose sizes differ
// by at most one; the remaining subjects of each fold are split train/val.
inline FoldPlan make_fold_plan(std::vector<std::string> subjects, int k = 10, double val_fraction = 0.2,
                               std::uint64_t seed = 1) {
  if (k < 2) throw ConfigError("k must be at least 2");
  if (static_cast<int>(subjects.size()) < k)
    throw ConfigError("need at least k=" + std::to_string(k) + " subjects, got " + std::to_string(subjects.size()));
  if (val_fraction <= 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must lie in (0,1)");
  std::sort(subjects.begin(), subjects.end());
  if (std::adjacent_find(subjects.begin(), subjects.end()) != subjects.end())
    throw ConfigError("duplicate subject ids");
  const auto original = subjects;
  Rng rng(derive_seed(seed, 0xF01D));
  rng.shuffle(subjects.begin(), subjects.end());
  FoldPlan plan;
  plan.k = k;
  plan.val_fraction = val_fraction;
  plan.seed = seed;
  const int n = static_cast<int>(subjects.size());
  for (int i = 0; i < k; ++i) {
    const int lo = i * n / k, hi = (i + 1) * n / k;
    Fold f;
    f.test.assign(subjects.begin() + lo, subjects.begin() + hi);
    std::vector<std::string> rest;
    for (int j = 0; j < n; ++j)
      if (j < lo || j >= hi) rest.push_back(subjects[j]);
    Rng frng(derive_seed(seed, 100 + static_cast<std::uint64_t>(i)));
    frng.shuffle(rest.begin(), rest.end());
    const int nval = std::clamp(static_cast<int>(std::lround(val_fraction * rest.size())), 1,
                                static_cast<int>(rest.size()) - 1);
    f.val.assign(rest.begin(), rest.begin() + nval);
    f.train.assign(rest.begin() + nval, rest.end());
    std::sort(f.test.begin(), f.test.end());
    std::sort(f.val.begin(), f.val.end());
    std::sort(f.train.begin(), f.train.end());
    plan.folds.push_back(std::move(f));
  }
  validate_plan(plan, original);
  return plan;
}

inline nlohmann::json to_json(const FoldPlan& p) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : p.folds) folds.push_back({{"test", f.test}, {"train", f.train}, {"val", f.val}});
  return {{"k", p.k}, {"val_fraction", p.val_fraction}, {"seed", p.seed}, {"folds", folds}};
}

inline FoldPlan fold_plan_from_json(const nlohmann::json& j) {
  FoldPlan p;
  p.k = j.at("k").get<int>();
  p.val_fraction = j.at("val_fraction").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& f : j.at("folds"))
    p.folds.push_back({f.at("test").get<std::vector<std::string>>(), f.at("train").get<std::vector<std::string>>(),
                       f.at("val").get<std::vector<std::string>>()});
  return p;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 2e-4;
  int batch_size = 8;
  int max_epochs = 40;
  int patience = 5;
  int crop_height = 320;
  int crop_width = 480;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  int max_steps = 0;          // 0 = no step cap
  bool ods_early_stop = false;  // stop on validation ODS instead of loss

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid training config: " + what);
    };
    need(learning_rate > 0, "learning_rate must be positive");
    need(weight_decay >= 0, "weight_decay must be nonnegative");
    need(batch_size > 0 && max_epochs > 0 && patience > 0, "batch_size, max_epochs and patience must be positive");
    need(crop_height > 0 && crop_width > 0, "crop size must be positive");
    need(crop_height % 16 == 0 && crop_width % 16 == 0, "crop size must be divisible by 16");
    need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0, "Adam constants out of range");
    need(max_steps >= 0, "max_steps must be nonnegative");
  }
};

// Adam with a decoupled weight penalty applied to conv weights only.
template <typename T>
class Adam {
 public:
  Adam(const Model<T>& model, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.var->value.shape());
      v_.emplace_back(p.var->value.shape());
    }
  }

  void step(const Model<T>& model) {
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, t_), bc2 = 1 - std::pow(cfg_.beta2, t_);
    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& node = *params[i].var;
      if (node.grad.empty()) continue;
      const double decay = params[i].kind == ParamKind::conv_weight ? cfg_.weight_decay : 0.0;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < node.value.size(); ++j) {
        const double g = node.grad[j];
        m[j] = static_cast<T>(cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g);
        v[j] = static_cast<T>(cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g * g);
        const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps) + decay * node.value[j];
        node.value[j] = static_cast<T>(node.value[j] - cfg_.learning_rate * update);
      }
    }
  }

  int steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  int t_ = 0;
};

// Tracks the best epoch; lower scores are better.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  // Returns true when the epoch is a new best (its weights should be kept).
  bool update(int epoch, double score) {
    if (score < best_) {
      best_ = score;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }
  bool should_stop(int epoch) const { return best_epoch_ >= 0 && epoch - best_epoch_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_score() const { return best_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
};

struct Batch {
  FeatureMap<float> input;
  std::vector<BinaryMask> masks;
};

inline Batch make_batch(const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw ShapeError("empty batch");
  const int h = samples[0].image.height, w = samples[0].image.width;
  Batch b{FeatureMap<float>(static_cast<int>(samples.size()), 1, h, w), {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto x = normalize(samples[i].image);
    std::copy(x.data(), x.data() + x.size(), b.input.plane(static_cast<int>(i), 0));
    b.masks.push_back(samples[i].mask);
  }
  return b;
}

using SampleSet = std::vector<const ImageSample*>;

inline SampleSet samples_of(const std::vector<Volume>& volumes, const std::vector<std::string>& subjects) {
  const std::set<std::string> want(subjects.begin(), subjects.end());
  SampleSet out;
  for (const auto& v : volumes)
    if (want.count(v.subject_id))
      for (const auto& s : v.slices) out.push_back(&s);
  return out;
}

inline std::set<std::string> subjects_in(const SampleSet& s) {
  std::set<std::string> out;
  for (const auto* p : s) out.insert(p->subject_id);
  return out;
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_ods = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  int best_epoch = -1;
  int steps = 0;
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
  double seconds = 0;
};

// Mean total loss over center crops, evaluated in batches without recording.
template <typename T>
double validation_loss(const Model<T>& model, const SampleSet& val, const TrainConfig& cfg) {
  NoGradGuard ng;
  double sum = 0;
  for (std::size_t i = 0; i < val.size(); i += cfg.batch_size) {
    std::vector<ImageSample> chunk;
    for (std::size_t j = i; j < std::min(val.size(), i + cfg.batch_size); ++j)
      chunk.push_back(center_crop(*val[j], cfg.crop_height, cfg.crop_width));
    const Batch b = make_batch(chunk);
    const auto g = model.forward_graph(constant(b.input));
    sum += static_cast<double>(total_loss(g.outputs, b.masks).total->value[0]) * static_cast<double>(chunk.size());
  }
  return sum / static_cast<double>(val.size());
}

// Largest centered window with sides divisible by 16.
inline ImageSample eval_window(const ImageSample& s) {
  const int h = s.image.height / 16 * 16, w = s.image.width / 16 * 16;
  if (h == 0 || w == 0)
    throw ShapeError("image " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                     " is smaller than 16x16");
  return center_crop(s, h, w);
}

// Fused-output probabilities on the evaluation window of each sample.
template <typename T>
std::vector<FeatureMap<float>> predict_samples(const Model<T>& model, const SampleSet& samples,
                                               std::vector<BinaryMask>* masks = nullptr) {
  std::vector<FeatureMap<float>> out;
  for (const auto* s : samples) {
    const ImageSample c = eval_window(*s);
    const auto o = model.forward(normalize(c.image));
    FeatureMap<float> p(o.fused.shape());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(detail::stable_sigmoid(o.fused[i]));
    out.push_back(std::move(p));
    if (masks) masks->push_back(c.mask);
  }
  return out;
}

// Dataset ODS/OIS of probability maps against reference masks.
inline EvalSummary evaluate_maps(const std::vector<FeatureMap<float>>& probs, const std::vector<BinaryMask>& masks,
                                 bool thin_pred = true) {
  if (probs.size() != masks.size()) throw ShapeError("prediction and mask counts differ");
  std::vector<std::vector<MatchCounts>> curves;
  const auto th = default_thresholds();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double tol = default_tolerance(masks[i].height(), masks[i].width());
    curves.push_back(pr_curve(probs[i], masks[i], th, tol, thin_pred));
  }
  return ods_ois(std::move(curves));
}

template <typename T>
EvalSummary evaluate_model(const Model<T>& model, const SampleSet& samples, bool thin_pred = true) {
  std::vector<BinaryMask> masks;
  const auto probs = predict_samples(model, samples, &masks);
  return evaluate_maps(probs, masks, thin_pred);
}

using ProgressFn = std::function<void(const std::string&)>;

// Trains with random crops and per-epoch validation; on return the model holds
// the weights of the best validation epoch.
template <typename T>
TrainResult train_model(Model<T>& model, const TrainConfig& cfg, const SampleSet& train, const SampleSet& val,
                        const ProgressFn& progress = {}) {
  cfg.validate();
  if (train.empty() || val.empty()) throw ConfigError("training and validation sets must be nonempty");
  for (const auto& id : subjects_in(train))
    if (subjects_in(val).count(id)) throw LeakError("subject " + id + " is in both train and validation sets");
  const auto start = std::chrono::steady_clock::now();
  TrainResult r;
  Adam<T> opt(model, cfg);
  EarlyStopper stopper(cfg.patience);
  auto best = model.snapshot();
  bool capped = false;
  for (int epoch = 1; epoch <= cfg.max_epochs && !capped; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng erng(derive_seed(cfg.seed, 5000 + static_cast<std::uint64_t>(epoch)));
    erng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      if (cfg.max_steps > 0 && r.steps >= cfg.max_steps) {
        capped = true;
        break;
      }
      std::vector<ImageSample> chunk;
      for (std::size_t j = i; j < std::min(order.size(), i + cfg.batch_size); ++j)
        chunk.push_back(random_crop(*train[order[j]], cfg.crop_height, cfg.crop_width, erng));
      const Batch b = make_batch(chunk);
      model.zero_grad();
      const auto g = model.forward_graph(constant(b.input));
      const auto loss = total_loss(g.outputs, b.masks);
      const double value = loss.total->value[0];
      if (!std::isfinite(value))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(r.steps + 1));
      backward(loss.total);
      opt.step(model);
      ++r.steps;
      r.step_losses.push_back(value);
      loss_sum += value;
      ++batches;
    }
    if (batches == 0) break;
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / batches;
    log.val_loss = validation_loss(model, val, cfg);
    if (!std::isfinite(log.val_loss))
      throw TrainingError("non-finite validation loss after epoch " + std::to_string(epoch));
    double score = log.val_loss;
    if (cfg.ods_early_stop) {
      log.val_ods = evaluate_model(model, val).ods_f;
      score = -log.val_ods;
    }
    r.epochs.push_back(log);
    if (stopper.update(epoch, score)) best = model.snapshot();
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %d train_loss %.6f val_loss %.6f%s", epoch, log.train_loss, log.val_loss,
                    stopper.best_epoch() == epoch ? " *" : "");
      progress(buf);
    }
    if (stopper.should_stop(epoch)) break;
  }
  model.restore(best);
  r.best_epoch = stopper.best_epoch();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ---------------------------------------------------------------------------
// Hyper-parameter search

struct Trial {
  int stage = 0;  // 1: placement, 2: N_G, 3: N_C
  ArchitectureSpec spec;
  std::size_t params = 0;
  double val_loss = std::numeric_limits<double>::infinity();
  bool feasible = true;
  std::string note;
};

struct SearchResult {
  std::vector<Trial> trials;
  ArchitectureSpec chosen;
};

inline const std::vector<std::pair<int, int>>& placement_grid() {
  static const std::vector<std::pair<int, int>> g{{5, 0}, {4, 1}, {3, 2}, {2, 3}, {1, 4}, {0, 5}};
  return g;
}
inline const std::vector<int>& group_grid() {
  static const std::vector<int> g{4, 8, 16, 32};
  return g;
}
inline const std::vector<int>& channel_grid() {
  static const std::vector<int> g{8, 16, 32, 64};
  return g;
}

// Trial runner: trains `spec` and returns its best validation loss. Infeasible
// specs are reported as ConfigError by the runner.
using TrialRunner = std::function<double(const ArchitectureSpec&)>;

// Three sequential sweeps (placement, then N_G, then N_C), each fixing the
// previous winner. Ties go to the model with fewer parameters.
inline SearchResult hyperparam_search(const ArchitectureSpec& base, const TrialRunner& run,
                                      const ProgressFn& progress = {}) {
  SearchResult res;
  ArchitectureSpec current = base;
  auto sweep = [&](int stage, const std::vector<ArchitectureSpec>& candidates) {
    const Trial* best = nullptr;
    std::size_t first = res.trials.size();
    for (const auto& spec : candidates) {
      Trial t;
      t.stage = stage;
      t.spec = spec;
      try {
        spec.validate();
        t.params = Model<float>(spec, 0).count_params();
        t.val_loss = run(spec);
      } catch (const ConfigError& e) {
        t.feasible = false;
        t.note = e.what();
      }
      res.trials.push_back(t);
      if (progress) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "trial %zu stage %d %s N_G=%d N_C=%d params=%zu val_loss=%.6f%s%s",
                      res.trials.size(), stage, spec.placement().c_str(), spec.groups, spec.fuse_channels, t.params,
                      t.val_loss, t.feasible ? "" : " infeasible: ", t.note.c_str());
        progress(buf);
      }
    }
    for (std::size_t i = first; i < res.trials.size(); ++i) {
      const Trial& t = res.trials[i];
      if (!t.feasible) continue;
      if (!best || t.val_loss < best->val_loss || (t.val_loss == best->val_loss && t.params < best->params))
        best = &res.trials[i];
    }
    if (!best) throw TrainingError("search stage " + std::to_string(stage) + " has no feasible trial");
    current = best->spec;
  };
  std::vector<ArchitectureSpec> c1;
  for (auto [m, n] : placement_grid()) {
    auto s = current;
    s.gc_stages = m;
    s.cge_stages = n;
    c1.push_back(s);
  }
  sweep(1, c1);
  std::vector<ArchitectureSpec> c2;
  for (int g : group_grid()) {
    auto s = current;
    s.groups = g;
    c2.push_back(s);
  }
  sweep(2, c2);
  std::vector<ArchitectureSpec> c3;
  for (int c : channel_grid()) {
    auto s = current;
    s.fuse_channels = c;
    c3.push_back(s);
  }
  sweep(3, c3);
  res.chosen = current;
  return res;
}

// ---------------------------------------------------------------------------
// Nested cross-validation

// Linear-interpolation quantile of unsorted values, q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty list");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Stat {
  double median = 0, q1 = 0, q3 = 0;
};

inline Stat summarize(const std::vector<double>& v) { return {quantile(v, 0.5), quantile(v, 0.25), quantile(v, 0.75)}; }

inline std::string format_stat(const Stat& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f [%.3f, %.3f]", s.median, s.q1, s.q3);
  return buf;
}

struct FoldResult {
  int fold_index = 0;
  ArchitectureSpec spec;
  TrainResult train;
  EvalSummary test;
  int test_evaluations = 0;
  std::vector<std::string> test_images;
  std::vector<Trial> search;  // inner search trials, when enabled
  double seconds = 0;
};

struct CvOptions {
  bool inner_search = false;
  int jobs = 1;
  std::filesystem::path run_dir;  // empty = no artifacts
  std::string label;              // prefix for progress lines
  ProgressFn progress;
  bool thin = true;               // thin predictions before matching
};

struct CvResult {
  std::vector<FoldResult> folds;
  Stat ods, ois;
};

inline std::string fold_dir_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "fold_%02d", i);
  return buf;
}

inline std::string image_name(const ImageSample& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/%03d", s.subject_id.c_str(), s.slice_index);
  return buf;
}

inline void write_search_csv(std::ostream& os, const std::vector<Trial>& trials) {
  os << "trial,stage,placement,groups,channels,params,val_loss,feasible\n";
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%d,%s,%d,%d,%zu,%.8f,%d\n", i + 1, t.stage, t.spec.placement().c_str(),
                  t.spec.groups, t.spec.fuse_channels, t.params, t.val_loss, t.feasible ? 1 : 0);
    os << buf;
  }
}

inline void write_fold_artifacts(const std::filesystem::path& dir, const FoldResult& r, const Model<float>& model) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_checkpoint(dir / "checkpoint.cntl", model, r.train.best_epoch);
  {
    std::ofstream os(dir / "results.csv");
    write_results_csv(os, r.test, r.test_images);
  }
  {
    std::ofstream os(dir / "train_log.csv");
    os << "epoch,train_loss,val_loss\n";
    for (const auto& e : r.train.epochs) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%d,%.8f,%.8f\n", e.epoch, e.train_loss, e.val_loss);
      os << buf;
    }
  }
  if (!r.search.empty()) {
    std::ofstream os(dir / "search.csv");
    write_search_csv(os, r.search);
  }
  std::ofstream os(dir / "summary.json");
  os << nlohmann::json{{"fold", r.fold_index},
                       {"spec", r.spec.canonical()},
                       {"best_epoch", r.train.best_epoch},
                       {"steps", r.train.steps},
                       {"ods", r.test.ods_f},
                       {"ods_threshold", r.test.ods_threshold},
                       {"ois", r.test.ois_f},
                       {"test_images", r.test_images.size()}}
            .dump(2)
     << "\n";
}

// Trains and tests one fold; the model seed is shared across folds so that
// variants compared under one plan differ only by architecture.
inline FoldResult run_fold(const std::vector<Volume>& data, const FoldPlan& plan, int i, const ArchitectureSpec& spec,
                           const TrainConfig& cfg, const CvOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  const Fold& f = plan.folds[i];
  assert_no_leak(f, i);
  const SampleSet train = samples_of(data, f.train), val = samples_of(data, f.val), test = samples_of(data, f.test);
  // mechanical check on the samples actually used
  const auto test_ids = subjects_in(test);
  for (const auto& set : {subjects_in(train), subjects_in(val)})
    for (const auto& id : set)
      if (test_ids.count(id)) throw LeakError("fold " + std::to_string(i) + ": test subject " + id + " reached training");
  if (train.empty() || val.empty() || test.empty())
    throw DataError("fold " + std::to_string(i) + " has an empty train, validation or test set");

  auto say = [&](const std::string& s) {
    if (opt.progress) opt.progress(opt.label + fold_dir_name(i) + " " + s);
  };
  FoldResult r;
  r.fold_index = i;
  r.spec = spec;
  if (opt.inner_search) {
    const auto search = hyperparam_search(
        spec,
        [&](const ArchitectureSpec& s) {
          Model<float> m(s, cfg.seed);
          train_model(m, cfg, train, val);
          return validation_loss(m, val, cfg);
        },
        say);
    r.search = search.trials;
    r.spec = search.chosen;
  }
  Model<float> model(r.spec, cfg.seed);
  r.train = train_model(model, cfg, train, val, say);
  r.test = evaluate_model(model, test, opt.thin);
  r.test_evaluations = 1;
  for (const auto* s : test) r.test_images.push_back(image_name(*s));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!opt.run_dir.empty()) write_fold_artifacts(opt.run_dir / fold_dir_name(i), r, model);
  char buf[128];
  std::snprintf(buf, sizeof buf, "test ODS %.4f OIS %.4f best_epoch %d (%.1fs)", r.test.ods_f, r.test.ois_f,
                r.train.best_epoch, r.seconds);
  say(buf);
  return r;
}

inline nlohmann::json to_json(const CvResult& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"fold", f.fold_index},
                     {"spec", f.spec.canonical()},
                     {"ods", f.test.ods_f},
                     {"ois", f.test.ois_f},
                     {"ods_threshold", f.test.ods_threshold},
                     {"best_epoch", f.train.best_epoch}});
  return {{"ods", {{"median", r.ods.median}, {"q1", r.ods.q1}, {"q3", r.ods.q3}}},
          {"ois", {{"median", r.ois.median}, {"q1", r.ois.q1}, {"q3", r.ois.q3}}},
          {"folds", folds}};
}

inline CvResult run_nested_cv(const std::vector<Volume>& data, const FoldPlan& plan, const ArchitectureSpec& spec,
                              const TrainConfig& cfg, const CvOptions& opt = {}) {
  std::vector<std::string> subjects;
  for (const auto& v : data) subjects.push_back(v.subject_id);
  validate_plan(plan, subjects);
  if (!opt.run_dir.empty()) {
    std::filesystem::create_directories(opt.run_dir);
    std::ofstream(opt.run_dir / "fold_plan.json") << to_json(plan).dump(2) << "\n";
  }
  CvResult res;
  res.folds.resize(plan.k);
  const int jobs = std::max(1, std::min(opt.jobs, plan.k));
  if (jobs == 1) {
    for (int i = 0; i < plan.k; ++i) res.folds[i] = run_fold(data, plan, i, spec, cfg, opt);
  } else {
    std::atomic<int> next{0};
    std::mutex mu;
    std::exception_ptr failure;
    CvOptions local = opt;
    if (opt.progress)
      local.progress = [&](const std::string& s) {
        std::lock_guard lock(mu);
        opt.progress(s);
      };
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j)
      pool.emplace_back([&] {
        for (int i; (i = next++) < plan.k;) {
          try {
            res.folds[i] = run_fold(data, plan, i, spec, cfg, local);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  std::vector<double> ods, ois;
  for (const auto& f : res.folds) {
    if (f.test_evaluations != 1) throw LeakError("fold " + std::to_string(f.fold_index) + " was not tested exactly once");
    ods.push_back(f.test.ods_f);
    ois.push_back(f.test.ois_f);
  }
  res.ods = summarize(ods);
  res.ois = summarize(ois);
  if (!opt.run_dir.empty()) {
    std::ofstream(opt.run_dir / "aggregate.json") << to_json(res).dump(2) << "\n";
    std::ofstream os(opt.run_dir / "aggregate.txt");
    os << "model | ODS | OIS\n";
    os << (res.folds.empty() ? spec.canonical() : res.folds[0].spec.placement()) << " | " << format_stat(res.ods)
       << " | " << format_stat(res.ois) << "\n";
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string name;
  bool coordconv = false;
  bool side_output = false;
  std::size_t params = 0;
  CvResult cv;
};

inline std::vector<std::pair<std::string, ArchitectureSpec>> ablation_variants(const ArchitectureSpec& full) {
  auto b1 = full, b2 = full;
  b1.coordconv = false;
  b1.side_output = true;
  b2.coordconv = true;
  b2.side_output = false;
  auto f = full;
  f.coordconv = true;
  f.side_output = true;
  return {{"Baseline-1", b1}, {"Baseline-2", b2}, {"UPI-Net", f}};
}

inline std::vector<AblationRow> ablation_suite(const std::vector<Volume>& data, const FoldPlan& plan,
                                               const ArchitectureSpec& full, const TrainConfig& cfg,
                                               const CvOptions& opt = {}) {
  std::vector<AblationRow> rows;
  for (const auto& [name, spec] : ablation_variants(full)) {
    CvOptions o = opt;
    if (!opt.run_dir.empty()) o.run_dir = opt.run_dir / name;
    o.label = opt.label + name + " ";
    AblationRow row{name, spec.coordconv, spec.side_output, Model<float>(spec, cfg.seed).count_params(),
                    run_nested_cv(data, plan, spec, cfg, o)};
    rows.push_back(std::move(row));
  }
  if (!opt.run_dir.empty()) {
    std::ofstream os(opt.run_dir / "ablation.txt");
    os << "variant | Coord-Conv | side outputs | params | ODS | OIS\n";
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      os << r.name << " | " << (r.coordconv ? "yes" : "no") << " | " << (r.side_output ? "yes" : "no") << " | "
         << r.params << " | " << format_stat(r.cv.ods) << " | " << format_stat(r.cv.ois) << "\n";
      j.push_back({{"variant", r.name},
                   {"coordconv", r.coordconv},
                   {"side_output", r.side_output},
                   {"params", r.params},
                   {"cv", to_json(r.cv)}});
    }
    std::ofstream(opt.run_dir / "ablation.json") << j.dump(2) << "\n";
  }
  return rows;
}

}  // namespace cntl
