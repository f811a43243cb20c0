#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cntl/autograd.hpp"
#include "cntl/blocks.hpp"
#include "cntl/loss.hpp"
#include "cntl/ops.hpp"
#include "cntl/random.hpp"
#include "cntl/tensor.hpp"

namespace cntl {

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Topology { hed, casenet, dsfpn, upinet };

inline std::string to_string(Topology t) {
  switch (t) {
    case Topology::hed: return "hed";
    case Topology::casenet: return "casenet";
    case Topology::dsfpn: return "dsfpn";
    case Topology::upinet: return "upinet";
  }
  return "?";
}

inline const std::vector<std::string>& topology_names() {
  static const std::vector<std::string> names{"hed", "casenet", "dsfpn", "upinet"};
  return names;
}

inline Topology parse_topology(const std::string& s) {
  if (s == "hed") return Topology::hed;
  if (s == "casenet") return Topology::casenet;
  if (s == "dsfpn" || s == "ds-fpn") return Topology::dsfpn;
  if (s == "upinet" || s == "upi-net") return Topology::upinet;
  throw ConfigError("unknown architecture '" + s + "' (valid: hed, casenet, dsfpn, upinet)");
}

// VGG-16 convolutional layout: (num_convs, out_channels) per stage.
struct BackboneSpec {
  static constexpr int kStages = 5;
  static constexpr std::array<int, kStages> kConvs{2, 2, 3, 3, 3};
  static constexpr std::array<int, kStages> kChannels{64, 128, 256, 512, 512};
  static constexpr int kDownsample = 16;  // total stride of stage 5
};

struct ArchitectureSpec {
  Topology topology = Topology::upinet;
  int gc_stages = 3;       // GC blocks on the first m stages
  int cge_stages = 2;      // CGE blocks on the last n stages
  int groups = 16;         // N_G
  int fuse_channels = 32;  // N_C
  bool coordconv = true;
  bool side_output = true;
  int input_channels = 1;
  int width_divisor = 1;   // reduced-width profiles divide every backbone width
  int gc_reduction = 16;
  int fpn_width = 128;

  static ArchitectureSpec defaults(Topology t) {
    ArchitectureSpec s;
    s.topology = t;
    if (t != Topology::upinet) {
      s.gc_stages = 0;
      s.cge_stages = 0;
      s.coordconv = false;
    }
    return s;
  }

  int stage_width(int stage) const { return BackboneSpec::kChannels[stage] / width_divisor; }
  int pyramid_width() const { return fpn_width / width_divisor; }
  bool has_gc(int stage) const { return stage < gc_stages; }
  bool has_cge(int stage) const { return stage >= BackboneSpec::kStages - cge_stages; }
  int stem_channels() const { return input_channels + (coordconv ? 2 : 0); }

  void validate() const {
    if (input_channels != 1 && input_channels != 3) throw ConfigError("input_channels must be 1 or 3");
    if (width_divisor < 1) throw ConfigError("width_divisor must be positive");
    for (int c : BackboneSpec::kChannels)
      if (c % width_divisor != 0) throw ConfigError("width_divisor must divide every backbone width");
    if (fpn_width % width_divisor != 0) throw ConfigError("width_divisor must divide the pyramid width");
    if (gc_stages < 0 || cge_stages < 0 || gc_stages > 5 || cge_stages > 5)
      throw ConfigError("GC/CGE stage counts must lie in 0..5");
    if (gc_stages + cge_stages > 5)
      throw ConfigError("invalid placement " + std::to_string(gc_stages) + "G-" + std::to_string(cge_stages) +
                        "C: GC and CGE stages overlap (m + n must be <= 5)");
    if (topology != Topology::upinet && (gc_stages != 0 || cge_stages != 0))
      throw ConfigError(to_string(topology) + " does not carry GC/CGE blocks (m = n = 0 required)");
    if (groups < 1 || fuse_channels < 1 || gc_reduction < 1) throw ConfigError("N_G, N_C and r must be positive");
    for (int s = 0; s < BackboneSpec::kStages; ++s)
      if (has_cge(s) && stage_width(s) % groups != 0)
        throw ConfigError("N_G=" + std::to_string(groups) + " does not divide the " + std::to_string(stage_width(s)) +
                          " channels of stage " + std::to_string(s + 1));
  }

  // One-line key=value form; stable across versions of this type.
  std::string canonical() const {
    std::ostringstream os;
    os << "topology=" << to_string(topology) << ";gc=" << gc_stages << ";cge=" << cge_stages << ";groups=" << groups
       << ";channels=" << fuse_channels << ";coordconv=" << coordconv << ";side=" << side_output
       << ";input=" << input_channels << ";width_divisor=" << width_divisor << ";reduction=" << gc_reduction
       << ";fpn=" << fpn_width;
    return os.str();
  }

  static ArchitectureSpec parse(const std::string& text) {
    ArchitectureSpec s;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ';')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("malformed spec entry '" + item + "'");
      const std::string k = item.substr(0, eq), v = item.substr(eq + 1);
      try {
        if (k == "topology") s.topology = parse_topology(v);
        else if (k == "gc") s.gc_stages = std::stoi(v);
        else if (k == "cge") s.cge_stages = std::stoi(v);
        else if (k == "groups") s.groups = std::stoi(v);
        else if (k == "channels") s.fuse_channels = std::stoi(v);
        else if (k == "coordconv") s.coordconv = std::stoi(v) != 0;
        else if (k == "side") s.side_output = std::stoi(v) != 0;
        else if (k == "input") s.input_channels = std::stoi(v);
        else if (k == "width_divisor") s.width_divisor = std::stoi(v);
        else if (k == "reduction") s.gc_reduction = std::stoi(v);
        else if (k == "fpn") s.fpn_width = std::stoi(v);
        else throw ConfigError("unknown spec key '" + k + "'");
      } catch (const std::invalid_argument&) {
        throw ConfigError("bad value for spec key '" + k + "': " + v);
      }
    }
    s.validate();
    return s;
  }

  std::string placement() const { return std::to_string(gc_stages) + "G-" + std::to_string(cge_stages) + "C"; }

  bool operator==(const ArchitectureSpec&) const = default;
};

enum class ParamKind { conv_weight, bias, norm_affine };

template <typename T>
struct ParamEntry {
  std::string name;
  Var<T> var;
  ParamKind kind;
  bool backbone;
};

template <typename T>
struct ConvLayer {
  Var<T> w, b;
  int pad = 0;
  int groups = 1;
  int in = 0, out = 0, k = 1;
};

template <typename T>
struct ModelOutputs {
  std::vector<std::string> side_names;
  std::vector<FeatureMap<T>> side;
  FeatureMap<T> fused;
};

template <typename T>
struct ForwardGraph {
  std::vector<NamedOutput<T>> outputs;  // side outputs first, fused last
  std::array<Var<T>, BackboneSpec::kStages> gates{};  // CGE importance maps per stage
  const Var<T>& fused() const { return outputs.back().logits; }
};

template <typename T>
class Model {
 public:
  Model(ArchitectureSpec spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    spec_.validate();
    Rng rng(seed);
    int in = spec_.stem_channels();
    for (int s = 0; s < BackboneSpec::kStages; ++s) {
      const int width = spec_.stage_width(s);
      auto& st = stages_[s];
      for (int i = 0; i < BackboneSpec::kConvs[s]; ++i) {
        st.convs.push_back(make_conv("stage" + std::to_string(s + 1) + ".conv" + std::to_string(i + 1), in, width, 3,
                                     1, 1, rng, true));
        in = width;
      }
      if (spec_.has_gc(s)) {
        st.gc = GCBlockParams<T>::init(width, spec_.gc_reduction, rng);
        register_gc("stage" + std::to_string(s + 1) + ".gc", *st.gc);
      }
      if (spec_.has_cge(s)) {
        st.cge = CGEBlockParams<T>::init(width, spec_.groups, rng);
        register_cge("stage" + std::to_string(s + 1) + ".cge", *st.cge);
      }
    }
    build_heads(rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ArchitectureSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<ParamEntry<T>>& parameters() const { return params_; }

  const ParamEntry<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t count_backbone_params() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.backbone) n += p.var->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var->zero_grad();
  }

  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> v;
    v.reserve(params_.size());
    for (const auto& p : params_) v.push_back(p.var->value);
    return v;
  }

  void restore(const std::vector<Tensor<T>>& values) {
    if (values.size() != params_.size()) throw LoadError("snapshot does not match parameter list");
    for (std::size_t i = 0; i < values.size(); ++i) {
      require_same_shape(params_[i].var->value.shape(), values[i].shape(), params_[i].name.c_str());
      params_[i].var->value = values[i];
    }
  }

  std::size_t count_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var->value.size();
    return n;
  }

  void check_input(const Shape& s) const {
    if (s.c != spec_.input_channels)
      throw ShapeError("model expects " + std::to_string(spec_.input_channels) + " input channel(s), got " +
                       std::to_string(s.c));
    if (s.h % BackboneSpec::kDownsample != 0)
      throw ShapeError("input height " + std::to_string(s.h) + " is not divisible by 16");
    if (s.w % BackboneSpec::kDownsample != 0)
      throw ShapeError("input width " + std::to_string(s.w) + " is not divisible by 16");
  }

  // Records the forward pass for differentiation (unless a NoGradGuard is
  // active).
  ForwardGraph<T> forward_graph(const Var<T>& input) const {
    check_input(input->value.shape());
    const int H = input->value.height(), W = input->value.width();
    ForwardGraph<T> g;
    Var<T> x = spec_.coordconv ? ops::coordconv_augment(input) : input;
    std::array<Var<T>, BackboneSpec::kStages> feats;
    for (int s = 0; s < BackboneSpec::kStages; ++s) {
      if (s > 0) x = ops::max_pool2(x);
      const auto& st = stages_[s];
      for (const auto& c : st.convs) x = ops::relu(apply(c, x));
      if (st.gc) x = gc_block(x, *st.gc);
      if (st.cge) {
        auto r = cge_block(x, *st.cge);
        x = r.out;
        g.gates[s] = r.gate;
      }
      feats[s] = x;
    }
    auto up = [&](const Var<T>& v) { return ops::resize_bilinear(v, H, W); };
    std::vector<NamedOutput<T>> sides;
    Var<T> fused;
    switch (spec_.topology) {
      case Topology::hed: {
        std::vector<Var<T>> maps;
        for (int s = 0; s < BackboneSpec::kStages; ++s) {
          maps.push_back(up(apply(side_heads_[s], feats[s])));
          sides.push_back({"side" + std::to_string(s + 1), maps.back()});
        }
        fused = apply(fuse_, ops::concat_channels(maps));
        break;
      }
      case Topology::casenet: {
        std::vector<Var<T>> parts;
        for (int s = 0; s < 4; ++s) parts.push_back(up(apply(projections_[s], feats[s])));
        auto side5 = up(apply(side_heads_[0], feats[4]));
        parts.push_back(side5);
        sides.push_back({"side5", side5});
        fused = apply(fuse_, ops::concat_channels(parts));
        break;
      }
      case Topology::dsfpn: {
        std::array<Var<T>, BackboneSpec::kStages> pyramid;
        for (int s = BackboneSpec::kStages - 1; s >= 0; --s) {
          auto lateral = apply(projections_[s], feats[s]);
          if (s < BackboneSpec::kStages - 1)
            lateral = ops::add(lateral, ops::resize_bilinear(pyramid[s + 1], lateral->value.height(),
                                                             lateral->value.width()));
          pyramid[s] = lateral;
        }
        std::vector<Var<T>> maps;
        for (int s = 0; s < BackboneSpec::kStages; ++s) {
          maps.push_back(up(apply(side_heads_[s], pyramid[s])));
          sides.push_back({"side" + std::to_string(s + 1), maps.back()});
        }
        fused = apply(fuse_, ops::concat_channels(maps));
        break;
      }
      case Topology::upinet: {
        std::vector<Var<T>> parts;
        for (int s = 0; s < BackboneSpec::kStages; ++s) parts.push_back(up(apply(projections_[s], feats[s])));
        fused = apply(fuse_, ops::concat_channels(parts));
        if (spec_.side_output) sides.push_back({"side5", up(apply(side_heads_[0], feats[4]))});
        break;
      }
    }
    if (spec_.side_output) g.outputs = std::move(sides);
    g.outputs.push_back({"fused", fused});
    return g;
  }

  ModelOutputs<T> forward(const FeatureMap<T>& x) const {
    NoGradGuard ng;
    auto g = forward_graph(constant(x));
    ModelOutputs<T> out;
    for (std::size_t i = 0; i + 1 < g.outputs.size(); ++i) {
      out.side_names.push_back(g.outputs[i].name);
      out.side.push_back(g.outputs[i].logits->value);
    }
    out.fused = g.fused()->value;
    return out;
  }

  // Importance maps of the CGE block on `stage` (1-based), one per group.
  std::vector<FeatureMap<T>> export_activation_maps(const FeatureMap<T>& x, int stage) const {
    if (stage < 1 || stage > BackboneSpec::kStages || !stages_[stage - 1].cge)
      throw ConfigError("stage " + std::to_string(stage) + " does not carry a CGE block");
    NoGradGuard ng;
    auto g = forward_graph(constant(x));
    const auto& gate = g.gates[stage - 1]->value;
    std::vector<FeatureMap<T>> maps;
    for (int k = 0; k < gate.channels(); ++k) {
      FeatureMap<T> m(gate.batch(), 1, gate.height(), gate.width());
      for (int b = 0; b < gate.batch(); ++b) std::copy_n(gate.plane(b, k), gate.shape().plane(), m.plane(b, 0));
      maps.push_back(std::move(m));
    }
    return maps;
  }

  // Multiply-accumulate count of one forward pass at H x W (batch 1), using
  // the per-op costs documented in ops.hpp.
  std::uint64_t count_flops(int h, int w) const {
    check_input({1, spec_.input_channels, h, w});
    using U = std::uint64_t;
    const U HW = static_cast<U>(h) * w;
    U macs = 0;
    int in = spec_.stem_channels();
    std::array<U, BackboneSpec::kStages> area{};
    for (int s = 0; s < BackboneSpec::kStages; ++s) {
      const U a = HW >> (2 * s);
      area[s] = a;
      const U width = spec_.stage_width(s);
      for (int i = 0; i < BackboneSpec::kConvs[s]; ++i) {
        macs += width * in * 9 * a + width * a;  // conv + relu
        in = static_cast<int>(width);
      }
      if (spec_.has_gc(s)) {
        const U cr = ceil_div(static_cast<int>(width), spec_.gc_reduction);
        macs += width * a + a + width * a;      // key conv, softmax, attention pool
        macs += cr * width + cr + cr;           // down conv, layer norm, relu
        macs += width * cr + width * a;         // up conv, broadcast add
      }
      if (spec_.has_cge(s)) {
        const U g = spec_.groups;
        macs += width * a + g * a + g * a + width * a;  // group conv, norm, sigmoid, gate
      }
    }
    auto head = [&](U cin, U cout, int s) {
      U m = cin * cout * area[s];
      if (s > 0) m += 4 * cout * HW;  // bilinear upsample to input size
      return m;
    };
    switch (spec_.topology) {
      case Topology::hed:
        for (int s = 0; s < BackboneSpec::kStages; ++s) macs += head(spec_.stage_width(s), 1, s);
        macs += 5 * HW;
        break;
      case Topology::casenet:
        for (int s = 0; s < 4; ++s) macs += head(spec_.stage_width(s), spec_.fuse_channels, s);
        macs += head(spec_.stage_width(4), 1, 4);
        macs += static_cast<U>(4 * spec_.fuse_channels + 1) * HW;
        break;
      case Topology::dsfpn: {
        const U f = spec_.pyramid_width();
        for (int s = 0; s < BackboneSpec::kStages; ++s) {
          macs += spec_.stage_width(s) * f * area[s];
          if (s < BackboneSpec::kStages - 1) macs += 4 * f * area[s] + f * area[s];  // top-down resize + add
          macs += head(f, 1, s);
        }
        macs += 5 * HW;
        break;
      }
      case Topology::upinet:
        for (int s = 0; s < BackboneSpec::kStages; ++s) macs += head(spec_.stage_width(s), spec_.fuse_channels, s);
        macs += static_cast<U>(5 * spec_.fuse_channels) * HW;
        if (spec_.side_output) macs += head(spec_.stage_width(4), 1, 4);
        break;
    }
    return macs;
  }

  // Names of the backbone conv parameters in manifest order.
  std::vector<std::string> backbone_layer_names() const {
    std::vector<std::string> names;
    for (const auto& p : params_)
      if (p.backbone) names.push_back(p.name);
    return names;
  }

 private:
  struct Stage {
    std::vector<ConvLayer<T>> convs;
    std::optional<GCBlockParams<T>> gc;
    std::optional<CGEBlockParams<T>> cge;
  };

  static Var<T> apply(const ConvLayer<T>& c, const Var<T>& x) { return ops::conv2d(x, c.w, c.b, c.pad, c.groups); }

  ConvLayer<T> make_conv(const std::string& name, int in, int out, int k, int pad, int groups, Rng& rng,
                         bool backbone) {
    ConvLayer<T> c;
    c.in = in;
    c.out = out;
    c.k = k;
    c.pad = pad;
    c.groups = groups;
    const int fan_in = in / groups * k * k;
    c.w = leaf(he_normal<T>({out, in / groups, k, k}, fan_in, rng));
    c.b = vector_param<T>(out, T(0));
    params_.push_back({name + ".weight", c.w, ParamKind::conv_weight, backbone});
    params_.push_back({name + ".bias", c.b, ParamKind::bias, backbone});
    return c;
  }

  void register_gc(const std::string& n, const GCBlockParams<T>& p) {
    params_.push_back({n + ".key.weight", p.key_w, ParamKind::conv_weight, false});
    params_.push_back({n + ".key.bias", p.key_b, ParamKind::bias, false});
    params_.push_back({n + ".down.weight", p.down_w, ParamKind::conv_weight, false});
    params_.push_back({n + ".down.bias", p.down_b, ParamKind::bias, false});
    params_.push_back({n + ".norm.gamma", p.norm_g, ParamKind::norm_affine, false});
    params_.push_back({n + ".norm.beta", p.norm_b, ParamKind::norm_affine, false});
    params_.push_back({n + ".up.weight", p.up_w, ParamKind::conv_weight, false});
    params_.push_back({n + ".up.bias", p.up_b, ParamKind::bias, false});
  }

  void register_cge(const std::string& n, const CGEBlockParams<T>& p) {
    params_.push_back({n + ".group.weight", p.group_w, ParamKind::conv_weight, false});
    params_.push_back({n + ".group.bias", p.group_b, ParamKind::bias, false});
    params_.push_back({n + ".norm.gamma", p.gamma, ParamKind::norm_affine, false});
    params_.push_back({n + ".norm.beta", p.beta, ParamKind::norm_affine, false});
  }

  void build_heads(Rng& rng) {
    const int nc = spec_.fuse_channels;
    auto sname = [](int s) { return std::to_string(s + 1); };
    switch (spec_.topology) {
      case Topology::hed:
        for (int s = 0; s < BackboneSpec::kStages; ++s)
          side_heads_.push_back(make_conv("side" + sname(s), spec_.stage_width(s), 1, 1, 0, 1, rng, false));
        fuse_ = make_conv("fuse", BackboneSpec::kStages, 1, 1, 0, 1, rng, false);
        break;
      case Topology::casenet:
        for (int s = 0; s < 4; ++s)
          projections_.push_back(make_conv("proj" + sname(s), spec_.stage_width(s), nc, 1, 0, 1, rng, false));
        side_heads_.push_back(make_conv("side5", spec_.stage_width(4), 1, 1, 0, 1, rng, false));
        fuse_ = make_conv("fuse", 4 * nc + 1, 1, 1, 0, 1, rng, false);
        break;
      case Topology::dsfpn: {
        const int f = spec_.pyramid_width();
        for (int s = 0; s < BackboneSpec::kStages; ++s)
          projections_.push_back(make_conv("lateral" + sname(s), spec_.stage_width(s), f, 1, 0, 1, rng, false));
        for (const auto& p : projections_)
          if (p.out != f) throw ConfigError("ds-fpn lateral projections must share one width");
        for (int s = 0; s < BackboneSpec::kStages; ++s)
          side_heads_.push_back(make_conv("side" + sname(s), f, 1, 1, 0, 1, rng, false));
        fuse_ = make_conv("fuse", BackboneSpec::kStages, 1, 1, 0, 1, rng, false);
        break;
      }
      case Topology::upinet:
        for (int s = 0; s < BackboneSpec::kStages; ++s)
          projections_.push_back(make_conv("proj" + sname(s), spec_.stage_width(s), nc, 1, 0, 1, rng, false));
        fuse_ = make_conv("fuse", BackboneSpec::kStages * nc, 1, 1, 0, 1, rng, false);
        if (spec_.side_output)
          side_heads_.push_back(make_conv("side5", spec_.stage_width(4), 1, 1, 0, 1, rng, false));
        break;
    }
  }

  ArchitectureSpec spec_;
  std::uint64_t seed_;
  std::array<Stage, BackboneSpec::kStages> stages_;
  std::vector<ConvLayer<T>> projections_;
  std::vector<ConvLayer<T>> side_heads_;
  ConvLayer<T> fuse_;
  std::vector<ParamEntry<T>> params_;
};

template <typename T>
Model<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  return Model<T>(spec, seed);
}

// Bare VGG-16 convolutional parameter count (weights + biases).
inline std::size_t backbone_param_count(int input_channels, int width_divisor = 1) {
  std::size_t n = 0;
  int in = input_channels;
  for (int s = 0; s < BackboneSpec::kStages; ++s) {
    const int out = BackboneSpec::kChannels[s] / width_divisor;
    for (int i = 0; i < BackboneSpec::kConvs[s]; ++i) {
      n += static_cast<std::size_t>(out) * in * 9 + out;
      in = out;
    }
  }
  return n;
}

}  // namespace cntl
