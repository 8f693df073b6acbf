#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "gabornet/errors.hpp"
#include "gabornet/layers.hpp"
#include "gabornet/rng.hpp"
#include "gabornet/tensor.hpp"

namespace gabornet {

/// Ordered layer chain plus free-form metadata (model family, input shape,
/// original conv sizes for pruning bookkeeping, normalization constants).
template <class T>
class Model {
 public:
  Model() = default;
  Model(const Model& o) : meta(o.meta) {
    for (const auto& l : o.layers) layers.push_back(l->clone());
  }
  Model& operator=(const Model& o) {
    if (this != &o) {
      Model tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  std::vector<std::unique_ptr<Layer<T>>> layers;
  std::map<std::string, std::string> meta;

  template <class L, class... Args>
  L& add(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers.push_back(std::move(p));
    return ref;
  }

  Tensor4<T> forward(const Tensor4<T>& x, Phase phase) {
    Tensor4<T> h = x;
    for (auto& l : layers) h = l->forward(h, phase);
    return h;
  }

  Tensor4<T> backward(const Tensor4<T>& grad) {
    Tensor4<T> g = grad;
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  void zero_grad() {
    for (auto& l : layers) l->zero_grad();
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    for (auto& l : layers) l->collect_params(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value.size();
    return n;
  }

  StateDict<T> state() const {
    StateDict<T> sd;
    for (const auto& l : layers) l->export_state(sd);
    return sd;
  }

  void load_state(const StateDict<T>& sd) {
    for (auto& l : layers) l->import_state(sd);
    const StateDict<T> mine = state();
    if (mine.tensors.size() != sd.tensors.size() || mine.gabor.size() != sd.gabor.size() ||
        mine.masks.size() != sd.masks.size()) {
      throw IntegrityError("tensor count does not match the architecture descriptor");
    }
  }

  /// All conv layers in forward order, descending into residual blocks.
  std::vector<Conv2d<T>*> convs() const {
    std::vector<Conv2d<T>*> out;
    for (const auto& l : layers) collect_convs(l.get(), out);
    return out;
  }

  Conv2d<T>& conv(std::size_t ordinal) const {
    auto cs = convs();
    if (ordinal >= cs.size()) {
      throw StructureError("conv layer " + std::to_string(ordinal + 1) + " does not exist (model has " +
                           std::to_string(cs.size()) + ")");
    }
    return *cs[ordinal];
  }

  std::string meta_or(const std::string& key, const std::string& fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }

  Dims4 input_dims(std::size_t batch = 1) const {
    return {batch, std::stoul(meta_or("input.c", "3")), std::stoul(meta_or("input.h", "32")),
            std::stoul(meta_or("input.w", "32"))};
  }

  /// Checks shape compatibility of the whole chain for the recorded input shape.
  Dims4 validate() const {
    Dims4 d = input_dims();
    for (const auto& l : layers) d = l->output_dims(d);
    return d;
  }

  /// Architecture descriptor: meta lines then one line per layer.
  std::string describe() const {
    std::ostringstream os;
    for (const auto& [k, v] : meta) os << "meta " << k << "=" << v << "\n";
    for (const auto& l : layers) l->describe(os, 0);
    return os.str();
  }

  /// Records the current conv sizes as the reference for pruned fractions.
  void record_original_sizes() {
    auto cs = convs();
    for (std::size_t j = 0; j < cs.size(); ++j) {
      meta["conv" + std::to_string(j + 1) + ".orig_out"] = std::to_string(cs[j]->n_out());
      meta["conv" + std::to_string(j + 1) + ".orig_in"] = std::to_string(cs[j]->n_in());
    }
  }

 private:
  static void collect_convs(Layer<T>* l, std::vector<Conv2d<T>*>& out) {
    if (auto* c = dynamic_cast<Conv2d<T>*>(l)) {
      out.push_back(c);
    } else if (auto* b = dynamic_cast<ResidualBlock<T>*>(l)) {
      for (auto& inner : b->body()) collect_convs(inner.get(), out);
    }
  }
};

/// Copies a model into another scalar type through its descriptor and state.
template <class To, class From>
Model<To> convert_model(const Model<From>& m);

// ---------------------------------------------------------------------------
// Initialization

template <class T>
void he_init(Conv2d<T>& c, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(c.n_in() * c.k() * c.k()));
  for (auto& w : c.weights().storage()) w = static_cast<T>(std * normal(rng));
  std::fill(c.bias().begin(), c.bias().end(), T{0});
}

template <class T>
void dense_init(Dense<T>& d, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d.in_features()));
  for (auto& w : d.weights().storage()) w = static_cast<T>(uniform(rng, -bound, bound));
  std::fill(d.bias().begin(), d.bias().end(), T{0});
}

/// Re-initializes every conv and dense layer of a model.
template <class T>
void init_model(Model<T>& m, Rng& rng) {
  std::vector<Layer<T>*> flat;
  std::function<void(Layer<T>*)> walk = [&](Layer<T>* l) {
    flat.push_back(l);
    if (auto* b = dynamic_cast<ResidualBlock<T>*>(l)) {
      for (auto& inner : b->body()) walk(inner.get());
    }
  };
  for (auto& l : m.layers) walk(l.get());
  for (Layer<T>* l : flat) {
    if (auto* c = dynamic_cast<Conv2d<T>*>(l)) he_init(*c, rng);
    if (auto* d = dynamic_cast<Dense<T>*>(l)) dense_init(*d, rng);
  }
}

// ---------------------------------------------------------------------------
// Builders

struct ToySpec {
  std::size_t in_channels = 3;
  std::size_t image_size = 16;
  std::size_t classes = 4;
  std::size_t c1 = 8;
  std::size_t c2 = 8;
  std::size_t k1 = 7;
  std::size_t k2 = 5;
  bool batch_norm = false;  // conv-bn-relu blocks, convs without bias
};

/// conv(k1, c1) -> relu -> conv(k2, c2) -> relu -> global avg pool -> dense,
/// optionally with batch norm after each conv.
template <class T>
Model<T> make_toy(const ToySpec& s, Rng& rng) {
  Model<T> m;
  m.meta["family"] = "toy";
  m.meta["input.c"] = std::to_string(s.in_channels);
  m.meta["input.h"] = std::to_string(s.image_size);
  m.meta["input.w"] = std::to_string(s.image_size);
  m.template add<Conv2d<T>>("conv1", s.in_channels, s.c1, s.k1, 1, s.k1 / 2, !s.batch_norm);
  if (s.batch_norm) m.template add<BatchNorm2d<T>>("bn1", s.c1);
  m.template add<ReLU<T>>();
  m.template add<Conv2d<T>>("conv2", s.c1, s.c2, s.k2, 1, s.k2 / 2, !s.batch_norm);
  if (s.batch_norm) m.template add<BatchNorm2d<T>>("bn2", s.c2);
  m.template add<ReLU<T>>();
  m.template add<GlobalAvgPool<T>>();
  m.template add<Dense<T>>("fc", s.c2, s.classes);
  init_model(m, rng);
  m.record_original_sizes();
  m.validate();
  return m;
}

struct VggSpec {
  /// Channel counts, 0 = 2x2 max pool. Default is VGG-16.
  std::vector<std::size_t> cfg = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0};
  double width = 1.0;
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  std::size_t classes = 10;
};

/// conv3x3-bn-relu stacks with max pools, global average pool, dense head.
template <class T>
Model<T> make_vgg(const VggSpec& s, Rng& rng) {
  Model<T> m;
  m.meta["family"] = "vgg";
  m.meta["input.c"] = std::to_string(s.in_channels);
  m.meta["input.h"] = std::to_string(s.image_size);
  m.meta["input.w"] = std::to_string(s.image_size);
  std::size_t in = s.in_channels;
  std::size_t idx = 0;
  for (std::size_t v : s.cfg) {
    if (v == 0) {
      m.template add<MaxPool2d<T>>(2, 2);
      continue;
    }
    const std::size_t out = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(v * s.width)));
    ++idx;
    m.template add<Conv2d<T>>("conv" + std::to_string(idx), in, out, 3, 1, 1, false);
    m.template add<BatchNorm2d<T>>("bn" + std::to_string(idx), out);
    m.template add<ReLU<T>>();
    in = out;
  }
  m.template add<GlobalAvgPool<T>>();
  m.template add<Dense<T>>("fc", in, s.classes);
  init_model(m, rng);
  m.record_original_sizes();
  m.validate();
  return m;
}

struct ResNetSpec {
  std::size_t blocks_per_stage = 3;  // 3 -> ResNet-20
  std::size_t width = 16;
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  std::size_t classes = 10;
};

/// CIFAR-style ResNet (6n+2 layers) with zero-padding shortcuts between stages.
template <class T>
Model<T> make_resnet(const ResNetSpec& s, Rng& rng) {
  Model<T> m;
  m.meta["family"] = "resnet";
  m.meta["input.c"] = std::to_string(s.in_channels);
  m.meta["input.h"] = std::to_string(s.image_size);
  m.meta["input.w"] = std::to_string(s.image_size);
  m.template add<Conv2d<T>>("conv_stem", s.in_channels, s.width, 3, 1, 1, false);
  m.template add<BatchNorm2d<T>>("bn_stem", s.width);
  m.template add<ReLU<T>>();
  std::size_t in = s.width;
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const std::size_t out = s.width << stage;
    for (std::size_t b = 0; b < s.blocks_per_stage; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      const std::string name = "s" + std::to_string(stage + 1) + "b" + std::to_string(b + 1);
      auto& block = m.template add<ResidualBlock<T>>(name, (stride == 1 && in == out) ? Shortcut::Identity
                                                                                      : Shortcut::PadChannels,
                                                     stride, in, out);
      block.body().push_back(std::make_unique<Conv2d<T>>(name + ".conv1", in, out, 3, stride, 1, false));
      block.body().push_back(std::make_unique<BatchNorm2d<T>>(name + ".bn1", out));
      block.body().push_back(std::make_unique<ReLU<T>>());
      block.body().push_back(std::make_unique<Conv2d<T>>(name + ".conv2", out, out, 3, 1, 1, false));
      block.body().push_back(std::make_unique<BatchNorm2d<T>>(name + ".bn2", out));
      in = out;
    }
  }
  m.template add<GlobalAvgPool<T>>();
  m.template add<Dense<T>>("fc", in, s.classes);
  init_model(m, rng);
  m.record_original_sizes();
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Descriptor parsing

namespace detail {

inline std::map<std::string, std::string> parse_fields(std::istringstream& is) {
  std::map<std::string, std::string> f;
  std::string tok;
  while (is >> tok) {
    if (tok == "{") {
      f["{"] = "1";
      continue;
    }
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("descriptor: malformed field '" + tok + "'");
    f[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return f;
}

inline std::size_t field_size(const std::map<std::string, std::string>& f, const std::string& key) {
  auto it = f.find(key);
  if (it == f.end()) throw FormatError("descriptor: missing field '" + key + "'");
  try {
    return std::stoul(it->second);
  } catch (const std::exception&) {
    throw FormatError("descriptor: bad number for '" + key + "'");
  }
}

inline std::string field_str(const std::map<std::string, std::string>& f, const std::string& key) {
  auto it = f.find(key);
  if (it == f.end()) throw FormatError("descriptor: missing field '" + key + "'");
  return it->second;
}

template <class T>
std::vector<std::unique_ptr<Layer<T>>> parse_layers(std::istream& in, bool nested,
                                                    std::map<std::string, std::string>* meta) {
  std::vector<std::unique_ptr<Layer<T>>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::string kind;
    if (!(is >> kind)) continue;
    if (kind == "}") {
      if (!nested) throw FormatError("descriptor: unbalanced '}'");
      return out;
    }
    if (kind == "meta") {
      if (nested || meta == nullptr) throw FormatError("descriptor: meta inside block");
      std::string rest;
      std::getline(is >> std::ws, rest);
      auto eq = rest.find('=');
      if (eq == std::string::npos) throw FormatError("descriptor: malformed meta line");
      (*meta)[rest.substr(0, eq)] = rest.substr(eq + 1);
      continue;
    }
    auto f = parse_fields(is);
    if (kind == "conv") {
      auto c = std::make_unique<Conv2d<T>>(field_str(f, "name"), field_size(f, "in"), field_size(f, "out"),
                                           field_size(f, "k"), field_size(f, "stride"), field_size(f, "pad"),
                                           field_size(f, "bias") != 0);
      const std::string mode = field_str(f, "mode");
      if (mode == "gabor") {
        c->set_mode_for_load(ConvMode::GaborParameterized);
      } else if (mode != "standard") {
        throw FormatError("descriptor: unknown conv mode '" + mode + "'");
      }
      out.push_back(std::move(c));
    } else if (kind == "bn") {
      out.push_back(std::make_unique<BatchNorm2d<T>>(field_str(f, "name"), field_size(f, "ch")));
    } else if (kind == "relu") {
      out.push_back(std::make_unique<ReLU<T>>());
    } else if (kind == "maxpool") {
      out.push_back(std::make_unique<MaxPool2d<T>>(field_size(f, "k"), field_size(f, "stride")));
    } else if (kind == "gap") {
      out.push_back(std::make_unique<GlobalAvgPool<T>>());
    } else if (kind == "dense") {
      out.push_back(std::make_unique<Dense<T>>(field_str(f, "name"), field_size(f, "in"), field_size(f, "out")));
    } else if (kind == "block") {
      const std::string sc = field_str(f, "shortcut");
      if (sc != "identity" && sc != "pad") throw FormatError("descriptor: unknown shortcut '" + sc + "'");
      auto b = std::make_unique<ResidualBlock<T>>(field_str(f, "name"),
                                                  sc == "identity" ? Shortcut::Identity : Shortcut::PadChannels,
                                                  field_size(f, "stride"), field_size(f, "in"), field_size(f, "out"));
      b->body() = parse_layers<T>(in, true, nullptr);
      out.push_back(std::move(b));
    } else {
      throw FormatError("descriptor: unknown layer kind '" + kind + "'");
    }
  }
  if (nested) throw FormatError("descriptor: unterminated block");
  return out;
}

}  // namespace detail

/// Builds an uninitialized model from descriptor text (see Model::describe).
template <class T>
Model<T> model_from_descriptor(const std::string& text) {
  std::istringstream in(text);
  Model<T> m;
  m.layers = detail::parse_layers<T>(in, false, &m.meta);
  try {
    m.validate();
  } catch (const DimensionError& e) {
    throw IntegrityError(std::string("descriptor shapes inconsistent: ") + e.what());
  }
  return m;
}

template <class To, class From>
Model<To> convert_model(const Model<From>& m) {
  Model<To> out = model_from_descriptor<To>(m.describe());
  const StateDict<From> src = m.state();
  StateDict<To> dst;
  auto conv = [](const std::map<std::string, NamedArray<From>>& a, std::map<std::string, NamedArray<To>>& b) {
    for (const auto& [k, v] : a) {
      NamedArray<To> t;
      t.dims = v.dims;
      t.data.assign(v.data.begin(), v.data.end());
      b[k] = std::move(t);
    }
  };
  conv(src.tensors, dst.tensors);
  conv(src.gabor, dst.gabor);
  dst.masks = src.masks;
  out.load_state(dst);
  return out;
}

}  // namespace gabornet
