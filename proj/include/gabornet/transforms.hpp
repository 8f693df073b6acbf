#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gabornet/errors.hpp"
#include "gabornet/fitting.hpp"
#include "gabornet/model.hpp"
#include "gabornet/rng.hpp"

namespace gabornet {

/// Receptive field of a chain of (kernel, stride) layers:
/// r <- r + (k - 1) * jump, jump <- jump * stride.
inline std::size_t receptive_field(const std::vector<std::pair<std::size_t, std::size_t>>& layers) {
  std::size_t r = 1, jump = 1;
  for (auto [k, s] : layers) {
    r += (k - 1) * jump;
    jump *= s;
  }
  return r;
}

enum class ExpandInit { Fresh, EmbedOld };

struct ExpandOptions {
  ExpandInit init = ExpandInit::Fresh;
  /// ResNet only: drop the first residual block after the stem so the
  /// receptive field stays close to the original.
  bool drop_following_block = false;
};

/// Replaces the first conv layer with a new_k x new_k one, padding adjusted
/// so that the output spatial size is unchanged.
template <class T>
void expand_first_layer(Model<T>& model, std::size_t new_k, Rng& rng, const ExpandOptions& opts = {}) {
  std::size_t pos = model.layers.size();
  for (std::size_t j = 0; j < model.layers.size(); ++j) {
    if (dynamic_cast<Conv2d<T>*>(model.layers[j].get()) != nullptr) {
      pos = j;
      break;
    }
  }
  if (pos == model.layers.size()) throw StructureError("expand_first_layer: model has no top-level conv layer");
  auto& old = dynamic_cast<Conv2d<T>&>(*model.layers[pos]);
  if (new_k < old.k()) throw InvalidArgumentError("expand_first_layer: new kernel smaller than current");
  if ((new_k - old.k()) % 2 != 0) throw InvalidArgumentError("expand_first_layer: kernel growth must be even");
  const std::size_t grow = (new_k - old.k()) / 2;
  auto fresh = std::make_unique<Conv2d<T>>(old.name(), old.n_in(), old.n_out(), new_k, old.stride(),
                                           old.pad() + grow, old.has_bias());
  if (opts.init == ExpandInit::Fresh) {
    he_init(*fresh, rng);
  } else {
    const Tensor4<T> w = old.effective_weights();
    for (std::size_t o = 0; o < old.n_out(); ++o) {
      for (std::size_t i = 0; i < old.n_in(); ++i) {
        for (std::size_t y = 0; y < old.k(); ++y) {
          for (std::size_t x = 0; x < old.k(); ++x) fresh->weights()(o, i, y + grow, x + grow) = w(o, i, y, x);
        }
      }
    }
    fresh->bias() = old.effective_bias();
  }
  model.layers[pos] = std::move(fresh);
  if (opts.drop_following_block) {
    for (std::size_t j = pos + 1; j < model.layers.size(); ++j) {
      auto* b = dynamic_cast<ResidualBlock<T>*>(model.layers[j].get());
      if (b == nullptr) continue;
      if (b->shortcut() != Shortcut::Identity) throw StructureError("expand_first_layer: first block is not a pass-through candidate");
      model.meta["transform.dropped_block"] = b->name();
      model.layers.erase(model.layers.begin() + static_cast<std::ptrdiff_t>(j));
      break;
    }
  }
  model.meta["transform.first_layer_k"] = std::to_string(new_k);
  model.record_original_sizes();
  model.validate();
}

/// Replaces the ResNet head (stem conv plus the first two identity blocks,
/// five 3x3 convs of the stage-1 width) with two plain conv-bn-relu layers of
/// kernel sizes k1 and k2 and no shortcuts.
template <class T>
void alter_resnet_head(Model<T>& model, std::size_t k1, std::size_t k2, Rng& rng) {
  auto& L = model.layers;
  auto fail = [](const std::string& why) { throw StructureError("alter_resnet_head: " + why); };
  if (L.size() < 5) fail("model too short");
  auto* stem = dynamic_cast<Conv2d<T>*>(L[0].get());
  if (stem == nullptr || stem->k() != 3) fail("first layer is not a 3x3 conv");
  if (dynamic_cast<BatchNorm2d<T>*>(L[1].get()) == nullptr || dynamic_cast<ReLU<T>*>(L[2].get()) == nullptr) {
    fail("stem is not conv-bn-relu");
  }
  const std::size_t width = stem->n_out();
  for (std::size_t j = 3; j < 5; ++j) {
    auto* b = dynamic_cast<ResidualBlock<T>*>(L[j].get());
    if (b == nullptr || b->shortcut() != Shortcut::Identity) fail("expected two identity residual blocks after the stem");
    for (const auto& l : b->body()) {
      if (auto* c = dynamic_cast<Conv2d<T>*>(l.get())) {
        if (c->k() != 3 || c->n_out() != width || c->n_in() != width || c->stride() != 1) {
          fail("head block conv is not 3x3 with the stem width");
        }
      }
    }
  }
  if (k1 % 2 == 0 || k2 % 2 == 0) throw InvalidArgumentError("alter_resnet_head: kernel sizes must be odd");
  const std::size_t in_ch = stem->n_in();
  std::vector<std::unique_ptr<Layer<T>>> head;
  auto c1 = std::make_unique<Conv2d<T>>("head1", in_ch, width, k1, 1, k1 / 2, false);
  auto c2 = std::make_unique<Conv2d<T>>("head2", width, width, k2, 1, k2 / 2, false);
  he_init(*c1, rng);
  he_init(*c2, rng);
  head.push_back(std::move(c1));
  head.push_back(std::make_unique<BatchNorm2d<T>>("head_bn1", width));
  head.push_back(std::make_unique<ReLU<T>>());
  head.push_back(std::move(c2));
  head.push_back(std::make_unique<BatchNorm2d<T>>("head_bn2", width));
  head.push_back(std::make_unique<ReLU<T>>());
  L.erase(L.begin(), L.begin() + 5);
  L.insert(L.begin(), std::make_move_iterator(head.begin()), std::make_move_iterator(head.end()));
  model.meta["transform.head"] = std::to_string(k1) + "," + std::to_string(k2);
  model.record_original_sizes();
  model.validate();
}

/// Switches conv layer `ordinal` to Gabor mode with the fitted parameters.
template <class T>
void convert_layer_to_gabor(Model<T>& model, std::size_t ordinal, const LayerFit& fit) {
  Conv2d<T>& c = model.conv(ordinal);
  if (fit.n_out != c.n_out() || fit.n_in != c.n_in() || static_cast<std::size_t>(fit.k) != c.k()) {
    throw DimensionError("convert_layer_to_gabor: fit shape does not match conv layer " + std::to_string(ordinal + 1));
  }
  std::vector<GaborParams> params;
  params.reserve(fit.results.size());
  for (const auto& r : fit.results) params.push_back(r.params);
  c.make_gabor(params);
}

template <class T>
void convert_layer_to_standard(Model<T>& model, std::size_t ordinal) {
  model.conv(ordinal).make_standard();
}

template <class T>
LayerFit fit_model_layer(const Model<T>& model, std::size_t ordinal, AmplitudeScale scale, unsigned workers = 1) {
  const Conv2d<T>& c = model.conv(ordinal);
  return fit_layer(c.effective_weights(), default_grid(static_cast<int>(c.k()), scale), workers);
}

}  // namespace gabornet
