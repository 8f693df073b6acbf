#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gabornet/data.hpp"
#include "gabornet/errors.hpp"
#include "gabornet/model.hpp"
#include "gabornet/train.hpp"

namespace gabornet {

enum class Granularity { Kernel, Channel };

inline const char* to_string(Granularity g) { return g == Granularity::Kernel ? "kernel" : "channel"; }

inline Granularity parse_granularity(const std::string& s) {
  if (s == "kernel") return Granularity::Kernel;
  if (s == "channel") return Granularity::Channel;
  throw ConfigError("unknown granularity '" + s + "'");
}

enum class PruneMode { StopAtFirstFailure, SkipAndContinue };

struct PruneSpec {
  std::size_t layer = 0;  // conv ordinal, 0-based
  Granularity granularity = Granularity::Kernel;
  double tolerance = 0.2;  // accuracy drop allowed, percentage points
  PruneMode mode = PruneMode::StopAtFirstFailure;
  std::size_t eval_batch = 128;
};

struct PruneStep {
  std::size_t step = 0;
  std::size_t index = 0;  // kernel o*n_in+i or channel o
  double l1_norm = 0.0;
  double accuracy = 0.0;  // percent, after this prune
};

struct PruneReport {
  std::size_t layer = 0;
  Granularity granularity = Granularity::Kernel;
  double tolerance = 0.0;
  double baseline = 0.0;  // percent
  std::vector<PruneStep> steps;
  std::size_t candidates = 0;
  std::optional<PruneStep> rejected;  // first candidate that broke the tolerance

  std::size_t pruned() const { return steps.size(); }
  double final_accuracy() const { return steps.empty() ? baseline : steps.back().accuracy; }
};

/// CSV: one row per kept prune step.
inline void write_prune_csv(std::ostream& os, const PruneReport& r) {
  os << "step,granularity,layer,index,l1_norm,accuracy\n";
  char buf[160];
  for (const auto& s : r.steps) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%zu,%.9g,%.4f\n", s.step, to_string(r.granularity), r.layer + 1,
                  s.index, s.l1_norm, s.accuracy);
    os << buf;
  }
}

// ---------------------------------------------------------------------------

/// L1 norms of the effective (synthesized, masked) kernels, index o*n_in+i.
template <class T>
std::vector<double> kernel_l1_norms(const Conv2d<T>& c) {
  const Tensor4<T> w = c.effective_weights();
  std::vector<double> out(c.n_out() * c.n_in(), 0.0);
  const std::size_t area = c.k() * c.k();
  for (std::size_t j = 0; j < out.size(); ++j) {
    const T* p = w.data() + j * area;
    double s = 0.0;
    for (std::size_t q = 0; q < area; ++q) s += std::abs(static_cast<double>(p[q]));
    out[j] = s;
  }
  return out;
}

template <class T>
std::vector<double> channel_l1_norms(const Conv2d<T>& c) {
  const auto kn = kernel_l1_norms(c);
  std::vector<double> out(c.n_out(), 0.0);
  for (std::size_t o = 0; o < c.n_out(); ++o) {
    for (std::size_t i = 0; i < c.n_in(); ++i) out[o] += kn[o * c.n_in() + i];
  }
  return out;
}

/// Unmasked kernels or channels in ascending L1 norm, ties by ascending index.
template <class T>
std::vector<std::size_t> l1_rank(const Conv2d<T>& c, Granularity g) {
  std::vector<double> norms;
  std::vector<std::size_t> idx;
  if (g == Granularity::Kernel) {
    norms = kernel_l1_norms(c);
    for (std::size_t j = 0; j < norms.size(); ++j) {
      if (c.kernel_active(j / c.n_in(), j % c.n_in())) idx.push_back(j);
    }
  } else {
    norms = channel_l1_norms(c);
    for (std::size_t o = 0; o < norms.size(); ++o) {
      if (!c.channel_masked(o)) idx.push_back(o);
    }
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
  return idx;
}

/// Layers coupled to the output channels of a top-level conv: the batch norm
/// right after it and the next consumer (conv or dense).
template <class T>
struct ChannelCoupling {
  Conv2d<T>* conv = nullptr;
  BatchNorm2d<T>* bn = nullptr;
  Conv2d<T>* next_conv = nullptr;
  Dense<T>* next_dense = nullptr;
};

template <class T>
ChannelCoupling<T> find_coupling(Model<T>& model, std::size_t ordinal) {
  Conv2d<T>* target = &model.conv(ordinal);
  std::size_t pos = model.layers.size();
  for (std::size_t j = 0; j < model.layers.size(); ++j) {
    if (model.layers[j].get() == target) pos = j;
  }
  if (pos == model.layers.size()) {
    throw StructureError("channel pruning of conv layer " + std::to_string(ordinal + 1) +
                         " inside a residual block is not supported");
  }
  ChannelCoupling<T> cp;
  cp.conv = target;
  for (std::size_t j = pos + 1; j < model.layers.size(); ++j) {
    Layer<T>* l = model.layers[j].get();
    if (auto* bn = dynamic_cast<BatchNorm2d<T>*>(l)) {
      if (cp.bn != nullptr) throw StructureError("two batch norms between coupled layers");
      cp.bn = bn;
    } else if (auto* c = dynamic_cast<Conv2d<T>*>(l)) {
      cp.next_conv = c;
      break;
    } else if (auto* d = dynamic_cast<Dense<T>*>(l)) {
      cp.next_dense = d;
      break;
    } else if (dynamic_cast<ResidualBlock<T>*>(l) != nullptr) {
      throw StructureError("channel pruning of conv layer " + std::to_string(ordinal + 1) +
                           " feeding a residual block is not supported");
    }
  }
  return cp;
}

namespace detail {

template <class T>
struct MaskSnapshot {
  std::vector<std::uint8_t> kernel, channel, bn, next;

  static MaskSnapshot take(const ChannelCoupling<T>& cp) {
    MaskSnapshot s;
    s.kernel = cp.conv->kernel_mask();
    s.channel = cp.conv->channel_mask();
    if (cp.bn) s.bn = cp.bn->channel_mask();
    if (cp.next_conv) s.next = cp.next_conv->kernel_mask();
    return s;
  }
  void restore(const ChannelCoupling<T>& cp) const {
    cp.conv->kernel_mask() = kernel;
    cp.conv->channel_mask() = channel;
    if (cp.bn) cp.bn->channel_mask() = bn;
    if (cp.next_conv) cp.next_conv->kernel_mask() = next;
  }
};

}  // namespace detail

/// Masks output channel `o` and everything coupled to it.
template <class T>
void mask_channel(const ChannelCoupling<T>& cp, std::size_t o) {
  cp.conv->set_channel_mask(o, true);
  if (cp.bn) cp.bn->channel_mask()[o] = 1;
  if (cp.next_conv) {
    for (std::size_t q = 0; q < cp.next_conv->n_out(); ++q) cp.next_conv->set_kernel_mask(q, o, true);
  }
}

/// Walks the L1 ranking from the minimum, keeping each mask while accuracy
/// stays >= baseline - tolerance. Stops at the first violation unless
/// SkipAndContinue is set. On any exception the model is left unchanged.
template <class T>
PruneReport prune_greedy(Model<T>& model, const PruneSpec& spec, const Dataset& eval_data) {
  if (!(spec.tolerance >= 0.0)) throw InvalidArgumentError("prune: tolerance must be >= 0");
  const Model<T> backup = model;
  try {
    PruneReport r;
    r.layer = spec.layer;
    r.granularity = spec.granularity;
    r.tolerance = spec.tolerance;
    Conv2d<T>& conv = model.conv(spec.layer);
    ChannelCoupling<T> cp;
    if (spec.granularity == Granularity::Channel) {
      cp = find_coupling(model, spec.layer);
    } else {
      cp.conv = &conv;
    }
    r.baseline = evaluate(model, eval_data, spec.eval_batch).percent();
    const std::vector<std::size_t> order = l1_rank(conv, spec.granularity);
    const std::vector<double> norms =
        spec.granularity == Granularity::Kernel ? kernel_l1_norms(conv) : channel_l1_norms(conv);
    r.candidates = order.size();
    const double floor = r.baseline - spec.tolerance - 1e-9;
    for (std::size_t idx : order) {
      const auto snap = detail::MaskSnapshot<T>::take(cp);
      if (spec.granularity == Granularity::Kernel) {
        conv.set_kernel_mask(idx / conv.n_in(), idx % conv.n_in(), true);
      } else {
        mask_channel(cp, idx);
      }
      const double acc = evaluate(model, eval_data, spec.eval_batch).percent();
      PruneStep st{r.steps.size() + 1, idx, norms[idx], acc};
      if (acc >= floor) {
        r.steps.push_back(st);
        continue;
      }
      snap.restore(cp);
      if (!r.rejected) r.rejected = st;
      if (spec.mode == PruneMode::StopAtFirstFailure) break;
    }
    return r;
  } catch (...) {
    model = backup;
    throw;
  }
}

/// Physically removes fully masked output channels of top-level conv layers
/// together with the coupled batch-norm channels and consumer inputs.
/// Kernel masks that do not cover a whole channel stay as masks.
template <class T>
Model<T> compact(Model<T> model) {
  auto convs = model.convs();
  for (std::size_t ord = 0; ord < convs.size(); ++ord) {
    Conv2d<T>* c = convs[ord];
    const bool any_channel =
        std::any_of(c->channel_mask().begin(), c->channel_mask().end(), [](std::uint8_t v) { return v != 0; });
    if (!any_channel) continue;
    ChannelCoupling<T> cp;
    try {
      cp = find_coupling(model, ord);
    } catch (const StructureError& e) {
      throw IntegrityError(std::string("cannot compact: ") + e.what());
    }
    std::vector<bool> keep(c->n_out());
    for (std::size_t o = 0; o < c->n_out(); ++o) {
      keep[o] = !c->channel_masked(o);
      if (keep[o]) continue;
      if (cp.bn && !cp.bn->channel_mask()[o]) {
        throw IntegrityError("channel " + std::to_string(o) + " of conv layer " + std::to_string(ord + 1) +
                             " is masked but its batch-norm channel is not");
      }
      if (cp.next_conv) {
        for (std::size_t q = 0; q < cp.next_conv->n_out(); ++q) {
          if (!cp.next_conv->kernel_masked(q, o)) {
            throw IntegrityError("channel " + std::to_string(o) + " of conv layer " + std::to_string(ord + 1) +
                                 " is masked but the next layer still reads it");
          }
        }
      }
    }
    c->keep_outputs(keep);
    if (cp.bn) cp.bn->keep_channels(keep);
    if (cp.next_conv) cp.next_conv->keep_inputs(keep);
    if (cp.next_dense) cp.next_dense->keep_input_channels(keep);
  }
  model.validate();
  return model;
}

/// Fraction of the layer's original kernels that are no longer active.
template <class T>
double kernel_pruned_fraction(const Model<T>& model, std::size_t ordinal) {
  const Conv2d<T>& c = model.conv(ordinal);
  const std::string key = "conv" + std::to_string(ordinal + 1);
  const double total = std::stod(model.meta_or(key + ".orig_out", std::to_string(c.n_out()))) *
                       std::stod(model.meta_or(key + ".orig_in", std::to_string(c.n_in())));
  return total == 0.0 ? 0.0 : 1.0 - static_cast<double>(c.active_kernel_count()) / total;
}

template <class T>
double channel_pruned_fraction(const Model<T>& model, std::size_t ordinal) {
  const Conv2d<T>& c = model.conv(ordinal);
  const std::string key = "conv" + std::to_string(ordinal + 1);
  const double total = std::stod(model.meta_or(key + ".orig_out", std::to_string(c.n_out())));
  return total == 0.0 ? 0.0 : 1.0 - static_cast<double>(c.active_channel_count()) / total;
}

template <class T>
double pruned_fraction(const Model<T>& model, std::size_t ordinal, Granularity g) {
  return g == Granularity::Kernel ? kernel_pruned_fraction(model, ordinal) : channel_pruned_fraction(model, ordinal);
}

}  // namespace gabornet
