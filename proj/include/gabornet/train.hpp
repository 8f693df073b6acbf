#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gabornet/data.hpp"
#include "gabornet/errors.hpp"
#include "gabornet/gabor.hpp"
#include "gabornet/model.hpp"
#include "gabornet/rng.hpp"

namespace gabornet {

template <class T>
struct LossResult {
  double loss = 0.0;
  Tensor4<T> grad;
  std::size_t correct = 0;
};

/// Index of the largest logit; ties go to the lowest index.
template <class T>
std::size_t argmax_row(const T* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
template <class T>
LossResult<T> softmax_cross_entropy(const Tensor4<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.n();
  const std::size_t k = logits.sample_size();
  if (labels.size() != n) throw DimensionError("loss: label count mismatch");
  LossResult<T> r;
  r.grad = Tensor4<T>(logits.dims());
  for (std::size_t b = 0; b < n; ++b) {
    const T* z = logits.sample(b);
    const auto y = static_cast<std::size_t>(labels[b]);
    if (y >= k) throw InvalidArgumentError("loss: label out of range");
    const double zmax = static_cast<double>(*std::max_element(z, z + k));
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(z[j]) - zmax);
    const double log_denom = std::log(denom);
    r.loss += -(static_cast<double>(z[y]) - zmax - log_denom);
    T* g = r.grad.sample(b);
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(static_cast<double>(z[j]) - zmax - log_denom);
      g[j] = static_cast<T>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
    if (argmax_row(z, k) == y) ++r.correct;
  }
  r.loss /= static_cast<double>(n);
  return r;
}

// ---------------------------------------------------------------------------

struct OptimizerConfig {
  double lr = 0.1;
  /// Epochs at which the learning rate is multiplied by lr_gamma.
  std::vector<std::size_t> milestones;
  double lr_gamma = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 1;

  double lr_at(std::size_t epoch) const {
    double lr_e = lr;
    for (std::size_t m : milestones) {
      if (epoch >= m) lr_e *= lr_gamma;
    }
    return lr_e;
  }

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be >= 0");
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  }
};

/// Milestones at the given fractions of the epoch budget (0.5, 0.75 by default),
/// never before the end of the first epoch.
inline std::vector<std::size_t> milestones_at(std::size_t epochs, const std::vector<double>& fractions = {0.5, 0.75}) {
  std::vector<std::size_t> out;
  for (double f : fractions) {
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(f * static_cast<double>(epochs)))));
  }
  return out;
}

inline bool decays(DecayRule rule, std::size_t index) {
  switch (rule) {
    case DecayRule::All: return true;
    case DecayRule::None: return false;
    case DecayRule::GaborAmplitude: return index % GaborParams::kCount == static_cast<std::size_t>(GaborField::a);
  }
  return false;
}

/// Momentum SGD with coupled weight decay:
///   v <- momentum * v + (g + wd * p);  p <- p - lr * v
/// For Gabor grids decay touches only the amplitude entries.
template <class T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<ParamRef<T>>& params, double lr) {
    for (const auto& p : params) {
      if (p.value.size() != p.grad.size()) throw DimensionError("sgd: parameter/gradient size mismatch for " + p.name);
      auto& v = velocity_[p.name];
      if (v.size() != p.value.size()) v.assign(p.value.size(), 0.0);
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        double g = static_cast<double>(p.grad[j]);
        if (weight_decay_ != 0.0 && decays(p.decay, j)) g += weight_decay_ * static_cast<double>(p.value[j]);
        v[j] = momentum_ * v[j] + g;
        p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - lr * v[j]);
      }
    }
  }

  const std::map<std::string, std::vector<double>>& velocity() const { return velocity_; }
  std::map<std::string, std::vector<double>>& velocity() { return velocity_; }

 private:
  double momentum_, weight_decay_;
  std::map<std::string, std::vector<double>> velocity_;
};

// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;  // fraction in [0, 1]
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t batches = 0;

  double percent() const { return 100.0 * accuracy; }
};

/// Top-1 accuracy over the dataset in file order, inference mode.
template <class T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size = 128) {
  if (data.size() == 0) throw InvalidArgumentError("evaluate: empty dataset");
  if (batch_size == 0) throw InvalidArgumentError("evaluate: batch size must be >= 1");
  EvalResult r;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor4<T> x = make_batch<T>(data, idx, nullptr, labels);
    const Tensor4<T> logits = model.forward(x, Phase::Eval);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (argmax_row(logits.sample(b), logits.sample_size()) == static_cast<std::size_t>(labels[b])) ++r.correct;
    }
    ++r.batches;
  }
  r.total = data.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double eval_accuracy = -1.0;  // -1 when not evaluated this epoch
};

struct TrainOptions {
  std::size_t eval_every = 1;  // 0 disables per-epoch evaluation
  std::size_t eval_batch = 128;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

template <class T>
void require_finite_params(Model<T>& model, std::size_t epoch, std::size_t step) {
  for (const auto& p : model.parameters()) {
    for (T v : p.value) {
      if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "non-finite value in '" << p.name << "' at epoch " << epoch << " step " << step;
        throw DivergenceError(os.str());
      }
    }
  }
}

/// Mini-batch SGD. Shuffling and augmentation draw from `rng`; with a fixed
/// rng state the run is bit-reproducible.
template <class T>
TrainHistory train(Model<T>& model, const Dataset& data, const Dataset* eval_data, const OptimizerConfig& cfg,
                   Rng& rng, const TrainOptions& opts = {}) {
  cfg.validate();
  if (data.size() == 0) throw InvalidArgumentError("train: empty dataset");
  Sgd<T> opt(cfg.momentum, cfg.weight_decay);
  TrainHistory hist;
  std::vector<std::size_t> order(data.size());
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor4<T> x = make_batch<T>(data, idx, &rng, labels);
      model.zero_grad();
      const Tensor4<T> logits = model.forward(x, Phase::Train);
      LossResult<T> lr_res = softmax_cross_entropy<T>(logits, labels);
      if (!std::isfinite(lr_res.loss)) {
        std::ostringstream os;
        os << "loss diverged (" << lr_res.loss << ") at epoch " << epoch << " step " << step;
        throw DivergenceError(os.str());
      }
      model.backward(lr_res.grad);
      auto params = model.parameters();
      opt.step(params, lr);
      loss_sum += lr_res.loss * static_cast<double>(idx.size());
      correct += lr_res.correct;
    }
    require_finite_params(model, epoch, step);
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = loss_sum / static_cast<double>(data.size());
    st.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    const bool last = epoch + 1 == cfg.epochs;
    if (eval_data != nullptr && opts.eval_every > 0 && ((epoch + 1) % opts.eval_every == 0 || last)) {
      st.eval_accuracy = evaluate(model, *eval_data, opts.eval_batch).accuracy;
    }
    hist.epochs.push_back(st);
    if (opts.on_epoch) opts.on_epoch(st);
  }
  return hist;
}

}  // namespace gabornet
