#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gabornet/errors.hpp"
#include "gabornet/gabor.hpp"
#include "gabornet/tensor.hpp"

namespace gabornet {

enum class Phase { Train, Eval };

/// Which entries of a parameter weight decay applies to.
enum class DecayRule { All, None, GaborAmplitude };

template <class T>
struct ParamRef {
  std::string name;
  std::span<T> value;
  std::span<T> grad;
  DecayRule decay = DecayRule::All;
};

template <class T>
struct NamedArray {
  std::vector<std::uint64_t> dims;
  std::vector<T> data;
};

/// Serializable layer state: plain tensors (weights, biases, running stats),
/// Gabor parameter grids (8 values per kernel, GaborParams field order) and
/// boolean masks. Keys are "<layer>.<field>".
template <class T>
struct StateDict {
  std::map<std::string, NamedArray<T>> tensors;
  std::map<std::string, NamedArray<T>> gabor;
  std::map<std::string, std::vector<std::uint8_t>> masks;
};

namespace detail {

template <class T>
const NamedArray<T>& require_entry(const std::map<std::string, NamedArray<T>>& m, const std::string& key,
                                   const std::vector<std::uint64_t>& dims) {
  auto it = m.find(key);
  if (it == m.end()) throw IntegrityError("missing tensor '" + key + "'");
  if (it->second.dims != dims) throw IntegrityError("shape mismatch for '" + key + "'");
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  if (it->second.data.size() != n) throw IntegrityError("payload size mismatch for '" + key + "'");
  return it->second;
}

inline const std::vector<std::uint8_t>& require_mask(const std::map<std::string, std::vector<std::uint8_t>>& m,
                                                     const std::string& key, std::size_t n) {
  auto it = m.find(key);
  if (it == m.end()) throw IntegrityError("missing mask '" + key + "'");
  if (it->second.size() != n) throw IntegrityError("mask size mismatch for '" + key + "'");
  return it->second;
}

inline void indent(std::ostream& os, int depth) {
  for (int i = 0; i < depth; ++i) os << "  ";
}

}  // namespace detail

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  const std::string& name() const { return name_; }
  void set_name(std::string n) { name_ = std::move(n); }

  virtual Tensor4<T> forward(const Tensor4<T>& x, Phase phase) = 0;
  /// Returns d(loss)/d(input) and accumulates parameter gradients.
  virtual Tensor4<T> backward(const Tensor4<T>& grad_out) = 0;

  virtual void collect_params(std::vector<ParamRef<T>>&) {}
  virtual void zero_grad() {}
  virtual void export_state(StateDict<T>&) const {}
  virtual void import_state(const StateDict<T>&) {}
  virtual std::unique_ptr<Layer> clone() const = 0;
  /// One descriptor line (or block) in the architecture text format.
  virtual void describe(std::ostream& os, int depth) const = 0;
  /// Output dims for a given input; throws DimensionError when incompatible.
  virtual Dims4 output_dims(const Dims4& in) const = 0;

 protected:
  std::string name_;
};

// ---------------------------------------------------------------------------
// Convolution kernels

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw DimensionError("kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

template <class T>
Tensor4<T> pad_input(const Tensor4<T>& x, std::size_t pad) {
  if (pad == 0) return x;
  Tensor4<T> out(x.n(), x.c(), x.h() + 2 * pad, x.w() + 2 * pad);
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t c = 0; c < x.c(); ++c) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t y = 0; y < x.h(); ++y) {
        std::copy(src + y * x.w(), src + (y + 1) * x.w(), dst + (y + pad) * out.w() + pad);
      }
    }
  }
  return out;
}

inline bool active(std::span<const std::uint8_t> mask, std::size_t idx) {
  return mask.empty() || mask[idx] != 0;
}

}  // namespace detail

/// Cross-correlation with zero padding. `active_kernels` (n_out*n_in, may be
/// empty) selects which kernels participate; inactive ones count as zero.
template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const Tensor4<T>& weights, std::span<const T> bias,
                          std::size_t stride, std::size_t pad,
                          std::span<const std::uint8_t> active_kernels = {}) {
  if (input.c() != weights.c()) {
    throw DimensionError("conv2d: input channels " + std::to_string(input.c()) + " != layer n_in " +
                         std::to_string(weights.c()));
  }
  if (weights.h() != weights.w()) throw DimensionError("conv2d: non-square kernel");
  if (stride == 0) throw InvalidArgumentError("conv2d: stride must be >= 1");
  const std::size_t k = weights.h();
  const std::size_t ho = conv_out_size(input.h(), k, stride, pad);
  const std::size_t wo = conv_out_size(input.w(), k, stride, pad);
  const Tensor4<T> xp = detail::pad_input(input, pad);
  const std::size_t n_out = weights.n();
  const std::size_t n_in = weights.c();
  Tensor4<T> out(input.n(), n_out, ho, wo);
  for (std::size_t n = 0; n < input.n(); ++n) {
    for (std::size_t o = 0; o < n_out; ++o) {
      T* dst = out.plane(n, o);
      if (!bias.empty()) std::fill(dst, dst + ho * wo, bias[o]);
      for (std::size_t i = 0; i < n_in; ++i) {
        if (!detail::active(active_kernels, o * n_in + i)) continue;
        const T* src = xp.plane(n, i);
        const T* wk = weights.plane(o, i);
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wv = wk[ky * k + kx];
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const T* row = src + (oy * stride + ky) * xp.w() + kx;
              T* drow = dst + oy * wo;
              if (stride == 1) {
                for (std::size_t ox = 0; ox < wo; ++ox) drow[ox] += wv * row[ox];
              } else {
                for (std::size_t ox = 0; ox < wo; ++ox) drow[ox] += wv * row[ox * stride];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
struct ConvGrads {
  Tensor4<T> input_grad;
  Tensor4<T> weight_grad;
  std::vector<T> bias_grad;
};

/// Exact gradients of conv2d_forward. Inactive kernels get zero weight_grad.
template <class T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, const Tensor4<T>& weights,
                             std::size_t stride, std::size_t pad,
                             std::span<const std::uint8_t> active_kernels = {}) {
  if (input.c() != weights.c()) throw DimensionError("conv2d_backward: channel mismatch");
  const std::size_t k = weights.h();
  const std::size_t ho = conv_out_size(input.h(), k, stride, pad);
  const std::size_t wo = conv_out_size(input.w(), k, stride, pad);
  if (upstream.dims() != Dims4{input.n(), weights.n(), ho, wo}) {
    throw DimensionError("conv2d_backward: upstream " + dims_string(upstream.dims()) + " inconsistent with forward");
  }
  const Tensor4<T> xp = detail::pad_input(input, pad);
  const std::size_t n_out = weights.n();
  const std::size_t n_in = weights.c();
  Tensor4<T> dxp(xp.dims());
  ConvGrads<T> g;
  g.weight_grad = Tensor4<T>(weights.dims());
  g.bias_grad.assign(n_out, T{0});
  for (std::size_t n = 0; n < input.n(); ++n) {
    for (std::size_t o = 0; o < n_out; ++o) {
      const T* up = upstream.plane(n, o);
      T bsum{0};
      for (std::size_t j = 0; j < ho * wo; ++j) bsum += up[j];
      g.bias_grad[o] += bsum;
      for (std::size_t i = 0; i < n_in; ++i) {
        if (!detail::active(active_kernels, o * n_in + i)) continue;
        const T* src = xp.plane(n, i);
        T* dsrc = dxp.plane(n, i);
        const T* wk = weights.plane(o, i);
        T* dwk = g.weight_grad.plane(o, i);
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wv = wk[ky * k + kx];
            T acc{0};
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const std::size_t off = (oy * stride + ky) * xp.w() + kx;
              const T* row = src + off;
              T* drow = dsrc + off;
              const T* urow = up + oy * wo;
              if (stride == 1) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  acc += urow[ox] * row[ox];
                  drow[ox] += wv * urow[ox];
                }
              } else {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  acc += urow[ox] * row[ox * stride];
                  drow[ox * stride] += wv * urow[ox];
                }
              }
            }
            dwk[ky * k + kx] += acc;
          }
        }
      }
    }
  }
  if (pad == 0) {
    g.input_grad = std::move(dxp);
  } else {
    g.input_grad = Tensor4<T>(input.dims());
    for (std::size_t n = 0; n < input.n(); ++n) {
      for (std::size_t c = 0; c < input.c(); ++c) {
        const T* src = dxp.plane(n, c);
        T* dst = g.input_grad.plane(n, c);
        for (std::size_t y = 0; y < input.h(); ++y) {
          std::copy(src + (y + pad) * dxp.w() + pad, src + (y + pad) * dxp.w() + pad + input.w(),
                    dst + y * input.w());
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

enum class ConvMode { Standard, GaborParameterized };

/// Convolution layer. In GaborParameterized mode the weights are synthesized
/// from one GaborParams per (out, in) kernel before every forward pass and
/// weight gradients are chained into Gabor parameter gradients.
template <class T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, std::size_t n_in, std::size_t n_out, std::size_t k, std::size_t stride,
         std::size_t pad, bool bias)
      : n_in_(n_in), n_out_(n_out), k_(k), stride_(stride), pad_(pad), has_bias_(bias) {
    if (k == 0 || stride == 0) throw InvalidArgumentError("conv: k and stride must be >= 1");
    this->name_ = std::move(name);
    weight_ = Tensor4<T>(n_out, n_in, k, k);
    weight_grad_ = Tensor4<T>(n_out, n_in, k, k);
    if (bias) {
      bias_.assign(n_out, T{0});
      bias_grad_.assign(n_out, T{0});
    }
    kernel_mask_.assign(n_out * n_in, 0);
    channel_mask_.assign(n_out, 0);
  }

  std::string kind() const override { return "conv"; }

  std::size_t n_in() const { return n_in_; }
  std::size_t n_out() const { return n_out_; }
  std::size_t k() const { return k_; }
  std::size_t stride() const { return stride_; }
  std::size_t pad() const { return pad_; }
  bool has_bias() const { return has_bias_; }
  ConvMode mode() const { return mode_; }
  bool is_gabor() const { return mode_ == ConvMode::GaborParameterized; }

  /// Raw weights. For Gabor layers this is the last synthesis.
  Tensor4<T>& weights() { return weight_; }
  const Tensor4<T>& weights() const { return weight_; }
  std::vector<T>& bias() { return bias_; }
  const std::vector<T>& bias() const { return bias_; }
  std::vector<T>& gabor_values() { return gabor_; }
  const std::vector<T>& gabor_values() const { return gabor_; }
  const Tensor4<T>& weight_grad() const { return weight_grad_; }
  const std::vector<T>& gabor_grad() const { return gabor_grad_; }

  GaborParams gabor_params(std::size_t o, std::size_t i) const {
    GaborParams p;
    const T* src = gabor_.data() + (o * n_in_ + i) * GaborParams::kCount;
    for (std::size_t f = 0; f < GaborParams::kCount; ++f) p[f] = static_cast<double>(src[f]);
    return p;
  }
  void set_gabor_params(std::size_t o, std::size_t i, const GaborParams& p) {
    T* dst = gabor_.data() + (o * n_in_ + i) * GaborParams::kCount;
    for (std::size_t f = 0; f < GaborParams::kCount; ++f) dst[f] = static_cast<T>(p[f]);
  }

  /// Switches to Gabor mode with the given per-kernel parameters (o * n_in + i).
  void make_gabor(const std::vector<GaborParams>& params) {
    if (params.size() != n_out_ * n_in_) throw DimensionError("make_gabor: parameter grid size mismatch");
    mode_ = ConvMode::GaborParameterized;
    gabor_.assign(n_out_ * n_in_ * GaborParams::kCount, T{0});
    gabor_grad_.assign(gabor_.size(), T{0});
    for (std::size_t j = 0; j < params.size(); ++j) set_gabor_params(j / n_in_, j % n_in_, params[j]);
    synthesize();
  }

  /// Freezes the current synthesis into free weights.
  void make_standard() {
    if (!is_gabor()) return;
    synthesize();
    mode_ = ConvMode::Standard;
    gabor_.clear();
    gabor_grad_.clear();
    weight_grad_.fill(T{0});
  }

  void synthesize() {
    if (!is_gabor()) return;
    for (std::size_t o = 0; o < n_out_; ++o) {
      for (std::size_t i = 0; i < n_in_; ++i) {
        const Kernel2D kern = synth_kernel(gabor_params(o, i), static_cast<int>(k_));
        T* dst = weight_.plane(o, i);
        for (std::size_t j = 0; j < kern.size(); ++j) dst[j] = static_cast<T>(kern[j]);
      }
    }
  }

  bool kernel_active(std::size_t o, std::size_t i) const {
    return !channel_mask_[o] && !kernel_mask_[o * n_in_ + i];
  }
  bool channel_masked(std::size_t o) const { return channel_mask_[o] != 0; }
  bool kernel_masked(std::size_t o, std::size_t i) const { return kernel_mask_[o * n_in_ + i] != 0; }
  void set_kernel_mask(std::size_t o, std::size_t i, bool masked) { kernel_mask_[o * n_in_ + i] = masked; }
  void set_channel_mask(std::size_t o, bool masked) { channel_mask_[o] = masked; }
  std::vector<std::uint8_t>& kernel_mask() { return kernel_mask_; }
  const std::vector<std::uint8_t>& kernel_mask() const { return kernel_mask_; }
  std::vector<std::uint8_t>& channel_mask() { return channel_mask_; }
  const std::vector<std::uint8_t>& channel_mask() const { return channel_mask_; }

  std::vector<std::uint8_t> active_kernels() const {
    std::vector<std::uint8_t> a(n_out_ * n_in_);
    for (std::size_t o = 0; o < n_out_; ++o) {
      for (std::size_t i = 0; i < n_in_; ++i) a[o * n_in_ + i] = kernel_active(o, i);
    }
    return a;
  }
  std::size_t active_kernel_count() const {
    std::size_t n = 0;
    for (std::size_t o = 0; o < n_out_; ++o) {
      for (std::size_t i = 0; i < n_in_; ++i) n += kernel_active(o, i);
    }
    return n;
  }
  std::size_t active_channel_count() const {
    return static_cast<std::size_t>(std::count(channel_mask_.begin(), channel_mask_.end(), 0));
  }

  /// Weights as seen by the forward pass: synthesized if Gabor, masked slices zeroed.
  Tensor4<T> effective_weights() const {
    Tensor4<T> w = weight_;
    if (is_gabor()) {
      for (std::size_t o = 0; o < n_out_; ++o) {
        for (std::size_t i = 0; i < n_in_; ++i) {
          const Kernel2D kern = synth_kernel(gabor_params(o, i), static_cast<int>(k_));
          T* dst = w.plane(o, i);
          for (std::size_t j = 0; j < kern.size(); ++j) dst[j] = static_cast<T>(kern[j]);
        }
      }
    }
    apply_masks(w);
    return w;
  }

  std::vector<T> effective_bias() const {
    std::vector<T> b = bias_;
    for (std::size_t o = 0; o < b.size(); ++o) {
      if (channel_mask_[o]) b[o] = T{0};
    }
    return b;
  }

  Dims4 output_dims(const Dims4& in) const override {
    if (in[1] != n_in_) {
      throw DimensionError("conv '" + this->name_ + "': input channels " + std::to_string(in[1]) +
                           " != n_in " + std::to_string(n_in_));
    }
    return {in[0], n_out_, conv_out_size(in[2], k_, stride_, pad_), conv_out_size(in[3], k_, stride_, pad_)};
  }

  Tensor4<T> forward(const Tensor4<T>& x, Phase) override {
    output_dims(x.dims());
    synthesize();
    eff_weight_ = weight_;
    apply_masks(eff_weight_);
    eff_bias_ = effective_bias();
    active_ = active_kernels();
    input_ = x;
    return conv2d_forward<T>(x, eff_weight_, eff_bias_, stride_, pad_, active_);
  }

  Tensor4<T> backward(const Tensor4<T>& grad_out) override {
    ConvGrads<T> g = conv2d_backward<T>(grad_out, input_, eff_weight_, stride_, pad_, active_);
    if (has_bias_) {
      for (std::size_t o = 0; o < n_out_; ++o) {
        if (!channel_mask_[o]) bias_grad_[o] += g.bias_grad[o];
      }
    }
    if (is_gabor()) {
      const int k = static_cast<int>(k_);
      for (std::size_t o = 0; o < n_out_; ++o) {
        for (std::size_t i = 0; i < n_in_; ++i) {
          if (!kernel_active(o, i)) continue;
          const GaborParamGrads pg = gabor_param_grads(gabor_params(o, i), k, kernel_slice_of(g.weight_grad, o, i));
          T* dst = gabor_grad_.data() + (o * n_in_ + i) * GaborParams::kCount;
          for (std::size_t f = 0; f < GaborParams::kCount; ++f) dst[f] += static_cast<T>(pg[f]);
        }
      }
    } else {
      for (std::size_t j = 0; j < weight_grad_.size(); ++j) weight_grad_[j] += g.weight_grad[j];
    }
    return std::move(g.input_grad);
  }

  void collect_params(std::vector<ParamRef<T>>& out) override {
    if (is_gabor()) {
      out.push_back({this->name_ + ".gabor", gabor_, gabor_grad_, DecayRule::GaborAmplitude});
    } else {
      out.push_back({this->name_ + ".weight", weight_.span(), weight_grad_.span(), DecayRule::All});
    }
    if (has_bias_) out.push_back({this->name_ + ".bias", bias_, bias_grad_, DecayRule::All});
  }

  void zero_grad() override {
    weight_grad_.fill(T{0});
    std::fill(gabor_grad_.begin(), gabor_grad_.end(), T{0});
    std::fill(bias_grad_.begin(), bias_grad_.end(), T{0});
  }

  void export_state(StateDict<T>& sd) const override {
    const std::string& n = this->name_;
    if (is_gabor()) {
      sd.gabor[n + ".gabor"] = {{n_out_, n_in_, GaborParams::kCount}, gabor_};
    } else {
      sd.tensors[n + ".weight"] = {{n_out_, n_in_, k_, k_}, weight_.storage()};
    }
    if (has_bias_) sd.tensors[n + ".bias"] = {{n_out_}, bias_};
    sd.masks[n + ".kernel_mask"] = kernel_mask_;
    sd.masks[n + ".channel_mask"] = channel_mask_;
  }

  void import_state(const StateDict<T>& sd) override {
    const std::string& n = this->name_;
    if (is_gabor()) {
      gabor_ = detail::require_entry(sd.gabor, n + ".gabor", {n_out_, n_in_, GaborParams::kCount}).data;
      if (gabor_.size() != n_out_ * n_in_ * GaborParams::kCount) {
        throw IntegrityError("gabor grid size mismatch for '" + n + "'");
      }
      gabor_grad_.assign(gabor_.size(), T{0});
      synthesize();
    } else {
      weight_.storage() = detail::require_entry(sd.tensors, n + ".weight", {n_out_, n_in_, k_, k_}).data;
    }
    if (has_bias_) bias_ = detail::require_entry(sd.tensors, n + ".bias", {n_out_}).data;
    kernel_mask_ = detail::require_mask(sd.masks, n + ".kernel_mask", n_out_ * n_in_);
    channel_mask_ = detail::require_mask(sd.masks, n + ".channel_mask", n_out_);
  }

  std::unique_ptr<Layer<T>> clone() const override {
    auto c = std::make_unique<Conv2d>(*this);
    c->input_ = Tensor4<T>();
    c->eff_weight_ = Tensor4<T>();
    return c;
  }

  void describe(std::ostream& os, int depth) const override {
    detail::indent(os, depth);
    os << "conv name=" << this->name_ << " in=" << n_in_ << " out=" << n_out_ << " k=" << k_
       << " stride=" << stride_ << " pad=" << pad_ << " bias=" << (has_bias_ ? 1 : 0)
       << " mode=" << (is_gabor() ? "gabor" : "standard") << "\n";
  }

  /// Mode flag for descriptor parsing; allocates an empty Gabor grid.
  void set_mode_for_load(ConvMode m) {
    mode_ = m;
    if (m == ConvMode::GaborParameterized) {
      gabor_.assign(n_out_ * n_in_ * GaborParams::kCount, T{0});
      gabor_grad_.assign(gabor_.size(), T{0});
    }
  }

  /// Drops output channels whose keep flag is false.
  void keep_outputs(const std::vector<bool>& keep) {
    std::size_t m = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
    Conv2d next(this->name_, n_in_, m, k_, stride_, pad_, has_bias_);
    next.mode_ = mode_;
    if (is_gabor()) next.gabor_.assign(m * n_in_ * GaborParams::kCount, T{0});
    std::size_t j = 0;
    for (std::size_t o = 0; o < n_out_; ++o) {
      if (!keep[o]) continue;
      std::copy(weight_.plane(o, 0), weight_.plane(o, 0) + n_in_ * k_ * k_, next.weight_.plane(j, 0));
      if (is_gabor()) {
        std::copy(gabor_.begin() + o * n_in_ * GaborParams::kCount,
                  gabor_.begin() + (o + 1) * n_in_ * GaborParams::kCount,
                  next.gabor_.begin() + j * n_in_ * GaborParams::kCount);
      }
      if (has_bias_) next.bias_[j] = bias_[o];
      for (std::size_t i = 0; i < n_in_; ++i) next.kernel_mask_[j * n_in_ + i] = kernel_mask_[o * n_in_ + i];
      next.channel_mask_[j] = channel_mask_[o];
      ++j;
    }
    next.gabor_grad_.assign(next.gabor_.size(), T{0});
    *this = std::move(next);
  }

  /// Drops input channels whose keep flag is false.
  void keep_inputs(const std::vector<bool>& keep) {
    std::size_t m = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
    Conv2d next(this->name_, m, n_out_, k_, stride_, pad_, has_bias_);
    next.mode_ = mode_;
    if (is_gabor()) next.gabor_.assign(n_out_ * m * GaborParams::kCount, T{0});
    for (std::size_t o = 0; o < n_out_; ++o) {
      std::size_t j = 0;
      for (std::size_t i = 0; i < n_in_; ++i) {
        if (!keep[i]) continue;
        std::copy(weight_.plane(o, i), weight_.plane(o, i) + k_ * k_, next.weight_.plane(o, j));
        if (is_gabor()) {
          std::copy(gabor_.begin() + (o * n_in_ + i) * GaborParams::kCount,
                    gabor_.begin() + (o * n_in_ + i + 1) * GaborParams::kCount,
                    next.gabor_.begin() + (o * m + j) * GaborParams::kCount);
        }
        next.kernel_mask_[o * m + j] = kernel_mask_[o * n_in_ + i];
        ++j;
      }
    }
    next.bias_ = bias_;
    next.bias_grad_.assign(bias_.size(), T{0});
    next.channel_mask_ = channel_mask_;
    next.gabor_grad_.assign(next.gabor_.size(), T{0});
    *this = std::move(next);
  }

 private:
  void apply_masks(Tensor4<T>& w) const {
    for (std::size_t o = 0; o < n_out_; ++o) {
      for (std::size_t i = 0; i < n_in_; ++i) {
        if (!kernel_active(o, i)) std::fill(w.plane(o, i), w.plane(o, i) + k_ * k_, T{0});
      }
    }
  }

  static Kernel2D kernel_slice_of(const Tensor4<T>& w, std::size_t o, std::size_t i) {
    Kernel2D out(static_cast<int>(w.h()));
    const T* src = w.plane(o, i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<double>(src[j]);
    return out;
  }

  std::size_t n_in_, n_out_, k_, stride_, pad_;
  bool has_bias_;
  ConvMode mode_ = ConvMode::Standard;
  Tensor4<T> weight_, weight_grad_;
  std::vector<T> gabor_, gabor_grad_;
  std::vector<T> bias_, bias_grad_;
  std::vector<std::uint8_t> kernel_mask_, channel_mask_;

  Tensor4<T> input_, eff_weight_;
  std::vector<T> eff_bias_;
  std::vector<std::uint8_t> active_;
};

/// Layer-level forward/backward without touching the layer's caches.
template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const Conv2d<T>& layer) {
  layer.output_dims(input.dims());
  const std::vector<T> bias = layer.effective_bias();
  return conv2d_forward<T>(input, layer.effective_weights(), bias, layer.stride(), layer.pad(),
                           layer.active_kernels());
}

template <class T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, const Conv2d<T>& layer) {
  layer.output_dims(input.dims());
  return conv2d_backward<T>(upstream, input, layer.effective_weights(), layer.stride(), layer.pad(),
                            layer.active_kernels());
}

template <class T>
struct GaborConvGrads {
  Tensor4<T> input_grad;
  std::vector<GaborParamGrads> param_grads;  // o * n_in + i
};

template <class T>
GaborConvGrads<T> gabor_conv_backward(const Tensor4<T>& upstream, const Tensor4<T>& input, const Conv2d<T>& layer) {
  if (!layer.is_gabor()) throw InvalidArgumentError("gabor_conv_backward: layer is not Gabor-parameterized");
  ConvGrads<T> g = conv2d_backward(upstream, input, layer);
  GaborConvGrads<T> out;
  out.input_grad = std::move(g.input_grad);
  out.param_grads.resize(layer.n_out() * layer.n_in());
  for (std::size_t o = 0; o < layer.n_out(); ++o) {
    for (std::size_t i = 0; i < layer.n_in(); ++i) {
      if (!layer.kernel_active(o, i)) continue;
      out.param_grads[o * layer.n_in() + i] =
          gabor_param_grads(layer.gabor_params(o, i), static_cast<int>(layer.k()), kernel_slice(g.weight_grad, o, i));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Per-channel batch normalization. A masked channel outputs exactly zero.
template <class T>
class BatchNorm2d : public Layer<T> {
 public:
  BatchNorm2d(std::string name, std::size_t channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps) {
    this->name_ = std::move(name);
    gamma_.assign(channels, T{1});
    beta_.assign(channels, T{0});
    gamma_grad_.assign(channels, T{0});
    beta_grad_.assign(channels, T{0});
    running_mean_.assign(channels, T{0});
    running_var_.assign(channels, T{1});
    mask_.assign(channels, 0);
  }

  std::string kind() const override { return "bn"; }
  std::size_t channels() const { return channels_; }
  std::vector<T>& gamma() { return gamma_; }
  std::vector<T>& beta() { return beta_; }
  std::vector<T>& running_mean() { return running_mean_; }
  std::vector<T>& running_var() { return running_var_; }
  const std::vector<T>& running_mean() const { return running_mean_; }
  const std::vector<T>& running_var() const { return running_var_; }
  std::vector<std::uint8_t>& channel_mask() { return mask_; }
  const std::vector<std::uint8_t>& channel_mask() const { return mask_; }

  Dims4 output_dims(const Dims4& in) const override {
    if (in[1] != channels_) throw DimensionError("bn '" + this->name_ + "': channel mismatch");
    return in;
  }

  Tensor4<T> forward(const Tensor4<T>& x, Phase phase) override {
    output_dims(x.dims());
    const std::size_t m = x.n() * x.plane_size();
    Tensor4<T> y(x.dims());
    xhat_ = Tensor4<T>(x.dims());
    inv_std_.assign(channels_, T{0});
    train_mode_ = phase == Phase::Train;
    for (std::size_t c = 0; c < channels_; ++c) {
      if (mask_[c]) continue;
      double mean, var;
      if (train_mode_) {
        if (m == 0) throw DimensionError("bn: empty batch");
        double s = 0.0;
        for (std::size_t n = 0; n < x.n(); ++n) {
          const T* p = x.plane(n, c);
          for (std::size_t j = 0; j < x.plane_size(); ++j) s += p[j];
        }
        mean = s / static_cast<double>(m);
        double ss = 0.0;
        for (std::size_t n = 0; n < x.n(); ++n) {
          const T* p = x.plane(n, c);
          for (std::size_t j = 0; j < x.plane_size(); ++j) ss += (p[j] - mean) * (p[j] - mean);
        }
        var = ss / static_cast<double>(m);
        const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
        running_mean_[c] = static_cast<T>((1.0 - momentum_) * running_mean_[c] + momentum_ * mean);
        running_var_[c] = static_cast<T>((1.0 - momentum_) * running_var_[c] + momentum_ * unbiased);
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
      const T mu = static_cast<T>(mean);
      inv_std_[c] = inv;
      for (std::size_t n = 0; n < x.n(); ++n) {
        const T* p = x.plane(n, c);
        T* h = xhat_.plane(n, c);
        T* q = y.plane(n, c);
        for (std::size_t j = 0; j < x.plane_size(); ++j) {
          h[j] = (p[j] - mu) * inv;
          q[j] = gamma_[c] * h[j] + beta_[c];
        }
      }
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& g) override {
    require_same_dims(g, xhat_, "bn backward");
    Tensor4<T> dx(g.dims());
    const std::size_t m = g.n() * g.plane_size();
    for (std::size_t c = 0; c < channels_; ++c) {
      if (mask_[c]) continue;
      double sum_g = 0.0, sum_gh = 0.0;
      for (std::size_t n = 0; n < g.n(); ++n) {
        const T* gp = g.plane(n, c);
        const T* h = xhat_.plane(n, c);
        for (std::size_t j = 0; j < g.plane_size(); ++j) {
          sum_g += gp[j];
          sum_gh += gp[j] * h[j];
        }
      }
      beta_grad_[c] += static_cast<T>(sum_g);
      gamma_grad_[c] += static_cast<T>(sum_gh);
      const T scale = gamma_[c] * inv_std_[c];
      if (train_mode_) {
        const T mg = static_cast<T>(sum_g / static_cast<double>(m));
        const T mgh = static_cast<T>(sum_gh / static_cast<double>(m));
        for (std::size_t n = 0; n < g.n(); ++n) {
          const T* gp = g.plane(n, c);
          const T* h = xhat_.plane(n, c);
          T* d = dx.plane(n, c);
          for (std::size_t j = 0; j < g.plane_size(); ++j) d[j] = scale * (gp[j] - mg - h[j] * mgh);
        }
      } else {
        for (std::size_t n = 0; n < g.n(); ++n) {
          const T* gp = g.plane(n, c);
          T* d = dx.plane(n, c);
          for (std::size_t j = 0; j < g.plane_size(); ++j) d[j] = scale * gp[j];
        }
      }
    }
    return dx;
  }

  void collect_params(std::vector<ParamRef<T>>& out) override {
    out.push_back({this->name_ + ".gamma", gamma_, gamma_grad_, DecayRule::All});
    out.push_back({this->name_ + ".beta", beta_, beta_grad_, DecayRule::All});
  }
  void zero_grad() override {
    std::fill(gamma_grad_.begin(), gamma_grad_.end(), T{0});
    std::fill(beta_grad_.begin(), beta_grad_.end(), T{0});
  }
  void export_state(StateDict<T>& sd) const override {
    const std::string& n = this->name_;
    sd.tensors[n + ".gamma"] = {{channels_}, gamma_};
    sd.tensors[n + ".beta"] = {{channels_}, beta_};
    sd.tensors[n + ".running_mean"] = {{channels_}, running_mean_};
    sd.tensors[n + ".running_var"] = {{channels_}, running_var_};
    sd.masks[n + ".channel_mask"] = mask_;
  }
  void import_state(const StateDict<T>& sd) override {
    const std::string& n = this->name_;
    gamma_ = detail::require_entry(sd.tensors, n + ".gamma", {channels_}).data;
    beta_ = detail::require_entry(sd.tensors, n + ".beta", {channels_}).data;
    running_mean_ = detail::require_entry(sd.tensors, n + ".running_mean", {channels_}).data;
    running_var_ = detail::require_entry(sd.tensors, n + ".running_var", {channels_}).data;
    mask_ = detail::require_mask(sd.masks, n + ".channel_mask", channels_);
  }
  std::unique_ptr<Layer<T>> clone() const override {
    auto c = std::make_unique<BatchNorm2d>(*this);
    c->xhat_ = Tensor4<T>();
    return c;
  }
  void describe(std::ostream& os, int depth) const override {
    detail::indent(os, depth);
    os << "bn name=" << this->name_ << " ch=" << channels_ << "\n";
  }

  void keep_channels(const std::vector<bool>& keep) {
    auto filter = [&](std::vector<T>& v) {
      std::vector<T> out;
      for (std::size_t c = 0; c < v.size(); ++c) {
        if (keep[c]) out.push_back(v[c]);
      }
      v = std::move(out);
    };
    filter(gamma_);
    filter(beta_);
    filter(running_mean_);
    filter(running_var_);
    std::vector<std::uint8_t> mask;
    for (std::size_t c = 0; c < mask_.size(); ++c) {
      if (keep[c]) mask.push_back(mask_[c]);
    }
    mask_ = std::move(mask);
    channels_ = gamma_.size();
    gamma_grad_.assign(channels_, T{0});
    beta_grad_.assign(channels_, T{0});
  }

 private:
  std::size_t channels_;
  double momentum_, eps_;
  std::vector<T> gamma_, beta_, gamma_grad_, beta_grad_, running_mean_, running_var_;
  std::vector<std::uint8_t> mask_;
  Tensor4<T> xhat_;
  std::vector<T> inv_std_;
  bool train_mode_ = false;
};

template <class T>
class ReLU : public Layer<T> {
 public:
  ReLU() { this->name_ = "relu"; }
  std::string kind() const override { return "relu"; }
  Dims4 output_dims(const Dims4& in) const override { return in; }
  Tensor4<T> forward(const Tensor4<T>& x, Phase) override {
    Tensor4<T> y = x;
    for (std::size_t j = 0; j < y.size(); ++j) y[j] = y[j] > T{0} ? y[j] : T{0};
    output_ = y;
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& g) override {
    require_same_dims(g, output_, "relu backward");
    Tensor4<T> dx(g.dims());
    for (std::size_t j = 0; j < g.size(); ++j) dx[j] = output_[j] > T{0} ? g[j] : T{0};
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(); }
  void describe(std::ostream& os, int depth) const override {
    detail::indent(os, depth);
    os << "relu\n";
  }

 private:
  Tensor4<T> output_;
};

/// Max pooling; ties resolve to the first element in scan order.
template <class T>
class MaxPool2d : public Layer<T> {
 public:
  MaxPool2d(std::size_t k = 2, std::size_t stride = 2) : k_(k), stride_(stride) {
    if (k == 0 || stride == 0) throw InvalidArgumentError("maxpool: k and stride must be >= 1");
    this->name_ = "maxpool";
  }
  std::string kind() const override { return "maxpool"; }
  Dims4 output_dims(const Dims4& in) const override {
    return {in[0], in[1], conv_out_size(in[2], k_, stride_, 0), conv_out_size(in[3], k_, stride_, 0)};
  }
  Tensor4<T> forward(const Tensor4<T>& x, Phase) override {
    const Dims4 od = output_dims(x.dims());
    Tensor4<T> y(od);
    in_dims_ = x.dims();
    argmax_.assign(y.size(), 0);
    std::size_t idx = 0;
    for (std::size_t n = 0; n < x.n(); ++n) {
      for (std::size_t c = 0; c < x.c(); ++c) {
        const T* p = x.plane(n, c);
        for (std::size_t oy = 0; oy < od[2]; ++oy) {
          for (std::size_t ox = 0; ox < od[3]; ++ox, ++idx) {
            std::size_t best = oy * stride_ * x.w() + ox * stride_;
            for (std::size_t ky = 0; ky < k_; ++ky) {
              for (std::size_t kx = 0; kx < k_; ++kx) {
                const std::size_t j = (oy * stride_ + ky) * x.w() + ox * stride_ + kx;
                if (p[j] > p[best]) best = j;
              }
            }
            y[idx] = p[best];
            argmax_[idx] = (n * x.c() + c) * x.plane_size() + best;
          }
        }
      }
    }
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& g) override {
    if (g.size() != argmax_.size()) throw DimensionError("maxpool backward: shape mismatch");
    Tensor4<T> dx(in_dims_);
    for (std::size_t j = 0; j < g.size(); ++j) dx[argmax_[j]] += g[j];
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2d>(k_, stride_); }
  void describe(std::ostream& os, int depth) const override {
    detail::indent(os, depth);
    os << "maxpool k=" << k_ << " stride=" << stride_ << "\n";
  }

 private:
  std::size_t k_, stride_;
  Dims4 in_dims_{};
  std::vector<std::size_t> argmax_;
};

template <class T>
class GlobalAvgPool : public Layer<T> {
 public:
  GlobalAvgPool() { this->name_ = "gap"; }
  std::string kind() const override { return "gap"; }
  Dims4 output_dims(const Dims4& in) const override { return {in[0], in[1], 1, 1}; }
  Tensor4<T> forward(const Tensor4<T>& x, Phase) override {
    in_dims_ = x.dims();
    Tensor4<T> y(x.n(), x.c(), 1, 1);
    const T inv = T{1} / static_cast<T>(x.plane_size());
    for (std::size_t n = 0; n < x.n(); ++n) {
      for (std::size_t c = 0; c < x.c(); ++c) {
        const T* p = x.plane(n, c);
        T s{0};
        for (std::size_t j = 0; j < x.plane_size(); ++j) s += p[j];
        y(n, c, 0, 0) = s * inv;
      }
    }
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& g) override {
    Tensor4<T> dx(in_dims_);
    const T inv = T{1} / static_cast<T>(dx.plane_size());
    for (std::size_t n = 0; n < dx.n(); ++n) {
      for (std::size_t c = 0; c < dx.c(); ++c) {
        T* p = dx.plane(n, c);
        std::fill(p, p + dx.plane_size(), g(n, c, 0, 0) * inv);
      }
    }
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(); }
  void describe(std::ostream& os, int depth) const override {
    detail::indent(os, depth);
    os << "gap\n";
  }

 private:
  Dims4 in_dims_{};
};

/// Fully connected layer on the flattened C*H*W features; output is (N, out, 1, 1).
template <class T>
class Dense : public Layer<T> {
 public:
  Dense(std::string name, std::size_t in, std::size_t out) : in_(in), out_(out) {
    this->name_ = std::move(name);
    weight_ = Tensor4<T>(out, in, 1, 1);
    weight_grad_ = Tensor4<T>(out, in, 1, 1);
    bias_.assign(out, T{0});
    bias_grad_.assign(out, T{0});
  }
  std::string kind() const override { return "dense"; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Tensor4<T>& weights() { return weight_; }
  const Tensor4<T>& weights() const { return weight_; }
  std::vector<T>& bias() { return bias_; }

  Dims4 output_dims(const Dims4& in) const override {
    if (in[1] * in[2] * in[3] != in_) {
      throw DimensionError("dense '" + this->name_ + "': expected " + std::to_string(in_) + " features, got " +
                           std::to_string(in[1] * in[2] * in[3]));
    }
    return {in[0], out_, 1, 1};
  }
  Tensor4<T> forward(const Tensor4<T>& x, Phase) override {
    output_dims(x.dims());
    input_ = x;
    Tensor4<T> y(x.n(), out_, 1, 1);
    for (std::size_t n = 0; n < x.n(); ++n) {
      const T* xs = x.sample(n);
      for (std::size_t o = 0; o < out_; ++o) {
        const T* w = weight_.data() + o * in_;
        T s = bias_[o];
        for (std::size_t i = 0; i < in_; ++i) s += w[i] * xs[i];
        y(n, o, 0, 0) = s;
      }
    }
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& g) override {
    Tensor4<T> dx(input_.dims());
    for (std::size_t n = 0; n < input_.n(); ++n) {
      const T* xs = input_.sample(n);
      T* dxs = dx.sample(n);
      for (std::size_t o = 0; o < out_; ++o) {
        const T go = g(n, o, 0, 0);
        const T* w = weight_.data() + o * in_;
        T* dw = weight_grad_.data() + o * in_;
        bias_grad_[o] += go;
        for (std::size_t i = 0; i < in_; ++i) {
          dw[i] += go * xs[i];
          dxs[i] += go * w[i];
        }
      }
    }
    return dx;
  }
  void collect_params(std::vector<ParamRef<T>>& out) override {
    out.push_back({this->name_ + ".weight", weight_.span(), weight_grad_.span(), DecayRule::All});
    out.push_back({this->name_ + ".bias", bias_, bias_grad_, DecayRule::All});
  }
  void zero_grad() override {
    weight_grad_.fill(T{0});
    std::fill(bias_grad_.begin(), bias_grad_.end(), T{0});
  }
  void export_state(StateDict<T>& sd) const override {
    sd.tensors[this->name_ + ".weight"] = {{out_, in_}, weight_.storage()};
    sd.tensors[this->name_ + ".bias"] = {{out_}, bias_};
  }
  void import_state(const StateDict<T>& sd) override {
    weight_.storage() = detail::require_entry(sd.tensors, this->name_ + ".weight", {out_, in_}).data;
    bias_ = detail::require_entry(sd.tensors, this->name_ + ".bias", {out_}).data;
  }
  std::unique_ptr<Layer<T>> clone() const override {
    auto c = std::make_unique<Dense>(*this);
    c->input_ = Tensor4<T>();
    return c;
  }
  void describe(std::ostream& os, int depth) const override {
    detail::indent(os, depth);
    os << "dense name=" << this->name_ << " in=" << in_ << " out=" << out_ << "\n";
  }

  /// Keeps the input features of the kept channels; features are grouped per channel.
  void keep_input_channels(const std::vector<bool>& keep) {
    const std::size_t per = in_ / keep.size();
    const std::size_t kept = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
    Dense next(this->name_, kept * per, out_);
    for (std::size_t o = 0; o < out_; ++o) {
      std::size_t j = 0;
      for (std::size_t c = 0; c < keep.size(); ++c) {
        if (!keep[c]) continue;
        for (std::size_t q = 0; q < per; ++q) next.weight_[o * next.in_ + j * per + q] = weight_[o * in_ + c * per + q];
        ++j;
      }
    }
    next.bias_ = bias_;
    *this = std::move(next);
  }

 private:
  std::size_t in_, out_;
  Tensor4<T> weight_, weight_grad_;
  std::vector<T> bias_, bias_grad_;
  Tensor4<T> input_;
};

enum class Shortcut { Identity, PadChannels };

/// relu(body(x) + shortcut(x)). PadChannels subsamples by the stride and
/// zero-pads the extra output channels.
template <class T>
class ResidualBlock : public Layer<T> {
 public:
  ResidualBlock(std::string name, Shortcut shortcut, std::size_t stride, std::size_t in_ch, std::size_t out_ch)
      : shortcut_(shortcut), stride_(stride), in_ch_(in_ch), out_ch_(out_ch) {
    this->name_ = std::move(name);
    if (shortcut == Shortcut::Identity && (stride != 1 || in_ch != out_ch)) {
      throw StructureError("identity shortcut requires stride 1 and equal channels");
    }
  }
  ResidualBlock(const ResidualBlock& o)
      : Layer<T>(o), shortcut_(o.shortcut_), stride_(o.stride_), in_ch_(o.in_ch_), out_ch_(o.out_ch_) {
    for (const auto& l : o.body_) body_.push_back(l->clone());
  }
  ResidualBlock& operator=(const ResidualBlock&) = delete;

  std::string kind() const override { return "block"; }
  std::vector<std::unique_ptr<Layer<T>>>& body() { return body_; }
  const std::vector<std::unique_ptr<Layer<T>>>& body() const { return body_; }
  Shortcut shortcut() const { return shortcut_; }
  std::size_t stride() const { return stride_; }
  std::size_t in_channels() const { return in_ch_; }
  std::size_t out_channels() const { return out_ch_; }

  Dims4 output_dims(const Dims4& in) const override {
    Dims4 d = in;
    for (const auto& l : body_) d = l->output_dims(d);
    const Dims4 s = shortcut_dims(in);
    if (d != s) throw DimensionError("block '" + this->name_ + "': body and shortcut shapes differ");
    return d;
  }

  Tensor4<T> forward(const Tensor4<T>& x, Phase phase) override {
    in_dims_ = x.dims();
    Tensor4<T> h = x;
    for (auto& l : body_) h = l->forward(h, phase);
    const Tensor4<T> s = shortcut_forward(x);
    require_same_dims(h, s, "residual add");
    for (std::size_t j = 0; j < h.size(); ++j) {
      const T v = h[j] + s[j];
      h[j] = v > T{0} ? v : T{0};
    }
    output_ = h;
    return h;
  }

  Tensor4<T> backward(const Tensor4<T>& g) override {
    Tensor4<T> gh(g.dims());
    for (std::size_t j = 0; j < g.size(); ++j) gh[j] = output_[j] > T{0} ? g[j] : T{0};
    Tensor4<T> gb = gh;
    for (auto it = body_.rbegin(); it != body_.rend(); ++it) gb = (*it)->backward(gb);
    const Tensor4<T> gs = shortcut_backward(gh);
    for (std::size_t j = 0; j < gb.size(); ++j) gb[j] += gs[j];
    return gb;
  }

  void collect_params(std::vector<ParamRef<T>>& out) override {
    for (auto& l : body_) l->collect_params(out);
  }
  void zero_grad() override {
    for (auto& l : body_) l->zero_grad();
  }
  void export_state(StateDict<T>& sd) const override {
    for (const auto& l : body_) l->export_state(sd);
  }
  void import_state(const StateDict<T>& sd) override {
    for (auto& l : body_) l->import_state(sd);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ResidualBlock>(*this); }
  void describe(std::ostream& os, int depth) const override {
    detail::indent(os, depth);
    os << "block name=" << this->name_ << " shortcut=" << (shortcut_ == Shortcut::Identity ? "identity" : "pad")
       << " stride=" << stride_ << " in=" << in_ch_ << " out=" << out_ch_ << " {\n";
    for (const auto& l : body_) l->describe(os, depth + 1);
    detail::indent(os, depth);
    os << "}\n";
  }

 private:
  Dims4 shortcut_dims(const Dims4& in) const {
    if (in[1] != in_ch_) throw DimensionError("block '" + this->name_ + "': channel mismatch");
    if (shortcut_ == Shortcut::Identity) return in;
    return {in[0], out_ch_, (in[2] + stride_ - 1) / stride_, (in[3] + stride_ - 1) / stride_};
  }
  Tensor4<T> shortcut_forward(const Tensor4<T>& x) const {
    if (shortcut_ == Shortcut::Identity) return x;
    Tensor4<T> s(shortcut_dims(x.dims()));
    for (std::size_t n = 0; n < x.n(); ++n) {
      for (std::size_t c = 0; c < x.c(); ++c) {
        for (std::size_t y = 0; y < s.h(); ++y) {
          for (std::size_t w = 0; w < s.w(); ++w) s(n, c, y, w) = x(n, c, y * stride_, w * stride_);
        }
      }
    }
    return s;
  }
  Tensor4<T> shortcut_backward(const Tensor4<T>& g) const {
    if (shortcut_ == Shortcut::Identity) return g;
    Tensor4<T> dx(in_dims_);
    for (std::size_t n = 0; n < dx.n(); ++n) {
      for (std::size_t c = 0; c < dx.c(); ++c) {
        for (std::size_t y = 0; y < g.h(); ++y) {
          for (std::size_t w = 0; w < g.w(); ++w) dx(n, c, y * stride_, w * stride_) = g(n, c, y, w);
        }
      }
    }
    return dx;
  }

  Shortcut shortcut_;
  std::size_t stride_, in_ch_, out_ch_;
  std::vector<std::unique_ptr<Layer<T>>> body_;
  Dims4 in_dims_{};
  Tensor4<T> output_;
};

}  // namespace gabornet
