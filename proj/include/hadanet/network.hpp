#pragma once

// Train-from-scratch engine: an ordered layer stack in the
// BatchNorm - Binarize - Conv/Dense - Activation - Pool arrangement, manual
// backprop, Adam with step-decayed learning rate. Master weights stay full
// precision; every forward pass binarizes a fresh copy of the weights and of
// the incoming activations at the layer's binarization aggressions. A beta
// of 1 reproduces a tensor exactly, so beta=1 sites are plain full-precision
// layers with pass-through gradients.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hadanet/config.hpp"
#include "hadanet/dataset.hpp"
#include "hadanet/hadamard.hpp"
#include "hadanet/packing.hpp"
#include "hadanet/tensor.hpp"

namespace hadanet {

enum class LayerKind : std::uint8_t {
  HadaDense = 0,
  HadaConv2d = 1,
  BatchNorm = 2,
  ReLU = 3,
  MaxPool2d = 4,
  Flatten = 5,
};

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;

  // HadaDense
  std::size_t in_features = 0, out_features = 0;
  // HadaConv2d
  std::size_t filters = 0, channels = 0, kernel_h = 0, kernel_w = 0;
  std::size_t stride = 1, pad = 0;
  // BatchNorm
  std::size_t bn_features = 0;
  bool bn_spatial = true;
  // MaxPool2d
  std::size_t pool = 2;

  std::size_t beta_w = 1, beta_a = 1;

  static LayerSpec dense(std::size_t in, std::size_t out, std::size_t bw = 1,
                         std::size_t ba = 1) {
    LayerSpec s;
    s.kind = LayerKind::HadaDense;
    s.in_features = in;
    s.out_features = out;
    s.beta_w = bw;
    s.beta_a = ba;
    return s;
  }
  static LayerSpec conv2d(std::size_t filters, std::size_t channels,
                          std::size_t kh, std::size_t kw, std::size_t stride,
                          std::size_t pad, std::size_t bw = 1,
                          std::size_t ba = 1) {
    LayerSpec s;
    s.kind = LayerKind::HadaConv2d;
    s.filters = filters;
    s.channels = channels;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.stride = stride;
    s.pad = pad;
    s.beta_w = bw;
    s.beta_a = ba;
    return s;
  }
  static LayerSpec batchnorm(std::size_t features, bool spatial) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.bn_features = features;
    s.bn_spatial = spatial;
    return s;
  }
  static LayerSpec relu() {
    LayerSpec s;
    s.kind = LayerKind::ReLU;
    return s;
  }
  static LayerSpec maxpool(std::size_t p) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool2d;
    s.pool = p;
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
  }
};

struct Param {
  Tensor value;
  Tensor grad;
  void alloc_grad() { grad = Tensor(value.shape()); }
};

// Shared execution settings plus the optional activation capture used by the
// correlation study.
struct ExecContext {
  int workers = 1;
  bool packed_inference = false;
  std::vector<std::pair<std::size_t, Tensor>>* capture = nullptr;
};

class Layer {
 public:
  explicit Layer(const LayerSpec& spec) : spec_(spec) {}
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual Tensor backward(const Tensor& grad) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual void init(std::mt19937& /*rng*/) {}

  LayerSpec& spec() { return spec_; }
  const LayerSpec& spec() const { return spec_; }

  void attach(const ExecContext* ctx, std::size_t index) {
    ctx_ = ctx;
    index_ = index;
  }

 protected:
  void maybe_capture(const Tensor& out) const {
    if (ctx_ && ctx_->capture)
      ctx_->capture->emplace_back(index_, out);
  }
  int workers() const { return ctx_ ? ctx_->workers : 1; }
  bool packed_inference() const { return ctx_ && ctx_->packed_inference; }

  LayerSpec spec_;
  const ExecContext* ctx_ = nullptr;
  std::size_t index_ = 0;
};

namespace detail {

inline void add_bias_rows(Tensor& y, const Tensor& bias) {
  const std::size_t rows = y.extent(0), cols = y.extent(1);
  for (std::size_t i = 0; i < rows; ++i) {
    float* row = y.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += bias[j];
  }
}

inline void kaiming_normal(Tensor& w, std::size_t fan_in, std::mt19937& rng) {
  std::normal_distribution<float> dist(
      0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = dist(rng);
}

}  // namespace detail

// Fully connected layer with optional weight/activation binarization.
// Weights are (out, in); each output row is one filter for the purposes of
// block binarization. A loaded model may carry pre-binarized weights, in
// which case the forward uses them as-is (inference only).
class DenseLayer : public Layer {
 public:
  explicit DenseLayer(const LayerSpec& spec) : Layer(spec) {
    weight_.value = Tensor({spec.out_features, spec.in_features});
    bias_.value = Tensor({spec.out_features});
    weight_.alloc_grad();
    bias_.alloc_grad();
  }

  void init(std::mt19937& rng) override {
    detail::kaiming_normal(weight_.value, spec_.in_features, rng);
  }

  Tensor forward(const Tensor& x, bool train) override {
    if (x.rank() != 2 || x.extent(1) != spec_.in_features)
      throw std::invalid_argument("dense: input " + x.shape_str() +
                                  " does not match in_features " +
                                  std::to_string(spec_.in_features));
    const bool bin_a = spec_.beta_a > 1;
    const bool bin_w = spec_.beta_w > 1 && !prebinarized_;

    const Tensor* xin = &x;
    Tensor xtilde;
    if (bin_a) {
      xtilde = binarize_activations(x, spec_.beta_a);
      xin = &xtilde;
    }
    const Tensor* weff = &weight_.value;
    Tensor wtilde;
    if (bin_w) {
      wtilde = binarize_weights(weight_.value, spec_.beta_w);
      weff = &wtilde;
    }

    Tensor y;
    if (!train && packed_inference() &&
        (spec_.beta_w > 1 || spec_.beta_a > 1)) {
      // Both operands repacked at the common refinement of the two betas;
      // values are unchanged, so this equals the dense product up to
      // accumulation order.
      const std::size_t g = std::gcd(spec_.beta_w, spec_.beta_a);
      const PackedHadaMatrix wp =
          refine_packed(pack_matrix(weff->reshape({static_cast<std::int64_t>(
                                                       spec_.out_features),
                                                   -1}),
                                    spec_.beta_w),
                        g);
      const PackedHadaMatrix xp =
          refine_packed(pack_matrix(*xin, spec_.beta_a), g);
      y = xhbnn_matmul(xp, wp, workers());
    } else {
      y = matmul_fast_nt(*xin, *weff, workers());
    }
    detail::add_bias_rows(y, bias_.value);

    if (train) {
      input_ = x;
      input_tilde_ = bin_a ? std::move(xtilde) : Tensor();
      wtilde_ = bin_w ? std::move(wtilde) : Tensor();
    }
    maybe_capture(y);
    return y;
  }

  Tensor backward(const Tensor& g) override {
    if (prebinarized_)
      throw std::logic_error("dense: cannot backprop through a loaded "
                             "pre-binarized layer");
    const bool bin_a = spec_.beta_a > 1;
    const bool bin_w = spec_.beta_w > 1;
    const Tensor& xt = bin_a ? input_tilde_ : input_;
    const Tensor& weff = bin_w ? wtilde_ : weight_.value;

    for (std::size_t j = 0; j < spec_.out_features; ++j) {
      float s = 0.0f;
      for (std::size_t i = 0; i < g.extent(0); ++i) s += g(i, j);
      bias_.grad[j] = s;
    }
    const Tensor grad_wtilde = matmul_fast_tn(g, xt, workers());
    weight_.grad = bin_w ? hadamard_backward_rows(weight_.value, grad_wtilde,
                                                  spec_.beta_w)
                         : grad_wtilde;
    const Tensor grad_xtilde = matmul_fast(g, weff, workers());
    return bin_a ? activation_backward(input_, grad_xtilde, spec_.beta_a)
                 : grad_xtilde;
  }

  std::vector<Param*> params() override { return {&weight_, &bias_}; }

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  bool prebinarized() const { return prebinarized_; }
  void set_prebinarized(bool v) { prebinarized_ = v; }

 private:
  Param weight_, bias_;
  bool prebinarized_ = false;
  Tensor input_, input_tilde_, wtilde_;
};

// Convolution via im2col + GEMM. The packed-inference toggle does not apply
// here: width-axis activation blocks do not survive the im2col lowering, so
// the convolution always multiplies dense binarized tensors.
class ConvLayer : public Layer {
 public:
  explicit ConvLayer(const LayerSpec& spec) : Layer(spec) {
    weight_.value = Tensor(
        {spec.filters, spec.channels, spec.kernel_h, spec.kernel_w});
    bias_.value = Tensor({spec.filters});
    weight_.alloc_grad();
    bias_.alloc_grad();
  }

  void init(std::mt19937& rng) override {
    detail::kaiming_normal(weight_.value,
                           spec_.channels * spec_.kernel_h * spec_.kernel_w,
                           rng);
  }

  Tensor forward(const Tensor& x, bool train) override {
    if (x.rank() != 4 || x.extent(1) != spec_.channels)
      throw std::invalid_argument("conv: input " + x.shape_str() +
                                  " does not match channels " +
                                  std::to_string(spec_.channels));
    geom_ = conv_geometry(spec_.channels, x.extent(2), x.extent(3),
                          spec_.kernel_h, spec_.kernel_w, spec_.stride,
                          spec_.pad);
    const std::size_t batch = x.extent(0);
    const std::size_t ckk =
        spec_.channels * spec_.kernel_h * spec_.kernel_w;
    const std::size_t opos = geom_.out_h * geom_.out_w;

    const bool bin_a = spec_.beta_a > 1;
    const bool bin_w = spec_.beta_w > 1 && !prebinarized_;

    const Tensor* xin = &x;
    Tensor xtilde;
    if (bin_a) {
      xtilde = binarize_activations(x, spec_.beta_a);
      xin = &xtilde;
    }
    const Tensor* weff = &weight_.value;
    Tensor wtilde;
    if (bin_w) {
      wtilde = binarize_weights(weight_.value, spec_.beta_w);
      weff = &wtilde;
    }

    // Lower the whole batch into one (ckk x batch*opos) matrix; sample b
    // occupies the column range [b*opos, (b+1)*opos).
    Tensor cols({ckk, batch * opos});
    {
      Tensor scratch({ckk, opos});
      const std::size_t sample_elems = x.numel() / batch;
      for (std::size_t b = 0; b < batch; ++b) {
        im2col_into(xin->data() + b * sample_elems, geom_, scratch.data());
        for (std::size_t r = 0; r < ckk; ++r)
          std::copy_n(scratch.data() + r * opos, opos,
                      cols.data() + r * batch * opos + b * opos);
      }
    }

    const Tensor wmat = weff->reshape(
        {static_cast<std::int64_t>(spec_.filters), -1});
    const Tensor out_mat = matmul_fast(wmat, cols, workers());

    Tensor y({batch, spec_.filters, geom_.out_h, geom_.out_w});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < spec_.filters; ++f) {
        const float* src = out_mat.data() + f * batch * opos + b * opos;
        float* dst = y.data() + (b * spec_.filters + f) * opos;
        const float bv = bias_.value[f];
        for (std::size_t p = 0; p < opos; ++p) dst[p] = src[p] + bv;
      }

    if (train) {
      input_ = x;
      input_tilde_ = bin_a ? std::move(xtilde) : Tensor();
      wtilde_ = bin_w ? std::move(wtilde) : Tensor();
      cols_ = std::move(cols);
    }
    maybe_capture(y);
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    if (prebinarized_)
      throw std::logic_error("conv: cannot backprop through a loaded "
                             "pre-binarized layer");
    const bool bin_a = spec_.beta_a > 1;
    const bool bin_w = spec_.beta_w > 1;
    const std::size_t batch = gy.extent(0);
    const std::size_t ckk =
        spec_.channels * spec_.kernel_h * spec_.kernel_w;
    const std::size_t opos = geom_.out_h * geom_.out_w;

    Tensor gmat({spec_.filters, batch * opos});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < spec_.filters; ++f)
        std::copy_n(gy.data() + (b * spec_.filters + f) * opos, opos,
                    gmat.data() + f * batch * opos + b * opos);

    for (std::size_t f = 0; f < spec_.filters; ++f) {
      const float* row = gmat.data() + f * batch * opos;
      float s = 0.0f;
      for (std::size_t p = 0; p < batch * opos; ++p) s += row[p];
      bias_.grad[f] = s;
    }

    Tensor grad_wmat = matmul_fast_nt(gmat, cols_, workers());
    grad_wmat = std::move(grad_wmat)
                    .reshape({static_cast<std::int64_t>(spec_.filters),
                              static_cast<std::int64_t>(spec_.channels),
                              static_cast<std::int64_t>(spec_.kernel_h),
                              static_cast<std::int64_t>(spec_.kernel_w)});
    weight_.grad = bin_w ? hadamard_backward_rows(weight_.value, grad_wmat,
                                                  spec_.beta_w)
                         : grad_wmat;

    const Tensor& weff = bin_w ? wtilde_ : weight_.value;
    const Tensor wmat = weff.reshape(
        {static_cast<std::int64_t>(spec_.filters), -1});
    const Tensor grad_cols = matmul_fast_tn(wmat, gmat, workers());

    Tensor grad_x({batch, spec_.channels, geom_.in_h, geom_.in_w});
    {
      Tensor scratch({ckk, opos});
      const std::size_t sample_elems = grad_x.numel() / batch;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t r = 0; r < ckk; ++r)
          std::copy_n(grad_cols.data() + r * batch * opos + b * opos, opos,
                      scratch.data() + r * opos);
        col2im_into(scratch.data(), geom_, grad_x.data() + b * sample_elems);
      }
    }
    return bin_a ? activation_backward(input_, grad_x, spec_.beta_a)
                 : grad_x;
  }

  std::vector<Param*> params() override { return {&weight_, &bias_}; }

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  bool prebinarized() const { return prebinarized_; }
  void set_prebinarized(bool v) { prebinarized_ = v; }

 private:
  Param weight_, bias_;
  bool prebinarized_ = false;
  ConvGeometry geom_;
  Tensor input_, input_tilde_, wtilde_, cols_;
};

// Batch normalization with learned affine parameters (never binarized).
// Spatial mode normalizes per channel over (batch, h, w); feature mode per
// column over the batch. Train mode uses batch statistics and updates the
// running estimates; eval mode uses the running estimates.
class BatchNormLayer : public Layer {
 public:
  static constexpr float kEps = 1e-5f;
  static constexpr float kMomentum = 0.1f;

  explicit BatchNormLayer(const LayerSpec& spec) : Layer(spec) {
    gamma_.value = Tensor({spec.bn_features});
    beta_.value = Tensor({spec.bn_features});
    for (std::size_t i = 0; i < spec.bn_features; ++i) gamma_.value[i] = 1.0f;
    gamma_.alloc_grad();
    beta_.alloc_grad();
    running_mean_ = Tensor({spec.bn_features});
    running_var_ = Tensor({spec.bn_features});
    for (std::size_t i = 0; i < spec.bn_features; ++i) running_var_[i] = 1.0f;
  }

  Tensor forward(const Tensor& x, bool train) override {
    layout(x);
    const std::size_t c = spec_.bn_features;
    Tensor y(x.shape());
    if (train) {
      xhat_ = Tensor(x.shape());
      invstd_.assign(c, 0.0f);
      const float m = static_cast<float>(batch_ * inner_);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, sumsq = 0.0;
        for_channel(x, ch, [&](float v) {
          sum += v;
          sumsq += double(v) * v;
        });
        const float mean = static_cast<float>(sum / m);
        const float var = static_cast<float>(sumsq / m) - mean * mean;
        const float inv = 1.0f / std::sqrt(var + kEps);
        invstd_[ch] = inv;
        transform_channel(x, xhat_, ch,
                          [&](float v) { return (v - mean) * inv; });
        transform_channel(xhat_, y, ch, [&](float v) {
          return gamma_.value[ch] * v + beta_.value[ch];
        });
        const float unbiased =
            m > 1.0f ? var * m / (m - 1.0f) : var;
        running_mean_[ch] =
            (1.0f - kMomentum) * running_mean_[ch] + kMomentum * mean;
        running_var_[ch] =
            (1.0f - kMomentum) * running_var_[ch] + kMomentum * unbiased;
      }
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float inv = 1.0f / std::sqrt(running_var_[ch] + kEps);
        const float mean = running_mean_[ch];
        transform_channel(x, y, ch, [&](float v) {
          return gamma_.value[ch] * ((v - mean) * inv) + beta_.value[ch];
        });
      }
    }
    return y;
  }

  Tensor backward(const Tensor& g) override {
    const std::size_t c = spec_.bn_features;
    const float m = static_cast<float>(batch_ * inner_);
    Tensor gx(g.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      double gsum = 0.0, gxhat = 0.0;
      for_channel2(g, xhat_, ch, [&](float gv, float xh) {
        gsum += gv;
        gxhat += double(gv) * xh;
      });
      gamma_.grad[ch] = static_cast<float>(gxhat);
      beta_.grad[ch] = static_cast<float>(gsum);
      const float k1 = static_cast<float>(gsum / m);
      const float k2 = static_cast<float>(gxhat / m);
      const float scale = gamma_.value[ch] * invstd_[ch];
      transform_channel2(g, xhat_, gx, ch, [&](float gv, float xh) {
        return scale * (gv - k1 - xh * k2);
      });
    }
    return gx;
  }

  std::vector<Param*> params() override { return {&gamma_, &beta_}; }

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  void layout(const Tensor& x) {
    if (spec_.bn_spatial) {
      if (x.rank() != 4 || x.extent(1) != spec_.bn_features)
        throw std::invalid_argument("batchnorm: bad input " + x.shape_str());
      batch_ = x.extent(0);
      inner_ = x.extent(2) * x.extent(3);
    } else {
      if (x.rank() != 2 || x.extent(1) != spec_.bn_features)
        throw std::invalid_argument("batchnorm: bad input " + x.shape_str());
      batch_ = x.extent(0);
      inner_ = 1;
    }
  }

  template <typename F>
  void for_channel(const Tensor& x, std::size_t ch, F&& f) const {
    const std::size_t c = spec_.bn_features;
    for (std::size_t b = 0; b < batch_; ++b) {
      const float* p = x.data() + (b * c + ch) * inner_;
      for (std::size_t i = 0; i < inner_; ++i) f(p[i]);
    }
  }
  template <typename F>
  void for_channel2(const Tensor& x, const Tensor& y, std::size_t ch,
                    F&& f) const {
    const std::size_t c = spec_.bn_features;
    for (std::size_t b = 0; b < batch_; ++b) {
      const float* px = x.data() + (b * c + ch) * inner_;
      const float* py = y.data() + (b * c + ch) * inner_;
      for (std::size_t i = 0; i < inner_; ++i) f(px[i], py[i]);
    }
  }
  template <typename F>
  void transform_channel(const Tensor& src, Tensor& dst, std::size_t ch,
                         F&& f) const {
    const std::size_t c = spec_.bn_features;
    for (std::size_t b = 0; b < batch_; ++b) {
      const float* p = src.data() + (b * c + ch) * inner_;
      float* q = dst.data() + (b * c + ch) * inner_;
      for (std::size_t i = 0; i < inner_; ++i) q[i] = f(p[i]);
    }
  }
  template <typename F>
  void transform_channel2(const Tensor& a, const Tensor& b, Tensor& dst,
                          std::size_t ch, F&& f) const {
    const std::size_t c = spec_.bn_features;
    for (std::size_t bb = 0; bb < batch_; ++bb) {
      const float* pa = a.data() + (bb * c + ch) * inner_;
      const float* pb = b.data() + (bb * c + ch) * inner_;
      float* q = dst.data() + (bb * c + ch) * inner_;
      for (std::size_t i = 0; i < inner_; ++i) q[i] = f(pa[i], pb[i]);
    }
  }

  Param gamma_, beta_;
  Tensor running_mean_, running_var_;
  Tensor xhat_;
  std::vector<float> invstd_;
  std::size_t batch_ = 0, inner_ = 1;
};

class ReLULayer : public Layer {
 public:
  explicit ReLULayer(const LayerSpec& spec) : Layer(spec) {}

  Tensor forward(const Tensor& x, bool train) override {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
      y[i] = x[i] > 0.0f ? x[i] : 0.0f;
    if (train) mask_ = x;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    Tensor gx(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i)
      gx[i] = mask_[i] > 0.0f ? g[i] : 0.0f;
    return gx;
  }

 private:
  Tensor mask_;
};

class MaxPoolLayer : public Layer {
 public:
  explicit MaxPoolLayer(const LayerSpec& spec) : Layer(spec) {}

  Tensor forward(const Tensor& x, bool train) override {
    if (x.rank() != 4)
      throw std::invalid_argument("maxpool: expected (b,c,h,w)");
    const std::size_t p = spec_.pool;
    const std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2),
                      w = x.extent(3);
    const std::size_t oh = h / p, ow = w / p;
    if (oh == 0 || ow == 0)
      throw std::invalid_argument("maxpool: input smaller than window");
    in_shape_ = x.shape();
    Tensor y({b, c, oh, ow});
    argmax_.assign(y.numel(), 0);
    for (std::size_t bc = 0; bc < b * c; ++bc) {
      const float* src = x.data() + bc * h * w;
      float* dst = y.data() + bc * oh * ow;
      std::size_t* amax = argmax_.data() + bc * oh * ow;
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          float best = src[(i * p) * w + j * p];
          std::size_t best_at = (i * p) * w + j * p;
          for (std::size_t di = 0; di < p; ++di)
            for (std::size_t dj = 0; dj < p; ++dj) {
              const std::size_t at = (i * p + di) * w + (j * p + dj);
              if (src[at] > best) {
                best = src[at];
                best_at = at;
              }
            }
          dst[i * ow + j] = best;
          amax[i * ow + j] = best_at;
        }
    }
    (void)train;
    return y;
  }

  Tensor backward(const Tensor& g) override {
    Tensor gx(in_shape_);
    const std::size_t hw = in_shape_[2] * in_shape_[3];
    const std::size_t ohw = g.extent(2) * g.extent(3);
    for (std::size_t bc = 0; bc < in_shape_[0] * in_shape_[1]; ++bc) {
      const float* gsrc = g.data() + bc * ohw;
      float* gdst = gx.data() + bc * hw;
      const std::size_t* amax = argmax_.data() + bc * ohw;
      for (std::size_t q = 0; q < ohw; ++q) gdst[amax[q]] += gsrc[q];
    }
    return gx;
  }

 private:
  std::vector<std::size_t> argmax_;
  std::vector<std::size_t> in_shape_;
};

class FlattenLayer : public Layer {
 public:
  explicit FlattenLayer(const LayerSpec& spec) : Layer(spec) {}

  Tensor forward(const Tensor& x, bool train) override {
    if (train) in_shape_ = x.shape();
    return x.reshape({static_cast<std::int64_t>(x.extent(0)), -1});
  }
  Tensor backward(const Tensor& g) override {
    std::vector<std::int64_t> spec(in_shape_.size());
    for (std::size_t i = 0; i < in_shape_.size(); ++i)
      spec[i] = static_cast<std::int64_t>(in_shape_[i]);
    return g.reshape(spec);
  }

 private:
  std::vector<std::size_t> in_shape_;
};

inline std::unique_ptr<Layer> make_layer(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::HadaDense:
      return std::make_unique<DenseLayer>(spec);
    case LayerKind::HadaConv2d:
      return std::make_unique<ConvLayer>(spec);
    case LayerKind::BatchNorm:
      return std::make_unique<BatchNormLayer>(spec);
    case LayerKind::ReLU:
      return std::make_unique<ReLULayer>(spec);
    case LayerKind::MaxPool2d:
      return std::make_unique<MaxPoolLayer>(spec);
    case LayerKind::Flatten:
      return std::make_unique<FlattenLayer>(spec);
  }
  throw std::invalid_argument("make_layer: unknown layer kind");
}

class Network {
 public:
  Network() = default;
  explicit Network(const std::vector<LayerSpec>& specs) {
    for (const auto& s : specs) add(s);
  }

  void add(const LayerSpec& spec) {
    layers_.push_back(make_layer(spec));
    layers_.back()->attach(&ctx_, layers_.size() - 1);
  }

  void init_params(std::uint64_t seed) {
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ 0xC0FFEEu));
    for (auto& l : layers_) l->init(rng);
  }

  Tensor forward(const Tensor& x, bool train) {
    Tensor cur = x;
    for (auto& l : layers_) cur = l->forward(cur, train);
    return cur;
  }

  Tensor backward(const Tensor& grad_logits) {
    Tensor g = grad_logits;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      g = (*it)->backward(g);
    return g;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
      for (Param* p : l->params()) out.push_back(p);
    return out;
  }

  std::vector<std::unique_ptr<Layer>>& layers() { return layers_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

  ExecContext& ctx() { return ctx_; }
  void set_workers(int w) { ctx_.workers = w; }
  void set_packed_inference(bool v) { ctx_.packed_inference = v; }

  // Overrides the binarization aggression of every Hada layer except the
  // first and last parameterized ones (those stay full precision). beta_a
  // is clamped to each layer's admissible width.
  void set_inner_betas(std::size_t beta_w, std::size_t beta_a,
                       const std::vector<std::size_t>& widths) {
    const auto hada = hada_layer_indices();
    std::size_t k = 0;
    for (std::size_t idx : hada) {
      const bool edge = (idx == hada.front() || idx == hada.back());
      if (!edge) {
        LayerSpec& s = layers_[idx]->spec();
        s.beta_w = beta_w;
        s.beta_a = std::min(beta_a, widths.empty() ? beta_a : widths[k]);
      }
      ++k;
    }
  }

  std::vector<std::size_t> hada_layer_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const LayerKind k = layers_[i]->spec().kind;
      if (k == LayerKind::HadaDense || k == LayerKind::HadaConv2d)
        out.push_back(i);
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  ExecContext ctx_;
};

struct LossResult {
  float loss = 0.0f;
  Tensor grad_logits;
  std::size_t correct = 0;
};

inline LossResult softmax_cross_entropy(const Tensor& logits,
                                        const std::vector<int>& labels,
                                        std::size_t label_offset = 0) {
  const std::size_t b = logits.extent(0), k = logits.extent(1);
  LossResult res;
  res.grad_logits = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const float* row = logits.data() + i * k;
    float* grow = res.grad_logits.data() + i * k;
    const int label = labels[label_offset + i];
    float mx = row[0];
    std::size_t arg = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > mx) {
        mx = row[j];
        arg = j;
      }
    if (static_cast<int>(arg) == label) ++res.correct;
    float denom = 0.0f;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const float log_denom = std::log(denom);
    total += double(log_denom) - (row[static_cast<std::size_t>(label)] - mx);
    const float invb = 1.0f / static_cast<float>(b);
    for (std::size_t j = 0; j < k; ++j) {
      const float p = std::exp(row[j] - mx) / denom;
      grow[j] = (p - (static_cast<int>(j) == label ? 1.0f : 0.0f)) * invb;
    }
  }
  res.loss = static_cast<float>(total / b);
  return res;
}

// Adam with bias correction; hyperparameters come from the training config.
class Adam {
 public:
  Adam(const std::vector<Param*>& params, const TrainConfig& cfg)
      : beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_eps) {
    slots_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      slots_[i].m.assign(params[i]->value.numel(), 0.0f);
      slots_[i].v.assign(params[i]->value.numel(), 0.0f);
    }
  }

  void step(const std::vector<Param*>& params, float lr) {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param& p = *params[i];
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::size_t j = 0; j < m.size(); ++j) {
        const float g = p.grad[j];
        m[j] = beta1_ * m[j] + (1.0f - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0f - beta2_) * g * g;
        p.value[j] -=
            lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

  long steps() const { return t_; }

 private:
  struct Slot {
    std::vector<float> m, v;
  };
  std::vector<Slot> slots_;
  float beta1_, beta2_, eps_;
  long t_ = 0;
};

inline Tensor gather_batch(const DataSplit& split,
                           const std::vector<std::size_t>& order,
                           std::size_t lo, std::size_t hi,
                           std::vector<int>& labels_out) {
  const std::size_t sample = split.images.numel() / split.size();
  std::vector<std::size_t> shape = split.images.shape();
  shape[0] = hi - lo;
  Tensor batch(shape);
  labels_out.resize(hi - lo);
  for (std::size_t i = lo; i < hi; ++i) {
    const std::size_t src = order[i];
    std::copy_n(split.images.data() + src * sample, sample,
                batch.data() + (i - lo) * sample);
    labels_out[i - lo] = split.labels[src];
  }
  return batch;
}

inline double evaluate(Network& net, const DataSplit& split,
                       std::size_t batch_size = 256) {
  if (split.size() == 0) throw DataError("evaluate: empty split");
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t correct = 0;
  std::vector<int> labels;
  for (std::size_t lo = 0; lo < split.size(); lo += batch_size) {
    const std::size_t hi = std::min(lo + batch_size, split.size());
    const Tensor batch = gather_batch(split, order, lo, hi, labels);
    const Tensor logits = net.forward(batch, /*train=*/false);
    const std::size_t k = logits.extent(1);
    for (std::size_t i = 0; i < hi - lo; ++i) {
      const float* row = logits.data() + i * k;
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = j;
      if (static_cast<int>(arg) == labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

struct EpochMetrics {
  int epoch = 0;
  float lr = 0.0f;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  bool diverged = false;
  int divergence_epoch = -1;
  double final_test_acc() const {
    return history.empty() ? 0.0 : history.back().test_acc;
  }
};

// Minibatch training with Adam and step-decayed learning rate. Master
// weights are only ever touched by the optimizer; forwards binarize copies.
// Deterministic for a fixed seed at workers=1. A non-finite loss aborts the
// run and is reported as a structured divergence, not an exception.
inline TrainResult train(Network& net, const DataSplit& train_split,
                         const DataSplit& test_split, const TrainConfig& cfg,
                         std::ostream* log = nullptr) {
  if (train_split.size() == 0)
    throw DataError("train: no training batches (empty split)");
  net.set_workers(cfg.workers);

  Adam opt(net.params(), cfg);
  TrainResult result;
  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const float lr = update_learning_rate(cfg.lr, epoch, cfg);
    std::mt19937 shuffle_rng(static_cast<std::uint32_t>(
        cfg.seed * 0x9E3779B9u + static_cast<std::uint32_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    std::vector<int> labels;
    for (std::size_t lo = 0; lo < train_split.size();
         lo += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t hi = std::min(
          lo + static_cast<std::size_t>(cfg.batch), train_split.size());
      const Tensor batch = gather_batch(train_split, order, lo, hi, labels);
      const Tensor logits = net.forward(batch, /*train=*/true);
      LossResult loss = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(loss.loss)) {
        result.diverged = true;
        result.divergence_epoch = epoch;
        return result;
      }
      loss_sum += double(loss.loss) * static_cast<double>(hi - lo);
      correct += loss.correct;
      seen += hi - lo;
      net.backward(loss.grad_logits);
      opt.step(net.params(), lr);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    m.test_acc = evaluate(net, test_split);
    m.seconds = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    result.history.push_back(m);
    if (log) {
      (*log) << "epoch " << m.epoch << " lr " << m.lr << " loss "
             << m.train_loss << " train_acc " << m.train_acc << " test_acc "
             << m.test_acc << " (" << m.seconds << "s)\n";
      log->flush();
    }
  }
  return result;
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& history,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metrics file: " + path);
  out << "epoch,lr,train_loss,train_acc,test_acc,seconds\n";
  char buf[160];
  for (const auto& m : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6f,%.4f,%.4f,%.3f\n", m.epoch,
                  double(m.lr), m.train_loss, m.train_acc, m.test_acc,
                  m.seconds);
    out << buf;
  }
}

// The LeNet-class reference topology: two conv blocks and two dense layers
// in the BatchNorm - Binarize - Conv/Dense - ReLU - Pool arrangement. Only
// the inner two parameterized layers binarize; first and last stay at
// beta = 1. xnor_mode replaces the inner betas with the full row extents
// (one scale per row), the degenerate single-scalar-scale configuration.
struct LenetShape {
  std::size_t conv2_in_width = 0;   // activation width entering conv2
  std::size_t conv2_row = 0;        // flattened filter row length of conv2
  std::size_t fc_in = 0;            // flattened features entering fc1
};

inline LenetShape lenet_shape(const TrainConfig& cfg, std::size_t image_hw = 28) {
  const std::size_t k = static_cast<std::size_t>(cfg.kernel);
  const std::size_t p = static_cast<std::size_t>(cfg.pool);
  const std::size_t h1 = image_hw - k + 1;
  const std::size_t p1 = h1 / p;
  const std::size_t h2 = p1 - k + 1;
  const std::size_t p2 = h2 / p;
  LenetShape s;
  s.conv2_in_width = p1;
  s.conv2_row = static_cast<std::size_t>(cfg.conv1_filters) * k * k;
  s.fc_in = static_cast<std::size_t>(cfg.conv2_filters) * p2 * p2;
  return s;
}

inline std::vector<LayerSpec> lenet_specs(const TrainConfig& cfg,
                                          bool xnor_mode = false,
                                          std::size_t image_hw = 28,
                                          std::size_t classes = 10) {
  const LenetShape sh = lenet_shape(cfg, image_hw);
  const std::size_t k = static_cast<std::size_t>(cfg.kernel);
  const std::size_t c1 = static_cast<std::size_t>(cfg.conv1_filters);
  const std::size_t c2 = static_cast<std::size_t>(cfg.conv2_filters);
  const std::size_t hidden = static_cast<std::size_t>(cfg.fc_hidden);

  std::size_t bw_conv2 = static_cast<std::size_t>(cfg.beta_w);
  std::size_t ba_conv2 = static_cast<std::size_t>(cfg.beta_a);
  std::size_t bw_fc = static_cast<std::size_t>(cfg.beta_w);
  std::size_t ba_fc = static_cast<std::size_t>(cfg.beta_a);
  if (xnor_mode) {
    bw_conv2 = sh.conv2_row;
    ba_conv2 = sh.conv2_in_width;
    bw_fc = sh.fc_in;
    ba_fc = sh.fc_in;
  }
  if (ba_conv2 > sh.conv2_in_width)
    throw ConfigError("beta_a " + std::to_string(ba_conv2) +
                      " exceeds conv2 input width " +
                      std::to_string(sh.conv2_in_width));

  std::vector<LayerSpec> specs;
  specs.push_back(LayerSpec::conv2d(c1, 1, k, k, 1, 0, 1, 1));
  specs.push_back(LayerSpec::relu());
  specs.push_back(LayerSpec::maxpool(static_cast<std::size_t>(cfg.pool)));
  specs.push_back(LayerSpec::batchnorm(c1, /*spatial=*/true));
  specs.push_back(LayerSpec::conv2d(c2, c1, k, k, 1, 0, bw_conv2, ba_conv2));
  specs.push_back(LayerSpec::relu());
  specs.push_back(LayerSpec::maxpool(static_cast<std::size_t>(cfg.pool)));
  specs.push_back(LayerSpec::flatten());
  specs.push_back(LayerSpec::batchnorm(sh.fc_in, /*spatial=*/false));
  specs.push_back(LayerSpec::dense(sh.fc_in, hidden, bw_fc, ba_fc));
  specs.push_back(LayerSpec::relu());
  specs.push_back(LayerSpec::dense(hidden, classes, 1, 1));
  return specs;
}

}  // namespace hadanet
