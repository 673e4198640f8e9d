///
/// \file layers.hpp
/// \brief Minimal layer set for the affect models: convolution, max pooling,
///        dense, ReLU and dropout, with hand-written backward passes.
///
/// A batch is a matrix with one column per sample. Image samples are stored
/// (row, col, channel) with channel fastest, which lets a convolution run as
/// one GEMM over the whole batch: W (F x kkC) * columns (kkC x N*P) lands
/// directly in the same layout for the next layer.
///
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lupi/common.hpp"

namespace lupi::nn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Mode { train, eval };

struct Shape3 {
  int height = 1;
  int width = 1;
  int channels = 1;
  [[nodiscard]] int size() const { return height * width * channels; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string describe(const Shape3& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

template <typename Scalar>
struct ParamRef {
  std::string name;
  Scalar* value;
  Scalar* grad;
  std::size_t size;
};

using Rng = std::mt19937_64;

template <typename Scalar>
class Layer {
 public:
  virtual ~Layer() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual Shape3 output_shape() const = 0;
  virtual void forward(const Mat<Scalar>& in, Mat<Scalar>& out, Mode mode, Rng& rng) = 0;
  /// Writes parameter gradients (overwriting) and, when `grad_in` is given,
  /// the gradient with respect to the layer input.
  virtual void backward(const Mat<Scalar>& in, const Mat<Scalar>& out, const Mat<Scalar>& grad_out,
                        Mat<Scalar>* grad_in) = 0;
  virtual std::vector<ParamRef<Scalar>> parameters() { return {}; }
  virtual void initialize(Rng&) {}
};

/// Fan-in scaled uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename Scalar>
void fan_in_uniform(Scalar* data, std::size_t n, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<Scalar>(u(rng));
}

/// "Same"-padded 2D convolution: output size ceil(in / stride), padding split
/// with the extra row/column at the bottom/right.
template <typename Scalar>
class Conv2D final : public Layer<Scalar> {
 public:
  Conv2D(std::string name, Shape3 in, int filters, int kernel, int stride)
      : name_(std::move(name)), in_(in), filters_(filters), kernel_(kernel), stride_(stride) {
    if (in.height < 1 || in.width < 1 || in.channels < 1)
      throw ShapeError(name_ + ": empty input " + describe(in));
    out_ = {(in.height + stride - 1) / stride, (in.width + stride - 1) / stride, filters};
    pad_top_ = std::max((out_.height - 1) * stride + kernel - in.height, 0) / 2;
    pad_left_ = std::max((out_.width - 1) * stride + kernel - in.width, 0) / 2;
    weights_.setZero(filters, kernel * kernel * in.channels);
    bias_.setZero(filters);
    grad_w_.setZero(weights_.rows(), weights_.cols());
    grad_b_.setZero(filters);
  }

  [[nodiscard]] std::string name() const override { return name_; }
  [[nodiscard]] Shape3 output_shape() const override { return out_; }

  void initialize(Rng& rng) override {
    fan_in_uniform(weights_.data(), static_cast<std::size_t>(weights_.size()), static_cast<int>(weights_.cols()), rng);
    bias_.setZero();
  }

  void forward(const Mat<Scalar>& in, Mat<Scalar>& out, Mode, Rng&) override {
    if (in.rows() != in_.size()) throw ShapeError(name_ + ": expected input of " + describe(in_));
    const Eigen::Index n = in.cols();
    const Eigen::Index positions = static_cast<Eigen::Index>(out_.height) * out_.width;
    im2col(in, columns_);
    out.resize(filters_ * positions, n);
    Eigen::Map<Mat<Scalar>> result(out.data(), filters_, n * positions);
    result.noalias() = weights_ * columns_;
    result.colwise() += bias_;
  }

  void backward(const Mat<Scalar>&, const Mat<Scalar>&, const Mat<Scalar>& grad_out, Mat<Scalar>* grad_in) override {
    const Eigen::Index n = grad_out.cols();
    const Eigen::Index positions = static_cast<Eigen::Index>(out_.height) * out_.width;
    Eigen::Map<const Mat<Scalar>> g(grad_out.data(), filters_, n * positions);
    grad_w_.noalias() = g * columns_.transpose();
    grad_b_ = g.rowwise().sum();
    if (!grad_in) return;
    Mat<Scalar> grad_columns = weights_.transpose() * g;
    col2im(grad_columns, n, *grad_in);
  }

  std::vector<ParamRef<Scalar>> parameters() override {
    return {{name_ + ".weight", weights_.data(), grad_w_.data(), static_cast<std::size_t>(weights_.size())},
            {name_ + ".bias", bias_.data(), grad_b_.data(), static_cast<std::size_t>(bias_.size())}};
  }

  Mat<Scalar>& weights() { return weights_; }
  Vec<Scalar>& bias() { return bias_; }

 private:
  void im2col(const Mat<Scalar>& in, Mat<Scalar>& cols) const {
    const int c = in_.channels;
    const Eigen::Index n = in.cols();
    const Eigen::Index positions = static_cast<Eigen::Index>(out_.height) * out_.width;
    cols.resize(static_cast<Eigen::Index>(kernel_) * kernel_ * c, n * positions);
    for (Eigen::Index s = 0; s < n; ++s) {
      const Scalar* src = in.col(s).data();
      for (int oy = 0; oy < out_.height; ++oy) {
        for (int ox = 0; ox < out_.width; ++ox) {
          Scalar* dst = cols.col(s * positions + oy * out_.width + ox).data();
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - pad_top_ + ky;
            for (int kx = 0; kx < kernel_; ++kx, dst += c) {
              const int ix = ox * stride_ - pad_left_ + kx;
              if (iy < 0 || iy >= in_.height || ix < 0 || ix >= in_.width) {
                std::fill(dst, dst + c, Scalar(0));
              } else {
                std::copy_n(src + (static_cast<std::ptrdiff_t>(iy) * in_.width + ix) * c, c, dst);
              }
            }
          }
        }
      }
    }
  }

  void col2im(const Mat<Scalar>& cols, Eigen::Index n, Mat<Scalar>& grad_in) const {
    const int c = in_.channels;
    const Eigen::Index positions = static_cast<Eigen::Index>(out_.height) * out_.width;
    grad_in.setZero(in_.size(), n);
    for (Eigen::Index s = 0; s < n; ++s) {
      Scalar* dst = grad_in.col(s).data();
      for (int oy = 0; oy < out_.height; ++oy) {
        for (int ox = 0; ox < out_.width; ++ox) {
          const Scalar* src = cols.col(s * positions + oy * out_.width + ox).data();
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - pad_top_ + ky;
            for (int kx = 0; kx < kernel_; ++kx, src += c) {
              const int ix = ox * stride_ - pad_left_ + kx;
              if (iy < 0 || iy >= in_.height || ix < 0 || ix >= in_.width) continue;
              Scalar* d = dst + (static_cast<std::ptrdiff_t>(iy) * in_.width + ix) * c;
              for (int k = 0; k < c; ++k) d[k] += src[k];
            }
          }
        }
      }
    }
  }

  std::string name_;
  Shape3 in_, out_;
  int filters_, kernel_, stride_;
  int pad_top_ = 0, pad_left_ = 0;
  Mat<Scalar> weights_, grad_w_;
  Vec<Scalar> bias_, grad_b_;
  Mat<Scalar> columns_;
};

/// 2x2 max pooling, stride 2, "same" padding (odd edges pool a single row/col).
template <typename Scalar>
class MaxPool2x2 final : public Layer<Scalar> {
 public:
  MaxPool2x2(std::string name, Shape3 in) : name_(std::move(name)), in_(in) {
    out_ = {(in.height + 1) / 2, (in.width + 1) / 2, in.channels};
  }
  [[nodiscard]] std::string name() const override { return name_; }
  [[nodiscard]] Shape3 output_shape() const override { return out_; }

  void forward(const Mat<Scalar>& in, Mat<Scalar>& out, Mode, Rng&) override {
    const int c = in_.channels;
    const Eigen::Index n = in.cols();
    out.resize(out_.size(), n);
    argmax_.resize(static_cast<std::size_t>(out_.size()) * static_cast<std::size_t>(n));
    for (Eigen::Index s = 0; s < n; ++s) {
      const Scalar* src = in.col(s).data();
      Scalar* dst = out.col(s).data();
      std::int32_t* arg = argmax_.data() + s * out_.size();
      for (int oy = 0; oy < out_.height; ++oy) {
        for (int ox = 0; ox < out_.width; ++ox) {
          for (int k = 0; k < c; ++k) {
            std::int32_t best = ((2 * oy) * in_.width + 2 * ox) * c + k;
            for (int dy = 0; dy < 2; ++dy) {
              const int iy = 2 * oy + dy;
              if (iy >= in_.height) break;
              for (int dx = 0; dx < 2; ++dx) {
                const int ix = 2 * ox + dx;
                if (ix >= in_.width) break;
                const std::int32_t idx = (iy * in_.width + ix) * c + k;
                if (src[idx] > src[best]) best = idx;
              }
            }
            const int o = (oy * out_.width + ox) * c + k;
            dst[o] = src[best];
            arg[o] = best;
          }
        }
      }
    }
  }

  void backward(const Mat<Scalar>&, const Mat<Scalar>&, const Mat<Scalar>& grad_out, Mat<Scalar>* grad_in) override {
    if (!grad_in) return;
    const Eigen::Index n = grad_out.cols();
    grad_in->setZero(in_.size(), n);
    for (Eigen::Index s = 0; s < n; ++s) {
      const std::int32_t* arg = argmax_.data() + s * out_.size();
      const Scalar* g = grad_out.col(s).data();
      Scalar* d = grad_in->col(s).data();
      for (int o = 0; o < out_.size(); ++o) d[arg[o]] += g[o];
    }
  }

 private:
  std::string name_;
  Shape3 in_, out_;
  std::vector<std::int32_t> argmax_;
};

template <typename Scalar>
class Dense final : public Layer<Scalar> {
 public:
  Dense(std::string name, int in, int out) : name_(std::move(name)), in_(in), out_(out) {
    if (in < 1 || out < 1) throw ShapeError(name_ + ": dense layer needs positive dimensions");
    weights_.setZero(out, in);
    bias_.setZero(out);
    grad_w_.setZero(out, in);
    grad_b_.setZero(out);
  }
  [[nodiscard]] std::string name() const override { return name_; }
  [[nodiscard]] Shape3 output_shape() const override { return {1, 1, out_}; }
  [[nodiscard]] int input_dim() const { return in_; }

  void initialize(Rng& rng) override {
    fan_in_uniform(weights_.data(), static_cast<std::size_t>(weights_.size()), in_, rng);
    bias_.setZero();
  }

  void forward(const Mat<Scalar>& in, Mat<Scalar>& out, Mode, Rng&) override {
    if (in.rows() != in_)
      throw ShapeError(name_ + ": expected " + std::to_string(in_) + " inputs, got " + std::to_string(in.rows()));
    out.noalias() = weights_ * in;
    out.colwise() += bias_;
  }

  void backward(const Mat<Scalar>& in, const Mat<Scalar>&, const Mat<Scalar>& grad_out, Mat<Scalar>* grad_in) override {
    grad_w_.noalias() = grad_out * in.transpose();
    grad_b_ = grad_out.rowwise().sum();
    if (grad_in) grad_in->noalias() = weights_.transpose() * grad_out;
  }

  std::vector<ParamRef<Scalar>> parameters() override {
    return {{name_ + ".weight", weights_.data(), grad_w_.data(), static_cast<std::size_t>(weights_.size())},
            {name_ + ".bias", bias_.data(), grad_b_.data(), static_cast<std::size_t>(bias_.size())}};
  }

  Mat<Scalar>& weights() { return weights_; }
  Vec<Scalar>& bias() { return bias_; }

 private:
  std::string name_;
  int in_, out_;
  Mat<Scalar> weights_, grad_w_;
  Vec<Scalar> bias_, grad_b_;
};

template <typename Scalar>
class ReLU final : public Layer<Scalar> {
 public:
  ReLU(std::string name, Shape3 shape) : name_(std::move(name)), shape_(shape) {}
  [[nodiscard]] std::string name() const override { return name_; }
  [[nodiscard]] Shape3 output_shape() const override { return shape_; }
  void forward(const Mat<Scalar>& in, Mat<Scalar>& out, Mode, Rng&) override { out = in.cwiseMax(Scalar(0)); }
  void backward(const Mat<Scalar>&, const Mat<Scalar>& out, const Mat<Scalar>& grad_out, Mat<Scalar>* grad_in) override {
    if (grad_in) *grad_in = (out.array() > Scalar(0)).select(grad_out, Scalar(0));
  }

 private:
  std::string name_;
  Shape3 shape_;
};

/// Inverted dropout: kept units are scaled by 1/(1-rate) in train mode, the
/// layer is the identity in eval mode.
template <typename Scalar>
class Dropout final : public Layer<Scalar> {
 public:
  Dropout(std::string name, Shape3 shape, double rate) : name_(std::move(name)), shape_(shape), rate_(rate) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError(name_ + ": dropout rate must be in [0,1)");
  }
  [[nodiscard]] std::string name() const override { return name_; }
  [[nodiscard]] Shape3 output_shape() const override { return shape_; }
  [[nodiscard]] double rate() const { return rate_; }

  void forward(const Mat<Scalar>& in, Mat<Scalar>& out, Mode mode, Rng& rng) override {
    if (mode == Mode::eval || rate_ == 0.0) {
      out = in;
      mask_.resize(0, 0);
      return;
    }
    std::bernoulli_distribution keep(1.0 - rate_);
    const auto scale = static_cast<Scalar>(1.0 / (1.0 - rate_));
    mask_.resize(in.rows(), in.cols());
    for (Eigen::Index i = 0; i < mask_.size(); ++i) mask_.data()[i] = keep(rng) ? scale : Scalar(0);
    out = in.cwiseProduct(mask_);
  }

  void backward(const Mat<Scalar>&, const Mat<Scalar>&, const Mat<Scalar>& grad_out, Mat<Scalar>* grad_in) override {
    if (!grad_in) return;
    *grad_in = mask_.size() == 0 ? grad_out : grad_out.cwiseProduct(mask_);
  }

 private:
  std::string name_;
  Shape3 shape_;
  double rate_;
  Mat<Scalar> mask_;
};

/// Layers applied in order, with activations cached for the backward pass.
template <typename Scalar>
class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  [[nodiscard]] bool empty() const { return layers_.empty(); }
  [[nodiscard]] Shape3 output_shape() const { return layers_.back()->output_shape(); }
  [[nodiscard]] const std::vector<std::unique_ptr<Layer<Scalar>>>& layers() const { return layers_; }

  const Mat<Scalar>& forward(const Mat<Scalar>& in, Mode mode, Rng& rng) {
    input_ = &in;
    acts_.resize(layers_.size());
    const Mat<Scalar>* x = &in;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i]->forward(*x, acts_[i], mode, rng);
      x = &acts_[i];
    }
    return *x;
  }

  /// Backpropagates from the last forward call. `grad_in` receives the input
  /// gradient when non-null.
  void backward(const Mat<Scalar>& grad_out, Mat<Scalar>* grad_in) {
    Mat<Scalar> g = grad_out;
    Mat<Scalar> next;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const Mat<Scalar>& in = i == 0 ? *input_ : acts_[i - 1];
      Mat<Scalar>* target = (i == 0) ? grad_in : &next;
      layers_[i]->backward(in, acts_[i], g, target);
      if (i > 0) g.swap(next);
    }
  }

  std::vector<ParamRef<Scalar>> parameters() {
    std::vector<ParamRef<Scalar>> out;
    for (auto& layer : layers_)
      for (auto& p : layer->parameters()) out.push_back(p);
    return out;
  }

  void initialize(Rng& rng) {
    for (auto& layer : layers_) layer->initialize(rng);
  }

 private:
  std::vector<std::unique_ptr<Layer<Scalar>>> layers_;
  std::vector<Mat<Scalar>> acts_;
  const Mat<Scalar>* input_ = nullptr;
};

}  // namespace lupi::nn
