#pragma once

// Minimal dense network toolkit used by every learned component: per-scalar
// residual MLPs with a channel-wise 1-D convolution, reverse-mode gradients,
// AdamW and cosine annealing. Activations are stored column-per-sample
// (features x batch) so every layer is a single GEMM over the batch.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hanlab::nn {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct Architecture {
  std::size_t input_width = 3;
  std::size_t hidden_width = 64;
  std::size_t output_width = 28;
  std::size_t num_res_blocks = 2;
  std::size_t conv_channels = 4;
  std::size_t conv_kernel = 3;

  bool operator==(const Architecture&) const = default;

  std::size_t conv_length() const { return hidden_width / conv_channels; }
};

inline void validate(const Architecture& a) {
  if (a.input_width == 0 || a.output_width == 0 || a.hidden_width == 0)
    throw std::invalid_argument("architecture: widths must be positive");
  if (a.conv_channels == 0 || a.hidden_width % a.conv_channels != 0)
    throw std::invalid_argument("architecture: hidden_width must be a multiple of conv_channels");
  if (a.conv_kernel == 0 || a.conv_kernel % 2 == 0)
    throw std::invalid_argument("architecture: conv_kernel must be odd");
}

template <typename S>
struct Param {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;
};

namespace detail {

template <typename S>
Matrix<S> sigmoid(const Matrix<S>& z) {
  return (S(1) + (-z.array()).exp()).inverse().matrix();
}

template <typename S>
Matrix<S> silu(const Matrix<S>& z) {
  return (z.array() * sigmoid(z).array()).matrix();
}

// d silu / dz = s * (1 + z * (1 - s))
template <typename S>
Matrix<S> silu_grad(const Matrix<S>& z, const Matrix<S>& upstream) {
  const Matrix<S> s = sigmoid(z);
  return (upstream.array() * s.array() * (S(1) + z.array() * (S(1) - s.array()))).matrix();
}

// Channel-wise 1-D convolution over the hidden vector viewed as
// (channels x length), zero padding, stride 1. weight is C x (C*K) with
// column index ci*K + k.
template <typename S>
Matrix<S> conv_forward(const Matrix<S>& w, const Matrix<S>& b, const Matrix<S>& in,
                       std::size_t channels, std::size_t kernel) {
  const auto len = static_cast<Eigen::Index>(in.rows() / static_cast<Eigen::Index>(channels));
  const auto half = static_cast<Eigen::Index>(kernel / 2);
  Matrix<S> out(in.rows(), in.cols());
  for (std::size_t co = 0; co < channels; ++co)
    out.middleRows(static_cast<Eigen::Index>(co) * len, len).setConstant(b(static_cast<Eigen::Index>(co), 0));
  for (std::size_t co = 0; co < channels; ++co) {
    for (std::size_t ci = 0; ci < channels; ++ci) {
      for (std::size_t k = 0; k < kernel; ++k) {
        const S wk = w(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(ci * kernel + k));
        const Eigen::Index shift = static_cast<Eigen::Index>(k) - half;
        const Eigen::Index p_lo = std::max<Eigen::Index>(0, -shift);
        const Eigen::Index p_hi = std::min<Eigen::Index>(len, len - shift);
        if (p_hi <= p_lo) continue;
        out.middleRows(static_cast<Eigen::Index>(co) * len + p_lo, p_hi - p_lo) +=
            wk * in.middleRows(static_cast<Eigen::Index>(ci) * len + p_lo + shift, p_hi - p_lo);
      }
    }
  }
  return out;
}

template <typename S>
Matrix<S> conv_backward(const Matrix<S>& w, const Matrix<S>& in, const Matrix<S>& d_out,
                        std::size_t channels, std::size_t kernel, Matrix<S>* dw, Matrix<S>* db) {
  const auto len = static_cast<Eigen::Index>(in.rows() / static_cast<Eigen::Index>(channels));
  const auto half = static_cast<Eigen::Index>(kernel / 2);
  Matrix<S> d_in = Matrix<S>::Zero(in.rows(), in.cols());
  for (std::size_t co = 0; co < channels; ++co) {
    const auto out_rows = d_out.middleRows(static_cast<Eigen::Index>(co) * len, len);
    if (db) (*db)(static_cast<Eigen::Index>(co), 0) += out_rows.sum();
    for (std::size_t ci = 0; ci < channels; ++ci) {
      for (std::size_t k = 0; k < kernel; ++k) {
        const auto col = static_cast<Eigen::Index>(ci * kernel + k);
        const S wk = w(static_cast<Eigen::Index>(co), col);
        const Eigen::Index shift = static_cast<Eigen::Index>(k) - half;
        const Eigen::Index p_lo = std::max<Eigen::Index>(0, -shift);
        const Eigen::Index p_hi = std::min<Eigen::Index>(len, len - shift);
        if (p_hi <= p_lo) continue;
        const auto g = d_out.middleRows(static_cast<Eigen::Index>(co) * len + p_lo, p_hi - p_lo);
        const auto x = in.middleRows(static_cast<Eigen::Index>(ci) * len + p_lo + shift, p_hi - p_lo);
        d_in.middleRows(static_cast<Eigen::Index>(ci) * len + p_lo + shift, p_hi - p_lo) += wk * g;
        if (dw) (*dw)(static_cast<Eigen::Index>(co), col) += g.cwiseProduct(x).sum();
      }
    }
  }
  return d_in;
}

}  // namespace detail

// Layout: input linear -> SiLU -> channel conv -> SiLU -> residual blocks
// (h <- silu(h + W2 silu(W1 h + b1) + b2)) -> output linear.
template <typename S>
class Network {
 public:
  struct Tape {
    Matrix<S> input, z_in, h_in, z_conv;
    std::vector<Matrix<S>> block_in, block_u, block_v, block_s;
    Matrix<S> h_last;
  };

  Network() = default;

  explicit Network(const Architecture& arch) : arch_(arch) {
    validate(arch_);
    const auto in = static_cast<Eigen::Index>(arch_.input_width);
    const auto h = static_cast<Eigen::Index>(arch_.hidden_width);
    const auto c = static_cast<Eigen::Index>(arch_.conv_channels);
    const auto k = static_cast<Eigen::Index>(arch_.conv_kernel);
    const auto out = static_cast<Eigen::Index>(arch_.output_width);
    add("input.weight", h, in);
    add("input.bias", h, 1);
    add("conv.weight", c, c * k);
    add("conv.bias", c, 1);
    for (std::size_t b = 0; b < arch_.num_res_blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      add(p + ".fc1.weight", h, h);
      add(p + ".fc1.bias", h, 1);
      add(p + ".fc2.weight", h, h);
      add(p + ".fc2.bias", h, 1);
    }
    add("output.weight", out, h);
    add("output.bias", out, 1);
  }

  // Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  template <class Rng>
  void initialize(Rng& rng) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const std::size_t fan_in = fan_in_of(i);
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      auto& v = params_[i].value;
      for (Eigen::Index j = 0; j < v.size(); ++j) v.data()[j] = static_cast<S>(dist(rng));
    }
  }

  const Architecture& architecture() const { return arch_; }
  std::vector<Param<S>>& params() { return params_; }
  const std::vector<Param<S>>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  Matrix<S> forward(const Matrix<S>& x) const {
    check_input(x);
    Matrix<S> h = detail::silu<S>((weight(0) * x).colwise() + bias(1));
    h = detail::silu<S>(detail::conv_forward<S>(weight(2), weight(3), h, arch_.conv_channels, arch_.conv_kernel));
    for (std::size_t b = 0; b < arch_.num_res_blocks; ++b) {
      const std::size_t base = 4 + 4 * b;
      Matrix<S> v = detail::silu<S>((weight(base) * h).colwise() + bias(base + 1));
      Matrix<S> s = (weight(base + 2) * v).colwise() + bias(base + 3);
      s += h;
      h = detail::silu<S>(s);
    }
    const std::size_t o = 4 + 4 * arch_.num_res_blocks;
    return (weight(o) * h).colwise() + bias(o + 1);
  }

  Matrix<S> forward(const Matrix<S>& x, Tape& tape) const {
    check_input(x);
    tape.input = x;
    tape.z_in = (weight(0) * x).colwise() + bias(1);
    tape.h_in = detail::silu<S>(tape.z_in);
    tape.z_conv = detail::conv_forward<S>(weight(2), weight(3), tape.h_in, arch_.conv_channels, arch_.conv_kernel);
    Matrix<S> h = detail::silu<S>(tape.z_conv);
    tape.block_in.assign(arch_.num_res_blocks, {});
    tape.block_u.assign(arch_.num_res_blocks, {});
    tape.block_v.assign(arch_.num_res_blocks, {});
    tape.block_s.assign(arch_.num_res_blocks, {});
    for (std::size_t b = 0; b < arch_.num_res_blocks; ++b) {
      const std::size_t base = 4 + 4 * b;
      tape.block_in[b] = h;
      tape.block_u[b] = (weight(base) * h).colwise() + bias(base + 1);
      tape.block_v[b] = detail::silu<S>(tape.block_u[b]);
      tape.block_s[b] = (weight(base + 2) * tape.block_v[b]).colwise() + bias(base + 3);
      tape.block_s[b] += h;
      h = detail::silu<S>(tape.block_s[b]);
    }
    tape.h_last = h;
    const std::size_t o = 4 + 4 * arch_.num_res_blocks;
    return (weight(o) * h).colwise() + bias(o + 1);
  }

  // Returns d loss / d input. Parameter gradients are added to Param::grad
  // when accumulate is true; otherwise the network is only a conduit.
  Matrix<S> backward(const Tape& tape, const Matrix<S>& d_out, bool accumulate = true) {
    const std::size_t o = 4 + 4 * arch_.num_res_blocks;
    if (accumulate) {
      params_[o].grad.noalias() += d_out * tape.h_last.transpose();
      params_[o + 1].grad += d_out.rowwise().sum();
    }
    Matrix<S> dh = weight(o).transpose() * d_out;
    for (std::size_t bi = arch_.num_res_blocks; bi-- > 0;) {
      const std::size_t base = 4 + 4 * bi;
      const Matrix<S> ds = detail::silu_grad<S>(tape.block_s[bi], dh);
      if (accumulate) {
        params_[base + 2].grad.noalias() += ds * tape.block_v[bi].transpose();
        params_[base + 3].grad += ds.rowwise().sum();
      }
      const Matrix<S> du = detail::silu_grad<S>(tape.block_u[bi], weight(base + 2).transpose() * ds);
      if (accumulate) {
        params_[base].grad.noalias() += du * tape.block_in[bi].transpose();
        params_[base + 1].grad += du.rowwise().sum();
      }
      dh = ds;
      dh.noalias() += weight(base).transpose() * du;
    }
    const Matrix<S> dz_conv = detail::silu_grad<S>(tape.z_conv, dh);
    Matrix<S> dh_in = detail::conv_backward<S>(weight(2), tape.h_in, dz_conv, arch_.conv_channels,
                                               arch_.conv_kernel, accumulate ? &params_[2].grad : nullptr,
                                               accumulate ? &params_[3].grad : nullptr);
    const Matrix<S> dz_in = detail::silu_grad<S>(tape.z_in, dh_in);
    if (accumulate) {
      params_[0].grad.noalias() += dz_in * tape.input.transpose();
      params_[1].grad += dz_in.rowwise().sum();
    }
    return weight(0).transpose() * dz_in;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  template <typename T>
  Network<T> cast() const {
    Network<T> out(arch_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i].value = params_[i].value.template cast<T>();
    return out;
  }

  // FNV-1a over the raw weight bytes; equal digests <=> equal serialized weights.
  std::uint64_t digest() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
      const std::size_t n = static_cast<std::size_t>(p.value.size()) * sizeof(S);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

 private:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    params_.push_back({std::move(name), Matrix<S>::Zero(rows, cols), Matrix<S>::Zero(rows, cols)});
  }

  std::size_t fan_in_of(std::size_t i) const {
    if (i == 2 || i == 3) return arch_.conv_channels * arch_.conv_kernel;
    // biases share the fan-in of the weight just before them
    const std::size_t w = (i % 2 == 0) ? i : i - 1;
    return static_cast<std::size_t>(params_[w].value.cols());
  }

  const Matrix<S>& weight(std::size_t i) const { return params_[i].value; }
  auto bias(std::size_t i) const { return params_[i].value.col(0); }

  void check_input(const Matrix<S>& x) const {
    if (static_cast<std::size_t>(x.rows()) != arch_.input_width)
      throw std::invalid_argument("network: input has " + std::to_string(x.rows()) + " rows, expected " +
                                  std::to_string(arch_.input_width));
  }

  Architecture arch_{};
  std::vector<Param<S>> params_;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};

// Decoupled weight decay Adam. One instance per model; never shared.
template <typename S>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const Network<S>& net, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : net.params()) {
      m_.push_back(Matrix<S>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix<S>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void step(Network<S>& net, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S step_size = static_cast<S>(lr / bc1);
    const S decay = static_cast<S>(1.0 - lr * cfg_.weight_decay);
    const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
    const S eps = static_cast<S>(cfg_.eps);
    auto& ps = net.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i];
      m_[i] = b1 * m_[i] + (S(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * p.grad.cwiseAbs2();
      p.value *= decay;
      p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  AdamWConfig cfg_{};
  std::vector<Matrix<S>> m_, v_;
  std::size_t t_ = 0;
};

struct CosineSchedule {
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  std::size_t total_steps = 1;

  double at(std::size_t step) const {
    const double frac = total_steps == 0 ? 1.0
                                         : std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac));
  }
};

}  // namespace hanlab::nn
