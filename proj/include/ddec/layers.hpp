#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

#include "ddec/common.hpp"

namespace ddec {

/// Matmul work tally. Each product of an (m x k) by (k x n) matrix adds 2mnk.
struct OpCounter {
  std::uint64_t projection = 0;  // attention q/k/v/o projections
  std::uint64_t attention = 0;   // score and value products inside sdpa
  std::uint64_t ffn = 0;
  std::uint64_t head = 0;        // tied output projection

  std::uint64_t total() const noexcept { return projection + attention + ffn + head; }
  std::uint64_t per_layer() const noexcept { return projection + attention + ffn; }
};

inline std::uint64_t matmul_flops(Index m, Index n, Index k) {
  return 2ull * static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(n) *
         static_cast<std::uint64_t>(k);
}

/// y = x W + b with W stored (in x out) and b a 1 x out row.
template <typename Scalar>
struct Linear {
  Matrix<Scalar> weight;
  Matrix<Scalar> bias;
};

template <typename Scalar>
struct LayerNorm {
  Matrix<Scalar> gain;
  Matrix<Scalar> bias;
};

template <typename Scalar, typename Derived>
Matrix<Scalar> linear_forward(const Linear<Scalar>& p, const Eigen::MatrixBase<Derived>& x,
                              std::uint64_t* flops = nullptr) {
  Matrix<Scalar> y(x.rows(), p.weight.cols());
  y.noalias() = x * p.weight;
  y.rowwise() += p.bias.row(0);
  if (flops) *flops += matmul_flops(x.rows(), p.weight.cols(), p.weight.rows());
  return y;
}

/// Accumulates parameter gradients into `grad` and returns dL/dx.
template <typename Scalar, typename Derived>
Matrix<Scalar> linear_backward(const Linear<Scalar>& p, const Eigen::MatrixBase<Derived>& x,
                               const Matrix<Scalar>& dy, Linear<Scalar>& grad) {
  grad.weight.noalias() += x.transpose() * dy;
  grad.bias.row(0) += dy.colwise().sum();
  Matrix<Scalar> dx(dy.rows(), p.weight.rows());
  dx.noalias() = dy * p.weight.transpose();
  return dx;
}

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;  // (x - mean) / std, before gain and bias
  Vector<Scalar> inv_std;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
Matrix<Scalar> layer_norm_forward(const LayerNorm<Scalar>& p, const Matrix<Scalar>& x,
                                  LayerNormCache<Scalar>* cache = nullptr) {
  const Index d = x.cols();
  Vector<Scalar> mean = x.rowwise().mean();
  Matrix<Scalar> centered = x.colwise() - mean;
  Vector<Scalar> inv_std =
      ((centered.array().square().rowwise().sum() / Scalar(d)) + Scalar(kLayerNormEps)).rsqrt();
  Matrix<Scalar> normalized = inv_std.asDiagonal() * centered;
  Matrix<Scalar> y = (normalized.array().rowwise() * p.gain.row(0).array()).matrix();
  y.rowwise() += p.bias.row(0);
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const LayerNorm<Scalar>& p, const LayerNormCache<Scalar>& cache,
                                   const Matrix<Scalar>& dy, LayerNorm<Scalar>& grad) {
  const Scalar d = static_cast<Scalar>(dy.cols());
  grad.gain.row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  grad.bias.row(0) += dy.colwise().sum();
  Matrix<Scalar> dn = (dy.array().rowwise() * p.gain.row(0).array()).matrix();
  Vector<Scalar> mean_dn = dn.rowwise().mean();
  Vector<Scalar> mean_dn_n = (dn.array() * cache.normalized.array()).rowwise().sum() / d;
  Matrix<Scalar> dx = dn.colwise() - mean_dn;
  dx -= (cache.normalized.array().colwise() * mean_dn_n.array()).matrix();
  return cache.inv_std.asDiagonal() * dx;
}

/// Exact (erf) GELU.
template <typename Scalar>
Matrix<Scalar> gelu_forward(const Matrix<Scalar>& x) {
  constexpr Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  return x.unaryExpr([](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
}

template <typename Scalar>
Matrix<Scalar> gelu_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& dy) {
  constexpr Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  constexpr Scalar inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<Scalar> * inv_sqrt2;
  return dy.binaryExpr(x, [](Scalar g, Scalar v) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
    const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    return g * (cdf + v * pdf);
  });
}

/// Rotary position tables: angle(pos, i) = pos * base^(-2i / head_dim) for the
/// i-th adjacent pair (2i, 2i+1) of each head.
template <typename Scalar>
class RotaryTable {
 public:
  RotaryTable() = default;
  RotaryTable(Index max_positions, Index head_dim, double base = 10000.0)
      : head_dim_(head_dim), cos_(max_positions, head_dim / 2), sin_(max_positions, head_dim / 2) {
    if (head_dim % 2 != 0) throw Error(Errc::InvalidConfig, "rotary head_dim must be even");
    for (Index pos = 0; pos < max_positions; ++pos) {
      for (Index i = 0; i < head_dim / 2; ++i) {
        const double angle =
            static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        cos_(pos, i) = static_cast<Scalar>(std::cos(angle));
        sin_(pos, i) = static_cast<Scalar>(std::sin(angle));
      }
    }
  }

  Index head_dim() const noexcept { return head_dim_; }
  Index max_positions() const noexcept { return cos_.rows(); }

  /// Rotates every head of x (rows x n_heads*head_dim) in place; row r sits at
  /// absolute position first_position + r. `inverse` applies the transpose,
  /// which is also the backward pass.
  void apply(Matrix<Scalar>& x, Index first_position, bool inverse = false) const {
    const Index pairs = head_dim_ / 2;
    const Index heads = x.cols() / head_dim_;
    for (Index r = 0; r < x.rows(); ++r) {
      const Index pos = first_position + r;
      if (pos < 0 || pos >= max_positions()) {
        throw Error(Errc::SeqTooLong, "rotary position " + std::to_string(pos) + " beyond table");
      }
      for (Index h = 0; h < heads; ++h) {
        Scalar* row = x.row(r).data() + h * head_dim_;
        for (Index i = 0; i < pairs; ++i) {
          const Scalar c = cos_(pos, i);
          const Scalar s = inverse ? -sin_(pos, i) : sin_(pos, i);
          const Scalar a = row[2 * i];
          const Scalar b = row[2 * i + 1];
          row[2 * i] = a * c - b * s;
          row[2 * i + 1] = a * s + b * c;
        }
      }
    }
  }

 private:
  Index head_dim_ = 0;
  Matrix<Scalar> cos_;
  Matrix<Scalar> sin_;
};

/// Free-function form of a rotary rotation at arbitrary positions.
template <typename Scalar>
Matrix<Scalar> rope(const Matrix<Scalar>& x, std::span<const Index> positions, double base = 10000.0) {
  const Index head_dim = x.cols();
  if (head_dim % 2 != 0) throw Error(Errc::InvalidConfig, "rope needs an even width");
  if (static_cast<Index>(positions.size()) != x.rows()) {
    throw Error(Errc::ShapeMismatch, "rope: one position per row required");
  }
  Matrix<Scalar> y = x;
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index i = 0; i < head_dim / 2; ++i) {
      const double angle = static_cast<double>(positions[static_cast<std::size_t>(r)]) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const Scalar c = static_cast<Scalar>(std::cos(angle));
      const Scalar s = static_cast<Scalar>(std::sin(angle));
      y(r, 2 * i) = x(r, 2 * i) * c - x(r, 2 * i + 1) * s;
      y(r, 2 * i + 1) = x(r, 2 * i) * s + x(r, 2 * i + 1) * c;
    }
  }
  return y;
}

}  // namespace ddec
