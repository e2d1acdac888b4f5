#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "ddec/common.hpp"
#include "ddec/masks.hpp"

namespace ddec {

/// Attention output for one query set over one key set, together with the
/// log of each row's softmax denominator. Rows that see no key carry a zero
/// output and lse = -inf.
template <typename Scalar>
struct PartialAttention {
  Matrix<Scalar> output;
  Vector<Scalar> lse;
};

template <typename Scalar>
Scalar default_attention_scale(Index head_dim) {
  return Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
}

/// Masked scaled dot-product attention. `mask(t, s)` selects the keys visible
/// to query t; both BoolMatrix and the predicates in masks.hpp qualify. When
/// `probs` is given it receives the T_q x T_k softmax weights (zero where
/// hidden), which sdpa_backward consumes.
template <typename DerivedQ, typename DerivedK, typename DerivedV, typename Mask>
PartialAttention<typename DerivedQ::Scalar> sdpa(const Eigen::MatrixBase<DerivedQ>& q,
                                                 const Eigen::MatrixBase<DerivedK>& k,
                                                 const Eigen::MatrixBase<DerivedV>& v,
                                                 const Mask& mask, typename DerivedQ::Scalar scale,
                                                 Matrix<typename DerivedQ::Scalar>* probs = nullptr) {
  using Scalar = typename DerivedQ::Scalar;
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw Error(Errc::ShapeMismatch, "sdpa: q/k widths or k/v lengths disagree");
  }
  const Index tq = q.rows();
  const Index tk = k.rows();
  constexpr Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  Matrix<Scalar> weights = (q * k.transpose()) * scale;
  PartialAttention<Scalar> result{Matrix<Scalar>(tq, v.cols()), Vector<Scalar>(tq)};
  for (Index t = 0; t < tq; ++t) {
    Scalar row_max = neg_inf;
    for (Index s = 0; s < tk; ++s) {
      if (mask(t, s)) {
        row_max = std::max(row_max, weights(t, s));
      } else {
        weights(t, s) = neg_inf;
      }
    }
    if (row_max == neg_inf) {
      weights.row(t).setZero();
      result.lse(t) = neg_inf;
      continue;
    }
    Scalar denom = 0;
    for (Index s = 0; s < tk; ++s) {
      const Scalar e = weights(t, s) == neg_inf ? Scalar(0) : std::exp(weights(t, s) - row_max);
      weights(t, s) = e;
      denom += e;
    }
    weights.row(t) /= denom;
    result.lse(t) = row_max + std::log(denom);
  }
  result.output.noalias() = weights * v;
  if (probs) *probs = std::move(weights);
  return result;
}

template <typename Scalar>
struct SdpaGradients {
  Matrix<Scalar> dq;
  Matrix<Scalar> dk;
  Matrix<Scalar> dv;
};

/// Gradients of sdpa given upstream gradients for both the output and the
/// lse. `d_lse` may be empty when the lse was not used downstream.
template <typename DerivedQ, typename DerivedK, typename DerivedV>
SdpaGradients<typename DerivedQ::Scalar> sdpa_backward(
    const Eigen::MatrixBase<DerivedQ>& q, const Eigen::MatrixBase<DerivedK>& k,
    const Eigen::MatrixBase<DerivedV>& v, const Matrix<typename DerivedQ::Scalar>& probs,
    const Matrix<typename DerivedQ::Scalar>& output, const Matrix<typename DerivedQ::Scalar>& d_output,
    const Vector<typename DerivedQ::Scalar>& d_lse, typename DerivedQ::Scalar scale) {
  using Scalar = typename DerivedQ::Scalar;
  SdpaGradients<Scalar> g;
  g.dv.noalias() = probs.transpose() * d_output;
  Matrix<Scalar> d_scores = d_output * v.transpose();
  // d lse / d score = p, and d out / d score = p * (v - out).
  Vector<Scalar> row_dot = (d_output.array() * output.array()).rowwise().sum();
  if (d_lse.size() > 0) row_dot -= d_lse;
  d_scores = probs.array() * (d_scores.colwise() - row_dot).array();
  d_scores *= scale;
  g.dq.noalias() = d_scores * k;
  g.dk.noalias() = d_scores.transpose() * q;
  return g;
}

/// Per-row weight given to `a` by lse_merge; 1 when b is empty, 0 when a is.
/// Throws Errc::BothEmpty if some row has no keys in either source.
template <typename Scalar>
Vector<Scalar> lse_merge_weights(const Vector<Scalar>& lse_a, const Vector<Scalar>& lse_b) {
  constexpr Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  Vector<Scalar> w(lse_a.size());
  for (Index t = 0; t < lse_a.size(); ++t) {
    const Scalar la = lse_a(t);
    const Scalar lb = lse_b(t);
    if (la == neg_inf && lb == neg_inf) {
      throw Error(Errc::BothEmpty, "row " + std::to_string(t) + " has no visible keys");
    }
    if (lb == neg_inf) {
      w(t) = 1;
    } else if (la == neg_inf) {
      w(t) = 0;
    } else {
      const Scalar m = std::max(la, lb);
      const Scalar ea = std::exp(la - m);
      const Scalar eb = std::exp(lb - m);
      w(t) = ea / (ea + eb);
    }
  }
  return w;
}

/// Combines two partial attentions over disjoint key sets into the result of
/// a single softmax over their union.
template <typename Scalar>
Matrix<Scalar> lse_merge(const PartialAttention<Scalar>& a, const PartialAttention<Scalar>& b,
                         Vector<Scalar>* weight_a = nullptr) {
  if (a.output.rows() != b.output.rows() || a.output.cols() != b.output.cols() ||
      a.lse.size() != b.lse.size() || a.lse.size() != a.output.rows()) {
    throw Error(Errc::ShapeMismatch, "lse_merge: partial attentions disagree in shape");
  }
  Vector<Scalar> w = lse_merge_weights(a.lse, b.lse);
  Matrix<Scalar> merged(a.output.rows(), a.output.cols());
  for (Index t = 0; t < merged.rows(); ++t) {
    if (w(t) == Scalar(1)) {
      merged.row(t) = a.output.row(t);
    } else if (w(t) == Scalar(0)) {
      merged.row(t) = b.output.row(t);
    } else {
      merged.row(t) = w(t) * a.output.row(t) + (Scalar(1) - w(t)) * b.output.row(t);
    }
  }
  if (weight_a) *weight_a = std::move(w);
  return merged;
}

template <typename Scalar>
struct MergeGradients {
  Matrix<Scalar> d_output_a;
  Vector<Scalar> d_lse_a;
  Matrix<Scalar> d_output_b;
  Vector<Scalar> d_lse_b;
};

template <typename Scalar>
MergeGradients<Scalar> lse_merge_backward(const PartialAttention<Scalar>& a,
                                          const PartialAttention<Scalar>& b,
                                          const Vector<Scalar>& weight_a,
                                          const Matrix<Scalar>& merged,
                                          const Matrix<Scalar>& d_merged) {
  MergeGradients<Scalar> g;
  const Vector<Scalar> weight_b = Vector<Scalar>::Ones(weight_a.size()) - weight_a;
  g.d_output_a = weight_a.asDiagonal() * d_merged;
  g.d_output_b = weight_b.asDiagonal() * d_merged;
  g.d_lse_a = weight_a.array() * (d_merged.array() * (a.output - merged).array()).rowwise().sum();
  g.d_lse_b = weight_b.array() * (d_merged.array() * (b.output - merged).array()).rowwise().sum();
  return g;
}

template <typename Scalar>
struct DualKeyResult {
  Matrix<Scalar> output;
  Matrix<Scalar> self_weights;   // T x T softmax mass on self-keyed pairs
  Matrix<Scalar> cross_weights;  // T x T softmax mass on cross-keyed pairs
};

/// Reference dual-key attention: each query takes ONE softmax over the
/// concatenation of its visible self-keyed and cross-keyed logits. Written as
/// plain loops and shares no code with sdpa or lse_merge.
template <typename Scalar>
DualKeyResult<Scalar> dual_key_oracle(const Matrix<Scalar>& q, const Matrix<Scalar>& k_self,
                                      const Matrix<Scalar>& v_self, const Matrix<Scalar>& k_cross,
                                      const Matrix<Scalar>& v_cross, const AttentionMaskPair& masks,
                                      Scalar scale) {
  const Index T = q.rows();
  const Index dk = q.cols();
  const Index dv = v_self.cols();
  if (k_self.rows() != T || k_cross.rows() != T || v_self.rows() != T || v_cross.rows() != T ||
      k_self.cols() != dk || k_cross.cols() != dk || v_cross.cols() != dv ||
      masks.self_mask.rows() != T || masks.self_mask.cols() != T || masks.cross_mask.rows() != T ||
      masks.cross_mask.cols() != T) {
    throw Error(Errc::ShapeMismatch, "dual_key_oracle: operand shapes disagree");
  }
  DualKeyResult<Scalar> r{Matrix<Scalar>::Zero(T, dv), Matrix<Scalar>::Zero(T, T),
                          Matrix<Scalar>::Zero(T, T)};
  struct Entry {
    Index key;
    bool cross;
    Scalar logit;
  };
  std::vector<Entry> row;
  for (Index t = 0; t < T; ++t) {
    row.clear();
    for (Index s = 0; s < T; ++s) {
      for (int source = 0; source < 2; ++source) {
        const bool cross = source == 1;
        if (!(cross ? masks.cross_mask(t, s) : masks.self_mask(t, s))) continue;
        const Matrix<Scalar>& keys = cross ? k_cross : k_self;
        Scalar dot = 0;
        for (Index j = 0; j < dk; ++j) dot += q(t, j) * keys(s, j);
        row.push_back({s, cross, dot * scale});
      }
    }
    if (row.empty()) continue;
    Scalar m = row.front().logit;
    for (const auto& e : row) m = std::max(m, e.logit);
    Scalar z = 0;
    for (const auto& e : row) z += std::exp(e.logit - m);
    for (const auto& e : row) {
      const Scalar w = std::exp(e.logit - m) / z;
      const Matrix<Scalar>& values = e.cross ? v_cross : v_self;
      for (Index j = 0; j < dv; ++j) r.output(t, j) += w * values(e.key, j);
      (e.cross ? r.cross_weights : r.self_weights)(t, e.key) = w;
    }
  }
  return r;
}

}  // namespace ddec
