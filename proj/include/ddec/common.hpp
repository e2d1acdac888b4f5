#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ddec {

using Index = Eigen::Index;
using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

// Row-major throughout: rows are sequence positions, columns are features.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixRef = Eigen::Ref<Matrix<Scalar>, 0, Eigen::OuterStride<>>;

template <typename Scalar>
using ConstMatrixRef = Eigen::Ref<const Matrix<Scalar>, 0, Eigen::OuterStride<>>;

// (query row, key column); true means the key is visible to the query.
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Errc {
  NonMonotonic,
  BadEndpoints,
  Empty,
  OutOfRange,
  Infeasible,
  BadBreakpoint,
  ShapeMismatch,
  BothEmpty,
  IdOutOfRange,
  SeqTooLong,
  EmptyMask,
  UnclassifiedParameter,
  NonFiniteLoss,
  PrefixMismatch,
  CacheExhausted,
  InvalidConfig,
  FileNotFound,
  Io,
  BadFormat,
  CheckpointMismatch,
  OutOfScope,
  EmptyGrid,
};

const char* to_string(Errc code) noexcept;

// Process exit status used by the CLI for each error class.
int exit_code(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace ddec
