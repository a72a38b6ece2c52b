#pragma once

#include <Eigen/Dense>

#include <stdexcept>

namespace relsync {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatX<double>;
using Vec = VecX<double>;
using Index = Eigen::Index;

/// A matrix expected to be symmetric positive definite was not. In this
/// library that almost always means a controllability or observability
/// assumption failed upstream.
struct NotSpdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The tau threshold search exhausted its grid without certifying stability.
struct NoThresholdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Random array generation kept producing arrays that fail the rank tests.
struct GenerationFailedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A simulation state stopped being finite (or exceeded the norm guard).
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace relsync
