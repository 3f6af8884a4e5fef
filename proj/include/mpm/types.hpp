#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpm {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// Fourth-order tensor acting on displacement gradients, stored as a 9x9
/// matrix with the flat index (i,j) -> 3*i + j for du_i/dx_j.
using Mat9 = Eigen::Matrix<double, 9, 9>;

inline constexpr int flat3(int i, int j) { return 3 * i + j; }

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct OutOfDomainError : std::runtime_error {
  explicit OutOfDomainError(const std::string& what) : std::runtime_error(what) {}
};

/// Recoverable numerical failure (element inversion, non-SPD stretch, NaN
/// residual). The time stepper reacts by halving the increment.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

struct MeshError : std::runtime_error {
  explicit MeshError(const std::string& what) : std::runtime_error(what) {}
};

struct IllConditioningError : std::runtime_error {
  IllConditioningError(const std::string& what, std::vector<int> suspect_elements)
      : std::runtime_error(what), elements(std::move(suspect_elements)) {}
  std::vector<int> elements;
};

}  // namespace mpm
