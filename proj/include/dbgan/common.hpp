#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dbgan {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

//! Malformed input files, bad indices, unreadable paths.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

//! Invalid arguments or shape mismatches between tensors/layers.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

//! Operation applied outside its numeric domain (log of non-positive, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double normal01(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace dbgan
