#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace kreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Eigen::Index;

/// Invalid input, violated precondition, or malformed file.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical method failed (singular system, non-finite residuals).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace kreg
