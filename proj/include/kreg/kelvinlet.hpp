#pragma once

#include "kreg/geometry.hpp"

#include <Eigen/Dense>

namespace kreg {

/// Isotropic linear-elastic constants. The Kelvinlet coefficients a and b
/// are derived on every access.
class ElasticParams {
 public:
  /// Throws Error unless E > 0 and 0 <= nu < 0.5.
  ElasticParams(double youngs_modulus, double poisson_ratio);

  double E() const { return E_; }
  double nu() const { return nu_; }
  /// (1 + nu) / (2 pi E)
  double a() const;
  /// a / (4 (1 - nu))
  double b() const;

 private:
  double E_;
  double nu_;
};

struct KelvinletLoad {
  Vec3 x0 = Vec3::Zero();
  Vec3 f = Vec3::Zero();
  double epsilon = 0.01;
};

struct KelvinletCoefficients {
  double a;
  double b;
};

KelvinletCoefficients elastic_coefficients(double E, double nu);

/// Singular point-load response; throws Error at r = 0.
Vec3 kelvinlet_displacement(const Vec3& r, const Vec3& f, const ElasticParams& params);

/// Normalized smoothing density 15 eps^4 / (8 pi r_eps^7).
double regularized_density(double r, double epsilon);

/// Regularized ("grab") Kelvinlet response at offset r = x - x0. Finite
/// everywhere, including r = 0.
Vec3 regularized_kelvinlet(const Vec3& r, const KelvinletLoad& load, const ElasticParams& params);

/// Response of every mesh node to `load`, stacked as [u(x_0); u(x_1); ...].
Eigen::VectorXd rk_basis_vector(const TetMesh& mesh, const KelvinletLoad& load,
                                const ElasticParams& params);

/// 3M x 3k displacement response matrix. Column 3i + d is the response to
/// a unit (1 N) force along axis d at control point i. Columns are filled
/// independently; `threads` > 1 splits them across worker threads with an
/// identical result.
Eigen::MatrixXd build_rk_basis(const TetMesh& mesh, const ControlPointSet& cps, double epsilon,
                               const ElasticParams& params, int threads = 1);

}  // namespace kreg
