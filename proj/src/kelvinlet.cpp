#include "kreg/kelvinlet.hpp"

#include "kreg/parallel.hpp"

#include <cmath>
#include <numbers>

namespace kreg {

namespace {

void check_elastic(double E, double nu) {
  if (!(E > 0.0) || !std::isfinite(E)) throw Error("Young's modulus must be positive");
  if (nu >= 0.5) throw Error("incompressible limit unsupported (nu >= 0.5)");
  if (!(nu >= 0.0)) throw Error("Poisson's ratio must be in [0, 0.5)");
}

}  // namespace

ElasticParams::ElasticParams(double youngs_modulus, double poisson_ratio)
    : E_(youngs_modulus), nu_(poisson_ratio) {
  check_elastic(E_, nu_);
}

double ElasticParams::a() const { return (1.0 + nu_) / (2.0 * std::numbers::pi * E_); }

double ElasticParams::b() const { return a() / (4.0 * (1.0 - nu_)); }

KelvinletCoefficients elastic_coefficients(double E, double nu) {
  const ElasticParams p(E, nu);
  return {p.a(), p.b()};
}

Vec3 kelvinlet_displacement(const Vec3& r, const Vec3& f, const ElasticParams& params) {
  const double rn = r.norm();
  if (rn == 0.0) throw Error("Kelvinlet is singular at the load point");
  const double a = params.a();
  const double b = params.b();
  return ((a - b) / rn) * f + (b / (rn * rn * rn)) * r * r.dot(f);
}

double regularized_density(double r, double epsilon) {
  if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  const double re = std::sqrt(r * r + epsilon * epsilon);
  const double e2 = epsilon * epsilon;
  return 15.0 * e2 * e2 / (8.0 * std::numbers::pi) / std::pow(re, 7);
}

Vec3 regularized_kelvinlet(const Vec3& r, const KelvinletLoad& load, const ElasticParams& params) {
  const double eps = load.epsilon;
  if (!(eps > 0.0)) throw Error("epsilon must be positive");
  const double a = params.a();
  const double b = params.b();
  const double re = std::sqrt(r.squaredNorm() + eps * eps);
  const double re3 = re * re * re;
  const double diag = (a - b) / re + a * eps * eps / (2.0 * re3);
  return diag * load.f + (b / re3) * r * r.dot(load.f);
}

Eigen::VectorXd rk_basis_vector(const TetMesh& mesh, const KelvinletLoad& load,
                                const ElasticParams& params) {
  Eigen::VectorXd d(3 * mesh.num_nodes());
  for (Index m = 0; m < mesh.num_nodes(); ++m)
    d.segment<3>(3 * m) = regularized_kelvinlet(mesh.nodes[m] - load.x0, load, params);
  return d;
}

Eigen::MatrixXd build_rk_basis(const TetMesh& mesh, const ControlPointSet& cps, double epsilon,
                               const ElasticParams& params, int threads) {
  if (cps.size() == 0) throw Error("build_rk_basis: no control points");
  if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  const Index cols = 3 * cps.size();
  Eigen::MatrixXd J(3 * mesh.num_nodes(), cols);
  parallel_for(cols, threads, [&](Index c) {
    KelvinletLoad load;
    load.x0 = cps.positions[c / 3];
    load.f = Vec3::Unit(c % 3);
    load.epsilon = epsilon;
    J.col(c) = rk_basis_vector(mesh, load, params);
  });
  return J;
}

}  // namespace kreg
