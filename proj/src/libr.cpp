#include "kreg/libr.hpp"

#include "kreg/parallel.hpp"

#include <cmath>
#include <numbers>

namespace kreg {

std::string to_string(FeatureKind kind) {
  return kind == FeatureKind::corresponded_points ? "corresponded_points" : "surface_cloud";
}

FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "corresponded_points") return FeatureKind::corresponded_points;
  if (s == "surface_cloud") return FeatureKind::surface_cloud;
  throw Error("unknown feature kind '" + s + "'");
}

void FeatureData::validate() const {
  if (features.empty()) throw Error("feature data is empty");
  for (const Feature& f : features) {
    if (f.points.empty()) throw Error("feature '" + f.name + "' has no points");
    if (!std::isfinite(f.weight) || f.weight < 0.0) throw Error("feature '" + f.name + "' has an invalid weight");
    for (const Vec3& p : f.points)
      if (!p.allFinite()) throw Error("feature '" + f.name + "' has a non-finite point");
    if (f.kind == FeatureKind::corresponded_points && f.counterparts.size() != f.points.size())
      throw Error("feature '" + f.name + "': counterpart count does not match point count");
  }
}

Mat3 rotation_matrix(const Vec3& theta) {
  const Mat3 rx = Eigen::AngleAxisd(theta.x(), Vec3::UnitX()).toRotationMatrix();
  const Mat3 ry = Eigen::AngleAxisd(theta.y(), Vec3::UnitY()).toRotationMatrix();
  const Mat3 rz = Eigen::AngleAxisd(theta.z(), Vec3::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

Vec3 wrap_angles(const Vec3& theta) {
  constexpr double pi = std::numbers::pi;
  Vec3 out;
  for (int i = 0; i < 3; ++i) out[i] = theta[i] - 2.0 * pi * std::ceil((theta[i] - pi) / (2.0 * pi));
  return out;
}

std::vector<Vec3> apply_deformation(std::span<const Vec3> nodes, const Eigen::MatrixXd& J_u,
                                    const Eigen::VectorXd& alpha) {
  const Index m = static_cast<Index>(nodes.size());
  if (J_u.rows() != 3 * m || J_u.cols() != alpha.size())
    throw Error("apply_deformation: basis is " + std::to_string(J_u.rows()) + "x" + std::to_string(J_u.cols()) +
                " but there are " + std::to_string(m) + " nodes and " + std::to_string(alpha.size()) + " weights");
  const Eigen::VectorXd u = J_u * alpha;
  std::vector<Vec3> out(nodes.begin(), nodes.end());
  for (Index i = 0; i < m; ++i) out[i] += u.segment<3>(3 * i);
  return out;
}

std::vector<Vec3> apply_rigid(std::span<const Vec3> points, const Vec3& tau, const Vec3& theta,
                              const Vec3& centroid) {
  const Mat3 R = rotation_matrix(theta);
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(R * (p - centroid) + centroid + tau);
  return out;
}

double strain_energy(const Eigen::VectorXd& alpha, const Eigen::MatrixXd& gram, Index num_nodes) {
  if (gram.rows() != alpha.size() || gram.cols() != alpha.size())
    throw Error("strain_energy: gram matrix does not match alpha");
  return alpha.dot(gram * alpha) / (2.0 * static_cast<double>(num_nodes));
}

namespace {

Eigen::Matrix<double, 3, Eigen::Dynamic> interpolated_rows(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                                          const BarycentricHit& hit) {
  Eigen::Matrix<double, 3, Eigen::Dynamic> rows = Eigen::MatrixXd::Zero(3, J_u.cols());
  for (int a = 0; a < 4; ++a) rows += hit.weights[a] * J_u.middleRows<3>(3 * mesh.tets[hit.tet][a]);
  return rows;
}

BarycentricHit locate_counterpart(const TetMesh& mesh, const Feature& f, std::size_t i) {
  const auto hit = barycentric_locate(mesh, f.counterparts[i]);
  if (!hit)
    throw Error("feature '" + f.name + "': counterpart " + std::to_string(i) + " lies outside the mesh");
  return *hit;
}

}  // namespace

Eigen::VectorXd compute_residuals(const RegistrationState& state, const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                  const FeatureData& features) {
  if (mesh.boundary_tris.empty()) throw Error("compute_residuals: mesh has an empty surface");
  const Vec3 c = mesh.centroid();
  const std::vector<Vec3> moved = apply_rigid(apply_deformation(mesh.nodes, J_u, state.alpha), state.tau,
                                              state.theta, c);
  const Mat3 R = rotation_matrix(state.theta);
  const Eigen::VectorXd u = J_u * state.alpha;

  std::size_t n = 0;
  for (const Feature& f : features.features) n += f.points.size();
  Eigen::VectorXd r(static_cast<Index>(n));
  Index at = 0;
  std::optional<SurfaceBvh> bvh;
  for (const Feature& f : features.features) {
    if (f.kind == FeatureKind::surface_cloud) {
      if (!bvh) bvh.emplace(moved, mesh.boundary_tris);
      for (const Vec3& q : f.points) r[at++] = std::sqrt(bvh->closest(q).squared_distance);
    } else {
      for (std::size_t i = 0; i < f.points.size(); ++i) {
        const BarycentricHit hit = locate_counterpart(mesh, f, i);
        Vec3 x = Vec3::Zero();
        for (int a = 0; a < 4; ++a) {
          const int node = mesh.tets[hit.tet][a];
          x += hit.weights[a] * (mesh.nodes[node] + u.segment<3>(3 * node));
        }
        const Vec3 model = R * (x - c) + c + state.tau;
        r[at++] = (model - f.points[i]).norm();
      }
    }
  }
  return r;
}

double objective(const RegistrationState& state, const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                 const Eigen::MatrixXd& gram, const FeatureData& features, const RegistrationParams& params) {
  const Eigen::VectorXd r = compute_residuals(state, mesh, J_u, features);
  double omega = 0.0;
  Index at = 0;
  for (const Feature& f : features.features) {
    const double n = static_cast<double>(f.points.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < f.points.size(); ++i, ++at) sum += r[at] * r[at];
    omega += f.weight / n * sum;
  }
  const double fe = strain_energy(state.alpha, gram, mesh.num_nodes());
  return omega + params.w_E * fe * fe;
}

RegistrationProblem::RegistrationProblem(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                         const Eigen::MatrixXd& gram, const FeatureData& features,
                                         const RegistrationParams& params, Eigen::VectorXd fixed_alpha)
    : J_u_(J_u),
      gram_(gram),
      num_nodes_(mesh.num_nodes()),
      w_E_(params.w_E),
      fd_step_(params.fd_step),
      optimize_alpha_(params.optimize_alpha),
      fixed_alpha_(std::move(fixed_alpha)),
      centroid_(mesh.centroid()),
      threads_(params.threads) {
  features.validate();
  if (J_u.rows() != 3 * mesh.num_nodes()) throw Error("registration: basis rows do not match the mesh");
  if (gram.rows() != J_u.cols() || gram.cols() != J_u.cols())
    throw Error("registration: gram matrix does not match the basis");
  if (mesh.boundary_tris.empty()) throw Error("registration: mesh has an empty surface");
  if (fixed_alpha_.size() == 0) fixed_alpha_ = Eigen::VectorXd::Zero(J_u.cols());
  if (fixed_alpha_.size() != J_u.cols()) throw Error("registration: fixed alpha has the wrong length");

  surface_nodes_ = mesh.boundary_nodes();
  std::vector<int> local(mesh.nodes.size(), -1);
  for (std::size_t i = 0; i < surface_nodes_.size(); ++i) local[surface_nodes_[i]] = static_cast<int>(i);
  std::vector<Tri> tris;
  tris.reserve(mesh.boundary_tris.size());
  for (const Tri& t : mesh.boundary_tris) tris.push_back({local[t[0]], local[t[1]], local[t[2]]});
  surface_rows_.resize(3 * static_cast<Index>(surface_nodes_.size()), J_u.cols());
  for (std::size_t i = 0; i < surface_nodes_.size(); ++i) {
    surface_base_.push_back(mesh.nodes[surface_nodes_[i]]);
    surface_rows_.middleRows<3>(3 * static_cast<Index>(i)) = J_u.middleRows<3>(3 * surface_nodes_[i]);
  }
  surface_pos_ = surface_base_;
  bvh_ = SurfaceBvh(surface_base_, std::move(tris));

  for (const Feature& f : features.features) {
    FeatureBlock b;
    b.kind = f.kind;
    b.scale = std::sqrt(f.weight / static_cast<double>(f.points.size()));
    b.points = f.points;
    b.hints.assign(f.points.size(), -1);
    if (f.kind == FeatureKind::corresponded_points) {
      for (std::size_t i = 0; i < f.points.size(); ++i) {
        const BarycentricHit hit = locate_counterpart(mesh, f, i);
        CorrespondedPoint cp;
        cp.base = Vec3::Zero();
        for (int a = 0; a < 4; ++a) cp.base += hit.weights[a] * mesh.nodes[mesh.tets[hit.tet][a]];
        cp.rows = interpolated_rows(mesh, J_u, hit);
        b.counterparts.push_back(std::move(cp));
        b.current.push_back(b.counterparts.back().base);
      }
    }
    num_residuals_ += static_cast<Index>(f.points.size());
    blocks_.push_back(std::move(b));
  }
  num_residuals_ += 1;
  update_alpha(fixed_alpha_);
}

Index RegistrationProblem::num_parameters() const { return (optimize_alpha_ ? J_u_.cols() : 0) + 6; }

void RegistrationProblem::unpack(const Eigen::VectorXd& beta, Eigen::VectorXd& alpha, Vec3& tau,
                                 Vec3& theta) const {
  if (beta.size() != num_parameters()) throw Error("registration: parameter vector has the wrong length");
  const Index na = optimize_alpha_ ? J_u_.cols() : 0;
  alpha = optimize_alpha_ ? Eigen::VectorXd(beta.head(na)) : fixed_alpha_;
  tau = beta.segment<3>(na);
  theta = beta.segment<3>(na + 3);
}

void RegistrationProblem::update_alpha(const Eigen::VectorXd& alpha) {
  if (have_alpha_ && alpha.size() == alpha_.size() && alpha == alpha_) return;
  alpha_ = alpha;
  have_alpha_ = true;
  const Eigen::VectorXd du = surface_rows_ * alpha;
  for (std::size_t i = 0; i < surface_pos_.size(); ++i)
    surface_pos_[i] = surface_base_[i] + du.segment<3>(3 * static_cast<Index>(i));
  bvh_.refit(surface_pos_);
  for (FeatureBlock& b : blocks_)
    for (std::size_t i = 0; i < b.counterparts.size(); ++i)
      b.current[i] = b.counterparts[i].base + b.counterparts[i].rows * alpha;
  gram_alpha_ = gram_ * alpha;
  energy_ = alpha.dot(gram_alpha_) / (2.0 * static_cast<double>(num_nodes_));
}

void RegistrationProblem::evaluate(const SurfaceBvh& surface, Index col, double h, const Vec3& tau,
                                   const Vec3& theta, double energy, std::vector<std::vector<int>>* hints_out,
                                   Eigen::VectorXd& out) const {
  out.resize(num_residuals_);
  const Mat3 Rt = rotation_matrix(theta).transpose();
  Index at = 0;
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    const FeatureBlock& b = blocks_[bi];
    for (std::size_t i = 0; i < b.points.size(); ++i) {
      const Vec3 q = Rt * (b.points[i] - centroid_ - tau) + centroid_;
      double f;
      if (b.kind == FeatureKind::surface_cloud) {
        const ClosestPoint cp = surface.closest(q, b.hints[i]);
        if (hints_out) (*hints_out)[bi][i] = cp.triangle;
        f = std::sqrt(cp.squared_distance);
      } else {
        Vec3 x = b.current[i];
        if (col >= 0) x += h * b.counterparts[i].rows.col(col);
        f = (x - q).norm();
      }
      out[at++] = b.scale * f;
    }
  }
  out[at] = std::sqrt(w_E_) * energy;
}

Eigen::VectorXd RegistrationProblem::residuals(const Eigen::VectorXd& beta) {
  Eigen::VectorXd alpha;
  Vec3 tau, theta;
  unpack(beta, alpha, tau, theta);
  update_alpha(alpha);
  std::vector<std::vector<int>> hints(blocks_.size());
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) hints[bi] = blocks_[bi].hints;
  Eigen::VectorXd r;
  evaluate(bvh_, -1, 0.0, tau, theta, energy_, &hints, r);
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) blocks_[bi].hints = std::move(hints[bi]);
  return r;
}

Eigen::VectorXd RegistrationProblem::perturbed_residuals(const Eigen::VectorXd& beta, const Eigen::VectorXd&,
                                                         Index j, double h) {
  Eigen::VectorXd alpha;
  Vec3 tau, theta;
  unpack(beta, alpha, tau, theta);
  if (!have_alpha_ || alpha != alpha_) {
    // Only reached outside jacobian(); keeps the cached state consistent.
    Eigen::VectorXd b = beta;
    b[j] += h;
    return residuals(b);
  }
  Eigen::VectorXd r;
  const Index na = optimize_alpha_ ? J_u_.cols() : 0;
  if (j < na) {
    std::vector<Vec3> pos = surface_pos_;
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] += h * surface_rows_.block<3, 1>(3 * static_cast<Index>(i), j);
    SurfaceBvh shifted = bvh_;
    shifted.refit(pos);
    const double energy =
        energy_ + h * (2.0 * gram_alpha_[j] + h * gram_(j, j)) / (2.0 * static_cast<double>(num_nodes_));
    evaluate(shifted, j, h, tau, theta, energy, nullptr, r);
  } else {
    Vec3 t = tau, th = theta;
    if (j < na + 3)
      t[j - na] += h;
    else
      th[j - na - 3] += h;
    evaluate(bvh_, -1, 0.0, t, th, energy_, nullptr, r);
  }
  return r;
}

Eigen::MatrixXd RegistrationProblem::jacobian(const Eigen::VectorXd& beta, const Eigen::VectorXd& r0) {
  residuals(beta);  // refresh the cached alpha state and closest-triangle hints
  Eigen::MatrixXd J(r0.size(), num_parameters());
  parallel_for(num_parameters(), threads_, [&](Index j) {
    const double h = fd_step(j);
    J.col(j) = (perturbed_residuals(beta, r0, j, h) - r0) / h;
  });
  return J;
}

RegistrationResult register_to_features(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                        const Eigen::MatrixXd& gram, const FeatureData& features,
                                        const RegistrationParams& params,
                                        const std::optional<Eigen::VectorXd>& beta0) {
  const Index na = J_u.cols();
  Eigen::VectorXd full = beta0 ? *beta0 : Eigen::VectorXd::Zero(na + 6);
  if (full.size() != na + 6) throw Error("registration: beta0 must have length 3k + 6");

  RegistrationProblem problem(mesh, J_u, gram, features, params, full.head(na));
  const Eigen::VectorXd start = params.optimize_alpha ? full : Eigen::VectorXd(full.tail(6));

  LmOptions opt;
  opt.max_iterations = params.max_iterations;
  opt.termination_tol = params.termination_tol;
  opt.lambda0 = params.lambda0;
  opt.lambda_up = params.lambda_up;
  opt.lambda_down = params.lambda_down;
  const LmResult lm = levenberg_marquardt(problem, start, opt);

  RegistrationResult out;
  problem.unpack(lm.beta, out.state.alpha, out.state.tau, out.state.theta);
  out.state.theta = wrap_angles(out.state.theta);
  out.state.objective = lm.objective;
  out.state.iterations = lm.iterations;
  out.state.converged = lm.converged;
  out.state.objective_history = lm.history;

  out.displacement = J_u * out.state.alpha;
  out.deformed_nodes =
      apply_rigid(apply_deformation(mesh.nodes, J_u, out.state.alpha), out.state.tau, out.state.theta, mesh.centroid());

  const Eigen::VectorXd r = compute_residuals(out.state, mesh, J_u, features);
  Index at = 0;
  for (const Feature& f : features.features) {
    FeatureResidualSummary s;
    s.name = f.name;
    s.count = f.points.size();
    double sum = 0.0;
    for (std::size_t i = 0; i < f.points.size(); ++i, ++at) sum += r[at] * r[at];
    s.rms = std::sqrt(sum / static_cast<double>(s.count));
    out.feature_rms.push_back(s);
  }
  return out;
}

double objective_energy_weight(double w_E_per_pa2, const TetMesh& mesh) {
  const double per_node = static_cast<double>(mesh.num_nodes()) / mesh.volume();
  return w_E_per_pa2 * per_node * per_node;
}

RegistrationResult register_rigid_then_full(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                            const Eigen::MatrixXd& gram, const FeatureData& features,
                                            const RegistrationParams& params) {
  RegistrationParams rigid = params;
  rigid.optimize_alpha = false;
  const RegistrationResult first = register_to_features(mesh, J_u, gram, features, rigid);
  if (!params.optimize_alpha) return first;
  Eigen::VectorXd beta0 = Eigen::VectorXd::Zero(J_u.cols() + 6);
  beta0.segment<3>(J_u.cols()) = first.state.tau;
  beta0.segment<3>(J_u.cols() + 3) = first.state.theta;
  RegistrationResult out = register_to_features(mesh, J_u, gram, features, params, beta0);
  out.state.iterations += first.state.iterations;
  return out;
}

}  // namespace kreg
