#include "kreg/fem.hpp"

#include "kreg/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace kreg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::array<Vec3, 4> tet_nodes(const TetMesh& mesh, Index e) {
  const Tet& t = mesh.tets[e];
  return {mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]], mesh.nodes[t[3]]};
}

std::vector<Index> node_dofs(std::span<const int> nodes) {
  std::vector<Index> dofs;
  dofs.reserve(nodes.size() * 3);
  for (int n : nodes)
    for (int a = 0; a < 3; ++a) dofs.push_back(3 * static_cast<Index>(n) + a);
  std::sort(dofs.begin(), dofs.end());
  dofs.erase(std::unique(dofs.begin(), dofs.end()), dofs.end());
  return dofs;
}

Eigen::VectorXd tile_load(const std::vector<int>& tile, const std::vector<double>& area, const Vec3& force,
                          Index ndofs) {
  double total = 0.0;
  for (int n : tile) total += area[n];
  Eigen::VectorXd g = Eigen::VectorXd::Zero(ndofs);
  for (int n : tile) {
    const double w = total > 0.0 ? area[n] / total : 1.0 / static_cast<double>(tile.size());
    g.segment<3>(3 * static_cast<Index>(n)) += w * force;
  }
  return g;
}

std::vector<int> control_tile(const TetMesh& mesh, const ControlPointSet& cps, int index) {
  const std::vector<int> candidates = mesh.patch_nodes(cps.source_patch);
  std::vector<int> tile = voronoi_tile(mesh, cps, index, candidates);
  if (tile.empty()) {
    std::ostringstream msg;
    msg << "empty Voronoi tile for control point " << index;
    throw Error(msg.str());
  }
  return tile;
}

std::vector<int> other_control_nodes(const ControlPointSet& cps, int index) {
  std::vector<int> out;
  for (Index j = 0; j < cps.size(); ++j)
    if (j != index) out.push_back(cps.nearest_node[j]);
  return out;
}

}  // namespace

MaterialMatrix isotropic_material_matrix(double E, double nu) {
  if (!(E > 0.0)) throw Error("Young's modulus must be positive");
  if (nu >= 0.5) throw Error("incompressible limit unsupported (nu >= 0.5)");
  if (!(nu >= 0.0)) throw Error("Poisson's ratio must be in [0, 0.5)");
  MaterialMatrix m;
  m.E = E;
  m.nu = nu;
  m.lambda = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
  m.mu = E / (2.0 * (1.0 + nu));
  m.D.setZero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m.D(i, j) = m.lambda;
    m.D(i, i) = m.lambda + 2.0 * m.mu;
    m.D(i + 3, i + 3) = m.mu;
  }
  return m;
}

ElementStrain element_b_matrix(const std::array<Vec3, 4>& x, Index tet_id) {
  Mat3 J;
  J.col(0) = x[1] - x[0];
  J.col(1) = x[2] - x[0];
  J.col(2) = x[3] - x[0];
  const double vol = J.determinant() / 6.0;
  if (!(vol >= 1e-15)) {
    std::ostringstream msg;
    msg << "degenerate tet " << tet_id << " (volume " << vol << " m^3)";
    throw Error(msg.str());
  }
  // Rows of J^-1 are the gradients of the barycentric coordinates 1..3.
  const Mat3 Jinv = J.inverse();
  std::array<Vec3, 4> grad;
  grad[1] = Jinv.row(0).transpose();
  grad[2] = Jinv.row(1).transpose();
  grad[3] = Jinv.row(2).transpose();
  grad[0] = -(grad[1] + grad[2] + grad[3]);

  ElementStrain out;
  out.volume = vol;
  out.B.setZero();
  for (int i = 0; i < 4; ++i) {
    const Vec3& g = grad[i];
    const int c = 3 * i;
    out.B(0, c) = g.x();
    out.B(1, c + 1) = g.y();
    out.B(2, c + 2) = g.z();
    out.B(3, c) = g.y();
    out.B(3, c + 1) = g.x();
    out.B(4, c + 1) = g.z();
    out.B(4, c + 2) = g.y();
    out.B(5, c) = g.z();
    out.B(5, c + 2) = g.x();
  }
  return out;
}

ElementStrainOperator build_strain_operator(const TetMesh& mesh) {
  ElementStrainOperator op;
  op.B.resize(mesh.tets.size());
  op.volume.resize(mesh.tets.size());
  for (Index e = 0; e < mesh.num_tets(); ++e) {
    const ElementStrain es = element_b_matrix(tet_nodes(mesh, e), e);
    op.B[e] = es.B;
    op.volume[e] = es.volume;
  }
  return op;
}

StiffnessSystem assemble_stiffness(const TetMesh& mesh, const MaterialMatrix& material) {
  const Index M = mesh.num_nodes();
  const Index ndofs = 3 * M;

  // Node adjacency gives the block sparsity pattern.
  std::vector<std::vector<int>> adj(M);
  for (const auto& t : mesh.tets)
    for (int a : t)
      for (int b : t) adj[a].push_back(b);
  for (auto& nb : adj) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }

  SparseMatrix K(ndofs, ndofs);
  Eigen::VectorXi sizes(ndofs);
  for (Index n = 0; n < M; ++n)
    for (int a = 0; a < 3; ++a) sizes[3 * n + a] = static_cast<int>(3 * adj[n].size());
  K.reserve(sizes);
  for (Index n = 0; n < M; ++n)
    for (int b = 0; b < 3; ++b)
      for (int m : adj[n])
        for (int a = 0; a < 3; ++a) K.insert(3 * m + a, 3 * n + b) = 0.0;
  K.makeCompressed();

  double* values = K.valuePtr();
  const int* outer = K.outerIndexPtr();
  for (Index e = 0; e < mesh.num_tets(); ++e) {
    const ElementStrain es = element_b_matrix(tet_nodes(mesh, e), e);
    Eigen::Matrix<double, 12, 12> Ke = es.volume * (es.B.transpose() * material.D * es.B);
    for (int i = 0; i < 12; ++i)
      for (int j = i + 1; j < 12; ++j) Ke(j, i) = Ke(i, j);
    const Tet& t = mesh.tets[e];
    for (int q = 0; q < 4; ++q) {
      const auto& nb = adj[t[q]];
      for (int p = 0; p < 4; ++p) {
        const auto slot = std::lower_bound(nb.begin(), nb.end(), t[p]) - nb.begin();
        for (int b = 0; b < 3; ++b) {
          double* col = values + outer[3 * t[q] + b] + 3 * slot;
          for (int a = 0; a < 3; ++a) col[a] += Ke(3 * p + a, 3 * q + b);
        }
      }
    }
  }

  StiffnessSystem sys;
  sys.K = std::move(K);
  sys.loads = Eigen::VectorXd::Zero(ndofs);
  return sys;
}

bool constraints_remove_rigid_modes(std::span<const Index> constrained_dofs, std::span<const Vec3> nodes) {
  if (constrained_dofs.empty()) return false;
  Vec3 c = Vec3::Zero();
  std::set<Index> cnodes;
  for (Index d : constrained_dofs) cnodes.insert(d / 3);
  for (Index n : cnodes) c += nodes[n];
  c /= static_cast<double>(cnodes.size());
  double scale = 0.0;
  for (Index n : cnodes) scale = std::max(scale, (nodes[n] - c).norm());
  if (scale == 0.0) scale = 1.0;

  // Gram matrix of the six rigid modes restricted to the constrained dofs.
  Matrix6 G = Matrix6::Zero();
  for (Index d : constrained_dofs) {
    const int axis = static_cast<int>(d % 3);
    const Vec3 r = (nodes[d / 3] - c) / scale;
    Eigen::Matrix<double, 6, 1> m;
    for (int a = 0; a < 3; ++a) {
      m[a] = (a == axis) ? 1.0 : 0.0;
      m[3 + a] = Vec3::Unit(a).cross(r)[axis];
    }
    G += m * m.transpose();
  }
  const Eigen::SelfAdjointEigenSolver<Matrix6> eig(G);
  const auto ev = eig.eigenvalues();
  return ev.minCoeff() > 1e-10 * std::max(ev.maxCoeff(), 1e-300);
}

ConstrainedSolver::ConstrainedSolver(const SparseMatrix& K, std::vector<Index> constrained_dofs,
                                     std::span<const Vec3> nodes)
    : K_(K), constrained_(std::move(constrained_dofs)), mask_(K.rows(), 0) {
  std::sort(constrained_.begin(), constrained_.end());
  constrained_.erase(std::unique(constrained_.begin(), constrained_.end()), constrained_.end());
  for (Index d : constrained_) {
    if (d < 0 || d >= K.rows()) throw Error("constrained dof out of range");
    mask_[d] = 1;
  }
  if (!constraints_remove_rigid_modes(constrained_, nodes))
    throw NumericalError("under-constrained system: Dirichlet set leaves a rigid-body mode free");

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(K.nonZeros());
  for (Index j = 0; j < K.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(K, j); it; ++it) {
      if (mask_[it.row()] || mask_[j]) continue;
      trips.emplace_back(it.row(), j, it.value());
    }
  }
  for (Index d : constrained_) trips.emplace_back(d, d, 1.0);
  SparseMatrix A(K.rows(), K.cols());
  A.setFromTriplets(trips.begin(), trips.end());
  llt_.compute(A);
  if (llt_.info() != Eigen::Success)
    throw NumericalError("under-constrained system: stiffness is not positive definite after constraints");
}

Eigen::VectorXd ConstrainedSolver::solve_eliminated(const Eigen::VectorXd& rhs) const {
  return llt_.solve(rhs);
}

DisplacementSolution ConstrainedSolver::solve(const Eigen::VectorXd& loads,
                                              const std::map<Index, double>& prescribed) const {
  const Index n = K_.rows();
  if (loads.size() != n) throw Error("load vector has wrong length");
  Eigen::VectorXd uc = Eigen::VectorXd::Zero(n);
  for (const auto& [dof, value] : prescribed) {
    if (dof < 0 || dof >= n || !mask_[dof]) throw Error("prescribed value on an unconstrained dof");
    uc[dof] = value;
  }
  const Eigen::VectorXd lift = K_ * uc;
  Eigen::VectorXd rhs(n);
  for (Index i = 0; i < n; ++i) rhs[i] = mask_[i] ? uc[i] : loads[i] - lift[i];

  DisplacementSolution sol;
  sol.u = llt_.solve(rhs);
  for (Index d : constrained_) sol.u[d] = uc[d];

  const Eigen::VectorXd Ku = K_ * sol.u;
  double res2 = 0.0;
  double ref2 = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (mask_[i]) continue;
    res2 += (Ku[i] - loads[i]) * (Ku[i] - loads[i]);
    ref2 += rhs[i] * rhs[i];
  }
  sol.relative_residual = ref2 > 0.0 ? std::sqrt(res2 / ref2) : std::sqrt(res2);
  if (!std::isfinite(sol.relative_residual) || sol.relative_residual > 1e-8) {
    std::ostringstream msg;
    msg << "linear solve residual " << sol.relative_residual << " exceeds 1e-8";
    throw NumericalError(msg.str());
  }
  for (Index d : constrained_) sol.reactions[d] = Ku[d] - loads[d];
  return sol;
}

DisplacementSolution solve_displacement(const StiffnessSystem& system, std::span<const Vec3> nodes) {
  std::vector<Index> dofs;
  dofs.reserve(system.dirichlet.size());
  for (const auto& [dof, value] : system.dirichlet) dofs.push_back(dof);
  const ConstrainedSolver solver(system.K, dofs, nodes);
  const Eigen::VectorXd loads =
      system.loads.size() == 0 ? Eigen::VectorXd::Zero(system.K.rows()) : system.loads;
  return solver.solve(loads, system.dirichlet);
}

PerturbRelaxStages perturb_and_relax_stages(const TetMesh& mesh, const ControlPointSet& cps, int index,
                                           int axis, const MaterialMatrix& material, double magnitude) {
  if (index < 0 || index >= cps.size()) throw Error("control point index out of range");
  if (axis < 0 || axis > 2) throw Error("axis must be 0, 1 or 2");
  const StiffnessSystem sys = assemble_stiffness(mesh, material);
  const Index ndofs = sys.K.rows();
  const int node = cps.nearest_node[index];

  PerturbRelaxStages out;
  out.tile = control_tile(mesh, cps, index);

  const std::vector<int> others = other_control_nodes(cps, index);
  std::vector<int> all_nodes = others;
  all_nodes.push_back(node);

  const ConstrainedSolver stage1(sys.K, node_dofs(all_nodes), mesh.nodes);
  std::map<Index, double> prescribed;
  for (Index d : stage1.constrained_dofs()) prescribed[d] = 0.0;
  prescribed[3 * static_cast<Index>(node) + axis] = magnitude;
  const DisplacementSolution s1 = stage1.solve(Eigen::VectorXd::Zero(ndofs), prescribed);
  out.perturbed = s1.u;
  for (int a = 0; a < 3; ++a) out.reaction[a] = s1.reactions.at(3 * static_cast<Index>(node) + a);

  const ConstrainedSolver stage2(sys.K, node_dofs(others), mesh.nodes);
  const Eigen::VectorXd g = tile_load(out.tile, lumped_boundary_area(mesh), out.reaction, ndofs);
  std::map<Index, double> fixed;
  for (Index d : stage2.constrained_dofs()) fixed[d] = 0.0;
  out.relaxed = stage2.solve(g, fixed).u;
  return out;
}

Eigen::VectorXd perturb_and_relax(const TetMesh& mesh, const ControlPointSet& cps, int index, int axis,
                                  const MaterialMatrix& material, double magnitude) {
  return perturb_and_relax_stages(mesh, cps, index, axis, material, magnitude).relaxed;
}

Eigen::MatrixXd build_fem_basis(const TetMesh& mesh, const ControlPointSet& cps,
                                const MaterialMatrix& material, double magnitude, int threads,
                                FemTimings* timings) {
  if (cps.size() == 0) throw Error("build_fem_basis: no control points");
  if (!(magnitude > 0.0)) throw Error("perturbation magnitude must be positive");
  FemTimings local;
  auto t0 = Clock::now();
  const StiffnessSystem sys = assemble_stiffness(mesh, material);
  local.assembly = seconds_since(t0);
  const SparseMatrix& K = sys.K;
  const Index ndofs = K.rows();

  t0 = Clock::now();
  const ConstrainedSolver stage1(K, node_dofs(cps.nearest_node), mesh.nodes);
  local.factorization = seconds_since(t0);

  const std::vector<double> area = lumped_boundary_area(mesh);
  const std::vector<int> candidates = mesh.patch_nodes(cps.source_patch);

  // Stage 2 of every control point keeps the others fixed; check up front.
  for (Index i = 0; i < cps.size(); ++i) {
    if (!constraints_remove_rigid_modes(node_dofs(other_control_nodes(cps, static_cast<int>(i))), mesh.nodes))
      throw NumericalError("under-constrained system: relaxing a control point leaves rigid modes free");
  }

  Eigen::MatrixXd J(ndofs, 3 * cps.size());
  t0 = Clock::now();
  parallel_for(cps.size(), threads, [&](Index i) {
    const Index base = 3 * static_cast<Index>(cps.nearest_node[i]);
    std::vector<int> tile = voronoi_tile(mesh, cps, static_cast<int>(i), candidates);
    if (tile.empty()) {
      std::ostringstream msg;
      msg << "empty Voronoi tile for control point " << i;
      throw Error(msg.str());
    }

    // b: columns of K at the released dofs, restricted to Stage-1 free rows.
    Eigen::Matrix<double, Eigen::Dynamic, 3> b = Eigen::MatrixXd::Zero(ndofs, 3);
    Mat3 Kpp = Mat3::Zero();
    for (int d = 0; d < 3; ++d) {
      for (SparseMatrix::InnerIterator it(K, base + d); it; ++it) {
        if (stage1.is_constrained(it.row())) {
          if (it.row() >= base && it.row() < base + 3) Kpp(it.row() - base, d) = it.value();
          continue;
        }
        b(it.row(), d) = it.value();
      }
    }
    Eigen::Matrix<double, Eigen::Dynamic, 3> Z(ndofs, 3);
    for (int d = 0; d < 3; ++d) Z.col(d) = stage1.solve_eliminated(b.col(d));
    const Mat3 S = Kpp - b.transpose() * Z;
    const Eigen::LDLT<Mat3> Sfac(S);

    for (int axis = 0; axis < 3; ++axis) {
      // Stage-1 reaction at the perturbed node for displacement magnitude * e_axis.
      const Vec3 reaction = magnitude * S.col(axis);
      Eigen::VectorXd g = tile_load(tile, area, reaction, ndofs);
      const Vec3 h = g.segment<3>(base);
      for (Index d : stage1.constrained_dofs()) g[d] = 0.0;
      const Eigen::VectorXd w = stage1.solve_eliminated(g);
      const Vec3 y = Sfac.solve(h - b.transpose() * w);
      Eigen::VectorXd u = w - Z * y;
      u.segment<3>(base) = y;
      J.col(3 * i + axis) = u / magnitude;
    }
  });
  local.column_solves = seconds_since(t0);
  local.columns = J.cols();
  if (timings) *timings = local;
  return J;
}

ResponseMatrices response_matrices(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                   const MaterialMatrix& material) {
  if (J_u.rows() != 3 * mesh.num_nodes()) throw Error("response_matrices: J_u row count must be 3M");
  const Index T = mesh.num_tets();
  const Index cols = J_u.cols();
  ResponseMatrices out;
  out.strain.resize(6 * T, cols);
  out.stress.resize(6 * T, cols);
  Eigen::Matrix<double, 12, Eigen::Dynamic> U(12, cols);
  for (Index e = 0; e < T; ++e) {
    const ElementStrain es = element_b_matrix(tet_nodes(mesh, e), e);
    const Tet& t = mesh.tets[e];
    for (int v = 0; v < 4; ++v) U.middleRows<3>(3 * v) = J_u.middleRows<3>(3 * static_cast<Index>(t[v]));
    out.strain.middleRows<6>(6 * e).noalias() = std::sqrt(es.volume) * es.B * U;
    out.stress.middleRows<6>(6 * e).noalias() = material.D * out.strain.middleRows<6>(6 * e);
  }
  out.gram.noalias() = out.strain.transpose() * out.stress;
  return out;
}

Eigen::MatrixXd energy_gram(const SparseMatrix& K, const Eigen::MatrixXd& J_u) {
  if (K.rows() != J_u.rows()) throw Error("energy_gram: dimension mismatch");
  const Eigen::MatrixXd KJ = K * J_u;
  Eigen::MatrixXd G = J_u.transpose() * KJ;
  return G;
}

}  // namespace kreg
