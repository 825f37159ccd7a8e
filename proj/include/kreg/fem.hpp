#pragma once

#include "kreg/geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/CholmodSupport>
#include <Eigen/SparseCore>

#include <map>
#include <vector>

namespace kreg {

using SparseMatrix = Eigen::SparseMatrix<double>;
using Matrix6 = Eigen::Matrix<double, 6, 6>;
using StrainMatrix = Eigen::Matrix<double, 6, 12>;

/// Isotropic Hooke matrix in Voigt order (xx, yy, zz, xy, yz, zx) with
/// engineering shear strains.
struct MaterialMatrix {
  Matrix6 D;
  double E;
  double nu;
  double lambda;
  double mu;
};

MaterialMatrix isotropic_material_matrix(double E, double nu);

struct ElementStrain {
  StrainMatrix B;
  double volume;
};

/// Constant strain-displacement matrix of a linear tet. Nodal dof order is
/// (x0, y0, z0, x1, ...). Throws Error (with `tet_id`) when the volume is
/// below 1e-15 m^3.
ElementStrain element_b_matrix(const std::array<Vec3, 4>& x, Index tet_id = -1);

struct ElementStrainOperator {
  std::vector<StrainMatrix> B;
  std::vector<double> volume;
};

ElementStrainOperator build_strain_operator(const TetMesh& mesh);

struct StiffnessSystem {
  SparseMatrix K;
  std::map<Index, double> dirichlet;  // dof -> prescribed displacement (m)
  Eigen::VectorXd loads;              // nodal forces (N)
};

/// Sum over tets of vol * B^T D B scattered into a 3M x 3M matrix; each
/// element block is symmetrized before scattering so K is exactly symmetric.
StiffnessSystem assemble_stiffness(const TetMesh& mesh, const MaterialMatrix& material);

struct DisplacementSolution {
  Eigen::VectorXd u;
  std::map<Index, double> reactions;  // constrained dof -> reaction force (N)
  double relative_residual = 0.0;
};

/// Factorization of K with a fixed set of Dirichlet dofs removed by
/// symmetric elimination (zeroed rows/columns, unit diagonal). Reusable for
/// any right-hand side and prescribed values on that dof set. Holds a
/// reference to K.
class ConstrainedSolver {
 public:
  /// Throws NumericalError("under-constrained system") when the dof set
  /// leaves a rigid-body mode free or the factorization fails.
  ConstrainedSolver(const SparseMatrix& K, std::vector<Index> constrained_dofs,
                    std::span<const Vec3> nodes);

  DisplacementSolution solve(const Eigen::VectorXd& loads,
                             const std::map<Index, double>& prescribed) const;
  /// Solve with the eliminated matrix directly; constrained entries of rhs
  /// pass through unchanged.
  Eigen::VectorXd solve_eliminated(const Eigen::VectorXd& rhs) const;

  bool is_constrained(Index dof) const { return mask_[dof] != 0; }
  const std::vector<Index>& constrained_dofs() const { return constrained_; }

 private:
  const SparseMatrix& K_;
  std::vector<Index> constrained_;
  std::vector<char> mask_;
  Eigen::CholmodSupernodalLLT<SparseMatrix, Eigen::Lower> llt_;
};

/// True when the constrained dofs suppress all six rigid-body modes.
bool constraints_remove_rigid_modes(std::span<const Index> constrained_dofs,
                                    std::span<const Vec3> nodes);

DisplacementSolution solve_displacement(const StiffnessSystem& system, std::span<const Vec3> nodes);

struct PerturbRelaxStages {
  Eigen::VectorXd perturbed;  // Stage 1: Dirichlet-perturbed control node
  Eigen::VectorXd relaxed;    // Stage 2: reaction redistributed over the tile
  Vec3 reaction;
  std::vector<int> tile;
};

/// Reference two-stage construction for one control point and axis, using
/// two independent factorizations. The tile is taken over the boundary nodes
/// of cps.source_patch.
PerturbRelaxStages perturb_and_relax_stages(const TetMesh& mesh, const ControlPointSet& cps, int index,
                                           int axis, const MaterialMatrix& material, double magnitude);

Eigen::VectorXd perturb_and_relax(const TetMesh& mesh, const ControlPointSet& cps, int index, int axis,
                                  const MaterialMatrix& material, double magnitude);

struct FemTimings {
  double assembly = 0.0;
  double factorization = 0.0;
  double column_solves = 0.0;
  Index columns = 0;
};

/// 3M x 3k FEM displacement basis, column order as build_rk_basis, each
/// column divided by `magnitude`. One factorization of the Stage-1 system is
/// shared by all columns; releasing a control node in Stage 2 is handled by
/// a 3x3 Schur complement on that factorization.
Eigen::MatrixXd build_fem_basis(const TetMesh& mesh, const ControlPointSet& cps,
                                const MaterialMatrix& material, double magnitude = 1e-3,
                                int threads = 1, FemTimings* timings = nullptr);

/// Per-element, sqrt(volume)-weighted strain and stress responses of a
/// displacement basis (6T x 3k each) and their Gram matrix strain^T stress.
struct ResponseMatrices {
  Eigen::MatrixXd strain;
  Eigen::MatrixXd stress;
  Eigen::MatrixXd gram;
};

ResponseMatrices response_matrices(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                   const MaterialMatrix& material);

/// J_u^T K J_u. Equals strain^T stress of response_matrices for linear tets
/// without materializing the 6T-row matrices.
Eigen::MatrixXd energy_gram(const SparseMatrix& K, const Eigen::MatrixXd& J_u);

}  // namespace kreg
