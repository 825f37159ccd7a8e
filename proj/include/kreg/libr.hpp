#pragma once

#include "kreg/geometry.hpp"
#include "kreg/lm.hpp"
#include "kreg/spatial.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace kreg {

enum class FeatureKind { corresponded_points, surface_cloud };

std::string to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& s);

/// One sparse data feature in data (physical) space. For corresponded
/// points, `counterparts[i]` is the undeformed model-space location paired
/// with `points[i]`.
struct Feature {
  std::string name;
  FeatureKind kind = FeatureKind::surface_cloud;
  double weight = 1.0;
  std::vector<Vec3> points;
  std::vector<Vec3> counterparts;
};

struct FeatureData {
  std::vector<Feature> features;

  /// Throws Error on empty features, non-finite weights or mismatched
  /// counterpart lists.
  void validate() const;
};

struct RegistrationParams {
  double w_E = 1e-8;  // strain-energy weight (Pa^-2)
  int max_iterations = 200;
  double termination_tol = 1e-12;
  double lambda0 = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 0.1;
  double fd_step = 1e-6;
  /// false fits only the rigid part (alpha held at beta0).
  bool optimize_alpha = true;
  int threads = 1;
};

struct RegistrationState {
  Eigen::VectorXd alpha;
  Vec3 tau = Vec3::Zero();
  Vec3 theta = Vec3::Zero();  // extrinsic XYZ Euler angles (rad), about the model centroid
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective_history;
};

/// Extrinsic X-then-Y-then-Z rotation: Rz * Ry * Rx.
Mat3 rotation_matrix(const Vec3& theta);
/// Wraps each component into (-pi, pi].
Vec3 wrap_angles(const Vec3& theta);

/// x_m + (J_u alpha)_m for every node.
std::vector<Vec3> apply_deformation(std::span<const Vec3> nodes, const Eigen::MatrixXd& J_u,
                                    const Eigen::VectorXd& alpha);

/// R(theta) (p - centroid) + centroid + tau.
std::vector<Vec3> apply_rigid(std::span<const Vec3> points, const Vec3& tau, const Vec3& theta,
                              const Vec3& centroid);

/// (1 / 2M) alpha^T gram alpha, with gram = J_strain^T J_stress.
double strain_energy(const Eigen::VectorXd& alpha, const Eigen::MatrixXd& gram, Index num_nodes);

/// Unweighted model-data errors f_i, feature by feature in input order.
/// Transforms the whole mesh and searches the transformed boundary.
Eigen::VectorXd compute_residuals(const RegistrationState& state, const TetMesh& mesh,
                                  const Eigen::MatrixXd& J_u, const FeatureData& features);

/// sum_F (w_F / N_F) sum_i f_i^2 + w_E f_E^2
double objective(const RegistrationState& state, const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                 const Eigen::MatrixXd& gram, const FeatureData& features, const RegistrationParams& params);

/// The stacked weighted residual of the objective over beta = [alpha, tau,
/// theta]. Data points are pulled back into the deformed model frame by the
/// inverse rigid transform, so rigid perturbations reuse the surface
/// hierarchy and single-mode perturbations only shift it by one column.
class RegistrationProblem final : public LeastSquaresProblem {
 public:
  RegistrationProblem(const TetMesh& mesh, const Eigen::MatrixXd& J_u, const Eigen::MatrixXd& gram,
                      const FeatureData& features, const RegistrationParams& params,
                      Eigen::VectorXd fixed_alpha = {});

  Index num_parameters() const override;
  double fd_step(Index) const override { return fd_step_; }
  Eigen::VectorXd residuals(const Eigen::VectorXd& beta) override;
  Eigen::VectorXd perturbed_residuals(const Eigen::VectorXd& beta, const Eigen::VectorXd& r0, Index j,
                                      double h) override;
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& beta, const Eigen::VectorXd& r0) override;

  Index num_alpha() const { return J_u_.cols(); }
  Index num_residuals() const { return num_residuals_; }
  /// Split beta into (alpha, tau, theta).
  void unpack(const Eigen::VectorXd& beta, Eigen::VectorXd& alpha, Vec3& tau, Vec3& theta) const;

 private:
  struct CorrespondedPoint {
    Vec3 base;
    Eigen::Matrix<double, 3, Eigen::Dynamic> rows;
  };
  struct FeatureBlock {
    FeatureKind kind;
    double scale;  // sqrt(w_F / N_F)
    std::vector<Vec3> points;
    std::vector<CorrespondedPoint> counterparts;
    std::vector<Vec3> current;  // counterparts at the cached alpha
    std::vector<int> hints;
  };

  void update_alpha(const Eigen::VectorXd& alpha);
  /// Residuals at the cached alpha shifted by h along alpha column `col`
  /// (col < 0: no shift) with the given rigid part.
  void evaluate(const SurfaceBvh& surface, Index col, double h, const Vec3& tau, const Vec3& theta,
                double energy, std::vector<std::vector<int>>* hints_out, Eigen::VectorXd& out) const;

  const Eigen::MatrixXd& J_u_;
  const Eigen::MatrixXd& gram_;
  Index num_nodes_;
  double w_E_;
  double fd_step_;
  bool optimize_alpha_;
  Eigen::VectorXd fixed_alpha_;
  Vec3 centroid_;
  int threads_;

  std::vector<int> surface_nodes_;
  std::vector<Vec3> surface_base_;
  Eigen::MatrixXd surface_rows_;  // 3 * |surface nodes| x 3k
  std::vector<FeatureBlock> blocks_;
  Index num_residuals_ = 0;

  // State at the last alpha seen.
  Eigen::VectorXd alpha_;
  bool have_alpha_ = false;
  std::vector<Vec3> surface_pos_;
  SurfaceBvh bvh_;
  Eigen::VectorXd gram_alpha_;
  double energy_ = 0.0;
};

struct FeatureResidualSummary {
  std::string name;
  std::size_t count = 0;
  double rms = 0.0;  // m
};

struct RegistrationResult {
  RegistrationState state;
  Eigen::VectorXd displacement;     // J_u alpha, length 3M
  std::vector<Vec3> deformed_nodes;  // deformed then rigidly transformed
  std::vector<FeatureResidualSummary> feature_rms;
};

/// Fits beta = [alpha, tau, theta] to the features by Levenberg-Marquardt.
/// Both displacement bases go through this same routine.
RegistrationResult register_to_features(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                        const Eigen::MatrixXd& gram, const FeatureData& features,
                                        const RegistrationParams& params,
                                        const std::optional<Eigen::VectorXd>& beta0 = std::nullopt);

/// Objective weight equivalent to `w_E_per_pa2` applied to the mean strain
/// energy density: strain_energy() integrates over volume and divides by
/// M, so w = w_E (M / V)^2.
double objective_energy_weight(double w_E_per_pa2, const TetMesh& mesh);

/// Rigid-only fit from the identity, then the full fit started from that
/// rigid transform with alpha = 0.
RegistrationResult register_rigid_then_full(const TetMesh& mesh, const Eigen::MatrixXd& J_u,
                                            const Eigen::MatrixXd& gram, const FeatureData& features,
                                            const RegistrationParams& params);

}  // namespace kreg
