#pragma once

#include "kreg/fem.hpp"
#include "kreg/libr.hpp"

#include <cstdint>

namespace kreg {

/// Ellipsoidal stand-in organ, centered at the origin.
struct PhantomSpec {
  Vec3 semi_axes{0.14, 0.10, 0.07};  // m
  double target_edge_length = 0.008;  // m
  std::uint64_t seed = 0;

  void validate() const;
};

/// Kuhn-split voxelization of the ellipsoid. Defects at non-manifold edges
/// or vertices are removed by deleting the outermost incident tets, then the
/// largest face-connected component is kept. Boundary nodes are labeled by
/// the z-component of their area-weighted normal.
TetMesh generate_phantom_mesh(const PhantomSpec& spec);

/// Forward solve with a smooth Dirichlet field on 2-4 random posterior
/// sub-patches (the rest of the posterior fixed, everything else free).
Eigen::VectorXd generate_ground_truth(const TetMesh& mesh, const MaterialMatrix& material, std::uint64_t seed,
                                      double amplitude = 0.015);

struct RigidOffset {
  Vec3 tau = Vec3::Zero();
  Vec3 theta = Vec3::Zero();
};

struct Target {
  Vec3 undeformed;
  Vec3 deformed;
};

struct CaseConfig {
  PhantomSpec phantom;
  double E = 2100.0;
  double nu = 0.45;
  double amplitude = 0.015;        // m
  int num_targets = 60;
  double translation = 0.005;      // |tau|, m
  double rotation_deg = 3.0;       // |theta|, degrees
  double coverage = 0.5;
  double noise = 0.001;            // m
  int fiducials = 0;
  std::uint64_t seed = 1;
};

struct GroundTruthCase {
  CaseConfig config;
  TetMesh mesh;
  Eigen::VectorXd true_displacement;
  std::vector<Target> targets;
  FeatureData features;
  RigidOffset rigid_offset;
};

/// Random offset with the requested translation norm and Euler-vector norm.
RigidOffset random_rigid_offset(double translation, double rotation_rad, std::uint64_t seed);

/// `count` distinct interior nodes; deformed = rigid(x + u(x)).
std::vector<Target> sample_targets(const TetMesh& mesh, const Eigen::VectorXd& displacement,
                                   const RigidOffset& rigid, int count, std::uint64_t seed);

/// A surface cloud over round(coverage * n) deformed anterior nodes, moved
/// by the case's rigid offset, plus isotropic noise. With fiducials > 0 a
/// corresponded feature over that many random boundary nodes is added.
FeatureData sample_sparse_features(const GroundTruthCase& gt, double coverage, double noise, std::uint64_t seed,
                                   int fiducials = 0);

/// Builds the mesh, the ground-truth field, the offset, targets and features.
GroundTruthCase make_case(const CaseConfig& config);

struct TreResult {
  double rms_mm = 0.0;
  std::vector<double> errors_mm;
};

/// Advects each undeformed target by the interpolated displacement and the
/// rigid transform about the mesh centroid, and compares with the true
/// deformed target.
TreResult rms_tre(const TetMesh& mesh, const Eigen::VectorXd& displacement, const Vec3& tau, const Vec3& theta,
                  const std::vector<Target>& targets);

}  // namespace kreg
