#include "kreg/fem.hpp"
#include "kreg/kelvinlet.hpp"
#include "kreg/libr.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>

using namespace kreg;
using kreg::test::small_phantom_mesh;

namespace {

struct Fixture {
  const TetMesh& mesh = small_phantom_mesh();
  ControlPointSet cps = kmeans_control_points(mesh, kPosterior, 6, 1);
  Eigen::MatrixXd J = build_rk_basis(mesh, cps, 0.02, ElasticParams(2100.0, 0.45));
  Eigen::MatrixXd G = energy_gram(assemble_stiffness(mesh, isotropic_material_matrix(2100.0, 0.45)).K, J);
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

RegistrationState random_state(std::mt19937_64& gen, Index n) {
  std::normal_distribution<double> g;
  RegistrationState s;
  s.alpha = Eigen::VectorXd(n);
  for (auto& a : s.alpha) a = 0.02 * g(gen);  // N; RK columns are ~1e-2 m/N near the load
  s.tau = 0.003 * Vec3(g(gen), g(gen), g(gen));
  s.theta = 0.03 * Vec3(g(gen), g(gen), g(gen));
  return s;
}

FeatureData cloud_and_fiducials(const TetMesh& mesh, std::mt19937_64& gen) {
  std::normal_distribution<double> g;
  Feature cloud{"cloud", FeatureKind::surface_cloud, 1.0, {}, {}};
  for (int v : mesh.patch_nodes(kAnterior)) cloud.points.push_back(mesh.nodes[v] + 0.002 * Vec3(g(gen), g(gen), g(gen)));
  Feature fid{"fiducials", FeatureKind::corresponded_points, 0.7, {}, {}};
  const auto boundary = mesh.boundary_nodes();
  for (int i = 0; i < 5; ++i) {
    const Vec3 x = 0.8 * mesh.nodes[boundary[(37 * i) % boundary.size()]];
    fid.counterparts.push_back(x);
    fid.points.push_back(x + 0.002 * Vec3(g(gen), g(gen), g(gen)));
  }
  return FeatureData{{cloud, fid}};
}

}  // namespace

TEST(Rigid, QuarterTurnAndTranslation) {
  const Vec3 p(1.0, 2.0, 3.0);
  const auto q = apply_rigid(std::vector<Vec3>{p}, Vec3::Zero(), Vec3(0, 0, std::numbers::pi / 2), Vec3::Zero());
  EXPECT_LT((q[0] - Vec3(-2.0, 1.0, 3.0)).norm(), 1e-15);
  const auto t = apply_rigid(std::vector<Vec3>{p}, Vec3(0.1, 0.2, 0.3), Vec3::Zero(), Vec3(5, 5, 5));
  EXPECT_EQ(t[0], p + Vec3(0.1, 0.2, 0.3));
  EXPECT_EQ(apply_rigid(std::vector<Vec3>{p}, Vec3::Zero(), Vec3::Zero(), Vec3(1, 0, 0))[0], p);
}

TEST(Rigid, ExtrinsicXyzOrder) {
  const Vec3 th(0.3, -0.4, 1.1);
  const Mat3 want = Eigen::AngleAxisd(th.z(), Vec3::UnitZ()).toRotationMatrix() *
                    Eigen::AngleAxisd(th.y(), Vec3::UnitY()).toRotationMatrix() *
                    Eigen::AngleAxisd(th.x(), Vec3::UnitX()).toRotationMatrix();
  EXPECT_LT((rotation_matrix(th) - want).norm(), 1e-15);
  const Vec3 w = wrap_angles(Vec3(std::numbers::pi, -std::numbers::pi, 7.0));
  EXPECT_DOUBLE_EQ(w.x(), std::numbers::pi);
  EXPECT_DOUBLE_EQ(w.y(), std::numbers::pi);
  EXPECT_NEAR(w.z(), 7.0 - 2.0 * std::numbers::pi, 1e-15);
}

TEST(Deformation, ZeroColumnAndSuperposition) {
  const auto& f = fixture();
  const Index n = f.J.cols();
  EXPECT_EQ(apply_deformation(f.mesh.nodes, f.J, Eigen::VectorXd::Zero(n)), f.mesh.nodes);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  e[4] = 0.5;
  const auto moved = apply_deformation(f.mesh.nodes, f.J, e);
  for (Index i = 0; i < f.mesh.num_nodes(); ++i)
    EXPECT_LT((moved[i] - f.mesh.nodes[i] - 0.5 * f.J.block<3, 1>(3 * i, 4)).norm(), 1e-15);
  std::mt19937_64 gen(1);
  const auto s1 = random_state(gen, n), s2 = random_state(gen, n);
  const auto a = apply_deformation(f.mesh.nodes, f.J, s1.alpha);
  const auto b = apply_deformation(f.mesh.nodes, f.J, s2.alpha);
  const auto ab = apply_deformation(f.mesh.nodes, f.J, s1.alpha + s2.alpha);
  for (Index i = 0; i < f.mesh.num_nodes(); ++i)
    EXPECT_LT((ab[i] - (a[i] + b[i] - f.mesh.nodes[i])).norm(), 1e-12);
  EXPECT_THROW(apply_deformation(f.mesh.nodes, f.J, Eigen::VectorXd::Zero(n + 1)), Error);
}

TEST(Residuals, OnSurfaceDataIsZeroAndOffsetIsExact) {
  const auto& f = fixture();
  std::mt19937_64 gen(2);
  const RegistrationState s = random_state(gen, f.J.cols());
  const auto moved = apply_rigid(apply_deformation(f.mesh.nodes, f.J, s.alpha), s.tau, s.theta, f.mesh.centroid());
  Feature cloud{"skin", FeatureKind::surface_cloud, 1.0, {}, {}};
  for (const Tri& t : f.mesh.boundary_tris) cloud.points.push_back((moved[t[0]] + moved[t[1]] + 2 * moved[t[2]]) / 4);
  const Eigen::VectorXd r = compute_residuals(s, f.mesh, f.J, FeatureData{{cloud}});
  EXPECT_LT(r.maxCoeff(), 1e-12);

  RegistrationState id;
  id.alpha = Eigen::VectorXd::Zero(f.J.cols());
  const Vec3 x = f.mesh.nodes[f.mesh.tets[10][0]];
  Feature pair{"fid", FeatureKind::corresponded_points, 1.0, {x + Vec3(0, 3e-3, 0)}, {x}};
  EXPECT_NEAR(compute_residuals(id, f.mesh, f.J, FeatureData{{pair}})[0], 3e-3, 1e-15);
}

TEST(Residuals, CloudMatchesBruteForceClosestPoint) {
  const auto& f = fixture();
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 3; ++trial) {
    const RegistrationState s = random_state(gen, f.J.cols());
    const FeatureData data = cloud_and_fiducials(f.mesh, gen);
    const Eigen::VectorXd r = compute_residuals(s, f.mesh, f.J, data);
    const auto moved = apply_rigid(apply_deformation(f.mesh.nodes, f.J, s.alpha), s.tau, s.theta, f.mesh.centroid());
    const auto& pts = data.features[0].points;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const Tri& t : f.mesh.boundary_tris)
        best = std::min(best, (closest_point_on_triangle(pts[i], moved[t[0]], moved[t[1]], moved[t[2]]) - pts[i]).norm());
      EXPECT_NEAR(r[i], best, 1e-12);
    }
  }
}

TEST(Residuals, PermutationOfPointsPermutesResiduals) {
  const auto& f = fixture();
  std::mt19937_64 gen(4);
  const RegistrationState s = random_state(gen, f.J.cols());
  FeatureData data = cloud_and_fiducials(f.mesh, gen);
  RegistrationParams p;
  p.w_E = 1e3;
  const double base = objective(s, f.mesh, f.J, f.G, data, p);
  std::shuffle(data.features[0].points.begin(), data.features[0].points.end(), gen);
  EXPECT_NEAR(objective(s, f.mesh, f.J, f.G, data, p), base, 1e-12 * base);
}

TEST(Energy, QuadraticAndNonNegative) {
  const auto& f = fixture();
  const Index n = f.J.cols();
  const Index M = f.mesh.num_nodes();
  EXPECT_EQ(strain_energy(Eigen::VectorXd::Zero(n), f.G, M), 0.0);
  std::mt19937_64 gen(5);
  for (int i = 0; i < 100; ++i) {
    const Eigen::VectorXd a = random_state(gen, n).alpha;
    const double e = strain_energy(a, f.G, M);
    EXPECT_GE(e, 0.0);
    EXPECT_NEAR(strain_energy(2.5 * a, f.G, M), 6.25 * e, 1e-10 * 6.25 * e);
  }
  EXPECT_THROW(strain_energy(Eigen::VectorXd::Zero(n + 3), f.G, M), Error);
}

TEST(Objective, Arithmetic) {
  const auto& f = fixture();
  RegistrationState id;
  id.alpha = Eigen::VectorXd::Zero(f.J.cols());
  const Vec3 x = f.mesh.nodes[f.mesh.tets[3][1]];
  Feature pair{"one", FeatureKind::corresponded_points, 1.0, {x + Vec3(2, 0, 0)}, {x}};
  RegistrationParams p;
  p.w_E = 0.0;
  EXPECT_NEAR(objective(id, f.mesh, f.J, f.G, FeatureData{{pair}}, p), 4.0, 1e-14);
  pair.points[0] = x;
  // Only the rounding of the rotation about the centroid remains.
  EXPECT_LT(objective(id, f.mesh, f.J, f.G, FeatureData{{pair}}, p), 1e-30);
}

TEST(Objective, MatchesStraightLineRecomputation) {
  const auto& f = fixture();
  std::mt19937_64 gen(6);
  RegistrationParams p;
  p.w_E = 3.7e4;
  for (int trial = 0; trial < 5; ++trial) {
    const RegistrationState s = random_state(gen, f.J.cols());
    const FeatureData data = cloud_and_fiducials(f.mesh, gen);
    const Eigen::VectorXd r = compute_residuals(s, f.mesh, f.J, data);
    const Index n0 = static_cast<Index>(data.features[0].points.size());
    const Index n1 = static_cast<Index>(data.features[1].points.size());
    const double fe = 0.5 * s.alpha.dot(f.G * s.alpha) / f.mesh.num_nodes();
    const double want = 1.0 / n0 * r.head(n0).squaredNorm() + 0.7 / n1 * r.tail(n1).squaredNorm() + p.w_E * fe * fe;
    const double got = objective(s, f.mesh, f.J, f.G, data, p);
    EXPECT_NEAR(got, want, 1e-12 * want);
    EXPECT_GE(got, 0.0);
  }
}

TEST(Objective, DuplicatedPointsLeaveOmegaUnchanged) {
  const auto& f = fixture();
  std::mt19937_64 gen(7);
  const RegistrationState s = random_state(gen, f.J.cols());
  FeatureData data = cloud_and_fiducials(f.mesh, gen);
  RegistrationParams p;
  p.w_E = 0.0;
  const double base = objective(s, f.mesh, f.J, f.G, data, p);
  for (Feature& feat : data.features) {
    feat.points.insert(feat.points.end(), feat.points.begin(), feat.points.end());
    if (!feat.counterparts.empty())
      feat.counterparts.insert(feat.counterparts.end(), feat.counterparts.begin(), feat.counterparts.end());
  }
  EXPECT_NEAR(objective(s, f.mesh, f.J, f.G, data, p), base, 1e-12 * base);
}

TEST(Features, Validation) {
  EXPECT_THROW(FeatureData{}.validate(), Error);
  Feature empty{"e", FeatureKind::surface_cloud, 1.0, {}, {}};
  EXPECT_THROW(FeatureData{{empty}}.validate(), Error);
  Feature bad{"w", FeatureKind::surface_cloud, NAN, {Vec3::Zero()}, {}};
  EXPECT_THROW(FeatureData{{bad}}.validate(), Error);
  Feature mismatch{"m", FeatureKind::corresponded_points, 1.0, {Vec3::Zero(), Vec3::Ones()}, {Vec3::Zero()}};
  EXPECT_THROW(FeatureData{{mismatch}}.validate(), Error);
  EXPECT_EQ(feature_kind_from_string(to_string(FeatureKind::corresponded_points)), FeatureKind::corresponded_points);
  EXPECT_THROW(feature_kind_from_string("landmarks"), Error);
}

TEST(Problem, ResidualsMatchObjectiveLayout) {
  const auto& f = fixture();
  std::mt19937_64 gen(8);
  const FeatureData data = cloud_and_fiducials(f.mesh, gen);
  RegistrationParams p;
  p.w_E = 2e5;
  RegistrationProblem prob(f.mesh, f.J, f.G, data, p);
  for (int trial = 0; trial < 3; ++trial) {
    const RegistrationState s = random_state(gen, f.J.cols());
    Eigen::VectorXd beta(f.J.cols() + 6);
    beta << s.alpha, s.tau, s.theta;
    const Eigen::VectorXd r = prob.residuals(beta);
    ASSERT_EQ(r.size(), prob.num_residuals());
    EXPECT_NEAR(r.squaredNorm(), objective(s, f.mesh, f.J, f.G, data, p), 1e-12 * r.squaredNorm());
    const Eigen::VectorXd raw = compute_residuals(s, f.mesh, f.J, data);
    const Index n0 = static_cast<Index>(data.features[0].points.size());
    for (Index i = 0; i < raw.size(); ++i) {
      const double scale = i < n0 ? std::sqrt(1.0 / n0) : std::sqrt(0.7 / (raw.size() - n0));
      EXPECT_NEAR(r[i], scale * raw[i], 1e-12) << i;
    }
    EXPECT_NEAR(r[raw.size()], std::sqrt(p.w_E) * strain_energy(s.alpha, f.G, f.mesh.num_nodes()), 1e-12 * std::abs(r[raw.size()]));
  }
}

TEST(Problem, IncrementalJacobianMatchesPlainDifferences) {
  const auto& f = fixture();
  std::mt19937_64 gen(9);
  const FeatureData data = cloud_and_fiducials(f.mesh, gen);
  RegistrationParams p;
  p.w_E = 2e5;
  RegistrationProblem prob(f.mesh, f.J, f.G, data, p);
  const RegistrationState s = random_state(gen, f.J.cols());
  Eigen::VectorXd beta(f.J.cols() + 6);
  beta << s.alpha, s.tau, s.theta;
  const Eigen::VectorXd r0 = prob.residuals(beta);
  const Eigen::MatrixXd Jac = prob.jacobian(beta, r0);
  // Plain forward differences through the straight-line residual path.
  for (Index j = 0; j < prob.num_parameters(); ++j) {
    Eigen::VectorXd b = beta;
    b[j] += p.fd_step;
    RegistrationProblem fresh(f.mesh, f.J, f.G, data, p);
    const Eigen::VectorXd col = (fresh.residuals(b) - r0) / p.fd_step;
    EXPECT_LT((Jac.col(j) - col).norm(), 1e-7 * std::max(1.0, col.norm())) << "column " << j;
  }
  RegistrationParams threaded = p;
  threaded.threads = 3;
  RegistrationProblem par(f.mesh, f.J, f.G, data, threaded);
  EXPECT_EQ(par.jacobian(beta, par.residuals(beta)), Jac);
}

TEST(Register, IdentityRecovery) {
  const auto& f = fixture();
  Feature cloud{"surface", FeatureKind::surface_cloud, 1.0, {}, {}};
  for (int v : f.mesh.patch_nodes(kAnterior)) cloud.points.push_back(f.mesh.nodes[v]);
  RegistrationParams p;
  p.w_E = objective_energy_weight(1e-8, f.mesh);
  const auto res = register_to_features(f.mesh, f.J, f.G, FeatureData{{cloud}}, p);
  ASSERT_EQ(res.feature_rms.size(), 1u);
  EXPECT_LT(res.feature_rms[0].rms, 1e-4);
  EXPECT_LT(res.state.alpha.norm(), 1e-3);
  EXPECT_LT(res.state.tau.norm(), 1e-3);
  EXPECT_LT(res.state.theta.norm(), 1e-3);
  EXPECT_EQ(res.deformed_nodes.size(), f.mesh.nodes.size());
  EXPECT_EQ(res.displacement.size(), 3 * f.mesh.num_nodes());
}

TEST(Register, RecoversPureRigidOffset) {
  const auto& f = fixture();
  const Vec3 tau(0.002, -0.001, 0.0015), theta(0.02, -0.01, 0.03);
  Feature cloud{"surface", FeatureKind::surface_cloud, 1.0, {}, {}};
  std::vector<Vec3> pts;
  for (int v : f.mesh.boundary_nodes()) pts.push_back(f.mesh.nodes[v]);
  cloud.points = apply_rigid(pts, tau, theta, f.mesh.centroid());
  RegistrationParams p;
  p.optimize_alpha = false;
  const auto res = register_to_features(f.mesh, f.J, f.G, FeatureData{{cloud}}, p);
  EXPECT_LT((res.state.tau - tau).norm(), 1e-6);
  EXPECT_LT((res.state.theta - theta).norm(), 1e-5);
  EXPECT_TRUE(res.state.alpha.isZero(0));
  auto& hist = res.state.objective_history;
  for (std::size_t i = 1; i < hist.size(); ++i) EXPECT_LT(hist[i], hist[i - 1]);
}

TEST(Register, EnergyWeightConversion) {
  const auto& f = fixture();
  const double mv = f.mesh.num_nodes() / f.mesh.volume();
  EXPECT_NEAR(objective_energy_weight(1e-8, f.mesh), 1e-8 * mv * mv, 1e-20 * mv * mv);
  EXPECT_THROW(register_to_features(f.mesh, f.J, f.G, FeatureData{}, RegistrationParams{}), Error);
  std::mt19937_64 gen(1);
  EXPECT_THROW(register_to_features(f.mesh, f.J, f.G, cloud_and_fiducials(f.mesh, gen), RegistrationParams{},
                                    Eigen::VectorXd::Zero(3)),
               Error);
}
