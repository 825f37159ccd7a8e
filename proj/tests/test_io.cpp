#include "kreg/io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

using namespace kreg;
using kreg::test::scratch_dir;

namespace {

void expect_same_mesh(const TetMesh& a, const TetMesh& b) {
  EXPECT_EQ(a.nodes, b.nodes);
  EXPECT_EQ(a.tets, b.tets);
  EXPECT_EQ(a.patch_labels, b.patch_labels);
  EXPECT_EQ(a.boundary_tris, b.boundary_tris);
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

}  // namespace

TEST(Format, ShortestRoundTrip) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double v = u(gen) * std::pow(10.0, static_cast<int>(gen() % 40) - 20);
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
  EXPECT_EQ(format_double(std::numeric_limits<double>::denorm_min()), "5e-324");
}

TEST(Vtk, MeshAndDisplacementRoundTrip) {
  const auto dir = scratch_dir("vtk");
  const TetMesh& m = kreg::test::small_phantom_mesh();
  std::mt19937_64 gen(1);
  std::normal_distribution<double> n(0.0, 1e-3);
  Eigen::VectorXd u(3 * m.num_nodes());
  for (Index i = 0; i < u.size(); ++i) u[i] = n(gen);

  write_vtk(dir / "a.vtk", m);
  const VtkData plain = read_vtk(dir / "a.vtk");
  expect_same_mesh(plain.mesh, m);
  EXPECT_FALSE(plain.displacement);

  write_vtk(dir / "b.vtk", m, &u);
  const VtkData with = read_vtk(dir / "b.vtk");
  expect_same_mesh(with.mesh, m);
  ASSERT_TRUE(with.displacement);
  EXPECT_EQ(*with.displacement, u);

  // Writing what was read reproduces the file byte for byte.
  write_vtk(dir / "c.vtk", with.mesh, &*with.displacement);
  EXPECT_EQ(read_text(dir / "b.vtk"), read_text(dir / "c.vtk"));

  const Eigen::VectorXd short_u = Eigen::VectorXd::Zero(5);
  EXPECT_THROW(write_vtk(dir / "d.vtk", m, &short_u), Error);
}

TEST(Vtk, RejectsMalformedFiles) {
  const auto dir = scratch_dir("vtk_bad");
  write_bytes(dir / "bin.vtk", "# vtk DataFile Version 3.0\nx\nBINARY\n");
  EXPECT_THROW(read_vtk(dir / "bin.vtk"), Error);
  write_bytes(dir / "hex.vtk",
              "# vtk DataFile Version 3.0\nx\nASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS 1 double\n0 0 0\n"
              "CELLS 1 9\n8 0 0 0 0 0 0 0 0\n");
  EXPECT_THROW(read_vtk(dir / "hex.vtk"), Error);
  write_bytes(dir / "trunc.vtk", "# vtk DataFile Version 3.0\nx\nASCII\nDATASET UNSTRUCTURED_GRID\nPOINTS 4 double\n0 0");
  EXPECT_THROW(read_vtk(dir / "trunc.vtk"), Error);
  EXPECT_THROW(read_vtk(dir / "missing.vtk"), Error);
}

TEST(Csv, FeatureRoundTrip) {
  const auto dir = scratch_dir("csv");
  Feature cloud;
  cloud.name = "cloud";
  cloud.points = {Vec3(0.1, -0.2, 0.3), Vec3(1e-17, 2.5, -7.125)};
  write_feature_csv(dir / "cloud.csv", cloud);
  const Feature c = read_feature_csv(dir / "cloud.csv", FeatureKind::surface_cloud);
  EXPECT_EQ(c.points, cloud.points);
  EXPECT_TRUE(c.counterparts.empty());
  EXPECT_EQ(c.name, "cloud");

  Feature pts;
  pts.kind = FeatureKind::corresponded_points;
  pts.points = {Vec3(1, 2, 3)};
  pts.counterparts = {Vec3(0.1, 0.2, 0.30000000000000004)};
  write_feature_csv(dir / "pts.csv", pts);
  const Feature p = read_feature_csv(dir / "pts.csv", FeatureKind::corresponded_points);
  EXPECT_EQ(p.points, pts.points);
  EXPECT_EQ(p.counterparts, pts.counterparts);
  write_feature_csv(dir / "pts2.csv", p);
  EXPECT_EQ(read_text(dir / "pts.csv"), read_text(dir / "pts2.csv"));

  // A surface cloud file lacks counterpart columns.
  EXPECT_THROW(read_feature_csv(dir / "cloud.csv", FeatureKind::corresponded_points), Error);
  write_bytes(dir / "hdr.csv", "a,b,c\n1,2,3\n");
  EXPECT_THROW(read_feature_csv(dir / "hdr.csv", FeatureKind::surface_cloud), Error);
  write_bytes(dir / "num.csv", "x,y,z\n1,2,abc\n");
  EXPECT_THROW(read_feature_csv(dir / "num.csv", FeatureKind::surface_cloud), Error);
  write_bytes(dir / "cols.csv", "x,y,z\n1,2\n");
  EXPECT_THROW(read_feature_csv(dir / "cols.csv", FeatureKind::surface_cloud), Error);
  // CRLF line endings are accepted.
  write_bytes(dir / "crlf.csv", "x,y,z\r\n1,2,3\r\n");
  EXPECT_EQ(read_feature_csv(dir / "crlf.csv", FeatureKind::surface_cloud).points.at(0), Vec3(1, 2, 3));
}

TEST(Csv, TargetsRoundTrip) {
  const auto dir = scratch_dir("targets");
  std::vector<Target> t(3);
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& x : t) {
    x.undeformed = Vec3(u(gen), u(gen), u(gen));
    x.deformed = Vec3(u(gen), u(gen), u(gen));
  }
  write_targets_csv(dir / "t.csv", t);
  const auto back = read_targets_csv(dir / "t.csv");
  ASSERT_EQ(back.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].undeformed, t[i].undeformed);
    EXPECT_EQ(back[i].deformed, t[i].deformed);
  }
  write_bytes(dir / "bad.csv", "x,y,z\n");
  EXPECT_THROW(read_targets_csv(dir / "bad.csv"), Error);
}

TEST(Matrix, BinaryRoundTripAndErrors) {
  const auto dir = scratch_dir("matrix");
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(7, 3);
  m(2, 1) = -0.0;
  m(0, 0) = std::numeric_limits<double>::denorm_min();
  write_matrix(dir / "m.bin", m);
  EXPECT_EQ(fs::file_size(dir / "m.bin"), 24u + 8u * 21u);
  const Eigen::MatrixXd back = read_matrix(dir / "m.bin");
  ASSERT_EQ(back.rows(), 7);
  ASSERT_EQ(back.cols(), 3);
  EXPECT_EQ(std::memcmp(back.data(), m.data(), sizeof(double) * 21), 0);

  // Row-major layout on disk.
  std::ifstream in(dir / "m.bin", std::ios::binary);
  in.seekg(24 + 8);
  double second = 0.0;
  in.read(reinterpret_cast<char*>(&second), 8);
  EXPECT_EQ(second, m(0, 1));

  write_matrix(dir / "empty.bin", Eigen::MatrixXd(0, 4));
  EXPECT_EQ(read_matrix(dir / "empty.bin").cols(), 4);

  std::string bytes = read_text(dir / "m.bin");
  write_bytes(dir / "short.bin", bytes.substr(0, bytes.size() - 8));
  EXPECT_THROW(read_matrix(dir / "short.bin"), Error);
  bytes[0] = 'X';
  write_bytes(dir / "magic.bin", bytes);
  try {
    read_matrix(dir / "magic.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("not a matrix file"), std::string::npos);
  }
}

TEST(Basis, RoundTripAndErrors) {
  const auto dir = scratch_dir("basis");
  BasisFile b;
  b.model = "rk";
  b.k = 2;
  b.epsilon = 0.02;
  b.control_patch = kPosterior;
  b.E = 2100.0;
  b.nu = 0.45;
  b.seed = 7;
  b.control_points.positions = {Vec3(0.1, 0.2, 0.3), Vec3(-0.1, 0.0, 1.0 / 3.0)};
  b.control_points.nearest_node = {4, 9};
  b.J_u = Eigen::MatrixXd::Random(12, 6);
  b.gram = Eigen::MatrixXd::Random(6, 6);
  write_basis(dir, b);
  const BasisFile r = read_basis(dir);
  EXPECT_EQ(r.model, b.model);
  EXPECT_EQ(r.k, 2);
  EXPECT_EQ(r.epsilon, b.epsilon);
  EXPECT_EQ(r.control_patch, b.control_patch);
  EXPECT_EQ(r.E, b.E);
  EXPECT_EQ(r.nu, b.nu);
  EXPECT_EQ(r.seed, 7u);
  EXPECT_EQ(r.control_points.positions, b.control_points.positions);
  EXPECT_EQ(r.control_points.nearest_node, b.control_points.nearest_node);
  EXPECT_EQ(r.J_u, b.J_u);
  EXPECT_EQ(r.gram, b.gram);

  try {
    read_basis(dir / "nothing");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no basis found"), std::string::npos);
  }
  write_matrix(dir / "gram.bin", Eigen::MatrixXd::Zero(5, 5));
  EXPECT_THROW(read_basis(dir), Error);
}

TEST(State, JsonRoundTrip) {
  RegistrationState s;
  s.alpha = Eigen::VectorXd::Random(9);
  s.tau = Vec3(1e-3, -2e-3, 0.1);
  s.theta = Vec3(0.01, 0.02, -0.03);
  s.objective = 1.0 / 3.0;
  s.iterations = 12;
  s.converged = true;
  s.objective_history = {2.0, 1.0, 1.0 / 3.0};
  const std::string text = state_to_json(s, {{"cloud", 10, 1e-3}});
  EXPECT_NE(text.find("\"feature_rms\""), std::string::npos);
  const RegistrationState r = state_from_json(text);
  EXPECT_EQ(r.alpha, s.alpha);
  EXPECT_EQ(r.tau, s.tau);
  EXPECT_EQ(r.theta, s.theta);
  EXPECT_EQ(r.objective, s.objective);
  EXPECT_EQ(r.iterations, 12);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.objective_history, s.objective_history);
  EXPECT_EQ(state_to_json(r, {{"cloud", 10, 1e-3}}), text);
}

TEST(Volume, RoundTripAndErrors) {
  const auto dir = scratch_dir("volume");
  Volume v;
  v.dims = {4, 3, 2};
  v.spacing = Vec3(1e-3, 2e-3, 3e-3);
  v.origin = Vec3(-0.01, 0.0, 0.02);
  v.data.resize(24);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = 0.5f * static_cast<float>(i) - 3.0f;
  EXPECT_EQ(v.index(1, 2, 1), 1u + 4u * (2u + 3u * 1u));
  write_volume(dir / "v.json", v);
  EXPECT_TRUE(fs::exists(dir / "v.raw"));
  const Volume r = read_volume(dir / "v.json");
  EXPECT_EQ(r.dims, v.dims);
  EXPECT_EQ(r.spacing, v.spacing);
  EXPECT_EQ(r.origin, v.origin);
  EXPECT_EQ(r.data, v.data);

  Volume wrong = v;
  wrong.data.pop_back();
  EXPECT_THROW(write_volume(dir / "w.json", wrong), Error);

  const std::string raw = read_text(dir / "v.raw");
  write_bytes(dir / "v.raw", raw.substr(0, 20));
  EXPECT_THROW(read_volume(dir / "v.json"), Error);
  fs::remove(dir / "v.raw");
  EXPECT_THROW(read_volume(dir / "v.json"), Error);

  write_bytes(dir / "z.json", R"({"dims":[0,1,1],"spacing":[1,1,1],"origin":[0,0,0],"data":"z.raw"})");
  EXPECT_THROW(read_volume(dir / "z.json"), Error);
  write_bytes(dir / "s.json", R"({"dims":[1,1,1],"spacing":[1,-1,1],"origin":[0,0,0],"data":"s.raw"})");
  EXPECT_THROW(read_volume(dir / "s.json"), Error);
}

TEST(Case, DirectoryRoundTrip) {
  const auto dir = scratch_dir("case");
  const GroundTruthCase gt = make_case(kreg::test::small_case_config(2));
  write_case(dir / "a", gt);
  const GroundTruthCase r = read_case(dir / "a");
  expect_same_mesh(r.mesh, gt.mesh);
  EXPECT_EQ(r.true_displacement, gt.true_displacement);
  EXPECT_EQ(r.rigid_offset.tau, gt.rigid_offset.tau);
  EXPECT_EQ(r.rigid_offset.theta, gt.rigid_offset.theta);
  ASSERT_EQ(r.targets.size(), gt.targets.size());
  for (std::size_t i = 0; i < r.targets.size(); ++i) EXPECT_EQ(r.targets[i].deformed, gt.targets[i].deformed);
  ASSERT_EQ(r.features.features.size(), gt.features.features.size());
  for (std::size_t i = 0; i < r.features.features.size(); ++i) {
    EXPECT_EQ(r.features.features[i].name, gt.features.features[i].name);
    EXPECT_EQ(r.features.features[i].kind, gt.features.features[i].kind);
    EXPECT_EQ(r.features.features[i].weight, gt.features.features[i].weight);
    EXPECT_EQ(r.features.features[i].points, gt.features.features[i].points);
  }
  EXPECT_EQ(r.config.seed, gt.config.seed);
  EXPECT_EQ(r.config.phantom.semi_axes, gt.config.phantom.semi_axes);

  write_case(dir / "b", r);
  for (const char* f : {"mesh.vtk", "true_displacement.vtk", "targets.csv", "case.json", "features/features.json"})
    EXPECT_EQ(read_text(dir / "a" / f), read_text(dir / "b" / f)) << f;

  EXPECT_THROW(read_case(dir / "missing"), Error);
}
