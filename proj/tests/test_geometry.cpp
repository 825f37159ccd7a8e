#include "kreg/geometry.hpp"
#include "kreg/spatial.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

using namespace kreg;
using kreg::test::box_mesh;
using kreg::test::single_tet;
using kreg::test::small_phantom_mesh;

namespace {

Vec3 face_normal(const TetMesh& m, const Tri& t) {
  return (m.nodes[t[1]] - m.nodes[t[0]]).cross(m.nodes[t[2]] - m.nodes[t[0]]);
}

void expect_outward(const TetMesh& m) {
  // Every boundary face belongs to one tet; its normal must point away from it.
  for (const Tri& f : m.boundary_tris) {
    const std::set<int> face(f.begin(), f.end());
    int owners = 0;
    for (const Tet& t : m.tets) {
      int shared = 0;
      for (int v : t) shared += static_cast<int>(face.count(v));
      if (shared != 3) continue;
      ++owners;
      const Vec3 c = (m.nodes[t[0]] + m.nodes[t[1]] + m.nodes[t[2]] + m.nodes[t[3]]) / 4.0;
      const Vec3 fc = (m.nodes[f[0]] + m.nodes[f[1]] + m.nodes[f[2]]) / 3.0;
      EXPECT_GT(face_normal(m, f).dot(fc - c), 0.0);
    }
    EXPECT_EQ(owners, 1);
  }
}

}  // namespace

TEST(Surface, SingleTetHasFourOutwardFaces) {
  const TetMesh m = single_tet();
  EXPECT_EQ(m.boundary_tris.size(), 4u);
  expect_outward(m);
  EXPECT_EQ(count_bad_boundary_edges(m.boundary_tris), 0u);
}

TEST(Surface, TwoTetsGiveSixFaces) {
  std::vector<Vec3> nodes{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(1, 1, 1)};
  Tet second{1, 2, 3, 4};
  if (signed_volume(nodes[1], nodes[2], nodes[3], nodes[4]) < 0) std::swap(second[2], second[3]);
  const TetMesh m = make_mesh(nodes, {Tet{0, 1, 2, 3}, second});
  EXPECT_EQ(m.boundary_tris.size(), 6u);
  for (const Tri& f : m.boundary_tris) {
    std::set<int> s(f.begin(), f.end());
    EXPECT_NE(s, (std::set<int>{1, 2, 3}));
  }
  expect_outward(m);
  EXPECT_EQ(count_bad_boundary_edges(m.boundary_tris), 0u);
}

TEST(Surface, InvertedTetIsRejectedWithIndex) {
  std::vector<Vec3> nodes{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(2, 0, 0)};
  try {
    make_mesh(nodes, {Tet{0, 1, 2, 3}, Tet{0, 2, 1, 3}});
    FAIL() << "expected rejection";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("tet 1"), std::string::npos) << e.what();
  }
}

TEST(Surface, BadIndicesAndPatchesAreRejected) {
  std::vector<Vec3> nodes{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  EXPECT_THROW(make_mesh(nodes, {Tet{0, 1, 2, 7}}), Error);
  EXPECT_THROW(make_mesh(nodes, {}), Error);
  const TetMesh box = box_mesh(2, 2, 2, Vec3::Ones());
  // Node 13 is the box center, not on the boundary.
  EXPECT_THROW(make_mesh(box.nodes, box.tets, {{"posterior", {0, 13}}}), Error);
}

TEST(Surface, BoxIsClosedManifold) {
  const TetMesh m = box_mesh(3, 2, 2, Vec3(0.3, 0.2, 0.2));
  EXPECT_EQ(count_bad_boundary_edges(m.boundary_tris), 0u);
  expect_outward(m);
  EXPECT_NEAR(m.volume(), 0.3 * 0.2 * 0.2, 1e-15);
  // 2 * (3*2 + 3*2 + 2*2) squares, two triangles each.
  EXPECT_EQ(m.boundary_tris.size(), 64u);
}

TEST(Surface, PhantomIsClosedManifold) {
  const TetMesh& m = small_phantom_mesh();
  EXPECT_EQ(count_bad_boundary_edges(m.boundary_tris), 0u);
  // Edge-count audit: closed triangulated surface has E = 3F/2.
  std::set<std::pair<int, int>> edges;
  for (const Tri& t : m.boundary_tris)
    for (int i = 0; i < 3; ++i) edges.insert(std::minmax(t[i], t[(i + 1) % 3]));
  EXPECT_EQ(2 * edges.size(), 3 * m.boundary_tris.size());
}

TEST(ControlPoints, SingleClusterIsNodeNearestCentroid) {
  const TetMesh& m = small_phantom_mesh();
  const auto cand = m.patch_nodes(kPosterior);
  Vec3 c = Vec3::Zero();
  for (int v : cand) c += m.nodes[v];
  c /= static_cast<double>(cand.size());
  int best = cand[0];
  for (int v : cand)
    if ((m.nodes[v] - c).squaredNorm() < (m.nodes[best] - c).squaredNorm()) best = v;
  const auto cps = kmeans_control_points(m, kPosterior, 1, 3);
  ASSERT_EQ(cps.size(), 1);
  EXPECT_EQ(cps.nearest_node[0], best);
  EXPECT_EQ(cps.source_patch, kPosterior);
}

TEST(ControlPoints, SaturationSelectsEveryCandidate) {
  const TetMesh& m = small_phantom_mesh();
  const auto cand = m.patch_nodes(kAnterior);
  const auto cps = kmeans_control_points(m, kAnterior, static_cast<int>(cand.size()), 5);
  auto picked = cps.nearest_node;
  std::sort(picked.begin(), picked.end());
  EXPECT_EQ(picked, cand);
}

TEST(ControlPoints, PositionsSitOnNodesAndAreDeterministic) {
  const TetMesh& m = small_phantom_mesh();
  const auto a = kmeans_control_points(m, "entire", 12, 9);
  const auto b = kmeans_control_points(m, "entire", 12, 9);
  ASSERT_EQ(a.size(), 12);
  EXPECT_EQ(a.nearest_node, b.nearest_node);
  const auto boundary = m.boundary_nodes();
  for (Index i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.positions[i], b.positions[i]);
    EXPECT_LE((a.positions[i] - m.nodes[a.nearest_node[i]]).norm(), 1e-9);
    EXPECT_TRUE(std::binary_search(boundary.begin(), boundary.end(), a.nearest_node[i]));
  }
  EXPECT_EQ(a.source_patch, kEntireSurface);
}

TEST(ControlPoints, Errors) {
  const TetMesh& m = small_phantom_mesh();
  const int n = static_cast<int>(m.patch_nodes(kPosterior).size());
  EXPECT_THROW(kmeans_control_points(m, kPosterior, n + 1, 1), Error);
  EXPECT_THROW(kmeans_control_points(m, kPosterior, 0, 1), Error);
  EXPECT_THROW(kmeans_control_points(m, "lateral", 3, 1), Error);
}

TEST(ControlPoints, DifferentSeedsCoverThePatchEvenly) {
  const TetMesh m = generate_phantom_mesh(PhantomSpec{});
  const auto cand = m.patch_nodes(kPosterior);
  const auto lumped = lumped_boundary_area(m);
  double area = 0.0;
  for (int v : cand) area += lumped[v];
  // Radius of a disk holding 1/k of the patch area.
  const double disk = std::sqrt(area / (40 * M_PI));
  std::vector<double> cover;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto cps = kmeans_control_points(m, kPosterior, 40, seed);
    double worst = 0.0;
    for (int v : cand) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& p : cps.positions) best = std::min(best, (m.nodes[v] - p).norm());
      worst = std::max(worst, best);
    }
    EXPECT_LE(worst, 2.0 * disk) << seed;
    cover.push_back(worst);
  }
  EXPECT_LE(*std::max_element(cover.begin(), cover.end()), 1.5 * *std::min_element(cover.begin(), cover.end()));
}

TEST(Voronoi, SingleControlPointOwnsEverything) {
  const TetMesh& m = small_phantom_mesh();
  const auto cand = m.patch_nodes(kPosterior);
  const auto cps = kmeans_control_points(m, kPosterior, 1, 0);
  EXPECT_EQ(voronoi_tile(m, cps, 0, cand), cand);
}

TEST(Voronoi, TilesPartitionCandidatesAndContainOwnNode) {
  const TetMesh m = box_mesh(6, 5, 4, Vec3(0.06, 0.05, 0.04));
  const auto cand = m.boundary_nodes();
  ASSERT_GE(cand.size(), 150u);
  const auto cps = kmeans_control_points(m, "entire", 9, 4);
  std::vector<int> owner(m.nodes.size(), -1);
  for (int i = 0; i < cps.size(); ++i) {
    const auto tile = voronoi_tile(m, cps, i, cand);
    EXPECT_TRUE(std::binary_search(tile.begin(), tile.end(), cps.nearest_node[i]));
    for (int v : tile) {
      EXPECT_EQ(owner[v], -1) << "node " << v << " in two tiles";
      owner[v] = i;
    }
  }
  for (int v : cand) {
    ASSERT_NE(owner[v], -1);
    // Brute-force owner with lowest index on ties.
    int best = 0;
    for (int j = 1; j < cps.size(); ++j)
      if ((m.nodes[v] - cps.positions[j]).squaredNorm() < (m.nodes[v] - cps.positions[best]).squaredNorm()) best = j;
    EXPECT_EQ(owner[v], best);
  }
}

TEST(Voronoi, TieGoesToLowerIndex) {
  const TetMesh m = box_mesh(2, 1, 1, Vec3(2, 1, 1));
  ControlPointSet cps;
  cps.positions = {Vec3(0, 0, 0), Vec3(2, 0, 0)};
  cps.nearest_node = {0, 2};
  std::vector<int> mid{1};  // node (1, 0, 0) is equidistant
  EXPECT_EQ(voronoi_tile(m, cps, 0, mid), std::vector<int>{1});
  EXPECT_TRUE(voronoi_tile(m, cps, 1, mid).empty());
}

TEST(Voronoi, InvariantUnderCandidateOrder) {
  const TetMesh& m = small_phantom_mesh();
  auto cand = m.patch_nodes(kPosterior);
  const auto cps = kmeans_control_points(m, kPosterior, 6, 2);
  const auto ref = voronoi_tile(m, cps, 3, cand);
  std::mt19937_64 gen(12);
  std::shuffle(cand.begin(), cand.end(), gen);
  EXPECT_EQ(voronoi_tile(m, cps, 3, cand), ref);
}

TEST(ClosestPoint, OnSurfaceAndAlongNormal) {
  const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
  const Vec3 p(0.2, 0.3, 0);
  EXPECT_LT((closest_point_on_triangle(p, a, b, c) - p).norm(), 1e-16);
  const Vec3 q = closest_point_on_triangle(p + Vec3(0, 0, 0.7), a, b, c);
  EXPECT_NEAR((q - p).norm(), 0.0, 1e-15);
  std::vector<Vec3> nodes{a, b, c};
  std::vector<Tri> tris{Tri{0, 1, 2}};
  const auto hit = closest_point_on_surface(p + Vec3(0, 0, 0.7), nodes, tris);
  EXPECT_NEAR(hit.squared_distance, 0.49, 1e-15);
  EXPECT_EQ(hit.triangle, 0);
  EXPECT_THROW(closest_point_on_surface(p, nodes, {}), Error);
}

TEST(ClosestPoint, MatchesDenseSamplingOracle) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  constexpr int kSamples = 600;
  for (int trial = 0; trial < 40; ++trial) {
    const Vec3 a(u(gen), u(gen), u(gen)), b(u(gen), u(gen), u(gen)), c(u(gen), u(gen), u(gen));
    const Vec3 p = 2.0 * Vec3(u(gen), u(gen), u(gen));
    const Vec3 q = closest_point_on_triangle(p, a, b, c);
    // No sample of a dense barycentric grid may beat q.
    double best = std::numeric_limits<double>::infinity();
    Vec3 best_pt;
    for (int i = 0; i <= kSamples; ++i)
      for (int j = 0; i + j <= kSamples; ++j) {
        const double s = double(i) / kSamples, t = double(j) / kSamples;
        const Vec3 x = a + s * (b - a) + t * (c - a);
        const double d = (x - p).squaredNorm();
        if (d < best) {
          best = d;
          best_pt = x;
        }
      }
    const double dq = (q - p).squaredNorm();
    EXPECT_LE(dq, best + 1e-12);
    EXPECT_NEAR(std::sqrt(dq), std::sqrt(best), 6.0 / kSamples);
    EXPECT_LE((q - best_pt).norm(), 0.05);
  }
}

TEST(ClosestPoint, BeyondEdgeLandsOnEdgeOrVertex) {
  const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
  EXPECT_NEAR((closest_point_on_triangle(Vec3(0.5, -1, 0.3), a, b, c) - Vec3(0.5, 0, 0)).norm(), 0, 1e-15);
  EXPECT_NEAR((closest_point_on_triangle(Vec3(2, 2, 0), a, b, c) - Vec3(0.5, 0.5, 0)).norm(), 0, 1e-15);
  EXPECT_EQ(closest_point_on_triangle(Vec3(-1, -1, 1), a, b, c), a);
  EXPECT_EQ(closest_point_on_triangle(Vec3(3, -0.5, 0), a, b, c), b);
}

TEST(Bvh, MatchesBruteForce) {
  const TetMesh& m = small_phantom_mesh();
  std::vector<Vec3> pos = m.nodes;
  SurfaceBvh bvh(pos, m.boundary_tris);
  std::mt19937_64 gen(77);
  std::uniform_real_distribution<double> u(-0.08, 0.08);
  for (int round = 0; round < 2; ++round) {
    for (int i = 0; i < 300; ++i) {
      const Vec3 p(u(gen), u(gen), u(gen));
      const auto ref = closest_point_on_surface(p, pos, m.boundary_tris);
      const auto got = bvh.closest(p, i % 7 == 0 ? 3 : -1);
      EXPECT_EQ(got.triangle, ref.triangle);
      EXPECT_NEAR(got.squared_distance, ref.squared_distance, 1e-12);
    }
    for (auto& x : pos) x += 0.003 * Vec3(std::sin(40 * x.y()), std::cos(30 * x.z()), std::sin(50 * x.x()));
    bvh.refit(pos);
  }
}

TEST(Barycentric, VertexAndCentroid) {
  const TetMesh m = single_tet();
  const auto v = barycentric_locate(m, m.nodes[2]);
  ASSERT_TRUE(v);
  EXPECT_NEAR(v->weights[2], 1.0, 1e-15);
  const auto c = barycentric_locate(m, Vec3(0.25, 0.25, 0.25));
  ASSERT_TRUE(c);
  for (double w : c->weights) EXPECT_NEAR(w, 0.25, 1e-15);
  EXPECT_FALSE(barycentric_locate(m, Vec3(1, 1, 1)));
}

TEST(Barycentric, RandomInteriorPointsReconstruct) {
  const TetMesh& m = small_phantom_mesh();
  TetLocator locator(m);
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(m.tets.size()) - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const Tet& t = m.tets[pick(gen)];
    double w[4], s = 0;
    for (double& x : w) s += (x = u(gen) + 1e-3);
    Vec3 p = Vec3::Zero();
    for (int a = 0; a < 4; ++a) p += (w[a] / s) * m.nodes[t[a]];
    const auto hit = barycentric_locate(m, p);
    ASSERT_TRUE(hit);
    double sum = 0;
    Vec3 r = Vec3::Zero();
    for (int a = 0; a < 4; ++a) {
      sum += hit->weights[a];
      EXPECT_GE(hit->weights[a], -1e-9);
      r += hit->weights[a] * m.nodes[m.tets[hit->tet][a]];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_LT((r - p).norm(), 1e-9);
    const auto fast = locator.locate(p);
    ASSERT_TRUE(fast);
    EXPECT_EQ(fast->tet, hit->tet);
  }
  EXPECT_FALSE(locator.locate(Vec3(1, 1, 1)));
}
