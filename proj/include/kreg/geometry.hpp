#pragma once

#include "kreg/types.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kreg {

using Tet = std::array<int, 4>;
using Tri = std::array<int, 3>;

inline constexpr const char* kPosterior = "posterior";
inline constexpr const char* kAnterior = "anterior";
inline constexpr const char* kEntireSurface = "entire surface";

/// Tetrahedral volume mesh with its outward boundary and labeled surface
/// patches. Build through make_mesh() so the invariants hold.
struct TetMesh {
  std::vector<Vec3> nodes;
  std::vector<Tet> tets;
  std::vector<Tri> boundary_tris;
  /// Patch name -> sorted boundary node ids.
  std::map<std::string, std::vector<int>> patch_labels;

  Index num_nodes() const { return static_cast<Index>(nodes.size()); }
  Index num_tets() const { return static_cast<Index>(tets.size()); }

  /// Sorted unique node ids referenced by boundary_tris.
  std::vector<int> boundary_nodes() const;
  /// Nodes of the named patch; kEntireSurface (or "entire") yields all
  /// boundary nodes.
  std::vector<int> patch_nodes(const std::string& patch) const;
  Vec3 centroid() const;
  double volume() const;
};

double signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);

/// Validates indices, tet orientation and patch labels, then extracts the
/// boundary. Throws Error naming the first offending element.
TetMesh make_mesh(std::vector<Vec3> nodes, std::vector<Tet> tets,
                  std::map<std::string, std::vector<int>> patch_labels = {});

/// Faces belonging to exactly one tet, oriented so the normal points away
/// from the owning tet's centroid. Output is sorted by face key.
std::vector<Tri> extract_surface(const TetMesh& mesh);

/// Count of boundary edges not shared by exactly two triangles with
/// opposite orientation. Zero means a closed oriented 2-manifold edge set.
std::size_t count_bad_boundary_edges(std::span<const Tri> tris);

/// Area-weighted outward normals at boundary nodes (zero elsewhere).
std::vector<Vec3> boundary_node_normals(const TetMesh& mesh);
/// One third of each incident boundary triangle area, per node.
std::vector<double> lumped_boundary_area(const TetMesh& mesh);
double mean_boundary_edge_length(const TetMesh& mesh);

struct ControlPointSet {
  std::vector<Vec3> positions;
  std::vector<int> nearest_node;
  std::string source_patch;

  Index size() const { return static_cast<Index>(positions.size()); }
};

/// Lloyd k-means over the candidate boundary nodes of `patch`, seeded by
/// farthest-point sampling from a seed-chosen start node. Centroids are
/// snapped to distinct candidate nodes.
ControlPointSet kmeans_control_points(const TetMesh& mesh, const std::string& patch, int k,
                                      std::uint64_t seed);

/// Candidate nodes whose nearest control point is `index` (ties go to the
/// lower control point id). Returned sorted.
std::vector<int> voronoi_tile(const TetMesh& mesh, const ControlPointSet& cps, int index,
                              std::span<const int> candidates);

struct SurfacePointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty or same length as points
};

struct ClosestPoint {
  Vec3 point;
  int triangle = -1;
  double squared_distance = 0.0;
};

/// Closest point on triangle (a, b, c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Exhaustive search; ties resolved toward the lower triangle id.
ClosestPoint closest_point_on_surface(const Vec3& p, std::span<const Vec3> nodes,
                                      std::span<const Tri> tris);

struct BarycentricHit {
  int tet = -1;
  std::array<double, 4> weights{};
};

/// Barycentric weights of p in tet t; weights sum to one.
std::array<double, 4> barycentric_weights(const TetMesh& mesh, int tet, const Vec3& p);

/// Tet containing p (all weights >= -1e-9). When several qualify, the one
/// with the largest minimum weight wins, then the lower id.
std::optional<BarycentricHit> barycentric_locate(const TetMesh& mesh, const Vec3& p);

}  // namespace kreg
