#pragma once

#include "kreg/geometry.hpp"

#include <Eigen/Geometry>

namespace kreg {

/// Bounding-volume hierarchy over a triangle surface whose connectivity is
/// fixed but whose vertex positions move (refit, no rebuild). Queries return
/// exactly what closest_point_on_surface returns, including tie-breaking.
class SurfaceBvh {
 public:
  SurfaceBvh() = default;
  SurfaceBvh(std::vector<Vec3> positions, std::vector<Tri> tris);

  void refit(std::span<const Vec3> positions);
  /// `hint` is a triangle evaluated first to tighten the pruning bound.
  ClosestPoint closest(const Vec3& p, int hint = -1) const;

  std::span<const Vec3> positions() const { return positions_; }
  std::span<const Tri> triangles() const { return tris_; }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1;
    int right = -1;
    int first = 0;
    int count = 0;
  };

  int build(int first, int count, const std::vector<Vec3>& centers);
  void refit_node(int node);

  std::vector<Vec3> positions_;
  std::vector<Tri> tris_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

/// Uniform-grid point location in a tet mesh. Same selection rule as
/// barycentric_locate. Holds a reference; the mesh must outlive it.
class TetLocator {
 public:
  explicit TetLocator(const TetMesh& mesh);
  std::optional<BarycentricHit> locate(const Vec3& p) const;

 private:
  const TetMesh& mesh_;
  Vec3 origin_;
  double cell_ = 1.0;
  std::array<int, 3> dims_{};
  std::vector<int> cell_start_;
  std::vector<int> cell_tets_;
  std::vector<Eigen::AlignedBox3d> boxes_;
};

}  // namespace kreg
