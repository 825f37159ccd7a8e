#pragma once

#include "kreg/io.hpp"
#include "kreg/spatial.hpp"

namespace kreg {

struct WarpOptions {
  double tolerance = 1e-6;  // m, on successive inverse-map iterates
  int max_iterations = 20;
  int threads = 1;
};

/// Trilinear sample at physical position p. Fractional voxel coordinates
/// within 1e-9 of an integer are snapped so voxel centers return stored
/// values exactly. Returns nullopt outside the sampled grid.
std::optional<float> sample_trilinear(const Volume& volume, const Vec3& p);

/// Displacement interpolated at p, or nullopt when p is outside the mesh.
std::optional<Vec3> interpolate_displacement(const TetMesh& mesh, const TetLocator& locator,
                                             const Eigen::VectorXd& displacement, const Vec3& p);

/// Inverse-mapping resample: for each output voxel center x the source y
/// solves y + u(y) = x by the iteration y <- x - u(y). Voxels whose center,
/// iterate or source lies outside the mesh or the grid keep their value.
Volume warp_volume(const Volume& input, const TetMesh& mesh, const Eigen::VectorXd& displacement,
                   const WarpOptions& options = {});

}  // namespace kreg
