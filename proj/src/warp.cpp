#include "kreg/warp.hpp"

#include "kreg/parallel.hpp"

#include <cmath>

namespace kreg {

std::optional<float> sample_trilinear(const Volume& v, const Vec3& p) {
  std::array<int, 3> i0{};
  std::array<double, 3> frac{};
  for (int d = 0; d < 3; ++d) {
    double g = (p[d] - v.origin[d]) / v.spacing[d];
    const double r = std::round(g);
    if (std::abs(g - r) < 1e-9) g = r;
    if (g < 0.0 || g > v.dims[d] - 1) return std::nullopt;
    i0[d] = static_cast<int>(std::floor(g));
    frac[d] = g - i0[d];
    if (i0[d] == v.dims[d] - 1) {
      i0[d] = v.dims[d] - 1;
      frac[d] = 0.0;
    }
  }
  double out = 0.0;
  for (int c = 0; c < 8; ++c) {
    double w = 1.0;
    std::array<int, 3> idx = i0;
    for (int d = 0; d < 3; ++d) {
      if (c >> d & 1) {
        if (frac[d] == 0.0) {
          w = 0.0;
          break;
        }
        w *= frac[d];
        ++idx[d];
      } else {
        w *= 1.0 - frac[d];
      }
    }
    if (w == 0.0) continue;
    out += w * v.data[v.index(idx[0], idx[1], idx[2])];
  }
  return static_cast<float>(out);
}

std::optional<Vec3> interpolate_displacement(const TetMesh& mesh, const TetLocator& locator,
                                             const Eigen::VectorXd& displacement, const Vec3& p) {
  const auto hit = locator.locate(p);
  if (!hit) return std::nullopt;
  Vec3 u = Vec3::Zero();
  for (int a = 0; a < 4; ++a) u += hit->weights[a] * displacement.segment<3>(3 * static_cast<Index>(mesh.tets[hit->tet][a]));
  return u;
}

Volume warp_volume(const Volume& input, const TetMesh& mesh, const Eigen::VectorXd& displacement,
                   const WarpOptions& options) {
  const std::size_t n = static_cast<std::size_t>(input.dims[0]) * input.dims[1] * input.dims[2];
  if (input.data.size() != n) throw Error("warp: volume data does not match its dims");
  if (displacement.size() != 3 * mesh.num_nodes()) throw Error("warp: displacement length does not match the mesh");
  const TetLocator locator(mesh);
  Volume out = input;
  parallel_for(input.dims[2], options.threads, [&](Index k) {
    for (int j = 0; j < input.dims[1]; ++j)
      for (int i = 0; i < input.dims[0]; ++i) {
        const Vec3 x = input.position(i, j, static_cast<int>(k));
        Vec3 y = x;
        bool ok = true;
        for (int it = 0; it < options.max_iterations; ++it) {
          const auto u = interpolate_displacement(mesh, locator, displacement, y);
          if (!u) {
            ok = false;
            break;
          }
          const Vec3 next = x - *u;
          const double step = (next - y).norm();
          y = next;
          if (step < options.tolerance) break;
        }
        if (!ok) continue;
        if (const auto s = sample_trilinear(input, y)) out.data[input.index(i, j, static_cast<int>(k))] = *s;
      }
  });
  return out;
}

}  // namespace kreg
