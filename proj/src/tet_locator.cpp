#include "kreg/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kreg {

TetLocator::TetLocator(const TetMesh& mesh) : mesh_(mesh) {
  if (mesh.tets.empty()) throw Error("TetLocator: empty mesh");
  Eigen::AlignedBox3d all;
  boxes_.resize(mesh.tets.size());
  for (std::size_t e = 0; e < mesh.tets.size(); ++e) {
    for (int v : mesh.tets[e]) boxes_[e].extend(mesh.nodes[v]);
    const double pad = 1e-9 * std::max(1.0, boxes_[e].sizes().maxCoeff());
    boxes_[e].min().array() -= pad;
    boxes_[e].max().array() += pad;
    all.extend(boxes_[e]);
  }
  const Vec3 size = all.sizes();
  const double volume = std::max(size.prod(), 1e-300);
  cell_ = std::cbrt(volume / static_cast<double>(mesh.tets.size())) * 1.5;
  if (!(cell_ > 0.0)) cell_ = std::max(size.maxCoeff(), 1e-12);
  origin_ = all.min();
  for (int a = 0; a < 3; ++a) dims_[a] = std::max(1, static_cast<int>(std::ceil(size[a] / cell_)));

  auto cell_range = [&](const Eigen::AlignedBox3d& b, std::array<int, 3>& lo, std::array<int, 3>& hi) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::clamp(static_cast<int>(std::floor((b.min()[a] - origin_[a]) / cell_)), 0, dims_[a] - 1);
      hi[a] = std::clamp(static_cast<int>(std::floor((b.max()[a] - origin_[a]) / cell_)), 0, dims_[a] - 1);
    }
  };
  const std::size_t ncells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
  std::vector<int> counts(ncells + 1, 0);
  std::array<int, 3> lo{}, hi{};
  for (const auto& b : boxes_) {
    cell_range(b, lo, hi);
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[0]; x <= hi[0]; ++x) ++counts[(static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x];
  }
  cell_start_.assign(ncells + 1, 0);
  for (std::size_t c = 0; c < ncells; ++c) cell_start_[c + 1] = cell_start_[c] + counts[c];
  cell_tets_.resize(cell_start_[ncells]);
  std::vector<int> cursor(cell_start_.begin(), cell_start_.end() - 1);
  for (std::size_t e = 0; e < boxes_.size(); ++e) {
    cell_range(boxes_[e], lo, hi);
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[0]; x <= hi[0]; ++x)
          cell_tets_[cursor[(static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x]++] = static_cast<int>(e);
  }
}

std::optional<BarycentricHit> TetLocator::locate(const Vec3& p) const {
  std::array<int, 3> c{};
  for (int a = 0; a < 3; ++a) {
    const double f = (p[a] - origin_[a]) / cell_;
    if (!(f >= -1e-12) || f > dims_[a] + 1e-12) return std::nullopt;
    c[a] = std::clamp(static_cast<int>(std::floor(f)), 0, dims_[a] - 1);
  }
  const std::size_t cell = (static_cast<std::size_t>(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0];
  std::optional<BarycentricHit> best;
  double best_min = -std::numeric_limits<double>::infinity();
  for (int i = cell_start_[cell]; i < cell_start_[cell + 1]; ++i) {
    const int e = cell_tets_[i];
    if (!boxes_[e].contains(p)) continue;
    const auto w = barycentric_weights(mesh_, e, p);
    const double wmin = *std::min_element(w.begin(), w.end());
    if (wmin >= -1e-9 && wmin > best_min) {
      best_min = wmin;
      best = BarycentricHit{e, w};
    }
  }
  return best;
}

}  // namespace kreg
