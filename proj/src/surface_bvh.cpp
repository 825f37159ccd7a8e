#include "kreg/spatial.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace kreg {

namespace {

constexpr int kLeafSize = 4;

double box_squared_distance(const Eigen::AlignedBox3d& box, const Vec3& p) {
  const Vec3 d = (box.min() - p).cwiseMax(p - box.max()).cwiseMax(0.0);
  return d.squaredNorm();
}

}  // namespace

SurfaceBvh::SurfaceBvh(std::vector<Vec3> positions, std::vector<Tri> tris)
    : positions_(std::move(positions)), tris_(std::move(tris)) {
  if (tris_.empty()) throw Error("SurfaceBvh: empty surface");
  std::vector<Vec3> centers(tris_.size());
  for (std::size_t t = 0; t < tris_.size(); ++t)
    centers[t] = (positions_[tris_[t][0]] + positions_[tris_[t][1]] + positions_[tris_[t][2]]) / 3.0;
  order_.resize(tris_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * tris_.size() / kLeafSize + 2);
  build(0, static_cast<int>(tris_.size()), centers);
  refit_node(0);
}

int SurfaceBvh::build(int first, int count, const std::vector<Vec3>& centers) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({});
  if (count <= kLeafSize) {
    nodes_[id].first = first;
    nodes_[id].count = count;
    return id;
  }
  Eigen::AlignedBox3d cbox;
  for (int i = first; i < first + count; ++i) cbox.extend(centers[order_[i]]);
  Index axis = 0;
  cbox.sizes().maxCoeff(&axis);
  const int mid = first + count / 2;
  std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                   [&](int a, int b) {
                     if (centers[a][axis] != centers[b][axis]) return centers[a][axis] < centers[b][axis];
                     return a < b;
                   });
  const int left = build(first, mid - first, centers);
  const int right = build(mid, first + count - mid, centers);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void SurfaceBvh::refit_node(int node) {
  Node& n = nodes_[node];
  n.box.setEmpty();
  if (n.left < 0) {
    for (int i = n.first; i < n.first + n.count; ++i) {
      for (int v : tris_[order_[i]]) n.box.extend(positions_[v]);
    }
    return;
  }
  refit_node(n.left);
  refit_node(n.right);
  n.box = nodes_[n.left].box.merged(nodes_[n.right].box);
}

void SurfaceBvh::refit(std::span<const Vec3> positions) {
  if (positions.size() != positions_.size()) throw Error("SurfaceBvh::refit: position count mismatch");
  std::copy(positions.begin(), positions.end(), positions_.begin());
  refit_node(0);
}

ClosestPoint SurfaceBvh::closest(const Vec3& p, int hint) const {
  ClosestPoint best;
  best.squared_distance = std::numeric_limits<double>::infinity();
  auto consider = [&](int t) {
    const Tri& tri = tris_[t];
    const Vec3 q = closest_point_on_triangle(p, positions_[tri[0]], positions_[tri[1]], positions_[tri[2]]);
    const double d2 = (q - p).squaredNorm();
    if (d2 < best.squared_distance || (d2 == best.squared_distance && t < best.triangle)) {
      best = {q, t, d2};
    }
  };
  if (hint >= 0 && hint < static_cast<int>(tris_.size())) consider(hint);

  int stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& n = nodes_[stack[--top]];
    // Slack keeps exact ties reachable when the box distance rounds upward.
    if (box_squared_distance(n.box, p) > best.squared_distance * (1.0 + 1e-9)) continue;
    if (n.left < 0) {
      for (int i = n.first; i < n.first + n.count; ++i) consider(order_[i]);
      continue;
    }
    const double dl = box_squared_distance(nodes_[n.left].box, p);
    const double dr = box_squared_distance(nodes_[n.right].box, p);
    // Push the farther child first so the nearer one is popped next.
    if (dl <= dr) {
      stack[top++] = n.right;
      stack[top++] = n.left;
    } else {
      stack[top++] = n.left;
      stack[top++] = n.right;
    }
  }
  return best;
}

}  // namespace kreg
