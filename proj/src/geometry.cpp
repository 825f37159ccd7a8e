#include "kreg/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace kreg {

namespace {

constexpr double kInsideTol = 1e-9;

struct FaceRecord {
  Tri key;       // sorted node ids
  Tri oriented;  // outward orientation w.r.t. the owning tet
  int tet;
};

Tri sorted_tri(Tri t) {
  std::sort(t.begin(), t.end());
  return t;
}

}  // namespace

double signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).dot((c - a).cross(d - a)) / 6.0;
}

std::vector<int> TetMesh::boundary_nodes() const {
  std::vector<int> out;
  out.reserve(boundary_tris.size() * 3);
  for (const auto& t : boundary_tris) out.insert(out.end(), t.begin(), t.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<int> TetMesh::patch_nodes(const std::string& patch) const {
  if (patch == kEntireSurface || patch == "entire") return boundary_nodes();
  auto it = patch_labels.find(patch);
  if (it == patch_labels.end()) return {};
  return it->second;
}

Vec3 TetMesh::centroid() const {
  Vec3 c = Vec3::Zero();
  for (const auto& x : nodes) c += x;
  return nodes.empty() ? c : Vec3(c / static_cast<double>(nodes.size()));
}

double TetMesh::volume() const {
  double v = 0.0;
  for (const auto& t : tets) v += signed_volume(nodes[t[0]], nodes[t[1]], nodes[t[2]], nodes[t[3]]);
  return v;
}

std::vector<Tri> extract_surface(const TetMesh& mesh) {
  const auto n = static_cast<int>(mesh.nodes.size());
  std::vector<FaceRecord> faces;
  faces.reserve(mesh.tets.size() * 4);
  static constexpr int kOpposite[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};
  for (std::size_t e = 0; e < mesh.tets.size(); ++e) {
    const Tet& t = mesh.tets[e];
    for (int v : t) {
      if (v < 0 || v >= n) {
        std::ostringstream msg;
        msg << "tet " << e << " references node " << v << " outside [0, " << n << ")";
        throw Error(msg.str());
      }
    }
    const double vol =
        signed_volume(mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]], mesh.nodes[t[3]]);
    if (!(vol > 0.0)) {
      std::ostringstream msg;
      msg << "inverted or degenerate tet " << e << " (signed volume " << vol << ")";
      throw Error(msg.str());
    }
    const Vec3 centroid =
        (mesh.nodes[t[0]] + mesh.nodes[t[1]] + mesh.nodes[t[2]] + mesh.nodes[t[3]]) / 4.0;
    for (const auto& local : kOpposite) {
      Tri f{t[local[0]], t[local[1]], t[local[2]]};
      const Vec3& a = mesh.nodes[f[0]];
      const Vec3& b = mesh.nodes[f[1]];
      const Vec3& c = mesh.nodes[f[2]];
      const Vec3 normal = (b - a).cross(c - a);
      if (normal.dot((a + b + c) / 3.0 - centroid) < 0.0) std::swap(f[1], f[2]);
      faces.push_back({sorted_tri(f), f, static_cast<int>(e)});
    }
  }
  std::sort(faces.begin(), faces.end(),
            [](const FaceRecord& l, const FaceRecord& r) { return l.key < r.key; });

  std::vector<Tri> boundary;
  for (std::size_t i = 0; i < faces.size();) {
    std::size_t j = i + 1;
    while (j < faces.size() && faces[j].key == faces[i].key) ++j;
    if (j - i == 1) {
      boundary.push_back(faces[i].oriented);
    } else if (j - i > 2) {
      std::ostringstream msg;
      msg << "face shared by " << (j - i) << " tets (first tet " << faces[i].tet << ")";
      throw Error(msg.str());
    }
    i = j;
  }
  return boundary;
}

std::size_t count_bad_boundary_edges(std::span<const Tri> tris) {
  // Directed edge (a, b) must pair with exactly one (b, a).
  std::map<std::pair<int, int>, int> directed;
  for (const auto& t : tris) {
    for (int i = 0; i < 3; ++i) ++directed[{t[i], t[(i + 1) % 3]}];
  }
  std::size_t bad = 0;
  for (const auto& [edge, count] : directed) {
    auto it = directed.find({edge.second, edge.first});
    const int opposite = it == directed.end() ? 0 : it->second;
    if (count != 1 || opposite != 1) ++bad;
  }
  return bad;
}

TetMesh make_mesh(std::vector<Vec3> nodes, std::vector<Tet> tets,
                  std::map<std::string, std::vector<int>> patch_labels) {
  TetMesh mesh;
  mesh.nodes = std::move(nodes);
  mesh.tets = std::move(tets);
  if (mesh.tets.empty()) throw Error("mesh has no tets");
  mesh.boundary_tris = extract_surface(mesh);

  const std::vector<int> boundary = mesh.boundary_nodes();
  for (auto& [name, ids] : patch_labels) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (int id : ids) {
      if (!std::binary_search(boundary.begin(), boundary.end(), id)) {
        std::ostringstream msg;
        msg << "patch '" << name << "' contains non-boundary node " << id;
        throw Error(msg.str());
      }
    }
  }
  mesh.patch_labels = std::move(patch_labels);
  return mesh;
}

std::vector<Vec3> boundary_node_normals(const TetMesh& mesh) {
  std::vector<Vec3> normals(mesh.nodes.size(), Vec3::Zero());
  for (const auto& t : mesh.boundary_tris) {
    const Vec3 n = (mesh.nodes[t[1]] - mesh.nodes[t[0]]).cross(mesh.nodes[t[2]] - mesh.nodes[t[0]]);
    for (int v : t) normals[v] += n;  // |n| = 2 * area
  }
  for (auto& n : normals) {
    const double len = n.norm();
    if (len > 0.0) n /= len;
  }
  return normals;
}

std::vector<double> lumped_boundary_area(const TetMesh& mesh) {
  std::vector<double> area(mesh.nodes.size(), 0.0);
  for (const auto& t : mesh.boundary_tris) {
    const double a =
        0.5 * (mesh.nodes[t[1]] - mesh.nodes[t[0]]).cross(mesh.nodes[t[2]] - mesh.nodes[t[0]]).norm();
    for (int v : t) area[v] += a / 3.0;
  }
  return area;
}

double mean_boundary_edge_length(const TetMesh& mesh) {
  std::set<std::pair<int, int>> edges;
  for (const auto& t : mesh.boundary_tris) {
    for (int i = 0; i < 3; ++i) {
      const int a = t[i];
      const int b = t[(i + 1) % 3];
      edges.insert({std::min(a, b), std::max(a, b)});
    }
  }
  if (edges.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [a, b] : edges) total += (mesh.nodes[a] - mesh.nodes[b]).norm();
  return total / static_cast<double>(edges.size());
}

ControlPointSet kmeans_control_points(const TetMesh& mesh, const std::string& patch, int k,
                                      std::uint64_t seed) {
  const std::vector<int> candidates = mesh.patch_nodes(patch);
  if (candidates.empty()) throw Error("patch '" + patch + "' has no candidate boundary nodes");
  const auto n = static_cast<int>(candidates.size());
  if (k < 1) throw Error("k must be at least 1");
  if (k > n) {
    std::ostringstream msg;
    msg << "k = " << k << " exceeds the " << n << " candidate nodes of patch '" << patch << "'";
    throw Error(msg.str());
  }

  std::vector<Vec3> pts(n);
  for (int i = 0; i < n; ++i) pts[i] = mesh.nodes[candidates[i]];

  // Farthest-point seeding.
  std::mt19937_64 gen(seed);
  const int start = static_cast<int>(gen() % static_cast<std::uint64_t>(n));
  std::vector<Vec3> centroids;
  centroids.reserve(k);
  centroids.push_back(pts[start]);
  std::vector<double> min_d2(n);
  for (int i = 0; i < n; ++i) min_d2[i] = (pts[i] - pts[start]).squaredNorm();
  while (static_cast<int>(centroids.size()) < k) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (min_d2[i] > min_d2[best]) best = i;
    centroids.push_back(pts[best]);
    for (int i = 0; i < n; ++i) min_d2[i] = std::min(min_d2[i], (pts[i] - pts[best]).squaredNorm());
  }

  // Lloyd iterations.
  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < 500; ++iter) {
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d2 = (pts[i] - centroids[0]).squaredNorm();
      for (int j = 1; j < k; ++j) {
        const double d2 = (pts[i] - centroids[j]).squaredNorm();
        if (d2 < best_d2) {
          best_d2 = d2;
          best = j;
        }
      }
      assign[i] = best;
    }
    std::vector<Vec3> sums(k, Vec3::Zero());
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums[assign[i]] += pts[i];
      ++counts[assign[i]];
    }
    double motion = 0.0;
    for (int j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;  // empty cluster keeps its centroid
      const Vec3 next = sums[j] / static_cast<double>(counts[j]);
      motion = std::max(motion, (next - centroids[j]).norm());
      centroids[j] = next;
    }
    if (motion < 1e-9) break;
  }

  // Snap to distinct candidate nodes.
  ControlPointSet cps;
  cps.source_patch = (patch == "entire") ? std::string(kEntireSurface) : patch;
  std::vector<char> taken(n, 0);
  for (int j = 0; j < k; ++j) {
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d2 = (pts[i] - centroids[j]).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = i;
      }
    }
    taken[best] = 1;
    cps.positions.push_back(pts[best]);
    cps.nearest_node.push_back(candidates[best]);
  }
  return cps;
}

std::vector<int> voronoi_tile(const TetMesh& mesh, const ControlPointSet& cps, int index,
                              std::span<const int> candidates) {
  if (index < 0 || index >= cps.size()) throw Error("control point index out of range");
  if (candidates.empty()) throw Error("voronoi_tile: empty candidate set");
  std::vector<int> tile;
  for (int node : candidates) {
    const Vec3& x = mesh.nodes[node];
    int best = 0;
    double best_d2 = (x - cps.positions[0]).squaredNorm();
    for (Index j = 1; j < cps.size(); ++j) {
      const double d2 = (x - cps.positions[j]).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = static_cast<int>(j);
      }
    }
    if (best == index) tile.push_back(node);
  }
  std::sort(tile.begin(), tile.end());
  tile.erase(std::unique(tile.begin(), tile.end()), tile.end());
  return tile;
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Voronoi-region walk over vertices, edges and the face interior.
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);

  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

ClosestPoint closest_point_on_surface(const Vec3& p, std::span<const Vec3> nodes,
                                      std::span<const Tri> tris) {
  if (tris.empty()) throw Error("closest_point_on_surface: empty surface");
  ClosestPoint best;
  best.squared_distance = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < tris.size(); ++t) {
    const Vec3 q = closest_point_on_triangle(p, nodes[tris[t][0]], nodes[tris[t][1]], nodes[tris[t][2]]);
    const double d2 = (q - p).squaredNorm();
    if (d2 < best.squared_distance) {
      best = {q, static_cast<int>(t), d2};
    }
  }
  return best;
}

std::array<double, 4> barycentric_weights(const TetMesh& mesh, int tet, const Vec3& p) {
  const Tet& t = mesh.tets[tet];
  const Vec3& a = mesh.nodes[t[0]];
  Mat3 m;
  m.col(0) = mesh.nodes[t[1]] - a;
  m.col(1) = mesh.nodes[t[2]] - a;
  m.col(2) = mesh.nodes[t[3]] - a;
  const Vec3 l = m.inverse() * (p - a);
  return {1.0 - l[0] - l[1] - l[2], l[0], l[1], l[2]};
}

std::optional<BarycentricHit> barycentric_locate(const TetMesh& mesh, const Vec3& p) {
  std::optional<BarycentricHit> best;
  double best_min = -std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < mesh.tets.size(); ++e) {
    const Tet& t = mesh.tets[e];
    Vec3 lo = mesh.nodes[t[0]];
    Vec3 hi = lo;
    for (int i = 1; i < 4; ++i) {
      lo = lo.cwiseMin(mesh.nodes[t[i]]);
      hi = hi.cwiseMax(mesh.nodes[t[i]]);
    }
    const double pad = 1e-9 * std::max(1.0, (hi - lo).maxCoeff());
    if ((p.array() < lo.array() - pad).any() || (p.array() > hi.array() + pad).any()) continue;
    const auto w = barycentric_weights(mesh, static_cast<int>(e), p);
    const double wmin = *std::min_element(w.begin(), w.end());
    if (wmin >= -kInsideTol && wmin > best_min) {
      best_min = wmin;
      best = BarycentricHit{static_cast<int>(e), w};
    }
  }
  return best;
}

}  // namespace kreg
