#include "kreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

namespace kreg {

void PhantomSpec::validate() const {
  if (!(semi_axes.minCoeff() > 0.0) || !semi_axes.allFinite()) throw Error("phantom semi-axes must be positive");
  if (!(target_edge_length > 0.0) || !(target_edge_length < semi_axes.minCoeff() / 3.0))
    throw Error("phantom edge length must be positive and below a third of the smallest semi-axis");
}

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

using FaceKey = std::array<int, 3>;

FaceKey sorted_face(int a, int b, int c) {
  FaceKey f{a, b, c};
  std::sort(f.begin(), f.end());
  return f;
}

constexpr int kFaces[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};

// Face -> owning live tets.
std::map<FaceKey, std::vector<int>> face_owners(const std::vector<Tet>& tets, const std::vector<char>& alive) {
  std::map<FaceKey, std::vector<int>> owners;
  for (std::size_t e = 0; e < tets.size(); ++e) {
    if (!alive[e]) continue;
    const Tet& t = tets[e];
    for (const auto& f : kFaces) owners[sorted_face(t[f[0]], t[f[1]], t[f[2]])].push_back(static_cast<int>(e));
  }
  return owners;
}

void keep_largest_component(const std::vector<Tet>& tets, std::vector<char>& alive) {
  UnionFind uf(tets.size());
  for (const auto& [face, own] : face_owners(tets, alive))
    if (own.size() == 2) uf.unite(own[0], own[1]);
  std::map<int, int> size;
  for (std::size_t e = 0; e < tets.size(); ++e)
    if (alive[e]) ++size[uf.find(static_cast<int>(e))];
  int best = -1, best_size = 0;
  for (const auto& [root, n] : size)
    if (n > best_size) best = root, best_size = n;
  for (std::size_t e = 0; e < tets.size(); ++e)
    if (alive[e] && uf.find(static_cast<int>(e)) != best) alive[e] = 0;
}

// Boundary edges not shared by exactly two boundary faces, and boundary
// vertices whose incident faces form more than one fan.
void boundary_defects(const std::vector<Tet>& tets, const std::vector<char>& alive,
                      std::vector<std::pair<int, int>>& bad_edges, std::vector<int>& bad_vertices) {
  std::vector<FaceKey> boundary;
  for (const auto& [face, own] : face_owners(tets, alive))
    if (own.size() == 1) boundary.push_back(face);

  std::map<std::pair<int, int>, int> edge_faces;
  std::map<int, std::vector<int>> vertex_faces;
  for (std::size_t i = 0; i < boundary.size(); ++i) {
    const FaceKey& f = boundary[i];
    for (int a = 0; a < 3; ++a) {
      ++edge_faces[{std::min(f[a], f[(a + 1) % 3]), std::max(f[a], f[(a + 1) % 3])}];
      vertex_faces[f[a]].push_back(static_cast<int>(i));
    }
  }
  bad_edges.clear();
  for (const auto& [edge, n] : edge_faces)
    if (n != 2) bad_edges.push_back(edge);

  bad_vertices.clear();
  for (const auto& [v, faces] : vertex_faces) {
    UnionFind uf(faces.size());
    std::map<int, int> first_with;  // other vertex -> local face index
    for (std::size_t i = 0; i < faces.size(); ++i) {
      for (int w : boundary[faces[i]]) {
        if (w == v) continue;
        const auto [it, fresh] = first_with.emplace(w, static_cast<int>(i));
        if (!fresh) uf.unite(it->second, static_cast<int>(i));
      }
    }
    std::set<int> roots;
    for (std::size_t i = 0; i < faces.size(); ++i) roots.insert(uf.find(static_cast<int>(i)));
    if (roots.size() > 1) bad_vertices.push_back(v);
  }
}

}  // namespace

TetMesh generate_phantom_mesh(const PhantomSpec& spec) {
  spec.validate();
  const double h = spec.target_edge_length;
  const Vec3& ax = spec.semi_axes;
  std::array<int, 3> half{}, dims{};
  for (int d = 0; d < 3; ++d) {
    half[d] = static_cast<int>(std::ceil(ax[d] / h)) + 1;
    dims[d] = 2 * half[d] + 1;
  }
  auto id = [&](int i, int j, int k) { return i + dims[0] * (j + dims[1] * k); };
  auto radius = [&](const Vec3& p) { return p.cwiseQuotient(ax).squaredNorm(); };

  std::vector<Vec3> grid(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]);
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i)
        grid[id(i, j, k)] = Vec3((i - half[0]) * h, (j - half[1]) * h, (k - half[2]) * h);

  // Kuhn split: every tet walks corner 0 -> 7 along one axis permutation,
  // so neighbouring cubes share face diagonals.
  constexpr int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  std::vector<Tet> tets;
  std::vector<double> tet_radius;
  for (int k = 0; k + 1 < dims[2]; ++k)
    for (int j = 0; j + 1 < dims[1]; ++j)
      for (int i = 0; i + 1 < dims[0]; ++i)
        for (const auto& p : perms) {
          std::array<int, 3> c{i, j, k};
          Tet t;
          t[0] = id(c[0], c[1], c[2]);
          for (int s = 0; s < 3; ++s) {
            ++c[p[s]];
            t[s + 1] = id(c[0], c[1], c[2]);
          }
          const Vec3 centroid = 0.25 * (grid[t[0]] + grid[t[1]] + grid[t[2]] + grid[t[3]]);
          if (radius(centroid) >= 1.0) continue;
          if (signed_volume(grid[t[0]], grid[t[1]], grid[t[2]], grid[t[3]]) < 0.0) std::swap(t[2], t[3]);
          tets.push_back(t);
          tet_radius.push_back(radius(centroid));
        }
  if (tets.empty()) throw Error("phantom mesh is empty");

  std::map<int, std::vector<int>> node_tets;
  for (std::size_t e = 0; e < tets.size(); ++e)
    for (int v : tets[e]) node_tets[v].push_back(static_cast<int>(e));

  std::vector<char> alive(tets.size(), 1);
  bool clean = false;
  for (int pass = 0; pass < 200 && !clean; ++pass) {
    keep_largest_component(tets, alive);
    std::vector<std::pair<int, int>> bad_edges;
    std::vector<int> bad_vertices;
    boundary_defects(tets, alive, bad_edges, bad_vertices);
    if (bad_edges.empty() && bad_vertices.empty()) {
      clean = true;
      break;
    }
    auto remove_outermost = [&](auto&& touches, int v) {
      int pick = -1;
      for (int e : node_tets[v])
        if (alive[e] && touches(e) && (pick < 0 || tet_radius[e] > tet_radius[pick])) pick = e;
      return pick;
    };
    std::set<int> doomed;
    for (const auto& [a, b] : bad_edges) {
      const int e = remove_outermost(
          [&](int t) { return std::find(tets[t].begin(), tets[t].end(), b) != tets[t].end(); }, a);
      if (e >= 0) doomed.insert(e);
    }
    for (int v : bad_vertices) {
      const int e = remove_outermost([](int) { return true; }, v);
      if (e >= 0) doomed.insert(e);
    }
    for (int e : doomed) alive[e] = 0;
  }
  if (!clean) throw Error("phantom mesh boundary is non-manifold");

  std::vector<int> remap(grid.size(), -1);
  std::vector<Vec3> nodes;
  std::vector<Tet> kept;
  for (std::size_t e = 0; e < tets.size(); ++e) {
    if (!alive[e]) continue;
    Tet t = tets[e];
    for (int& v : t) {
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(nodes.size());
        nodes.push_back(grid[v]);
      }
      v = remap[v];
    }
    kept.push_back(t);
  }
  if (kept.empty()) throw Error("phantom mesh is empty");

  TetMesh mesh = make_mesh(std::move(nodes), std::move(kept));
  if (count_bad_boundary_edges(mesh.boundary_tris) != 0) throw Error("phantom mesh boundary is non-manifold");
  const std::vector<Vec3> normals = boundary_node_normals(mesh);
  std::vector<int> posterior, anterior;
  for (int v : mesh.boundary_nodes()) {
    if (normals[v].z() < -0.3) posterior.push_back(v);
    if (normals[v].z() > 0.3) anterior.push_back(v);
  }
  if (posterior.empty() || anterior.empty()) throw Error("phantom mesh has an empty posterior or anterior patch");
  mesh.patch_labels[kPosterior] = std::move(posterior);
  mesh.patch_labels[kAnterior] = std::move(anterior);
  return mesh;
}

Eigen::VectorXd generate_ground_truth(const TetMesh& mesh, const MaterialMatrix& material, std::uint64_t seed,
                                      double amplitude) {
  const std::vector<int> posterior = mesh.patch_nodes(kPosterior);
  if (posterior.empty()) throw Error("ground truth: posterior patch is empty");
  if (!(amplitude >= 0.0)) throw Error("ground truth: amplitude must be non-negative");

  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int patches = 2 + static_cast<int>(gen() % 3);

  // Bump radius scales with the posterior extent.
  Eigen::AlignedBox3d box;
  for (int v : posterior) box.extend(mesh.nodes[v]);
  const double extent = box.diagonal().head<2>().norm();

  struct Bump {
    Vec3 center;
    double radius;
    Vec3 d;
  };
  std::vector<Bump> bumps;
  for (int p = 0; p < patches; ++p) {
    Bump b;
    b.center = mesh.nodes[posterior[gen() % posterior.size()]];
    b.radius = extent * (0.3 + 0.2 * unit(gen));
    const Vec3 dir = (Vec3::UnitZ() + 0.5 * Vec3(normal(gen), normal(gen), normal(gen))).normalized();
    b.d = amplitude * (0.7 + 0.3 * unit(gen)) * dir;
    bumps.push_back(b);
  }

  StiffnessSystem sys = assemble_stiffness(mesh, material);
  for (int v : posterior) {
    Vec3 num = Vec3::Zero();
    double weight = 0.0;
    for (const Bump& b : bumps) {
      const double r = (mesh.nodes[v] - b.center).norm();
      if (r >= b.radius) continue;
      // Flat core over the inner half, cos^2 rim outside it.
      const double t = std::clamp(2.0 * r / b.radius - 1.0, 0.0, 1.0);
      const double c = std::cos(0.5 * std::numbers::pi * t);
      num += c * c * b.d;
      weight += c * c;
    }
    const Vec3 u = num / std::max(1.0, weight);
    for (int d = 0; d < 3; ++d) sys.dirichlet[3 * static_cast<Index>(v) + d] = u[d];
  }
  return solve_displacement(sys, mesh.nodes).u;
}

RigidOffset random_rigid_offset(double translation, double rotation_rad, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto direction = [&] {
    Vec3 v;
    do v = Vec3(normal(gen), normal(gen), normal(gen));
    while (v.norm() < 1e-6);
    return v.normalized();
  };
  RigidOffset out;
  out.tau = translation * direction();
  out.theta = rotation_rad * direction();
  return out;
}

std::vector<Target> sample_targets(const TetMesh& mesh, const Eigen::VectorXd& displacement,
                                   const RigidOffset& rigid, int count, std::uint64_t seed) {
  const std::vector<int> boundary = mesh.boundary_nodes();
  std::vector<int> interior;
  for (int v = 0; v < static_cast<int>(mesh.nodes.size()); ++v)
    if (!std::binary_search(boundary.begin(), boundary.end(), v)) interior.push_back(v);
  if (count < 1 || static_cast<std::size_t>(count) > interior.size())
    throw Error("cannot place " + std::to_string(count) + " targets at " + std::to_string(interior.size()) +
                " interior nodes");
  std::mt19937_64 gen(seed);
  std::shuffle(interior.begin(), interior.end(), gen);
  interior.resize(count);

  std::vector<Vec3> moved;
  for (int v : interior) moved.push_back(mesh.nodes[v] + displacement.segment<3>(3 * static_cast<Index>(v)));
  moved = apply_rigid(moved, rigid.tau, rigid.theta, mesh.centroid());
  std::vector<Target> out;
  for (int i = 0; i < count; ++i) out.push_back({mesh.nodes[interior[i]], moved[i]});
  return out;
}

FeatureData sample_sparse_features(const GroundTruthCase& gt, double coverage, double noise, std::uint64_t seed,
                                   int fiducials) {
  if (!(coverage > 0.0 && coverage <= 1.0)) throw Error("coverage must lie in (0, 1]");
  if (!(noise >= 0.0)) throw Error("noise must be non-negative");
  const TetMesh& mesh = gt.mesh;
  std::vector<int> anterior = mesh.patch_nodes(kAnterior);
  const auto n = static_cast<std::size_t>(std::llround(coverage * static_cast<double>(anterior.size())));
  if (n < 10) throw Error("coverage yields " + std::to_string(n) + " points; at least 10 are required");

  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, noise > 0.0 ? noise : 1.0);
  auto jitter = [&] { return noise > 0.0 ? Vec3(normal(gen), normal(gen), normal(gen)) : Vec3::Zero(); };
  auto deformed = [&](int v) { return mesh.nodes[v] + gt.true_displacement.segment<3>(3 * static_cast<Index>(v)); };
  const Vec3 c = mesh.centroid();
  const Mat3 R = rotation_matrix(gt.rigid_offset.theta);
  auto to_data = [&](const Vec3& x) { return Vec3(R * (x - c) + c + gt.rigid_offset.tau); };

  std::shuffle(anterior.begin(), anterior.end(), gen);
  anterior.resize(n);
  std::sort(anterior.begin(), anterior.end());

  FeatureData out;
  Feature cloud;
  cloud.name = "anterior surface";
  cloud.kind = FeatureKind::surface_cloud;
  for (int v : anterior) cloud.points.push_back(to_data(deformed(v)) + jitter());
  out.features.push_back(std::move(cloud));

  if (fiducials > 0) {
    std::vector<int> boundary = mesh.patch_nodes(kAnterior);
    if (static_cast<std::size_t>(fiducials) > boundary.size()) throw Error("too many fiducials requested");
    std::shuffle(boundary.begin(), boundary.end(), gen);
    boundary.resize(fiducials);
    std::sort(boundary.begin(), boundary.end());
    Feature fid;
    fid.name = "fiducials";
    fid.kind = FeatureKind::corresponded_points;
    for (int v : boundary) {
      fid.points.push_back(to_data(deformed(v)) + jitter());
      fid.counterparts.push_back(mesh.nodes[v]);
    }
    out.features.push_back(std::move(fid));
  }
  return out;
}

GroundTruthCase make_case(const CaseConfig& config) {
  GroundTruthCase gt;
  gt.config = config;
  PhantomSpec spec = config.phantom;
  gt.mesh = generate_phantom_mesh(spec);
  const MaterialMatrix material = isotropic_material_matrix(config.E, config.nu);

  // Independent streams for each random ingredient.
  std::mt19937_64 streams(config.seed);
  const std::uint64_t s_load = streams(), s_rigid = streams(), s_targets = streams(), s_features = streams();
  gt.true_displacement = generate_ground_truth(gt.mesh, material, s_load, config.amplitude);
  gt.rigid_offset =
      random_rigid_offset(config.translation, config.rotation_deg * std::numbers::pi / 180.0, s_rigid);
  gt.targets = sample_targets(gt.mesh, gt.true_displacement, gt.rigid_offset, config.num_targets, s_targets);
  gt.features = sample_sparse_features(gt, config.coverage, config.noise, s_features, config.fiducials);
  return gt;
}

TreResult rms_tre(const TetMesh& mesh, const Eigen::VectorXd& displacement, const Vec3& tau, const Vec3& theta,
                  const std::vector<Target>& targets) {
  if (displacement.size() != 3 * mesh.num_nodes()) throw Error("rms_tre: displacement length does not match mesh");
  if (targets.empty()) throw Error("rms_tre: no targets");
  const Vec3 c = mesh.centroid();
  const Mat3 R = rotation_matrix(theta);
  TreResult out;
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto hit = barycentric_locate(mesh, targets[i].undeformed);
    if (!hit) throw Error("rms_tre: target " + std::to_string(i) + " lies outside the mesh");
    Vec3 x = targets[i].undeformed;
    for (int a = 0; a < 4; ++a)
      x += hit->weights[a] * displacement.segment<3>(3 * static_cast<Index>(mesh.tets[hit->tet][a]));
    const Vec3 registered = R * (x - c) + c + tau;
    const double e = 1e3 * (registered - targets[i].deformed).norm();
    out.errors_mm.push_back(e);
    sum += e * e;
  }
  out.rms_mm = std::sqrt(sum / static_cast<double>(targets.size()));
  return out;
}

}  // namespace kreg
