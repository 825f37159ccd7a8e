#include "kreg/io.hpp"

#include "json.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kreg {

using nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

double parse_double(const std::string& tok, const fs::path& path) {
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw Error(path.string() + ": bad number '" + tok + "'");
  return v;
}

long long parse_int(const std::string& tok, const fs::path& path) {
  long long v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw Error(path.string() + ": bad integer '" + tok + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string vec_line(const Vec3& v) {
  return format_double(v.x()) + " " + format_double(v.y()) + " " + format_double(v.z());
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error("expected a 3-vector in JSON");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

}  // namespace

void write_vtk(const fs::path& path, const TetMesh& mesh, const Eigen::VectorXd* displacement) {
  if (displacement && displacement->size() != 3 * mesh.num_nodes())
    throw Error("write_vtk: displacement length does not match the mesh");
  std::string s;
  s += "# vtk DataFile Version 3.0\nkreg tetrahedral mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n";
  s += "POINTS " + std::to_string(mesh.nodes.size()) + " double\n";
  for (const Vec3& p : mesh.nodes) s += vec_line(p) + "\n";
  s += "CELLS " + std::to_string(mesh.tets.size()) + " " + std::to_string(5 * mesh.tets.size()) + "\n";
  for (const Tet& t : mesh.tets)
    s += "4 " + std::to_string(t[0]) + " " + std::to_string(t[1]) + " " + std::to_string(t[2]) + " " +
         std::to_string(t[3]) + "\n";
  s += "CELL_TYPES " + std::to_string(mesh.tets.size()) + "\n";
  for (std::size_t i = 0; i < mesh.tets.size(); ++i) s += "10\n";

  std::vector<int> label(mesh.nodes.size(), 0);
  auto mark = [&](const char* name, int value) {
    const auto it = mesh.patch_labels.find(name);
    if (it != mesh.patch_labels.end())
      for (int v : it->second) label[v] = value;
  };
  mark(kPosterior, 1);
  mark(kAnterior, 2);
  s += "POINT_DATA " + std::to_string(mesh.nodes.size()) + "\nSCALARS patch int 1\nLOOKUP_TABLE default\n";
  for (int l : label) s += std::to_string(l) + "\n";
  if (displacement) {
    s += "VECTORS displacement double\n";
    for (Index i = 0; i < mesh.num_nodes(); ++i) s += vec_line(displacement->segment<3>(3 * i)) + "\n";
  }
  write_text(path, s);
}

VtkData read_vtk(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  for (int i = 0; i < 3; ++i)
    if (!std::getline(in, line)) throw Error(path.string() + ": truncated VTK header");
  if (line.rfind("ASCII", 0) != 0) throw Error(path.string() + ": only ASCII VTK is supported");

  std::vector<Vec3> nodes;
  std::vector<Tet> tets;
  std::vector<int> label;
  std::optional<Eigen::VectorXd> disp;
  std::string tok;
  auto next = [&]() -> std::string {
    if (!(in >> tok)) throw Error(path.string() + ": unexpected end of file");
    return tok;
  };
  Index npoint_data = 0;
  while (in >> tok) {
    if (tok == "DATASET") {
      if (next() != "UNSTRUCTURED_GRID") throw Error(path.string() + ": expected UNSTRUCTURED_GRID");
    } else if (tok == "POINTS") {
      const auto n = parse_int(next(), path);
      next();
      nodes.resize(n);
      for (auto& p : nodes)
        for (int d = 0; d < 3; ++d) p[d] = parse_double(next(), path);
    } else if (tok == "CELLS") {
      const auto n = parse_int(next(), path);
      next();
      tets.resize(n);
      for (auto& t : tets) {
        if (parse_int(next(), path) != 4) throw Error(path.string() + ": only tetrahedral cells are supported");
        for (int& v : t) v = static_cast<int>(parse_int(next(), path));
      }
    } else if (tok == "CELL_TYPES") {
      const auto n = parse_int(next(), path);
      for (long long i = 0; i < n; ++i)
        if (parse_int(next(), path) != 10) throw Error(path.string() + ": only VTK_TETRA cells are supported");
    } else if (tok == "POINT_DATA") {
      npoint_data = parse_int(next(), path);
      if (npoint_data != static_cast<Index>(nodes.size())) throw Error(path.string() + ": POINT_DATA count mismatch");
    } else if (tok == "SCALARS") {
      const std::string name = next();
      next();  // type
      std::getline(in, line);  // optional component count
      if (next() != "LOOKUP_TABLE") throw Error(path.string() + ": expected LOOKUP_TABLE");
      next();
      std::vector<int> values(npoint_data);
      for (auto& v : values) v = static_cast<int>(parse_int(next(), path));
      if (name == "patch") label = std::move(values);
    } else if (tok == "VECTORS") {
      const std::string name = next();
      next();
      Eigen::VectorXd v(3 * npoint_data);
      for (Index i = 0; i < v.size(); ++i) v[i] = parse_double(next(), path);
      if (name == "displacement") disp = std::move(v);
    } else {
      throw Error(path.string() + ": unexpected token '" + tok + "'");
    }
  }
  std::map<std::string, std::vector<int>> labels;
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (label[i] == 1) labels[kPosterior].push_back(static_cast<int>(i));
    if (label[i] == 2) labels[kAnterior].push_back(static_cast<int>(i));
  }
  VtkData out;
  out.mesh = make_mesh(std::move(nodes), std::move(tets), std::move(labels));
  out.displacement = std::move(disp);
  return out;
}

void write_feature_csv(const fs::path& path, const Feature& feature) {
  const bool corr = feature.kind == FeatureKind::corresponded_points;
  std::string s = corr ? "x,y,z,mx,my,mz\n" : "x,y,z\n";
  for (std::size_t i = 0; i < feature.points.size(); ++i) {
    const Vec3& p = feature.points[i];
    s += format_double(p.x()) + "," + format_double(p.y()) + "," + format_double(p.z());
    if (corr) {
      const Vec3& m = feature.counterparts[i];
      s += "," + format_double(m.x()) + "," + format_double(m.y()) + "," + format_double(m.z());
    }
    s += "\n";
  }
  write_text(path, s);
}

Feature read_feature_csv(const fs::path& path, FeatureKind kind) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + ": empty CSV");
  const auto header = split(line, ',');
  const bool corr = kind == FeatureKind::corresponded_points;
  if (header.size() < 3 || header[0] != "x" || header[1] != "y" || header[2] != "z")
    throw Error(path.string() + ": header must start with x,y,z");
  if (corr && (header.size() != 6 || header[3] != "mx"))
    throw Error(path.string() + ": corresponded points need columns x,y,z,mx,my,mz");
  Feature f;
  f.kind = kind;
  f.name = path.stem().string();
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cols = split(line, ',');
    if (cols.size() != header.size()) throw Error(path.string() + ": wrong column count in '" + line + "'");
    f.points.emplace_back(parse_double(cols[0], path), parse_double(cols[1], path), parse_double(cols[2], path));
    if (corr)
      f.counterparts.emplace_back(parse_double(cols[3], path), parse_double(cols[4], path),
                                  parse_double(cols[5], path));
  }
  return f;
}

void write_targets_csv(const fs::path& path, const std::vector<Target>& targets) {
  std::string s = "x,y,z,dx,dy,dz\n";
  for (const Target& t : targets) {
    s += format_double(t.undeformed.x()) + "," + format_double(t.undeformed.y()) + "," +
         format_double(t.undeformed.z()) + "," + format_double(t.deformed.x()) + "," +
         format_double(t.deformed.y()) + "," + format_double(t.deformed.z()) + "\n";
  }
  write_text(path, s);
}

std::vector<Target> read_targets_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || split(line, ',').size() != 6) throw Error(path.string() + ": bad targets header");
  std::vector<Target> out;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto c = split(line, ',');
    if (c.size() != 6) throw Error(path.string() + ": wrong column count in '" + line + "'");
    Target t;
    for (int d = 0; d < 3; ++d) {
      t.undeformed[d] = parse_double(c[d], path);
      t.deformed[d] = parse_double(c[3 + d], path);
    }
    out.push_back(t);
  }
  return out;
}

namespace {
constexpr char kMagic[8] = {'K', 'R', 'M', 'A', 'T', '\0', '\0', '\0'};
}

void write_matrix(const fs::path& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::uint64_t rows = m.rows(), cols = m.cols();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&rows), 8);
  out.write(reinterpret_cast<const char*>(&cols), 8);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(8 * rows * cols));
  if (!out) throw Error("failed writing " + path.string());
}

Eigen::MatrixXd read_matrix(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  char magic[8];
  std::uint64_t rows = 0, cols = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&rows), 8);
  in.read(reinterpret_cast<char*>(&cols), 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw Error(path.string() + ": not a matrix file");
  if (fs::file_size(path) != 24 + 8 * rows * cols) throw Error(path.string() + ": size does not match header");
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(8 * rows * cols));
  if (!in) throw Error(path.string() + ": truncated");
  return rm;
}

void write_features(const fs::path& dir, const FeatureData& features) {
  fs::create_directories(dir);
  json list = json::array();
  for (std::size_t i = 0; i < features.features.size(); ++i) {
    const Feature& f = features.features[i];
    const std::string file = std::to_string(i) + ".csv";
    write_feature_csv(dir / file, f);
    list.push_back({{"name", f.name}, {"kind", to_string(f.kind)}, {"weight", f.weight}, {"file", file}});
  }
  write_text(dir / "features.json", list.dump(2) + "\n");
}

FeatureData read_features(const fs::path& dir) {
  const json list = json::parse(read_text(dir / "features.json"));
  FeatureData out;
  for (const json& e : list) {
    Feature f = read_feature_csv(dir / e.at("file").get<std::string>(),
                                 feature_kind_from_string(e.at("kind").get<std::string>()));
    f.name = e.at("name").get<std::string>();
    f.weight = e.at("weight").get<double>();
    out.features.push_back(std::move(f));
  }
  out.validate();
  return out;
}

void write_case(const fs::path& dir, const GroundTruthCase& gt) {
  fs::create_directories(dir);
  write_vtk(dir / "mesh.vtk", gt.mesh);
  write_vtk(dir / "true_displacement.vtk", gt.mesh, &gt.true_displacement);
  write_targets_csv(dir / "targets.csv", gt.targets);
  write_features(dir / "features", gt.features);
  const CaseConfig& c = gt.config;
  const json j = {
      {"spec",
       {{"semi_axes", vec_json(c.phantom.semi_axes)},
        {"target_edge_length", c.phantom.target_edge_length},
        {"seed", c.phantom.seed}}},
      {"seed", c.seed},
      {"E", c.E},
      {"nu", c.nu},
      {"amplitude", c.amplitude},
      {"num_targets", c.num_targets},
      {"translation", c.translation},
      {"rotation_deg", c.rotation_deg},
      {"coverage", c.coverage},
      {"noise", c.noise},
      {"fiducials", c.fiducials},
      {"rigid_offset", {{"tau", vec_json(gt.rigid_offset.tau)}, {"theta", vec_json(gt.rigid_offset.theta)}}},
  };
  write_text(dir / "case.json", j.dump(2) + "\n");
}

GroundTruthCase read_case(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("case directory " + dir.string() + " does not exist");
  GroundTruthCase gt;
  const json j = json::parse(read_text(dir / "case.json"));
  CaseConfig& c = gt.config;
  c.phantom.semi_axes = json_vec(j.at("spec").at("semi_axes"));
  c.phantom.target_edge_length = j.at("spec").at("target_edge_length").get<double>();
  c.phantom.seed = j.at("spec").at("seed").get<std::uint64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.E = j.at("E").get<double>();
  c.nu = j.at("nu").get<double>();
  c.amplitude = j.at("amplitude").get<double>();
  c.num_targets = j.at("num_targets").get<int>();
  c.translation = j.at("translation").get<double>();
  c.rotation_deg = j.at("rotation_deg").get<double>();
  c.coverage = j.at("coverage").get<double>();
  c.noise = j.at("noise").get<double>();
  c.fiducials = j.at("fiducials").get<int>();
  gt.rigid_offset.tau = json_vec(j.at("rigid_offset").at("tau"));
  gt.rigid_offset.theta = json_vec(j.at("rigid_offset").at("theta"));

  VtkData truth = read_vtk(dir / "true_displacement.vtk");
  if (!truth.displacement) throw Error(dir.string() + ": true_displacement.vtk has no displacement field");
  gt.mesh = std::move(truth.mesh);
  gt.true_displacement = std::move(*truth.displacement);
  gt.targets = read_targets_csv(dir / "targets.csv");
  gt.features = read_features(dir / "features");
  return gt;
}

void write_basis(const fs::path& dir, const BasisFile& b) {
  fs::create_directories(dir);
  json cps = json::array();
  for (Index i = 0; i < b.control_points.size(); ++i)
    cps.push_back({{"position", vec_json(b.control_points.positions[i])}, {"node", b.control_points.nearest_node[i]}});
  const json j = {{"model", b.model},
                  {"k", b.k},
                  {"epsilon", b.epsilon},
                  {"control_patch", b.control_patch},
                  {"E", b.E},
                  {"nu", b.nu},
                  {"seed", b.seed},
                  {"rows", b.J_u.rows()},
                  {"cols", b.J_u.cols()},
                  {"control_points", cps}};
  write_text(dir / "basis.json", j.dump(2) + "\n");
  write_matrix(dir / "J_u.bin", b.J_u);
  write_matrix(dir / "gram.bin", b.gram);
}

BasisFile read_basis(const fs::path& dir) {
  if (!fs::exists(dir / "basis.json")) throw Error("no basis found in " + dir.string());
  const json j = json::parse(read_text(dir / "basis.json"));
  BasisFile b;
  b.model = j.at("model").get<std::string>();
  b.k = j.at("k").get<int>();
  b.epsilon = j.at("epsilon").get<double>();
  b.control_patch = j.at("control_patch").get<std::string>();
  b.E = j.at("E").get<double>();
  b.nu = j.at("nu").get<double>();
  b.seed = j.at("seed").get<std::uint64_t>();
  b.control_points.source_patch = b.control_patch;
  for (const json& c : j.at("control_points")) {
    b.control_points.positions.push_back(json_vec(c.at("position")));
    b.control_points.nearest_node.push_back(c.at("node").get<int>());
  }
  b.J_u = read_matrix(dir / "J_u.bin");
  b.gram = read_matrix(dir / "gram.bin");
  if (b.J_u.cols() != 3 * b.k || b.gram.rows() != b.J_u.cols() || b.gram.cols() != b.J_u.cols())
    throw Error(dir.string() + ": basis matrices are inconsistent with k");
  return b;
}

std::string state_to_json(const RegistrationState& state, const std::vector<FeatureResidualSummary>& rms) {
  json feats = json::array();
  for (const auto& f : rms) feats.push_back({{"name", f.name}, {"count", f.count}, {"rms", f.rms}});
  const json j = {{"alpha", std::vector<double>(state.alpha.data(), state.alpha.data() + state.alpha.size())},
                  {"tau", vec_json(state.tau)},
                  {"theta", vec_json(state.theta)},
                  {"objective", state.objective},
                  {"iterations", state.iterations},
                  {"converged", state.converged},
                  {"objective_history", state.objective_history},
                  {"feature_rms", feats}};
  return j.dump(2) + "\n";
}

RegistrationState state_from_json(const std::string& text) {
  const json j = json::parse(text);
  RegistrationState s;
  const auto alpha = j.at("alpha").get<std::vector<double>>();
  s.alpha = Eigen::Map<const Eigen::VectorXd>(alpha.data(), static_cast<Index>(alpha.size()));
  s.tau = json_vec(j.at("tau"));
  s.theta = json_vec(j.at("theta"));
  s.objective = j.at("objective").get<double>();
  s.iterations = j.at("iterations").get<int>();
  s.converged = j.at("converged").get<bool>();
  s.objective_history = j.at("objective_history").get<std::vector<double>>();
  return s;
}

void write_volume(const fs::path& header, const Volume& v) {
  const std::size_t n = static_cast<std::size_t>(v.dims[0]) * v.dims[1] * v.dims[2];
  if (v.data.size() != n) throw Error("write_volume: data size does not match dims");
  fs::path raw = header;
  raw.replace_extension(".raw");
  const json j = {{"dims", v.dims},
                  {"spacing", vec_json(v.spacing)},
                  {"origin", vec_json(v.origin)},
                  {"data", raw.filename().string()}};
  write_text(header, j.dump(2) + "\n");
  std::ofstream out(raw, std::ios::binary);
  if (!out) throw Error("cannot write " + raw.string());
  out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(4 * n));
  if (!out) throw Error("failed writing " + raw.string());
}

Volume read_volume(const fs::path& header) {
  const json j = json::parse(read_text(header));
  Volume v;
  v.dims = j.at("dims").get<std::array<int, 3>>();
  v.spacing = json_vec(j.at("spacing"));
  v.origin = json_vec(j.at("origin"));
  for (int d : v.dims)
    if (d <= 0) throw Error(header.string() + ": dims must be positive");
  if (!(v.spacing.minCoeff() > 0.0)) throw Error(header.string() + ": spacing must be positive");
  const fs::path raw = header.parent_path() / j.at("data").get<std::string>();
  const std::size_t n = static_cast<std::size_t>(v.dims[0]) * v.dims[1] * v.dims[2];
  if (!fs::exists(raw)) throw Error(header.string() + ": data file " + raw.string() + " is missing");
  if (fs::file_size(raw) != 4 * n)
    throw Error(header.string() + ": data file holds " + std::to_string(fs::file_size(raw) / 4) +
                " voxels but dims require " + std::to_string(n));
  v.data.resize(n);
  std::ifstream in(raw, std::ios::binary);
  in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(4 * n));
  if (!in) throw Error(raw.string() + ": truncated");
  return v;
}

}  // namespace kreg
