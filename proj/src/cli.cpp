#include "kreg/cli.hpp"

#include "kreg/kelvinlet.hpp"
#include "kreg/warp.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>

namespace kreg {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class T>
void take(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

Vec3 json_vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error("expected a 3-vector in the config");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

std::string normalized_patch(const std::string& p) {
  if (p == "entire" || p == kEntireSurface) return kEntireSurface;
  return p;
}

}  // namespace

void RunConfig::validate() const {
  if (model != "rk" && model != "fem") throw Error("model must be 'rk' or 'fem', got '" + model + "'");
  if (k <= 0) throw Error("k must be positive");
  if (model == "rk" && !(epsilon > 0.0)) throw Error("epsilon must be positive for the rk model");
  const std::string p = normalized_patch(control_patch);
  if (p != kPosterior && p != kEntireSurface) throw Error("control_patch must be 'posterior' or 'entire'");
  if (!(E > 0.0)) throw Error("E must be positive");
  if (!(nu >= 0.0 && nu < 0.5)) throw Error("nu must lie in [0, 0.5)");
  if (!(w_E >= 0.0)) throw Error("w_E must be non-negative");
  if (!(magnitude > 0.0)) throw Error("magnitude must be positive");
  if (max_iterations <= 0) throw Error("max_iterations must be positive");
  if (!(termination_tol > 0.0)) throw Error("termination_tol must be positive");
  if (threads < 1) throw Error("threads must be at least 1");
  for (const auto& [name, w] : feature_weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error("feature weight for '" + name + "' must be finite and >= 0");
  for (int kv : k_values)
    if (kv <= 0) throw Error("sweep k values must be positive");
  for (double e : epsilon_values)
    if (!(e > 0.0)) throw Error("sweep epsilon values must be positive");
  for (const auto& m : sweep_models)
    if (m != "rk" && m != "fem") throw Error("sweep models must be 'rk' or 'fem'");
  phantom.phantom.validate();
}

RunConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  RunConfig c;
  take(j, "model", c.model);
  take(j, "k", c.k);
  take(j, "epsilon", c.epsilon);
  take(j, "control_patch", c.control_patch);
  take(j, "E", c.E);
  take(j, "nu", c.nu);
  take(j, "w_E", c.w_E);
  take(j, "feature_weights", c.feature_weights);
  take(j, "control_seed", c.control_seed);
  take(j, "magnitude", c.magnitude);
  take(j, "max_iterations", c.max_iterations);
  take(j, "termination_tol", c.termination_tol);
  take(j, "rigid_start", c.rigid_start);
  take(j, "threads", c.threads);
  take(j, "full_response", c.full_response);
  if (j.contains("phantom")) {
    const json& p = j.at("phantom");
    CaseConfig& cc = c.phantom;
    if (p.contains("semi_axes")) cc.phantom.semi_axes = json_vec3(p.at("semi_axes"));
    take(p, "target_edge_length", cc.phantom.target_edge_length);
    take(p, "mesh_seed", cc.phantom.seed);
    take(p, "seed", cc.seed);
    take(p, "amplitude", cc.amplitude);
    take(p, "num_targets", cc.num_targets);
    take(p, "translation", cc.translation);
    take(p, "rotation_deg", cc.rotation_deg);
    take(p, "coverage", cc.coverage);
    take(p, "noise", cc.noise);
    take(p, "fiducials", cc.fiducials);
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    take(s, "k_values", c.k_values);
    take(s, "epsilon_values", c.epsilon_values);
    take(s, "models", c.sweep_models);
  }
  c.phantom.E = c.E;
  c.phantom.nu = c.nu;
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) { return config_from_json(read_text(path)); }

PrecomputeResult precompute_basis(const RunConfig& config, const TetMesh& mesh) {
  config.validate();
  PrecomputeResult out;
  BasisFile& b = out.basis;
  b.model = config.model;
  b.k = config.k;
  b.epsilon = config.model == "rk" ? config.epsilon : 0.0;
  b.control_patch = normalized_patch(config.control_patch);
  b.E = config.E;
  b.nu = config.nu;
  b.seed = config.control_seed;
  b.control_points = kmeans_control_points(mesh, b.control_patch, config.k, config.control_seed);

  const MaterialMatrix material = isotropic_material_matrix(config.E, config.nu);
  const auto t0 = Clock::now();
  if (config.model == "rk")
    b.J_u = build_rk_basis(mesh, b.control_points, config.epsilon, ElasticParams(config.E, config.nu), config.threads);
  else
    b.J_u = build_fem_basis(mesh, b.control_points, material, config.magnitude, config.threads, &out.fem);
  b.gram = energy_gram(assemble_stiffness(mesh, material).K, b.J_u);
  out.seconds = seconds_since(t0);
  return out;
}

RegistrationParams registration_params(const RunConfig& config, const TetMesh& mesh) {
  RegistrationParams p;
  p.w_E = objective_energy_weight(config.w_E, mesh);
  p.max_iterations = config.max_iterations;
  p.termination_tol = config.termination_tol;
  p.threads = config.threads;
  return p;
}

FeatureData weighted_features(const RunConfig& config, FeatureData features) {
  for (Feature& f : features.features) {
    const auto it = config.feature_weights.find(f.name);
    if (it != config.feature_weights.end()) f.weight = it->second;
  }
  return features;
}

CaseRegistration register_case(const RunConfig& config, const GroundTruthCase& gt, const BasisFile& basis) {
  if (basis.J_u.rows() != 3 * gt.mesh.num_nodes()) throw Error("basis was built for a different mesh");
  const FeatureData features = weighted_features(config, gt.features);
  const RegistrationParams params = registration_params(config, gt.mesh);
  CaseRegistration out;
  const auto t0 = Clock::now();
  out.registration = config.rigid_start
                         ? register_rigid_then_full(gt.mesh, basis.J_u, basis.gram, features, params)
                         : register_to_features(gt.mesh, basis.J_u, basis.gram, features, params);
  out.seconds = seconds_since(t0);
  out.tre = rms_tre(gt.mesh, out.registration.displacement, out.registration.state.tau,
                    out.registration.state.theta, gt.targets);
  return out;
}

std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<GroundTruthCase>& cases,
                                const std::vector<std::string>& case_names) {
  config.validate();
  std::vector<SweepRow> rows;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    for (int k : config.k_values) {
      for (const std::string& model : config.sweep_models) {
        const std::vector<double> eps =
            model == "rk" ? config.epsilon_values : std::vector<double>{std::numeric_limits<double>::quiet_NaN()};
        for (double e : eps) {
          SweepRow row;
          row.model = model;
          row.k = k;
          row.epsilon = e;
          row.case_name = case_names.at(c);
          try {
            RunConfig cell = config;
            cell.model = model;
            cell.k = k;
            if (model == "rk") cell.epsilon = e;
            const PrecomputeResult pre = precompute_basis(cell, cases[c].mesh);
            const CaseRegistration reg = register_case(cell, cases[c], pre.basis);
            row.rms_tre_mm = reg.tre.rms_mm;
            row.seconds = pre.seconds + reg.seconds;
          } catch (const std::exception& ex) {
            row.rms_tre_mm = std::numeric_limits<double>::quiet_NaN();
            row.status = std::string("error: ") + ex.what();
          }
          rows.push_back(row);
        }
      }
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.k != b.k) return a.k < b.k;
    // fem rows (NaN epsilon) sort after every rk epsilon.
    const double ea = std::isnan(a.epsilon) ? INFINITY : a.epsilon;
    const double eb = std::isnan(b.epsilon) ? INFINITY : b.epsilon;
    return ea < eb;
  });
  summarize_sweep(rows);
  return rows;
}

void summarize_sweep(std::vector<SweepRow>& rows) {
  auto same_cell = [](const SweepRow& a, const SweepRow& b) {
    return a.model == b.model && a.k == b.k &&
           (a.epsilon == b.epsilon || (std::isnan(a.epsilon) && std::isnan(b.epsilon)));
  };
  for (SweepRow& r : rows) {
    double sum = 0.0, sq = 0.0;
    int n = 0;
    for (const SweepRow& o : rows)
      if (same_cell(r, o) && o.status == "ok") {
        sum += o.rms_tre_mm;
        sq += o.rms_tre_mm * o.rms_tre_mm;
        ++n;
      }
    if (n == 0) {
      r.mean_tre_mm = r.std_tre_mm = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    r.mean_tre_mm = sum / n;
    r.std_tre_mm = n > 1 ? std::sqrt(std::max(0.0, (sq - n * r.mean_tre_mm * r.mean_tre_mm) / (n - 1))) : 0.0;
  }
  std::map<std::string, double> best;
  for (const SweepRow& r : rows) {
    if (std::isnan(r.mean_tre_mm)) continue;
    const auto it = best.find(r.model);
    if (it == best.end() || r.mean_tre_mm < it->second) best[r.model] = r.mean_tre_mm;
  }
  for (SweepRow& r : rows)
    r.within_1mm = !std::isnan(r.mean_tre_mm) && r.mean_tre_mm <= best[r.model] + 1.0;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  auto num = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  auto quoted = [](const std::string& s) {
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  std::string s = "model,k,epsilon,case,rms_tre_mm,mean_tre_mm,std_tre_mm,seconds,within_1mm_of_min,status\n";
  for (const SweepRow& r : rows) {
    s += r.model + "," + std::to_string(r.k) + "," + num(r.epsilon) + "," + quoted(r.case_name) + "," +
         num(r.rms_tre_mm) + "," + num(r.mean_tre_mm) + "," + num(r.std_tre_mm) + "," + num(r.seconds) + "," +
         (r.within_1mm ? "1" : "0") + "," + quoted(r.status) + "\n";
  }
  return s;
}

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
};

void add_common(CLI::App* app, CommonFlags& f, bool out_required) {
  app->add_option("--config", f.config, "JSON run configuration");
  app->add_option("--seed", f.seed, "Random seed");
  app->add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* o = app->add_option("--out", f.out, "Output path");
  if (out_required) o->required();
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.threads) c.threads = *f.threads;
  return c;
}

void write_timing(const fs::path& path, const std::string& phase, const RunConfig& c, double seconds,
                  const FemTimings* fem = nullptr) {
  json j = {{"phase", phase}, {"model", c.model}, {"k", c.k}, {"seconds", seconds}, {"threads", c.threads}};
  if (c.model == "rk") j["epsilon"] = c.epsilon;
  if (fem && c.model == "fem")
    j["stages"] = {{"assembly", fem->assembly},
                   {"factorization", fem->factorization},
                   {"column_solves", fem->column_solves},
                   {"columns", fem->columns}};
  write_text(path, j.dump(2) + "\n");
}

void write_target_errors(const fs::path& path, const TreResult& tre) {
  std::string s = "target,error_mm\n";
  for (std::size_t i = 0; i < tre.errors_mm.size(); ++i)
    s += std::to_string(i) + "," + format_double(tre.errors_mm[i]) + "\n";
  write_text(path, s);
}

std::string tre_json(const TreResult& tre) {
  return json{{"rms_tre_mm", tre.rms_mm}, {"errors_mm", tre.errors_mm}}.dump(2) + "\n";
}

int cmd_phantom(const CommonFlags& f) {
  RunConfig c = resolve_config(f);
  if (f.seed) c.phantom.seed = *f.seed;
  c.phantom.E = c.E;
  c.phantom.nu = c.nu;
  const fs::path out = f.out;
  fs::path tmp = out;
  tmp += ".partial";
  fs::remove_all(tmp);
  try {
    const GroundTruthCase gt = make_case(c.phantom);
    write_case(tmp, gt);
    fs::remove_all(out);
    fs::rename(tmp, out);
    std::printf("case written to %s: %ld nodes, %ld tets, %zu targets\n", out.string().c_str(),
                static_cast<long>(gt.mesh.num_nodes()), static_cast<long>(gt.mesh.num_tets()), gt.targets.size());
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  return 0;
}

struct PrecomputeFlags {
  std::string case_dir, model, patch;
  std::optional<int> k;
  std::optional<double> epsilon;
  bool full_response = false;
};

int cmd_precompute(const CommonFlags& f, const PrecomputeFlags& p) {
  RunConfig c = resolve_config(f);
  if (!p.model.empty()) c.model = p.model;
  if (p.k) c.k = *p.k;
  if (p.epsilon) c.epsilon = *p.epsilon;
  if (!p.patch.empty()) c.control_patch = p.patch;
  if (f.seed) c.control_seed = *f.seed;
  c.full_response = c.full_response || p.full_response;
  c.validate();
  const GroundTruthCase gt = read_case(p.case_dir);
  const PrecomputeResult pre = precompute_basis(c, gt.mesh);
  const fs::path out = f.out;
  write_basis(out, pre.basis);
  if (c.full_response) {
    const ResponseMatrices rm = response_matrices(gt.mesh, pre.basis.J_u, isotropic_material_matrix(c.E, c.nu));
    write_matrix(out / "J_strain.bin", rm.strain);
    write_matrix(out / "J_stress.bin", rm.stress);
  }
  write_timing(out / "timing.json", "precompute", c, pre.seconds, &pre.fem);
  std::printf("%s basis k=%d: %.3f s\n", c.model.c_str(), c.k, pre.seconds);
  return 0;
}

int cmd_register(const CommonFlags& f, const std::string& case_dir, const std::string& basis_dir) {
  RunConfig c = resolve_config(f);
  const GroundTruthCase gt = read_case(case_dir);
  const BasisFile basis = read_basis(basis_dir);
  c.model = basis.model;
  c.k = basis.k;
  c.epsilon = basis.epsilon;
  const CaseRegistration reg = register_case(c, gt, basis);
  const RegistrationResult& r = reg.registration;

  const fs::path out = f.out;
  fs::create_directories(out);
  write_text(out / "state.json", state_to_json(r.state, r.feature_rms));
  Eigen::VectorXd motion(3 * gt.mesh.num_nodes());
  for (Index i = 0; i < gt.mesh.num_nodes(); ++i) motion.segment<3>(3 * i) = r.deformed_nodes[i] - gt.mesh.nodes[i];
  TetMesh deformed = gt.mesh;
  deformed.nodes = r.deformed_nodes;
  write_vtk(out / "deformed.vtk", deformed, &motion);
  write_vtk(out / "displacement.vtk", gt.mesh, &motion);
  write_target_errors(out / "target_errors.csv", reg.tre);
  write_text(out / "evaluation.json", tre_json(reg.tre));
  write_timing(out / "timing.json", "register", c, reg.seconds);
  std::printf("rms TRE %.4f mm, objective %.6g, %d iterations\n", reg.tre.rms_mm, r.state.objective,
              r.state.iterations);
  return 0;
}

int cmd_evaluate(const CommonFlags& f, const std::string& case_dir, const std::string& state_path,
                 const std::string& basis_dir) {
  const GroundTruthCase gt = read_case(case_dir);
  const BasisFile basis = read_basis(basis_dir);
  const RegistrationState s = state_from_json(read_text(state_path));
  if (s.alpha.size() != basis.J_u.cols()) throw Error("state does not match the basis");
  const TreResult tre = rms_tre(gt.mesh, basis.J_u * s.alpha, s.tau, s.theta, gt.targets);
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_text(fs::path(f.out) / "evaluation.json", tre_json(tre));
    write_target_errors(fs::path(f.out) / "target_errors.csv", tre);
  }
  std::printf("rms TRE %.4f mm over %zu targets\n", tre.rms_mm, tre.errors_mm.size());
  return 0;
}

int cmd_sweep(const CommonFlags& f, const std::vector<std::string>& case_dirs) {
  RunConfig c = resolve_config(f);
  std::vector<GroundTruthCase> cases;
  for (const auto& d : case_dirs) cases.push_back(read_case(d));
  const std::vector<SweepRow> rows = run_sweep(c, cases, case_dirs);
  const fs::path out = f.out;
  fs::create_directories(out);
  write_text(out / "sweep.csv", sweep_csv(rows));
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.status != "ok";
  std::printf("%zu sweep rows written, %zu failed\n", rows.size(), failed);
  return 0;
}

int cmd_warp(const CommonFlags& f, const std::string& volume_path, const std::string& field_path) {
  const RunConfig c = resolve_config(f);
  const Volume in = read_volume(volume_path);
  const VtkData field = read_vtk(field_path);
  if (!field.displacement) throw Error(field_path + " has no displacement field");
  WarpOptions opt;
  opt.threads = c.threads;
  write_volume(f.out, warp_volume(in, field.mesh, *field.displacement, opt));
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Sparse-data elastic registration with regularized Kelvinlet and finite-element bases"};
  app.require_subcommand(1);
  CommonFlags common;

  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic case directory");
  add_common(phantom, common, true);

  PrecomputeFlags pre;
  auto* precompute = app.add_subcommand("precompute", "Build a displacement basis for a case");
  add_common(precompute, common, true);
  precompute->add_option("--case", pre.case_dir, "Case directory")->required();
  precompute->add_option("--model", pre.model, "rk or fem");
  precompute->add_option("--k", pre.k, "Number of control points");
  precompute->add_option("--epsilon", pre.epsilon, "Radial scale (m), rk only");
  precompute->add_option("--patch", pre.patch, "posterior or entire");
  precompute->add_flag("--full-response", pre.full_response, "Also write J_strain and J_stress");

  std::string case_dir, basis_dir, state_path, volume_path, field_path;
  std::vector<std::string> case_dirs;
  auto* reg = app.add_subcommand("register", "Register a case's features with a basis");
  add_common(reg, common, true);
  reg->add_option("--case", case_dir, "Case directory")->required();
  reg->add_option("--basis", basis_dir, "Basis directory")->required();

  auto* sweep = app.add_subcommand("sweep", "Run the k x epsilon sweep");
  add_common(sweep, common, true);
  sweep->add_option("--case", case_dirs, "Case directories")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Target registration error of a saved state");
  add_common(evaluate, common, false);
  evaluate->add_option("--case", case_dir, "Case directory")->required();
  evaluate->add_option("--state", state_path, "state.json from register")->required();
  evaluate->add_option("--basis", basis_dir, "Basis directory")->required();

  auto* warp = app.add_subcommand("warp", "Resample a volume through a displacement field");
  add_common(warp, common, true);
  warp->add_option("--volume", volume_path, "Volume header JSON")->required();
  warp->add_option("--field", field_path, "VTK mesh with a displacement field")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (phantom->parsed()) return cmd_phantom(common);
    if (precompute->parsed()) return cmd_precompute(common, pre);
    if (reg->parsed()) return cmd_register(common, case_dir, basis_dir);
    if (sweep->parsed()) return cmd_sweep(common, case_dirs);
    if (evaluate->parsed()) return cmd_evaluate(common, case_dir, state_path, basis_dir);
    if (warp->parsed()) return cmd_warp(common, volume_path, field_path);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

}  // namespace kreg
