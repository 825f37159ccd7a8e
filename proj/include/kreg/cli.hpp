#pragma once

#include "kreg/io.hpp"

#include <map>
#include <string>
#include <vector>

namespace kreg {

/// Every experiment knob. Loaded from JSON; absent keys keep these defaults.
struct RunConfig {
  std::string model = "fem";  // "rk" or "fem"
  int k = 40;
  double epsilon = 0.02;  // m, rk only
  std::string control_patch = kPosterior;  // "posterior" or "entire"
  double E = 2100.0;
  double nu = 0.45;
  double w_E = 1e-8;  // Pa^-2, against the mean strain energy density
  std::map<std::string, double> feature_weights;
  std::uint64_t control_seed = 7;
  double magnitude = 1e-3;  // m, FEM control perturbation
  int max_iterations = 200;
  double termination_tol = 1e-12;
  bool rigid_start = true;  // rigid-only fit before the full fit
  int threads = 1;
  bool full_response = false;

  CaseConfig phantom;

  std::vector<int> k_values{10, 40, 70, 100, 130, 160, 190};
  std::vector<double> epsilon_values{0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5};
  std::vector<std::string> sweep_models{"rk"};

  void validate() const;
};

RunConfig config_from_json(const std::string& text);
RunConfig load_config(const fs::path& path);

struct PrecomputeResult {
  BasisFile basis;
  double seconds = 0.0;
  FemTimings fem;
};

PrecomputeResult precompute_basis(const RunConfig& config, const TetMesh& mesh);

RegistrationParams registration_params(const RunConfig& config, const TetMesh& mesh);

/// Applies per-name weight overrides from the config.
FeatureData weighted_features(const RunConfig& config, FeatureData features);

struct CaseRegistration {
  RegistrationResult registration;
  TreResult tre;
  double seconds = 0.0;
};

CaseRegistration register_case(const RunConfig& config, const GroundTruthCase& gt, const BasisFile& basis);

struct SweepRow {
  std::string model;
  int k = 0;
  double epsilon = 0.0;  // NaN for fem
  std::string case_name;
  double rms_tre_mm = 0.0;
  double mean_tre_mm = 0.0;  // over the cases of this cell
  double std_tre_mm = 0.0;
  double seconds = 0.0;
  bool within_1mm = false;
  std::string status = "ok";
};

/// Every (model, k, epsilon) cell on every case, stably sorted by (k, epsilon).
std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<GroundTruthCase>& cases,
                                const std::vector<std::string>& case_names);
/// Fills mean/std per cell and flags cells whose mean lies within 1 mm of
/// the per-model minimum.
void summarize_sweep(std::vector<SweepRow>& rows);
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Entry point of the kreg executable. Returns the process exit code:
/// 0 success, 1 usage or input error, 2 numerical failure.
int run_cli(int argc, const char* const* argv);

}  // namespace kreg
