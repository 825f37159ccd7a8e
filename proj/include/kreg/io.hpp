#pragma once

#include "kreg/libr.hpp"
#include "kreg/synth.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace kreg {

namespace fs = std::filesystem;

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

// VTK legacy ASCII unstructured grid. Patch labels travel as the point
// scalar "patch" (0 none, 1 posterior, 2 anterior); a nodal field as the
// float64 VECTORS "displacement".
struct VtkData {
  TetMesh mesh;
  std::optional<Eigen::VectorXd> displacement;
};

void write_vtk(const fs::path& path, const TetMesh& mesh, const Eigen::VectorXd* displacement = nullptr);
VtkData read_vtk(const fs::path& path);

// CSV with header x,y,z (optionally nx,ny,nz or mx,my,mz for counterparts).
void write_feature_csv(const fs::path& path, const Feature& feature);
Feature read_feature_csv(const fs::path& path, FeatureKind kind);

void write_targets_csv(const fs::path& path, const std::vector<Target>& targets);
std::vector<Target> read_targets_csv(const fs::path& path);

// "KRMAT\0\0\0", uint64 rows, uint64 cols, row-major float64 little-endian.
void write_matrix(const fs::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

/// features/<index>.csv plus a JSON listing (name, kind, weight, file).
void write_features(const fs::path& dir, const FeatureData& features);
FeatureData read_features(const fs::path& dir);

/// mesh.vtk, true_displacement.vtk, targets.csv, features/, case.json.
void write_case(const fs::path& dir, const GroundTruthCase& gt);
GroundTruthCase read_case(const fs::path& dir);

struct BasisFile {
  std::string model;  // "rk" or "fem"
  int k = 0;
  double epsilon = 0.0;  // rk only
  std::string control_patch;
  double E = 0.0;
  double nu = 0.0;
  std::uint64_t seed = 0;
  ControlPointSet control_points;
  Eigen::MatrixXd J_u;
  Eigen::MatrixXd gram;  // J_strain^T J_stress
};

/// basis.json, J_u.bin, gram.bin.
void write_basis(const fs::path& dir, const BasisFile& basis);
BasisFile read_basis(const fs::path& dir);

std::string state_to_json(const RegistrationState& state, const std::vector<FeatureResidualSummary>& rms);
RegistrationState state_from_json(const std::string& text);

/// Scalar volume; x varies fastest.
struct Volume {
  std::array<int, 3> dims{};
  Vec3 spacing = Vec3::Ones();
  Vec3 origin = Vec3::Zero();
  std::vector<float> data;

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(dims[0]) * (j + static_cast<std::size_t>(dims[1]) * k);
  }
  Vec3 position(int i, int j, int k) const {
    return origin + Vec3(i * spacing.x(), j * spacing.y(), k * spacing.z());
  }
};

/// JSON header {dims, spacing, origin, data} where data names a raw float32
/// file beside the header.
void write_volume(const fs::path& header, const Volume& volume);
Volume read_volume(const fs::path& header);

}  // namespace kreg
