#pragma once

#include "kreg/types.hpp"

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace kreg {

/// A stacked residual vector r(beta); the objective is r . r.
class LeastSquaresProblem {
 public:
  virtual ~LeastSquaresProblem() = default;

  virtual Index num_parameters() const = 0;
  virtual Eigen::VectorXd residuals(const Eigen::VectorXd& beta) = 0;

  /// Forward-difference step for parameter j, in that parameter's units.
  virtual double fd_step(Index j) const { return 1e-6; }

  /// Residuals at beta + h e_j given r0 = residuals(beta). Override when a
  /// single-coordinate perturbation can be evaluated incrementally.
  virtual Eigen::VectorXd perturbed_residuals(const Eigen::VectorXd& beta, const Eigen::VectorXd& r0,
                                              Index j, double h);

  /// Forward-difference Jacobian built from perturbed_residuals.
  virtual Eigen::MatrixXd jacobian(const Eigen::VectorXd& beta, const Eigen::VectorXd& r0);
};

/// Adapts a plain callable.
class FunctionProblem final : public LeastSquaresProblem {
 public:
  using Fn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
  FunctionProblem(Index num_parameters, Fn fn) : n_(num_parameters), fn_(std::move(fn)) {}

  Index num_parameters() const override { return n_; }
  Eigen::VectorXd residuals(const Eigen::VectorXd& beta) override { return fn_(beta); }

 private:
  Index n_;
  Fn fn_;
};

struct LmOptions {
  int max_iterations = 200;
  double termination_tol = 1e-12;  // on |delta objective|
  double lambda0 = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 0.1;
  double lambda_max = 1e16;
};

struct LmResult {
  Eigen::VectorXd beta;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  /// Objective at beta0 followed by each accepted step.
  std::vector<double> history;
  std::string stop_reason;
};

/// Marquardt-scaled damped Gauss-Newton. A step is accepted only if it
/// lowers the objective; iteration stops when |delta objective| falls below
/// the tolerance or max_iterations is reached. Throws NumericalError if the
/// residuals at beta0 are not finite.
LmResult levenberg_marquardt(LeastSquaresProblem& problem, const Eigen::VectorXd& beta0,
                             const LmOptions& options = {});

}  // namespace kreg
