#include "kreg/lm.hpp"

#include <cmath>

namespace kreg {

Eigen::VectorXd LeastSquaresProblem::perturbed_residuals(const Eigen::VectorXd& beta, const Eigen::VectorXd&,
                                                         Index j, double h) {
  Eigen::VectorXd b = beta;
  b[j] += h;
  return residuals(b);
}

Eigen::MatrixXd LeastSquaresProblem::jacobian(const Eigen::VectorXd& beta, const Eigen::VectorXd& r0) {
  Eigen::MatrixXd J(r0.size(), num_parameters());
  for (Index j = 0; j < num_parameters(); ++j) {
    const double h = fd_step(j);
    J.col(j) = (perturbed_residuals(beta, r0, j, h) - r0) / h;
  }
  return J;
}

LmResult levenberg_marquardt(LeastSquaresProblem& problem, const Eigen::VectorXd& beta0,
                             const LmOptions& options) {
  if (beta0.size() != problem.num_parameters()) throw Error("levenberg_marquardt: beta0 has wrong length");

  LmResult out;
  out.beta = beta0;
  Eigen::VectorXd r = problem.residuals(out.beta);
  if (!r.allFinite()) throw NumericalError("non-finite residuals at the initial parameters");
  out.objective = r.squaredNorm();
  out.history.push_back(out.objective);

  double lambda = options.lambda0;
  const Index n = problem.num_parameters();
  while (out.iterations < options.max_iterations) {
    ++out.iterations;
    const Eigen::MatrixXd J = problem.jacobian(out.beta, r);
    if (!J.allFinite()) {
      out.converged = false;
      out.stop_reason = "non-finite jacobian";
      return out;
    }
    const Eigen::MatrixXd A = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    if (out.objective == 0.0 || g.squaredNorm() == 0.0) {
      out.converged = true;
      out.stop_reason = "zero gradient";
      return out;
    }
    const Eigen::VectorXd diag = A.diagonal();
    const double floor = 1e-12 * std::max(diag.maxCoeff(), 1e-300);

    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd damped = A;
      for (Index i = 0; i < n; ++i) damped(i, i) += lambda * std::max(diag[i], floor);
      const Eigen::LDLT<Eigen::MatrixXd> fac(damped);
      const Eigen::VectorXd step = -fac.solve(g);

      if (fac.info() == Eigen::Success && step.allFinite()) {
        const Eigen::VectorXd trial = out.beta + step;
        const Eigen::VectorXd rt = problem.residuals(trial);
        const double obj = rt.allFinite() ? rt.squaredNorm() : INFINITY;
        if (obj < out.objective) {
          const double delta = out.objective - obj;
          out.beta = trial;
          r = rt;
          out.objective = obj;
          out.history.push_back(obj);
          lambda = std::max(lambda * options.lambda_down, 1e-20);
          accepted = true;
          if (delta < options.termination_tol) {
            out.converged = true;
            out.stop_reason = "objective change below tolerance";
            return out;
          }
          continue;
        }
        if (std::isfinite(obj) && std::abs(obj - out.objective) < options.termination_tol) {
          out.converged = true;
          out.stop_reason = "objective stationary";
          return out;
        }
      }
      lambda *= options.lambda_up;
      if (lambda > options.lambda_max) {
        out.converged = false;
        out.stop_reason = "damping limit reached";
        return out;
      }
    }
  }
  out.stop_reason = "iteration limit";
  return out;
}

}  // namespace kreg
