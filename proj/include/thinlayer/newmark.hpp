#pragma once

// Newmark time integration for M a + C v + K u = f (average acceleration by
// default). The operator owns the factorization of M + gamma dt C + beta dt^2 K
// and is shared read-only between concurrent runs; the state is per run.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <cmath>
#include <memory>

#include "errors.hpp"

namespace thinlayer {

struct NewmarkParams {
  double beta = 0.25;
  double gamma = 0.5;
};

struct TimeGrid {
  double t_final = 1.0;
  int steps = 100;

  double dt() const { return t_final / steps; }
  double time(int n) const { return t_final * n / steps; }
  void validate() const {
    if (!(t_final > 0.0) || steps < 1) throw InputError("time grid: need T > 0 and at least one step");
  }
  bool operator==(const TimeGrid& o) const { return t_final == o.t_final && steps == o.steps; }
};

struct NewmarkState {
  Eigen::VectorXd u, v, a;
};

class NewmarkOperator {
 public:
  using SparseMatrix = Eigen::SparseMatrix<double>;
  using Vector = Eigen::VectorXd;

  // `damping` may be empty. A nonsymmetric effective matrix must be flagged
  // (symmetric = false) and is factorized with SparseLU.
  NewmarkOperator(SparseMatrix mass, SparseMatrix stiffness, double dt, SparseMatrix damping = {}, NewmarkParams p = {},
                  bool symmetric = true)
      : m_(std::move(mass)), k_(std::move(stiffness)), c_(std::move(damping)), dt_(dt), p_(p) {
    if (!(dt > 0.0)) throw InputError("Newmark: dt must be positive");
    if (c_.rows() == 0) c_.resize(m_.rows(), m_.cols());
    SparseMatrix s = m_ + (p_.gamma * dt_) * c_ + (p_.beta * dt_ * dt_) * k_;
    s.makeCompressed();
    if (symmetric) {
      ldlt_ = std::make_unique<Eigen::SimplicialLDLT<SparseMatrix>>(s);
      if (ldlt_->info() != Eigen::Success) throw NumericalError("Newmark: effective matrix factorization failed");
    } else {
      lu_ = std::make_unique<Eigen::SparseLU<SparseMatrix>>();
      lu_->compute(s);
      if (lu_->info() != Eigen::Success) throw NumericalError("Newmark: effective matrix factorization failed");
    }
    mass_ldlt_ = std::make_unique<Eigen::SimplicialLDLT<SparseMatrix>>(m_);
    if (mass_ldlt_->info() != Eigen::Success) throw NumericalError("Newmark: mass matrix is not positive definite");
  }

  // State with M a0 = f0 - C v0 - K u0.
  NewmarkState initial_state(const Vector& u0, const Vector& v0, const Vector& f0) const {
    return {u0, v0, mass_ldlt_->solve(f0 - c_ * v0 - k_ * u0)};
  }

  // Advances one step with load f at the new time level.
  void advance(NewmarkState& s, const Vector& f_next) const {
    const double dt = dt_, b = p_.beta, g = p_.gamma;
    Vector u_pred = s.u + dt * s.v + (0.5 - b) * dt * dt * s.a;
    Vector v_pred = s.v + (1.0 - g) * dt * s.a;
    const Vector rhs = f_next - c_ * v_pred - k_ * u_pred;
    s.a = ldlt_ ? Vector(ldlt_->solve(rhs)) : Vector(lu_->solve(rhs));
    s.u = u_pred + b * dt * dt * s.a;
    s.v = v_pred + g * dt * s.a;
  }

  double energy(const NewmarkState& s) const { return 0.5 * s.v.dot(m_ * s.v) + 0.5 * s.u.dot(k_ * s.u); }

  // Largest generalized eigenvalue of (K, M) by power iteration.
  double max_frequency_squared(int iterations = 60) const {
    Vector x = Vector::LinSpaced(m_.rows(), 1.0, 2.0);
    double lambda = 0.0;
    for (int it = 0; it < iterations; ++it) {
      Vector y = mass_ldlt_->solve(k_ * x);
      const double n = std::sqrt(y.dot(m_ * y));
      if (!(n > 0.0)) return 0.0;
      lambda = y.dot(k_ * y) / y.dot(m_ * y);
      x = y / n;
    }
    return lambda;
  }

  const SparseMatrix& mass() const { return m_; }
  const SparseMatrix& stiffness() const { return k_; }
  const SparseMatrix& damping() const { return c_; }
  double dt() const { return dt_; }
  const NewmarkParams& params() const { return p_; }
  Vector solve_mass(const Vector& r) const { return mass_ldlt_->solve(r); }

 private:
  SparseMatrix m_, k_, c_;
  double dt_;
  NewmarkParams p_;
  std::unique_ptr<Eigen::SimplicialLDLT<SparseMatrix>> ldlt_;
  std::unique_ptr<Eigen::SparseLU<SparseMatrix>> lu_;
  std::unique_ptr<Eigen::SimplicialLDLT<SparseMatrix>> mass_ldlt_;
};

// Operator plus one state.
class NewmarkIntegrator {
 public:
  using SparseMatrix = Eigen::SparseMatrix<double>;
  using Vector = Eigen::VectorXd;

  NewmarkIntegrator(SparseMatrix mass, SparseMatrix stiffness, double dt, SparseMatrix damping = {},
                    NewmarkParams p = {}, bool symmetric = true)
      : op_(std::make_shared<NewmarkOperator>(std::move(mass), std::move(stiffness), dt, std::move(damping), p,
                                              symmetric)) {}
  explicit NewmarkIntegrator(std::shared_ptr<const NewmarkOperator> op) : op_(std::move(op)) {}

  void initialize(const Vector& u0, const Vector& v0, const Vector& f0) {
    s_ = op_->initial_state(u0, v0, f0);
    step_ = 0;
  }
  void step(const Vector& f_next) {
    op_->advance(s_, f_next);
    ++step_;
  }

  double energy() const { return op_->energy(s_); }
  const Vector& u() const { return s_.u; }
  const Vector& v() const { return s_.v; }
  const Vector& a() const { return s_.a; }
  const NewmarkState& state() const { return s_; }
  int step_index() const { return step_; }
  const NewmarkOperator& op() const { return *op_; }

 private:
  std::shared_ptr<const NewmarkOperator> op_;
  NewmarkState s_;
  int step_ = 0;
};

}  // namespace thinlayer
