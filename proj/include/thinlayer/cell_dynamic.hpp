#pragma once

// Time-dependent cell problems on Y0 with Dirichlet data on S+ and S-,
// Y'-periodic laterally, memory kernels extracted as consistent reactions,
// and the convolution representation of the layer displacement.

#include <array>
#include <cmath>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "cell_static.hpp"
#include "newmark.hpp"

namespace thinlayer {

enum class DynamicKind { chi, eta, theta, u1_tilde };
enum class FaceSide { plus = 0, minus = 1, none = 2 };
enum class LiftingKind { linear, elastostatic };
enum class AccelerationMode { newmark, central_difference };

inline const char* to_string(DynamicKind k) {
  switch (k) {
    case DynamicKind::chi: return "chi";
    case DynamicKind::eta: return "eta";
    case DynamicKind::theta: return "theta";
    case DynamicKind::u1_tilde: return "u1_tilde";
  }
  return "?";
}
inline const char* to_string(FaceSide s) { return s == FaceSide::plus ? "plus" : s == FaceSide::minus ? "minus" : "none"; }

// phi = e_i on the chosen face, 0 on the other: (y1 + 1/2) e_i or (1/2 - y1) e_i.
template <int Dim>
Vector boundary_lifting(const GridMesh<Dim>& mesh, int i, FaceSide side) {
  if (i < 0 || i >= Dim) throw InputError("boundary lifting: component out of range");
  if (side == FaceSide::none) throw InputError("boundary lifting: face side required");
  return nodal_field<Dim>(mesh, [&](const Point<Dim>& y) {
    Point<Dim> v = Point<Dim>::Zero();
    v[i] = side == FaceSide::plus ? y[0] + 0.5 : 0.5 - y[0];
    return v;
  });
}

struct DynamicOptions {
  int stride = 1;            // keep every stride-th field snapshot
  bool store_fields = true;  // reactions and energies are always kept
  LiftingKind lifting = LiftingKind::linear;
};

template <int Dim>
struct DynamicCellSolution {
  using Reaction = Eigen::Matrix<double, Dim, 2>;  // column 0: S+, column 1: S-

  DynamicKind kind = DynamicKind::theta;
  FaceSide side = FaceSide::none;
  int component = 0;
  TimeGrid grid;
  int stride = 1;
  Vector lifting;  // empty unless kind is chi or eta
  std::vector<Vector> u, v, a;  // snapshot k is step k * stride
  std::vector<Reaction> reactions;  // per step
  std::vector<double> energy;       // per step
  std::vector<std::string> warnings;

  bool has_step(int n) const { return !u.empty() && n % stride == 0 && n / stride < static_cast<int>(u.size()); }
  const Vector& u_at(int n) const { return u.at(snapshot(n)); }
  const Vector& v_at(int n) const { return v.at(snapshot(n)); }
  const Vector& a_at(int n) const { return a.at(snapshot(n)); }

 private:
  int snapshot(int n) const {
    if (!has_step(n)) throw InputError("dynamic solution: step " + std::to_string(n) + " not stored");
    return n / stride;
  }
};

// Shared operators for all dynamic cell problems of one cell and time grid.
template <int Dim>
class DynamicCellSolver {
 public:
  DynamicCellSolver(const GridMesh<Dim>& mesh, CellMaterial<Dim> material, TimeGrid grid, DynamicOptions opt = {})
      : mesh_(mesh), mat_(std::move(material)), grid_(grid), opt_(opt), map_(mesh.num_nodes(), Dim) {
    grid_.validate();
    if (opt_.stride < 1) throw InputError("dynamic cell: stride must be >= 1");
    k_ = assemble_stiffness<Dim>(mesh, mat_.tensor);
    m_ = assemble_mass<Dim>(mesh, mat_.density, 0.0);
    plus_ = face_nodes<Dim>(mesh, on_cell_face(CellFace::s_plus));
    minus_ = face_nodes<Dim>(mesh, on_cell_face(CellFace::s_minus));
    map_.add_periodic(mesh.periodic_pairs);
    for (const auto* face : {&plus_, &minus_})
      for (int n : *face) map_.fix_node(n, Vector::Zero(Dim));
    map_.finalize();
    const SparseMatrix& p = map_.prolongation();
    SparseMatrix mr = p.transpose() * m_ * p, kr = p.transpose() * k_ * p;
    op_ = std::make_shared<NewmarkOperator>(mr, kr, grid_.dt());

    // Face selector: row (beta * Dim + j) sums component j over face beta.
    Triplets t;
    for (int beta = 0; beta < 2; ++beta)
      for (int n : beta == 0 ? plus_ : minus_)
        for (int j = 0; j < Dim; ++j) t.emplace_back(beta * Dim + j, n * Dim + j, 1.0);
    SparseMatrix sel(2 * Dim, mesh.num_nodes() * Dim);
    sel.setFromTriplets(t.begin(), t.end());
    sel_m_ = sel * m_;
    sel_k_ = sel * k_;

    const double w2 = op_->max_frequency_squared();
    if (w2 > 0.0) {
      const double half_period = M_PI / std::sqrt(w2);
      if (grid_.dt() > half_period)
        warnings_.push_back("dt " + std::to_string(grid_.dt()) + " exceeds half the smallest discrete period (" +
                            std::to_string(half_period) + ")");
    }
  }

  const GridMesh<Dim>& mesh() const { return mesh_; }
  const CellMaterial<Dim>& material() const { return mat_; }
  const TimeGrid& grid() const { return grid_; }
  const SparseMatrix& stiffness() const { return k_; }
  const SparseMatrix& mass() const { return m_; }
  const DofMap& dof_map() const { return map_; }
  const std::vector<int>& face(FaceSide s) const { return s == FaceSide::plus ? plus_ : minus_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  // Face-row mass of psi = phi - (mass projection of phi onto zero face data):
  // m(alpha, beta)(j, i) = psi_j^beta . M psi_i^alpha. The eta initial velocity
  // is the projected -phi, so the face accelerations of the layer carry this
  // instantaneous term on top of the two convolutions. It vanishes with the
  // cell mesh size.
  std::array<std::array<Eigen::Matrix<double, Dim, Dim>, 2>, 2> added_mass() const {
    const SparseMatrix& p = map_.prolongation();
    std::array<std::array<Vector, Dim>, 2> psi;
    for (int side = 0; side < 2; ++side)
      for (int i = 0; i < Dim; ++i) {
        const Vector phi = lifting(i, side == 0 ? FaceSide::plus : FaceSide::minus);
        psi[side][i] = phi - p * op_->solve_mass(p.transpose() * (m_ * phi));
      }
    std::array<std::array<Eigen::Matrix<double, Dim, Dim>, 2>, 2> out;
    for (int alpha = 0; alpha < 2; ++alpha)
      for (int beta = 0; beta < 2; ++beta)
        for (int j = 0; j < Dim; ++j)
          for (int i = 0; i < Dim; ++i) out[alpha][beta](j, i) = psi[beta][j].dot(m_ * psi[alpha][i]);
    return out;
  }

  // Lifting of e_i on `side` per the configured lifting kind.
  Vector lifting(int i, FaceSide side) const {
    Vector phi = boundary_lifting<Dim>(mesh_, i, side);
    if (opt_.lifting == LiftingKind::linear) return phi;
    DofMap map(mesh_.num_nodes(), Dim);
    map.add_periodic(mesh_.periodic_pairs);
    for (int n : plus_) map.fix_node(n, phi.segment<Dim>(Dim * n));
    for (int n : minus_) map.fix_node(n, phi.segment<Dim>(Dim * n));
    map.finalize();
    ConstrainedSolver s(k_, map);
    return s.solve(Vector::Zero(k_.rows()));
  }

  // Face reactions sum(M a + K u) per component and face.
  typename DynamicCellSolution<Dim>::Reaction reaction(const Vector& u, const Vector& a) const {
    const Vector r = sel_m_ * a + sel_k_ * u;
    typename DynamicCellSolution<Dim>::Reaction out;
    for (int beta = 0; beta < 2; ++beta) out.col(beta) = r.segment<Dim>(beta * Dim);
    return out;
  }

  // `initial_velocity` is the full nodal field u1 for kind u1_tilde.
  DynamicCellSolution<Dim> solve(DynamicKind kind, FaceSide side, int i, const Vector& initial_velocity = {}) const {
    if (i < 0 || i >= Dim) throw InputError("dynamic cell: component out of range");
    const bool faced = kind == DynamicKind::chi || kind == DynamicKind::eta;
    if (faced == (side == FaceSide::none)) throw InputError("dynamic cell: face side must be given exactly for chi and eta");
    DynamicCellSolution<Dim> sol;
    sol.kind = kind;
    sol.side = side;
    sol.component = i;
    sol.grid = grid_;
    sol.stride = opt_.stride;
    sol.warnings = warnings_;

    const int n = k_.rows();
    Vector u_d = Vector::Zero(n), u0 = Vector::Zero(n), v0 = Vector::Zero(n);
    switch (kind) {
      case DynamicKind::chi:
        sol.lifting = lifting(i, side);
        u0 = sol.lifting;
        for (int d = 0; d < n; ++d)
          if (map_.is_fixed(d)) u_d[d] = sol.lifting[d];
        break;
      case DynamicKind::eta:
        sol.lifting = lifting(i, side);
        v0 = -sol.lifting;
        break;
      case DynamicKind::theta:
        for (int node = 0; node < mesh_.num_nodes(); ++node) v0[Dim * node + i] = 1.0;
        break;
      case DynamicKind::u1_tilde:
        if (initial_velocity.size() != n) throw InputError("dynamic cell: u1_tilde needs a full initial velocity field");
        v0 = initial_velocity;
        break;
    }
    // Initial velocities enter through the mass projection onto the space
    // with the prescribed face values, the discrete form of L2 data.
    const bool project = kind != DynamicKind::chi;
    return run(std::move(sol), u_d, u0, v0, project);
  }

  DynamicCellSolution<Dim> solve_chi(FaceSide s, int i) const { return solve(DynamicKind::chi, s, i); }
  DynamicCellSolution<Dim> solve_eta(FaceSide s, int i) const { return solve(DynamicKind::eta, s, i); }
  DynamicCellSolution<Dim> solve_theta(int i) const { return solve(DynamicKind::theta, FaceSide::none, i); }
  DynamicCellSolution<Dim> solve_u1_tilde(const Vector& u1) const { return solve(DynamicKind::u1_tilde, FaceSide::none, 0, u1); }

  // General run: fixed-in-time Dirichlet values u_d on the face dofs,
  // initial displacement and velocity (values on fixed dofs are ignored
  // unless the velocity is mass-projected).
  DynamicCellSolution<Dim> run(DynamicCellSolution<Dim> sol, const Vector& u_d, const Vector& u0, const Vector& v0,
                               bool project_velocity = false) const {
    const SparseMatrix& p = map_.prolongation();
    const Vector f = -(p.transpose() * (k_ * u_d));
    const Vector vr = project_velocity ? op_->solve_mass(p.transpose() * (m_ * v0)) : map_.restrict(v0);
    NewmarkState st = op_->initial_state(map_.restrict(u0), vr, f);
    const int steps = grid_.steps;
    sol.u.clear();
    sol.v.clear();
    sol.a.clear();
    sol.reactions.clear();
    sol.energy.clear();
    sol.reactions.reserve(steps + 1);
    sol.energy.reserve(steps + 1);
    for (int step = 0;; ++step) {
      const Vector u = p * st.u + u_d, a = p * st.a;
      sol.reactions.push_back(reaction(u, a));
      const Vector v = p * st.v;
      sol.energy.push_back(0.5 * v.dot(m_ * v) + 0.5 * u.dot(k_ * u));
      if (opt_.store_fields && step % opt_.stride == 0) {
        sol.u.push_back(u);
        sol.v.push_back(v);
        sol.a.push_back(a);
      }
      if (step == steps) break;
      op_->advance(st, f);
    }
    return sol;
  }

 private:
  const GridMesh<Dim>& mesh_;
  CellMaterial<Dim> mat_;
  TimeGrid grid_;
  DynamicOptions opt_;
  SparseMatrix k_, m_, sel_m_, sel_k_;
  std::vector<int> plus_, minus_;
  DofMap map_;
  std::shared_ptr<const NewmarkOperator> op_;
  std::vector<std::string> warnings_;
};

template <int Dim>
DynamicCellSolution<Dim> solve_dynamic_cell(const GridMesh<Dim>& mesh, const CellMaterial<Dim>& mat, DynamicKind kind,
                                            FaceSide side, int i, const TimeGrid& grid, const Vector& u1 = {}) {
  return DynamicCellSolver<Dim>(mesh, mat, grid).solve(kind, side, i, u1);
}

template <int Dim>
std::array<std::array<Eigen::Matrix<double, Dim, Dim>, 2>, 2> zero_block_pairs() {
  std::array<std::array<Eigen::Matrix<double, Dim, Dim>, 2>, 2> z;
  for (auto& row : z)
    for (auto& b : row) b.setZero();
  return z;
}

// chi and eta for both faces and all components.
template <int Dim>
struct DynamicCorrectorSet {
  std::array<std::array<DynamicCellSolution<Dim>, Dim>, 2> chi, eta;  // [side][i]
  std::array<std::array<Eigen::Matrix<double, Dim, Dim>, 2>, 2> added_mass = zero_block_pairs<Dim>();  // [alpha][beta]
};

template <int Dim>
DynamicCorrectorSet<Dim> solve_dynamic_correctors(const DynamicCellSolver<Dim>& s) {
  DynamicCorrectorSet<Dim> out;
  out.added_mass = s.added_mass();
  parallel_for(4 * Dim, [&](int job) {
    const int kind = job / (2 * Dim), side = (job / Dim) % 2, i = job % Dim;
    const FaceSide fs = side == 0 ? FaceSide::plus : FaceSide::minus;
    if (kind == 0)
      out.chi[side][i] = s.solve_chi(fs, i);
    else
      out.eta[side][i] = s.solve_eta(fs, i);
  });
  return out;
}

// G[alpha][beta][n](j, i): reaction component j on face beta at lag n*dt of
// chi_i^alpha; F likewise from eta_i^alpha. M0[alpha][beta] multiplies the
// current trace acceleration (no memory).
template <int Dim>
struct MemoryKernelTable {
  using Block = Eigen::Matrix<double, Dim, Dim>;
  TimeGrid grid;
  std::array<std::array<std::vector<Block>, 2>, 2> G, F;
  std::array<std::array<Block, 2>, 2> M0 = zero_block_pairs<Dim>();
  std::string provenance;

  double dt() const { return grid.dt(); }
  int steps() const { return grid.steps; }

  // Uniform scaling of both kernels (material scaling, tests).
  MemoryKernelTable scaled(double c) const {
    MemoryKernelTable out = *this;
    for (auto* k : {&out.G, &out.F})
      for (auto& row : *k)
        for (auto& series : row)
          for (auto& b : series) b *= c;
    for (auto& row : out.M0)
      for (auto& b : row) b *= c;
    return out;
  }
};

template <int Dim>
MemoryKernelTable<Dim> extract_kernels(const DynamicCorrectorSet<Dim>& set, std::string provenance = {}) {
  MemoryKernelTable<Dim> t;
  t.grid = set.chi[0][0].grid;
  t.provenance = std::move(provenance);
  t.M0 = set.added_mass;
  const int steps = t.grid.steps;
  for (int side = 0; side < 2; ++side)
    for (int i = 0; i < Dim; ++i)
      for (const auto* s : {&set.chi[side][i], &set.eta[side][i]}) {
        if (!(s->grid == t.grid)) throw InputError("extract_kernels: time grids differ across solutions");
        if (static_cast<int>(s->reactions.size()) != steps + 1) throw InputError("extract_kernels: incomplete solution");
        if (s->side != (side == 0 ? FaceSide::plus : FaceSide::minus) || s->component != i)
          throw InputError("extract_kernels: solution set out of order");
      }
  for (int alpha = 0; alpha < 2; ++alpha)
    for (int beta = 0; beta < 2; ++beta) {
      t.G[alpha][beta].assign(steps + 1, MemoryKernelTable<Dim>::Block::Zero());
      t.F[alpha][beta].assign(steps + 1, MemoryKernelTable<Dim>::Block::Zero());
      for (int n = 0; n <= steps; ++n)
        for (int i = 0; i < Dim; ++i) {
          t.G[alpha][beta][n].col(i) = set.chi[alpha][i].reactions[n].col(beta);
          t.F[alpha][beta][n].col(i) = set.eta[alpha][i].reactions[n].col(beta);
        }
    }
  return t;
}

template <int Dim>
void write_kernel_csv(std::ostream& os, const MemoryKernelTable<Dim>& t) {
  os << std::setprecision(17);
  os << "# dt=" << t.dt() << " T=" << t.grid.t_final << " steps=" << t.steps();
  if (!t.provenance.empty()) os << ' ' << t.provenance;
  os << "\n# M0";
  for (int alpha = 0; alpha < 2; ++alpha)
    for (int beta = 0; beta < 2; ++beta)
      for (int j = 0; j < Dim; ++j)
        for (int i = 0; i < Dim; ++i) os << ' ' << t.M0[alpha][beta](j, i);
  os << "\ntau,alpha,beta,j,i,G_value,F_value\n";
  const char* names[2] = {"plus", "minus"};
  for (int alpha = 0; alpha < 2; ++alpha)
    for (int beta = 0; beta < 2; ++beta)
      for (int n = 0; n <= t.steps(); ++n)
        for (int j = 0; j < Dim; ++j)
          for (int i = 0; i < Dim; ++i)
            os << t.grid.time(n) << ',' << names[alpha] << ',' << names[beta] << ',' << j + 1 << ',' << i + 1 << ','
               << t.G[alpha][beta][n](j, i) << ',' << t.F[alpha][beta][n](j, i) << '\n';
}

// Volume form int d_t(rho d_t X)(tau) . Y(t) + A e(X)(tau) : e(Y)(t) for two
// stored series, with the inertia term taken from the Newmark accelerations
// or from central differences of the velocities.
template <int Dim>
double kernel_volume_diagnostic(const DynamicCellSolver<Dim>& s, const DynamicCellSolution<Dim>& x, int tau,
                                const DynamicCellSolution<Dim>& y, int t, AccelerationMode mode = AccelerationMode::newmark) {
  const int steps = s.grid().steps;
  if (tau < 0 || t < 0 || tau > steps || t > steps) throw InputError("kernel_volume_diagnostic: step off grid");
  Vector acc;
  if (mode == AccelerationMode::newmark) {
    acc = x.a_at(tau);
  } else {
    const int lo = std::max(0, tau - x.stride), hi = std::min(steps, tau + x.stride);
    acc = (x.v_at(hi) - x.v_at(lo)) / ((hi - lo) * s.grid().dt());
  }
  const Vector& yt = y.u_at(t);
  return (s.mass() * acc).dot(yt) + (s.stiffness() * x.u_at(tau)).dot(yt);
}

// Trapezoidal weights on [0, t_n].
inline double trapezoid_weight(int k, int n, double dt) {
  if (n == 0) return 0.0;
  return (k == 0 || k == n) ? 0.5 * dt : dt;
}

// Interface data driving the layer: sampled traces and layer data.
template <int Dim>
struct LayerDrive {
  std::array<std::vector<Point<Dim>>, 2> velocity;      // d_t u^{+/-}(t_n)
  std::array<std::vector<Point<Dim>>, 2> acceleration;  // d_tt u^{+/-}(t_n)
  std::vector<Point<Dim>> force;                         // f^M(t_n), may be empty
  Vector u0;                                             // u0^M nodal field, may be empty
};

template <int Dim>
struct LayerRepresentation {
  std::vector<Vector> u;  // per step
  std::vector<Vector> a;  // per step; empty when the force term is present
};

// Discrete (trapezoidal) convolution form of
// u^M = u0 + u1~ + sum_i int f_i theta_i(t-s) + sum_{+-,i} [int d_t u_i chi_i(t-s)
//       + int d_tt u_i eta_i(t-s) + d_t u_i(0) eta_i(t)].
// theta and u1_tilde may be null when the corresponding data vanish.
template <int Dim>
LayerRepresentation<Dim> represent_layer_displacement(const DynamicCorrectorSet<Dim>& set, const LayerDrive<Dim>& drive,
                                                      const std::type_identity_t<std::array<const DynamicCellSolution<Dim>*, Dim>>* theta = nullptr,
                                                      const std::type_identity_t<DynamicCellSolution<Dim>>* u1_tilde = nullptr) {
  const TimeGrid grid = set.chi[0][0].grid;
  const int steps = grid.steps;
  const double dt = grid.dt();
  auto need = [&](const DynamicCellSolution<Dim>& s) {
    if (!(s.grid == grid)) throw InputError("represent_layer_displacement: grid mismatch");
    if (s.stride != 1 || static_cast<int>(s.u.size()) != steps + 1)
      throw InputError("represent_layer_displacement: cell solutions need every step stored");
  };
  for (int side = 0; side < 2; ++side) {
    if (static_cast<int>(drive.velocity[side].size()) != steps + 1 ||
        static_cast<int>(drive.acceleration[side].size()) != steps + 1)
      throw InputError("represent_layer_displacement: traces must be sampled on the grid");
    for (int i = 0; i < Dim; ++i) {
      need(set.chi[side][i]);
      need(set.eta[side][i]);
    }
  }
  const bool forced = !drive.force.empty();
  if (forced) {
    if (static_cast<int>(drive.force.size()) != steps + 1) throw InputError("represent_layer_displacement: force not on grid");
    if (!theta) throw InputError("represent_layer_displacement: missing theta solutions");
    for (int i = 0; i < Dim; ++i) need(*(*theta)[i]);
  }
  if (u1_tilde) need(*u1_tilde);

  const int n_dof = static_cast<int>(set.chi[0][0].u[0].size());
  LayerRepresentation<Dim> out;
  out.u.assign(steps + 1, Vector::Zero(n_dof));
  if (!forced) out.a.assign(steps + 1, Vector::Zero(n_dof));
  for (int n = 0; n <= steps; ++n) {
    Vector& u = out.u[n];
    if (drive.u0.size() == n_dof) u += drive.u0;
    if (u1_tilde) {
      u += u1_tilde->u[n];
      if (!forced) out.a[n] += u1_tilde->a[n];
    }
    for (int side = 0; side < 2; ++side)
      for (int i = 0; i < Dim; ++i) {
        const auto& chi = set.chi[side][i];
        const auto& eta = set.eta[side][i];
        for (int k = 0; k <= n; ++k) {
          const double w = trapezoid_weight(k, n, dt);
          const double vk = drive.velocity[side][k][i], ak = drive.acceleration[side][k][i];
          if (vk != 0.0) {
            u += (w * vk) * chi.u[n - k];
            if (!forced) out.a[n] += (w * vk) * chi.a[n - k];
          }
          if (ak != 0.0) {
            u += (w * ak) * eta.u[n - k];
            if (!forced) out.a[n] += (w * ak) * eta.a[n - k];
          }
        }
        const double v0 = drive.velocity[side][0][i];
        if (v0 != 0.0) {
          u += v0 * eta.u[n];
          if (!forced) out.a[n] += v0 * eta.a[n];
        }
      }
    if (forced) {
      // Duhamel form: theta is the response to a unit initial velocity.
      for (int i = 0; i < Dim; ++i)
        for (int k = 0; k <= n; ++k) {
          const double fk = drive.force[k][i];
          if (fk != 0.0) u += (trapezoid_weight(k, n, dt) * fk) * (*theta)[i]->u[n - k];
        }
    }
  }
  return out;
}

}  // namespace thinlayer
