#pragma once

// Homogenized interface models between two elastic half-strips
// Omega+ = (0, L) x (0, W) and Omega- = (-L, 0) x (0, W) meeting on omega = {0} x (0, W).
//
//   gamma =  1: tractions from the memory kernels (and a monolithic two-scale
//               reference that carries one cell per interface).
//   gamma = -1: shared interface, mass layer rho_bar plus membrane A* on u_2.
//   gamma = -3: shared normal component, tangential trace clamped, plate strip
//               (a*, b*, c*) on u_1 with the in-plane field condensed out.
//
// normal_1d mode is one element wide with periodic lateral sides, which is the
// exact x'-independent reduction; plane_2d clamps the lateral sides.

#include <algorithm>
#include <array>
#include <complex>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cell_dynamic.hpp"
#include "cell_static.hpp"
#include "newmark.hpp"

namespace thinlayer {

enum class MacroMode { normal_1d, plane_2d };

inline const char* to_string(MacroMode m) { return m == MacroMode::normal_1d ? "normal_1d" : "plane_2d"; }

struct BulkMaterial {
  ElasticTensor4<2> tensor = isotropic_tensor<2>(1.0, 1.0);
  double density = 1.0;
};

using FieldFn = std::function<Point<2>(const Point<2>&)>;
using TimeFn = std::function<Point<2>(double)>;
using SpaceTimeFn = std::function<Point<2>(double, const Point<2>&)>;

struct MacroConfig {
  MacroMode mode = MacroMode::normal_1d;
  int gamma = 1;
  std::array<BulkMaterial, 2> bulk;  // [0]: Omega+, [1]: Omega-
  double length = 10.0;              // extent of each bulk along x1
  double width = 1.0;                // extent of omega along x2
  int elements_normal = 200;         // per bulk
  int elements_lateral = 1;          // forced to 1 in normal_1d
  TimeGrid grid;

  TimeFn end_traction;    // g on x1 = -L (force per unit area); optional
  FieldFn u0, u1;         // bulk initial displacement and velocity; optional
  SpaceTimeFn body_force; // f+- (acceleration units); optional
  SpaceTimeFn layer_force;  // f^M on omega (gamma = -1, -3); optional
  std::vector<Point<2>> probes;
  bool store_fields = false;  // nodal bulk and interface fields per step

  const MemoryKernelTable<2>* kernels = nullptr;           // gamma = 1
  const EffectiveCoefficients<2>* coefficients = nullptr;  // gamma = -1, -3
};

struct MacroResult {
  std::vector<double> time;
  std::vector<std::vector<Point<2>>> probes;       // [step][probe]
  std::array<std::vector<Point<2>>, 2> trace;      // mean interface displacement of each bulk
  std::array<std::vector<Point<2>>, 2> traction;   // mean force per area the interface exerts on each bulk
  std::vector<double> energy, work;                // E_n and cumulative work of all non-conservative forces
  double energy_balance_error = 0.0;               // max_n |E_n - E_0 - W_n| / scale
  double max_tangential_trace = 0.0;               // gamma = -3: max |u_2| on omega
  std::vector<double> interface_x2;                // interface node coordinates
  std::vector<std::vector<double>> normal_displacement;  // gamma = -3: [step][node] u^M_1
  std::vector<std::vector<double>> inplane_displacement; // gamma = -3: [step][node] u_hat
  std::vector<Vector> cell_u, cell_a;              // two-scale reference: cell fields per step
  // With store_fields: bulk node positions, lumped area weights, nodal
  // displacements [side][step] and interface displacements [side][step][node].
  std::array<std::vector<Point<2>>, 2> bulk_nodes;
  std::array<Vector, 2> bulk_weights;
  std::array<std::vector<Vector>, 2> bulk_u;
  std::array<std::vector<std::vector<Point<2>>>, 2> interface_u;
  std::vector<std::string> warnings;
};

// Transmission coefficient of a mass-loaded interface for incidence from
// medium 1 (time dependence exp(-i w t)).
inline std::complex<double> mass_interface_transmission(double z1, double z2, double mass, double omega) {
  return 2.0 * z1 / std::complex<double>(z1 + z2, -omega * mass);
}

// Plate strip on [0, l] clamped at both ends: Hermite cubics for w, linear
// elements for the in-plane u_hat, energy 1/2 a u_hat'^2 + b u_hat' w'' + 1/2 c w''^2.
// u_hat is condensed out. Local dofs: (w_i, w'_i) for interior nodes i = 1..n-1.
struct PlateStrip {
  int elements = 0;
  double h = 0.0;
  Eigen::MatrixXd stiffness;  // condensed, 2(n-1) square
  Eigen::MatrixXd mass;       // rho_bar on w
  Eigen::MatrixXd recover;    // u_hat (interior) = recover * (w, w')

  PlateStrip(double a, double b, double c, double rho, double length, int n) : elements(n), h(length / n) {
    if (n < 2) throw InputError("plate strip: need at least two elements");
    if (!(c > 0.0) || !(a > 0.0) || a * c - b * b <= 0.0) throw InputError("plate strip: coefficients not coercive");
    const int nw = 2 * (n + 1), nu = n + 1;
    Eigen::MatrixXd kww = Eigen::MatrixXd::Zero(nw, nw), mww = kww, kuw = Eigen::MatrixXd::Zero(nu, nw),
                    kuu = Eigen::MatrixXd::Zero(nu, nu);
    Eigen::Matrix4d ke, me;
    ke << 12, 6 * h, -12, 6 * h, 6 * h, 4 * h * h, -6 * h, 2 * h * h, -12, -6 * h, 12, -6 * h, 6 * h, 2 * h * h, -6 * h,
        4 * h * h;
    ke *= c / (h * h * h);
    me << 156, 22 * h, 54, -13 * h, 22 * h, 4 * h * h, 13 * h, -3 * h * h, 54, 13 * h, 156, -22 * h, -13 * h, -3 * h * h,
        -22 * h, 4 * h * h;
    me *= rho * h / 420.0;
    for (int e = 0; e < n; ++e) {
      const int o = 2 * e;
      kww.block<4, 4>(o, o) += ke;
      mww.block<4, 4>(o, o) += me;
      // int u_hat' w'' = u_hat' (w'_2 - w'_1), u_hat' = (u_2 - u_1) / h.
      for (int s = 0; s < 2; ++s) {
        const double sg = s == 0 ? -1.0 : 1.0;
        kuw(e + s, o + 1) += -b * sg / h;
        kuw(e + s, o + 3) += b * sg / h;
        for (int t = 0; t < 2; ++t) kuu(e + s, e + t) += a / h * (s == t ? 1.0 : -1.0);
      }
    }
    const int m = 2 * (n - 1);
    const Eigen::MatrixXd kw = kww.block(2, 2, m, m), mw = mww.block(2, 2, m, m);
    const Eigen::MatrixXd ku = kuu.block(1, 1, n - 1, n - 1), kx = kuw.block(1, 2, n - 1, m);
    Eigen::LDLT<Eigen::MatrixXd> lu(ku);
    recover = -lu.solve(kx);
    stiffness = kw + kx.transpose() * recover;
    stiffness = 0.5 * (stiffness + stiffness.transpose()).eval();
    mass = mw;
  }

  // Consistent load of a uniform pressure p.
  Vector uniform_load(double p) const {
    Vector f = Vector::Zero(2 * (elements + 1));
    for (int e = 0; e < elements; ++e) {
      f[2 * e] += p * h / 2;
      f[2 * e + 1] += p * h * h / 12;
      f[2 * e + 2] += p * h / 2;
      f[2 * e + 3] += -p * h * h / 12;
    }
    return f.segment(2, 2 * (elements - 1));
  }
};

// Static midpoint deflection of the clamped strip under uniform pressure.
inline double plate_strip_static_midpoint(double a, double b, double c, double length, double p, int elements) {
  if (elements % 2) throw InputError("plate strip: even element count needed for a midpoint node");
  PlateStrip s(a, b, c, 1.0, length, elements);
  const Vector x = s.stiffness.ldlt().solve(s.uniform_load(p));
  return x[2 * (elements / 2 - 1)];
}

// Scalar in-plane coefficients of a 2D cell (one in-plane direction).
struct StripCoefficients {
  double A = 0.0, a = 0.0, b = 0.0, c = 0.0, rho = 0.0;
};

inline StripCoefficients strip_coefficients(const EffectiveCoefficients<2>& e) {
  StripCoefficients s;
  s.A = e.A_star(0, 0, 0, 0);
  s.a = e.a_star(0, 0, 0, 0);
  s.c = e.c_star(0, 0, 0, 0);
  s.b = e.b_star(0, 0);
  s.rho = e.rho_bar;
  return s;
}

namespace detail {

// Assembled two-bulk system with interface operators; time stepping shared
// by all gamma.
class MacroSystem {
 public:
  explicit MacroSystem(const MacroConfig& cfg) : cfg_(cfg) {
    cfg_.grid.validate();
    if (!(cfg_.length > 0.0) || !(cfg_.width > 0.0) || cfg_.elements_normal < 1 || cfg_.elements_lateral < 1)
      throw InputError("macro: geometry and element counts must be positive");
    if (cfg_.mode == MacroMode::normal_1d) cfg_.elements_lateral = 1;
    if (cfg_.mode == MacroMode::plane_2d && cfg_.elements_lateral < 2)
      throw InputError("macro: plane_2d needs at least two lateral elements");
    const auto x2 = uniform_ticks(0.0, cfg_.width, cfg_.elements_lateral);
    const auto solid = [](const Point<2>&) { return 0; };
    mesh_[0] = build_grid_mesh<2>({uniform_ticks(0.0, cfg_.length, cfg_.elements_normal), x2}, solid);
    mesh_[1] = build_grid_mesh<2>({uniform_ticks(-cfg_.length, 0.0, cfg_.elements_normal), x2}, solid);
    offset_[0] = 0;
    offset_[1] = 2 * mesh_[0].num_nodes();
    ndof_ = offset_[1] + 2 * mesh_[1].num_nodes();
    for (int s = 0; s < 2; ++s) {
      kb_[s] = assemble_stiffness<2>(mesh_[s], cfg_.bulk[s].tensor);
      mb_[s] = assemble_mass<2>(mesh_[s], cfg_.bulk[s].density);
      add_block(kt_, kb_[s], offset_[s]);
      add_block(mt_, mb_[s], offset_[s]);
      const int col = s == 0 ? 0 : cfg_.elements_normal;
      iface_[s].resize(cfg_.elements_lateral + 1);
      for (int j = 0; j <= cfg_.elements_lateral; ++j) iface_[s][j] = mesh_[s].node_at({col, j});
    }
    const double h2 = cfg_.width / cfg_.elements_lateral;
    weight_ = Vector::Constant(cfg_.elements_lateral + 1, h2);
    weight_[0] = weight_[cfg_.elements_lateral] = 0.5 * h2;
    for (int j = 0; j <= cfg_.elements_lateral; ++j) {
      x2_.push_back(x2[j]);
      end_nodes_.push_back(mesh_[1].node_at({0, j}));
    }
    for (int s = 0; s < 2; ++s) {
      if (cfg_.mode == MacroMode::normal_1d) {
        for (auto [a, b] : periodic_pairing(mesh_[s], {1}))
          for (int c = 0; c < 2; ++c) equal_.emplace_back(dof(s, a, c), dof(s, b, c));
      } else {
        for (int n = 0; n < mesh_[s].num_nodes(); ++n) {
          const int j = mesh_[s].node_index[n][1];
          if (j == 0 || j == cfg_.elements_lateral)
            for (int c = 0; c < 2; ++c) fixed_.push_back(dof(s, n, c));
        }
      }
    }
  }

  const MacroConfig& config() const { return cfg_; }
  int dof(int side, int node, int comp) const { return offset_[side] + 2 * node + comp; }
  int iface_dof(int side, int j, int comp) const { return dof(side, iface_[side][j], comp); }
  int lateral_nodes() const { return cfg_.elements_lateral + 1; }
  double weight(int j) const { return weight_[j]; }
  int num_dofs() const { return ndof_; }
  int add_dofs(int n) {
    const int first = ndof_;
    ndof_ += n;
    return first;
  }
  void equal(int a, int b) { equal_.emplace_back(a, b); }
  void fix(int d) { fixed_.push_back(d); }
  Triplets& mass_triplets() { return mt_; }
  Triplets& stiffness_triplets() { return kt_; }
  Triplets& damping_triplets() { return ct_; }
  static void add_block(Triplets& t, const SparseMatrix& m, int off, double scale = 1.0) {
    for (int j = 0; j < m.outerSize(); ++j)
      for (SparseMatrix::InnerIterator it(m, j); it; ++it) t.emplace_back(off + it.row(), off + it.col(), scale * it.value());
  }
  const GridMesh<2>& mesh(int s) const { return mesh_[s]; }
  const std::vector<double>& x2() const { return x2_; }

  // Consistent 1D mass (linear elements) along omega on one component.
  void add_line_mass(int comp, double rho) {
    const double h = cfg_.width / cfg_.elements_lateral;
    for (int e = 0; e < cfg_.elements_lateral; ++e)
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          mt_.emplace_back(iface_dof(0, e + a, comp), iface_dof(0, e + b, comp), rho * h / 6.0 * (a == b ? 2.0 : 1.0));
  }
  void add_line_stiffness(int comp, double k) {
    const double h = cfg_.width / cfg_.elements_lateral;
    for (int e = 0; e < cfg_.elements_lateral; ++e)
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          kt_.emplace_back(iface_dof(0, e + a, comp), iface_dof(0, e + b, comp), k / h * (a == b ? 1.0 : -1.0));
  }

  // Hooks for gamma-specific behaviour.
  std::function<Vector(int step)> extra_load;                    // full vector at step
  std::function<void(const Vector& u, const Vector& v, const Vector& a, int step)> observe;  // after each step
  std::function<void(Vector& u0, Vector& v0)> adjust_initial;     // before restriction
  bool symmetric = true;
  bool compensate_initial_damping = false;

  MacroResult run() {
    DofMap map(ndof_, 1);
    map.add_periodic(equal_);
    for (int d : fixed_) map.fix(d, 0.0);
    map.finalize();
    const SparseMatrix& p = map.prolongation();
    SparseMatrix m(ndof_, ndof_), k(ndof_, ndof_), c(ndof_, ndof_);
    m.setFromTriplets(mt_.begin(), mt_.end());
    k.setFromTriplets(kt_.begin(), kt_.end());
    c.setFromTriplets(ct_.begin(), ct_.end());
    const SparseMatrix pt = p.transpose();
    SparseMatrix mr = pt * m * p, kr = pt * k * p, cr = pt * c * p;
    const bool damped = cr.nonZeros() > 0;
    NewmarkOperator op(mr, kr, cfg_.grid.dt(), damped ? cr : SparseMatrix{}, NewmarkParams{}, symmetric);

    Vector u0 = Vector::Zero(ndof_), v0 = Vector::Zero(ndof_);
    for (int s = 0; s < 2; ++s)
      for (int n = 0; n < mesh_[s].num_nodes(); ++n) {
        if (cfg_.u0) u0.segment<2>(dof(s, n, 0)) = cfg_.u0(mesh_[s].nodes[n]);
        if (cfg_.u1) v0.segment<2>(dof(s, n, 0)) = cfg_.u1(mesh_[s].nodes[n]);
      }
    if (adjust_initial) adjust_initial(u0, v0);

    const int steps = cfg_.grid.steps;
    auto bulk_load = [&](int step) {
      const double t = cfg_.grid.time(step);
      Vector f = Vector::Zero(ndof_);
      if (cfg_.end_traction) {
        const Point<2> g = cfg_.end_traction(t);
        for (int j = 0; j < lateral_nodes(); ++j) f.segment<2>(dof(1, end_nodes_[j], 0)) += weight_[j] * g;
      }
      if (cfg_.body_force)
        for (int s = 0; s < 2; ++s) {
          Vector nodal(2 * mesh_[s].num_nodes());
          for (int n = 0; n < mesh_[s].num_nodes(); ++n) nodal.segment<2>(2 * n) = cfg_.body_force(t, mesh_[s].nodes[n]);
          f.segment(offset_[s], nodal.size()) += mb_[s] * nodal;
        }
      return f;
    };
    auto total_load = [&](int step, Vector& bulk) {
      bulk = bulk_load(step);
      Vector f = bulk;
      if (extra_load) f += extra_load(step);
      return f;
    };

    MacroResult res;
    res.interface_x2 = x2_;
    if (cfg_.store_fields)
      for (int s = 0; s < 2; ++s) {
        res.bulk_nodes[s] = mesh_[s].nodes;
        const Vector l = lumped(assemble_mass<2>(mesh_[s], 1.0));
        res.bulk_weights[s] = Eigen::Map<const Vector, 0, Eigen::InnerStride<2>>(l.data(), mesh_[s].num_nodes());
      }
    Vector fb;
    Vector f = total_load(0, fb);
    Vector fr = pt * f;
    NewmarkState st = op.initial_state(map.restrict(u0), map.restrict(v0), damped && compensate_initial_damping ? Vector(fr + cr * map.restrict(v0)) : fr);
    Vector force_prev = fr;  // total non-conservative force on the reduced dofs
    double work = 0.0;
    Vector r_prev = st.u;
    for (int step = 0;; ++step) {
      const Vector u = p * st.u, v = p * st.v, a = p * st.a;
      res.time.push_back(cfg_.grid.time(step));
      record(res, u, a, fb);
      res.energy.push_back(op.energy(st));
      if (step > 0) work += 0.5 * (force_prev + fr).dot(st.u - r_prev);
      res.work.push_back(work);
      force_prev = fr;
      r_prev = st.u;
      if (observe) observe(u, v, a, step);
      if (step == steps) break;
      f = total_load(step + 1, fb);
      op.advance(st, pt * f);
      fr = pt * f - (damped ? Vector(cr * st.v) : Vector::Zero(fr.size()));
    }
    double scale = 0.0, err = 0.0;
    for (size_t n = 0; n < res.energy.size(); ++n) {
      scale = std::max({scale, std::abs(res.energy[n]), std::abs(res.work[n])});
      err = std::max(err, std::abs(res.energy[n] - res.energy[0] - res.work[n]));
    }
    res.energy_balance_error = scale > 0.0 ? err / scale : err;
    return res;
  }

 private:
  void record(MacroResult& res, const Vector& u, const Vector& a, const Vector& fb) const {
    std::vector<Point<2>> pr;
    for (const auto& q : cfg_.probes) pr.push_back(probe(u, q));
    res.probes.push_back(std::move(pr));
    for (int s = 0; s < 2; ++s) {
      Point<2> tr = Point<2>::Zero(), tt = Point<2>::Zero();
      const Vector ub = u.segment(offset_[s], 2 * mesh_[s].num_nodes());
      const Vector ab = a.segment(offset_[s], ub.size());
      const Vector rb = mb_[s] * ab + kb_[s] * ub - fb.segment(offset_[s], ub.size());
      for (int j = 0; j < lateral_nodes(); ++j) {
        tr += weight_[j] * ub.segment<2>(2 * iface_[s][j]);
        tt += rb.segment<2>(2 * iface_[s][j]);
      }
      res.trace[s].push_back(tr / cfg_.width);
      res.traction[s].push_back(tt / cfg_.width);
      if (cfg_.store_fields) {
        res.bulk_u[s].push_back(ub);
        std::vector<Point<2>> iu;
        for (int j = 0; j < lateral_nodes(); ++j) iu.push_back(ub.segment<2>(2 * iface_[s][j]));
        res.interface_u[s].push_back(std::move(iu));
      }
    }
  }

  // Displacement at the nearest bulk node.
  Point<2> probe(const Vector& u, const Point<2>& q) const {
    const int s = q[0] >= 0.0 ? 0 : 1;
    int best = 0;
    double dist = 1e300;
    for (int n = 0; n < mesh_[s].num_nodes(); ++n) {
      const double d = (mesh_[s].nodes[n] - q).squaredNorm();
      if (d < dist) {
        dist = d;
        best = n;
      }
    }
    return u.segment<2>(dof(s, best, 0));
  }

  MacroConfig cfg_;
  std::array<GridMesh<2>, 2> mesh_;
  std::array<int, 2> offset_{};
  int ndof_ = 0;
  std::array<SparseMatrix, 2> kb_, mb_;
  std::array<std::vector<int>, 2> iface_;
  std::vector<int> end_nodes_;
  Vector weight_;
  std::vector<double> x2_;
  Triplets mt_, kt_, ct_;
  std::vector<std::pair<int, int>> equal_;
  std::vector<int> fixed_;
};

inline int kernel_stride(const MemoryKernelTable<2>& k, const TimeGrid& g) {
  const double ratio = g.dt() / k.dt();
  const int m = static_cast<int>(std::lround(ratio));
  if (m < 1 || std::abs(ratio - m) > 1e-9 * ratio)
    throw InputError("macro: solver dt must be an integer multiple of the kernel dt");
  if (static_cast<long>(k.steps()) < static_cast<long>(g.steps) * m) throw InputError("macro: kernel table shorter than the run");
  return m;
}

}  // namespace detail

// gamma = 1 with memory-kernel interface tractions (trapezoidal convolution,
// lag-0 term implicit). Requires vanishing layer data.
inline MacroResult solve_macro_gamma1(const MacroConfig& cfg) {
  if (cfg.gamma != 1) throw InputError("solve_macro_gamma1: gamma must be 1");
  if (!cfg.kernels) throw InputError("solve_macro_gamma1: kernel table missing");
  if (cfg.layer_force)
    throw InputError("solve_macro_gamma1: nonzero layer data is not covered by the kernel model; use solve_two_scale_reference");
  detail::MacroSystem sys(cfg);
  const auto& ker = *cfg.kernels;
  const int stride = detail::kernel_stride(ker, cfg.grid);
  const int nl = sys.lateral_nodes();
  const double dt = cfg.grid.dt();

  // Lag-0 term (dt/2) G(0) v_{n+1} and the instantaneous mass M0 a_{n+1} on
  // the left-hand side; rows on bulk beta, columns on alpha.
  for (int j = 0; j < nl; ++j)
    for (int alpha = 0; alpha < 2; ++alpha)
      for (int beta = 0; beta < 2; ++beta)
        for (int r = 0; r < 2; ++r)
          for (int c = 0; c < 2; ++c) {
            const int row = sys.iface_dof(beta, j, r), col = sys.iface_dof(alpha, j, c);
            sys.damping_triplets().emplace_back(row, col, sys.weight(j) * 0.5 * dt * ker.G[alpha][beta][0](r, c));
            sys.mass_triplets().emplace_back(row, col, sys.weight(j) * ker.M0[alpha][beta](r, c));
          }
  sys.symmetric = false;
  sys.compensate_initial_damping = true;

  // Trace histories [side][node][step].
  auto vel = std::make_shared<std::array<std::vector<std::vector<Point<2>>>, 2>>();
  auto acc = std::make_shared<std::array<std::vector<std::vector<Point<2>>>, 2>>();
  for (int s = 0; s < 2; ++s) {
    (*vel)[s].assign(nl, {});
    (*acc)[s].assign(nl, {});
  }
  sys.observe = [&, vel, acc](const Vector&, const Vector& v, const Vector& a, int) {
    for (int s = 0; s < 2; ++s)
      for (int j = 0; j < nl; ++j) {
        (*vel)[s][j].push_back(v.segment<2>(sys.iface_dof(s, j, 0)));
        (*acc)[s][j].push_back(a.segment<2>(sys.iface_dof(s, j, 0)));
      }
  };
  // Explicit history part of H at step m (histories hold steps 0..m-1).
  sys.extra_load = [&, vel, acc](int m) {
    Vector f = Vector::Zero(sys.num_dofs());
    if (m == 0) return f;
    for (int j = 0; j < nl; ++j)
      for (int beta = 0; beta < 2; ++beta) {
        Point<2> h = Point<2>::Zero();
        for (int alpha = 0; alpha < 2; ++alpha) {
          const auto& g = ker.G[alpha][beta];
          const auto& fk = ker.F[alpha][beta];
          const auto& va = (*vel)[alpha][j];
          const auto& aa = (*acc)[alpha][j];
          for (int k = 0; k < m; ++k) {
            const double w = k == 0 ? 0.5 * dt : dt;
            const int lag = (m - k) * stride;
            h += w * (g[lag] * va[k] + fk[lag] * aa[k]);
          }
          h += fk[m * stride] * va[0];
        }
        f.segment<2>(sys.iface_dof(beta, j, 0)) -= sys.weight(j) * h;
      }
    return f;
  };
  return sys.run();
}

// gamma = -1: continuous displacement across omega, interface mass rho_bar
// and membrane A* acting on u_2.
inline MacroResult solve_macro_gamma_minus1(const MacroConfig& cfg) {
  if (cfg.gamma != -1) throw InputError("solve_macro_gamma_minus1: gamma must be -1");
  if (!cfg.coefficients) throw InputError("solve_macro_gamma_minus1: effective coefficients (A*, rho_bar) missing");
  const auto sc = strip_coefficients(*cfg.coefficients);
  detail::MacroSystem sys(cfg);
  const int nl = sys.lateral_nodes();
  for (int j = 0; j < nl; ++j)
    for (int c = 0; c < 2; ++c) sys.equal(sys.iface_dof(0, j, c), sys.iface_dof(1, j, c));
  for (int c = 0; c < 2; ++c) sys.add_line_mass(c, sc.rho);
  if (cfg.mode == MacroMode::plane_2d) sys.add_line_stiffness(1, sc.A);
  if (cfg.layer_force) {
    sys.extra_load = [&](int step) {
      Vector f = Vector::Zero(sys.num_dofs());
      const double t = cfg.grid.time(step);
      for (int j = 0; j < nl; ++j)
        f.segment<2>(sys.iface_dof(0, j, 0)) += sys.weight(j) * sc.rho * cfg.layer_force(t, Point<2>(0.0, sys.x2()[j]));
      return f;
    };
  }
  return sys.run();
}

// gamma = -3: u+- = u^M_1 e_1 on omega; plate strip on u^M_1 with u_hat
// condensed (quasi-static in-plane balance); mass layer in normal_1d.
inline MacroResult solve_macro_gamma_minus3(const MacroConfig& cfg) {
  if (cfg.gamma != -3) throw InputError("solve_macro_gamma_minus3: gamma must be -3");
  if (!cfg.coefficients) throw InputError("solve_macro_gamma_minus3: plate coefficients (a*, b*, c*, rho_bar) missing");
  const auto sc = strip_coefficients(*cfg.coefficients);
  detail::MacroSystem sys(cfg);
  const int nl = sys.lateral_nodes();
  for (int j = 0; j < nl; ++j) {
    sys.equal(sys.iface_dof(0, j, 0), sys.iface_dof(1, j, 0));
    sys.fix(sys.iface_dof(0, j, 1));
    sys.fix(sys.iface_dof(1, j, 1));
  }
  std::shared_ptr<PlateStrip> strip;
  int rot = -1;
  if (cfg.mode == MacroMode::normal_1d) {
    sys.add_line_mass(0, sc.rho);
  } else {
    strip = std::make_shared<PlateStrip>(sc.a, sc.b, sc.c, sc.rho, cfg.width, cfg.elements_lateral);
    rot = sys.add_dofs(nl);
    sys.fix(rot);
    sys.fix(rot + nl - 1);
    // Local dof q of the strip -> global dof.
    auto global = [&](int q) { return q % 2 == 0 ? sys.iface_dof(0, q / 2 + 1, 0) : rot + q / 2 + 1; };
    const int m = static_cast<int>(strip->stiffness.rows());
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < m; ++b) {
        if (strip->stiffness(a, b) != 0.0) sys.stiffness_triplets().emplace_back(global(a), global(b), strip->stiffness(a, b));
        if (strip->mass(a, b) != 0.0) sys.mass_triplets().emplace_back(global(a), global(b), strip->mass(a, b));
      }
  }
  if (cfg.layer_force) {
    sys.extra_load = [&](int step) {
      Vector f = Vector::Zero(sys.num_dofs());
      const double t = cfg.grid.time(step);
      for (int j = 0; j < nl; ++j)
        f[sys.iface_dof(0, j, 0)] += sys.weight(j) * sc.rho * cfg.layer_force(t, Point<2>(0.0, sys.x2()[j]))[0];
      return f;
    };
  }
  std::vector<std::vector<double>> normal, inplane;
  double tangential = 0.0;
  sys.observe = [&](const Vector& u, const Vector&, const Vector&, int) {
    std::vector<double> w(nl), uh(nl, 0.0);
    for (int j = 0; j < nl; ++j) {
      w[j] = u[sys.iface_dof(0, j, 0)];
      tangential = std::max({tangential, std::abs(u[sys.iface_dof(0, j, 1)]), std::abs(u[sys.iface_dof(1, j, 1)])});
    }
    if (strip) {
      Vector x(2 * (nl - 2));
      for (int j = 1; j + 1 < nl; ++j) {
        x[2 * (j - 1)] = w[j];
        x[2 * (j - 1) + 1] = u[rot + j];
      }
      const Vector r = strip->recover * x;
      for (int j = 1; j + 1 < nl; ++j) uh[j] = r[j - 1];
    }
    normal.push_back(std::move(w));
    inplane.push_back(std::move(uh));
  };
  MacroResult res = sys.run();
  res.normal_displacement = std::move(normal);
  res.inplane_displacement = std::move(inplane);
  res.max_tangential_trace = tangential;
  return res;
}

// Layer data of the two-scale reference (cell fields per unit area of omega).
struct LayerData {
  Vector u0, u1;  // full cell fields; optional
  std::function<Point<2>(double, const Point<2>&)> force;  // f^M(t, y); optional
};

// Monolithic gamma = 1 two-scale model: bulk dofs plus one cell whose faces
// S+- are identified with the bulk interface dofs (normal_1d only).
inline MacroResult solve_two_scale_reference(const MacroConfig& cfg, const GridMesh<2>& cell, const CellMaterial<2>& mat,
                                             const LayerData& layer = {}, bool store_cell_fields = true) {
  if (cfg.gamma != 1) throw InputError("solve_two_scale_reference: gamma must be 1");
  if (cfg.mode != MacroMode::normal_1d)
    throw InputError("solve_two_scale_reference: only normal_1d is supported (one cell per interface)");
  detail::MacroSystem sys(cfg);
  const int nc = 2 * cell.num_nodes();
  const int off = sys.add_dofs(nc);
  const SparseMatrix kc = assemble_stiffness<2>(cell, mat.tensor);
  const SparseMatrix mc = assemble_mass<2>(cell, mat.density, 0.0);
  const double w = cfg.width;
  detail::MacroSystem::add_block(sys.stiffness_triplets(), kc, off, w);
  detail::MacroSystem::add_block(sys.mass_triplets(), mc, off, w);
  for (auto [a, b] : cell.periodic_pairs)
    for (int c = 0; c < 2; ++c) sys.equal(off + 2 * a + c, off + 2 * b + c);
  const auto plus = face_nodes<2>(cell, on_cell_face(CellFace::s_plus));
  const auto minus = face_nodes<2>(cell, on_cell_face(CellFace::s_minus));
  for (int s = 0; s < 2; ++s)
    for (int n : s == 0 ? plus : minus)
      for (int c = 0; c < 2; ++c) sys.equal(off + 2 * n + c, sys.iface_dof(s, 0, c));

  sys.adjust_initial = [&](Vector& u0, Vector& v0) {
    if (layer.u0.size() == nc) u0.segment(off, nc) = layer.u0;
    if (layer.u1.size() == nc) v0.segment(off, nc) = layer.u1;
    for (int s = 0; s < 2; ++s)
      for (int n : s == 0 ? plus : minus) {
        u0.segment<2>(off + 2 * n) = u0.segment<2>(sys.iface_dof(s, 0, 0));
        v0.segment<2>(off + 2 * n) = v0.segment<2>(sys.iface_dof(s, 0, 0));
      }
  };
  if (layer.force) {
    sys.extra_load = [&](int step) {
      Vector f = Vector::Zero(sys.num_dofs());
      const double t = cfg.grid.time(step);
      Vector nodal(nc);
      for (int n = 0; n < cell.num_nodes(); ++n) nodal.segment<2>(2 * n) = layer.force(t, cell.nodes[n]);
      f.segment(off, nc) = w * (mc * nodal);
      return f;
    };
  }
  std::vector<Vector> cu, ca;
  sys.observe = [&](const Vector& u, const Vector&, const Vector& a, int) {
    if (!store_cell_fields) return;
    cu.push_back(u.segment(off, nc));
    ca.push_back(a.segment(off, nc));
  };
  MacroResult res = sys.run();
  res.cell_u = std::move(cu);
  res.cell_a = std::move(ca);
  return res;
}

// Transmission conditions of the gamma = 1 layer evaluated from cell fields:
// u+_k - u-_k = int A e(eta^(k)) : e(u^M) and
// A+ e(u+) n - A- e(u-) n = int rho (f^M - d_tt u^M), n = -e_1.
struct JumpDiagnostics {
  std::vector<Point<2>> displacement_formula, displacement_direct;
  std::vector<Point<2>> stress_formula, stress_direct;
  double max_displacement_error = 0.0;  // relative to max |jump|
  double max_stress_error = 0.0;        // relative to max |stress jump|
};

inline JumpDiagnostics jump_diagnostics(const CellProblemSolver<2>& cell, const StaticCorrectorSet<2>& corr,
                                        const MacroResult& res, const LayerData& layer = {}) {
  if (res.cell_u.empty() || res.cell_u.size() != res.cell_a.size()) throw InputError("jump_diagnostics: cell fields missing");
  for (const auto& e : corr.eta)
    if (e.size() == 0) throw InputError("jump_diagnostics: jump correctors missing");
  const SparseMatrix& k = cell.stiffness();
  const SparseMatrix m = assemble_mass<2>(cell.mesh(), cell.material().density, 0.0);
  JumpDiagnostics d;
  double scale_u = 0.0, err_u = 0.0, scale_s = 0.0, err_s = 0.0;
  for (size_t n = 0; n < res.cell_u.size(); ++n) {
    const Vector ku = k * res.cell_u[n];
    Point<2> jf(corr.eta[0].dot(ku), corr.eta[1].dot(ku));
    Point<2> jd = res.trace[0][n] - res.trace[1][n];
    Vector acc = -res.cell_a[n];
    if (layer.force) {
      Vector f(acc.size());
      for (int q = 0; q < cell.mesh().num_nodes(); ++q) f.segment<2>(2 * q) = layer.force(res.time[n], cell.mesh().nodes[q]);
      acc += f;
    }
    const Vector ma = m * acc;
    Point<2> sf = Point<2>::Zero();
    for (int q = 0; q < cell.mesh().num_nodes(); ++q) sf += ma.segment<2>(2 * q);
    const Point<2> sd = res.traction[0][n] + res.traction[1][n];
    d.displacement_formula.push_back(jf);
    d.displacement_direct.push_back(jd);
    d.stress_formula.push_back(sf);
    d.stress_direct.push_back(sd);
    scale_u = std::max(scale_u, jd.cwiseAbs().maxCoeff());
    err_u = std::max(err_u, (jf - jd).cwiseAbs().maxCoeff());
    scale_s = std::max(scale_s, sd.cwiseAbs().maxCoeff());
    err_s = std::max(err_s, (sf - sd).cwiseAbs().maxCoeff());
  }
  d.max_displacement_error = scale_u > 0 ? err_u / scale_u : err_u;
  d.max_stress_error = scale_s > 0 ? err_s / scale_s : err_s;
  return d;
}

// Dispatch on gamma.
inline MacroResult solve_macro(const MacroConfig& cfg) {
  switch (cfg.gamma) {
    case 1: return solve_macro_gamma1(cfg);
    case -1: return solve_macro_gamma_minus1(cfg);
    case -3: return solve_macro_gamma_minus3(cfg);
  }
  throw InputError("macro: gamma must be 1, -1 or -3");
}

// Relative L2 (in time) difference of two vector series.
inline double relative_l2(const std::vector<Point<2>>& a, const std::vector<Point<2>>& b) {
  if (a.size() != b.size()) throw InputError("relative_l2: length mismatch");
  double e = 0.0, r = 0.0;
  for (size_t n = 0; n < a.size(); ++n) {
    e += (a[n] - b[n]).squaredNorm();
    r += b[n].squaredNorm();
  }
  return r > 0.0 ? std::sqrt(e / r) : std::sqrt(e);
}

}  // namespace thinlayer
