#pragma once

// Direct epsilon-resolved solver: Omega = (-L, L) x (0, W) with the layer
// |x1| < eps/2 tiled by W/eps scaled copies of the cell mesh. The layer
// carries eps^gamma A^M and rho^M / eps; bulk elements grow geometrically
// along x1 away from the layer. Plus comparison with the homogenized models.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "macro.hpp"

namespace thinlayer {

struct MicroConfig {
  double epsilon = 0.25;
  int gamma = 1;
  MacroMode mode = MacroMode::normal_1d;  // normal_1d: periodic lateral sides; plane_2d: clamped
  std::array<BulkMaterial, 2> bulk;
  CellMeshSpec<2> cell;
  CellMaterial<2> layer;  // indexed by cell-mesh element
  double length = 2.0;
  double width = 1.0;
  double bulk_h_max = 0.1;  // coarsest bulk element along x1
  double grading = 1.5;     // growth factor of consecutive bulk elements
  TimeGrid grid;

  TimeFn end_traction;
  FieldFn u0, u1;  // bulk data; the layer takes the trace at x1 = 0
  SpaceTimeFn body_force;
  SpaceTimeFn layer_force;  // f^M(t, x), applied with density rho^M / eps
  bool unscaled_layer = false;  // diagnostic: layer without eps^gamma and 1/eps
  int store_stride = 1;
  double scaling_warning = 1e3;  // bound on eps^{-1/2} |f^M|_{L2(layer)} before a warning
};

// Layout of the layer inside the micro grid.
struct MicroLayout {
  int layer_first = 0;  // first layer element column along x1
  int cells = 0;        // cells along omega
  int resolution = 0;   // elements per cell and axis
};

struct MicroSolution {
  double epsilon = 0.0;
  int gamma = 1;
  MacroMode mode = MacroMode::normal_1d;
  GridMesh<2> mesh;  // region 0: Omega+, 1: Omega-, 2: layer
  GridMesh<2> cell;
  MicroLayout layout;
  std::vector<double> time;  // stored steps
  std::vector<Vector> u;     // full nodal displacement per stored step
  std::vector<double> energy, work;
  double energy_balance_error = 0.0;
  double traction_mismatch = 0.0;  // relative reaction mismatch across S_eps+-
  // A priori monitor: sum of |d_t u|_{Linf L2(bulk+-)} + eps^{-1/2} |d_t u|_{Linf L2(layer)}
  // + eps^{gamma/2} |e(u)|_{Linf L2(layer)}.
  double monitor = 0.0;
  std::array<double, 4> monitor_terms{};
  double layer_force_bound = 0.0;
  std::vector<std::string> warnings;
};

// x1 ticks of one bulk side, from the layer face outward.
inline std::vector<double> graded_ticks(double start, double end, double h0, double h_max, double growth) {
  if (!(h0 > 0.0) || !(h_max >= h0) || !(growth >= 1.0) || !(end > start))
    throw InputError("micro: invalid bulk grading");
  std::vector<double> t{start};
  double h = h0;
  while (end - t.back() > 1.5 * h) {
    t.push_back(t.back() + h);
    h = std::min(h * growth, h_max);
  }
  t.push_back(end);
  return t;
}

inline int cells_across(double width, double eps) {
  const double q = width / eps;
  const long n = std::lround(q);
  if (n < 1 || std::abs(q - n) > 1e-9 * q) throw InputError("micro: width / epsilon must be an integer");
  return static_cast<int>(n);
}

inline GridMesh<2> build_micro_mesh(const MicroConfig& c, const GridMesh<2>& cell, MicroLayout* layout = nullptr) {
  const double eps = c.epsilon;
  if (!(eps > 0.0) || !(c.length > eps) || !(c.width > 0.0)) throw InputError("micro: need 0 < eps < L and W > 0");
  const int ncell = cells_across(c.width, eps);
  const int res = cell.cells_along(0);
  if (cell.cells_along(1) != res) throw InputError("micro: cell mesh must have equal resolution along both axes");
  const double h0 = eps / res;
  auto plus = graded_ticks(0.5 * eps, c.length, h0, std::max(h0, c.bulk_h_max), c.grading);
  std::vector<double> x1;
  for (auto it = plus.rbegin(); it != plus.rend(); ++it) x1.push_back(-*it);
  for (int j = 1; j < res; ++j) x1.push_back(eps * cell.ticks[0][j]);
  x1.insert(x1.end(), plus.begin(), plus.end());
  std::vector<double> x2;
  for (int k = 0; k < ncell; ++k)
    for (int j = 0; j < res; ++j) x2.push_back(eps * (k + cell.ticks[1][j]));
  x2.push_back(c.width);
  const int first = static_cast<int>(plus.size()) - 1;
  if (layout) *layout = {first, ncell, res};

  // Layer elements inherit solidity from the cell mesh element they copy.
  auto classify = [&](const Point<2>& x) {
    if (x[0] > 0.5 * eps) return 0;
    if (x[0] < -0.5 * eps) return 1;
    const auto it = std::upper_bound(x1.begin(), x1.end(), x[0]);
    const int i0 = static_cast<int>(it - x1.begin()) - 1 - first;
    const auto jt = std::upper_bound(x2.begin(), x2.end(), x[1]);
    const int i1 = (static_cast<int>(jt - x2.begin()) - 1) % res;
    return cell.solid[i0 + res * i1] ? 2 : -1;
  };
  return build_grid_mesh<2>({x1, x2}, classify);
}

// Cell-mesh element copied by a layer element.
inline int cell_element(const GridMesh<2>& mesh, const MicroLayout& lay, int e) {
  const auto& idx = mesh.element_index[e];
  return (idx[0] - lay.layer_first) + lay.resolution * (idx[1] % lay.resolution);
}

namespace detail {

// Region-restricted Q1 matrices.
inline SparseMatrix region_matrix(const GridMesh<2>& m, const std::vector<int>& regions,
                                  const std::function<Q1<2>::ElemMat(int)>& elem) {
  return assemble_matrix(m, [&](int e) {
    if (std::find(regions.begin(), regions.end(), m.region[e]) == regions.end()) return Q1<2>::ElemMat(Q1<2>::ElemMat::Zero());
    return elem(e);
  });
}

// Bilinear interpolation on the micro grid (x must lie in a solid element).
inline Point<2> interpolate(const GridMesh<2>& m, const Vector& u, const Point<2>& x) {
  std::array<int, 2> idx{};
  std::array<double, 2> s{};
  for (int a = 0; a < 2; ++a) {
    const auto& t = m.ticks[a];
    int i = static_cast<int>(std::upper_bound(t.begin(), t.end(), x[a]) - t.begin()) - 1;
    i = std::clamp(i, 0, static_cast<int>(t.size()) - 2);
    idx[a] = i;
    s[a] = std::clamp((x[a] - t[i]) / (t[i + 1] - t[i]), 0.0, 1.0);
  }
  Point<2> out = Point<2>::Zero();
  for (int k = 0; k < 4; ++k) {
    const int a = k & 1, b = (k >> 1) & 1;
    const double w = (a ? s[0] : 1 - s[0]) * (b ? s[1] : 1 - s[1]);
    if (w == 0.0) continue;
    const int n = m.node_at({idx[0] + a, idx[1] + b});
    if (n < 0) throw InputError("micro: interpolation point outside the solid mesh");
    out += w * u.segment<2>(2 * n);
  }
  return out;
}

}  // namespace detail

inline MicroSolution solve_micro(const MicroConfig& c) {
  c.grid.validate();
  if (c.gamma != 1 && c.gamma != -1 && c.gamma != -3) throw InputError("micro: gamma must be 1, -1 or -3");
  if (c.store_stride < 1) throw InputError("micro: store stride must be >= 1");
  if (!c.layer.tensor || !c.layer.density) throw InputError("micro: layer material missing");
  MicroSolution sol;
  sol.epsilon = c.epsilon;
  sol.gamma = c.gamma;
  sol.mode = c.mode;
  sol.cell = build_cell_mesh(c.cell);
  sol.mesh = build_micro_mesh(c, sol.cell, &sol.layout);
  const GridMesh<2>& m = sol.mesh;
  const double eps = c.epsilon;
  const double sc = c.unscaled_layer ? 1.0 : std::pow(eps, c.gamma);
  const double sr = c.unscaled_layer ? 1.0 : 1.0 / eps;
  const MicroLayout lay = sol.layout;

  auto tensor = [&](int e) -> ElasticTensor4<2> {
    if (m.region[e] == 2) return ElasticTensor4<2>(sc * c.layer.tensor(cell_element(m, lay, e)).voigt());
    return c.bulk[m.region[e]].tensor;
  };
  auto density = [&](int e) {
    return m.region[e] == 2 ? sr * c.layer.density(cell_element(m, lay, e)) : c.bulk[m.region[e]].density;
  };
  const SparseMatrix k = assemble_stiffness<2>(m, tensor);
  const SparseMatrix mass = assemble_mass<2>(m, density);
  auto kelem = [&](int e) { return Q1<2>::stiffness(m.element_size(e), tensor(e).voigt()); };
  auto melem = [&](int e) { return Q1<2>::mass(m.element_size(e), density(e)); };
  auto unit_mass = [&](int e) { return Q1<2>::mass(m.element_size(e), 1.0); };
  ElasticTensor4<2>::VoigtMatrix gram = ElasticTensor4<2>::VoigtMatrix::Identity();
  gram(2, 2) = 0.5;  // e:e with engineering shear
  const SparseMatrix k_bulk = detail::region_matrix(m, {0, 1}, kelem), m_bulk = detail::region_matrix(m, {0, 1}, melem);
  const SparseMatrix m_layer = detail::region_matrix(m, {2}, melem);
  const SparseMatrix u_plus = detail::region_matrix(m, {0}, unit_mass), u_minus = detail::region_matrix(m, {1}, unit_mass);
  const SparseMatrix u_layer = detail::region_matrix(m, {2}, unit_mass);
  const SparseMatrix e_layer =
      detail::region_matrix(m, {2}, [&](int e) { return Q1<2>::stiffness(m.element_size(e), gram); });

  DofMap map(m.num_nodes(), 2);
  const int n2 = m.cells_along(1);
  if (c.mode == MacroMode::normal_1d) {
    map.add_periodic(periodic_pairing(m, {1}));
  } else {
    for (int n = 0; n < m.num_nodes(); ++n)
      if (m.node_index[n][1] == 0 || m.node_index[n][1] == n2) map.fix_node(n, Vector::Zero(2));
  }
  map.finalize();
  const SparseMatrix& p = map.prolongation();
  const SparseMatrix pt = p.transpose();
  NewmarkOperator op(SparseMatrix(pt * mass * p), SparseMatrix(pt * k * p), c.grid.dt());

  // Loads.
  std::vector<int> end_nodes;
  Vector end_w(n2 + 1);
  for (int j = 0; j <= n2; ++j) {
    end_nodes.push_back(m.node_at({0, j}));
    const double lo = j > 0 ? m.ticks[1][j] - m.ticks[1][j - 1] : 0.0;
    const double hi = j < n2 ? m.ticks[1][j + 1] - m.ticks[1][j] : 0.0;
    end_w[j] = 0.5 * (lo + hi);
  }
  auto nodal = [&](const SpaceTimeFn& f, double t) {
    Vector v(2 * m.num_nodes());
    for (int n = 0; n < m.num_nodes(); ++n) v.segment<2>(2 * n) = f(t, m.nodes[n]);
    return v;
  };
  double fbound = 0.0;
  auto load = [&](int step, Vector* bulk_part, Vector* layer_part) {
    const double t = c.grid.time(step);
    Vector fb = Vector::Zero(2 * m.num_nodes()), fl = fb;
    if (c.end_traction) {
      const Point<2> g = c.end_traction(t);
      for (int j = 0; j <= n2; ++j) fb.segment<2>(2 * end_nodes[j]) += end_w[j] * g;
    }
    if (c.body_force) fb += m_bulk * nodal(c.body_force, t);
    if (c.layer_force) {
      const Vector f = nodal(c.layer_force, t);
      fl = m_layer * f;
      fbound = std::max(fbound, std::sqrt(std::max(0.0, f.dot(u_layer * f)) / eps));
    }
    if (bulk_part) *bulk_part = fb;
    if (layer_part) *layer_part = fl;
    return Vector(fb + fl);
  };

  // Initial data: bulk fields, layer takes the value at x1 = 0.
  Vector u0 = Vector::Zero(2 * m.num_nodes()), v0 = u0;
  for (int n = 0; n < m.num_nodes(); ++n) {
    Point<2> x = m.nodes[n];
    if (std::abs(x[0]) < 0.5 * eps - 1e-14) x[0] = 0.0;
    if (c.u0) u0.segment<2>(2 * n) = c.u0(x);
    if (c.u1) v0.segment<2>(2 * n) = c.u1(x);
  }

  // Interface classes for the reaction check.
  std::vector<int> iface_dofs;
  for (int n = 0; n < m.num_nodes(); ++n) {
    const double x = m.nodes[n][0];
    if (std::abs(std::abs(x) - 0.5 * eps) < 1e-12 * std::max(1.0, eps))
      for (int a = 0; a < 2; ++a)
        if (!map.is_fixed(2 * n + a)) iface_dofs.push_back(map.reduced_index(2 * n + a));
  }
  std::sort(iface_dofs.begin(), iface_dofs.end());
  iface_dofs.erase(std::unique(iface_dofs.begin(), iface_dofs.end()), iface_dofs.end());

  Vector fb, fl;
  Vector f = load(0, &fb, &fl);
  Vector fr = pt * f;
  NewmarkState st = op.initial_state(map.restrict(u0), map.restrict(v0), fr);
  const int steps = c.grid.steps;
  double work = 0.0, mism = 0.0, mscale = 0.0;
  std::array<double, 4> mon{};
  Vector r_prev = st.u, f_prev = fr;
  for (int step = 0;; ++step) {
    const Vector u = p * st.u, v = p * st.v, a = p * st.a;
    const double e = op.energy(st);
    if (step > 0) work += 0.5 * (f_prev + fr).dot(st.u - r_prev);
    f_prev = fr;
    r_prev = st.u;
    if (step % c.store_stride == 0 || step == steps) {
      sol.time.push_back(c.grid.time(step));
      sol.u.push_back(u);
    }
    sol.energy.push_back(e);
    sol.work.push_back(work);
    mon[0] = std::max(mon[0], v.dot(u_plus * v));
    mon[1] = std::max(mon[1], v.dot(u_minus * v));
    mon[2] = std::max(mon[2], v.dot(u_layer * v));
    mon[3] = std::max(mon[3], u.dot(e_layer * u));
    // Bulk-side and layer-side reactions on S_eps+- cancel class by class.
    const Vector rb = pt * (m_bulk * a + k_bulk * u - fb);
    const Vector rl = pt * ((mass - m_bulk) * a + (k - k_bulk) * u - fl);
    for (int d : iface_dofs) {
      mism = std::max(mism, std::abs(rb[d] + rl[d]));
      mscale = std::max(mscale, std::abs(rb[d]));
    }
    if (step == steps) break;
    f = load(step + 1, &fb, &fl);
    fr = pt * f;
    op.advance(st, fr);
  }
  double scale = 0.0, err = 0.0;
  for (size_t n = 0; n < sol.energy.size(); ++n) {
    scale = std::max({scale, std::abs(sol.energy[n]), std::abs(sol.work[n])});
    err = std::max(err, std::abs(sol.energy[n] - sol.energy[0] - sol.work[n]));
  }
  sol.energy_balance_error = scale > 0.0 ? err / scale : err;
  sol.traction_mismatch = mscale > 0.0 ? mism / mscale : mism;
  sol.monitor_terms = {std::sqrt(mon[0]), std::sqrt(mon[1]), std::sqrt(mon[2] / eps),
                       std::pow(eps, 0.5 * c.gamma) * std::sqrt(mon[3])};
  sol.monitor = sol.monitor_terms[0] + sol.monitor_terms[1] + sol.monitor_terms[2] + sol.monitor_terms[3];
  sol.layer_force_bound = fbound;
  if (fbound > c.scaling_warning)
    sol.warnings.push_back("layer force exceeds the scaling bound: eps^-1/2 |f^M| = " + std::to_string(fbound));
  return sol;
}

// Unfolding of a nodal layer field: per cell k the values at the cell-mesh
// nodes, T_eps(phi)(x', y) = phi(eps [x'/eps] + eps y).
inline std::vector<Vector> unfold_layer(const MicroSolution& s, const Vector& phi) {
  const auto& cell = s.cell;
  const int res = s.layout.resolution;
  std::vector<Vector> out(s.layout.cells, Vector::Zero(2 * cell.num_nodes()));
  for (int k = 0; k < s.layout.cells; ++k)
    for (int n = 0; n < cell.num_nodes(); ++n) {
      const auto& ci = cell.node_index[n];
      const int mn = s.mesh.node_at({s.layout.layer_first + ci[0], k * res + ci[1]});
      if (mn < 0) throw NumericalError("unfold_layer: cell node without micro counterpart");
      out[k].segment<2>(2 * n) = phi.segment<2>(2 * mn);
    }
  return out;
}

// | |phi|^2_{L2(layer)} - eps |T_eps phi|^2_{L2(omega x Y0)} | / |phi|^2.
inline double unfolding_isometry_defect(const MicroSolution& s, const Vector& phi) {
  const auto& m = s.mesh;
  const SparseMatrix ml =
      detail::region_matrix(m, {2}, [&](int e) { return Q1<2>::mass(m.element_size(e), 1.0); });
  const SparseMatrix mc = assemble_mass<2>(s.cell, 1.0);
  const double lhs = phi.dot(ml * phi);
  double rhs = 0.0;
  for (const auto& t : unfold_layer(s, phi)) rhs += s.epsilon * t.dot(mc * t);  // cell k spans eps of omega
  rhs *= s.epsilon;
  return lhs > 0.0 ? std::abs(lhs - rhs) / lhs : std::abs(lhs - rhs);
}

struct MicroMacroReport {
  double epsilon = 0.0;
  int gamma = 0;
  double bulk_error = 0.0;   // relative L2(S x Omega+-) on |x1| >= exclusion
  double trace_error = 0.0;  // relative L2(S x omega) of the traces on S_eps+- vs omega
  double layer_error = 0.0;  // relative, unfolded micro layer vs u^M
  double monitor = 0.0;
};

struct CompareOptions {
  double exclusion = 0.125;  // bulk comparison restricted to |x1| >= max(exclusion, eps/2)
};

inline MicroMacroReport compare_micro_macro(const MicroSolution& micro, const MacroResult& macro, CompareOptions opt = {}) {
  if (macro.bulk_u[0].empty()) throw InputError("compare_micro_macro: macro run without stored fields");
  if (micro.time.size() != macro.time.size()) throw InputError("compare_micro_macro: time grids differ");
  for (size_t n = 0; n < micro.time.size(); ++n)
    if (std::abs(micro.time[n] - macro.time[n]) > 1e-12 * std::max(1.0, macro.time.back()))
      throw InputError("compare_micro_macro: time grids differ");
  const size_t nt = micro.time.size();
  const double eps = micro.epsilon;
  const double cut = std::max(opt.exclusion, 0.5 * eps);
  auto tw = [&](size_t n) { return (nt == 1 || n == 0 || n + 1 == nt) ? 0.5 : 1.0; };

  MicroMacroReport r;
  r.epsilon = eps;
  r.gamma = micro.gamma;
  r.monitor = micro.monitor;

  double e2 = 0.0, r2 = 0.0;
  for (int s = 0; s < 2; ++s)
    for (size_t n = 0; n < nt; ++n)
      for (size_t q = 0; q < macro.bulk_nodes[s].size(); ++q) {
        const Point<2>& x = macro.bulk_nodes[s][q];
        if (std::abs(x[0]) < cut - 1e-12) continue;
        const Point<2> um = macro.bulk_u[s][n].segment<2>(2 * q);
        const Point<2> ue = detail::interpolate(micro.mesh, micro.u[n], x);
        e2 += tw(n) * macro.bulk_weights[s][q] * (ue - um).squaredNorm();
        r2 += tw(n) * macro.bulk_weights[s][q] * um.squaredNorm();
      }
  r.bulk_error = r2 > 0.0 ? std::sqrt(e2 / r2) : std::sqrt(e2);

  // Traces: micro on x1 = +-eps/2 against macro interface values.
  const auto& x2 = macro.interface_x2;
  std::vector<double> w(x2.size(), 0.0);
  for (size_t j = 0; j + 1 < x2.size(); ++j) {
    w[j] += 0.5 * (x2[j + 1] - x2[j]);
    w[j + 1] += 0.5 * (x2[j + 1] - x2[j]);
  }
  e2 = r2 = 0.0;
  for (int s = 0; s < 2; ++s)
    for (size_t n = 0; n < nt; ++n)
      for (size_t j = 0; j < x2.size(); ++j) {
        const Point<2> um = macro.interface_u[s][n][j];
        const Point<2> ue = detail::interpolate(micro.mesh, micro.u[n], Point<2>(s == 0 ? 0.5 * eps : -0.5 * eps, x2[j]));
        e2 += tw(n) * w[j] * (ue - um).squaredNorm();
        r2 += tw(n) * w[j] * um.squaredNorm();
      }
  r.trace_error = r2 > 0.0 ? std::sqrt(e2 / r2) : std::sqrt(e2);

  // Layer: with cell fields (two-scale reference) compare cell by cell;
  // otherwise compare cell averages with the interface displacement.
  const SparseMatrix mc = assemble_mass<2>(micro.cell, 1.0);
  const Vector lw = lumped(mc);
  const double cell_area = lw.sum() / 2.0;
  e2 = r2 = 0.0;
  for (size_t n = 0; n < nt; ++n) {
    const auto cells = unfold_layer(micro, micro.u[n]);
    for (size_t k = 0; k < cells.size(); ++k) {
      if (!macro.cell_u.empty()) {
        const Vector d = cells[k] - macro.cell_u[n];
        e2 += tw(n) * eps * d.dot(mc * d);
        r2 += tw(n) * eps * macro.cell_u[n].dot(mc * macro.cell_u[n]);
      } else {
        Point<2> avg = Point<2>::Zero();
        for (int q = 0; q < micro.cell.num_nodes(); ++q) avg += lw[2 * q] * cells[k].segment<2>(2 * q);
        avg /= cell_area;
        const double xc = eps * (k + 0.5);
        const auto it = std::upper_bound(x2.begin(), x2.end(), xc);
        const size_t j = std::clamp<size_t>(static_cast<size_t>(it - x2.begin()), 1, x2.size() - 1);
        const double t = (xc - x2[j - 1]) / (x2[j] - x2[j - 1]);
        const Point<2> um = (1 - t) * macro.interface_u[0][n][j - 1] + t * macro.interface_u[0][n][j];
        e2 += tw(n) * eps * cell_area * (avg - um).squaredNorm();
        r2 += tw(n) * eps * cell_area * um.squaredNorm();
      }
    }
  }
  r.layer_error = r2 > 0.0 ? std::sqrt(e2 / r2) : std::sqrt(e2);
  return r;
}

inline void write_error_csv_header(std::ostream& os) {
  os << "epsilon,gamma,bulk_L2_err,trace_L2_err,layer_unfolded_err,apriori_monitor\n";
}

inline void write_error_csv_row(std::ostream& os, const MicroMacroReport& r) {
  os << std::setprecision(12) << r.epsilon << ',' << r.gamma << ',' << r.bulk_error << ',' << r.trace_error << ','
     << r.layer_error << ',' << r.monitor << '\n';
}

}  // namespace thinlayer
