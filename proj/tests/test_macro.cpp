#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "thinlayer/macro.hpp"

using namespace thinlayer;

namespace {

GridMesh<2> cell2(int res, double r) {
  CellMeshSpec<2> s;
  s.resolution = res;
  if (r > 0) s.hole = EllipsoidHole<2>{Point<2>(0.0, 0.5), Point<2>(r, r)};
  return build_cell_mesh(s);
}

CellMaterial<2> iso2(double lam = 1.3, double mu = 0.7, double rho = 1.1) {
  return homogeneous_material(isotropic_tensor<2>(lam, mu), rho);
}

MemoryKernelTable<2> kernels_for(const GridMesh<2>& cell, const CellMaterial<2>& mat, TimeGrid g) {
  DynamicOptions opt;
  opt.store_fields = false;
  DynamicCellSolver<2> s(cell, mat, g, opt);
  return extract_kernels(solve_dynamic_correctors(s));
}

MemoryKernelTable<2> zero_kernels(TimeGrid g) {
  MemoryKernelTable<2> t;
  t.grid = g;
  for (auto& row : t.G)
    for (auto& v : row) v.assign(g.steps + 1, MemoryKernelTable<2>::Block::Zero());
  t.F = t.G;
  return t;
}

// Smooth compressive pulse of duration tau applied on x1 = -L.
TimeFn pulse(double amp = 1.0, double tau = 1.0, int comp = 0) {
  return [=](double t) {
    Point<2> g = Point<2>::Zero();
    if (t < tau) g[comp] = amp * std::pow(std::sin(std::numbers::pi * t / tau), 2);
    return g;
  };
}

MacroConfig base_config(int gamma, MacroMode mode, double length, int n, TimeGrid grid) {
  MacroConfig c;
  c.gamma = gamma;
  c.mode = mode;
  c.length = length;
  c.elements_normal = n;
  c.elements_lateral = mode == MacroMode::normal_1d ? 1 : 8;
  c.grid = grid;
  c.bulk[0] = {isotropic_tensor<2>(1.0, 1.0), 1.0};
  c.bulk[1] = {isotropic_tensor<2>(1.0, 1.0), 1.0};
  return c;
}

EffectiveCoefficients<2> coefficients(double A, double rho, double a = 1.0, double b = 0.0, double c = 1.0) {
  EffectiveCoefficients<2> e;
  Eigen::Matrix<double, 1, 1> m;
  m << A;
  e.A_star = ElasticTensor4<1>(m);
  m << a;
  e.a_star = ElasticTensor4<1>(m);
  m << c;
  e.c_star = ElasticTensor4<1>(m);
  e.b_star(0, 0) = b;
  e.rho_bar = rho;
  e.cell_volume = 1.0;
  return e;
}

std::vector<Point<2>> probe_series(const MacroResult& r, int p) {
  std::vector<Point<2>> out;
  for (const auto& s : r.probes) out.push_back(s[p]);
  return out;
}

double max_abs(const MacroResult& r) {
  double m = 0.0;
  for (const auto& s : r.probes)
    for (const auto& p : s) m = std::max(m, p.cwiseAbs().maxCoeff());
  for (int s = 0; s < 2; ++s)
    for (size_t n = 0; n < r.trace[s].size(); ++n)
      m = std::max({m, r.trace[s][n].cwiseAbs().maxCoeff(), r.traction[s][n].cwiseAbs().maxCoeff()});
  return m;
}

// Standalone free-end wave solve on one periodic strip [-L, 0] x [0, 1]
// with traction g on x1 = -L; returns the displacement at the node nearest x.
std::vector<Point<2>> free_strip(const BulkMaterial& mat, double length, int n, TimeGrid grid, const TimeFn& g, double x) {
  auto mesh = build_grid_mesh<2>({uniform_ticks(-length, 0.0, n), uniform_ticks(0.0, 1.0, 1)},
                                 [](const Point<2>&) { return 0; });
  DofMap map(mesh.num_nodes(), 2);
  map.add_periodic(periodic_pairing(mesh, {1}));
  map.finalize();
  const SparseMatrix& p = map.prolongation();
  const SparseMatrix k = assemble_stiffness<2>(mesh, mat.tensor), m = assemble_mass<2>(mesh, mat.density);
  NewmarkOperator op(SparseMatrix(p.transpose() * m * p), SparseMatrix(p.transpose() * k * p), grid.dt());
  auto load = [&](double t) {
    Vector f = Vector::Zero(2 * mesh.num_nodes());
    for (int j = 0; j < 2; ++j) f.segment<2>(2 * mesh.node_at({0, j})) += 0.5 * g(t);
    return Vector(p.transpose() * f);
  };
  int node = mesh.node_at({static_cast<int>(std::lround((x + length) / length * n)), 0});
  Vector z = Vector::Zero(map.num_reduced());
  NewmarkState s = op.initial_state(z, z, load(0.0));
  std::vector<Point<2>> out;
  for (int step = 0;; ++step) {
    out.push_back((p * s.u).segment<2>(2 * node));
    if (step == grid.steps) break;
    op.advance(s, load(grid.time(step + 1)));
  }
  return out;
}

}  // namespace

TEST(Macro, ZeroDataGivesZeroFields) {
  const TimeGrid g{1.0, 40};
  auto cell = cell2(4, 0.25);
  auto mat = iso2();
  auto ker = kernels_for(cell, mat, g);
  auto eff = coefficients(0.7, 0.9);
  for (int gamma : {1, -1, -3})
    for (auto mode : {MacroMode::normal_1d, MacroMode::plane_2d}) {
      auto c = base_config(gamma, mode, 2.0, 10, g);
      c.kernels = &ker;
      c.coefficients = &eff;
      c.probes = {Point<2>(-1.0, 0.5), Point<2>(1.0, 0.5)};
      const auto r = solve_macro(c);
      EXPECT_EQ(max_abs(r), 0.0) << gamma << " " << to_string(mode);
      EXPECT_EQ(r.time.size(), 41u);
    }
  auto c = base_config(1, MacroMode::normal_1d, 2.0, 10, g);
  const auto r = solve_two_scale_reference(c, cell, mat);
  EXPECT_EQ(max_abs(r), 0.0);
  ASSERT_EQ(r.cell_u.size(), 41u);
  EXPECT_EQ(r.cell_u.back().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Macro, VanishingKernelsDecoupleTheBulks) {
  const TimeGrid g{4.0, 400};
  auto ker = zero_kernels(g);
  auto c = base_config(1, MacroMode::normal_1d, 4.0, 40, g);
  c.bulk[1] = {isotropic_tensor<2>(1.5, 0.8), 1.3};
  c.kernels = &ker;
  c.end_traction = pulse();
  c.probes = {Point<2>(-1.0, 0.5), Point<2>(0.0, 0.0), Point<2>(1.0, 0.5)};
  const auto r = solve_macro(c);
  const auto ref_mid = free_strip(c.bulk[1], 4.0, 40, g, pulse(), -1.0);
  const auto ref_end = free_strip(c.bulk[1], 4.0, 40, g, pulse(), 0.0);
  double err = 0.0, scale = 0.0;
  for (size_t n = 0; n < r.time.size(); ++n) {
    err = std::max({err, (r.probes[n][0] - ref_mid[n]).norm(), (r.trace[1][n] - ref_end[n]).norm()});
    scale = std::max(scale, ref_end[n].norm());
    EXPECT_EQ(r.probes[n][2].norm(), 0.0);
    EXPECT_EQ(r.traction[0][n].norm(), 0.0);
    EXPECT_LT(r.traction[1][n].norm(), 1e-10);
  }
  EXPECT_GT(scale, 0.1);
  EXPECT_LT(err, 1e-12 * std::max(1.0, scale));
}

TEST(Macro, EnergyBalanceAllModels) {
  const TimeGrid g{3.0, 300};
  auto cell = cell2(6, 0.25);
  auto mat = iso2();
  auto ker = kernels_for(cell, mat, g);
  auto eff = coefficients(0.7, 0.9, 1.2, 0.3, 0.8);
  for (int gamma : {1, -1, -3})
    for (auto mode : {MacroMode::normal_1d, MacroMode::plane_2d}) {
      auto c = base_config(gamma, mode, 2.0, 20, g);
      c.kernels = &ker;
      c.coefficients = &eff;
      c.end_traction = pulse(1.0, 0.8, mode == MacroMode::plane_2d ? 1 : 0);
      c.u1 = [](const Point<2>& x) { return Point<2>(0.1 * std::sin(x[0]), 0.05 * std::sin(std::numbers::pi * x[1])); };
      if (gamma != 1) c.layer_force = [](double t, const Point<2>&) { return Point<2>(std::cos(3 * t), std::sin(2 * t)); };
      c.body_force = [](double t, const Point<2>& x) { return Point<2>(0.2 * t * x[1], 0.1 * std::sin(x[0])); };
      const auto r = solve_macro(c);
      EXPECT_LT(r.energy_balance_error, 1e-6) << gamma << " " << to_string(mode);
      EXPECT_GT(*std::max_element(r.energy.begin(), r.energy.end()), 1e-3);
    }
  auto c = base_config(1, MacroMode::normal_1d, 2.0, 20, g);
  c.end_traction = pulse();
  LayerData layer;
  layer.force = [](double t, const Point<2>& y) { return Point<2>(std::sin(2 * t) * y[0], 0.3); };
  const auto r = solve_two_scale_reference(c, cell, mat, layer);
  EXPECT_LT(r.energy_balance_error, 1e-6);
}

TEST(Macro, Linearity) {
  const TimeGrid g{2.0, 200};
  auto cell = cell2(4, 0.25);
  auto mat = iso2();
  auto ker = kernels_for(cell, mat, g);
  auto eff = coefficients(0.7, 0.9, 1.2, 0.3, 0.8);
  for (int gamma : {1, -1, -3}) {
    auto c = base_config(gamma, MacroMode::plane_2d, 2.0, 16, g);
    c.kernels = &ker;
    c.coefficients = &eff;
    c.probes = {Point<2>(-0.5, 0.4), Point<2>(0.5, 0.6)};
    auto c1 = c, c2 = c, c12 = c;
    c1.end_traction = pulse(1.0, 0.5, 0);
    c2.u1 = [](const Point<2>& x) { return Point<2>(0.0, 0.2 * std::sin(std::numbers::pi * x[1]) * std::cos(x[0])); };
    c12.end_traction = [](double t) { return Point<2>(2.0 * pulse(1.0, 0.5, 0)(t)); };
    c12.u1 = [&](const Point<2>& x) { return Point<2>(-3.0 * c2.u1(x)); };
    const auto r1 = solve_macro(c1), r2 = solve_macro(c2), r12 = solve_macro(c12);
    double err = 0.0, scale = 0.0;
    for (size_t n = 0; n < r1.time.size(); ++n)
      for (int p = 0; p < 2; ++p) {
        const Point<2> lin = 2.0 * r1.probes[n][p] - 3.0 * r2.probes[n][p];
        err = std::max(err, (r12.probes[n][p] - lin).norm());
        scale = std::max(scale, lin.norm());
      }
    EXPECT_GT(scale, 1e-3);
    EXPECT_LT(err, 1e-10 * scale) << gamma;
  }
}

TEST(Macro, KernelSolverMatchesTwoScaleReference) {
  const TimeGrid g{4.0, 4000};
  auto cell = cell2(6, 0.25);
  auto mat = iso2();
  auto ker = kernels_for(cell, mat, g);
  auto c = base_config(1, MacroMode::normal_1d, 4.0, 80, g);
  c.bulk[0] = {isotropic_tensor<2>(2.0, 1.0), 1.5};
  c.kernels = &ker;
  c.end_traction = pulse(1.0, 1.0, 0);
  c.probes = {Point<2>(-1.0, 0.0), Point<2>(1.0, 0.0)};
  const auto rk = solve_macro(c);
  const auto rr = solve_two_scale_reference(c, cell, mat, {}, false);
  for (int p = 0; p < 2; ++p) EXPECT_LT(relative_l2(probe_series(rk, p), probe_series(rr, p)), 1e-3) << p;
  for (int s = 0; s < 2; ++s) {
    EXPECT_LT(relative_l2(rk.trace[s], rr.trace[s]), 1e-3);
    EXPECT_LT(relative_l2(rk.traction[s], rr.traction[s]), 1e-3) << s;
  }
  double moved = 0.0;
  for (const auto& u : probe_series(rr, 1)) moved = std::max(moved, u.norm());
  EXPECT_GT(moved, 0.05);

  // Tangential incidence: weak transmission, same second-order agreement
  // with a larger constant.
  c.end_traction = pulse(1.0, 1.0, 1);
  const auto tk = solve_macro(c), tr = solve_two_scale_reference(c, cell, mat, {}, false);
  EXPECT_LT(relative_l2(probe_series(tk, 1), probe_series(tr, 1)), 5e-3);
  EXPECT_LT(relative_l2(tk.traction[1], tr.traction[1]), 1e-3);
}

TEST(Macro, KernelSubsamplingOnCoarserSolverGrid) {
  auto cell = cell2(4, 0.25);
  auto mat = iso2();
  const TimeGrid fine{3.0, 1200}, coarse{3.0, 600};
  auto kf = kernels_for(cell, mat, fine), kc = kernels_for(cell, mat, coarse);
  auto c = base_config(1, MacroMode::normal_1d, 3.0, 40, coarse);
  c.end_traction = pulse();
  c.probes = {Point<2>(1.0, 0.0)};
  c.kernels = &kf;
  const auto a = solve_macro(c);
  c.kernels = &kc;
  const auto b = solve_macro(c);
  EXPECT_LT(relative_l2(probe_series(a, 0), probe_series(b, 0)), 2e-2);
  EXPECT_GT(relative_l2(probe_series(a, 0), probe_series(b, 0)), 0.0);
  c.grid = TimeGrid{3.0, 500};
  EXPECT_THROW(solve_macro(c), InputError);
  c.grid = TimeGrid{6.0, 1200};
  EXPECT_THROW(solve_macro(c), InputError);
}

TEST(Macro, SoftLayerApproachesDecoupledCase) {
  const TimeGrid g{5.0, 1000};
  auto cell = cell2(4, 0.25);
  auto c = base_config(1, MacroMode::normal_1d, 4.0, 40, g);
  c.end_traction = pulse();
  c.probes = {Point<2>(1.0, 0.0)};
  std::vector<double> amp;
  for (double alpha : {1.0, 0.1, 0.01, 0.001}) {
    auto mat = homogeneous_material(isotropic_tensor<2>(alpha * 1.3, alpha * 0.7), 1.1);
    auto ker = kernels_for(cell, mat, g);
    c.kernels = &ker;
    const auto r = solve_macro(c);
    double m = 0.0;
    for (const auto& u : probe_series(r, 0)) m = std::max(m, u.norm());
    amp.push_back(m);
  }
  auto zk = zero_kernels(g);
  c.kernels = &zk;
  double decoupled = 0.0;
  for (const auto& u : probe_series(solve_macro(c), 0)) decoupled = std::max(decoupled, u.norm());
  EXPECT_EQ(decoupled, 0.0);
  for (size_t i = 1; i < amp.size(); ++i) EXPECT_LT(amp[i], amp[i - 1]) << i;
  EXPECT_LT(amp.back(), 0.1 * amp.front());
}

TEST(Macro, MassInterfaceTransmissionMatchesFrequencyDomain) {
  const TimeGrid g{14.0, 2800};
  auto c = base_config(-1, MacroMode::normal_1d, 10.0, 400, g);
  c.bulk[0] = {isotropic_tensor<2>(2.0, 1.0), 1.5};
  c.end_traction = pulse(1.0, 1.0, 0);
  c.probes = {Point<2>(2.0, 0.0)};
  const double rho_bar = 0.8;
  auto loaded = coefficients(0.0, rho_bar), welded = coefficients(0.0, 0.0);
  c.coefficients = &loaded;
  const auto rm = probe_series(solve_macro(c), 0);
  c.coefficients = &welded;
  const auto r0 = probe_series(solve_macro(c), 0);
  const double z_minus = std::sqrt(1.0 * 3.0), z_plus = std::sqrt(1.5 * 4.0);
  for (double omega : {1.0, 2.0, 3.0, 4.0, 5.0}) {
    std::complex<double> xm = 0.0, x0 = 0.0;
    // Increments decay within the window; the displacement itself drifts.
    for (size_t n = 0; n + 1 < rm.size(); ++n) {
      const auto e = std::exp(std::complex<double>(0.0, omega * (g.time(static_cast<int>(n)) + 0.5 * g.dt())));
      xm += (rm[n + 1][0] - rm[n][0]) * e;
      x0 += (r0[n + 1][0] - r0[n][0]) * e;
    }
    const auto expect = mass_interface_transmission(z_minus, z_plus, rho_bar, omega) /
                        mass_interface_transmission(z_minus, z_plus, 0.0, omega);
    EXPECT_LT(std::abs(xm / x0 - expect), 1e-2 * std::abs(expect)) << omega;
  }
}

TEST(Macro, WeldedLimitDecaysMonotonically) {
  const TimeGrid g{3.0, 300};
  auto c = base_config(-1, MacroMode::plane_2d, 3.0, 24, g);
  c.end_traction = pulse(1.0, 0.8, 0);
  c.layer_force = [](double t, const Point<2>&) { return Point<2>(std::sin(4 * t), std::cos(3 * t)); };
  c.probes = {Point<2>(-1.0, 0.4), Point<2>(1.0, 0.4)};
  auto welded = coefficients(0.0, 0.0);
  c.coefficients = &welded;
  const auto rw = solve_macro(c);
  std::vector<double> err;
  for (double s : {1.0, 0.1, 0.01, 0.001}) {
    auto e = coefficients(2.0 * s, 0.9 * s);
    c.coefficients = &e;
    const auto r = solve_macro(c);
    err.push_back(relative_l2(probe_series(r, 1), probe_series(rw, 1)) + relative_l2(r.trace[0], rw.trace[0]));
    for (size_t n = 0; n < r.time.size(); ++n) EXPECT_LT((r.trace[0][n] - r.trace[1][n]).norm(), 1e-12);
  }
  for (size_t i = 1; i < err.size(); ++i) EXPECT_LT(err[i], err[i - 1]);
  EXPECT_LT(err.back(), 1e-2 * err.front());
}

TEST(Macro, PlateStripStaticMidpoint) {
  for (double b : {0.0, 0.4}) {
    const double a = 1.5, c = 0.8, len = 1.3, p = 2.0;
    const double d = c - b * b / a;
    const double w = plate_strip_static_midpoint(a, b, c, len, p, 16);
    const double expect = p * std::pow(len, 4) / (384.0 * d);
    EXPECT_NEAR(w, expect, 1e-2 * expect) << b;
  }
  EXPECT_THROW(plate_strip_static_midpoint(1.0, 0.0, 1.0, 1.0, 1.0, 7), InputError);
  EXPECT_THROW(PlateStrip(1.0, 2.0, 1.0, 1.0, 1.0, 4), InputError);
}

TEST(Macro, PlateInterfaceWithoutCouplingHasNoInplaneField) {
  const TimeGrid g{2.0, 200};
  auto c = base_config(-3, MacroMode::plane_2d, 2.0, 16, g);
  auto eff = coefficients(1.0, 0.9, 1.2, 0.0, 0.8);
  c.coefficients = &eff;
  c.end_traction = pulse(1.0, 0.5, 0);
  c.layer_force = [](double t, const Point<2>& x) { return Point<2>(std::sin(3 * t) * x[1], 1.0); };
  auto r = solve_macro(c);
  double wmax = 0.0;
  for (size_t n = 0; n < r.time.size(); ++n) {
    for (double u : r.inplane_displacement[n]) EXPECT_EQ(u, 0.0);
    for (double w : r.normal_displacement[n]) wmax = std::max(wmax, std::abs(w));
    EXPECT_EQ(r.normal_displacement[n].front(), 0.0);
    EXPECT_EQ(r.normal_displacement[n].back(), 0.0);
  }
  EXPECT_GT(wmax, 1e-3);
  EXPECT_EQ(r.max_tangential_trace, 0.0);

  auto coupled = coefficients(1.0, 0.9, 1.2, 0.5, 0.8);
  c.coefficients = &coupled;
  r = solve_macro(c);
  double umax = 0.0;
  for (const auto& s : r.inplane_displacement)
    for (double u : s) umax = std::max(umax, std::abs(u));
  EXPECT_GT(umax, 1e-6);
  EXPECT_LT(r.energy_balance_error, 1e-6);
}

TEST(Macro, JumpDiagnosticsAgainstMonolithicRun) {
  const TimeGrid g{3.0, 600};
  auto cell = cell2(6, 0.25);
  auto mat = iso2();
  auto c = base_config(1, MacroMode::normal_1d, 3.0, 40, g);
  c.end_traction = pulse(1.0, 0.7, 0);
  LayerData layer;
  layer.force = [](double t, const Point<2>& y) { return Point<2>(std::sin(3 * t), 0.5 * y[0]); };
  const auto r = solve_two_scale_reference(c, cell, mat, layer);
  CellProblemSolver<2> stat(cell, mat);
  const auto corr = solve_static_correctors(stat);
  const auto d = jump_diagnostics(stat, corr, r, layer);
  double jump = 0.0;
  for (const auto& j : d.displacement_direct) jump = std::max(jump, j.norm());
  EXPECT_GT(jump, 1e-3);
  EXPECT_LT(d.max_displacement_error, 1e-4);
  EXPECT_LT(d.max_stress_error, 1e-8);

  // Rigid translation of the layer: no displacement jump, no strain.
  MacroResult rigid = r;
  rigid.cell_u.assign(r.cell_u.size(), Vector::Zero(r.cell_u[0].size()));
  for (auto& u : rigid.cell_u)
    for (int n = 0; n < cell.num_nodes(); ++n) u.segment<2>(2 * n) = Point<2>(0.3, -0.2);
  rigid.cell_a.assign(r.cell_u.size(), Vector::Zero(r.cell_u[0].size()));
  const auto dr = jump_diagnostics(stat, corr, rigid);
  for (size_t n = 0; n < dr.displacement_formula.size(); ++n) {
    EXPECT_LT(dr.displacement_formula[n].norm(), 1e-12);
    EXPECT_LT(dr.stress_formula[n].norm(), 1e-14);
  }
  StaticCorrectorSet<2> empty;
  EXPECT_THROW(jump_diagnostics(stat, empty, r), InputError);
}

TEST(Macro, RejectsInconsistentInputs) {
  const TimeGrid g{1.0, 20};
  auto cell = cell2(4, 0.0);
  auto mat = iso2();
  auto ker = kernels_for(cell, mat, g);
  auto eff = coefficients(1.0, 1.0);
  auto c = base_config(1, MacroMode::normal_1d, 1.0, 8, g);
  EXPECT_THROW(solve_macro(c), InputError);  // no kernels
  c.kernels = &ker;
  c.layer_force = [](double, const Point<2>&) { return Point<2>(1.0, 0.0); };
  EXPECT_THROW(solve_macro(c), InputError);
  c.layer_force = nullptr;
  c.gamma = -1;
  EXPECT_THROW(solve_macro(c), InputError);  // no coefficients
  c.gamma = 2;
  c.coefficients = &eff;
  EXPECT_THROW(solve_macro(c), InputError);
  c.gamma = 1;
  c.mode = MacroMode::plane_2d;
  EXPECT_THROW(solve_two_scale_reference(c, cell, mat), InputError);
  c.elements_lateral = 1;
  EXPECT_THROW(solve_macro(c), InputError);
  c.mode = MacroMode::normal_1d;
  c.length = -1.0;
  EXPECT_THROW(solve_macro(c), InputError);
  c.length = 1.0;
  c.grid.steps = 0;
  EXPECT_THROW(solve_macro(c), InputError);
  auto bad = coefficients(1.0, 1.0, 1.0, 2.0, 1.0);
  auto c3 = base_config(-3, MacroMode::plane_2d, 1.0, 8, g);
  c3.coefficients = &bad;
  EXPECT_THROW(solve_macro(c3), InputError);
}

TEST(Macro, TransmissionFormula) {
  const auto t = mass_interface_transmission(2.0, 2.0, 0.0, 3.0);
  EXPECT_NEAR(t.real(), 1.0, 1e-15);
  EXPECT_NEAR(t.imag(), 0.0, 1e-15);
  const auto tm = mass_interface_transmission(1.0, 3.0, 2.0, 1.0);
  EXPECT_NEAR(std::abs(tm), 2.0 / std::sqrt(16.0 + 4.0), 1e-14);
}
