#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <sstream>

#include "thinlayer/cell_dynamic.hpp"

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

// Graded density and an anisotropic tensor, both element dependent.
CellMaterial<2> graded2(const GridMesh<2>& m) {
  return {[&m](int e) {
            const double s = 1.0 + 0.5 * m.element_center(e)[0];
            auto v = isotropic_tensor<2>(1.0, 0.8).voigt();
            v(0, 1) = v(1, 0) = 0.3;
            v(2, 2) = 0.5 * s;
            return ElasticTensor4<2>(v * s);
          },
          [&m](int e) { return 1.0 + 0.3 * m.element_center(e)[1]; }};
}

using Block = MemoryKernelTable<2>::Block;

}  // namespace

TEST(CellDynamic, LiftingTraces) {
  auto mesh = cell2(4, 0.0);
  const auto plus = face_nodes<2>(mesh, on_cell_face(CellFace::s_plus));
  const auto minus = face_nodes<2>(mesh, on_cell_face(CellFace::s_minus));
  for (int i = 0; i < 2; ++i) {
    const Vector pp = boundary_lifting<2>(mesh, i, FaceSide::plus), pm = boundary_lifting<2>(mesh, i, FaceSide::minus);
    for (int n : plus) {
      EXPECT_EQ(pp[2 * n + i], 1.0);
      EXPECT_EQ(pm[2 * n + i], 0.0);
      EXPECT_EQ((pp + pm)[2 * n + i], 1.0);
      EXPECT_EQ(pp[2 * n + 1 - i], 0.0);
    }
    for (int n : minus) {
      EXPECT_EQ(pp[2 * n + i], 0.0);
      EXPECT_EQ(pm[2 * n + i], 1.0);
    }
  }
  EXPECT_THROW(boundary_lifting<2>(mesh, 2, FaceSide::plus), InputError);
  EXPECT_THROW(boundary_lifting<2>(mesh, 0, FaceSide::none), InputError);
}

TEST(CellDynamic, ThetaModalOracleAndEnergy) {
  auto mesh = cell2(8, 0.25);
  const TimeGrid grid{1.0, 2000};
  DynamicCellSolver<2> s(mesh, iso2(), grid);
  for (int i = 0; i < 2; ++i) {
    const auto sol = s.solve_theta(i);

    // Modal superposition on the same reduced space, exact in time.
    const SparseMatrix& p = s.dof_map().prolongation();
    const Eigen::MatrixXd mr = Eigen::MatrixXd(p.transpose() * s.mass() * p);
    const Eigen::MatrixXd kr = Eigen::MatrixXd(p.transpose() * s.stiffness() * p);
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(kr, mr);
    ASSERT_EQ(es.info(), Eigen::Success);
    Vector e = Vector::Zero(s.stiffness().rows());
    for (int n = 0; n < mesh.num_nodes(); ++n) e[2 * n + i] = 1.0;
    const Vector v0 = mr.ldlt().solve(Vector(p.transpose() * (s.mass() * e)));
    const Eigen::MatrixXd& x = es.eigenvectors();
    const Vector amp = x.transpose() * (mr * v0);
    const Vector w = es.eigenvalues().cwiseSqrt();
    double err2 = 0.0, ref2 = 0.0;
    for (int n = 0; n <= grid.steps; ++n) {
      const double t = grid.time(n);
      Vector c(w.size());
      for (int k = 0; k < w.size(); ++k) c[k] = amp[k] * std::sin(w[k] * t) / w[k];
      const Vector ref = p * (x * c);
      const Vector d = sol.u[n] - ref;
      err2 += d.dot(s.mass() * d);
      ref2 += ref.dot(s.mass() * ref);
    }
    EXPECT_LE(std::sqrt(err2 / ref2), 1e-4);

    double drift = 0.0;
    for (double en : sol.energy) drift = std::max(drift, std::abs(en - sol.energy[0]));
    EXPECT_LE(drift / sol.energy[0], 1e-8);
  }
  EXPECT_TRUE(s.warnings().empty());
}

TEST(CellDynamic, EnergyConservedForEtaAndChi) {
  auto mesh = cell2(8, 0.3);
  DynamicCellSolver<2> s(mesh, graded2(mesh), TimeGrid{2.0, 400});
  for (const auto& sol : {s.solve_eta(FaceSide::plus, 0), s.solve_chi(FaceSide::minus, 1)}) {
    double drift = 0.0;
    for (double en : sol.energy) drift = std::max(drift, std::abs(en - sol.energy[0]));
    EXPECT_LE(drift / std::abs(sol.energy[0] == 0 ? sol.energy.back() : sol.energy[0]), 1e-8) << to_string(sol.kind);
  }
}

TEST(CellDynamic, ChiInitialAcceleration) {
  auto mesh = cell2(8, 0.3);
  DynamicCellSolver<2> s(mesh, graded2(mesh), TimeGrid{1.0, 10});
  for (FaceSide side : {FaceSide::plus, FaceSide::minus})
    for (int i = 0; i < 2; ++i) {
      const auto sol = s.solve_chi(side, i);
      const Vector phi = boundary_lifting<2>(mesh, i, side);
      EXPECT_LE((sol.u[0] - phi).cwiseAbs().maxCoeff(), 0.0);
      EXPECT_EQ(sol.v[0].norm(), 0.0);
      // M a(0) = -K phi on the free space.
      const SparseMatrix& p = s.dof_map().prolongation();
      const Vector r = p.transpose() * (s.mass() * sol.a[0] + s.stiffness() * phi);
      EXPECT_LE(r.norm(), 1e-12 * (s.stiffness() * phi).norm());
    }
}

TEST(CellDynamic, LinearityAndSuperposition) {
  auto mesh = cell2(8, 0.3);
  DynamicCellSolver<2> s(mesh, graded2(mesh), TimeGrid{1.0, 200});
  const int n = s.stiffness().rows();
  const Vector zero = Vector::Zero(n);

  const auto eta = s.solve_eta(FaceSide::plus, 1);
  const auto eta2 = s.run(eta, zero, zero, -2.0 * eta.lifting, true);
  double scale = 0.0, err = 0.0;
  for (int k = 0; k <= 200; ++k) {
    scale = std::max(scale, eta.u[k].cwiseAbs().maxCoeff());
    err = std::max(err, (eta2.u[k] - 2.0 * eta.u[k]).cwiseAbs().maxCoeff());
  }
  EXPECT_LE(err, 1e-12 * scale);

  const auto a = s.solve_chi(FaceSide::plus, 0), b = s.solve_chi(FaceSide::minus, 1);
  const Vector phi = a.lifting + b.lifting;
  Vector u_d = Vector::Zero(n);
  for (int d = 0; d < n; ++d)
    if (s.dof_map().is_fixed(d)) u_d[d] = phi[d];
  const auto sum = s.run(a, u_d, phi, zero);
  err = 0.0;
  for (int k = 0; k <= 200; ++k) err = std::max(err, (sum.u[k] - a.u[k] - b.u[k]).cwiseAbs().maxCoeff());
  EXPECT_LE(err, 1e-12);
}

TEST(CellDynamic, KernelStartValues) {
  for (double r : {0.0, 0.3}) {
    auto mesh = cell2(8, r);
    DynamicCellSolver<2> s(mesh, iso2(), TimeGrid{1.0, 50});
    const auto set = solve_dynamic_correctors(s);
    const auto t = extract_kernels(set);
    const SparseMatrix& p = s.dof_map().prolongation();
    const Eigen::MatrixXd mr = Eigen::MatrixXd(p.transpose() * s.mass() * p);
    for (int alpha = 0; alpha < 2; ++alpha)
      for (int beta = 0; beta < 2; ++beta) {
        EXPECT_EQ(t.F[alpha][beta][0].cwiseAbs().maxCoeff(), 0.0);
        for (int i = 0; i < 2; ++i) {
          // Reaction of the lifting at rest: K phi plus the inertia of the
          // interior acceleration it induces (zero on a hole-free cell).
          const Vector phi = boundary_lifting<2>(mesh, i, alpha == 0 ? FaceSide::plus : FaceSide::minus);
          const Vector kphi = s.stiffness() * phi;
          const Vector a0 = p * Vector(mr.ldlt().solve(Vector(-(p.transpose() * kphi))));
          const Vector react = kphi + s.mass() * a0;
          for (int j = 0; j < 2; ++j) {
            double ref = 0.0;
            for (int node : s.face(beta == 0 ? FaceSide::plus : FaceSide::minus)) ref += react[2 * node + j];
            EXPECT_NEAR(t.G[alpha][beta][0](j, i), ref, 1e-10 * std::max(1.0, std::abs(ref)));
          }
        }
      }
    if (r == 0.0) {
      // Static traction of the affine lifting: +-C_{j1i1} on the outward faces.
      const auto c = isotropic_tensor<2>(1.3, 0.7);
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
          EXPECT_NEAR(t.G[0][0][0](j, i), c(j, 0, i, 0), 1e-12);
          EXPECT_NEAR(t.G[0][1][0](j, i), -c(j, 0, i, 0), 1e-12);
        }
    }
  }
}

TEST(CellDynamic, ReflectionSymmetryOfKernels) {
  auto mesh = cell2(8, 0.3);
  DynamicCellSolver<2> s(mesh, iso2(), TimeGrid{1.0, 100});
  const auto t = extract_kernels(solve_dynamic_correctors(s));
  const double sgn[2] = {-1.0, 1.0};
  double scale = 0.0;
  for (const auto& b : t.G[0][0]) scale = std::max(scale, b.cwiseAbs().maxCoeff());
  for (int n = 0; n <= 100; ++n)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        EXPECT_NEAR(t.G[1][1][n](j, i), sgn[i] * sgn[j] * t.G[0][0][n](j, i), 1e-11 * scale);
        EXPECT_NEAR(t.F[1][1][n](j, i), sgn[i] * sgn[j] * t.F[0][0][n](j, i), 1e-11 * scale);
        EXPECT_NEAR(t.G[1][0][n](j, i), sgn[i] * sgn[j] * t.G[0][1][n](j, i), 1e-11 * scale);
      }
}

TEST(CellDynamic, SurfaceEqualsVolumeForm) {
  auto mesh = cell2(8, 0.3);
  DynamicCellSolver<2> s(mesh, graded2(mesh), TimeGrid{1.0, 100});
  const auto set = solve_dynamic_correctors(s);
  const auto t = extract_kernels(set);
  double worst = 0.0;
  for (int alpha = 0; alpha < 2; ++alpha)
    for (int beta = 0; beta < 2; ++beta)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          for (int n = 0; n <= 100; ++n) {
            const auto& test = set.chi[beta][j];
            const double g = kernel_volume_diagnostic(s, set.chi[alpha][i], n, test, 0);
            const double f = kernel_volume_diagnostic(s, set.eta[alpha][i], n, test, 0);
            const double gs = t.G[alpha][beta][n](j, i), fs = t.F[alpha][beta][n](j, i);
            const double scale = std::max({1.0, std::abs(gs), t.G[alpha][alpha][0].cwiseAbs().maxCoeff()});
            worst = std::max({worst, std::abs(g - gs) / scale, std::abs(f - fs) / scale});
          }
  EXPECT_LE(worst, 1e-8);

  // Linearity in the first series; central differences only approximate.
  const auto& x = set.chi[0][0];
  auto x2 = x;
  for (auto& a : x2.a) a *= 2.0;
  for (auto& u : x2.u) u *= 2.0;
  const double one = kernel_volume_diagnostic(s, x, 37, set.chi[1][1], 0);
  EXPECT_NEAR(kernel_volume_diagnostic(s, x2, 37, set.chi[1][1], 0), 2.0 * one, 1e-12 * std::abs(one) + 1e-14);
  const double cd = kernel_volume_diagnostic(s, x, 37, set.chi[0][0], 0, AccelerationMode::central_difference);
  EXPECT_TRUE(std::isfinite(cd));
  EXPECT_THROW(kernel_volume_diagnostic(s, x, 101, x, 0), InputError);
}

TEST(CellDynamic, LiftingIndependentRampResponse) {
  auto mesh = cell2(8, 0.3);
  const TimeGrid grid{1.0, 200};
  DynamicOptions lin, stat;
  stat.lifting = LiftingKind::elastostatic;
  DynamicCellSolver<2> s1(mesh, iso2(), grid, lin), s2(mesh, iso2(), grid, stat);
  const auto t1 = extract_kernels(solve_dynamic_correctors(s1));
  const auto t2 = extract_kernels(solve_dynamic_correctors(s2));
  // Liftings differ, hence the kernels do.
  EXPECT_GT((t1.G[0][0][50] - t2.G[0][0][50]).norm(), 1e-6);

  // Response to a unit velocity step on face alpha: int_0^t G + F(t).
  double worst = 0.0, scale = 0.0;
  for (int alpha = 0; alpha < 2; ++alpha)
    for (int beta = 0; beta < 2; ++beta) {
      Block c1 = Block::Zero(), c2 = Block::Zero();
      for (int n = 0; n <= grid.steps; ++n) {
        if (n > 0) {
          c1 += 0.5 * grid.dt() * (t1.G[alpha][beta][n - 1] + t1.G[alpha][beta][n]);
          c2 += 0.5 * grid.dt() * (t2.G[alpha][beta][n - 1] + t2.G[alpha][beta][n]);
        }
        const Block r1 = c1 + t1.F[alpha][beta][n], r2 = c2 + t2.F[alpha][beta][n];
        worst = std::max(worst, (r1 - r2).cwiseAbs().maxCoeff());
        scale = std::max(scale, r1.cwiseAbs().maxCoeff());
      }
    }
  EXPECT_LE(worst / scale, 1e-6);
}

TEST(CellDynamic, KernelScalingAndTableShape) {
  auto mesh = cell2(4, 0.0);
  const TimeGrid grid{0.5, 20};
  const auto base = extract_kernels(solve_dynamic_correctors(DynamicCellSolver<2>(mesh, iso2(1.0, 1.0, 1.0), grid)));
  const auto scaled = extract_kernels(solve_dynamic_correctors(DynamicCellSolver<2>(mesh, iso2(3.0, 3.0, 3.0), grid)));
  for (int n = 0; n <= 20; ++n) EXPECT_LE((scaled.G[0][1][n] - 3.0 * base.G[0][1][n]).norm(), 1e-10);
  EXPECT_LE((base.scaled(3.0).F[1][0][7] - scaled.F[1][0][7]).norm(), 1e-10);

  std::ostringstream os;
  write_kernel_csv(os, base);
  std::istringstream is(os.str());
  std::string line;
  int rows = 0;
  std::getline(is, line);
  EXPECT_EQ(line.rfind("# dt=", 0), 0u);
  std::getline(is, line);
  EXPECT_EQ(line.rfind("# M0 ", 0), 0u);
  std::getline(is, line);
  EXPECT_EQ(line, "tau,alpha,beta,j,i,G_value,F_value");
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 4 * 2 * 2 * (20 + 1));

  DynamicCorrectorSet<2> bad = solve_dynamic_correctors(DynamicCellSolver<2>(mesh, iso2(), TimeGrid{0.5, 10}));
  bad.eta[1][0] = DynamicCellSolver<2>(mesh, iso2(), grid).solve_eta(FaceSide::minus, 0);
  EXPECT_THROW(extract_kernels(bad), InputError);
}

TEST(CellDynamic, RejectsBadInput) {
  auto mesh = cell2(4, 0.0);
  EXPECT_THROW(DynamicCellSolver<2>(mesh, iso2(), TimeGrid{0.0, 10}), InputError);
  EXPECT_THROW(DynamicCellSolver<2>(mesh, iso2(), TimeGrid{1.0, 0}), InputError);
  DynamicCellSolver<2> s(mesh, iso2(), TimeGrid{1.0, 10});
  EXPECT_THROW(s.solve(DynamicKind::chi, FaceSide::none, 0), InputError);
  EXPECT_THROW(s.solve(DynamicKind::theta, FaceSide::plus, 0), InputError);
  EXPECT_THROW(s.solve_u1_tilde(Vector::Zero(3)), InputError);
}

TEST(CellDynamic, CoarseStepWarning) {
  auto mesh = cell2(8, 0.0);
  DynamicCellSolver<2> coarse(mesh, iso2(), TimeGrid{10.0, 10});
  ASSERT_EQ(coarse.warnings().size(), 1u);
  EXPECT_EQ(coarse.solve_theta(0).warnings.size(), 1u);
}

namespace {

// Direct Newmark solve of the cell with time-dependent face data
// (u_face(t), v_face(t), a_face(t)) applied as e-vectors on each face,
// a body force f(t) (acceleration units) and initial velocity u1. The
// initial interior velocity is the mass projection of u1 given the face
// velocities.
struct DirectRun {
  std::vector<Vector> u, a;
};

DirectRun direct_cell_run(const DynamicCellSolver<2>& s, const std::array<std::vector<Point<2>>, 2>& disp,
                          const std::array<std::vector<Point<2>>, 2>& vel, const std::array<std::vector<Point<2>>, 2>& acc, const std::vector<Point<2>>& force,
                          const Vector& u1) {
  const int steps = s.grid().steps, n = s.stiffness().rows();
  const SparseMatrix& p = s.dof_map().prolongation();
  const SparseMatrix mr = p.transpose() * s.mass() * p, kr = p.transpose() * s.stiffness() * p;
  NewmarkIntegrator nm(mr, kr, s.grid().dt());
  auto face_field = [&](const std::array<std::vector<Point<2>>, 2>& src, int k) {
    Vector g = Vector::Zero(n);
    for (int side = 0; side < 2; ++side)
      for (int node : s.face(side == 0 ? FaceSide::plus : FaceSide::minus)) g.segment<2>(2 * node) = src[side][k];
    return g;
  };
  auto load = [&](int k) {
    Vector body = Vector::Zero(n);
    if (!force.empty())
      for (int node = 0; node < n / 2; ++node) body.segment<2>(2 * node) = force[k];
    return Vector(p.transpose() * (s.mass() * body - s.stiffness() * face_field(disp, k) - s.mass() * face_field(acc, k)));
  };
  const Vector target = (u1.size() ? u1 : Vector(Vector::Zero(n))) - face_field(vel, 0);
  const Vector v0 = Eigen::SimplicialLDLT<SparseMatrix>(mr).solve(Vector(p.transpose() * (s.mass() * target)));
  nm.initialize(Vector::Zero(mr.rows()), v0, load(0));
  DirectRun out;
  for (int k = 0;; ++k) {
    out.u.push_back(p * nm.u() + face_field(disp, k));
    out.a.push_back(p * nm.a() + face_field(acc, k));
    if (k == steps) break;
    nm.step(load(k + 1));
  }
  return out;
}

}  // namespace

TEST(CellDynamic, RepresentationZeroAndRamp) {
  auto mesh = cell2(8, 0.3);
  const TimeGrid grid{1.0, 100};
  DynamicCellSolver<2> s(mesh, graded2(mesh), grid);
  const auto set = solve_dynamic_correctors(s);
  LayerDrive<2> drive;
  for (int side = 0; side < 2; ++side) {
    drive.velocity[side].assign(101, Point<2>::Zero());
    drive.acceleration[side].assign(101, Point<2>::Zero());
  }
  const auto zero = represent_layer_displacement(set, drive);
  for (const auto& u : zero.u) EXPECT_EQ(u.norm(), 0.0);

  // Constant trace velocity c on S+.
  const Point<2> c(0.4, -0.7);
  drive.velocity[0].assign(101, c);
  const auto rep = represent_layer_displacement(set, drive);
  std::array<std::vector<Point<2>>, 2> disp, acc;
  for (int side = 0; side < 2; ++side) {
    acc[side].assign(101, Point<2>::Zero());
    disp[side].assign(101, Point<2>::Zero());
  }
  for (int k = 0; k <= 100; ++k) disp[0][k] = grid.time(k) * c;
  const auto direct = direct_cell_run(s, disp, drive.velocity, acc, {}, {});
  double scale = 0.0, err = 0.0, trace = 0.0, closed = 0.0;
  for (int k = 0; k <= 100; ++k) {
    scale = std::max(scale, direct.u[k].cwiseAbs().maxCoeff());
    err = std::max(err, (rep.u[k] - direct.u[k]).cwiseAbs().maxCoeff());
    for (int node : s.face(FaceSide::plus)) trace = std::max(trace, (rep.u[k].segment<2>(2 * node) - disp[0][k]).norm());
    for (int node : s.face(FaceSide::minus)) trace = std::max(trace, rep.u[k].segment<2>(2 * node).norm());
    // sum_i c_i (int_0^t chi_i + eta_i(t)).
    Vector ref = Vector::Zero(rep.u[k].size());
    for (int i = 0; i < 2; ++i) {
      for (int m = 0; m <= k; ++m) ref += c[i] * trapezoid_weight(m, k, grid.dt()) * set.chi[0][i].u[m];
      ref += c[i] * set.eta[0][i].u[k];
    }
    closed = std::max(closed, (rep.u[k] - ref).cwiseAbs().maxCoeff());
  }
  EXPECT_LE(err, 1e-10 * scale);
  EXPECT_LE(trace, 1e-13);
  EXPECT_LE(closed, 1e-13);

  // Discrete weak form against interior test functions.
  const SparseMatrix& p = s.dof_map().prolongation();
  for (int k = 0; k <= 100; k += 10) {
    const Vector r = p.transpose() * (s.mass() * rep.a[k] + s.stiffness() * rep.u[k]);
    EXPECT_LE(r.norm(), 1e-6 * std::max(1e-12, (s.stiffness() * rep.u[k]).norm()));
  }
}

TEST(CellDynamic, RepresentationMatchesDirectTimeStepping) {
  auto mesh = cell2(8, 0.3);
  const auto mat = graded2(mesh);
  const double T = 1.0;
  double prev = 0.0;
  for (int steps : {200, 400}) {
    const TimeGrid grid{T, steps};
    DynamicCellSolver<2> s(mesh, mat, grid);
    const auto set = solve_dynamic_correctors(s);
    std::array<DynamicCellSolution<2>, 2> theta{s.solve_theta(0), s.solve_theta(1)};
    const std::array<const DynamicCellSolution<2>*, 2> th{&theta[0], &theta[1]};
    const Vector u1 = nodal_field<2>(mesh, [](const Point<2>& y) { return Point<2>(0.2 * std::cos(M_PI * y[0]), 0.1); });
    const auto u1t = s.solve_u1_tilde(u1);

    LayerDrive<2> drive;
    std::array<std::vector<Point<2>>, 2> disp, acc;
    for (int k = 0; k <= steps; ++k) {
      const double t = grid.time(k), w = 2.0 * M_PI;
      // u+ = (1 - cos w t) a, u- = sin(w t) b / w - t b.
      const Point<2> a(0.3, 0.1), b(-0.2, 0.25);
      drive.velocity[0].push_back(w * std::sin(w * t) * a);
      drive.acceleration[0].push_back(w * w * std::cos(w * t) * a);
      disp[0].push_back((1 - std::cos(w * t)) * a);
      drive.velocity[1].push_back((std::cos(w * t) - 1) * b);
      drive.acceleration[1].push_back(-w * std::sin(w * t) * b);
      disp[1].push_back((std::sin(w * t) / w - t) * b);
      drive.force.push_back(Point<2>(std::sin(3 * t), 0.5));
    }
    for (int side = 0; side < 2; ++side) acc[side] = drive.acceleration[side];
    const auto rep = represent_layer_displacement(set, drive, &th, &u1t);
    EXPECT_TRUE(rep.a.empty());
    const auto direct = direct_cell_run(s, disp, drive.velocity, acc, drive.force, u1);
    double e2 = 0.0, r2 = 0.0;
    for (int k = 0; k <= steps; ++k) {
      const Vector d = rep.u[k] - direct.u[k];
      e2 += d.dot(s.mass() * d);
      r2 += direct.u[k].dot(s.mass() * direct.u[k]);
    }
    const double err = std::sqrt(e2 / r2);
    EXPECT_LE(err, 1e-3) << steps;
    if (prev > 0) {
      EXPECT_GT(prev / err, 3.0);
    }
    prev = err;
  }
}

TEST(CellDynamic, AddedMassSymmetricAndVanishingWithMeshSize) {
  double prev = 1e300;
  for (int res : {4, 8, 16}) {
    auto mesh = cell2(res, 0.25);
    DynamicCellSolver<2> s(mesh, graded2(mesh), TimeGrid{1.0, 10});
    const auto m = s.added_mass();
    Eigen::Matrix4d full;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) full.block<2, 2>(2 * b, 2 * a) = m[a][b];
    EXPECT_LT((full - full.transpose()).norm(), 1e-14 * full.norm());
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d>(full).eigenvalues().minCoeff(), -1e-14);
    EXPECT_GT(full.norm(), 0.0);
    EXPECT_LT(full.norm(), 0.6 * prev) << res;
    prev = full.norm();
  }
}
