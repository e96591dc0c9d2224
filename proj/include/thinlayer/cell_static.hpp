#pragma once

// Static cell problems on the perforated cell and the effective membrane
// and plate coefficients assembled from them.
//
// In-plane indices are the axes 1..Dim-1 (zero-based); axis 0 is the
// thickness coordinate y1. In-plane tensors are stored as ElasticTensor4 of
// dimension Dim-1, with in-plane index a mapped to cell axis a + 1.

#include <array>
#include <memory>
#include <vector>

#include "cell_mesh.hpp"
#include "fem.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace thinlayer {

template <int Dim>
struct CellMaterial {
  TensorField<Dim> tensor;
  ScalarField density;
};

template <int Dim>
CellMaterial<Dim> homogeneous_material(const ElasticTensor4<Dim>& c, double rho) {
  return {[c](int) { return c; }, [rho](int) { return rho; }};
}

enum class PlateNormalization { volume_normalized, unnormalized };

inline const char* to_string(PlateNormalization n) {
  return n == PlateNormalization::volume_normalized ? "volume_normalized" : "unnormalized";
}

template <int Dim>
inline constexpr int inplane_dim = Dim - 1;

// Cell-axis pair of the in-plane Voigt slot A.
template <int Dim>
std::pair<int, int> inplane_pair(int A) {
  const auto p = voigt_pairs<inplane_dim<Dim>>()[A];
  return {p.first + 1, p.second + 1};
}

// Factorizations shared by all static cell problems of one cell.
template <int Dim>
class CellProblemSolver {
 public:
  CellProblemSolver(const GridMesh<Dim>& mesh, CellMaterial<Dim> material)
      : mesh_(mesh), mat_(std::move(material)), k_(assemble_stiffness<Dim>(mesh, mat_.tensor)),
        weights_(lumped(assemble_mass<Dim>(mesh, 1.0))), periodic_(mesh.num_nodes(), Dim),
        jump_(mesh.num_nodes(), Dim) {
    periodic_.add_periodic(mesh.periodic_pairs);
    periodic_.finalize();
    jump_.add_periodic(mesh.periodic_pairs);
    jump_.add_face_group(face_nodes<Dim>(mesh, on_cell_face(CellFace::s_plus)));
    jump_.add_face_group(face_nodes<Dim>(mesh, on_cell_face(CellFace::s_minus)));
    jump_.finalize();
    SolveOptions opt;
    opt.zero_mean = true;
    periodic_solver_ = std::make_unique<ConstrainedSolver>(k_, periodic_, opt, weights_);
    jump_solver_ = std::make_unique<ConstrainedSolver>(k_, jump_, opt, weights_);
  }

  const GridMesh<Dim>& mesh() const { return mesh_; }
  const CellMaterial<Dim>& material() const { return mat_; }
  const SparseMatrix& stiffness() const { return k_; }
  const DofMap& periodic_map() const { return periodic_; }
  const DofMap& jump_map() const { return jump_; }

  // Periodic, zero-mean chi with int C (e(chi) + M_ab) : e(v) = 0.
  Vector membrane_corrector(int a, int b) const {
    check_inplane(a, b);
    return solve_prestrain(membrane_prestrain(a, b));
  }

  // Periodic, zero-mean chi with int C (e(chi) - y1 M_ab) : e(v) = 0.
  Vector bending_corrector(int a, int b) const {
    check_inplane(a, b);
    return solve_prestrain(bending_prestrain(a, b));
  }

  // Constant on each of S+, S-, zero mean, with
  // int C e(eta) : e(v) = int_{S+} v_k - int_{S-} v_k.
  Vector jump_corrector(int k) const {
    if (k < 0 || k >= Dim) throw InputError("jump corrector: component out of range");
    return jump_solver_->solve(jump_load(k));
  }

  Vector jump_load(int k) const {
    Point<Dim> e = Point<Dim>::Zero();
    e[k] = 1.0;
    return assemble_face_load<Dim>(mesh_, on_cell_face(CellFace::s_plus), e) +
           assemble_face_load<Dim>(mesh_, on_cell_face(CellFace::s_minus), -e);
  }

  // Periodic, zero-mean solve for an arbitrary load.
  Vector solve_periodic(const Vector& f) const { return periodic_solver_->solve(f); }

  Vector prestrain_load(const StrainField<Dim>& eps) const { return assemble_prestrain_load<Dim>(mesh_, mat_.tensor, eps); }

  static StrainField<Dim> membrane_prestrain(int a, int b) {
    const SymMat<Dim> m = strain_basis<Dim>(a, b);
    return [m](int, const Point<Dim>&) { return m; };
  }
  static StrainField<Dim> bending_prestrain(int a, int b) {
    const SymMat<Dim> m = strain_basis<Dim>(a, b);
    return [m](int, const Point<Dim>& y) { return -y[0] * m; };
  }

  double energy(const Vector& u1, const StrainField<Dim>& e1, const Vector& u2, const StrainField<Dim>& e2) const {
    return energy_product<Dim>(mesh_, mat_.tensor, u1, e1, u2, e2);
  }

 private:
  Vector solve_prestrain(const StrainField<Dim>& eps) const { return periodic_solver_->solve(prestrain_load(eps)); }
  static void check_inplane(int a, int b) {
    if (a < 1 || b < 1 || a >= Dim || b >= Dim) throw InputError("cell corrector: indices must be in-plane");
  }

  const GridMesh<Dim>& mesh_;
  CellMaterial<Dim> mat_;
  SparseMatrix k_;
  Vector weights_;
  DofMap periodic_, jump_;
  std::unique_ptr<ConstrainedSolver> periodic_solver_, jump_solver_;
};

template <int Dim>
Vector solve_membrane_corrector(const GridMesh<Dim>& mesh, const CellMaterial<Dim>& mat, int a, int b) {
  return CellProblemSolver<Dim>(mesh, mat).membrane_corrector(a, b);
}
template <int Dim>
Vector solve_bending_corrector(const GridMesh<Dim>& mesh, const CellMaterial<Dim>& mat, int a, int b) {
  return CellProblemSolver<Dim>(mesh, mat).bending_corrector(a, b);
}
template <int Dim>
Vector solve_jump_corrector(const GridMesh<Dim>& mesh, const CellMaterial<Dim>& mat, int k) {
  return CellProblemSolver<Dim>(mesh, mat).jump_corrector(k);
}

template <int Dim>
struct StaticCorrectorSet {
  static constexpr int NP = voigt_size<inplane_dim<Dim>>;
  std::array<Vector, NP> chi_a;  // indexed by in-plane Voigt slot
  std::array<Vector, NP> chi_b;
  std::array<Vector, Dim> eta;
};

template <int Dim>
StaticCorrectorSet<Dim> solve_static_correctors(const CellProblemSolver<Dim>& s) {
  constexpr int NP = StaticCorrectorSet<Dim>::NP;
  StaticCorrectorSet<Dim> out;
  parallel_for(2 * NP + Dim, [&](int job) {
    if (job < NP) {
      auto [a, b] = inplane_pair<Dim>(job);
      out.chi_a[job] = s.membrane_corrector(a, b);
    } else if (job < 2 * NP) {
      auto [a, b] = inplane_pair<Dim>(job - NP);
      out.chi_b[job - NP] = s.bending_corrector(a, b);
    } else {
      out.eta[job - 2 * NP] = s.jump_corrector(job - 2 * NP);
    }
  });
  return out;
}

template <int Dim>
struct EffectiveCoefficients {
  static constexpr int P = inplane_dim<Dim>;
  static constexpr int NP = voigt_size<P>;
  using Coupling = Eigen::Matrix<double, NP, NP>;

  ElasticTensor4<P> A_star;  // unnormalized
  ElasticTensor4<P> a_star, c_star;
  Coupling b_star = Coupling::Zero();  // row: bending slot, column: membrane slot
  double rho_bar = 0.0;                // int_{Y0} rho
  double cell_volume = 0.0;
  PlateNormalization normalization = PlateNormalization::volume_normalized;
};

template <int Dim>
EffectiveCoefficients<Dim> assemble_effective_tensors(const StaticCorrectorSet<Dim>& corr, const CellProblemSolver<Dim>& s,
                                                      PlateNormalization norm = PlateNormalization::volume_normalized) {
  using EC = EffectiveCoefficients<Dim>;
  constexpr int NP = EC::NP;
  for (const auto& v : corr.chi_a)
    if (v.size() == 0) throw InputError("assemble_effective_tensors: missing membrane corrector");
  for (const auto& v : corr.chi_b)
    if (v.size() == 0) throw InputError("assemble_effective_tensors: missing bending corrector");

  EC out;
  out.cell_volume = cell_measure(s.mesh());
  out.normalization = norm;
  const double scale = norm == PlateNormalization::volume_normalized ? 1.0 / out.cell_volume : 1.0;

  std::array<StrainField<Dim>, NP> ma, mb;
  for (int A = 0; A < NP; ++A) {
    auto [a, b] = inplane_pair<Dim>(A);
    ma[A] = CellProblemSolver<Dim>::membrane_prestrain(a, b);
    mb[A] = CellProblemSolver<Dim>::bending_prestrain(a, b);
  }
  typename ElasticTensor4<EC::P>::VoigtMatrix va, vc;
  typename EC::Coupling vb;
  for (int A = 0; A < NP; ++A)
    for (int B = 0; B < NP; ++B) {
      va(A, B) = s.energy(corr.chi_a[B], ma[B], corr.chi_a[A], ma[A]);
      vc(A, B) = s.energy(corr.chi_b[A], mb[A], corr.chi_b[B], mb[B]);
      vb(A, B) = s.energy(corr.chi_b[A], mb[A], corr.chi_a[B], ma[B]);
    }
  va = (0.5 * (va + va.transpose())).eval();
  vc = (0.5 * (vc + vc.transpose())).eval();
  out.A_star = ElasticTensor4<EC::P>(va);
  out.a_star = ElasticTensor4<EC::P>(scale * va);
  out.c_star = ElasticTensor4<EC::P>(scale * vc);
  out.b_star = scale * vb;

  const SparseMatrix mass = assemble_mass<Dim>(s.mesh(), s.material().density);
  out.rho_bar = lumped(mass).sum() / Dim;
  return out;
}

// Convenience: mesh + material -> coefficients.
template <int Dim>
EffectiveCoefficients<Dim> compute_effective_coefficients(const GridMesh<Dim>& mesh, const CellMaterial<Dim>& mat,
                                                          PlateNormalization norm = PlateNormalization::volume_normalized) {
  CellProblemSolver<Dim> s(mesh, mat);
  return assemble_effective_tensors(solve_static_correctors(s), s, norm);
}

}  // namespace thinlayer
