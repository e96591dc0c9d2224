#pragma once

// Q1 (bilinear/trilinear) elasticity on voxel meshes: element kernels,
// global assembly, constraint maps and constrained linear solves.
//
// Nodal fields are flat vectors with dof index node * Dim + component.

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cell_mesh.hpp"
#include "errors.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace thinlayer {

using SparseMatrix = Eigen::SparseMatrix<double>;
using Vector = Eigen::VectorXd;
using Triplets = std::vector<Eigen::Triplet<double>>;

template <int Dim>
using TensorField = std::function<ElasticTensor4<Dim>(int element)>;
using ScalarField = std::function<double(int element)>;
template <int Dim>
using StrainField = std::function<SymMat<Dim>(int element, const Point<Dim>& x)>;

template <int Dim>
struct Q1 {
  static constexpr int nen = 1 << Dim;
  static constexpr int ndof = Dim * nen;
  static constexpr int nv = voigt_size<Dim>;
  using ElemMat = Eigen::Matrix<double, ndof, ndof>;
  using ElemVec = Eigen::Matrix<double, ndof, 1>;
  using BMat = Eigen::Matrix<double, nv, ndof>;
  using Shape = Eigen::Matrix<double, nen, 1>;

  // 2-point Gauss rule per direction on [0,1]^Dim; each weight is 1/nen.
  static Point<Dim> gauss_point(int q) {
    const double g = 0.5 / std::sqrt(3.0);
    Point<Dim> xi;
    for (int a = 0; a < Dim; ++a) xi[a] = ((q >> a) & 1) ? 0.5 + g : 0.5 - g;
    return xi;
  }

  static Shape shape(const Point<Dim>& xi) {
    Shape n;
    for (int k = 0; k < nen; ++k) {
      double v = 1.0;
      for (int a = 0; a < Dim; ++a) v *= ((k >> a) & 1) ? xi[a] : 1.0 - xi[a];
      n[k] = v;
    }
    return n;
  }

  // Physical gradients of the shape functions, column k = grad N_k.
  static Eigen::Matrix<double, Dim, nen> gradients(const Point<Dim>& xi, const Point<Dim>& h) {
    Eigen::Matrix<double, Dim, nen> g;
    for (int k = 0; k < nen; ++k)
      for (int a = 0; a < Dim; ++a) {
        double v = ((k >> a) & 1) ? 1.0 : -1.0;
        for (int b = 0; b < Dim; ++b)
          if (b != a) v *= ((k >> b) & 1) ? xi[b] : 1.0 - xi[b];
        g(a, k) = v / h[a];
      }
    return g;
  }

  // Engineering-shear Voigt strain operator.
  static BMat strain_matrix(const Point<Dim>& xi, const Point<Dim>& h) {
    const auto g = gradients(xi, h);
    constexpr auto pairs = voigt_pairs<Dim>();
    BMat b = BMat::Zero();
    for (int A = 0; A < nv; ++A) {
      const auto [i, j] = pairs[A];
      for (int k = 0; k < nen; ++k) {
        if (i == j) {
          b(A, k * Dim + i) = g(i, k);
        } else {
          b(A, k * Dim + i) = g(j, k);
          b(A, k * Dim + j) = g(i, k);
        }
      }
    }
    return b;
  }

  static ElemMat stiffness(const Point<Dim>& h, const typename ElasticTensor4<Dim>::VoigtMatrix& v) {
    const double w = h.prod() / nen;
    ElemMat k = ElemMat::Zero();
    for (int q = 0; q < nen; ++q) {
      const BMat b = strain_matrix(gauss_point(q), h);
      k.noalias() += w * b.transpose() * v * b;
    }
    return 0.5 * (k + k.transpose());
  }

  static ElemMat mass(const Point<Dim>& h, double rho) {
    const double w = rho * h.prod() / nen;
    Eigen::Matrix<double, nen, nen> m = Eigen::Matrix<double, nen, nen>::Zero();
    for (int q = 0; q < nen; ++q) {
      const Shape n = shape(gauss_point(q));
      m.noalias() += w * n * n.transpose();
    }
    ElemMat out = ElemMat::Zero();
    for (int a = 0; a < nen; ++a)
      for (int b = 0; b < nen; ++b)
        for (int c = 0; c < Dim; ++c) out(a * Dim + c, b * Dim + c) = m(a, b);
    return out;
  }
};

template <int Dim>
std::array<int, Q1<Dim>::ndof> element_dofs(const GridMesh<Dim>& m, int e) {
  std::array<int, Q1<Dim>::ndof> d{};
  for (int k = 0; k < Q1<Dim>::nen; ++k)
    for (int c = 0; c < Dim; ++c) d[k * Dim + c] = m.elements[e][k] * Dim + c;
  return d;
}

template <int Dim>
typename Q1<Dim>::ElemVec gather(const GridMesh<Dim>& m, int e, const Vector& u) {
  typename Q1<Dim>::ElemVec ue;
  const auto d = element_dofs(m, e);
  for (int i = 0; i < Q1<Dim>::ndof; ++i) ue[i] = u[d[i]];
  return ue;
}

template <int Dim>
std::vector<int> solid_elements(const GridMesh<Dim>& m) {
  std::vector<int> out;
  for (int e = 0; e < m.num_elements(); ++e)
    if (m.solid[e]) out.push_back(e);
  return out;
}

namespace detail {

inline constexpr int kAssemblyChunks = 16;

// Element-wise assembly with per-chunk triplet lists concatenated in chunk
// order; the resulting summation order is independent of the thread count.
template <int Dim, class ElemFn>
SparseMatrix assemble_matrix(const GridMesh<Dim>& m, ElemFn&& elem) {
  const std::vector<int> els = solid_elements(m);
  std::vector<Triplets> parts(kAssemblyChunks);
  parallel_chunks(static_cast<int>(els.size()), kAssemblyChunks, [&](int c, int b, int e) {
    auto& t = parts[c];
    t.reserve(static_cast<size_t>(e - b) * Q1<Dim>::ndof * Q1<Dim>::ndof);
    for (int i = b; i < e; ++i) {
      const int el = els[i];
      const typename Q1<Dim>::ElemMat ke = elem(el);
      const auto d = element_dofs(m, el);
      for (int r = 0; r < Q1<Dim>::ndof; ++r)
        for (int s = 0; s < Q1<Dim>::ndof; ++s)
          if (ke(r, s) != 0.0) t.emplace_back(d[r], d[s], ke(r, s));
    }
  });
  Triplets all;
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  const int n = m.num_nodes() * Dim;
  SparseMatrix k(n, n);
  k.setFromTriplets(all.begin(), all.end());
  return k;
}

}  // namespace detail

template <int Dim>
SparseMatrix assemble_stiffness(const GridMesh<Dim>& m, const TensorField<Dim>& c) {
  return detail::assemble_matrix(m, [&](int e) { return Q1<Dim>::stiffness(m.element_size(e), c(e).voigt()); });
}

template <int Dim>
SparseMatrix assemble_stiffness(const GridMesh<Dim>& m, const ElasticTensor4<Dim>& c) {
  return assemble_stiffness<Dim>(m, [&](int) { return c; });
}

template <int Dim>
SparseMatrix assemble_mass(const GridMesh<Dim>& m, const ScalarField& rho, double rho_min = 0.0) {
  for (int e : solid_elements(m))
    if (!(rho(e) > rho_min)) throw InputError("assemble_mass: density must exceed the lower bound");
  return detail::assemble_matrix(m, [&](int e) { return Q1<Dim>::mass(m.element_size(e), rho(e)); });
}

template <int Dim>
SparseMatrix assemble_mass(const GridMesh<Dim>& m, double rho) {
  return assemble_mass<Dim>(m, [rho](int) { return rho; });
}

// Row sums of a mass matrix.
inline Vector lumped(const SparseMatrix& mass) { return mass * Vector::Ones(mass.cols()); }

// f_v = -int C eps0 : e(v), eps0 sampled at Gauss points.
template <int Dim>
Vector assemble_prestrain_load(const GridMesh<Dim>& m, const TensorField<Dim>& c, const StrainField<Dim>& eps0) {
  Vector f = Vector::Zero(m.num_nodes() * Dim);
  for (int e : solid_elements(m)) {
    const Point<Dim> h = m.element_size(e), x0 = m.element_lower(e);
    const auto v = c(e).voigt();
    typename Q1<Dim>::ElemVec fe = Q1<Dim>::ElemVec::Zero();
    for (int q = 0; q < Q1<Dim>::nen; ++q) {
      const Point<Dim> xi = Q1<Dim>::gauss_point(q);
      const Point<Dim> x = x0 + (xi.array() * h.array()).matrix();
      fe -= (h.prod() / Q1<Dim>::nen) * Q1<Dim>::strain_matrix(xi, h).transpose() * (v * eps0(e, x).strain_voigt());
    }
    const auto d = element_dofs(m, e);
    for (int i = 0; i < Q1<Dim>::ndof; ++i) f[d[i]] += fe[i];
  }
  return f;
}

template <int Dim>
using FacePredicate = std::function<bool(const BoundaryFace<Dim>&)>;

inline auto on_cell_face(CellFace tag) {
  return [tag](const auto& f) { return cell_face_tag(f) == tag; };
}

// f_v = int_faces g . v for a constant vector density g.
template <int Dim>
Vector assemble_face_load(const GridMesh<Dim>& m, const FacePredicate<Dim>& which, const Point<Dim>& g) {
  Vector f = Vector::Zero(m.num_nodes() * Dim);
  int hits = 0;
  for (const auto& face : m.faces) {
    if (!which(face)) continue;
    ++hits;
    const Point<Dim> h = m.element_size(face.element);
    const double area = h.prod() / h[face.axis];
    const double share = area / static_cast<double>(face.nodes.size());
    for (int n : face.nodes)
      for (int c = 0; c < Dim; ++c) f[n * Dim + c] += share * g[c];
  }
  if (hits == 0) throw InputError("assemble_face_load: no boundary face carries the requested tag");
  return f;
}

template <int Dim>
struct FaceLoad {
  CellFace tag;
  Point<Dim> density;
};

template <int Dim>
Vector assemble_loads(const GridMesh<Dim>& m, const TensorField<Dim>& c, const StrainField<Dim>& eps0,
                      const std::vector<FaceLoad<Dim>>& face_loads) {
  Vector f = eps0 ? assemble_prestrain_load(m, c, eps0) : Vector::Zero(m.num_nodes() * Dim);
  for (const auto& fl : face_loads) f += assemble_face_load<Dim>(m, on_cell_face(fl.tag), fl.density);
  return f;
}

// int C (eps1 + e(u1)) : (eps2 + e(u2)) over the solid region; either
// strain field may be empty.
template <int Dim>
double energy_product(const GridMesh<Dim>& m, const TensorField<Dim>& c, const Vector& u1, const StrainField<Dim>& eps1,
                      const Vector& u2, const StrainField<Dim>& eps2) {
  double total = 0.0;
  for (int e : solid_elements(m)) {
    const Point<Dim> h = m.element_size(e), x0 = m.element_lower(e);
    const auto v = c(e).voigt();
    const auto a1 = gather(m, e, u1), a2 = gather(m, e, u2);
    for (int q = 0; q < Q1<Dim>::nen; ++q) {
      const Point<Dim> xi = Q1<Dim>::gauss_point(q);
      const Point<Dim> x = x0 + (xi.array() * h.array()).matrix();
      const auto b = Q1<Dim>::strain_matrix(xi, h);
      Eigen::Matrix<double, voigt_size<Dim>, 1> s1 = b * a1, s2 = b * a2;
      if (eps1) s1 += eps1(e, x).strain_voigt();
      if (eps2) s2 += eps2(e, x).strain_voigt();
      total += (h.prod() / Q1<Dim>::nen) * s1.dot(v * s2);
    }
  }
  return total;
}

// Per-component integral of a nodal field over the solid region.
template <int Dim>
Point<Dim> field_integral(const GridMesh<Dim>& m, const Vector& u) {
  const Vector w = lumped(assemble_mass(m, 1.0));
  Point<Dim> s = Point<Dim>::Zero();
  for (int n = 0; n < m.num_nodes(); ++n)
    for (int c = 0; c < Dim; ++c) s[c] += w[n * Dim + c] * u[n * Dim + c];
  return s;
}

// Interpolates an analytic vector field at the nodes.
template <int Dim>
Vector nodal_field(const GridMesh<Dim>& m, const std::function<Point<Dim>(const Point<Dim>&)>& f) {
  Vector u(m.num_nodes() * Dim);
  for (int n = 0; n < m.num_nodes(); ++n) u.segment<Dim>(n * Dim) = f(m.nodes[n]);
  return u;
}

// Nodes on faces selected by the predicate, sorted and unique.
template <int Dim>
std::vector<int> face_nodes(const GridMesh<Dim>& m, const FacePredicate<Dim>& which) {
  std::vector<char> mark(m.num_nodes(), 0);
  for (const auto& f : m.faces)
    if (which(f))
      for (int n : f.nodes) mark[n] = 1;
  std::vector<int> out;
  for (int n = 0; n < m.num_nodes(); ++n)
    if (mark[n]) out.push_back(n);
  return out;
}

// Equality (periodic, face-group) and Dirichlet constraints. Full dofs are
// grouped into classes by union-find; each free class is one reduced
// unknown, each fixed class carries a prescribed value.
class DofMap {
 public:
  DofMap(int num_nodes, int ncomp) : ncomp_(ncomp), parent_(static_cast<size_t>(num_nodes) * ncomp) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }

  int ncomp() const { return ncomp_; }
  int num_full() const { return static_cast<int>(parent_.size()); }

  void add_periodic(const std::vector<std::pair<int, int>>& pairs) {
    check_open();
    for (auto [master, slave] : pairs)
      for (int c = 0; c < ncomp_; ++c) unite(master * ncomp_ + c, slave * ncomp_ + c);
  }

  // All listed nodes share one unknown vector.
  void add_face_group(const std::vector<int>& nodes) {
    check_open();
    if (nodes.empty()) throw InputError("DofMap: empty face group");
    for (int n : nodes)
      for (int c = 0; c < ncomp_; ++c) unite(nodes.front() * ncomp_ + c, n * ncomp_ + c);
    ++face_groups_;
  }

  void fix(int dof, double value) {
    check_open();
    fixed_.emplace_back(dof, value);
  }
  void fix_node(int node, const Eigen::VectorXd& value) {
    for (int c = 0; c < ncomp_; ++c) fix(node * ncomp_ + c, value[c]);
  }

  void finalize() {
    check_open();
    const int n = num_full();
    std::vector<std::optional<double>> class_value(n);
    for (auto [dof, value] : fixed_) {
      const int r = find(dof);
      if (class_value[r] && std::abs(*class_value[r] - value) > 1e-12 * (1.0 + std::abs(value)))
        throw InputError("DofMap: conflicting Dirichlet values on identified dofs");
      class_value[r] = value;
    }
    reduced_.assign(n, -1);
    dirichlet_ = Vector::Zero(n);
    std::vector<int> class_index(n, -1);
    num_reduced_ = 0;
    Triplets t;
    for (int d = 0; d < n; ++d) {
      const int r = find(d);
      if (class_value[r]) {
        dirichlet_[d] = *class_value[r];
        continue;
      }
      if (class_index[r] < 0) class_index[r] = num_reduced_++;
      reduced_[d] = class_index[r];
      t.emplace_back(d, reduced_[d], 1.0);
    }
    p_.resize(n, num_reduced_);
    p_.setFromTriplets(t.begin(), t.end());
    has_dirichlet_ = !fixed_.empty();
    finalized_ = true;
  }

  bool finalized() const { return finalized_; }
  bool has_dirichlet() const { return has_dirichlet_; }
  int face_groups() const { return face_groups_; }
  int num_reduced() const { return num_reduced_; }
  int reduced_index(int full) const { return reduced_[full]; }
  const SparseMatrix& prolongation() const { return p_; }
  const Vector& dirichlet_values() const { return dirichlet_; }

  Vector expand(const Vector& r) const { return p_ * r + dirichlet_; }

  // Reduced coordinates of a full field that is constant on every class
  // (fixed dofs are ignored).
  Vector restrict(const Vector& full) const {
    Vector r = Vector::Zero(num_reduced_);
    for (int d = 0; d < num_full(); ++d)
      if (reduced_[d] >= 0) r[reduced_[d]] = full[d];
    return r;
  }
  bool is_fixed(int full) const { return reduced_[full] < 0; }

 private:
  int find(int x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a > b) std::swap(a, b);
    parent_[b] = a;
  }
  void check_open() const {
    if (finalized_) throw InputError("DofMap: already finalized");
  }

  int ncomp_;
  std::vector<int> parent_;
  std::vector<std::pair<int, double>> fixed_;
  std::vector<int> reduced_;
  Vector dirichlet_;
  SparseMatrix p_;
  int num_reduced_ = 0;
  int face_groups_ = 0;
  bool has_dirichlet_ = false;
  bool finalized_ = false;
};

enum class LinearMethod { direct, conjugate_gradient };

struct SolveOptions {
  LinearMethod method = LinearMethod::direct;
  bool zero_mean = false;     // one multiplier per component
  double residual_tol = 1e-10;
  double cg_tol = 1e-13;
};

// Factorizes the constrained operator once; solves for many right-hand
// sides. With zero_mean, the per-component integrals of the solution are
// constrained to vanish through Lagrange multipliers.
class ConstrainedSolver {
 public:
  // `weights` holds int N_i per dof (row sums of the unit-density mass).
  ConstrainedSolver(const SparseMatrix& k, const DofMap& map, const SolveOptions& opt = {}, const Vector& weights = {})
      : k_(k), map_(map), opt_(opt) {
    if (!map.finalized()) throw InputError("ConstrainedSolver: DofMap not finalized");
    if (!map.has_dirichlet() && !opt.zero_mean)
      throw NumericalError(
          "singular system: rigid translations are not removed (add Dirichlet dofs or zero-mean multipliers)");
    const SparseMatrix& p = map.prolongation();
    SparseMatrix kr = p.transpose() * k * p;
    nr_ = map.num_reduced();
    if (opt.zero_mean) {
      if (weights.size() != k.rows()) throw InputError("ConstrainedSolver: zero-mean weights missing");
      const int nc = map.ncomp();
      Triplets t;
      for (int j = 0; j < kr.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(kr, j); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
      std::vector<Vector> g(nc, Vector::Zero(nr_));
      for (int d = 0; d < map.num_full(); ++d) {
        const int r = map.reduced_index(d);
        if (r >= 0) g[d % nc][r] += weights[d];
      }
      for (int c = 0; c < nc; ++c)
        for (int r = 0; r < nr_; ++r)
          if (g[c][r] != 0.0) {
            t.emplace_back(nr_ + c, r, g[c][r]);
            t.emplace_back(r, nr_ + c, g[c][r]);
          }
      a_.resize(nr_ + nc, nr_ + nc);
      a_.setFromTriplets(t.begin(), t.end());
      if (opt.method != LinearMethod::direct)
        throw InputError("ConstrainedSolver: iterative solves require Dirichlet regularization");
    } else {
      a_ = kr;
    }
    a_.makeCompressed();
    if (opt.method == LinearMethod::conjugate_gradient) {
      cg_ = std::make_unique<Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper>>();
      cg_->setTolerance(opt.cg_tol);
      cg_->setMaxIterations(20 * static_cast<int>(a_.rows()) + 100);
      cg_->compute(a_);
    } else if (opt.zero_mean) {
      lu_ = std::make_unique<Eigen::SparseLU<SparseMatrix>>();
      lu_->compute(a_);
      if (lu_->info() != Eigen::Success)
        throw NumericalError("singular constrained system: factorization failed (" + lu_->lastErrorMessage() + ")");
    } else {
      ldlt_ = std::make_unique<Eigen::SimplicialLDLT<SparseMatrix>>();
      ldlt_->compute(a_);
      if (ldlt_->info() != Eigen::Success)
        throw NumericalError("singular constrained system: LDLT factorization failed");
    }
  }

  // Solves K u = f on the constrained space; returns the full field.
  Vector solve(const Vector& f) const {
    Vector rhs = Vector::Zero(a_.rows());
    rhs.head(nr_) = map_.prolongation().transpose() * (f - k_ * map_.dirichlet_values());
    Vector x;
    if (cg_) {
      x = cg_->solve(rhs);
      if (cg_->info() != Eigen::Success) throw NumericalError("conjugate gradient did not converge");
    } else if (lu_) {
      x = lu_->solve(rhs);
    } else {
      x = ldlt_->solve(rhs);
    }
    const double bn = rhs.norm();
    last_residual_ = bn > 0.0 ? (a_ * x - rhs).norm() / bn : (a_ * x).norm();
    const double tol = cg_ ? std::max(opt_.residual_tol, 10 * opt_.cg_tol) : opt_.residual_tol;
    if (!(last_residual_ <= tol))
      throw NumericalError("constrained solve residual " + std::to_string(last_residual_) + " above tolerance");
    return map_.expand(x.head(nr_));
  }

  double last_residual() const { return last_residual_; }
  const SparseMatrix& reduced_operator() const { return a_; }

 private:
  SparseMatrix k_;
  DofMap map_;
  SolveOptions opt_;
  int nr_ = 0;
  SparseMatrix a_;
  std::unique_ptr<Eigen::SimplicialLDLT<SparseMatrix>> ldlt_;
  std::unique_ptr<Eigen::SparseLU<SparseMatrix>> lu_;
  std::unique_ptr<Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper>> cg_;
  mutable double last_residual_ = 0.0;
};

// Residual K u - f restricted to the free (reduced) space, relative to |f|.
inline double galerkin_residual(const SparseMatrix& k, const DofMap& map, const Vector& u, const Vector& f) {
  const Vector r = map.prolongation().transpose() * (k * u - f);
  const double scale = std::max((map.prolongation().transpose() * f).norm(), (k * u).norm());
  return scale > 0.0 ? r.norm() / scale : r.norm();
}

// Coordinate-format text dump ("row col value", 0-based, with a size header).
inline void write_matrix_coordinate(std::ostream& os, const SparseMatrix& a) {
  os << "% rows cols nnz\n" << a.rows() << ' ' << a.cols() << ' ' << a.nonZeros() << '\n';
  os << std::setprecision(17);
  for (int j = 0; j < a.outerSize(); ++j)
    for (SparseMatrix::InnerIterator it(a, j); it; ++it) os << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

}  // namespace thinlayer
