#pragma once

// Symmetric second-order and fourth-order tensors in Voigt storage.
//
// Voigt order: (11,22,12) in 2D, (11,22,33,23,13,12) in 3D, (11) in 1D.
// Strain vectors carry engineering shears (2*e_ij), stress vectors do not,
// so sigma_voigt = V * eps_voigt and e:Ce = eps_voigt . V eps_voigt.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>

#include "errors.hpp"

namespace thinlayer {

template <int Dim>
inline constexpr int voigt_size = Dim * (Dim + 1) / 2;

template <int Dim>
constexpr std::array<std::pair<int, int>, voigt_size<Dim>> voigt_pairs() {
  static_assert(Dim >= 1 && Dim <= 3, "dimension must be 1, 2 or 3");
  if constexpr (Dim == 1) {
    return {{{0, 0}}};
  } else if constexpr (Dim == 2) {
    return {{{0, 0}, {1, 1}, {0, 1}}};
  } else {
    return {{{0, 0}, {1, 1}, {2, 2}, {1, 2}, {0, 2}, {0, 1}}};
  }
}

template <int Dim>
constexpr int voigt_index(int i, int j) {
  constexpr auto pairs = voigt_pairs<Dim>();
  if (i > j) std::swap(i, j);
  for (int a = 0; a < voigt_size<Dim>; ++a)
    if (pairs[a].first == i && pairs[a].second == j) return a;
  return -1;
}

template <int Dim>
class SymMat {
 public:
  static constexpr int N = voigt_size<Dim>;
  using Matrix = Eigen::Matrix<double, Dim, Dim>;
  using Voigt = Eigen::Matrix<double, N, 1>;

  SymMat() : m_(Matrix::Zero()) {}
  // The argument is symmetrized.
  explicit SymMat(const Matrix& m) : m_(0.5 * (m + m.transpose())) {}

  static SymMat zero() { return SymMat(); }
  static SymMat identity() { return SymMat(Matrix::Identity()); }

  static SymMat from_strain_voigt(const Voigt& v) {
    SymMat s;
    constexpr auto pairs = voigt_pairs<Dim>();
    for (int a = 0; a < N; ++a) {
      auto [i, j] = pairs[a];
      const double val = (i == j) ? v[a] : 0.5 * v[a];
      s.m_(i, j) = val;
      s.m_(j, i) = val;
    }
    return s;
  }
  static SymMat from_stress_voigt(const Voigt& v) {
    SymMat s;
    constexpr auto pairs = voigt_pairs<Dim>();
    for (int a = 0; a < N; ++a) {
      auto [i, j] = pairs[a];
      s.m_(i, j) = v[a];
      s.m_(j, i) = v[a];
    }
    return s;
  }

  Voigt strain_voigt() const {
    Voigt v;
    constexpr auto pairs = voigt_pairs<Dim>();
    for (int a = 0; a < N; ++a) {
      auto [i, j] = pairs[a];
      v[a] = (i == j) ? m_(i, j) : 2.0 * m_(i, j);
    }
    return v;
  }
  Voigt stress_voigt() const {
    Voigt v;
    constexpr auto pairs = voigt_pairs<Dim>();
    for (int a = 0; a < N; ++a) v[a] = m_(pairs[a].first, pairs[a].second);
    return v;
  }

  double operator()(int i, int j) const { return m_(i, j); }
  const Matrix& matrix() const { return m_; }

  double trace() const { return m_.trace(); }
  double contract(const SymMat& o) const { return (m_.array() * o.m_.array()).sum(); }
  double norm() const { return m_.norm(); }

  SymMat& operator+=(const SymMat& o) { m_ += o.m_; return *this; }
  SymMat& operator-=(const SymMat& o) { m_ -= o.m_; return *this; }
  SymMat& operator*=(double s) { m_ *= s; return *this; }
  friend SymMat operator+(SymMat a, const SymMat& b) { return a += b; }
  friend SymMat operator-(SymMat a, const SymMat& b) { return a -= b; }
  friend SymMat operator*(double s, SymMat a) { return a *= s; }
  friend SymMat operator*(SymMat a, double s) { return a *= s; }

 private:
  Matrix m_;
};

// M_ij = (e_i (x) e_j + e_j (x) e_i) / 2 with zero-based indices.
template <int Dim>
SymMat<Dim> strain_basis(int i, int j) {
  if (i < 0 || j < 0 || i >= Dim || j >= Dim) throw InputError("strain_basis: index out of range");
  typename SymMat<Dim>::Matrix m = SymMat<Dim>::Matrix::Zero();
  m(i, j) += 0.5;
  m(j, i) += 0.5;
  return SymMat<Dim>(m);
}

template <int Dim>
class ElasticTensor4 {
 public:
  static constexpr int N = voigt_size<Dim>;
  using VoigtMatrix = Eigen::Matrix<double, N, N>;

  ElasticTensor4() : v_(VoigtMatrix::Zero()) {}

  // Rejects Voigt matrices that are not symmetric (major symmetry).
  explicit ElasticTensor4(const VoigtMatrix& v) : v_(v) {
    const double scale = std::max(1.0, v.cwiseAbs().maxCoeff());
    if ((v - v.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw InputError("ElasticTensor4: Voigt matrix is not symmetric");
    v_ = 0.5 * (v + v.transpose());
  }

  // Builds from a component function c(i,j,k,l) assumed to carry the
  // minor symmetries; only the Voigt representatives are sampled.
  template <class F>
  static ElasticTensor4 from_components(F&& c) {
    VoigtMatrix v;
    constexpr auto pairs = voigt_pairs<Dim>();
    for (int a = 0; a < N; ++a)
      for (int b = 0; b < N; ++b)
        v(a, b) = c(pairs[a].first, pairs[a].second, pairs[b].first, pairs[b].second);
    return ElasticTensor4(0.5 * (v + v.transpose()));
  }

  const VoigtMatrix& voigt() const { return v_; }

  double operator()(int i, int j, int k, int l) const {
    return v_(voigt_index<Dim>(i, j), voigt_index<Dim>(k, l));
  }

  SymMat<Dim> apply(const SymMat<Dim>& e) const {
    return SymMat<Dim>::from_stress_voigt(v_ * e.strain_voigt());
  }

  // Matrix of the quadratic form m:Cm in an orthonormal basis of symmetric
  // matrices (shear rows and columns scaled by sqrt 2).
  VoigtMatrix mandel() const {
    Eigen::Matrix<double, N, 1> w;
    constexpr auto pairs = voigt_pairs<Dim>();
    for (int a = 0; a < N; ++a) w[a] = pairs[a].first == pairs[a].second ? 1.0 : std::sqrt(2.0);
    return w.asDiagonal() * v_ * w.asDiagonal();
  }

  ElasticTensor4& operator+=(const ElasticTensor4& o) { v_ += o.v_; return *this; }
  ElasticTensor4& operator*=(double s) { v_ *= s; return *this; }
  friend ElasticTensor4 operator+(ElasticTensor4 a, const ElasticTensor4& b) { return a += b; }
  friend ElasticTensor4 operator*(double s, ElasticTensor4 a) { return a *= s; }

 private:
  VoigtMatrix v_;
};

template <int Dim>
SymMat<Dim> apply_tensor(const ElasticTensor4<Dim>& c, const SymMat<Dim>& e) {
  return c.apply(e);
}

template <int Dim>
ElasticTensor4<Dim> isotropic_tensor(double lambda, double mu) {
  if (!(mu > 0.0)) throw InputError("isotropic_tensor: mu must be positive");
  if (!(lambda + 2.0 * mu / Dim > 0.0))
    throw InputError("isotropic_tensor: lambda + 2 mu / d must be positive");
  return ElasticTensor4<Dim>::from_components([&](int i, int j, int k, int l) {
    return lambda * (i == j) * (k == l) + mu * ((i == k) * (j == l) + (i == l) * (j == k));
  });
}

struct TensorClassReport {
  bool ok = false;
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
  std::string violation;  // empty when ok
};

// Checks alpha |m|^2 <= Cm:m and |Cm| <= beta |m| over symmetric m.
template <int Dim>
TensorClassReport verify_tensor_class(const ElasticTensor4<Dim>& c, double alpha, double beta) {
  TensorClassReport r;
  Eigen::SelfAdjointEigenSolver<typename ElasticTensor4<Dim>::VoigtMatrix> es(c.mandel());
  r.min_eigenvalue = es.eigenvalues().minCoeff();
  r.max_eigenvalue = es.eigenvalues().cwiseAbs().maxCoeff();
  std::ostringstream msg;
  if (!(alpha > 0.0 && alpha < beta)) {
    msg << "invalid bounds alpha=" << alpha << " beta=" << beta;
  } else if (r.min_eigenvalue < alpha) {
    msg << "coercivity: smallest eigenvalue " << r.min_eigenvalue << " < alpha " << alpha;
  } else if (r.max_eigenvalue > beta) {
    msg << "boundedness: operator norm " << r.max_eigenvalue << " > beta " << beta;
  }
  r.violation = msg.str();
  r.ok = r.violation.empty();
  return r;
}

// CSV: "# dimension=<d> convention=voigt-engineering-shear" then N rows.
template <int Dim>
void write_tensor_csv(std::ostream& os, const ElasticTensor4<Dim>& c) {
  os << "# dimension=" << Dim << " convention=voigt-engineering-shear\n";
  os << std::setprecision(17);
  for (int a = 0; a < ElasticTensor4<Dim>::N; ++a) {
    for (int b = 0; b < ElasticTensor4<Dim>::N; ++b) os << (b ? "," : "") << c.voigt()(a, b);
    os << '\n';
  }
}

template <int Dim>
ElasticTensor4<Dim> read_tensor_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InputError("read_tensor_csv: empty input");
  const std::string tag = "# dimension=" + std::to_string(Dim) + " ";
  if (line.rfind(tag, 0) != 0 || line.find("convention=voigt-engineering-shear") == std::string::npos)
    throw InputError("read_tensor_csv: unexpected header '" + line + "'");
  typename ElasticTensor4<Dim>::VoigtMatrix v;
  for (int a = 0; a < ElasticTensor4<Dim>::N; ++a) {
    if (!std::getline(is, line)) throw InputError("read_tensor_csv: truncated input");
    std::istringstream row(line);
    std::string cell;
    for (int b = 0; b < ElasticTensor4<Dim>::N; ++b) {
      if (!std::getline(row, cell, ',')) throw InputError("read_tensor_csv: short row");
      v(a, b) = std::stod(cell);
    }
  }
  return ElasticTensor4<Dim>(v);
}

}  // namespace thinlayer
