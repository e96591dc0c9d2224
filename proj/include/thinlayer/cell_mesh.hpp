#pragma once

// Structured voxel meshes: the perforated reference cell and, more
// generally, tensor-product grids with a per-element solid/region
// classifier (used for the micro-resolved layer as well).
//
// Axis 0 is the thickness direction. The cell occupies
// (-1/2, 1/2) x (0, 1)^(d-1).

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <type_traits>
#include <ostream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "errors.hpp"

namespace thinlayer {

template <int Dim>
using Point = Eigen::Matrix<double, Dim, 1>;

template <int Dim>
struct NoHole {};

template <int Dim>
struct EllipsoidHole {
  Point<Dim> center;
  Point<Dim> half_axes;
};

template <int Dim>
struct BoxHole {
  Point<Dim> center;
  Point<Dim> half_widths;
};

template <int Dim>
using HoleSpec = std::variant<NoHole<Dim>, EllipsoidHole<Dim>, BoxHole<Dim>>;

template <int Dim>
struct CellMeshSpec {
  int resolution = 8;  // voxels per unit length
  HoleSpec<Dim> hole = NoHole<Dim>{};
};

// True if the point lies in the open hole.
template <int Dim>
bool in_hole(const HoleSpec<Dim>& hole, const Point<Dim>& x) {
  return std::visit(
      [&](const auto& h) -> bool {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, NoHole<Dim>>) {
          return false;
        } else if constexpr (std::is_same_v<H, EllipsoidHole<Dim>>) {
          return ((x - h.center).array() / h.half_axes.array()).square().sum() < 1.0;
        } else {
          return ((x - h.center).array().abs() < h.half_widths.array()).all();
        }
      },
      hole);
}

// Bounding half-extents of the hole (zero for no hole).
template <int Dim>
std::pair<Point<Dim>, Point<Dim>> hole_bounds(const HoleSpec<Dim>& hole) {
  return std::visit(
      [](const auto& h) -> std::pair<Point<Dim>, Point<Dim>> {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, NoHole<Dim>>) {
          return {Point<Dim>::Zero(), Point<Dim>::Zero()};
        } else if constexpr (std::is_same_v<H, EllipsoidHole<Dim>>) {
          return {h.center, h.half_axes};
        } else {
          return {h.center, h.half_widths};
        }
      },
      hole);
}

enum class FaceKind { outer, hole };

template <int Dim>
struct BoundaryFace {
  int element = -1;
  int axis = 0;
  int side = 0;  // 0: lower coordinate, 1: upper coordinate
  FaceKind kind = FaceKind::outer;
  std::array<int, (1 << (Dim - 1))> nodes{};
};

enum class CellFace { s_plus, s_minus, hole_boundary, lateral };

template <int Dim>
CellFace cell_face_tag(const BoundaryFace<Dim>& f) {
  if (f.kind == FaceKind::hole) return CellFace::hole_boundary;
  if (f.axis == 0) return f.side == 1 ? CellFace::s_plus : CellFace::s_minus;
  return CellFace::lateral;
}

inline const char* to_string(CellFace t) {
  switch (t) {
    case CellFace::s_plus: return "S_plus";
    case CellFace::s_minus: return "S_minus";
    case CellFace::hole_boundary: return "hole_boundary";
    case CellFace::lateral: return "lateral";
  }
  return "?";
}

// Tensor-product grid restricted to solid elements. All grid elements are
// listed (with a solid flag); only nodes touched by a solid element exist.
template <int Dim>
struct GridMesh {
  static constexpr int kNodesPerElement = 1 << Dim;
  using ElementNodes = std::array<int, kNodesPerElement>;

  std::array<std::vector<double>, Dim> ticks;
  std::vector<Point<Dim>> nodes;
  std::vector<std::array<int, Dim>> node_index;
  std::vector<int> grid_to_node;  // -1 where the grid node is not part of the mesh

  std::vector<ElementNodes> elements;  // local node k: bit a of k is the offset along axis a
  std::vector<std::array<int, Dim>> element_index;
  std::vector<char> solid;
  std::vector<int> region;

  std::vector<BoundaryFace<Dim>> faces;
  std::vector<std::pair<int, int>> periodic_pairs;  // (master, slave)

  int num_nodes() const { return static_cast<int>(nodes.size()); }
  int num_elements() const { return static_cast<int>(elements.size()); }
  int num_solid() const {
    int n = 0;
    for (char s : solid) n += s;
    return n;
  }
  int cells_along(int axis) const { return static_cast<int>(ticks[axis].size()) - 1; }

  Point<Dim> element_size(int e) const {
    Point<Dim> h;
    for (int a = 0; a < Dim; ++a) h[a] = ticks[a][element_index[e][a] + 1] - ticks[a][element_index[e][a]];
    return h;
  }
  Point<Dim> element_lower(int e) const {
    Point<Dim> x;
    for (int a = 0; a < Dim; ++a) x[a] = ticks[a][element_index[e][a]];
    return x;
  }
  Point<Dim> element_center(int e) const { return element_lower(e) + 0.5 * element_size(e); }
  double element_volume(int e) const { return element_size(e).prod(); }

  int grid_node_id(const std::array<int, Dim>& idx) const {
    int id = 0;
    for (int a = Dim - 1; a >= 0; --a) id = id * static_cast<int>(ticks[a].size()) + idx[a];
    return id;
  }
  int node_at(const std::array<int, Dim>& idx) const { return grid_to_node[grid_node_id(idx)]; }
};

inline std::vector<double> uniform_ticks(double lo, double hi, int n) {
  std::vector<double> t(n + 1);
  for (int i = 0; i <= n; ++i) t[i] = (i == n) ? hi : lo + (hi - lo) * i / n;
  return t;
}

// Builds a grid mesh. `classify(center)` returns the region id of an
// element, or a negative value for a removed element.
template <int Dim>
GridMesh<Dim> build_grid_mesh(std::array<std::vector<double>, Dim> ticks,
                              const std::function<int(const Point<Dim>&)>& classify) {
  GridMesh<Dim> m;
  m.ticks = std::move(ticks);
  std::array<int, Dim> ne{}, nn{};
  int total_e = 1, total_n = 1;
  for (int a = 0; a < Dim; ++a) {
    ne[a] = static_cast<int>(m.ticks[a].size()) - 1;
    if (ne[a] < 1) throw InputError("build_grid_mesh: each axis needs at least one cell");
    nn[a] = ne[a] + 1;
    total_e *= ne[a];
    total_n *= nn[a];
  }

  auto unravel = [](int id, const std::array<int, Dim>& n) {
    std::array<int, Dim> idx{};
    for (int a = 0; a < Dim; ++a) {
      idx[a] = id % n[a];
      id /= n[a];
    }
    return idx;
  };

  m.elements.resize(total_e);
  m.element_index.resize(total_e);
  m.solid.resize(total_e);
  m.region.resize(total_e);
  std::vector<char> used(total_n, 0);
  for (int e = 0; e < total_e; ++e) {
    m.element_index[e] = unravel(e, ne);
    const int r = classify(m.element_center(e));
    m.solid[e] = r >= 0;
    m.region[e] = r;
    for (int k = 0; k < GridMesh<Dim>::kNodesPerElement; ++k) {
      std::array<int, Dim> idx = m.element_index[e];
      for (int a = 0; a < Dim; ++a) idx[a] += (k >> a) & 1;
      m.elements[e][k] = m.grid_node_id(idx);
      if (m.solid[e]) used[m.elements[e][k]] = 1;
    }
  }

  m.grid_to_node.assign(total_n, -1);
  for (int g = 0; g < total_n; ++g) {
    if (!used[g]) continue;
    m.grid_to_node[g] = static_cast<int>(m.nodes.size());
    auto idx = unravel(g, nn);
    Point<Dim> x;
    for (int a = 0; a < Dim; ++a) x[a] = m.ticks[a][idx[a]];
    m.nodes.push_back(x);
    m.node_index.push_back(idx);
  }
  for (auto& el : m.elements)
    for (auto& n : el) n = m.grid_to_node[n];

  // Boundary faces of the solid region, in element order then (axis, side).
  for (int e = 0; e < total_e; ++e) {
    if (!m.solid[e]) continue;
    for (int a = 0; a < Dim; ++a)
      for (int side = 0; side < 2; ++side) {
        std::array<int, Dim> nb = m.element_index[e];
        nb[a] += side ? 1 : -1;
        FaceKind kind;
        if (nb[a] < 0 || nb[a] >= ne[a]) {
          kind = FaceKind::outer;
        } else {
          int nid = 0;
          for (int b = Dim - 1; b >= 0; --b) nid = nid * ne[b] + nb[b];
          if (m.solid[nid]) continue;
          kind = FaceKind::hole;
        }
        BoundaryFace<Dim> f;
        f.element = e;
        f.axis = a;
        f.side = side;
        f.kind = kind;
        int c = 0;
        for (int k = 0; k < GridMesh<Dim>::kNodesPerElement; ++k)
          if (((k >> a) & 1) == side) f.nodes[c++] = m.elements[e][k];
        m.faces.push_back(f);
      }
  }
  return m;
}

// Pairs every node on an upper face of the periodic axes with the node
// obtained by wrapping all periodic indices to zero (corners chain to a
// single master).
template <int Dim>
std::vector<std::pair<int, int>> periodic_pairing(const GridMesh<Dim>& m, const std::vector<int>& periodic_axes) {
  std::vector<std::pair<int, int>> pairs;
  for (int n = 0; n < m.num_nodes(); ++n) {
    std::array<int, Dim> idx = m.node_index[n];
    bool slave = false;
    for (int a : periodic_axes)
      if (idx[a] == m.cells_along(a)) {
        idx[a] = 0;
        slave = true;
      }
    if (!slave) continue;
    const int master = m.node_at(idx);
    if (master < 0) throw InputError("periodic_pairing: unmatched lateral node");
    pairs.emplace_back(master, n);
  }
  return pairs;
}

template <int Dim>
void validate_cell_spec(const CellMeshSpec<Dim>& spec) {
  if (spec.resolution < 2) throw InputError("cell mesh: resolution must be at least 2");
  auto [c, r] = hole_bounds(spec.hole);
  if (std::holds_alternative<NoHole<Dim>>(spec.hole)) return;
  if ((r.array() <= 0.0).any()) throw InputError("cell mesh: hole extents must be positive");
  const double h = 1.0 / spec.resolution;
  const double tol = 1e-12;
  for (int a = 0; a < Dim; ++a) {
    const double lo = a == 0 ? -0.5 : 0.0, hi = a == 0 ? 0.5 : 1.0;
    if (c[a] - r[a] < lo + tol || c[a] + r[a] > hi - tol)
      throw InputError("cell mesh: hole closure must lie strictly inside the cell (axis " + std::to_string(a) + ")");
    if (c[a] - r[a] < lo + h - tol || c[a] + r[a] > hi - h + tol)
      throw InputError("cell mesh: resolution too coarse to separate the hole from the cell faces (axis " +
                       std::to_string(a) + ")");
  }
}

template <int Dim>
GridMesh<Dim> build_cell_mesh(const CellMeshSpec<Dim>& spec) {
  validate_cell_spec(spec);
  std::array<std::vector<double>, Dim> ticks;
  ticks[0] = uniform_ticks(-0.5, 0.5, spec.resolution);
  for (int a = 1; a < Dim; ++a) ticks[a] = uniform_ticks(0.0, 1.0, spec.resolution);
  const HoleSpec<Dim> hole = spec.hole;
  GridMesh<Dim> m = build_grid_mesh<Dim>(ticks, [&](const Point<Dim>& x) { return in_hole(hole, x) ? -1 : 0; });
  std::vector<int> lateral;
  for (int a = 1; a < Dim; ++a) lateral.push_back(a);
  m.periodic_pairs = periodic_pairing(m, lateral);
  return m;
}

// Total volume of solid elements.
template <int Dim>
double cell_measure(const GridMesh<Dim>& m) {
  double v = 0.0;
  for (int e = 0; e < m.num_elements(); ++e)
    if (m.solid[e]) v += m.element_volume(e);
  return v;
}

// Plain-text export: nodes, elements (all, with solid flag and region),
// boundary faces with tags, periodic pairs.
template <int Dim>
void write_mesh_text(std::ostream& os, const GridMesh<Dim>& m) {
  os << std::setprecision(17);
  os << "# nodes " << m.num_nodes() << " dimension " << Dim << "\n";
  for (int n = 0; n < m.num_nodes(); ++n) {
    os << n;
    for (int a = 0; a < Dim; ++a) os << ' ' << m.nodes[n][a];
    os << '\n';
  }
  os << "# elements " << m.num_elements() << "\n";
  for (int e = 0; e < m.num_elements(); ++e) {
    os << e;
    for (int n : m.elements[e]) os << ' ' << n;
    os << ' ' << int(m.solid[e]) << ' ' << m.region[e] << '\n';
  }
  os << "# faces " << m.faces.size() << "\n";
  for (const auto& f : m.faces) {
    os << f.element << ' ' << f.axis << ' ' << f.side << ' ' << to_string(cell_face_tag(f));
    for (int n : f.nodes) os << ' ' << n;
    os << '\n';
  }
  os << "# periodic " << m.periodic_pairs.size() << "\n";
  for (auto [a, b] : m.periodic_pairs) os << a << ' ' << b << '\n';
}

}  // namespace thinlayer
