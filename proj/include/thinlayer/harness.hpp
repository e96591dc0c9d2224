#pragma once

// Configuration-driven pipeline. One JSON document describes the cell, the
// dynamics grid, the macro scenario and the micro ladder; a command selects
// which stages run (cell -> tensors / kernels -> macro -> micro -> compare).
// Results are collected in memory as a report and then emitted as a CSV
// bundle plus a plain-text summary with the invariant ledger.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "micro.hpp"

namespace thinlayer::harness {

using Json = nlohmann::json;

inline constexpr const char* kToolkitVersion = "1.0.0";

// Output directory or file that cannot be written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- schema

// Typed view of one JSON object. Every key read is recorded; finish()
// rejects the ones that were never asked for.
class Node {
 public:
  Node(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(path_.empty() ? "/" : path_, "expected an object");
  }

  const std::string& path() const { return path_; }
  std::string key_path(const std::string& key) const { return path_ + "/" + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  Node child(const std::string& key) const { return Node(get(key), key_path(key)); }

  double number(const std::string& key, std::optional<double> fallback = {}) const {
    if (!has(key)) return required(key, fallback);
    const Json& v = get(key);
    if (!v.is_number()) throw SchemaError(key_path(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw SchemaError(key_path(key), "expected a finite number");
    return x;
  }

  int integer(const std::string& key, std::optional<int> fallback = {}) const {
    if (!has(key)) return required(key, fallback);
    const Json& v = get(key);
    if (!v.is_number_integer()) throw SchemaError(key_path(key), "expected an integer");
    return v.get<int>();
  }

  bool boolean(const std::string& key, std::optional<bool> fallback = {}) const {
    if (!has(key)) return required(key, fallback);
    const Json& v = get(key);
    if (!v.is_boolean()) throw SchemaError(key_path(key), "expected true or false");
    return v.get<bool>();
  }

  std::string choice(const std::string& key, const std::vector<std::string>& allowed,
                     std::optional<std::string> fallback = {}) const {
    if (!has(key)) return required(key, fallback);
    const Json& v = get(key);
    if (!v.is_string()) throw SchemaError(key_path(key), "expected a string");
    const std::string s = v.get<std::string>();
    if (std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw SchemaError(key_path(key), "unknown value '" + s + "' (expected one of " + list + ")");
    }
    return s;
  }

  // Array of numbers; size < 0 accepts any non-empty length.
  std::vector<double> numbers(const std::string& key, int size = -1) const {
    const Json& v = get(key);
    if (!v.is_array()) throw SchemaError(key_path(key), "expected an array of numbers");
    if (size >= 0 && static_cast<int>(v.size()) != size)
      throw SchemaError(key_path(key), "expected " + std::to_string(size) + " entries");
    if (size < 0 && v.empty()) throw SchemaError(key_path(key), "expected a non-empty array");
    std::vector<double> out;
    for (size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw SchemaError(key_path(key) + "/" + std::to_string(i), "expected a number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }

  const Json& get(const std::string& key) const {
    if (!has(key)) throw SchemaError(key_path(key), "missing required key");
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw SchemaError(key_path(it.key()), "unknown key");
  }

 private:
  template <class T>
  T required(const std::string& key, const std::optional<T>& fallback) const {
    if (!fallback) throw SchemaError(key_path(key), "missing required key");
    used_.insert(key);
    return *fallback;
  }

  const Json& j_;
  std::string path_;
  mutable std::set<std::string> used_;
};

// Material in Voigt form (engineering shear) for a given dimension.
struct MaterialSpec {
  Eigen::MatrixXd voigt;
  double density = 1.0;
};

struct HoleConfig {
  std::string shape = "none";  // none | ellipsoid | box
  std::vector<double> center, half_axes;
};

struct CellConfig {
  int resolution = 8;
  HoleConfig hole;
  MaterialSpec material;
};

struct DynamicsConfig {
  TimeGrid grid;
  LiftingKind lifting = LiftingKind::linear;
};

// sin^2 pulse of the given duration on x1 = -L.
struct PulseSpec {
  Point<2> amplitude = Point<2>::Zero();
  double duration = 1.0;
};

// f(t, x) = amplitude * profile(x2) * time(t).
struct LayerForceSpec {
  Point<2> amplitude = Point<2>::Zero();
  std::string profile = "uniform";  // uniform | sine
  std::string time = "constant";    // constant | ramp | harmonic
  double frequency = 1.0;
};

struct MacroSection {
  int gamma = 1;
  MacroMode mode = MacroMode::normal_1d;
  double length = 4.0, width = 1.0;
  int elements_normal = 80, elements_lateral = 1;
  TimeGrid grid;
  std::array<MaterialSpec, 2> bulk;  // [0]: x1 > 0, [1]: x1 < 0
  std::optional<PulseSpec> end_traction;
  std::optional<LayerForceSpec> layer_force;
  std::vector<Point<2>> probes;
  bool reference = false;  // gamma = 1: also run the monolithic two-scale reference
};

struct MicroSection {
  std::vector<double> epsilons;
  double bulk_h_max = 0.1, grading = 1.5;
  bool unscaled_layer = false;
  double scaling_warning = 1e3;
  double exclusion = 0.125;
};

struct RunConfig {
  Json raw;
  int dimension = 2;
  PlateNormalization normalization = PlateNormalization::volume_normalized;
  std::optional<CellConfig> cell;
  std::optional<DynamicsConfig> dynamics;
  std::optional<MacroSection> macro;
  std::optional<MicroSection> micro;
  std::optional<std::string> output_directory;

  std::string hash() const { return hex64(fnv1a(raw.dump())); }
  std::string section_hash(const char* key) const { return raw.contains(key) ? hex64(fnv1a(raw[key].dump())) : "none"; }
};

namespace detail {

inline Eigen::MatrixXd isotropic_voigt(int dim, double lambda, double mu) {
  if (dim == 2) return isotropic_tensor<2>(lambda, mu).voigt();
  return isotropic_tensor<3>(lambda, mu).voigt();
}

inline MaterialSpec parse_material(const Node& n, int dim) {
  MaterialSpec m;
  m.density = n.number("density", 1.0);
  if (!(m.density > 0.0)) throw SchemaError(n.key_path("density"), "must be positive");
  const int nv = dim * (dim + 1) / 2;
  try {
    if (n.has("voigt")) {
      if (n.has("lambda") || n.has("mu")) throw SchemaError(n.path(), "give either voigt or lambda/mu, not both");
      const Json& rows = n.get("voigt");
      if (!rows.is_array() || static_cast<int>(rows.size()) != nv)
        throw SchemaError(n.key_path("voigt"), "expected " + std::to_string(nv) + " rows");
      m.voigt.resize(nv, nv);
      for (int a = 0; a < nv; ++a) {
        if (!rows[a].is_array() || static_cast<int>(rows[a].size()) != nv)
          throw SchemaError(n.key_path("voigt") + "/" + std::to_string(a), "expected " + std::to_string(nv) + " entries");
        for (int b = 0; b < nv; ++b) {
          if (!rows[a][b].is_number()) throw SchemaError(n.key_path("voigt"), "expected numbers");
          m.voigt(a, b) = rows[a][b].get<double>();
        }
      }
      if (dim == 2) {
        ElasticTensor4<2> c(m.voigt);
      } else {
        ElasticTensor4<3> c(m.voigt);
      }
    } else {
      m.voigt = isotropic_voigt(dim, n.number("lambda"), n.number("mu"));
    }
  } catch (const InputError& e) {
    throw SchemaError(n.path(), e.what());
  }
  n.finish();
  return m;
}

inline TimeGrid parse_grid(const Node& n, std::optional<TimeGrid> fallback = {}) {
  TimeGrid g;
  g.t_final = n.number("t_final", fallback ? std::optional<double>(fallback->t_final) : std::nullopt);
  g.steps = n.integer("steps", fallback ? std::optional<int>(fallback->steps) : std::nullopt);
  if (!(g.t_final > 0.0)) throw SchemaError(n.key_path("t_final"), "must be positive");
  if (g.steps < 1) throw SchemaError(n.key_path("steps"), "must be at least 1");
  return g;
}

inline Point<2> point2(const Node& n, const std::string& key) {
  const auto v = n.numbers(key, 2);
  return Point<2>(v[0], v[1]);
}

template <int Dim>
CellMeshSpec<Dim> cell_spec(const CellConfig& c) {
  CellMeshSpec<Dim> s;
  s.resolution = c.resolution;
  if (c.hole.shape != "none") {
    Point<Dim> center, half;
    for (int a = 0; a < Dim; ++a) {
      center[a] = c.hole.center[a];
      half[a] = c.hole.half_axes[a];
    }
    if (c.hole.shape == "ellipsoid")
      s.hole = EllipsoidHole<Dim>{center, half};
    else
      s.hole = BoxHole<Dim>{center, half};
  }
  return s;
}

inline CellConfig parse_cell(const Node& n, int dim) {
  CellConfig c;
  c.resolution = n.integer("resolution", 8);
  if (n.has("hole")) {
    const Node h = n.child("hole");
    c.hole.shape = h.choice("shape", {"none", "ellipsoid", "box"});
    if (c.hole.shape != "none") {
      c.hole.center = h.numbers("center", dim);
      c.hole.half_axes = h.numbers("half_axes", dim);
    }
    h.finish();
  }
  c.material = parse_material(n.child("material"), dim);
  n.finish();
  try {
    if (dim == 2)
      validate_cell_spec(cell_spec<2>(c));
    else
      validate_cell_spec(cell_spec<3>(c));
  } catch (const InputError& e) {
    throw SchemaError(n.path(), e.what());
  }
  return c;
}

inline MacroSection parse_macro(const Node& n, const std::optional<DynamicsConfig>& dyn) {
  MacroSection m;
  m.gamma = n.integer("gamma");
  if (m.gamma != 1 && m.gamma != -1 && m.gamma != -3) throw SchemaError(n.key_path("gamma"), "must be 1, -1 or -3");
  m.mode = n.choice("mode", {"normal_1d", "plane_2d"}, std::string("normal_1d")) == "normal_1d" ? MacroMode::normal_1d
                                                                                                : MacroMode::plane_2d;
  m.length = n.number("length", 4.0);
  m.width = n.number("width", 1.0);
  if (!(m.length > 0.0) || !(m.width > 0.0)) throw SchemaError(n.path(), "length and width must be positive");
  m.elements_normal = n.integer("elements_normal", 80);
  m.elements_lateral = n.integer("elements_lateral", m.mode == MacroMode::normal_1d ? 1 : 8);
  if (m.elements_normal < 1 || m.elements_lateral < 1) throw SchemaError(n.path(), "element counts must be positive");
  m.grid = parse_grid(n, dyn ? std::optional<TimeGrid>(dyn->grid) : std::nullopt);
  m.bulk[0] = parse_material(n.child("bulk_plus"), 2);
  m.bulk[1] = parse_material(n.child("bulk_minus"), 2);
  if (n.has("end_traction")) {
    const Node p = n.child("end_traction");
    PulseSpec s;
    s.amplitude = point2(p, "amplitude");
    s.duration = p.number("duration", 1.0);
    if (!(s.duration > 0.0)) throw SchemaError(p.key_path("duration"), "must be positive");
    p.finish();
    m.end_traction = s;
  }
  if (n.has("layer_force")) {
    const Node p = n.child("layer_force");
    LayerForceSpec s;
    s.amplitude = point2(p, "amplitude");
    s.profile = p.choice("profile", {"uniform", "sine"}, std::string("uniform"));
    s.time = p.choice("time", {"constant", "ramp", "harmonic"}, std::string("constant"));
    s.frequency = p.number("frequency", 1.0);
    p.finish();
    m.layer_force = s;
  }
  if (n.has("probes")) {
    const Json& arr = n.get("probes");
    if (!arr.is_array()) throw SchemaError(n.key_path("probes"), "expected an array of [x1, x2] pairs");
    for (size_t i = 0; i < arr.size(); ++i) {
      const std::string path = n.key_path("probes") + "/" + std::to_string(i);
      if (!arr[i].is_array() || arr[i].size() != 2 || !arr[i][0].is_number() || !arr[i][1].is_number())
        throw SchemaError(path, "expected [x1, x2]");
      const Point<2> x(arr[i][0].get<double>(), arr[i][1].get<double>());
      if (std::abs(x[0]) > m.length || x[1] < 0.0 || x[1] > m.width) throw SchemaError(path, "probe outside the domain");
      m.probes.push_back(x);
    }
  }
  m.reference = n.boolean("reference", false);
  if (m.reference && (m.gamma != 1 || m.mode != MacroMode::normal_1d))
    throw SchemaError(n.key_path("reference"), "the two-scale reference exists for gamma = 1 in normal_1d mode only");
  if (m.layer_force && m.gamma == 1)
    throw SchemaError(n.key_path("layer_force"), "a layer force enters the gamma = -1 and -3 models only");
  if (m.mode == MacroMode::plane_2d && m.elements_lateral < 2)
    throw SchemaError(n.key_path("elements_lateral"), "plane_2d needs at least two lateral elements");
  n.finish();
  return m;
}

inline MicroSection parse_micro(const Node& n, const MacroSection& macro) {
  MicroSection m;
  m.epsilons = n.numbers("epsilons");
  for (size_t i = 0; i < m.epsilons.size(); ++i) {
    const std::string path = n.key_path("epsilons") + "/" + std::to_string(i);
    const double e = m.epsilons[i];
    if (!(e > 0.0) || !(e < macro.length)) throw SchemaError(path, "need 0 < epsilon < macro length");
    try {
      cells_across(macro.width, e);
    } catch (const InputError& err) {
      throw SchemaError(path, err.what());
    }
  }
  m.bulk_h_max = n.number("bulk_h_max", 0.1);
  m.grading = n.number("grading", 1.5);
  if (!(m.bulk_h_max > 0.0) || !(m.grading >= 1.0)) throw SchemaError(n.path(), "need bulk_h_max > 0 and grading >= 1");
  m.unscaled_layer = n.boolean("unscaled_layer", false);
  m.scaling_warning = n.number("scaling_warning", 1e3);
  m.exclusion = n.number("exclusion", 0.125);
  if (!(m.exclusion >= 0.0) || !(m.exclusion < macro.length)) throw SchemaError(n.key_path("exclusion"), "need 0 <= exclusion < length");
  n.finish();
  return m;
}

}  // namespace detail

inline RunConfig parse_config(const Json& j) {
  RunConfig c;
  c.raw = j;
  const Node root(j, "");
  c.dimension = root.integer("dimension", 2);
  if (c.dimension != 2 && c.dimension != 3) throw SchemaError("/dimension", "must be 2 or 3");
  c.normalization = root.choice("normalization", {"volume_normalized", "unnormalized"}, std::string("volume_normalized")) ==
                            "volume_normalized"
                        ? PlateNormalization::volume_normalized
                        : PlateNormalization::unnormalized;
  if (root.has("cell")) c.cell = detail::parse_cell(root.child("cell"), c.dimension);
  if (root.has("dynamics")) {
    const Node d = root.child("dynamics");
    DynamicsConfig dc;
    dc.grid = detail::parse_grid(d);
    dc.lifting = d.choice("lifting", {"linear", "elastostatic"}, std::string("linear")) == "linear" ? LiftingKind::linear
                                                                                                 : LiftingKind::elastostatic;
    d.finish();
    c.dynamics = dc;
  }
  if (root.has("macro")) {
    if (c.dimension != 2) throw SchemaError("/macro", "macro scenarios require dimension 2");
    c.macro = detail::parse_macro(root.child("macro"), c.dynamics);
    if (c.macro->gamma == 1 && c.dynamics) {
      const TimeGrid& k = c.dynamics->grid;
      const TimeGrid& g = c.macro->grid;
      if (std::abs(k.t_final - g.t_final) > 1e-12 * g.t_final || k.steps % g.steps != 0)
        throw SchemaError("/macro/steps", "macro grid must span the kernel horizon with a step that is a multiple of the kernel step");
    }
  }
  if (root.has("micro")) {
    if (!c.macro) throw SchemaError("/micro", "the micro ladder takes its scenario from the macro section, which is missing");
    c.micro = detail::parse_micro(root.child("micro"), *c.macro);
  }
  if (root.has("outputs")) {
    const Node o = root.child("outputs");
    if (o.has("directory")) {
      const Json& d = o.get("directory");
      if (!d.is_string()) throw SchemaError("/outputs/directory", "expected a string");
      c.output_directory = d.get<std::string>();
    }
    o.finish();
  }
  root.finish();
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw SchemaError("/", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("/", "cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------- report

struct Invariant {
  std::string name;
  std::string detail;
  bool pass = false;
};

struct Artifact {
  std::string name;  // file name inside the output directory
  std::string content;
};

struct RunReport {
  std::vector<std::pair<std::string, std::string>> provenance;
  std::vector<std::pair<std::string, std::string>> sections;  // title, text
  std::vector<Invariant> ledger;
  std::vector<Artifact> artifacts;
  std::vector<std::string> warnings;

  bool all_passed() const {
    return std::all_of(ledger.begin(), ledger.end(), [](const Invariant& i) { return i.pass; });
  }
  std::string hash() const {
    std::uint64_t h = fnv1a("");
    for (const auto& a : artifacts) h = fnv1a(a.content, fnv1a(a.name, h));
    return hex64(h);
  }
  bool has_artifact(const std::string& name) const {
    return std::any_of(artifacts.begin(), artifacts.end(), [&](const Artifact& a) { return a.name == name; });
  }
  const Artifact& artifact(const std::string& name) const {
    for (const auto& a : artifacts)
      if (a.name == name) return a;
    throw InputError("report: no artifact named " + name);
  }
};

enum class Command { cell, tensors, kernels, macro, micro, converge, report };

inline const char* to_string(Command c) {
  switch (c) {
    case Command::cell: return "cell";
    case Command::tensors: return "tensors";
    case Command::kernels: return "kernels";
    case Command::macro: return "macro";
    case Command::micro: return "micro";
    case Command::converge: return "converge";
    case Command::report: return "report";
  }
  return "?";
}

struct StagePlan {
  bool cell = false, tensors = false, kernels = false, macro = false, micro = false, compare = false;
  bool any() const { return cell || tensors || kernels || macro || micro || compare; }
};

// Stages requested by a command, with their dependencies. Missing sections
// required by an explicit command are schema errors; `report` runs whatever
// the config describes.
inline StagePlan plan_stages(Command cmd, const RunConfig& c) {
  auto need = [&](bool present, const char* key) {
    if (!present)
      throw SchemaError(std::string("/") + key, std::string("required by the '") + to_string(cmd) + "' command");
  };
  StagePlan p;
  auto macro_deps = [&] {
    need(c.cell.has_value(), "cell");
    p.macro = true;
    if (c.macro->gamma == 1)
      p.kernels = true;
    else
      p.tensors = true;
  };
  switch (cmd) {
    case Command::cell:
      need(c.cell.has_value(), "cell");
      p.cell = true;
      break;
    case Command::tensors:
      need(c.cell.has_value(), "cell");
      p.tensors = true;
      break;
    case Command::kernels:
      need(c.cell.has_value(), "cell");
      need(c.dynamics.has_value(), "dynamics");
      p.kernels = true;
      break;
    case Command::macro:
      need(c.macro.has_value(), "macro");
      macro_deps();
      break;
    case Command::micro:
      need(c.micro.has_value(), "micro");
      need(c.cell.has_value(), "cell");
      p.micro = true;
      break;
    case Command::converge:
      need(c.micro.has_value(), "micro");
      macro_deps();
      p.micro = p.compare = true;
      break;
    case Command::report:
      if (c.cell) p.tensors = true;
      if (c.cell && c.dynamics) p.kernels = true;
      if (c.cell && c.macro) macro_deps();
      if (c.cell && c.micro) p.micro = p.compare = true;
      break;
  }
  return p;
}

struct RunOptions {
  std::string mesh_out;     // cell mesh text export
  std::string dump_system;  // cell stiffness in coordinate format
};

namespace detail {

inline std::string num(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline std::string sci(double x, int digits = 4) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(digits) << x;
  return os.str();
}

inline std::string hole_text(const HoleConfig& h) {
  if (h.shape == "none") return "none";
  std::string s = h.shape + " center=";
  for (size_t a = 0; a < h.center.size(); ++a) s += (a ? ";" : "") + num(h.center[a]);
  s += " half_axes=";
  for (size_t a = 0; a < h.half_axes.size(); ++a) s += (a ? ";" : "") + num(h.half_axes[a]);
  return s;
}

inline BulkMaterial bulk_material(const MaterialSpec& m) {
  return {ElasticTensor4<2>(Eigen::Matrix3d(m.voigt)), m.density};
}

template <int Dim>
CellMaterial<Dim> cell_material(const MaterialSpec& m) {
  using VM = typename ElasticTensor4<Dim>::VoigtMatrix;
  return homogeneous_material(ElasticTensor4<Dim>(VM(m.voigt)), m.density);
}

inline TimeFn pulse_fn(const PulseSpec& s) {
  return [s](double t) -> Point<2> {
    if (t >= s.duration) return Point<2>::Zero();
    const double q = std::sin(M_PI * t / s.duration);
    return q * q * s.amplitude;
  };
}

inline SpaceTimeFn layer_force_fn(const LayerForceSpec& s, double width) {
  return [s, width](double t, const Point<2>& x) -> Point<2> {
    const double space = s.profile == "sine" ? std::sin(M_PI * x[1] / width) : 1.0;
    const double time = s.time == "ramp" ? t : s.time == "harmonic" ? std::sin(s.frequency * t) : 1.0;
    return space * time * s.amplitude;
  };
}

inline MacroConfig macro_config(const MacroSection& m) {
  MacroConfig c;
  c.mode = m.mode;
  c.gamma = m.gamma;
  c.bulk = {bulk_material(m.bulk[0]), bulk_material(m.bulk[1])};
  c.length = m.length;
  c.width = m.width;
  c.elements_normal = m.elements_normal;
  c.elements_lateral = m.mode == MacroMode::normal_1d ? 1 : m.elements_lateral;
  c.grid = m.grid;
  if (m.end_traction) c.end_traction = pulse_fn(*m.end_traction);
  if (m.layer_force) c.layer_force = layer_force_fn(*m.layer_force, m.width);
  c.probes = m.probes;
  return c;
}

// Records a threshold check in the ledger.
inline void check(RunReport& r, std::string name, double value, double tol, bool strict = false) {
  const bool pass = strict ? value < tol : value <= tol;
  r.ledger.push_back({std::move(name), sci(value) + (strict ? " < " : " <= ") + sci(tol, 1), pass});
}

// Re-throws stage failures with the stage name in front.
template <class F>
auto run_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const SchemaError&) {
    throw;
  } catch (const InputError& e) {
    throw InputError(std::string("stage ") + name + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("stage ") + name + ": " + e.what());
  }
}

template <int Dim>
std::string tensors_csv(const EffectiveCoefficients<Dim>& e) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# dimension=" << Dim << " normalization=" << to_string(e.normalization)
     << " convention=voigt-engineering-shear\n";
  os << "quantity,row,col,value\n";
  auto block = [&](const char* name, const auto& m) {
    for (int a = 0; a < m.rows(); ++a)
      for (int b = 0; b < m.cols(); ++b) os << name << ',' << a + 1 << ',' << b + 1 << ',' << m(a, b) << '\n';
  };
  block("A_star", e.A_star.voigt());
  block("a_star", e.a_star.voigt());
  block("b_star", e.b_star);
  block("c_star", e.c_star.voigt());
  os << "rho_bar,0,0," << e.rho_bar << '\n';
  os << "cell_volume,0,0," << e.cell_volume << '\n';
  return os.str();
}

template <class M>
std::string matrix_text(const M& m) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (int a = 0; a < m.rows(); ++a) {
    os << "    ";
    for (int b = 0; b < m.cols(); ++b) os << std::setw(18) << m(a, b);
    os << '\n';
  }
  return os.str();
}

template <int Dim>
void tensor_invariants(RunReport& r, const EffectiveCoefficients<Dim>& e) {
  constexpr int NP = EffectiveCoefficients<Dim>::NP;
  const double a_min = verify_tensor_class(e.A_star, 1e-300, 1e300).min_eigenvalue;
  r.ledger.push_back({"A_star positive definite", "min eigenvalue " + sci(a_min), a_min > 0.0});
  const double c_min = verify_tensor_class(e.c_star, 1e-300, 1e300).min_eigenvalue;
  r.ledger.push_back({"c_star positive definite", "min eigenvalue " + sci(c_min), c_min > 0.0});
  Eigen::Matrix<double, 2 * NP, 2 * NP> plate;
  plate << e.a_star.voigt(), e.b_star.transpose(), e.b_star, e.c_star.voigt();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 2 * NP, 2 * NP>> es(plate);
  const double p_min = es.eigenvalues().minCoeff();
  r.ledger.push_back({"plate energy (a*, b*, c*) coercive", "min eigenvalue " + sci(p_min), p_min > 0.0});
  const double scale = e.normalization == PlateNormalization::volume_normalized ? 1.0 / e.cell_volume : 1.0;
  check(r, "a_star consistent with A_star and normalization",
        (e.a_star.voigt() - scale * e.A_star.voigt()).cwiseAbs().maxCoeff() / e.A_star.voigt().cwiseAbs().maxCoeff(),
        1e-14);
  r.ledger.push_back({"rho_bar positive", "rho_bar " + sci(e.rho_bar), e.rho_bar > 0.0});
}

template <int Dim>
void kernel_invariants(RunReport& r, const MemoryKernelTable<Dim>& t, std::ostringstream& text) {
  double f0 = 0.0, gmax = 0.0, fmax = 0.0, m0max = 0.0, m0asym = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      f0 = std::max(f0, t.F[a][b][0].cwiseAbs().maxCoeff());
      for (const auto& g : t.G[a][b]) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
      for (const auto& f : t.F[a][b]) fmax = std::max(fmax, f.cwiseAbs().maxCoeff());
      m0max = std::max(m0max, t.M0[a][b].cwiseAbs().maxCoeff());
      m0asym = std::max(m0asym, (t.M0[a][b] - t.M0[b][a].transpose()).cwiseAbs().maxCoeff());
    }
  text << "  dt " << t.dt() << ", T " << t.grid.t_final << ", steps " << t.steps() << "\n";
  text << "  max |G| " << sci(gmax) << ", max |F| " << sci(fmax) << ", max |F(0)| " << sci(f0) << ", max |M0| "
       << sci(m0max) << "\n";
  r.ledger.push_back({"F(0) = 0 exactly", "max |F(0)| " + sci(f0), f0 == 0.0});
  check(r, "added mass symmetric", m0max > 0.0 ? m0asym / m0max : 0.0, 1e-10);
}

template <int Dim>
MemoryKernelTable<Dim> compute_kernels(const GridMesh<Dim>& mesh, const CellMaterial<Dim>& mat, const TimeGrid& g,
                                       LiftingKind lifting, const std::string& provenance, std::vector<std::string>& warn) {
  DynamicOptions opt;
  opt.store_fields = false;
  opt.lifting = lifting;
  DynamicCellSolver<Dim> s(mesh, mat, g, opt);
  for (const auto& w : s.warnings()) warn.push_back("kernels: " + w);
  return extract_kernels(solve_dynamic_correctors(s), provenance);
}

inline std::string macro_timeseries_csv(const MacroResult& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "t,probe_id,u1,u2,traction1,traction2\n";
  const char* side[2] = {"omega_plus", "omega_minus"};
  for (size_t n = 0; n < r.time.size(); ++n) {
    for (size_t p = 0; p < r.probes[n].size(); ++p)
      os << r.time[n] << ",p" << p << ',' << r.probes[n][p][0] << ',' << r.probes[n][p][1] << ",,\n";
    for (int s = 0; s < 2; ++s)
      os << r.time[n] << ',' << side[s] << ',' << r.trace[s][n][0] << ',' << r.trace[s][n][1] << ','
         << r.traction[s][n][0] << ',' << r.traction[s][n][1] << '\n';
  }
  return os.str();
}

inline std::string macro_energy_csv(const MacroResult& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "t,energy,work\n";
  for (size_t n = 0; n < r.time.size(); ++n) os << r.time[n] << ',' << r.energy[n] << ',' << r.work[n] << '\n';
  return os.str();
}

// Deterministic, non-smooth test field for the unfolding isometry.
inline Vector isometry_probe_field(int n) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = std::sin(0.7 * i + 0.3) + 0.5 * std::cos(1.9 * i);
  return v;
}

template <int Dim>
void run_pipeline(const RunConfig& cfg, const StagePlan& plan, const RunOptions& opt, RunReport& rep) {
  const CellConfig& cc = *cfg.cell;
  const CellMeshSpec<Dim> spec = cell_spec<Dim>(cc);
  const GridMesh<Dim> mesh = run_stage("cell", [&] { return build_cell_mesh(spec); });
  const CellMaterial<Dim> mat = cell_material<Dim>(cc.material);
  const std::string cell_hash = cfg.section_hash("cell");

  rep.provenance.emplace_back("cell_spec_hash", cell_hash);
  rep.provenance.emplace_back("cell_resolution", std::to_string(cc.resolution));
  rep.provenance.emplace_back("cell_hole", hole_text(cc.hole));
  rep.provenance.emplace_back("normalization", to_string(cfg.normalization));

  if (!opt.mesh_out.empty()) {
    std::ofstream os(opt.mesh_out);
    if (!os) throw IoError("cannot write mesh to '" + opt.mesh_out + "'");
    write_mesh_text(os, mesh);
  }
  if (!opt.dump_system.empty()) {
    std::ofstream os(opt.dump_system);
    if (!os) throw IoError("cannot write system to '" + opt.dump_system + "'");
    write_matrix_coordinate(os, assemble_stiffness<Dim>(mesh, mat.tensor));
  }

  if (plan.cell) {
    std::ostringstream os;
    os << std::setprecision(17) << "quantity,value\n";
    os << "nodes," << mesh.num_nodes() << "\nelements," << mesh.num_elements() << "\nsolid_elements," << mesh.num_solid()
       << "\nsolid_measure," << cell_measure(mesh) << "\ns_plus_nodes,"
       << face_nodes<Dim>(mesh, on_cell_face(CellFace::s_plus)).size() << "\ns_minus_nodes,"
       << face_nodes<Dim>(mesh, on_cell_face(CellFace::s_minus)).size() << "\nperiodic_pairs,"
       << mesh.periodic_pairs.size() << '\n';
    rep.artifacts.push_back({"cell.csv", os.str()});
    std::ostringstream text;
    text << "  " << mesh.num_elements() << " elements (" << mesh.num_solid() << " solid), " << mesh.num_nodes()
         << " nodes, |Y0| = " << cell_measure(mesh) << "\n";
    rep.sections.emplace_back("Cell", text.str());
  }

  // Tensors and kernels are independent; run them side by side when
  // more than one thread is allowed.
  const bool concurrent = plan.tensors && plan.kernels && num_threads() > 1;
  const TimeGrid kgrid = cfg.dynamics ? cfg.dynamics->grid : (cfg.macro ? cfg.macro->grid : TimeGrid{});
  const LiftingKind lifting = cfg.dynamics ? cfg.dynamics->lifting : LiftingKind::linear;
  std::vector<std::string> kernel_warnings;
  auto kernel_job = [&] {
    return run_stage("kernels", [&] {
      return compute_kernels<Dim>(mesh, mat, kgrid, lifting, "cell_spec_hash=" + cell_hash, kernel_warnings);
    });
  };
  std::future<MemoryKernelTable<Dim>> kernel_future;
  if (concurrent) kernel_future = std::async(std::launch::async, kernel_job);

  std::optional<EffectiveCoefficients<Dim>> eff;
  if (plan.tensors) {
    eff = run_stage("tensors", [&] { return compute_effective_coefficients(mesh, mat, cfg.normalization); });
    rep.artifacts.push_back({"tensors.csv", tensors_csv(*eff)});
    std::ostringstream text;
    text << "  A* (unnormalized, Voigt):\n" << matrix_text(eff->A_star.voigt());
    text << "  a*:\n" << matrix_text(eff->a_star.voigt()) << "  b* (row: bending, column: membrane):\n"
         << matrix_text(eff->b_star) << "  c*:\n" << matrix_text(eff->c_star.voigt());
    text << "  rho_bar = " << num(eff->rho_bar) << ", |Y0| = " << num(eff->cell_volume) << "\n";
    rep.sections.emplace_back("Effective coefficients", text.str());
    tensor_invariants(rep, *eff);
  }

  std::optional<MemoryKernelTable<Dim>> kernels;
  if (plan.kernels) {
    kernels = concurrent ? kernel_future.get() : kernel_job();
    rep.warnings.insert(rep.warnings.end(), kernel_warnings.begin(), kernel_warnings.end());
    std::ostringstream csv;
    write_kernel_csv(csv, *kernels);
    rep.artifacts.push_back({"kernels.csv", csv.str()});
    rep.provenance.emplace_back("kernel_dt", num(kernels->dt()));
    rep.provenance.emplace_back("kernel_T", num(kernels->grid.t_final));
    rep.provenance.emplace_back("lifting", lifting == LiftingKind::linear ? "linear" : "elastostatic");
    std::ostringstream text;
    kernel_invariants(rep, *kernels, text);
    rep.sections.emplace_back("Memory kernels", text.str());
  }

  if constexpr (Dim == 2) {
    std::optional<MacroResult> macro;
    MacroConfig mc;
    if (plan.macro) {
      mc = macro_config(*cfg.macro);
      mc.kernels = kernels ? &*kernels : nullptr;
      mc.coefficients = eff ? &*eff : nullptr;
      mc.store_fields = plan.compare;
      macro = run_stage("macro", [&] { return solve_macro(mc); });
      rep.warnings.insert(rep.warnings.end(), macro->warnings.begin(), macro->warnings.end());
      rep.artifacts.push_back({"macro_timeseries.csv", macro_timeseries_csv(*macro)});
      rep.artifacts.push_back({"macro_energy.csv", macro_energy_csv(*macro)});
      rep.provenance.emplace_back("macro_gamma", std::to_string(mc.gamma));
      rep.provenance.emplace_back("macro_mode", to_string(mc.mode));
      rep.provenance.emplace_back("macro_dt", num(mc.grid.dt()));

      std::ostringstream text;
      text << "  gamma " << mc.gamma << ", " << to_string(mc.mode) << ", " << mc.elements_normal << " x "
           << mc.elements_lateral << " elements per bulk, " << mc.grid.steps << " steps\n";
      for (size_t p = 0; p < mc.probes.size(); ++p) {
        double peak = 0.0;
        for (const auto& s : macro->probes) peak = std::max(peak, s[p].norm());
        text << "  probe p" << p << " (" << mc.probes[p][0] << ", " << mc.probes[p][1] << "): max |u| " << sci(peak)
             << ", final u (" << sci(macro->probes.back()[p][0]) << ", " << sci(macro->probes.back()[p][1]) << ")\n";
      }
      check(rep, "macro energy balance", macro->energy_balance_error, 1e-6);
      if (mc.gamma == -3) {
        rep.ledger.push_back({"tangential bulk trace on omega vanishes", "max |u_2| " + sci(macro->max_tangential_trace),
                              macro->max_tangential_trace == 0.0});
      }
      if (cfg.macro->reference) {
        const auto ref = run_stage("macro reference", [&] { return solve_two_scale_reference(mc, mesh, mat, {}, false); });
        double diff = 0.0;
        for (int s = 0; s < 2; ++s) diff = std::max(diff, relative_l2(macro->trace[s], ref.trace[s]));
        text << "  kernel vs two-scale reference, bulk traces: " << sci(diff) << "\n";
        check(rep, "kernel solver agrees with two-scale reference (bulk traces)", diff, 1e-3);
      }
      rep.sections.emplace_back("Macro", text.str());
    }

    if (plan.micro) {
      const MicroSection& ms = *cfg.micro;
      const MacroConfig base = macro_config(*cfg.macro);
      const int n = static_cast<int>(ms.epsilons.size());
      std::vector<MicroSolution> sols(n);
      std::vector<std::string> errors(n);
      std::vector<char> numerical(n, 0);
      // Ladder rungs are independent; each one is sequential in time.
      parallel_for(n, [&](int i) {
        try {
          MicroConfig c;
          c.epsilon = ms.epsilons[i];
          c.gamma = base.gamma;
          c.mode = base.mode;
          c.bulk = base.bulk;
          c.cell = spec;
          c.layer = mat;
          c.length = base.length;
          c.width = base.width;
          c.bulk_h_max = ms.bulk_h_max;
          c.grading = ms.grading;
          c.grid = base.grid;
          c.end_traction = base.end_traction;
          c.layer_force = base.layer_force;
          c.unscaled_layer = ms.unscaled_layer;
          c.scaling_warning = ms.scaling_warning;
          sols[i] = solve_micro(c);
        } catch (const NumericalError& e) {
          errors[i] = e.what();
          numerical[i] = 1;
        } catch (const std::exception& e) {
          errors[i] = e.what();
        }
      });
      for (int i = 0; i < n; ++i)
        if (!errors[i].empty()) {
          const std::string msg = "stage micro (epsilon " + num(ms.epsilons[i]) + "): " + errors[i];
          if (numerical[i]) throw NumericalError(msg);
          throw InputError(msg);
        }

      std::ostringstream csv, text;
      csv << std::setprecision(17)
          << "epsilon,gamma,cells,nodes,energy_balance_error,traction_mismatch,monitor,layer_force_bound,unfolding_defect\n";
      for (int i = 0; i < n; ++i) {
        const auto& s = sols[i];
        const double iso = unfolding_isometry_defect(s, isometry_probe_field(2 * s.mesh.num_nodes()));
        csv << s.epsilon << ',' << s.gamma << ',' << s.layout.cells << ',' << s.mesh.num_nodes() << ','
            << s.energy_balance_error << ',' << s.traction_mismatch << ',' << s.monitor << ',' << s.layer_force_bound
            << ',' << iso << '\n';
        for (const auto& w : s.warnings) rep.warnings.push_back("micro eps=" + num(s.epsilon) + ": " + w);
        const std::string tag = " (eps " + num(s.epsilon) + ")";
        check(rep, "micro energy balance" + tag, s.energy_balance_error, 1e-6);
        check(rep, "micro traction transmission" + tag, s.traction_mismatch, 1e-9);
        check(rep, "unfolding isometry" + tag, iso, 1e-12);
        text << "  eps " << s.epsilon << ": " << s.mesh.num_nodes() << " nodes, monitor " << sci(s.monitor)
             << ", energy balance " << sci(s.energy_balance_error) << "\n";
      }
      rep.artifacts.push_back({"micro.csv", csv.str()});
      rep.sections.emplace_back("Micro ladder", text.str());

      if (plan.compare) {
        CompareOptions co;
        co.exclusion = ms.exclusion;
        std::ostringstream err, table;
        write_error_csv_header(err);
        std::vector<MicroMacroReport> reps;
        for (const auto& s : sols) {
          reps.push_back(run_stage("compare", [&] { return compare_micro_macro(s, *macro, co); }));
          write_error_csv_row(err, reps.back());
        }
        rep.artifacts.push_back({"errors.csv", err.str()});
        table << "  epsilon      bulk L2      trace L2     layer        monitor\n";
        for (const auto& r : reps)
          table << "  " << std::left << std::setw(12) << num(r.epsilon) << std::right << ' ' << sci(r.bulk_error, 3)
                << "    " << sci(r.trace_error, 3) << "    " << sci(r.layer_error, 3) << "    " << sci(r.monitor, 3)
                << "\n";
        rep.sections.emplace_back("Micro vs macro errors", table.str());
        if (reps.size() > 1) {
          bool decreasing = true, bounded = true;
          for (size_t i = 1; i < reps.size(); ++i) {
            decreasing = decreasing && reps[i].bulk_error < reps[i - 1].bulk_error;
            bounded = bounded && reps[i].monitor <= 2.0 * reps[0].monitor;
          }
          rep.ledger.push_back({"bulk errors strictly decreasing along the ladder", decreasing ? "yes" : "no", decreasing});
          rep.ledger.push_back({"a priori monitor within twice its first value", bounded ? "yes" : "no", bounded});
        }
      }
    }
  }
}

}  // namespace detail

inline RunReport run_config(const RunConfig& cfg, Command cmd, const RunOptions& opt = {}) {
  const StagePlan plan = plan_stages(cmd, cfg);
  RunReport rep;
  if (!plan.any()) return rep;
  rep.provenance.emplace_back("toolkit_version", kToolkitVersion);
  rep.provenance.emplace_back("config_hash", cfg.hash());
  rep.provenance.emplace_back("command", to_string(cmd));
  rep.provenance.emplace_back("dimension", std::to_string(cfg.dimension));
  if (cfg.dimension == 2)
    detail::run_pipeline<2>(cfg, plan, opt, rep);
  else
    detail::run_pipeline<3>(cfg, plan, opt, rep);

  std::ostringstream os;
  os << "key,value\n";
  for (const auto& [k, v] : rep.provenance) os << k << ',' << v << '\n';
  rep.artifacts.push_back({"provenance.csv", os.str()});
  return rep;
}

inline std::string summary_text(const RunReport& r) {
  std::ostringstream os;
  os << "thinlayer run summary\n";
  if (!r.provenance.empty()) {
    os << "\n[Provenance]\n";
    for (const auto& [k, v] : r.provenance) os << "  " << k << " = " << v << '\n';
  }
  for (const auto& [title, text] : r.sections) os << "\n[" << title << "]\n" << text;
  os << "\n[Invariant ledger]\n";
  if (r.ledger.empty()) os << "  (no checks)\n";
  for (const auto& i : r.ledger) os << "  " << (i.pass ? "PASS" : "FAIL") << "  " << i.name << ": " << i.detail << '\n';
  if (!r.warnings.empty()) {
    os << "\n[Warnings]\n";
    for (const auto& w : r.warnings) os << "  " << w << '\n';
  }
  os << "\n[Artifacts] " << r.artifacts.size() << "\n";
  for (const auto& a : r.artifacts)
    os << "  " << a.name << "  " << a.content.size() << " bytes  fnv1a " << hex64(fnv1a(a.content)) << '\n';
  os << "report hash " << r.hash() << '\n';
  return os.str();
}

// Writes the CSV bundle and summary.txt into `dir` (created if needed).
inline void emit_report(const RunReport& r, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
  auto write = [&](const std::string& name, const std::string& content) {
    const fs::path p = fs::path(dir) / name;
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write '" + p.string() + "'");
    os << content;
    if (!os) throw IoError("write failed for '" + p.string() + "'");
  };
  for (const auto& a : r.artifacts) write(a.name, a.content);
  write("summary.txt", summary_text(r));
}

}  // namespace thinlayer::harness
