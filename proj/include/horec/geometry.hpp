#pragma once

// Mesh containers and the geometric core: area-uniform surface sampling,
// symmetric Chamfer distance, canonical normalization, mesh regularizers,
// exact point-triangle distance, ray-parity inside tests, and penetration
// depth. Public API works in double; the low-level kernels are templated so
// the differentiable 32-bit path can reuse them.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "horec/core.hpp"

namespace horec::geo {

using Vec3 = Eigen::Vector3d;
using VertMat = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using FaceMat = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;
using PointSet = VertMat;

struct TriMesh {
  VertMat vertices;  // mm
  FaceMat faces;
  bool closed = false;
};

inline void validate(const TriMesh& m) {
  const auto V = m.vertices.rows();
  require(V >= 1, "invalid-mesh", "mesh has no vertices");
  require(m.vertices.allFinite(), "invalid-mesh", "mesh has non-finite vertices");
  for (Eigen::Index f = 0; f < m.faces.rows(); ++f) {
    for (int k = 0; k < 3; ++k) {
      int idx = m.faces(f, k);
      require(idx >= 0 && idx < V, "invalid-mesh",
              "face " + std::to_string(f) + " references vertex " +
                  std::to_string(idx) + " outside [0," + std::to_string(V) + ")");
    }
    require(!(m.faces(f, 0) == m.faces(f, 1) && m.faces(f, 1) == m.faces(f, 2)),
            "invalid-mesh", "face " + std::to_string(f) + " is fully degenerate");
  }
}

// True when every undirected edge belongs to exactly two faces.
inline bool compute_closed(const TriMesh& m) {
  if (m.faces.rows() == 0) return false;
  std::map<std::pair<int, int>, int> counts;
  for (Eigen::Index f = 0; f < m.faces.rows(); ++f) {
    for (int k = 0; k < 3; ++k) {
      int a = m.faces(f, k), b = m.faces(f, (k + 1) % 3);
      counts[{std::min(a, b), std::max(a, b)}]++;
    }
  }
  for (const auto& [e, c] : counts)
    if (c != 2) return false;
  return true;
}

// ---- templated kernels ----------------------------------------------------

namespace kernel {

template <class T>
using V3 = Eigen::Matrix<T, 3, 1>;

// Closest point on triangle abc to p (Ericson, Real-Time Collision
// Detection §5.1.5). Returns squared distance; writes the closest point and
// barycentric coordinates.
template <class T>
T point_triangle_sq(const V3<T>& p, const V3<T>& a, const V3<T>& b,
                    const V3<T>& c, V3<T>* closest = nullptr,
                    V3<T>* bary = nullptr) {
  V3<T> ab = b - a, ac = c - a, ap = p - a;
  T d1 = ab.dot(ap), d2 = ac.dot(ap);
  auto finish = [&](const V3<T>& q, T u, T v, T w) {
    if (closest) *closest = q;
    if (bary) *bary = V3<T>(u, v, w);
    return (p - q).squaredNorm();
  };
  if (d1 <= T(0) && d2 <= T(0)) return finish(a, T(1), T(0), T(0));

  V3<T> bp = p - b;
  T d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= T(0) && d4 <= d3) return finish(b, T(0), T(1), T(0));

  T vc = d1 * d4 - d3 * d2;
  if (vc <= T(0) && d1 >= T(0) && d3 <= T(0)) {
    T v = d1 / (d1 - d3);
    return finish(a + v * ab, T(1) - v, v, T(0));
  }

  V3<T> cp = p - c;
  T d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= T(0) && d5 <= d6) return finish(c, T(0), T(0), T(1));

  T vb = d5 * d2 - d1 * d6;
  if (vb <= T(0) && d2 >= T(0) && d6 <= T(0)) {
    T w = d2 / (d2 - d6);
    return finish(a + w * ac, T(1) - w, T(0), w);
  }

  T va = d3 * d6 - d5 * d4;
  if (va <= T(0) && (d4 - d3) >= T(0) && (d5 - d6) >= T(0)) {
    T w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return finish(b + w * (c - b), T(0), T(1) - w, w);
  }

  T denom = T(1) / (va + vb + vc);
  T v = vb * denom, w = vc * denom;
  return finish(a + ab * v + ac * w, T(1) - v - w, v, w);
}

// Moeller-Trumbore; hits strictly in front of the origin count.
template <class T>
bool ray_triangle(const V3<T>& orig, const V3<T>& dir, const V3<T>& a,
                  const V3<T>& b, const V3<T>& c, T* t_out = nullptr) {
  const T eps = T(1e-12);
  V3<T> ab = b - a, ac = c - a;
  V3<T> pvec = dir.cross(ac);
  T det = ab.dot(pvec);
  if (std::abs(det) < eps) return false;
  T inv = T(1) / det;
  V3<T> tvec = orig - a;
  T u = tvec.dot(pvec) * inv;
  if (u < T(0) || u > T(1)) return false;
  V3<T> qvec = tvec.cross(ab);
  T v = dir.dot(qvec) * inv;
  if (v < T(0) || u + v > T(1)) return false;
  T t = ac.dot(qvec) * inv;
  if (t <= T(1e-9)) return false;
  if (t_out) *t_out = t;
  return true;
}

// Centroid and max-radius of a vertex array, accumulated in double no matter
// the storage type.
template <class T>
void centroid_scale(const T* verts, std::int64_t v_count, double out_centroid[3],
                    double* out_scale) {
  require(v_count >= 1, "invalid-mesh", "empty vertex set");
  double cx = 0, cy = 0, cz = 0;
  for (std::int64_t i = 0; i < v_count; ++i) {
    cx += static_cast<double>(verts[3 * i]);
    cy += static_cast<double>(verts[3 * i + 1]);
    cz += static_cast<double>(verts[3 * i + 2]);
  }
  cx /= static_cast<double>(v_count);
  cy /= static_cast<double>(v_count);
  cz /= static_cast<double>(v_count);
  double s = 0;
  for (std::int64_t i = 0; i < v_count; ++i) {
    double dx = static_cast<double>(verts[3 * i]) - cx;
    double dy = static_cast<double>(verts[3 * i + 1]) - cy;
    double dz = static_cast<double>(verts[3 * i + 2]) - cz;
    s = std::max(s, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  out_centroid[0] = cx;
  out_centroid[1] = cy;
  out_centroid[2] = cz;
  *out_scale = s;
}

}  // namespace kernel

// ---- sampling and Chamfer ---------------------------------------------------

inline PointSet sample_surface(const TriMesh& m, std::int64_t n,
                               std::uint64_t seed) {
  validate(m);
  require(n >= 1, "invalid-argument", "sample_surface needs n >= 1");
  require(m.faces.rows() >= 1, "degenerate-surface", "degenerate surface");

  const auto F = m.faces.rows();
  std::vector<double> cum(static_cast<std::size_t>(F));
  double total = 0;
  for (Eigen::Index f = 0; f < F; ++f) {
    Vec3 a = m.vertices.row(m.faces(f, 0));
    Vec3 b = m.vertices.row(m.faces(f, 1));
    Vec3 c = m.vertices.row(m.faces(f, 2));
    total += 0.5 * (b - a).cross(c - a).norm();
    cum[static_cast<std::size_t>(f)] = total;
  }
  require(total > 0 && std::isfinite(total), "degenerate-surface",
          "degenerate surface");

  Rng rng(seed);
  PointSet out(n, 3);
  for (std::int64_t i = 0; i < n; ++i) {
    double r = rng.uniform() * total;
    auto it = std::upper_bound(cum.begin(), cum.end(), r);
    auto f = static_cast<Eigen::Index>(std::min<std::ptrdiff_t>(
        it - cum.begin(), F - 1));
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    Vec3 a = m.vertices.row(m.faces(f, 0));
    Vec3 b = m.vertices.row(m.faces(f, 1));
    Vec3 c = m.vertices.row(m.faces(f, 2));
    out.row(i) = (a + u * (b - a) + v * (c - a)).transpose();
  }
  return out;
}

// ½(mean_p min_q ‖p−q‖² + mean_q min_p ‖q−p‖²), mm².
inline double chamfer(const PointSet& a, const PointSet& b) {
  require(a.rows() >= 1 && b.rows() >= 1, "invalid-argument",
          "chamfer needs non-empty point sets");
  double t1 = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    t1 += best;
  }
  t1 /= static_cast<double>(a.rows());
  double t2 = 0;
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    t2 += best;
  }
  t2 /= static_cast<double>(b.rows());
  return 0.5 * (t1 + t2);
}

// ---- canonical normalization ------------------------------------------------

struct Canonical {
  TriMesh mesh;   // unit max-radius, zero centroid
  Vec3 centroid;  // mm
  double scale;   // mm
};

inline Canonical canonicalize(const TriMesh& m) {
  double c[3], s;
  kernel::centroid_scale(m.vertices.data(), m.vertices.rows(), c, &s);
  require(s > 1e-12, "degenerate-extent", "degenerate extent");
  Canonical out;
  out.centroid = Vec3(c[0], c[1], c[2]);
  out.scale = s;
  out.mesh.faces = m.faces;
  out.mesh.closed = m.closed;
  out.mesh.vertices = (m.vertices.rowwise() - out.centroid.transpose()) / s;
  return out;
}

inline VertMat denormalize(const VertMat& canon, const Vec3& centroid,
                           double scale) {
  return (canon * scale).rowwise() + centroid.transpose();
}

// ---- regularizers ------------------------------------------------------------

inline std::vector<std::array<int, 2>> unique_edges(const FaceMat& faces) {
  std::vector<std::array<int, 2>> edges;
  for (Eigen::Index f = 0; f < faces.rows(); ++f)
    for (int k = 0; k < 3; ++k) {
      int a = faces(f, k), b = faces(f, (k + 1) % 3);
      if (a == b) continue;
      edges.push_back({std::min(a, b), std::max(a, b)});
    }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

// Variance of the unique edge lengths.
inline double edge_regularizer(const TriMesh& m) {
  require(m.faces.rows() >= 1, "invalid-mesh", "edge regularizer needs faces");
  auto edges = unique_edges(m.faces);
  require(!edges.empty(), "invalid-mesh", "mesh has no edges");
  double mean = 0;
  std::vector<double> lens;
  lens.reserve(edges.size());
  for (const auto& e : edges) {
    double l = (m.vertices.row(e[0]) - m.vertices.row(e[1])).norm();
    lens.push_back(l);
    mean += l;
  }
  mean /= static_cast<double>(lens.size());
  double var = 0;
  for (double l : lens) var += (l - mean) * (l - mean);
  return var / static_cast<double>(lens.size());
}

inline std::vector<std::vector<int>> one_rings(Eigen::Index v_count,
                                               const FaceMat& faces) {
  std::vector<std::vector<int>> rings(static_cast<std::size_t>(v_count));
  for (const auto& e : unique_edges(faces)) {
    rings[static_cast<std::size_t>(e[0])].push_back(e[1]);
    rings[static_cast<std::size_t>(e[1])].push_back(e[0]);
  }
  return rings;
}

// Mean over connected vertices of ‖v − mean(1-ring)‖².
inline double curvature_regularizer(const TriMesh& m) {
  require(m.faces.rows() >= 1, "invalid-mesh", "curvature regularizer needs faces");
  auto rings = one_rings(m.vertices.rows(), m.faces);
  double total = 0;
  std::int64_t counted = 0;
  for (Eigen::Index v = 0; v < m.vertices.rows(); ++v) {
    const auto& ring = rings[static_cast<std::size_t>(v)];
    if (ring.empty()) continue;
    Vec3 mean = Vec3::Zero();
    for (int u : ring) mean += m.vertices.row(u).transpose();
    mean /= static_cast<double>(ring.size());
    total += (m.vertices.row(v).transpose() - mean).squaredNorm();
    ++counted;
  }
  require(counted > 0, "invalid-mesh", "all vertices isolated");
  return total / static_cast<double>(counted);
}

// ---- distances and containment -----------------------------------------------

inline Eigen::VectorXd point_mesh_distance(const PointSet& points,
                                           const TriMesh& m) {
  validate(m);
  require(m.faces.rows() >= 1, "invalid-mesh", "mesh has no faces");
  const auto F = m.faces.rows();
  // Per-face bounding boxes let most triangles be rejected on a cheap
  // interval distance before the exact test runs.
  std::vector<Eigen::AlignedBox3d> boxes(static_cast<std::size_t>(F));
  for (Eigen::Index f = 0; f < F; ++f) {
    Eigen::AlignedBox3d box;
    for (int k = 0; k < 3; ++k)
      box.extend(Vec3(m.vertices.row(m.faces(f, k)).transpose()));
    boxes[static_cast<std::size_t>(f)] = box;
  }
  Eigen::VectorXd out(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Vec3 p = points.row(i).transpose();
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index f = 0; f < F; ++f) {
      if (boxes[static_cast<std::size_t>(f)].squaredExteriorDistance(p) >= best)
        continue;
      Vec3 a = m.vertices.row(m.faces(f, 0));
      Vec3 b = m.vertices.row(m.faces(f, 1));
      Vec3 c = m.vertices.row(m.faces(f, 2));
      best = std::min(best, kernel::point_triangle_sq<double>(p, a, b, c));
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

namespace detail {
// Fixed, mutually independent ray directions; deliberately irrational so axis
// aligned geometry does not produce edge-grazing rays.
inline const std::array<Vec3, 3>& parity_dirs() {
  static const std::array<Vec3, 3> dirs = {
      Vec3(0.5556617216, 0.7450714286, 0.3691636499).normalized(),
      Vec3(-0.3772319218, 0.6483661846, 0.6613983282).normalized(),
      Vec3(0.6212821397, -0.3124875856, 0.7186573098).normalized()};
  return dirs;
}
}  // namespace detail

// Ray-parity containment with a 3-ray majority vote; points within 1e-9 of
// the surface are reported outside.
inline std::vector<std::uint8_t> inside_test(const PointSet& points,
                                             const TriMesh& m) {
  require(m.closed, "not-watertight", "inside test requires watertight mesh");
  validate(m);
  // Points beyond the mesh bounding box can be neither inside nor on the
  // surface; they skip both the distance pass and the ray casts.
  Eigen::AlignedBox3d mesh_box;
  for (Eigen::Index v = 0; v < m.vertices.rows(); ++v)
    mesh_box.extend(Vec3(m.vertices.row(v).transpose()));
  std::vector<Eigen::Index> near;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    if (mesh_box.squaredExteriorDistance(Vec3(points.row(i).transpose())) <= 1e-18)
      near.push_back(i);

  std::vector<std::uint8_t> out(static_cast<std::size_t>(points.rows()), 0);
  if (near.empty()) return out;
  PointSet near_pts(static_cast<Eigen::Index>(near.size()), 3);
  for (std::size_t k = 0; k < near.size(); ++k)
    near_pts.row(static_cast<Eigen::Index>(k)) = points.row(near[k]);
  auto dist = point_mesh_distance(near_pts, m);
  const auto F = m.faces.rows();
  for (std::size_t k = 0; k < near.size(); ++k) {
    auto i = static_cast<Eigen::Index>(k);
    if (dist[i] <= 1e-9) continue;
    Vec3 p = near_pts.row(i).transpose();
    int votes = 0;
    for (const Vec3& dir : detail::parity_dirs()) {
      int crossings = 0;
      for (Eigen::Index f = 0; f < F; ++f) {
        Vec3 a = m.vertices.row(m.faces(f, 0));
        Vec3 b = m.vertices.row(m.faces(f, 1));
        Vec3 c = m.vertices.row(m.faces(f, 2));
        if (kernel::ray_triangle<double>(p, dir, a, b, c)) ++crossings;
      }
      if (crossings % 2 == 1) ++votes;
    }
    out[static_cast<std::size_t>(near[k])] = votes >= 2 ? 1 : 0;
  }
  return out;
}

// Max depth of either mesh's vertices inside the other; zero when disjoint.
// The reverse direction runs only when the first mesh is itself watertight.
inline double penetration_depth(const TriMesh& hand, const TriMesh& object) {
  double pd = 0;
  auto accumulate_dir = [&pd](const TriMesh& pts_mesh, const TriMesh& container) {
    auto inside = inside_test(pts_mesh.vertices, container);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < pts_mesh.vertices.rows(); ++i)
      if (inside[static_cast<std::size_t>(i)]) idx.push_back(i);
    if (idx.empty()) return;
    PointSet sel(static_cast<Eigen::Index>(idx.size()), 3);
    for (std::size_t k = 0; k < idx.size(); ++k)
      sel.row(static_cast<Eigen::Index>(k)) = pts_mesh.vertices.row(idx[k]);
    auto d = point_mesh_distance(sel, container);
    pd = std::max(pd, d.maxCoeff());
  };
  accumulate_dir(hand, object);
  if (hand.closed) accumulate_dir(object, hand);
  return pd;
}

// ---- OBJ I/O -------------------------------------------------------------------

inline void save_obj(const TriMesh& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), "io", "cannot open '" + path.string() + "' for writing");
  f.precision(17);
  for (Eigen::Index v = 0; v < m.vertices.rows(); ++v)
    f << "v " << m.vertices(v, 0) << " " << m.vertices(v, 1) << " "
      << m.vertices(v, 2) << "\n";
  for (Eigen::Index t = 0; t < m.faces.rows(); ++t)
    f << "f " << m.faces(t, 0) + 1 << " " << m.faces(t, 1) + 1 << " "
      << m.faces(t, 2) + 1 << "\n";
  require(f.good(), "io", "short write to '" + path.string() + "'");
}

inline TriMesh load_obj(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(f.good(), "io", "cannot open '" + path.string() + "'");
  std::vector<std::array<double, 3>> verts;
  std::vector<std::array<int, 3>> faces;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      std::array<double, 3> v{};
      require(static_cast<bool>(ss >> v[0] >> v[1] >> v[2]), "obj-parse",
              "bad vertex record at line " + std::to_string(lineno));
      verts.push_back(v);
    } else if (tag == "f") {
      std::array<int, 3> idx{};
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        require(static_cast<bool>(ss >> tok), "obj-parse",
                "face with fewer than 3 indices at line " + std::to_string(lineno));
        int v = 0;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        require(res.ec == std::errc(), "obj-parse",
                "bad face index at line " + std::to_string(lineno));
        idx[static_cast<std::size_t>(k)] = v - 1;
      }
      std::string extra;
      require(!(ss >> extra), "obj-parse",
              "non-triangular face at line " + std::to_string(lineno));
      faces.push_back(idx);
    }
  }
  TriMesh m;
  m.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i)
    m.vertices.row(static_cast<Eigen::Index>(i)) =
        Eigen::RowVector3d(verts[i][0], verts[i][1], verts[i][2]);
  m.faces.resize(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t i = 0; i < faces.size(); ++i)
    m.faces.row(static_cast<Eigen::Index>(i)) =
        Eigen::RowVector3i(faces[i][0], faces[i][1], faces[i][2]);
  validate(m);
  m.closed = compute_closed(m);
  return m;
}

}  // namespace horec::geo
