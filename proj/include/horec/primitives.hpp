#pragma once

// Watertight primitive meshes, all centered at the origin.

#include <map>

#include "horec/geometry.hpp"

namespace horec::geo {

// Icosahedron refined `subdiv` times with vertices pushed to radius r.
// subdiv 0/1/2/3 -> 12/42/162/642 vertices.
inline TriMesh make_icosphere(int subdiv, double r = 1.0) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> vs = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : vs) v.normalize();
  std::vector<std::array<int, 3>> fs = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int iter = 0; iter < subdiv; ++iter) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::make_pair(std::min(a, b), std::max(a, b));
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Vec3 m = (vs[static_cast<std::size_t>(a)] + vs[static_cast<std::size_t>(b)])
                   .normalized();
      vs.push_back(m);
      int idx = static_cast<int>(vs.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(fs.size() * 4);
    for (const auto& f : fs) {
      int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    fs = std::move(next);
  }

  TriMesh m;
  m.vertices.resize(static_cast<Eigen::Index>(vs.size()), 3);
  for (std::size_t i = 0; i < vs.size(); ++i)
    m.vertices.row(static_cast<Eigen::Index>(i)) = (vs[i] * r).transpose();
  m.faces.resize(static_cast<Eigen::Index>(fs.size()), 3);
  for (std::size_t i = 0; i < fs.size(); ++i)
    m.faces.row(static_cast<Eigen::Index>(i)) =
        Eigen::RowVector3i(fs[i][0], fs[i][1], fs[i][2]);
  m.closed = true;
  return m;
}

inline TriMesh make_box(double sx, double sy, double sz) {
  double hx = sx / 2, hy = sy / 2, hz = sz / 2;
  TriMesh m;
  m.vertices.resize(8, 3);
  int i = 0;
  for (double z : {-hz, hz})
    for (double y : {-hy, hy})
      for (double x : {-hx, hx}) m.vertices.row(i++) = Eigen::RowVector3d(x, y, z);
  // 0:(-,-,-) 1:(+,-,-) 2:(-,+,-) 3:(+,+,-) 4:(-,-,+) 5:(+,-,+) 6:(-,+,+) 7:(+,+,+)
  const int f[12][3] = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6},
                        {0, 1, 4}, {1, 5, 4}, {2, 6, 3}, {3, 6, 7},
                        {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  m.faces.resize(12, 3);
  for (int k = 0; k < 12; ++k)
    m.faces.row(k) = Eigen::RowVector3i(f[k][0], f[k][1], f[k][2]);
  m.closed = true;
  return m;
}

// Axis along z, closed caps.
inline TriMesh make_cylinder(double radius, double height, int segments = 24) {
  require(segments >= 3, "invalid-argument", "cylinder needs >= 3 segments");
  double hz = height / 2;
  TriMesh m;
  m.vertices.resize(2 * segments + 2, 3);
  for (int s = 0; s < segments; ++s) {
    double a = 2.0 * M_PI * s / segments;
    m.vertices.row(s) = Eigen::RowVector3d(radius * std::cos(a),
                                           radius * std::sin(a), -hz);
    m.vertices.row(segments + s) =
        Eigen::RowVector3d(radius * std::cos(a), radius * std::sin(a), hz);
  }
  int cb = 2 * segments, ct = 2 * segments + 1;
  m.vertices.row(cb) = Eigen::RowVector3d(0, 0, -hz);
  m.vertices.row(ct) = Eigen::RowVector3d(0, 0, hz);
  std::vector<std::array<int, 3>> fs;
  for (int s = 0; s < segments; ++s) {
    int sn = (s + 1) % segments;
    fs.push_back({s, sn, segments + s});
    fs.push_back({sn, segments + sn, segments + s});
    fs.push_back({cb, sn, s});
    fs.push_back({ct, segments + s, segments + sn});
  }
  m.faces.resize(static_cast<Eigen::Index>(fs.size()), 3);
  for (std::size_t i = 0; i < fs.size(); ++i)
    m.faces.row(static_cast<Eigen::Index>(i)) =
        Eigen::RowVector3i(fs[i][0], fs[i][1], fs[i][2]);
  m.closed = true;
  return m;
}

// Apex up the z axis, closed base.
inline TriMesh make_cone(double radius, double height, int segments = 24) {
  require(segments >= 3, "invalid-argument", "cone needs >= 3 segments");
  double hz = height / 2;
  TriMesh m;
  m.vertices.resize(segments + 2, 3);
  for (int s = 0; s < segments; ++s) {
    double a = 2.0 * M_PI * s / segments;
    m.vertices.row(s) = Eigen::RowVector3d(radius * std::cos(a),
                                           radius * std::sin(a), -hz);
  }
  int apex = segments, cb = segments + 1;
  m.vertices.row(apex) = Eigen::RowVector3d(0, 0, hz);
  m.vertices.row(cb) = Eigen::RowVector3d(0, 0, -hz);
  std::vector<std::array<int, 3>> fs;
  for (int s = 0; s < segments; ++s) {
    int sn = (s + 1) % segments;
    fs.push_back({s, sn, apex});
    fs.push_back({cb, sn, s});
  }
  m.faces.resize(static_cast<Eigen::Index>(fs.size()), 3);
  for (std::size_t i = 0; i < fs.size(); ++i)
    m.faces.row(static_cast<Eigen::Index>(i)) =
        Eigen::RowVector3i(fs[i][0], fs[i][1], fs[i][2]);
  m.closed = true;
  return m;
}

}  // namespace horec::geo
