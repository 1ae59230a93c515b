#pragma once

// Procedurally generated differentiable hand layer: a seeded capsule rig with
// the classic parametric-hand interface (theta in R^30, beta in R^10 ->
// 21 keypoints + fixed-topology 778-vertex mesh). Articulation runs through a
// linear pose basis into per-joint axis-angle rotations, forward kinematics
// over a 16-joint tree, and linear blend skinning; shape runs through ten
// smooth bounded vertex-displacement fields. Outputs are hand-root-relative.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <filesystem>
#include <memory>
#include <vector>

#include "horec/autodiff.hpp"
#include "horec/container.hpp"
#include "horec/core.hpp"
#include "horec/geometry.hpp"
#include "horec/tensor.hpp"

namespace horec::hand {

constexpr int kVertexCount = 778;
constexpr int kJointCount = 16;   // wrist + 3 per finger
constexpr int kKeypointCount = 21;  // wrist + {MCP,PIP,DIP,TIP} x 5
constexpr int kThetaDim = 30;
constexpr int kBetaDim = 10;
constexpr int kPoseDim = 45;  // 15 articulated joints x 3 axis-angle
constexpr double kMaxShapeDisplacementMm = 10.0;

struct HandParams {
  Tensor<double> theta;  // [30]
  Tensor<double> beta;   // [10]
  static HandParams zero() {
    return {Tensor<double>::zeros({kThetaDim}), Tensor<double>::zeros({kBetaDim})};
  }
};

struct Rig {
  Tensor<double> template_vertices;    // [778,3] mm
  geo::FaceMat faces;                  // [1532,3]
  std::vector<int> parent;             // [16], parent[0] = -1
  Tensor<double> joint_rest;           // [16,3] mm
  Tensor<double> skin_weights;         // [778,16], rows sum to 1
  Tensor<double> pose_basis;           // [45,30], orthonormal columns
  Tensor<double> shape_basis;          // [2334,10], per-column |disp| <= 10 mm
  Tensor<double> keypoint_regressor;   // [21,778], rows sum to 1
  std::vector<std::vector<int>> contact_zones;  // 5 fingertip patches + palm
  std::array<int, 5> tip_vertex{};     // designated fingertip template vertices
  std::uint64_t build_seed = 0;

  geo::TriMesh template_mesh() const {
    geo::TriMesh m;
    m.vertices.resize(kVertexCount, 3);
    for (int v = 0; v < kVertexCount; ++v)
      for (int c = 0; c < 3; ++c) m.vertices(v, c) = template_vertices.at(v, c);
    m.faces = faces;
    m.closed = geo::compute_closed(m);
    return m;
  }
};

namespace detail {

using Vec3 = Eigen::Vector3d;

inline Eigen::Matrix3d rot_about(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

inline double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

// Arc-length parameterized polyline with finite-difference tangents.
struct Spine {
  std::vector<Vec3> pts;
  std::vector<double> cum;

  explicit Spine(std::vector<Vec3> nodes) : pts(std::move(nodes)) {
    cum.resize(pts.size(), 0.0);
    for (std::size_t i = 1; i < pts.size(); ++i)
      cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  }
  double total() const { return cum.back(); }
  Vec3 pos(double t) const {
    t = std::clamp(t, 0.0, total());
    std::size_t i = 1;
    while (i + 1 < pts.size() && cum[i] < t) ++i;
    double seg = cum[i] - cum[i - 1];
    double u = seg > 0 ? (t - cum[i - 1]) / seg : 0.0;
    return pts[i - 1] + u * (pts[i] - pts[i - 1]);
  }
  Vec3 tangent(double t) const {
    double h = std::max(1e-3, total() * 1e-4);
    Vec3 d = pos(std::min(t + h, total())) - pos(std::max(t - h, 0.0));
    return d.normalized();
  }
};

struct TubePart {
  int pole0 = -1, pole1 = -1;
  std::vector<std::vector<int>> rings;  // per-ring vertex ids, size S each
  std::vector<double> ring_t;           // arc-length parameter of each ring
  int first_vertex = 0, vertex_count = 0;
};

// Closed capsule-like tube: poles at the spine endpoints, `cap_rings`
// hemispherical rings per end, `body_rings` uniform rings between, radius
// linearly tapered from r0 to r1 over the body. V = S*(2*cap+body) + 2.
inline TubePart add_tube(std::vector<Vec3>& verts,
                         std::vector<std::array<int, 3>>& faces,
                         const Spine& spine, double r0, double r1,
                         int cap_rings, int body_rings, int segments,
                         const Vec3& binormal) {
  const double L = spine.total();
  require(L > r0 + r1, "hand-rig", "tube spine shorter than its end caps");
  TubePart part;
  part.first_vertex = static_cast<int>(verts.size());

  std::vector<std::pair<double, double>> tr;  // (t, ring radius)
  for (int k = 1; k <= cap_rings; ++k) {
    double phi = (M_PI / 2.0) * k / cap_rings;
    tr.emplace_back(r0 * (1.0 - std::cos(phi)), r0 * std::sin(phi));
  }
  for (int j = 1; j <= body_rings; ++j) {
    double u = static_cast<double>(j) / (body_rings + 1);
    double t = r0 + u * (L - r0 - r1);
    tr.emplace_back(t, r0 + (r1 - r0) * (t - r0) / (L - r0 - r1));
  }
  for (int k = cap_rings; k >= 1; --k) {
    double phi = (M_PI / 2.0) * k / cap_rings;
    tr.emplace_back(L - r1 * (1.0 - std::cos(phi)), r1 * std::sin(phi));
  }

  const Vec3 b = binormal.normalized();
  part.pole0 = static_cast<int>(verts.size());
  verts.push_back(spine.pos(0.0));
  for (auto [t, rr] : tr) {
    Vec3 c = spine.pos(t);
    Vec3 tan = spine.tangent(t);
    Vec3 n = b.cross(tan).normalized();
    std::vector<int> ring;
    for (int s = 0; s < segments; ++s) {
      double psi = 2.0 * M_PI * s / segments;
      ring.push_back(static_cast<int>(verts.size()));
      verts.push_back(c + rr * (std::cos(psi) * n + std::sin(psi) * b));
    }
    part.rings.push_back(std::move(ring));
    part.ring_t.push_back(t);
  }
  part.pole1 = static_cast<int>(verts.size());
  verts.push_back(spine.pos(L));

  const int S = segments;
  for (int s = 0; s < S; ++s)
    faces.push_back({part.pole0, part.rings[0][(s + 1) % S], part.rings[0][s]});
  for (std::size_t i = 0; i + 1 < part.rings.size(); ++i) {
    for (int s = 0; s < S; ++s) {
      int a = part.rings[i][s], bq = part.rings[i][(s + 1) % S];
      int c = part.rings[i + 1][(s + 1) % S], d = part.rings[i + 1][s];
      faces.push_back({a, bq, c});
      faces.push_back({a, c, d});
    }
  }
  const auto& last = part.rings.back();
  for (int s = 0; s < S; ++s)
    faces.push_back({part.pole1, last[s], last[(s + 1) % S]});

  part.vertex_count = static_cast<int>(verts.size()) - part.first_vertex;
  return part;
}

struct FingerSpec {
  Vec3 mcp;          // knuckle position in the palm frame
  Vec3 base_dir;     // proximal bone direction at rest
  Vec3 axis;         // flexion axis (constant across the finger)
  double len[3];     // proximal, middle, distal bone lengths
  double rest[3];    // rest flexion angles (radians)
  double r0, r1;     // base / tip capsule radii
  double embed;      // how deep the base cap sits inside the palm
  int segments, cap_rings, body_rings;
};

inline Eigen::Matrix3d rodrigues(const Vec3& a) {
  double th = a.norm();
  Eigen::Matrix3d K;
  K << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
  double c1, c2;
  if (th < 1e-8) {
    c1 = 1.0 - th * th / 6.0;
    c2 = 0.5 - th * th / 24.0;
  } else {
    c1 = std::sin(th) / th;
    c2 = (1.0 - std::cos(th)) / (th * th);
  }
  return Eigen::Matrix3d::Identity() + c1 * K + c2 * (K * K);
}

// d<exp(a), G>/da for a 3x3 adjoint G: compact exponential-coordinate
// derivative with the small-angle branch taken below 1e-8.
inline Vec3 rodrigues_backward(const Vec3& a, const Eigen::Matrix3d& R,
                               const Eigen::Matrix3d& G) {
  double th2 = a.squaredNorm();
  Vec3 g;
  auto skew = [](const Vec3& v) {
    Eigen::Matrix3d K;
    K << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return K;
  };
  if (th2 < 1e-16) {
    for (int k = 0; k < 3; ++k) {
      Eigen::Matrix3d dR = skew(Vec3::Unit(k));
      g[k] = (dR.array() * G.array()).sum();
    }
    return g;
  }
  Eigen::Matrix3d A = skew(a);
  for (int k = 0; k < 3; ++k) {
    Vec3 v = a.cross((Eigen::Matrix3d::Identity() - R) * Vec3::Unit(k));
    Eigen::Matrix3d dR = ((a[k] * A + skew(v)) / th2) * R;
    g[k] = (dR.array() * G.array()).sum();
  }
  return g;
}

}  // namespace detail

// ---- rig construction -----------------------------------------------------

// Deterministic capsule hand: flattened palm capsule plus five tapered finger
// capsules bent into a relaxed half-grasp. Palm faces +z, fingers point +y,
// the thumb leaves the +x edge. All dimensions in millimetres.
inline Rig build_rig(std::uint64_t seed) {
  using detail::Vec3;
  namespace hd = detail;

  Rig rig;
  rig.build_seed = seed;
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;

  // Palm: capsule along +y, built round then flattened in z and widened in x.
  hd::Spine palm_spine({Vec3(0, -25, 0), Vec3(0, 95, 0)});
  auto palm = hd::add_tube(verts, faces, palm_spine, 36.0, 36.0, 3, 4, 16,
                           Vec3(1, 0, 0));
  for (int v = palm.first_vertex; v < palm.first_vertex + palm.vertex_count; ++v) {
    verts[v].x() *= 1.18;
    verts[v].z() = verts[v].z() * 0.34 - 2.5;
  }

  // Fingers: thumb, index, middle, ring, little. The flexion axis is chosen
  // so a positive angle curls the finger toward the palm-normal side (+z);
  // the thumb instead curls toward a point above the index base (opposition).
  const Vec3 z = Vec3::UnitZ();
  auto finger_axis = [&](const Vec3& dir) { return dir.cross(z).normalized(); };
  Vec3 thumb_base(38, 18, 0);
  Vec3 thumb_dir = Vec3(0.80, 0.52, 0.33).normalized();
  Vec3 thumb_target = (Vec3(12, 95, 32) - thumb_base).normalized();
  Vec3 thumb_axis = thumb_dir.cross(thumb_target).normalized();
  auto deg = [](double d) { return d * M_PI / 180.0; };

  std::vector<hd::FingerSpec> fingers = {
      {thumb_base, thumb_dir, thumb_axis,
       {42, 33, 27}, {deg(14), deg(22), deg(18)}, 10.5, 8.0, 16, 9, 3, 8},
      {Vec3(33, 84, 0), Vec3(0.12, 0.99, 0).normalized(), Vec3(),
       {45, 26, 21}, {deg(22), deg(30), deg(15)}, 8.5, 6.5, 14, 10, 3, 6},
      {Vec3(11, 88, 0), Vec3(0.02, 1.0, 0).normalized(), Vec3(),
       {49, 29, 23}, {deg(20), deg(28), deg(14)}, 8.8, 6.8, 14, 10, 3, 6},
      {Vec3(-11, 86, 0), Vec3(-0.08, 1.0, 0).normalized(), Vec3(),
       {45, 27, 22}, {deg(22), deg(30), deg(15)}, 8.3, 6.4, 14, 10, 3, 6},
      {Vec3(-32, 80, 0), Vec3(-0.20, 0.97, 0).normalized(), Vec3(),
       {35, 22, 18}, {deg(24), deg(32), deg(16)}, 7.5, 5.8, 14, 10, 3, 6},
  };
  for (std::size_t f = 1; f < fingers.size(); ++f)
    fingers[f].axis = finger_axis(fingers[f].base_dir);

  rig.parent.assign(kJointCount, -1);
  rig.joint_rest = Tensor<double>::zeros({kJointCount, 3});
  std::vector<hd::TubePart> parts;
  std::vector<std::array<Vec3, 4>> chain_pts(5);  // MCP, PIP, DIP, TIP
  std::vector<std::array<double, 3>> joint_t(5);  // spine parameter per joint

  for (int f = 0; f < 5; ++f) {
    const auto& fs = fingers[f];
    Vec3 d1 = hd::rot_about(fs.axis, fs.rest[0]) * fs.base_dir;
    Vec3 pip = fs.mcp + fs.len[0] * d1;
    Vec3 d2 = hd::rot_about(fs.axis, fs.rest[1]) * d1;
    Vec3 dip = pip + fs.len[1] * d2;
    Vec3 d3 = hd::rot_about(fs.axis, fs.rest[2]) * d2;
    Vec3 tip = dip + fs.len[2] * d3;
    chain_pts[f] = {fs.mcp, pip, dip, tip};

    Vec3 start = fs.mcp - fs.embed * fs.base_dir;
    hd::Spine spine({start, fs.mcp, pip, dip, tip});
    parts.push_back(hd::add_tube(verts, faces, spine, fs.r0, fs.r1,
                                 fs.cap_rings, fs.body_rings, fs.segments,
                                 fs.axis));
    joint_t[f] = {fs.embed, fs.embed + fs.len[0], fs.embed + fs.len[0] + fs.len[1]};

    int base = 1 + 3 * f;
    rig.parent[base] = 0;
    rig.parent[base + 1] = base;
    rig.parent[base + 2] = base + 1;
    for (int j = 0; j < 3; ++j)
      for (int c = 0; c < 3; ++c)
        rig.joint_rest.at(base + j, c) = chain_pts[f][j][c];
  }

  require(static_cast<int>(verts.size()) == kVertexCount, "hand-rig",
          "vertex budget mismatch: got " + std::to_string(verts.size()));

  rig.template_vertices = Tensor<double>({kVertexCount, 3});
  for (int v = 0; v < kVertexCount; ++v)
    for (int c = 0; c < 3; ++c) rig.template_vertices.at(v, c) = verts[v][c];
  rig.faces.resize(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t i = 0; i < faces.size(); ++i)
    for (int c = 0; c < 3; ++c) rig.faces(static_cast<Eigen::Index>(i), c) = faces[i][c];

  // Skinning: palm verts ride the wrist; finger verts split between wrist and
  // the three finger joints through telescoped smoothsteps along the spine,
  // which keeps every row an exact partition of unity.
  rig.skin_weights = Tensor<double>::zeros({kVertexCount, kJointCount});
  for (int v = palm.first_vertex; v < palm.first_vertex + palm.vertex_count; ++v)
    rig.skin_weights.at(v, 0) = 1.0;
  const double tau = 7.0;
  for (int f = 0; f < 5; ++f) {
    const auto& part = parts[f];
    int base = 1 + 3 * f;
    auto weight_at = [&](double t, int vid) {
      double s1 = hd::smoothstep((t - (joint_t[f][0] - tau)) / (2 * tau));
      double s2 = hd::smoothstep((t - (joint_t[f][1] - tau)) / (2 * tau));
      double s3 = hd::smoothstep((t - (joint_t[f][2] - tau)) / (2 * tau));
      rig.skin_weights.at(vid, 0) = (1 - s1);
      rig.skin_weights.at(vid, base) = s1 * (1 - s2);
      rig.skin_weights.at(vid, base + 1) = s1 * s2 * (1 - s3);
      rig.skin_weights.at(vid, base + 2) = s1 * s2 * s3;
    };
    weight_at(0.0, part.pole0);
    for (std::size_t r = 0; r < part.rings.size(); ++r)
      for (int vid : part.rings[r]) weight_at(part.ring_t[r], vid);
    weight_at(part.ring_t.back() + fingers[f].r1, part.pole1);
  }

  // Keypoint regressor: wrist from the palm ring nearest y=0, finger joints
  // from the two rings bracketing each joint, fingertips from the end poles.
  rig.keypoint_regressor = Tensor<double>::zeros({kKeypointCount, kVertexCount});
  {
    double wrist_t = 25.0;  // palm spine starts at y = -25
    std::size_t best = 0;
    for (std::size_t r = 1; r < palm.ring_t.size(); ++r)
      if (std::abs(palm.ring_t[r] - wrist_t) < std::abs(palm.ring_t[best] - wrist_t))
        best = r;
    for (int vid : palm.rings[best])
      rig.keypoint_regressor.at(0, vid) = 1.0 / palm.rings[best].size();
  }
  for (int f = 0; f < 5; ++f) {
    const auto& part = parts[f];
    for (int j = 0; j < 3; ++j) {
      std::vector<std::pair<double, std::size_t>> by_dist;
      for (std::size_t r = 0; r < part.ring_t.size(); ++r)
        by_dist.emplace_back(std::abs(part.ring_t[r] - joint_t[f][j]), r);
      std::sort(by_dist.begin(), by_dist.end());
      int kp = 1 + 4 * f + j;
      for (int pick = 0; pick < 2; ++pick)
        for (int vid : part.rings[by_dist[pick].second])
          rig.keypoint_regressor.at(kp, vid) +=
              1.0 / (2.0 * part.rings[by_dist[pick].second].size());
    }
    rig.keypoint_regressor.at(1 + 4 * f + 3, part.pole1) = 1.0;
    rig.tip_vertex[f] = part.pole1;
  }

  // Recenter so the regressed wrist keypoint sits exactly at the origin.
  {
    Vec3 w = Vec3::Zero();
    for (int v = 0; v < kVertexCount; ++v)
      for (int c = 0; c < 3; ++c)
        w[c] += rig.keypoint_regressor.at(0, v) * rig.template_vertices.at(v, c);
    for (int v = 0; v < kVertexCount; ++v)
      for (int c = 0; c < 3; ++c) rig.template_vertices.at(v, c) -= w[c];
    for (int j = 0; j < kJointCount; ++j)
      for (int c = 0; c < 3; ++c) rig.joint_rest.at(j, c) -= w[c];
  }

  // Pose basis: designed synergy directions (full curl, thumb opposition,
  // per-finger curls, spread, joint-row curls) padded with seeded noise, then
  // orthonormalized; QR keeps each leading direction inside the span.
  {
    Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(kPoseDim, kThetaDim);
    auto put = [&](int col, int f, int j, const Vec3& a, double s) {
      for (int c = 0; c < 3; ++c) raw(3 * (3 * f + j) + c, col) += s * a[c];
    };
    const double curl[3] = {1.0, 1.1, 0.8};
    for (int f = 0; f < 5; ++f) {
      double fw = (f == 0) ? 0.7 : 1.0;
      for (int j = 0; j < 3; ++j) put(0, f, j, fingers[f].axis, fw * curl[j]);
    }
    put(1, 0, 0, fingers[0].axis, 1.2);
    put(1, 0, 1, fingers[0].axis, 1.0);
    put(1, 0, 2, fingers[0].axis, 0.7);
    for (int f = 0; f < 5; ++f)
      for (int j = 0; j < 3; ++j) put(2 + f, f, j, fingers[f].axis, curl[j]);
    const double spread[5] = {0.3, 1.0, 0.2, -0.4, -1.0};
    for (int f = 0; f < 5; ++f) put(7, f, 0, Vec3::UnitZ(), spread[f]);
    for (int f = 0; f < 5; ++f) put(8, f, 1, fingers[f].axis, 1.0);
    for (int f = 0; f < 5; ++f) put(9, f, 0, fingers[f].axis, 1.0);
    Rng rng(derive_seed(seed, "pose-basis", 0));
    for (int col = 10; col < kThetaDim; ++col)
      for (int r = 0; r < kPoseDim; ++r) raw(r, col) = rng.normal();

    Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(kPoseDim, kThetaDim);
    Eigen::MatrixXd r = qr.matrixQR().topRows(kThetaDim).triangularView<Eigen::Upper>();
    for (int col = 0; col < kThetaDim; ++col)
      if (r(col, col) < 0) q.col(col) *= -1.0;
    rig.pose_basis = Tensor<double>({kPoseDim, kThetaDim});
    for (int i = 0; i < kPoseDim; ++i)
      for (int j = 0; j < kThetaDim; ++j) rig.pose_basis.at(i, j) = q(i, j);
  }

  // Shape basis: column 0 is a global size field, the rest are sums of three
  // random Gaussian bumps. Every column is shifted so it leaves the regressed
  // wrist fixed, then scaled to an 8 mm peak per-vertex displacement (under
  // the published 10 mm bound, which skinning rotations cannot exceed since
  // they preserve per-vertex Euclidean norms).
  {
    rig.shape_basis = Tensor<double>({kVertexCount * 3, kBetaDim});
    Eigen::MatrixXd disp(kVertexCount, 3);
    for (int k = 0; k < kBetaDim; ++k) {
      disp.setZero();
      if (k == 0) {
        for (int v = 0; v < kVertexCount; ++v)
          for (int c = 0; c < 3; ++c) disp(v, c) = 0.05 * rig.template_vertices.at(v, c);
      } else {
        Rng rng(derive_seed(seed, "shape-basis", static_cast<std::uint64_t>(k)));
        for (int bump = 0; bump < 3; ++bump) {
          int cv = static_cast<int>(rng.below(kVertexCount));
          Vec3 center(rig.template_vertices.at(cv, 0), rig.template_vertices.at(cv, 1),
                      rig.template_vertices.at(cv, 2));
          double sigma = rng.uniform(15.0, 40.0);
          Vec3 dir(rng.normal(), rng.normal(), rng.normal());
          dir.normalize();
          double amp = rng.uniform(0.3, 1.0);
          for (int v = 0; v < kVertexCount; ++v) {
            Vec3 p(rig.template_vertices.at(v, 0), rig.template_vertices.at(v, 1),
                   rig.template_vertices.at(v, 2));
            double w = amp * std::exp(-(p - center).squaredNorm() / (2 * sigma * sigma));
            for (int c = 0; c < 3; ++c) disp(v, c) += w * dir[c];
          }
        }
      }
      Vec3 wrist_disp = Vec3::Zero();
      for (int v = 0; v < kVertexCount; ++v)
        for (int c = 0; c < 3; ++c)
          wrist_disp[c] += rig.keypoint_regressor.at(0, v) * disp(v, c);
      for (int v = 0; v < kVertexCount; ++v)
        for (int c = 0; c < 3; ++c) disp(v, c) -= wrist_disp[c];
      double peak = 0.0;
      for (int v = 0; v < kVertexCount; ++v)
        peak = std::max(peak, disp.row(v).norm());
      double gain = 8.0 / std::max(peak, 1e-12);
      for (int v = 0; v < kVertexCount; ++v)
        for (int c = 0; c < 3; ++c)
          rig.shape_basis.at(static_cast<std::int64_t>(3 * v + c), k) = gain * disp(v, c);
    }
  }

  // Contact zones: the three end-cap rings plus pole of each finger, and the
  // central +z pad of the palm.
  for (int f = 0; f < 5; ++f) {
    const auto& part = parts[f];
    std::vector<int> zone;
    for (std::size_t r = part.rings.size() - 3; r < part.rings.size(); ++r)
      zone.insert(zone.end(), part.rings[r].begin(), part.rings[r].end());
    zone.push_back(part.pole1);
    rig.contact_zones.push_back(std::move(zone));
  }
  {
    std::vector<int> palm_zone;
    for (int v = palm.first_vertex; v < palm.first_vertex + palm.vertex_count; ++v) {
      double x = rig.template_vertices.at(v, 0), y = rig.template_vertices.at(v, 1),
             zc = rig.template_vertices.at(v, 2);
      if (zc > 6.5 && std::abs(x) <= 25.0 && y >= 10.0 && y <= 70.0)
        palm_zone.push_back(v);
    }
    require(!palm_zone.empty(), "hand-rig", "palm contact zone came out empty");
    rig.contact_zones.push_back(std::move(palm_zone));
  }

  return rig;
}

// ---- typed rig (cached per-scalar constants for the forward pass) ---------

template <class T>
struct TypedRig {
  struct VertexWeight {
    int joint;
    T w;
  };
  struct Data {
    Eigen::Matrix<T, Eigen::Dynamic, 3, Eigen::RowMajor> tmpl;       // [778,3]
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> pose_basis;     // [45,30]
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> shape_basis;    // [2334,10]
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> keypoint_reg;   // [21,778]
    Eigen::Matrix<T, Eigen::Dynamic, 3, Eigen::RowMajor> joints;     // [16,3]
    std::vector<int> parent;
    std::vector<std::vector<VertexWeight>> weights;  // per vertex, sparse
    geo::FaceMat faces;
  };
  std::shared_ptr<const Data> d;

  static TypedRig make(const Rig& rig) {
    auto data = std::make_shared<Data>();
    data->tmpl.resize(kVertexCount, 3);
    for (int v = 0; v < kVertexCount; ++v)
      for (int c = 0; c < 3; ++c)
        data->tmpl(v, c) = static_cast<T>(rig.template_vertices.at(v, c));
    data->pose_basis.resize(kPoseDim, kThetaDim);
    for (int i = 0; i < kPoseDim; ++i)
      for (int j = 0; j < kThetaDim; ++j)
        data->pose_basis(i, j) = static_cast<T>(rig.pose_basis.at(i, j));
    data->shape_basis.resize(kVertexCount * 3, kBetaDim);
    for (int i = 0; i < kVertexCount * 3; ++i)
      for (int j = 0; j < kBetaDim; ++j)
        data->shape_basis(i, j) = static_cast<T>(rig.shape_basis.at(i, j));
    data->keypoint_reg.resize(kKeypointCount, kVertexCount);
    for (int i = 0; i < kKeypointCount; ++i)
      for (int v = 0; v < kVertexCount; ++v)
        data->keypoint_reg(i, v) = static_cast<T>(rig.keypoint_regressor.at(i, v));
    data->joints.resize(kJointCount, 3);
    for (int j = 0; j < kJointCount; ++j)
      for (int c = 0; c < 3; ++c)
        data->joints(j, c) = static_cast<T>(rig.joint_rest.at(j, c));
    data->parent = rig.parent;
    data->weights.resize(kVertexCount);
    for (int v = 0; v < kVertexCount; ++v)
      for (int j = 0; j < kJointCount; ++j) {
        double w = rig.skin_weights.at(v, j);
        if (w > 1e-12) data->weights[v].push_back({j, static_cast<T>(w)});
      }
    data->faces = rig.faces;
    return TypedRig{std::move(data)};
  }
};

namespace detail {

template <class T>
using Mat3 = Eigen::Matrix<T, 3, 3>;
template <class T>
using Vec3T = Eigen::Matrix<T, 3, 1>;

template <class T>
Mat3<T> rodrigues_t(const Vec3T<T>& a) {
  T th2 = a.squaredNorm();
  Mat3<T> K;
  K << T(0), -a.z(), a.y(), a.z(), T(0), -a.x(), -a.y(), a.x(), T(0);
  T c1, c2;
  if (th2 < T(1e-16)) {
    c1 = T(1) - th2 / T(6);
    c2 = T(0.5) - th2 / T(24);
  } else {
    T th = std::sqrt(th2);
    c1 = std::sin(th) / th;
    c2 = (T(1) - std::cos(th)) / th2;
  }
  return Mat3<T>::Identity() + c1 * K + c2 * (K * K);
}

template <class T>
Vec3T<T> rodrigues_backward_t(const Vec3T<T>& a, const Mat3<T>& R, const Mat3<T>& G) {
  T th2 = a.squaredNorm();
  auto skew = [](const Vec3T<T>& v) {
    Mat3<T> K;
    K << T(0), -v.z(), v.y(), v.z(), T(0), -v.x(), -v.y(), v.x(), T(0);
    return K;
  };
  Vec3T<T> g;
  if (th2 < T(1e-16)) {
    for (int k = 0; k < 3; ++k)
      g[k] = (skew(Vec3T<T>::Unit(k)).array() * G.array()).sum();
    return g;
  }
  Mat3<T> A = skew(a);
  for (int k = 0; k < 3; ++k) {
    Vec3T<T> v = a.cross((Mat3<T>::Identity() - R) * Vec3T<T>::Unit(k));
    Mat3<T> dR = ((a[k] * A + skew(v)) / th2) * R;
    g[k] = (dR.array() * G.array()).sum();
  }
  return g;
}

// Forward kinematics state for one evaluation.
template <class T>
struct FkState {
  std::array<Mat3<T>, kJointCount> r_local, r_global;
  std::array<Vec3T<T>, kJointCount> q;  // posed joint positions
};

template <class T>
FkState<T> run_fk(const typename TypedRig<T>::Data& d, const T* theta) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> th(kThetaDim);
  for (int i = 0; i < kThetaDim; ++i) th[i] = theta[i];
  Eigen::Matrix<T, Eigen::Dynamic, 1> alpha = d.pose_basis * th;

  FkState<T> st;
  st.r_local[0] = Mat3<T>::Identity();
  st.r_global[0] = Mat3<T>::Identity();
  st.q[0] = d.joints.row(0).transpose();
  for (int j = 1; j < kJointCount; ++j) {
    Vec3T<T> aj(alpha[3 * (j - 1)], alpha[3 * (j - 1) + 1], alpha[3 * (j - 1) + 2]);
    st.r_local[j] = rodrigues_t<T>(aj);
    int p = d.parent[j];
    st.r_global[j] = st.r_global[p] * st.r_local[j];
    Vec3T<T> dj = (d.joints.row(j) - d.joints.row(p)).transpose();
    st.q[j] = st.q[p] + st.r_global[p] * dj;
  }
  return st;
}

// Linear blend skinning of `shaped` [778*3] under an FK state, into out[778*3].
template <class T>
void run_lbs(const typename TypedRig<T>::Data& d, const FkState<T>& st,
             const T* shaped, T* out) {
  for (int v = 0; v < kVertexCount; ++v) {
    Vec3T<T> x(shaped[3 * v], shaped[3 * v + 1], shaped[3 * v + 2]);
    Vec3T<T> y = Vec3T<T>::Zero();
    for (const auto& vw : d.weights[v]) {
      Vec3T<T> pj = d.joints.row(vw.joint).transpose();
      y += vw.w * (st.r_global[vw.joint] * (x - pj) + st.q[vw.joint]);
    }
    out[3 * v] = y[0];
    out[3 * v + 1] = y[1];
    out[3 * v + 2] = y[2];
  }
}

}  // namespace detail

// ---- forward passes --------------------------------------------------------

template <class T>
struct HandOutput {
  Tensor<T> keypoints;  // [21,3], wrist row exactly zero
  Tensor<T> vertices;   // [778,3]
};

// Plain (tape-free) forward pass; theta [30], beta [10].
template <class T>
HandOutput<T> hand_forward(const TypedRig<T>& rig, const Tensor<T>& theta,
                           const Tensor<T>& beta) {
  require(theta.numel() == kThetaDim && beta.numel() == kBetaDim, "hand-model",
          "hand_forward: theta must have 30 entries and beta 10");
  const auto& d = *rig.d;

  Eigen::Matrix<T, Eigen::Dynamic, 1> b(kBetaDim);
  for (int i = 0; i < kBetaDim; ++i) b[i] = beta[i];
  Eigen::Matrix<T, Eigen::Dynamic, 1> disp = d.shape_basis * b;
  std::vector<T> shaped(kVertexCount * 3);
  for (int i = 0; i < kVertexCount * 3; ++i)
    shaped[i] = d.tmpl(i / 3, i % 3) + disp[i];

  auto st = detail::run_fk<T>(d, theta.data());
  Tensor<T> verts({kVertexCount, 3});
  detail::run_lbs<T>(d, st, shaped.data(), verts.data());

  Tensor<T> kp({kKeypointCount, 3});
  kp.mat() = d.keypoint_reg * verts.mat();
  for (int c = 0; c < 3; ++c) {
    T w = kp.at(0, c);
    for (int k = 0; k < kKeypointCount; ++k) kp.at(k, c) -= w;
    for (int v = 0; v < kVertexCount; ++v) verts.at(v, c) -= w;
  }
  return {std::move(kp), std::move(verts)};
}

// Double-precision convenience matching the published interface.
inline std::pair<Tensor<double>, geo::TriMesh> hand_forward(const Rig& rig,
                                                            const HandParams& p) {
  auto typed = TypedRig<double>::make(rig);
  auto out = hand_forward<double>(typed, p.theta, p.beta);
  geo::TriMesh mesh;
  mesh.vertices.resize(kVertexCount, 3);
  for (int v = 0; v < kVertexCount; ++v)
    for (int c = 0; c < 3; ++c) mesh.vertices(v, c) = out.vertices.at(v, c);
  mesh.faces = rig.faces;
  mesh.closed = geo::compute_closed(mesh);
  return {std::move(out.keypoints), std::move(mesh)};
}

namespace detail {

// Differentiable FK+LBS core: vertices [778,3] from theta [30] and shaped
// vertices [778,3]. The backward pass runs adjoints through LBS, the joint
// tree, and the exponential map analytically.
template <class T>
ad::Var<T> skin_op(const TypedRig<T>& rig, const ad::Var<T>& theta,
                   const ad::Var<T>& shaped) {
  const auto& d = *rig.d;
  auto st = std::make_shared<FkState<T>>(run_fk<T>(d, theta.value().data()));
  Tensor<T> out({kVertexCount, 3});
  run_lbs<T>(d, *st, shaped.value().data(), out.data());

  auto data = rig.d;  // keep the typed constants alive inside the closure
  return ad::detail::make_node<T>(
      std::move(out), {theta, shaped}, [theta, shaped, st, data](ad::Node<T>* n) {
        const auto& dd = *data;
        const T* g = n->grad.data();
        const T* x = shaped.value().data();

        if (shaped.node()->requires_grad) {
          Tensor<T> gx({kVertexCount, 3});
          for (int v = 0; v < kVertexCount; ++v) {
            Vec3T<T> gv(g[3 * v], g[3 * v + 1], g[3 * v + 2]);
            Vec3T<T> acc = Vec3T<T>::Zero();
            for (const auto& vw : dd.weights[v])
              acc += vw.w * (st->r_global[vw.joint].transpose() * gv);
            for (int c = 0; c < 3; ++c) gx.at(v, c) = acc[c];
          }
          ad::detail::accumulate(shaped.ptr(), gx);
        }

        if (theta.node()->requires_grad) {
          std::array<Mat3<T>, kJointCount> adj_r;
          std::array<Vec3T<T>, kJointCount> adj_q;
          for (int j = 0; j < kJointCount; ++j) {
            adj_r[j].setZero();
            adj_q[j].setZero();
          }
          for (int v = 0; v < kVertexCount; ++v) {
            Vec3T<T> gv(g[3 * v], g[3 * v + 1], g[3 * v + 2]);
            Vec3T<T> xv(x[3 * v], x[3 * v + 1], x[3 * v + 2]);
            for (const auto& vw : dd.weights[v]) {
              Vec3T<T> pj = dd.joints.row(vw.joint).transpose();
              adj_r[vw.joint] += vw.w * gv * (xv - pj).transpose();
              adj_q[vw.joint] += vw.w * gv;
            }
          }
          Eigen::Matrix<T, Eigen::Dynamic, 1> g_alpha(kPoseDim);
          for (int j = kJointCount - 1; j >= 1; --j) {
            int p = dd.parent[j];
            Vec3T<T> dj = (dd.joints.row(j) - dd.joints.row(p)).transpose();
            Mat3<T> adj_rl = st->r_global[p].transpose() * adj_r[j];
            adj_r[p] += adj_r[j] * st->r_local[j].transpose();
            adj_r[p] += adj_q[j] * dj.transpose();
            adj_q[p] += adj_q[j];
            Eigen::Matrix<T, Eigen::Dynamic, 1> th(kThetaDim);
            const T* tv = theta.value().data();
            for (int i = 0; i < kThetaDim; ++i) th[i] = tv[i];
            Vec3T<T> aj =
                (dd.pose_basis.middleRows(3 * (j - 1), 3) * th).eval();
            Vec3T<T> ga = rodrigues_backward_t<T>(aj, st->r_local[j], adj_rl);
            for (int c = 0; c < 3; ++c) g_alpha[3 * (j - 1) + c] = ga[c];
          }
          Eigen::Matrix<T, Eigen::Dynamic, 1> gt = dd.pose_basis.transpose() * g_alpha;
          Tensor<T> gtheta(theta.value().shape());
          for (int i = 0; i < kThetaDim; ++i) gtheta[i] = gt[i];
          ad::detail::accumulate(theta.ptr(), gtheta);
        }
      });
}

}  // namespace detail

// Differentiable forward pass: (keypoints [21,3], vertices [778,3]) from
// theta [30] and beta [10] graph variables. Wrist keypoint is exactly zero.
template <class T>
std::pair<ad::Var<T>, ad::Var<T>> hand_forward_ad(const TypedRig<T>& rig,
                                                  const ad::Var<T>& theta,
                                                  const ad::Var<T>& beta) {
  require(theta.value().numel() == kThetaDim && beta.value().numel() == kBetaDim,
          "hand-model", "hand_forward_ad: theta must have 30 entries and beta 10");
  const auto& d = *rig.d;

  Tensor<T> tmpl({kVertexCount, 3});
  for (int v = 0; v < kVertexCount; ++v)
    for (int c = 0; c < 3; ++c) tmpl.at(v, c) = d.tmpl(v, c);
  Tensor<T> sbasis({kVertexCount * 3, kBetaDim});
  for (int i = 0; i < kVertexCount * 3; ++i)
    for (int j = 0; j < kBetaDim; ++j) sbasis.at(i, j) = d.shape_basis(i, j);
  Tensor<T> kreg({kKeypointCount, kVertexCount});
  for (int i = 0; i < kKeypointCount; ++i)
    for (int v = 0; v < kVertexCount; ++v) kreg.at(i, v) = d.keypoint_reg(i, v);

  auto disp = ad::matmul(ad::Var<T>::constant(std::move(sbasis)),
                         ad::reshape(beta, {kBetaDim, 1}));
  auto shaped = ad::add(ad::Var<T>::constant(std::move(tmpl)),
                        ad::reshape(disp, {kVertexCount, 3}));
  auto skinned = detail::skin_op<T>(rig, theta, shaped);
  auto kp = ad::matmul(ad::Var<T>::constant(std::move(kreg)), skinned);
  auto wrist = ad::slice_rows(kp, 0, 1);
  auto kp_rel = ad::add_row_broadcast(kp, ad::neg(wrist));
  auto verts_rel = ad::add_row_broadcast(skinned, ad::neg(wrist));
  return {kp_rel, verts_rel};
}

// ---- regularizers ----------------------------------------------------------

// (l_theta, l_beta) = (|theta|^2, |beta|^2), anchored at the zero mean pose
// and shape.
inline std::pair<double, double> hand_regularizers(const HandParams& p) {
  double lt = 0, lb = 0;
  for (std::int64_t i = 0; i < p.theta.numel(); ++i) lt += p.theta[i] * p.theta[i];
  for (std::int64_t i = 0; i < p.beta.numel(); ++i) lb += p.beta[i] * p.beta[i];
  return {lt, lb};
}

template <class T>
std::pair<ad::Var<T>, ad::Var<T>> hand_regularizers_ad(const ad::Var<T>& theta,
                                                       const ad::Var<T>& beta) {
  return {ad::sum_all(ad::square(theta)), ad::sum_all(ad::square(beta))};
}

// ---- container I/O ---------------------------------------------------------

inline void save_rig(const Rig& rig, const std::filesystem::path& path) {
  container::Writer w;
  w.add("rig/template", rig.template_vertices.template cast<float>());
  Tensor<std::uint32_t> faces({rig.faces.rows(), 3});
  for (Eigen::Index f = 0; f < rig.faces.rows(); ++f)
    for (int c = 0; c < 3; ++c)
      faces.at(f, c) = static_cast<std::uint32_t>(rig.faces(f, c));
  w.add("rig/faces", faces);
  Tensor<std::uint32_t> parents({kJointCount});
  for (int j = 0; j < kJointCount; ++j)
    parents[j] = static_cast<std::uint32_t>(rig.parent[j]);
  w.add("rig/parents", parents);
  w.add("rig/joints", rig.joint_rest.template cast<float>());
  w.add("rig/weights", rig.skin_weights.template cast<float>());
  w.add("rig/pose_basis", rig.pose_basis.template cast<float>());
  w.add("rig/shape_basis", rig.shape_basis.template cast<float>());
  w.add("rig/keypoint_regressor", rig.keypoint_regressor.template cast<float>());
  Tensor<std::uint32_t> tips({5});
  for (int f = 0; f < 5; ++f) tips[f] = static_cast<std::uint32_t>(rig.tip_vertex[f]);
  w.add("rig/tip_vertices", tips);
  for (std::size_t z = 0; z < rig.contact_zones.size(); ++z) {
    Tensor<std::uint32_t> zone({static_cast<std::int64_t>(rig.contact_zones[z].size())});
    for (std::size_t i = 0; i < rig.contact_zones[z].size(); ++i)
      zone[static_cast<std::int64_t>(i)] =
          static_cast<std::uint32_t>(rig.contact_zones[z][i]);
    w.add("rig/zone_" + std::to_string(z), zone);
  }
  w.add_text("rig/meta", "{\"build_seed\":" + std::to_string(rig.build_seed) + "}");
  w.save(path);
}

inline Rig load_rig(const std::filesystem::path& path) {
  container::Archive a = container::Archive::load(path);
  Rig rig;
  rig.template_vertices = a.f32("rig/template").template cast<double>();
  auto faces = a.u32("rig/faces");
  rig.faces.resize(faces.dim(0), 3);
  for (std::int64_t f = 0; f < faces.dim(0); ++f)
    for (int c = 0; c < 3; ++c) rig.faces(f, c) = static_cast<int>(faces.at(f, c));
  auto parents = a.u32("rig/parents");
  rig.parent.resize(kJointCount);
  for (int j = 0; j < kJointCount; ++j)
    rig.parent[j] = static_cast<int>(static_cast<std::int32_t>(parents[j]));
  rig.joint_rest = a.f32("rig/joints").template cast<double>();
  rig.skin_weights = a.f32("rig/weights").template cast<double>();
  rig.pose_basis = a.f32("rig/pose_basis").template cast<double>();
  rig.shape_basis = a.f32("rig/shape_basis").template cast<double>();
  rig.keypoint_regressor = a.f32("rig/keypoint_regressor").template cast<double>();
  auto tips = a.u32("rig/tip_vertices");
  for (int f = 0; f < 5; ++f) rig.tip_vertex[f] = static_cast<int>(tips[f]);
  for (int z = 0; a.has("rig/zone_" + std::to_string(z)); ++z) {
    auto zone = a.u32("rig/zone_" + std::to_string(z));
    std::vector<int> idx(zone.numel());
    for (std::int64_t i = 0; i < zone.numel(); ++i) idx[i] = static_cast<int>(zone[i]);
    rig.contact_zones.push_back(std::move(idx));
  }
  auto meta = nlohmann::json::parse(a.text("rig/meta"));
  rig.build_seed = meta.at("build_seed").get<std::uint64_t>();
  return rig;
}

}  // namespace horec::hand
