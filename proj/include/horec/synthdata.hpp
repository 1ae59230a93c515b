#pragma once

// Procedural grasp scenes: a primitive object is placed against the parametric
// hand by iterative push-pull until at least two fingertip zones touch, then
// the scene is rendered by a deterministic software rasterizer into RGB,
// foreground-only depth, and a mask. Samples round-trip bit-exactly through
// the named-array container format; a split directory holds one file per
// sample, the hand rig, and a JSON manifest.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "horec/container.hpp"
#include "horec/core.hpp"
#include "horec/geometry.hpp"
#include "horec/hand_model.hpp"
#include "horec/primitives.hpp"
#include "horec/tensor.hpp"

namespace horec::synth {

// Pinhole camera. The camera frame equals the hand-root frame shifted by
// (0, 0, root_depth_mm): the wrist sits on the optical axis; the principal
// point is chosen per scene so the scene centroid projects to image center.
struct Camera {
  double fx = 96.0;
  double fy = 96.0;
  double cx = 48.0;
  double cy = 48.0;
  double root_depth_mm = 550.0;

  // root-relative point -> camera frame
  Eigen::Vector3d to_camera(const Eigen::Vector3d& p) const {
    return {p[0], p[1], p[2] + root_depth_mm};
  }
  // camera-frame point (z > 0) -> pixel coordinates (u right, v down)
  Eigen::Vector2d project(const Eigen::Vector3d& p) const {
    return {fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy};
  }
};

struct Config {
  int image_hw = 96;
  double focal_scale = 1.25;  // fx = fy = focal_scale * image width
  double root_depth_lo_mm = 400.0;
  double root_depth_hi_mm = 700.0;

  double obj_min_mm = 40.0;  // characteristic object diameter range
  double obj_max_mm = 120.0;
  std::array<double, 4> family_weights = {1.0, 1.0, 1.0, 1.0};  // sphere box cyl cone

  double contact_mm = 5.0;  // a fingertip zone this close counts as touching
  int min_contact_zones = 2;
  double penetration_allowance_mm = 6.0;
  double clean_grasp_prob = 0.4;  // fraction of scenes placed with zero penetration
  int placement_iters = 50;
  int max_object_resamples = 12;

  double theta_std = 0.35, theta_trunc = 0.7;
  double beta_std = 0.5, beta_trunc = 1.0;

  // dataset-level acceptance gates for the contact statistics, tuned once
  // against seed sweeps and frozen here
  double pd_positive_lo = 0.02;
  double pd_positive_hi = 0.98;
};

// One training/eval record. All 3D ground truth is hand-root-relative
// (wrist at the origin) and snapped to the f32 grid so that disk round trips
// are bit-exact; derived fields (centroid, scale) are recomputed on read.
struct SceneSample {
  Tensor<float> rgb;             // [3,H,W], values on the 1/255 grid
  Tensor<float> depth_gt;        // [H,W] mm, zero exactly off the mask
  Tensor<std::uint8_t> fg_mask;  // [H,W] 0/1
  Tensor<double> hand_joints_gt;  // [21,3], wrist row exactly zero
  geo::TriMesh hand_mesh_gt;
  hand::HandParams hand_params_gt;
  geo::TriMesh obj_mesh_gt;
  Eigen::Vector3d obj_centroid_gt = Eigen::Vector3d::Zero();
  double obj_scale_gt = 0.0;
  Camera camera;
  std::uint64_t seed = 0;
  double pd_mm = 0.0;             // hand-object penetration at generation
  double min_fingertip_mm = 0.0;  // closest fingertip-zone distance
};

struct DatasetManifest {
  std::string split;
  std::int64_t count = 0;
  int image_hw = 0;
  std::uint64_t seed = 0;
  int format_version = container::kFormatVersion;
  double pd_positive_fraction = 0.0;
  double mean_fingertip_mm = 0.0;
};

using LogFn = std::function<void(const std::string&)>;

// ---- rasterizer -------------------------------------------------------------

struct ShadedMesh {
  const geo::TriMesh* mesh = nullptr;  // camera-frame vertices, all z > 0
  Eigen::Vector3d albedo = Eigen::Vector3d(0.7, 0.7, 0.7);
};

struct Raster {
  Tensor<std::uint8_t> rgb8;   // [3,H,W]
  Tensor<float> depth;         // [H,W] mm, 0 on background
  Tensor<std::uint8_t> mask;   // [H,W]
};

namespace detail {

inline std::uint8_t quantize(double c) {
  double v = std::clamp(c, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::lround(v));
}

}  // namespace detail

// Perspective projection, z-buffered triangle fill with perspective-correct
// depth, flat Lambert shading under one directional light, solid background.
inline Raster rasterize(const std::vector<ShadedMesh>& meshes, const Camera& cam,
                        int h, int w, const Eigen::Vector3d& light_dir,
                        const Eigen::Vector3d& background) {
  require(h > 0 && w > 0, "raster", "rasterize: empty image");
  Raster out;
  out.rgb8 = Tensor<std::uint8_t>({3, h, w});
  out.depth = Tensor<float>::zeros({h, w});
  out.mask = Tensor<std::uint8_t>::zeros({h, w});
  std::array<std::uint8_t, 3> bg = {detail::quantize(background[0]),
                                    detail::quantize(background[1]),
                                    detail::quantize(background[2])};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.rgb8.at(c, i, j) = bg[static_cast<std::size_t>(c)];

  std::vector<double> zbuf(static_cast<std::size_t>(h) * static_cast<std::size_t>(w),
                           std::numeric_limits<double>::infinity());
  Eigen::Vector3d light = light_dir.normalized();

  for (const auto& sm : meshes) {
    require(sm.mesh != nullptr, "raster", "rasterize: null mesh");
    const geo::TriMesh& m = *sm.mesh;
    require(m.vertices.rows() == 0 || m.vertices.col(2).minCoeff() > 1e-6, "raster",
            "mesh behind camera");
    for (Eigen::Index f = 0; f < m.faces.rows(); ++f) {
      Eigen::Vector3d v0 = m.vertices.row(m.faces(f, 0));
      Eigen::Vector3d v1 = m.vertices.row(m.faces(f, 1));
      Eigen::Vector3d v2 = m.vertices.row(m.faces(f, 2));
      Eigen::Vector2d p0 = cam.project(v0), p1 = cam.project(v1), p2 = cam.project(v2);
      double area = (p1.x() - p0.x()) * (p2.y() - p0.y()) -
                    (p1.y() - p0.y()) * (p2.x() - p0.x());
      if (std::abs(area) < 1e-12) continue;

      Eigen::Vector3d n = (v1 - v0).cross(v2 - v0);
      double nn = n.norm();
      if (nn < 1e-12) continue;
      n /= nn;
      if (n.z() > 0) n = -n;  // the camera looks along +z; face it
      double lambert = std::max(0.0, n.dot(-light));
      double intensity = 0.25 + 0.75 * lambert;
      std::array<std::uint8_t, 3> col = {detail::quantize(sm.albedo[0] * intensity),
                                         detail::quantize(sm.albedo[1] * intensity),
                                         detail::quantize(sm.albedo[2] * intensity)};

      double ulo = std::min({p0.x(), p1.x(), p2.x()});
      double uhi = std::max({p0.x(), p1.x(), p2.x()});
      double vlo = std::min({p0.y(), p1.y(), p2.y()});
      double vhi = std::max({p0.y(), p1.y(), p2.y()});
      int j0 = std::max(0, static_cast<int>(std::floor(ulo - 0.5)));
      int j1 = std::min(w - 1, static_cast<int>(std::ceil(uhi - 0.5)));
      int i0 = std::max(0, static_cast<int>(std::floor(vlo - 0.5)));
      int i1 = std::min(h - 1, static_cast<int>(std::ceil(vhi - 0.5)));
      double iz0 = 1.0 / v0.z(), iz1 = 1.0 / v1.z(), iz2 = 1.0 / v2.z();

      for (int i = i0; i <= i1; ++i) {
        for (int j = j0; j <= j1; ++j) {
          double x = j + 0.5, y = i + 0.5;
          double w0 = ((p1.x() - x) * (p2.y() - y) - (p1.y() - y) * (p2.x() - x)) / area;
          double w1 = ((p2.x() - x) * (p0.y() - y) - (p2.y() - y) * (p0.x() - x)) / area;
          double w2 = 1.0 - w0 - w1;
          if (w0 < 0 || w1 < 0 || w2 < 0) continue;
          double z = 1.0 / (w0 * iz0 + w1 * iz1 + w2 * iz2);
          std::size_t px = static_cast<std::size_t>(i) * static_cast<std::size_t>(w) +
                           static_cast<std::size_t>(j);
          if (z >= zbuf[px]) continue;
          zbuf[px] = z;
          out.depth.at(i, j) = static_cast<float>(z);
          out.mask.at(i, j) = 1;
          for (int c = 0; c < 3; ++c)
            out.rgb8.at(c, i, j) = col[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  return out;
}

inline Tensor<float> rgb8_to_float(const Tensor<std::uint8_t>& rgb8) {
  Tensor<float> out(rgb8.shape());
  for (std::int64_t i = 0; i < rgb8.numel(); ++i)
    out[i] = static_cast<float>(rgb8[i]) / 255.0f;
  return out;
}

// ---- scene generation -------------------------------------------------------

namespace detail {

// Round to the nearest f32 value. The volatile store blocks the compiler from
// folding the narrow-widen pair away (observed with gcc 11 at -O3 -march=native),
// which would leave stored annotations off the f32 grid and break bit-exact IO.
inline double snap(double x) {
  volatile float f = static_cast<float>(x);
  return static_cast<double>(f);
}

inline void snap_tensor(Tensor<double>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = snap(t[i]);
}

inline void snap_verts(geo::VertMat& v) {
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (int k = 0; k < 3; ++k) v(i, k) = snap(v(i, k));
}

inline double trunc_normal(Rng& r, double stddev, double lim) {
  for (;;) {
    double x = r.normal(0.0, stddev);
    if (std::abs(x) <= lim) return x;
  }
}

inline Eigen::Matrix3d random_rotation(Rng& r) {
  Eigen::Vector4d q;
  do {
    for (int k = 0; k < 4; ++k) q[k] = r.normal();
  } while (q.norm() < 1e-9);
  q.normalize();
  return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
}

inline Eigen::Vector3d random_unit(Rng& r) {
  Eigen::Vector3d v;
  do {
    for (int k = 0; k < 3; ++k) v[k] = r.normal();
  } while (v.norm() < 1e-9);
  return v.normalized();
}

// origin-centered primitive with a random family, size, and orientation
inline geo::TriMesh sample_object(Rng& r, const Config& cfg) {
  double total = 0;
  for (double wgt : cfg.family_weights) total += wgt;
  require(total > 0, "invalid-argument", "sample_object: family weights sum to zero");
  double pick = r.uniform(0.0, total);
  int family = 0;
  double acc = 0;
  for (int k = 0; k < 4; ++k) {
    acc += cfg.family_weights[static_cast<std::size_t>(k)];
    if (pick < acc || k == 3) {
      family = k;
      break;
    }
  }
  double s = r.uniform(cfg.obj_min_mm, cfg.obj_max_mm);
  geo::TriMesh m;
  switch (family) {
    case 0: m = geo::make_icosphere(2, s / 2); break;
    case 1:
      m = geo::make_box(s * r.uniform(0.4, 1.0), s * r.uniform(0.4, 1.0),
                        s * r.uniform(0.4, 1.0));
      break;
    case 2:
      m = geo::make_cylinder(0.5 * s * r.uniform(0.5, 1.0), s * r.uniform(0.6, 1.0), 20);
      break;
    default:
      m = geo::make_cone(0.5 * s * r.uniform(0.6, 1.0), s * r.uniform(0.7, 1.0), 20);
      break;
  }
  Eigen::Matrix3d rot = random_rotation(r);
  m.vertices = m.vertices * rot.transpose();
  return m;
}

struct Placement {
  bool ok = false;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double min_zone_mm = 0;
  int iters = 0;
};

// Iterative push-pull: pull the object toward the two nearest fingertip zones
// until enough of them touch, push it back out along the grip direction when
// the hand sinks in deeper than the allowance.
inline Placement place_object(const geo::TriMesh& obj0, const geo::TriMesh& hand_mesh,
                              const std::vector<std::vector<int>>& zones, Rng& r,
                              const Config& cfg, double allowance_mm) {
  int n_tip = std::min<int>(5, static_cast<int>(zones.size()));
  require(n_tip >= cfg.min_contact_zones, "invalid-argument",
          "place_object: not enough fingertip zones");

  std::vector<geo::PointSet> zone_pts;
  std::vector<Eigen::Vector3d> zone_ctr;
  for (int k = 0; k < n_tip; ++k) {
    const auto& zone = zones[static_cast<std::size_t>(k)];
    geo::PointSet pts(static_cast<Eigen::Index>(zone.size()), 3);
    for (std::size_t i = 0; i < zone.size(); ++i)
      pts.row(static_cast<Eigen::Index>(i)) = hand_mesh.vertices.row(zone[i]);
    zone_ctr.push_back(pts.colwise().mean());
    zone_pts.push_back(pts);
  }

  // penetration guard: every zone vertex plus a coarse subsample of the whole
  // hand, so finger bodies and the palm cannot sink into the object unnoticed
  std::vector<Eigen::Index> guard;
  for (const auto& zone : zones)
    for (int v : zone) guard.push_back(v);
  for (Eigen::Index v = 0; v < hand_mesh.vertices.rows(); v += 6) guard.push_back(v);
  geo::PointSet guard_pts(static_cast<Eigen::Index>(guard.size()), 3);
  for (std::size_t i = 0; i < guard.size(); ++i)
    guard_pts.row(static_cast<Eigen::Index>(i)) = hand_mesh.vertices.row(guard[i]);

  Eigen::Vector3d grip = Eigen::Vector3d::Zero();
  for (const auto& c : zone_ctr) grip += c;
  grip /= static_cast<double>(zone_ctr.size());

  double circ_r = obj0.vertices.rowwise().norm().maxCoeff();
  Placement pl;
  pl.center = grip + Eigen::Vector3d(0, 0, 0.5 * circ_r) + random_unit(r) * r.uniform(0.0, 8.0);
  geo::TriMesh obj = obj0;
  for (int iter = 0; iter < cfg.placement_iters; ++iter) {
    pl.iters = iter + 1;
    obj.vertices = obj0.vertices;
    obj.vertices.rowwise() += pl.center.transpose();

    std::vector<double> zone_d(static_cast<std::size_t>(n_tip));
    for (int k = 0; k < n_tip; ++k) {
      auto d = geo::point_mesh_distance(zone_pts[static_cast<std::size_t>(k)], obj);
      zone_d[static_cast<std::size_t>(k)] = *std::min_element(d.begin(), d.end());
    }
    int contacts = 0;
    for (double d : zone_d)
      if (d <= cfg.contact_mm) ++contacts;

    auto inside = geo::inside_test(guard_pts, obj);
    auto dist = geo::point_mesh_distance(guard_pts, obj);
    double max_pen = 0;
    Eigen::Vector3d pen_ctr = Eigen::Vector3d::Zero();
    int pen_n = 0;
    for (Eigen::Index i = 0; i < guard_pts.rows(); ++i) {
      if (!inside[static_cast<std::size_t>(i)]) continue;
      max_pen = std::max(max_pen, dist[static_cast<std::size_t>(i)]);
      pen_ctr += guard_pts.row(i).transpose();
      ++pen_n;
    }

    bool pen_ok = allowance_mm > 0 ? max_pen <= allowance_mm : pen_n == 0;
    if (contacts >= cfg.min_contact_zones && pen_ok) {
      pl.ok = true;
      pl.min_zone_mm = *std::min_element(zone_d.begin(), zone_d.end());
      return pl;
    }

    if (!pen_ok) {
      pen_ctr /= static_cast<double>(pen_n);
      Eigen::Vector3d dir = pl.center - pen_ctr;
      if (dir.norm() < 1e-9) dir = pl.center - grip;
      if (dir.norm() < 1e-9) dir = random_unit(r);
      pl.center += dir.normalized() * (max_pen - 0.5 * allowance_mm + 0.8);
    } else {
      std::vector<int> order(static_cast<std::size_t>(n_tip));
      for (int k = 0; k < n_tip; ++k) order[static_cast<std::size_t>(k)] = k;
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        return zone_d[static_cast<std::size_t>(a)] < zone_d[static_cast<std::size_t>(b)];
      });
      Eigen::Vector3d target = 0.5 * (zone_ctr[static_cast<std::size_t>(order[0])] +
                                      zone_ctr[static_cast<std::size_t>(order[1])]);
      double gap = zone_d[static_cast<std::size_t>(order[1])];
      double step = std::clamp(gap - 0.5 * cfg.contact_mm, 0.5, 20.0);
      Eigen::Vector3d dir = target - pl.center;
      if (dir.norm() < 1e-9) dir = random_unit(r);
      pl.center += dir.normalized() * step;
    }
  }
  return pl;
}

}  // namespace detail

inline SceneSample generate_scene(std::uint64_t seed, const Config& cfg,
                                  const hand::Rig& rig, const LogFn& log = {}) {
  Rng r(derive_seed(seed, "scene"));
  int hw = cfg.image_hw;

  hand::HandParams params{Tensor<double>({hand::kThetaDim}),
                          Tensor<double>({hand::kBetaDim})};
  for (std::int64_t i = 0; i < hand::kThetaDim; ++i)
    params.theta[i] = detail::trunc_normal(r, cfg.theta_std, cfg.theta_trunc);
  for (std::int64_t i = 0; i < hand::kBetaDim; ++i)
    params.beta[i] = detail::trunc_normal(r, cfg.beta_std, cfg.beta_trunc);
  auto [joints, hand_mesh] = hand::hand_forward(rig, params);

  double allowance =
      r.uniform() < cfg.clean_grasp_prob
          ? 0.0
          : r.uniform(0.3 * cfg.penetration_allowance_mm, cfg.penetration_allowance_mm);
  geo::TriMesh obj0;
  detail::Placement pl;
  for (int attempt = 0; attempt <= cfg.max_object_resamples; ++attempt) {
    obj0 = detail::sample_object(r, cfg);
    pl = detail::place_object(obj0, hand_mesh, rig.contact_zones, r, cfg, allowance);
    if (pl.ok) break;
    if (log)
      log("placement did not settle for seed " + std::to_string(seed) +
          ", resampling object (attempt " + std::to_string(attempt + 1) + ")");
  }
  require(pl.ok, "placement",
          "object placement failed for seed " + std::to_string(seed));

  geo::TriMesh obj = obj0;
  obj.vertices.rowwise() += pl.center.transpose();

  SceneSample s;
  s.seed = seed;
  s.hand_mesh_gt = hand_mesh;
  detail::snap_verts(s.hand_mesh_gt.vertices);
  s.hand_joints_gt = joints;
  detail::snap_tensor(s.hand_joints_gt);
  s.hand_params_gt = params;
  detail::snap_tensor(s.hand_params_gt.theta);
  detail::snap_tensor(s.hand_params_gt.beta);
  s.obj_mesh_gt = obj;
  detail::snap_verts(s.obj_mesh_gt.vertices);

  auto canon = geo::canonicalize(s.obj_mesh_gt);
  s.obj_centroid_gt = canon.centroid;
  s.obj_scale_gt = canon.scale;
  s.pd_mm = geo::penetration_depth(s.hand_mesh_gt, s.obj_mesh_gt);
  double tip = std::numeric_limits<double>::infinity();
  for (int k = 0; k < std::min<int>(5, static_cast<int>(rig.contact_zones.size())); ++k) {
    const auto& zone = rig.contact_zones[static_cast<std::size_t>(k)];
    geo::PointSet pts(static_cast<Eigen::Index>(zone.size()), 3);
    for (std::size_t i = 0; i < zone.size(); ++i)
      pts.row(static_cast<Eigen::Index>(i)) = s.hand_mesh_gt.vertices.row(zone[i]);
    auto d = geo::point_mesh_distance(pts, s.obj_mesh_gt);
    tip = std::min(tip, *std::min_element(d.begin(), d.end()));
  }
  s.min_fingertip_mm = detail::snap(tip);

  s.camera.root_depth_mm =
      detail::snap(r.uniform(cfg.root_depth_lo_mm, cfg.root_depth_hi_mm));
  s.camera.fx = s.camera.fy = detail::snap(cfg.focal_scale * hw);
  Eigen::RowVector3d lo = s.hand_mesh_gt.vertices.colwise().minCoeff()
                              .cwiseMin(s.obj_mesh_gt.vertices.colwise().minCoeff());
  Eigen::RowVector3d hi = s.hand_mesh_gt.vertices.colwise().maxCoeff()
                              .cwiseMax(s.obj_mesh_gt.vertices.colwise().maxCoeff());
  Eigen::Vector3d ctr = 0.5 * (lo + hi).transpose();
  double cz = ctr.z() + s.camera.root_depth_mm;
  s.camera.cx = detail::snap(hw / 2.0 - s.camera.fx * ctr.x() / cz);
  s.camera.cy = detail::snap(hw / 2.0 - s.camera.fy * ctr.y() / cz);

  Eigen::Vector3d light;
  do {
    light = detail::random_unit(r);
  } while (light.z() < 0.3);  // lit from the camera side
  Eigen::Vector3d alb_hand(r.uniform(0.35, 0.85), r.uniform(0.25, 0.6),
                           r.uniform(0.2, 0.5));
  Eigen::Vector3d alb_obj(r.uniform(0.15, 0.9), r.uniform(0.15, 0.9),
                          r.uniform(0.15, 0.9));
  Eigen::Vector3d bg(r.uniform(0.0, 1.0), r.uniform(0.0, 1.0), r.uniform(0.0, 1.0));

  geo::TriMesh hand_cam = s.hand_mesh_gt;
  hand_cam.vertices.col(2).array() += s.camera.root_depth_mm;
  geo::TriMesh obj_cam = s.obj_mesh_gt;
  obj_cam.vertices.col(2).array() += s.camera.root_depth_mm;
  Raster ras = rasterize({{&hand_cam, alb_hand}, {&obj_cam, alb_obj}}, s.camera, hw,
                         hw, light, bg);
  s.rgb = rgb8_to_float(ras.rgb8);
  s.depth_gt = std::move(ras.depth);
  s.fg_mask = std::move(ras.mask);
  return s;
}

inline std::vector<SceneSample> generate_dataset(std::int64_t count,
                                                 std::uint64_t base_seed,
                                                 const Config& cfg,
                                                 const hand::Rig& rig,
                                                 const LogFn& log = {}) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i)
    out.push_back(generate_scene(
        derive_seed(base_seed, "sample", static_cast<std::uint64_t>(i)), cfg, rig, log));
  return out;
}

struct DatasetStats {
  double pd_positive_fraction = 0.0;
  double mean_fingertip_mm = 0.0;
};

inline DatasetStats dataset_stats(const std::vector<SceneSample>& samples) {
  DatasetStats st;
  if (samples.empty()) return st;
  std::int64_t pos = 0;
  double tip = 0;
  for (const auto& s : samples) {
    if (s.pd_mm > 0) ++pos;
    tip += s.min_fingertip_mm;
  }
  st.pd_positive_fraction = static_cast<double>(pos) / static_cast<double>(samples.size());
  st.mean_fingertip_mm = tip / static_cast<double>(samples.size());
  return st;
}

// ---- dataset files ----------------------------------------------------------

namespace detail {

inline Tensor<float> to_f32(const Tensor<double>& t) {
  Tensor<float> out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
  return out;
}

inline Tensor<double> to_f64(const Tensor<float>& t) {
  Tensor<double> out(t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<double>(t[i]);
  return out;
}

inline Tensor<float> verts_f32(const geo::VertMat& v) {
  Tensor<float> out({v.rows(), 3});
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (int k = 0; k < 3; ++k) out.at(i, k) = static_cast<float>(v(i, k));
  return out;
}

inline geo::VertMat verts_f64(const Tensor<float>& t) {
  geo::VertMat v(t.dim(0), 3);
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (int k = 0; k < 3; ++k) v(i, k) = static_cast<double>(t.at(i, k));
  return v;
}

inline Tensor<std::uint32_t> faces_u32(const geo::FaceMat& f) {
  Tensor<std::uint32_t> out({f.rows(), 3});
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (int k = 0; k < 3; ++k) out.at(i, k) = static_cast<std::uint32_t>(f(i, k));
  return out;
}

inline geo::FaceMat faces_i32(const Tensor<std::uint32_t>& t) {
  geo::FaceMat f(t.dim(0), 3);
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (int k = 0; k < 3; ++k) f(i, k) = static_cast<int>(t.at(i, k));
  return f;
}

}  // namespace detail

inline std::string sample_filename(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%06lld.bin", static_cast<long long>(index));
  return buf;
}

inline void write_sample(const SceneSample& s, const std::filesystem::path& path) {
  container::Writer w;
  Tensor<std::uint8_t> rgb8(s.rgb.shape());
  for (std::int64_t i = 0; i < s.rgb.numel(); ++i)
    rgb8[i] = static_cast<std::uint8_t>(std::lround(s.rgb[i] * 255.0f));
  w.add("rgb", rgb8);
  w.add("depth", s.depth_gt);
  w.add("mask", s.fg_mask, /*as_bool=*/true);
  w.add("hand/joints", detail::to_f32(s.hand_joints_gt));
  w.add("hand/verts", detail::verts_f32(s.hand_mesh_gt.vertices));
  w.add("hand/theta", detail::to_f32(s.hand_params_gt.theta));
  w.add("hand/beta", detail::to_f32(s.hand_params_gt.beta));
  w.add("obj/verts", detail::verts_f32(s.obj_mesh_gt.vertices));
  w.add("obj/faces", detail::faces_u32(s.obj_mesh_gt.faces));
  Tensor<float> cam({5});
  cam[0] = static_cast<float>(s.camera.fx);
  cam[1] = static_cast<float>(s.camera.fy);
  cam[2] = static_cast<float>(s.camera.cx);
  cam[3] = static_cast<float>(s.camera.cy);
  cam[4] = static_cast<float>(s.camera.root_depth_mm);
  w.add("camera", cam);
  nlohmann::json meta;
  meta["seed"] = s.seed;
  meta["pd_mm"] = s.pd_mm;
  meta["min_fingertip_mm"] = s.min_fingertip_mm;
  w.add_text("meta", meta.dump());
  w.save(path);
}

inline SceneSample read_sample(const std::filesystem::path& path,
                               const geo::FaceMat& hand_faces) {
  auto a = container::Archive::load(path);
  SceneSample s;
  s.rgb = rgb8_to_float(a.u8("rgb"));
  s.depth_gt = a.f32("depth");
  s.fg_mask = a.u8("mask");
  s.hand_joints_gt = detail::to_f64(a.f32("hand/joints"));
  s.hand_mesh_gt.vertices = detail::verts_f64(a.f32("hand/verts"));
  s.hand_mesh_gt.faces = hand_faces;
  s.hand_mesh_gt.closed = geo::compute_closed(s.hand_mesh_gt);
  s.hand_params_gt.theta = detail::to_f64(a.f32("hand/theta"));
  s.hand_params_gt.beta = detail::to_f64(a.f32("hand/beta"));
  s.obj_mesh_gt.vertices = detail::verts_f64(a.f32("obj/verts"));
  s.obj_mesh_gt.faces = detail::faces_i32(a.u32("obj/faces"));
  s.obj_mesh_gt.closed = geo::compute_closed(s.obj_mesh_gt);
  auto canon = geo::canonicalize(s.obj_mesh_gt);
  s.obj_centroid_gt = canon.centroid;
  s.obj_scale_gt = canon.scale;
  auto cam = a.f32("camera");
  require(cam.numel() == 5, "format", "camera entry must have 5 values");
  s.camera.fx = cam[0];
  s.camera.fy = cam[1];
  s.camera.cx = cam[2];
  s.camera.cy = cam[3];
  s.camera.root_depth_mm = cam[4];
  auto meta = nlohmann::json::parse(a.text("meta"));
  s.seed = meta.at("seed").get<std::uint64_t>();
  s.pd_mm = meta.at("pd_mm").get<double>();
  s.min_fingertip_mm = meta.at("min_fingertip_mm").get<double>();
  return s;
}

inline void write_dataset(const std::vector<SceneSample>& samples,
                          const hand::Rig& rig, const std::filesystem::path& dir,
                          const std::string& split, std::uint64_t seed) {
  require(!samples.empty(), "invalid-argument", "write_dataset: no samples");
  std::filesystem::create_directories(dir);
  hand::save_rig(rig, dir / "rig.bin");
  for (std::size_t i = 0; i < samples.size(); ++i)
    write_sample(samples[i], dir / sample_filename(static_cast<std::int64_t>(i)));
  auto st = dataset_stats(samples);
  nlohmann::json man;
  man["format_version"] = container::kFormatVersion;
  man["split"] = split;
  man["count"] = samples.size();
  man["image_hw"] = static_cast<int>(samples[0].depth_gt.dim(0));
  man["seed"] = seed;
  man["pd_positive_fraction"] = st.pd_positive_fraction;
  man["mean_fingertip_mm"] = st.mean_fingertip_mm;
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  require(f.good(), "io", "cannot write manifest in '" + dir.string() + "'");
  f << man.dump(2) << "\n";
  f.flush();
  require(f.good(), "io", "short write to manifest");
}

struct Dataset {
  DatasetManifest manifest;
  hand::Rig rig;
  std::vector<SceneSample> samples;
};

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  require(f.good(), "io", "cannot open manifest in '" + dir.string() + "'");
  nlohmann::json man;
  try {
    f >> man;
  } catch (const std::exception& e) {
    fail("format", "manifest in '" + dir.string() + "' is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  m.format_version = man.value("format_version", -1);
  require(m.format_version == container::kFormatVersion, "version",
          "manifest format_version " + std::to_string(m.format_version) +
              ", expected " + std::to_string(container::kFormatVersion));
  m.split = man.value("split", "");
  m.count = man.at("count").get<std::int64_t>();
  m.image_hw = man.at("image_hw").get<int>();
  m.seed = man.at("seed").get<std::uint64_t>();
  m.pd_positive_fraction = man.value("pd_positive_fraction", 0.0);
  m.mean_fingertip_mm = man.value("mean_fingertip_mm", 0.0);
  return m;
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = read_manifest(dir);
  std::int64_t present = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("sample_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".bin")
      ++present;
  }
  require(present == d.manifest.count, "manifest",
          "manifest inconsistent: " + std::to_string(d.manifest.count) +
              " samples declared, " + std::to_string(present) + " present in '" +
              dir.string() + "'");
  d.rig = hand::load_rig(dir / "rig.bin");
  require(d.rig.faces.rows() > 0, "format", "rig has no faces");
  d.samples.reserve(static_cast<std::size_t>(d.manifest.count));
  for (std::int64_t i = 0; i < d.manifest.count; ++i)
    d.samples.push_back(read_sample(dir / sample_filename(i), d.rig.faces));
  return d;
}

// Re-render the sample from its stored meshes and camera; the result must
// reproduce the stored depth and mask exactly (annotations and images are
// mutually consistent). Returns the largest absolute depth gap in mm.
inline double reprojection_gap_mm(const SceneSample& s) {
  int h = static_cast<int>(s.depth_gt.dim(0));
  int w = static_cast<int>(s.depth_gt.dim(1));
  geo::TriMesh hand_cam = s.hand_mesh_gt;
  hand_cam.vertices.col(2).array() += s.camera.root_depth_mm;
  geo::TriMesh obj_cam = s.obj_mesh_gt;
  obj_cam.vertices.col(2).array() += s.camera.root_depth_mm;
  Raster ras = rasterize({{&hand_cam, {0.5, 0.5, 0.5}}, {&obj_cam, {0.5, 0.5, 0.5}}},
                         s.camera, h, w, {0.0, 0.0, 1.0}, {0.0, 0.0, 0.0});
  double gap = 0;
  for (std::int64_t i = 0; i < s.depth_gt.numel(); ++i) {
    require(ras.mask[i] == s.fg_mask[i], "reprojection",
            "re-rendered mask disagrees with the stored mask");
    gap = std::max(gap, std::abs(static_cast<double>(ras.depth[i]) -
                                 static_cast<double>(s.depth_gt[i])));
  }
  return gap;
}

}  // namespace horec::synth
