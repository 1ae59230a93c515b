#pragma once

// Differentiable mesh operators built as custom autodiff nodes. Vertex
// arrays flow as rank-2 [V,3] variables; topology and target point sets are
// constants baked into the op.

#include <Eigen/Dense>

#include "horec/autodiff.hpp"
#include "horec/geometry.hpp"

namespace horec::ops {

template <class T>
using V3 = Eigen::Matrix<T, 3, 1>;

template <class T>
V3<T> row3(const Tensor<T>& t, std::int64_t r) {
  return V3<T>(t[3 * r], t[3 * r + 1], t[3 * r + 2]);
}

template <class T>
void add_row3(Tensor<T>& t, std::int64_t r, const V3<T>& v) {
  t[3 * r] += v[0];
  t[3 * r + 1] += v[1];
  t[3 * r + 2] += v[2];
}

// Symmetric Chamfer between variable vertices and a fixed point set:
// ½(mean_v min_p ‖v−p‖² + mean_p min_v ‖p−v‖²).
template <class T>
ad::Var<T> chamfer_to_points(const ad::Var<T>& verts, const Tensor<T>& pts) {
  require(verts.value().rank() == 2 && verts.value().dim(1) == 3, "mesh-ops",
          "chamfer_to_points: verts must be [V,3]");
  require(pts.rank() == 2 && pts.dim(1) == 3 && pts.dim(0) >= 1, "mesh-ops",
          "chamfer_to_points: pts must be [N,3]");
  std::int64_t V = verts.value().dim(0), N = pts.dim(0);
  require(V >= 1, "mesh-ops", "chamfer_to_points: empty vertex set");

  auto nearest_pt = std::make_shared<std::vector<std::int64_t>>(V);
  auto nearest_v = std::make_shared<std::vector<std::int64_t>>(N);
  T term1 = T(0);
  for (std::int64_t i = 0; i < V; ++i) {
    V3<T> v = row3(verts.value(), i);
    T best = std::numeric_limits<T>::infinity();
    std::int64_t arg = 0;
    for (std::int64_t j = 0; j < N; ++j) {
      T d = (v - row3(pts, j)).squaredNorm();
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    (*nearest_pt)[static_cast<std::size_t>(i)] = arg;
    term1 += best;
  }
  T term2 = T(0);
  for (std::int64_t j = 0; j < N; ++j) {
    V3<T> p = row3(pts, j);
    T best = std::numeric_limits<T>::infinity();
    std::int64_t arg = 0;
    for (std::int64_t i = 0; i < V; ++i) {
      T d = (p - row3(verts.value(), i)).squaredNorm();
      if (d < best) {
        best = d;
        arg = i;
      }
    }
    (*nearest_v)[static_cast<std::size_t>(j)] = arg;
    term2 += best;
  }
  Tensor<T> out({1});
  out[0] = T(0.5) * (term1 / static_cast<T>(V) + term2 / static_cast<T>(N));

  return ad::detail::make_node<T>(
      std::move(out), {verts}, [verts, pts, nearest_pt, nearest_v, V, N](ad::Node<T>* n) {
        T g = n->grad[0];
        Tensor<T> gv(verts.value().shape());
        for (std::int64_t i = 0; i < V; ++i) {
          V3<T> v = row3(verts.value(), i);
          V3<T> p = row3(pts, (*nearest_pt)[static_cast<std::size_t>(i)]);
          add_row3(gv, i, V3<T>(g / static_cast<T>(V) * (v - p)));
        }
        for (std::int64_t j = 0; j < N; ++j) {
          std::int64_t i = (*nearest_v)[static_cast<std::size_t>(j)];
          V3<T> v = row3(verts.value(), i);
          V3<T> p = row3(pts, j);
          add_row3(gv, i, V3<T>(g / static_cast<T>(N) * (v - p)));
        }
        ad::detail::accumulate(verts.ptr(), gv);
      });
}

// Variance of unique edge lengths over a fixed topology.
template <class T>
ad::Var<T> edge_length_variance(const ad::Var<T>& verts,
                                const std::vector<std::array<int, 2>>& edges) {
  require(!edges.empty(), "mesh-ops", "edge_length_variance: no edges");
  std::int64_t E = static_cast<std::int64_t>(edges.size());
  auto lens = std::make_shared<std::vector<T>>(edges.size());
  T mean = T(0);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    V3<T> d = row3(verts.value(), edges[e][0]) - row3(verts.value(), edges[e][1]);
    (*lens)[e] = d.norm();
    mean += (*lens)[e];
  }
  mean /= static_cast<T>(E);
  T var = T(0);
  for (T l : *lens) var += (l - mean) * (l - mean);
  var /= static_cast<T>(E);
  Tensor<T> out({1});
  out[0] = var;
  auto mean_sp = std::make_shared<T>(mean);

  return ad::detail::make_node<T>(
      std::move(out), {verts}, [verts, edges, lens, mean_sp, E](ad::Node<T>* n) {
        T g = n->grad[0];
        Tensor<T> gv(verts.value().shape());
        for (std::size_t e = 0; e < edges.size(); ++e) {
          T l = (*lens)[e];
          if (l <= T(0)) continue;
          T dvar_dl = T(2) / static_cast<T>(E) * (l - *mean_sp);
          V3<T> d = row3(verts.value(), edges[e][0]) - row3(verts.value(), edges[e][1]);
          V3<T> u = d / l;
          add_row3(gv, edges[e][0], V3<T>(g * dvar_dl * u));
          add_row3(gv, edges[e][1], V3<T>(-g * dvar_dl * u));
        }
        ad::detail::accumulate(verts.ptr(), gv);
      });
}

// Mean over connected vertices of ‖v − mean(1-ring)‖².
template <class T>
ad::Var<T> laplacian_smoothness(const ad::Var<T>& verts,
                                const std::vector<std::vector<int>>& rings) {
  std::int64_t V = verts.value().dim(0);
  require(static_cast<std::int64_t>(rings.size()) == V, "mesh-ops",
          "laplacian_smoothness: ring table size mismatch");
  std::int64_t counted = 0;
  T total = T(0);
  std::vector<V3<T>> resid(static_cast<std::size_t>(V), V3<T>::Zero());
  for (std::int64_t v = 0; v < V; ++v) {
    const auto& ring = rings[static_cast<std::size_t>(v)];
    if (ring.empty()) continue;
    V3<T> mean = V3<T>::Zero();
    for (int u : ring) mean += row3(verts.value(), u);
    mean /= static_cast<T>(ring.size());
    resid[static_cast<std::size_t>(v)] = row3(verts.value(), v) - mean;
    total += resid[static_cast<std::size_t>(v)].squaredNorm();
    ++counted;
  }
  require(counted > 0, "mesh-ops", "all vertices isolated");
  Tensor<T> out({1});
  out[0] = total / static_cast<T>(counted);
  auto resid_sp = std::make_shared<std::vector<V3<T>>>(std::move(resid));

  return ad::detail::make_node<T>(
      std::move(out), {verts}, [verts, rings, resid_sp, V, counted](ad::Node<T>* n) {
        T g = n->grad[0] * T(2) / static_cast<T>(counted);
        Tensor<T> gv(verts.value().shape());
        for (std::int64_t v = 0; v < V; ++v) {
          const auto& ring = rings[static_cast<std::size_t>(v)];
          if (ring.empty()) continue;
          V3<T> r = (*resid_sp)[static_cast<std::size_t>(v)];
          add_row3(gv, v, V3<T>(g * r));
          V3<T> spread = g * r / static_cast<T>(ring.size());
          for (int u : ring) add_row3(gv, u, V3<T>(-spread));
        }
        ad::detail::accumulate(verts.ptr(), gv);
      });
}

namespace detail {

template <class T>
struct ClosestHit {
  T dist = T(0);
  std::int64_t face = -1;
  V3<T> dir = V3<T>::Zero();   // (v - closest)/dist, zero when dist = 0
  V3<T> bary = V3<T>::Zero();
};

template <class T>
ClosestHit<T> closest_on_mesh(const V3<T>& p, const Tensor<T>& verts,
                              const Tensor<std::uint32_t>& faces,
                              const std::vector<Eigen::AlignedBox3d>& boxes) {
  T best = std::numeric_limits<T>::infinity();
  ClosestHit<T> hit;
  V3<T> closest = V3<T>::Zero();
  Eigen::Vector3d pd = p.template cast<double>();
  for (std::int64_t f = 0; f < faces.dim(0); ++f) {
    if (!boxes.empty() &&
        boxes[static_cast<std::size_t>(f)].squaredExteriorDistance(pd) >=
            static_cast<double>(best))
      continue;
    V3<T> a = row3(verts, faces[3 * f]);
    V3<T> b = row3(verts, faces[3 * f + 1]);
    V3<T> c = row3(verts, faces[3 * f + 2]);
    V3<T> q, bary;
    T d2 = geo::kernel::point_triangle_sq<T>(p, a, b, c, &q, &bary);
    if (d2 < best) {
      best = d2;
      hit.face = f;
      hit.bary = bary;
      closest = q;
    }
  }
  hit.dist = std::sqrt(best);
  if (hit.dist > T(0)) hit.dir = (p - closest) / hit.dist;
  return hit;
}

template <class T>
std::vector<Eigen::AlignedBox3d> face_boxes(const Tensor<T>& verts,
                                            const Tensor<std::uint32_t>& faces) {
  std::vector<Eigen::AlignedBox3d> boxes(static_cast<std::size_t>(faces.dim(0)));
  for (std::int64_t f = 0; f < faces.dim(0); ++f) {
    Eigen::AlignedBox3d box;
    for (int k = 0; k < 3; ++k) {
      V3<T> v = row3(verts, faces[3 * f + k]);
      box.extend(v.template cast<double>().eval());
    }
    boxes[static_cast<std::size_t>(f)] = box;
  }
  return boxes;
}

// Scatter -g_vec into the three face vertices, weighted by barycentrics, and
// +g_vec into the query vertex.
template <class T>
void scatter_hit(Tensor<T>& g_query, std::int64_t qi, Tensor<T>& g_mesh,
                 const Tensor<std::uint32_t>& faces, const ClosestHit<T>& hit,
                 const V3<T>& g_vec) {
  add_row3(g_query, qi, g_vec);
  for (int k = 0; k < 3; ++k)
    add_row3(g_mesh, static_cast<std::int64_t>(faces[3 * hit.face + k]),
             V3<T>(-hit.bary[k] * g_vec));
}

}  // namespace detail

// Attraction: mean over zone vertices of min(distance-to-surface, cap).
// Both the hand vertices and the target mesh vertices receive gradient.
template <class T>
ad::Var<T> contact_attraction(const ad::Var<T>& hand_verts,
                              const ad::Var<T>& obj_verts,
                              const Tensor<std::uint32_t>& obj_faces,
                              const std::vector<int>& zone, T cap) {
  if (zone.empty()) return ad::Var<T>::scalar(T(0));
  auto boxes = detail::face_boxes(obj_verts.value(), obj_faces);
  auto hits = std::make_shared<std::vector<detail::ClosestHit<T>>>();
  hits->reserve(zone.size());
  T total = T(0);
  for (int vi : zone) {
    auto hit = detail::closest_on_mesh(row3(hand_verts.value(), vi),
                                       obj_verts.value(), obj_faces, boxes);
    total += std::min(hit.dist, cap);
    hits->push_back(hit);
  }
  Tensor<T> out({1});
  out[0] = total / static_cast<T>(zone.size());

  return ad::detail::make_node<T>(
      std::move(out), {hand_verts, obj_verts},
      [hand_verts, obj_verts, obj_faces, zone, cap, hits](ad::Node<T>* n) {
        T g = n->grad[0] / static_cast<T>(zone.size());
        Tensor<T> gh(hand_verts.value().shape());
        Tensor<T> go(obj_verts.value().shape());
        for (std::size_t k = 0; k < zone.size(); ++k) {
          const auto& hit = (*hits)[k];
          if (hit.dist >= cap || hit.dist <= T(0) || hit.face < 0) continue;
          detail::scatter_hit(gh, zone[k], go, obj_faces, hit, V3<T>(g * hit.dir));
        }
        if (hand_verts.node()->requires_grad)
          ad::detail::accumulate(hand_verts.ptr(), gh);
        if (obj_verts.node()->requires_grad)
          ad::detail::accumulate(obj_verts.ptr(), go);
      });
}

// Repulsion: sum of distance-to-surface over hand vertices strictly inside
// the object, divided by the total hand vertex count. The inside indicator
// is treated as locally constant.
template <class T>
ad::Var<T> contact_repulsion(const ad::Var<T>& hand_verts,
                             const ad::Var<T>& obj_verts,
                             const Tensor<std::uint32_t>& obj_faces) {
  std::int64_t Vh = hand_verts.value().dim(0);
  require(Vh >= 1, "mesh-ops", "contact_repulsion: empty hand");
  auto boxes = detail::face_boxes(obj_verts.value(), obj_faces);
  Eigen::AlignedBox3d mesh_box;
  for (const auto& b : boxes) mesh_box.extend(b);

  auto inside_idx = std::make_shared<std::vector<std::int64_t>>();
  auto hits = std::make_shared<std::vector<detail::ClosestHit<T>>>();
  T total = T(0);
  for (std::int64_t i = 0; i < Vh; ++i) {
    V3<T> p = row3(hand_verts.value(), i);
    Eigen::Vector3d pd = p.template cast<double>();
    if (mesh_box.squaredExteriorDistance(pd) > 0.0) continue;
    int votes = 0;
    for (const auto& dir : geo::detail::parity_dirs()) {
      V3<T> dirT = dir.template cast<T>();
      int crossings = 0;
      for (std::int64_t f = 0; f < obj_faces.dim(0); ++f) {
        V3<T> a = row3(obj_verts.value(), obj_faces[3 * f]);
        V3<T> b = row3(obj_verts.value(), obj_faces[3 * f + 1]);
        V3<T> c = row3(obj_verts.value(), obj_faces[3 * f + 2]);
        if (geo::kernel::ray_triangle<T>(p, dirT, a, b, c)) ++crossings;
      }
      if (crossings % 2 == 1) ++votes;
    }
    if (votes < 2) continue;
    auto hit = detail::closest_on_mesh(p, obj_verts.value(), obj_faces, boxes);
    if (hit.dist <= T(1e-9)) continue;
    inside_idx->push_back(i);
    hits->push_back(hit);
    total += hit.dist;
  }
  Tensor<T> out({1});
  out[0] = total / static_cast<T>(Vh);

  return ad::detail::make_node<T>(
      std::move(out), {hand_verts, obj_verts},
      [hand_verts, obj_verts, obj_faces, inside_idx, hits, Vh](ad::Node<T>* n) {
        T g = n->grad[0] / static_cast<T>(Vh);
        Tensor<T> gh(hand_verts.value().shape());
        Tensor<T> go(obj_verts.value().shape());
        for (std::size_t k = 0; k < inside_idx->size(); ++k) {
          const auto& hit = (*hits)[k];
          if (hit.face < 0 || hit.dist <= T(0)) continue;
          detail::scatter_hit(gh, (*inside_idx)[k], go, obj_faces, hit,
                              V3<T>(g * hit.dir));
        }
        if (hand_verts.node()->requires_grad)
          ad::detail::accumulate(hand_verts.ptr(), gh);
        if (obj_verts.node()->requires_grad)
          ad::detail::accumulate(obj_verts.ptr(), go);
      });
}

}  // namespace horec::ops
