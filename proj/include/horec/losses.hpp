#pragma once

// Composite training objectives. Each loss returns a Breakdown: a
// differentiable scalar total plus an insertion-ordered list of named term
// values for logging. Term values are plain doubles; only `total` carries
// gradient. One JSON line per step gives the training log.

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "horec/autodiff.hpp"
#include "horec/geometry.hpp"
#include "horec/mesh_ops.hpp"

namespace horec::loss {

struct Weights {
  // hand terms
  double mu_J = 0.167;
  double mu_beta = 0.167;
  double mu_theta = 0.167;
  // object terms
  double mu_T = 0.167;
  double mu_s = 0.167;
  double mu_L = 0.1;
  double mu_E = 2.0;
  // composite weighting
  double mu_H = 0.001;
  double mu_O = 0.001;
  double mu_C = 0.1;
  double lambda_ssim = 1000.0;
  // contact internals: the reference leaves the attraction/repulsion ratio
  // unspecified, so equal weighting is the default and both knobs are exposed
  double attraction_weight = 1.0;
  double repulsion_weight = 1.0;
  double contact_cap_mm = 20.0;
};

template <class T>
struct Breakdown {
  ad::Var<T> total;
  std::vector<std::pair<std::string, double>> terms;

  void add(const std::string& name, double v) { terms.emplace_back(name, v); }
  bool has(const std::string& name) const {
    for (const auto& [k, v] : terms)
      if (k == name) return true;
    return false;
  }
  double value(const std::string& name) const {
    for (const auto& [k, v] : terms)
      if (k == name) return v;
    fail("loss", "unknown loss term '" + name + "'");
  }
};

// One line of the training log: {"total":..,"L_J":..,...} in term order.
template <class T>
std::string json_line(const Breakdown<T>& b) {
  std::string out = "{\"total\":" + format_double(static_cast<double>(b.total.item()));
  for (const auto& [k, v] : b.terms) out += ",\"" + k + "\":" + format_double(v);
  out += "}";
  return out;
}

// ---- hand -------------------------------------------------------------------

// L_Hand = L_M + mu_J L_J + mu_beta ||beta||^2 + mu_theta ||theta||^2, with
// L_J / L_M mean squared Euclidean errors over joints / vertices. The vertex
// term is dropped when no mesh ground truth is given.
template <class T>
Breakdown<T> hand_loss(const ad::Var<T>& pred_joints, const Tensor<T>& gt_joints,
                       const std::optional<ad::Var<T>>& pred_mesh,
                       const std::optional<Tensor<T>>& gt_mesh,
                       const ad::Var<T>& theta, const ad::Var<T>& beta,
                       const Weights& w) {
  require(same_shape_dims(pred_joints.value(), gt_joints) &&
              gt_joints.rank() == 2 && gt_joints.dim(1) == 3,
          "loss", "hand_loss: joint shape mismatch");
  auto joints = static_cast<T>(gt_joints.dim(0));
  auto l_j = ad::scale(
      ad::sum_all(ad::square(ad::sub(pred_joints, ad::Var<T>::constant(gt_joints)))),
      T(1) / joints);

  auto l_beta = ad::sum_all(ad::square(beta));
  auto l_theta = ad::sum_all(ad::square(theta));

  auto total = ad::add(ad::scale(l_j, static_cast<T>(w.mu_J)),
                       ad::add(ad::scale(l_beta, static_cast<T>(w.mu_beta)),
                               ad::scale(l_theta, static_cast<T>(w.mu_theta))));

  Breakdown<T> out;
  if (pred_mesh.has_value() != gt_mesh.has_value())
    fail("loss", "hand_loss: mesh prediction and ground truth must pair up");
  if (pred_mesh) {
    require(same_shape_dims(pred_mesh->value(), *gt_mesh), "loss",
            "hand_loss: mesh shape mismatch");
    auto verts = static_cast<T>(gt_mesh->dim(0));
    auto l_m = ad::scale(
        ad::sum_all(ad::square(ad::sub(*pred_mesh, ad::Var<T>::constant(*gt_mesh)))),
        T(1) / verts);
    total = ad::add(total, l_m);
    out.add("L_M", static_cast<double>(l_m.item()));
  }
  out.total = total;
  out.add("L_J", static_cast<double>(l_j.item()));
  out.add("L_beta", static_cast<double>(l_beta.item()));
  out.add("L_theta", static_cast<double>(l_theta.item()));
  return out;
}

// ---- object -----------------------------------------------------------------

// Fixed-topology helper tables shared by the object losses.
struct MeshTopology {
  Tensor<std::uint32_t> faces;  // [F,3]
  std::vector<std::array<int, 2>> edges;
  std::vector<std::vector<int>> rings;
  bool closed = false;
};

inline MeshTopology make_topology(const geo::FaceMat& faces,
                                  Eigen::Index v_count) {
  MeshTopology t;
  t.faces = Tensor<std::uint32_t>({faces.rows(), 3});
  for (Eigen::Index f = 0; f < faces.rows(); ++f)
    for (int k = 0; k < 3; ++k)
      t.faces.at(f, k) = static_cast<std::uint32_t>(faces(f, k));
  t.edges = geo::unique_edges(faces);
  t.rings = geo::one_rings(v_count, faces);
  geo::TriMesh probe;
  probe.vertices = geo::VertMat::Zero(v_count, 3);
  probe.faces = faces;
  t.closed = geo::compute_closed(probe);
  return t;
}

constexpr std::int64_t kObjectGtSamples = 600;
constexpr std::uint64_t kObjectSampleSeed = 1234;

// L_Object = L_CD + L_CDcan + mu_T L_T + mu_s L_s + mu_L L_L + mu_E L_E.
// The camera-frame Chamfer compares assembled vertices against surface
// samples of the ground-truth mesh; the canonical-frame Chamfer compares the
// decoder output against the same samples mapped through the ground truth's
// own centroid/max-radius normalization, which also defines the translation
// and scale targets. Smoothness regularizers act on the canonical mesh.
template <class T>
Breakdown<T> object_loss(const ad::Var<T>& canonical, const ad::Var<T>& world,
                         const ad::Var<T>& translation, const ad::Var<T>& scale,
                         const geo::TriMesh& gt_mesh, const MeshTopology& topo,
                         const Weights& w,
                         std::int64_t n_samples = kObjectGtSamples,
                         std::uint64_t sample_seed = kObjectSampleSeed) {
  require(canonical.value().rank() == 2 && canonical.value().dim(1) == 3,
          "loss", "object_loss: canonical must be [V,3]");
  require(same_shape(canonical.value(), world.value()), "loss",
          "object_loss: world/canonical shape mismatch");
  require(translation.value().numel() == 3, "loss",
          "object_loss: translation must have 3 entries");
  require(scale.value().numel() == 1, "loss", "object_loss: scale must be scalar");

  geo::PointSet samples = geo::sample_surface(gt_mesh, n_samples, sample_seed);
  auto canon = geo::canonicalize(gt_mesh);

  Tensor<T> pts({samples.rows(), 3});
  Tensor<T> pts_can({samples.rows(), 3});
  for (Eigen::Index i = 0; i < samples.rows(); ++i)
    for (int k = 0; k < 3; ++k) {
      pts.at(i, k) = static_cast<T>(samples(i, k));
      pts_can.at(i, k) =
          static_cast<T>((samples(i, k) - canon.centroid[k]) / canon.scale);
    }

  auto l_cd = ops::chamfer_to_points(world, pts);
  auto l_cd_can = ops::chamfer_to_points(canonical, pts_can);

  Tensor<T> t_hat({1, 3});
  for (int k = 0; k < 3; ++k) t_hat.at(0, k) = static_cast<T>(canon.centroid[k]);
  auto l_t = ad::sum_all(ad::square(
      ad::sub(ad::reshape(translation, {1, 3}), ad::Var<T>::constant(t_hat))));
  auto l_s = ad::sum_all(ad::square(
      ad::add_const(ad::reshape(scale, {1}), static_cast<T>(-canon.scale))));

  auto l_l = ops::edge_length_variance(canonical, topo.edges);
  auto l_e = ops::laplacian_smoothness(canonical, topo.rings);

  auto total = ad::add(
      ad::add(l_cd, l_cd_can),
      ad::add(ad::add(ad::scale(l_t, static_cast<T>(w.mu_T)),
                      ad::scale(l_s, static_cast<T>(w.mu_s))),
              ad::add(ad::scale(l_l, static_cast<T>(w.mu_L)),
                      ad::scale(l_e, static_cast<T>(w.mu_E)))));

  Breakdown<T> out;
  out.total = total;
  out.add("L_CD", static_cast<double>(l_cd.item()));
  out.add("L_CDcan", static_cast<double>(l_cd_can.item()));
  out.add("L_T", static_cast<double>(l_t.item()));
  out.add("L_s", static_cast<double>(l_s.item()));
  out.add("L_L", static_cast<double>(l_l.item()));
  out.add("L_E", static_cast<double>(l_e.item()));
  return out;
}

// ---- contact ----------------------------------------------------------------

// Attraction pulls designated hand contact zones onto the object surface,
// capped so far-away grasps see a constant plateau; repulsion pushes
// penetrating hand vertices back out. Zones may be empty (attraction then
// contributes nothing); the warning callback fires once in that case.
template <class T>
Breakdown<T> contact_loss(const ad::Var<T>& hand_verts,
                          const ad::Var<T>& obj_verts,
                          const MeshTopology& obj_topo,
                          const std::vector<std::vector<int>>& zones,
                          const Weights& w,
                          const std::function<void(const std::string&)>& warn = {}) {
  require(hand_verts.value().rank() == 2 && hand_verts.value().dim(1) == 3,
          "loss", "contact_loss: hand vertices must be [V,3]");
  require(obj_topo.closed, "not-watertight", "inside test requires watertight mesh");

  std::vector<int> pooled;
  for (const auto& z : zones) pooled.insert(pooled.end(), z.begin(), z.end());
  for (int vi : pooled)
    require(vi >= 0 && vi < hand_verts.value().dim(0), "loss",
            "contact_loss: zone index out of range");

  ad::Var<T> attraction;
  if (pooled.empty()) {
    if (warn) warn("contact zones empty; attraction term skipped");
    attraction = ad::Var<T>::scalar(T(0));
  } else {
    attraction = ops::contact_attraction(hand_verts, obj_verts, obj_topo.faces,
                                         pooled, static_cast<T>(w.contact_cap_mm));
  }
  auto repulsion = ops::contact_repulsion(hand_verts, obj_verts, obj_topo.faces);

  auto total = ad::add(ad::scale(attraction, static_cast<T>(w.attraction_weight)),
                       ad::scale(repulsion, static_cast<T>(w.repulsion_weight)));

  Breakdown<T> out;
  out.total = total;
  out.add("attraction", static_cast<double>(attraction.item()));
  out.add("repulsion", static_cast<double>(repulsion.item()));
  return out;
}

// ---- composite --------------------------------------------------------------

// L = L_D + mu_H L_Hand + mu_O L_Object + mu_C L_Contact, skipping absent
// parts; stages train different subsets, so every part is optional, but at
// least one must be present.
template <class T>
Breakdown<T> total_loss(const std::optional<ad::Var<T>>& depth,
                        const std::optional<ad::Var<T>>& hand,
                        const std::optional<ad::Var<T>>& object,
                        const std::optional<ad::Var<T>>& contact,
                        const Weights& w) {
  Breakdown<T> out;
  std::optional<ad::Var<T>> acc;
  auto fold = [&](const std::optional<ad::Var<T>>& term, double weight,
                  const char* name) {
    if (!term) return;
    auto contrib = ad::scale(*term, static_cast<T>(weight));
    acc = acc ? ad::add(*acc, contrib) : contrib;
    out.add(name, static_cast<double>(term->item()));
  };
  fold(depth, 1.0, "L_D");
  fold(hand, w.mu_H, "L_Hand");
  fold(object, w.mu_O, "L_Object");
  fold(contact, w.mu_C, "L_Contact");
  require(acc.has_value(), "loss", "total_loss: no loss terms present");
  out.total = *acc;
  return out;
}

}  // namespace horec::loss
