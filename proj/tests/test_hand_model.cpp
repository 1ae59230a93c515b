#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "horec/hand_model.hpp"
#include "support/gradcheck.hpp"

using namespace horec;
namespace ts = horec::testsupport;

namespace {

const hand::Rig& rig0() {
  static hand::Rig rig = hand::build_rig(0);
  return rig;
}

const hand::TypedRig<double>& typed0() {
  static auto typed = hand::TypedRig<double>::make(rig0());
  return typed;
}

Tensor<double> unit(std::int64_t n, std::int64_t k) {
  auto t = Tensor<double>::zeros({n});
  t[k] = 1.0;
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("rig construction is deterministic and hits the published counts") {
  const auto& a = rig0();
  hand::Rig b = hand::build_rig(0);

  REQUIRE(a.template_vertices.dim(0) == 778);
  REQUIRE(a.skin_weights.dim(0) == 778);
  REQUIRE(a.skin_weights.dim(1) == 16);
  REQUIRE(a.pose_basis.dim(0) == 45);
  REQUIRE(a.pose_basis.dim(1) == 30);
  REQUIRE(a.shape_basis.dim(0) == 778 * 3);
  REQUIRE(a.keypoint_regressor.dim(0) == 21);
  REQUIRE(static_cast<int>(a.parent.size()) == 16);
  REQUIRE(a.parent[0] == -1);
  for (int j = 1; j < 16; ++j) {
    REQUIRE(a.parent[j] >= 0);
    REQUIRE(a.parent[j] < j);
  }

  for (std::int64_t i = 0; i < a.template_vertices.numel(); ++i)
    REQUIRE(a.template_vertices[i] == b.template_vertices[i]);
  for (std::int64_t i = 0; i < a.shape_basis.numel(); ++i)
    REQUIRE(a.shape_basis[i] == b.shape_basis[i]);
  for (std::int64_t i = 0; i < a.pose_basis.numel(); ++i)
    REQUIRE(a.pose_basis[i] == b.pose_basis[i]);
  REQUIRE(a.faces == b.faces);
  REQUIRE(a.contact_zones == b.contact_zones);

  hand::Rig c = hand::build_rig(1);
  double diff = 0;
  for (std::int64_t i = 0; i < a.shape_basis.numel(); ++i)
    diff = std::max(diff, std::abs(a.shape_basis[i] - c.shape_basis[i]));
  REQUIRE(diff > 1e-3);

  geo::TriMesh tmpl = a.template_mesh();
  geo::validate(tmpl);
  REQUIRE(tmpl.closed);
}

TEST_CASE("skinning weights are a nonnegative partition of unity") {
  const auto& rig = rig0();
  for (int v = 0; v < hand::kVertexCount; ++v) {
    double sum = 0;
    for (int j = 0; j < hand::kJointCount; ++j) {
      double w = rig.skin_weights.at(v, j);
      REQUIRE(w >= 0.0);
      sum += w;
    }
    REQUIRE(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("pose basis columns are orthonormal") {
  const auto& rig = rig0();
  Eigen::MatrixXd b(45, 30);
  for (int i = 0; i < 45; ++i)
    for (int j = 0; j < 30; ++j) b(i, j) = rig.pose_basis.at(i, j);
  Eigen::MatrixXd gram = b.transpose() * b;
  double err = (gram - Eigen::MatrixXd::Identity(30, 30)).cwiseAbs().maxCoeff();
  REQUIRE(err <= 1e-9);
}

TEST_CASE("shape basis columns are bounded root-stable displacement fields") {
  const auto& rig = rig0();
  for (int k = 0; k < hand::kBetaDim; ++k) {
    double peak = 0;
    Eigen::Vector3d wrist = Eigen::Vector3d::Zero();
    for (int v = 0; v < hand::kVertexCount; ++v) {
      Eigen::Vector3d d(rig.shape_basis.at(3 * v + 0, k),
                        rig.shape_basis.at(3 * v + 1, k),
                        rig.shape_basis.at(3 * v + 2, k));
      peak = std::max(peak, d.norm());
      wrist += rig.keypoint_regressor.at(0, v) * d;
    }
    REQUIRE(peak <= hand::kMaxShapeDisplacementMm);
    REQUIRE(peak >= 1.0);  // fields are non-degenerate
    REQUIRE(wrist.norm() <= 1e-9);
  }
}

TEST_CASE("zero pose reproduces the template exactly") {
  auto out = hand::hand_forward<double>(typed0(), Tensor<double>::zeros({30}),
                                        Tensor<double>::zeros({10}));
  const auto& rig = rig0();
  double verr = 0;
  for (std::int64_t i = 0; i < out.vertices.numel(); ++i)
    verr = std::max(verr, std::abs(out.vertices[i] - rig.template_vertices[i]));
  REQUIRE(verr <= 1e-9);

  // Rest keypoints are the regressor applied to the template.
  double kerr = 0;
  for (int k = 0; k < hand::kKeypointCount; ++k)
    for (int c = 0; c < 3; ++c) {
      double want = 0;
      for (int v = 0; v < hand::kVertexCount; ++v)
        want += rig.keypoint_regressor.at(k, v) * rig.template_vertices.at(v, c);
      kerr = std::max(kerr, std::abs(out.keypoints.at(k, c) - want));
    }
  REQUIRE(kerr <= 1e-9);
  for (int c = 0; c < 3; ++c) REQUIRE(out.keypoints.at(0, c) == 0.0);
}

TEST_CASE("unit shape coefficients add single basis columns") {
  const auto& rig = rig0();
  for (int k = 0; k < hand::kBetaDim; ++k) {
    auto out = hand::hand_forward<double>(typed0(), Tensor<double>::zeros({30}),
                                          unit(10, k));
    double err = 0;
    for (int v = 0; v < hand::kVertexCount; ++v)
      for (int c = 0; c < 3; ++c) {
        double want = rig.template_vertices.at(v, c) + rig.shape_basis.at(3 * v + c, k);
        err = std::max(err, std::abs(out.vertices.at(v, c) - want));
      }
    REQUIRE(err <= 1e-9);
  }
}

TEST_CASE("keypoint gradients match central finite differences") {
  Rng rng(11);
  auto ct = ts::random_tensor({21, 3}, rng);
  auto build = [&](const std::vector<ts::VarD>& leaves) {
    auto [kp, verts] = hand::hand_forward_ad<double>(typed0(), leaves[0], leaves[1]);
    (void)verts;
    return ad::sum_all(ad::mul(kp, ts::VarD::constant(ct)));
  };
  auto theta = ts::random_tensor({30}, rng, -0.8, 0.8);
  auto beta = ts::random_tensor({10}, rng, -1.5, 1.5);
  auto rep = ts::fd_check(build, {theta, beta}, 20);
  INFO("max rel err " << rep.max_rel_err);
  REQUIRE(rep.max_rel_err <= 1e-4);
}

TEST_CASE("gradient agreement holds across random parameter draws") {
  Rng rng(23);
  for (int draw = 0; draw < 20; ++draw) {
    auto ct_k = ts::random_tensor({21, 3}, rng);
    auto ct_v = ts::random_tensor({778, 3}, rng);
    auto build = [&](const std::vector<ts::VarD>& leaves) {
      auto [kp, verts] = hand::hand_forward_ad<double>(typed0(), leaves[0], leaves[1]);
      return ad::add(ad::sum_all(ad::mul(kp, ts::VarD::constant(ct_k))),
                     ad::sum_all(ad::mul(verts, ts::VarD::constant(ct_v))));
    };
    auto theta = ts::random_tensor({30}, rng, -1.2, 1.2);
    auto beta = ts::random_tensor({10}, rng, -2.0, 2.0);
    auto rep = ts::fd_check(build, {theta, beta}, 5, 1e-5,
                            derive_seed(99, "draw", draw));
    INFO("draw " << draw << " max rel err " << rep.max_rel_err);
    REQUIRE(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("wrist stays pinned at the origin and topology never changes") {
  Rng rng(5);
  const auto& rig = rig0();
  for (int draw = 0; draw < 20; ++draw) {
    auto theta = ts::random_tensor({30}, rng, -1.5, 1.5);
    auto beta = ts::random_tensor({10}, rng, -2.0, 2.0);
    auto out = hand::hand_forward<double>(typed0(), theta, beta);
    for (int c = 0; c < 3; ++c) REQUIRE(out.keypoints.at(0, c) == 0.0);
    REQUIRE(out.vertices.dim(0) == 778);
  }
  hand::HandParams p;
  p.theta = ts::random_tensor({30}, rng, -1.0, 1.0);
  p.beta = ts::random_tensor({10}, rng, -1.0, 1.0);
  auto [kp, mesh] = hand::hand_forward(rig, p);
  REQUIRE(mesh.faces == rig.faces);
  REQUIRE(mesh.closed);
}

TEST_CASE("shape displacement is bounded by the basis budget") {
  Rng rng(31);
  for (int draw = 0; draw < 5; ++draw) {
    auto theta = ts::random_tensor({30}, rng, -1.5, 1.5);
    auto beta = ts::random_tensor({10}, rng, -2.0, 2.0);
    auto shaped = hand::hand_forward<double>(typed0(), theta, beta);
    auto base = hand::hand_forward<double>(typed0(), theta,
                                           Tensor<double>::zeros({10}));
    double linf = 0, l1 = 0;
    for (std::int64_t i = 0; i < shaped.vertices.numel(); ++i)
      linf = std::max(linf, std::abs(shaped.vertices[i] - base.vertices[i]));
    for (std::int64_t i = 0; i < 10; ++i) l1 += std::abs(beta[i]);
    REQUIRE(linf <= hand::kMaxShapeDisplacementMm * l1 + 1e-9);
  }
}

TEST_CASE("regularizers match their closed forms") {
  hand::HandParams p = hand::HandParams::zero();
  auto [lt0, lb0] = hand::hand_regularizers(p);
  REQUIRE(lt0 == 0.0);
  REQUIRE(lb0 == 0.0);

  p.theta = Tensor<double>::full({30}, 1.0);
  p.beta = Tensor<double>::zeros({10});
  p.beta[0] = 3.0;
  p.beta[1] = 4.0;
  auto [lt, lb] = hand::hand_regularizers(p);
  REQUIRE(lt == Catch::Approx(30.0).margin(1e-12));
  REQUIRE(lb == Catch::Approx(25.0).margin(1e-12));

  auto tv = ad::Var<double>::leaf(p.theta, true);
  auto bv = ad::Var<double>::leaf(p.beta, true);
  auto [ltv, lbv] = hand::hand_regularizers_ad(tv, bv);
  ad::backward(ad::add(ltv, lbv));
  for (int i = 0; i < 30; ++i)
    REQUIRE(tv.grad()[i] == Catch::Approx(2.0 * p.theta[i]).margin(1e-12));
  for (int i = 0; i < 10; ++i)
    REQUIRE(bv.grad()[i] == Catch::Approx(2.0 * p.beta[i]).margin(1e-12));
}

TEST_CASE("typed forward and graph forward agree") {
  Rng rng(47);
  auto theta = ts::random_tensor({30}, rng, -1.0, 1.0);
  auto beta = ts::random_tensor({10}, rng, -1.0, 1.0);
  auto plain = hand::hand_forward<double>(typed0(), theta, beta);
  auto tv = ad::Var<double>::constant(theta);
  auto bv = ad::Var<double>::constant(beta);
  auto [kp, verts] = hand::hand_forward_ad<double>(typed0(), tv, bv);
  double err = 0;
  for (std::int64_t i = 0; i < plain.keypoints.numel(); ++i)
    err = std::max(err, std::abs(plain.keypoints[i] - kp.value()[i]));
  for (std::int64_t i = 0; i < plain.vertices.numel(); ++i)
    err = std::max(err, std::abs(plain.vertices[i] - verts.value()[i]));
  REQUIRE(err <= 1e-12);

  // The 32-bit instantiation tracks the 64-bit one to float precision.
  auto typed_f = hand::TypedRig<float>::make(rig0());
  auto out_f = hand::hand_forward<float>(typed_f, theta.cast<float>(),
                                         beta.cast<float>());
  double ferr = 0;
  for (std::int64_t i = 0; i < plain.vertices.numel(); ++i)
    ferr = std::max(ferr, std::abs(plain.vertices[i] -
                                   static_cast<double>(out_f.vertices[i])));
  REQUIRE(ferr <= 1e-2);
}

TEST_CASE("contact zones sit on fingertips and palm pad") {
  const auto& rig = rig0();
  REQUIRE(rig.contact_zones.size() == 6);
  for (const auto& zone : rig.contact_zones) {
    REQUIRE(!zone.empty());
    for (int v : zone) {
      REQUIRE(v >= 0);
      REQUIRE(v < hand::kVertexCount);
    }
  }
  for (int f = 0; f < 5; ++f) {
    Eigen::Vector3d tip(rig.template_vertices.at(rig.tip_vertex[f], 0),
                        rig.template_vertices.at(rig.tip_vertex[f], 1),
                        rig.template_vertices.at(rig.tip_vertex[f], 2));
    for (int v : rig.contact_zones[f]) {
      Eigen::Vector3d p(rig.template_vertices.at(v, 0), rig.template_vertices.at(v, 1),
                        rig.template_vertices.at(v, 2));
      REQUIRE((p - tip).norm() <= 25.0);
    }
  }
  REQUIRE(rig.contact_zones[5].size() >= 10);
  for (int v : rig.contact_zones[5])
    REQUIRE(rig.template_vertices.at(v, 2) > 5.0);
}

TEST_CASE("rig survives container round trips at 32-bit precision") {
  const auto& rig = rig0();
  auto dir = std::filesystem::temp_directory_path() / "horec_rig_test";
  std::filesystem::create_directories(dir);
  auto path = dir / "rig.bin";
  hand::save_rig(rig, path);
  hand::Rig back = hand::load_rig(path);

  REQUIRE(back.build_seed == rig.build_seed);
  REQUIRE(back.faces == rig.faces);
  REQUIRE(back.parent == rig.parent);
  REQUIRE(back.contact_zones == rig.contact_zones);
  REQUIRE(back.tip_vertex == rig.tip_vertex);
  for (std::int64_t i = 0; i < rig.template_vertices.numel(); ++i)
    REQUIRE(back.template_vertices[i] ==
            static_cast<double>(static_cast<float>(rig.template_vertices[i])));
  for (std::int64_t i = 0; i < rig.skin_weights.numel(); ++i)
    REQUIRE(back.skin_weights[i] ==
            static_cast<double>(static_cast<float>(rig.skin_weights[i])));

  auto path2 = dir / "rig2.bin";
  hand::save_rig(back, path2);
  // A rewrite of the loaded rig is byte-identical: 32-bit storage is a fixed
  // point after one round trip.
  REQUIRE(slurp(path2) == slurp(path));
  std::filesystem::remove_all(dir);
}
