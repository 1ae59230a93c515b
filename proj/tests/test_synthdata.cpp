#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "horec/synthdata.hpp"

using namespace horec;
namespace fs = std::filesystem;

namespace {

const hand::Rig& shared_rig() {
  static hand::Rig rig = hand::build_rig(7);
  return rig;
}

const std::vector<synth::SceneSample>& shared_batch() {
  static std::vector<synth::SceneSample> batch =
      synth::generate_dataset(40, 0, synth::Config{}, shared_rig());
  return batch;
}

template <class T>
bool tensors_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("horec_synth_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("rasterizer z-buffer fixtures") {
  synth::Camera cam;
  cam.fx = cam.fy = 120.0;
  cam.cx = cam.cy = 48.0;

  geo::TriMesh tri;
  tri.vertices.resize(3, 3);
  tri.vertices << -150, -150, 500, 400, -150, 500, -150, 400, 500;
  tri.faces.resize(1, 3);
  tri.faces << 0, 1, 2;

  SECTION("single triangle covering the center pixel") {
    auto r = synth::rasterize({{&tri, {0.8, 0.2, 0.2}}}, cam, 96, 96, {0, 0, 1},
                              {0.1, 0.1, 0.1});
    REQUIRE(r.mask.at(48, 48) == 1);
    REQUIRE(std::abs(r.depth.at(48, 48) - 500.0) <= 1e-3);
  }

  SECTION("two overlapping triangles, nearer wins") {
    geo::TriMesh near = tri;
    near.vertices.col(2).setConstant(400.0);
    auto r = synth::rasterize({{&tri, {0.8, 0.2, 0.2}}, {&near, {0.2, 0.8, 0.2}}},
                              cam, 96, 96, {0, 0, 1}, {0, 0, 0});
    REQUIRE(std::abs(r.depth.at(48, 48) - 400.0) <= 1e-3);
    auto r2 = synth::rasterize({{&near, {0.2, 0.8, 0.2}}, {&tri, {0.8, 0.2, 0.2}}},
                               cam, 96, 96, {0, 0, 1}, {0, 0, 0});
    REQUIRE(std::abs(r2.depth.at(48, 48) - 400.0) <= 1e-3);
  }

  SECTION("empty scene") {
    auto r = synth::rasterize({}, cam, 32, 32, {0, 0, 1}, {0.25, 0.5, 0.75});
    for (std::int64_t i = 0; i < r.mask.numel(); ++i) {
      REQUIRE(r.mask[i] == 0);
      REQUIRE(r.depth[i] == 0.0f);
    }
    REQUIRE(r.rgb8.at(0, 5, 5) == static_cast<std::uint8_t>(std::lround(0.25 * 255)));
    REQUIRE(r.rgb8.at(1, 5, 5) == static_cast<std::uint8_t>(std::lround(0.5 * 255)));
    REQUIRE(r.rgb8.at(2, 5, 5) == static_cast<std::uint8_t>(std::lround(0.75 * 255)));
  }

  SECTION("mesh behind camera is rejected") {
    geo::TriMesh bad = tri;
    bad.vertices(1, 2) = -5.0;
    REQUIRE_THROWS_WITH(
        synth::rasterize({{&bad, {0.5, 0.5, 0.5}}}, cam, 32, 32, {0, 0, 1}, {0, 0, 0}),
        Catch::Matchers::ContainsSubstring("mesh behind camera"));
  }

  SECTION("bitwise deterministic") {
    auto a = synth::rasterize({{&tri, {0.6, 0.3, 0.1}}}, cam, 64, 64, {0.3, -0.2, 0.9},
                              {0.4, 0.4, 0.4});
    auto b = synth::rasterize({{&tri, {0.6, 0.3, 0.1}}}, cam, 64, 64, {0.3, -0.2, 0.9},
                              {0.4, 0.4, 0.4});
    REQUIRE(tensors_equal(a.rgb8, b.rgb8));
    REQUIRE(tensors_equal(a.depth, b.depth));
    REQUIRE(tensors_equal(a.mask, b.mask));
  }
}

TEST_CASE("scene generation is deterministic per seed") {
  synth::Config cfg;
  auto a = synth::generate_scene(123, cfg, shared_rig());
  auto b = synth::generate_scene(123, cfg, shared_rig());
  REQUIRE(tensors_equal(a.rgb, b.rgb));
  REQUIRE(tensors_equal(a.depth_gt, b.depth_gt));
  REQUIRE(tensors_equal(a.fg_mask, b.fg_mask));
  REQUIRE(tensors_equal(a.hand_joints_gt, b.hand_joints_gt));
  REQUIRE(a.hand_mesh_gt.vertices == b.hand_mesh_gt.vertices);
  REQUIRE(a.obj_mesh_gt.vertices == b.obj_mesh_gt.vertices);
  REQUIRE(a.obj_centroid_gt == b.obj_centroid_gt);
  REQUIRE(a.obj_scale_gt == b.obj_scale_gt);
  REQUIRE(a.camera.root_depth_mm == b.camera.root_depth_mm);
  REQUIRE(a.pd_mm == b.pd_mm);

  auto c = synth::generate_scene(124, cfg, shared_rig());
  REQUIRE_FALSE(tensors_equal(a.rgb, c.rgb));
}

TEST_CASE("scene construction invariants") {
  const auto& batch = shared_batch();
  synth::Config cfg;
  const auto& rig = shared_rig();

  for (std::size_t idx = 0; idx < batch.size(); ++idx) {
    INFO("sample " << idx << " seed " << batch[idx].seed);
    const auto& s = batch[idx];

    // wrist exactly at the origin
    for (int k = 0; k < 3; ++k) REQUIRE(s.hand_joints_gt.at(0, k) == 0.0);

    // stored centroid/scale equal a fresh canonicalization of the stored mesh
    auto canon = geo::canonicalize(s.obj_mesh_gt);
    REQUIRE((canon.centroid - s.obj_centroid_gt).norm() <= 1e-6);
    REQUIRE(std::abs(canon.scale - s.obj_scale_gt) <= 1e-6);

    // depth positive exactly on the mask
    for (std::int64_t i = 0; i < s.depth_gt.numel(); ++i) {
      if (s.fg_mask[i])
        REQUIRE(s.depth_gt[i] > 0.0f);
      else
        REQUIRE(s.depth_gt[i] == 0.0f);
    }

    // grasp: at least two fingertip zones within the contact threshold
    int zones_touching = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 5; ++k) {
      const auto& zone = rig.contact_zones[static_cast<std::size_t>(k)];
      geo::PointSet pts(static_cast<Eigen::Index>(zone.size()), 3);
      for (std::size_t i = 0; i < zone.size(); ++i)
        pts.row(static_cast<Eigen::Index>(i)) = s.hand_mesh_gt.vertices.row(zone[i]);
      auto d = geo::point_mesh_distance(pts, s.obj_mesh_gt);
      double dk = *std::min_element(d.begin(), d.end());
      best = std::min(best, dk);
      if (dk <= cfg.contact_mm + 1e-3) ++zones_touching;
    }
    REQUIRE(zones_touching >= cfg.min_contact_zones);
    REQUIRE(std::abs(best - s.min_fingertip_mm) <= 1e-5);

    // rgb lives on the 1/255 grid
    for (std::int64_t i = 0; i < std::min<std::int64_t>(s.rgb.numel(), 512); ++i) {
      float v = s.rgb[i];
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
      REQUIRE(std::abs(v * 255.0f - std::lround(v * 255.0f)) <= 1e-4f);
    }
  }
}

TEST_CASE("annotations and images are mutually consistent") {
  const auto& batch = shared_batch();
  for (std::size_t idx = 0; idx < 8; ++idx) {
    INFO("sample " << idx);
    const auto& s = batch[idx];
    REQUIRE(synth::reprojection_gap_mm(s) == 0.0);

    // hand vertices project into hand-covered or hand-occluded pixels
    int h = static_cast<int>(s.depth_gt.dim(0));
    int w = static_cast<int>(s.depth_gt.dim(1));
    geo::TriMesh hand_cam = s.hand_mesh_gt;
    hand_cam.vertices.col(2).array() += s.camera.root_depth_mm;
    auto hand_only = synth::rasterize({{&hand_cam, {0.5, 0.5, 0.5}}}, s.camera, h, w,
                                      {0, 0, 1}, {0, 0, 0});
    for (std::int64_t i = 0; i < hand_only.mask.numel(); ++i) {
      if (!hand_only.mask[i]) continue;
      REQUIRE(s.fg_mask[i] == 1);
      REQUIRE(s.depth_gt[i] <= hand_only.depth[i] + 0.5f);
    }
  }
}

TEST_CASE("contact statistics sit inside the generator gates") {
  const auto& batch = shared_batch();
  synth::Config cfg;
  auto st = synth::dataset_stats(batch);
  INFO("pd fraction " << st.pd_positive_fraction << " mean tip "
                      << st.mean_fingertip_mm);
  REQUIRE(st.pd_positive_fraction > cfg.pd_positive_lo);
  REQUIRE(st.pd_positive_fraction < cfg.pd_positive_hi);
  REQUIRE(st.mean_fingertip_mm >= 0.0);
  REQUIRE(st.mean_fingertip_mm <= cfg.contact_mm);
}

TEST_CASE("placement fails loudly under an impossible budget") {
  synth::Config cfg;
  cfg.min_contact_zones = 5;
  cfg.contact_mm = 0.01;
  cfg.clean_grasp_prob = 1.0;
  cfg.placement_iters = 1;
  cfg.max_object_resamples = 0;
  REQUIRE_THROWS_WITH(synth::generate_scene(9, cfg, shared_rig()),
                      Catch::Matchers::ContainsSubstring("placement failed"));
}

TEST_CASE("dataset round trip is bit-exact") {
  auto dir = fresh_dir("roundtrip");
  std::vector<synth::SceneSample> subset(shared_batch().begin(),
                                         shared_batch().begin() + 6);
  synth::write_dataset(subset, shared_rig(), dir, "train", 0);

  auto ds = synth::read_dataset(dir);
  REQUIRE(ds.manifest.split == "train");
  REQUIRE(ds.manifest.count == 6);
  REQUIRE(ds.manifest.image_hw == 96);
  REQUIRE(ds.manifest.seed == 0);
  auto st = synth::dataset_stats(subset);
  REQUIRE(ds.manifest.pd_positive_fraction == st.pd_positive_fraction);
  REQUIRE(ds.manifest.mean_fingertip_mm == st.mean_fingertip_mm);
  REQUIRE(ds.samples.size() == 6);

  for (std::size_t i = 0; i < 6; ++i) {
    INFO("sample " << i);
    const auto& a = subset[i];
    const auto& b = ds.samples[i];
    REQUIRE(tensors_equal(a.rgb, b.rgb));
    REQUIRE(tensors_equal(a.depth_gt, b.depth_gt));
    REQUIRE(tensors_equal(a.fg_mask, b.fg_mask));
    REQUIRE(tensors_equal(a.hand_joints_gt, b.hand_joints_gt));
    REQUIRE(a.hand_mesh_gt.vertices == b.hand_mesh_gt.vertices);
    REQUIRE(a.hand_mesh_gt.faces == b.hand_mesh_gt.faces);
    REQUIRE(tensors_equal(a.hand_params_gt.theta, b.hand_params_gt.theta));
    REQUIRE(tensors_equal(a.hand_params_gt.beta, b.hand_params_gt.beta));
    REQUIRE(a.obj_mesh_gt.vertices == b.obj_mesh_gt.vertices);
    REQUIRE(a.obj_mesh_gt.faces == b.obj_mesh_gt.faces);
    REQUIRE(b.obj_mesh_gt.closed);
    REQUIRE(a.obj_centroid_gt == b.obj_centroid_gt);
    REQUIRE(a.obj_scale_gt == b.obj_scale_gt);
    REQUIRE(a.camera.fx == b.camera.fx);
    REQUIRE(a.camera.cx == b.camera.cx);
    REQUIRE(a.camera.cy == b.camera.cy);
    REQUIRE(a.camera.root_depth_mm == b.camera.root_depth_mm);
    REQUIRE(a.seed == b.seed);
    REQUIRE(a.pd_mm == b.pd_mm);
    REQUIRE(a.min_fingertip_mm == b.min_fingertip_mm);
  }
}

TEST_CASE("dataset corruption is detected and named") {
  auto dir = fresh_dir("corrupt");
  std::vector<synth::SceneSample> subset(shared_batch().begin(),
                                         shared_batch().begin() + 3);
  synth::write_dataset(subset, shared_rig(), dir, "test", 1);

  SECTION("payload byte flip trips the checksum") {
    auto victim = dir / synth::sample_filename(2);
    auto size = fs::file_size(victim);
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size - 8));
    char c;
    f.seekg(static_cast<std::streamoff>(size - 8));
    f.get(c);
    f.seekp(static_cast<std::streamoff>(size - 8));
    f.put(static_cast<char>(c ^ 0x40));
    f.close();
    try {
      (void)synth::read_dataset(dir);
      FAIL("expected a checksum error");
    } catch (const Error& e) {
      REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("checksum mismatch"));
      REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("sample_000002"));
    }
  }

  SECTION("missing sample file makes the manifest inconsistent") {
    fs::remove(dir / synth::sample_filename(1));
    REQUIRE_THROWS_WITH(synth::read_dataset(dir),
                        Catch::Matchers::ContainsSubstring("manifest inconsistent"));
  }

  SECTION("format version mismatch is a distinct error") {
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    f << R"({"format_version": 99, "split": "test", "count": 3, "image_hw": 96, "seed": 1})";
    f.close();
    REQUIRE_THROWS_WITH(synth::read_dataset(dir),
                        Catch::Matchers::ContainsSubstring("format_version 99"));
  }

  SECTION("truncated sample file is reported as truncated") {
    fs::resize_file(dir / synth::sample_filename(0), 100);
    REQUIRE_THROWS_WITH(synth::read_dataset(dir),
                        Catch::Matchers::ContainsSubstring("truncated"));
  }
}
