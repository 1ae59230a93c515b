#pragma once

// Object mesh decoder. A fixed-topology sphere template provides surface
// sample points; a point-conditioned MLP maps (feature, point) pairs straight
// to canonical-frame vertex positions (no residual off the template), and a
// small head predicts a rigid placement: metric scale through a softplus with
// a desk-scale prior, plus a camera-frame translation.
//
// The first decoder layer is evaluated in factorized form: the feature term
// is one matrix product per batch, the point term one product per call, and
// the two add by row broadcast. This equals running the MLP on every
// (feature, point) concatenation but never materializes the product grid.

#include <string>
#include <vector>

#include "horec/autodiff.hpp"
#include "horec/geometry.hpp"
#include "horec/nn.hpp"
#include "horec/primitives.hpp"

namespace horec::objbr {

struct Config {
  std::int64_t feature_dim = 512;
  std::vector<std::int64_t> decoder_hidden = {256, 256, 256};
  int template_subdivisions = 3;  // 642 vertices, 1280 faces
  std::int64_t head_hidden = 64;
  double scale_prior_mm = 45.0;   // objects span 40-120 mm across
  double depth_prior_mm = 550.0;  // middle of the working depth range
};

template <class T>
struct Prediction {
  std::vector<ad::Var<T>> canonical;  // per sample [V,3], unit-ish frame
  std::vector<ad::Var<T>> world;      // per sample [V,3], mm, camera frame
  ad::Var<T> translation;             // [N,3] mm
  ad::Var<T> scale;                   // [N,1] mm, strictly positive
};

template <class T>
class ObjectBranch {
 public:
  ObjectBranch() = default;

  ObjectBranch(nn::ParamStore<T>& ps, const std::string& prefix,
               const Config& cfg, Rng& rng)
      : cfg_(cfg) {
    template_ = geo::make_icosphere(cfg.template_subdivisions, 1.0);
    const auto v = template_.vertices.rows();
    points_ = Tensor<T>({v, 3});
    for (Eigen::Index i = 0; i < v; ++i)
      for (int k = 0; k < 3; ++k)
        points_.at(i, k) = static_cast<T>(template_.vertices(i, k));

    require(!cfg.decoder_hidden.empty(), "object-branch",
            "decoder needs at least one hidden layer");
    const auto h0 = cfg.decoder_hidden[0];
    wz_ = &ps.add(prefix + ".dec0z.w", {h0, cfg.feature_dim},
                  nn::init_he_uniform<T>(rng, cfg.feature_dim));
    bz_ = &ps.add(prefix + ".dec0z.b", {h0}, nn::init_zero<T>());
    wp_ = &ps.add(prefix + ".dec0p.w", {h0, 3}, nn::init_he_uniform<T>(rng, 3));

    std::int64_t in = h0;
    for (std::size_t i = 1; i < cfg.decoder_hidden.size(); ++i) {
      hidden_.emplace_back(ps, prefix + ".dec" + std::to_string(i), in,
                           cfg.decoder_hidden[i], rng);
      in = cfg.decoder_hidden[i];
    }
    out_ = nn::Linear<T>(ps, prefix + ".dec_out", in, 3, rng);

    head_trunk_ = nn::Linear<T>(ps, prefix + ".head0", cfg.feature_dim,
                                cfg.head_hidden, rng);
    head_out_ = nn::Linear<T>(ps, prefix + ".head1", cfg.head_hidden, 4, rng,
                              /*zero_out=*/true);
    auto& hb = head_out_.b->value();
    hb[2] = static_cast<T>(cfg.depth_prior_mm);
    hb[3] = static_cast<T>(cfg.scale_prior_mm);
  }

  const Config& config() const { return cfg_; }
  const geo::TriMesh& template_mesh() const { return template_; }
  const Tensor<T>& template_points() const { return points_; }

  Prediction<T> operator()(const ad::Var<T>& z) const {
    require(z.value().rank() == 2 && z.value().dim(1) == cfg_.feature_dim,
            "object-branch", "predict: dimension mismatch");
    const auto n = z.value().dim(0);

    auto zero3 = ad::Var<T>::constant(Tensor<T>({3}));
    auto zero_h0 = ad::Var<T>::constant(Tensor<T>({wp_->value().dim(0)}));
    auto z_part = ad::linear(z, wz_->var, bz_->var);  // [N,H0]
    auto p_part = ad::linear(ad::Var<T>::constant(points_), wp_->var, zero_h0);

    auto head = head_out_(ad::relu(head_trunk_(z)));  // [N,4]
    Prediction<T> pred;
    pred.translation = ad::slice_cols(head, 0, 3);
    pred.scale = ad::softplus(ad::slice_cols(head, 3, 1));

    pred.canonical.reserve(static_cast<std::size_t>(n));
    pred.world.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      auto h = ad::relu(ad::add_row_broadcast(p_part, ad::slice_rows(z_part, i, 1)));
      for (const auto& lin : hidden_) h = ad::relu(lin(h));
      auto canonical = out_(h);  // [V,3]
      auto world = ad::add_row_broadcast(
          ad::mul_scalar_var(canonical, ad::slice_rows(pred.scale, i, 1)),
          ad::slice_rows(pred.translation, i, 1));
      pred.canonical.push_back(canonical);
      pred.world.push_back(world);
    }
    return pred;
  }

  // Materializes one predicted sample as a double mesh on template topology.
  geo::TriMesh to_mesh(const Tensor<T>& verts) const {
    require(verts.rank() == 2 && verts.dim(0) == template_.vertices.rows() &&
                verts.dim(1) == 3,
            "object-branch", "to_mesh: dimension mismatch");
    geo::TriMesh m;
    m.vertices.resize(verts.dim(0), 3);
    for (Eigen::Index i = 0; i < m.vertices.rows(); ++i)
      for (int k = 0; k < 3; ++k)
        m.vertices(i, k) = static_cast<double>(verts.at(i, k));
    m.faces = template_.faces;
    m.closed = template_.closed;
    return m;
  }

 private:
  Config cfg_;
  geo::TriMesh template_;
  Tensor<T> points_;
  nn::Parameter<T>* wz_ = nullptr;
  nn::Parameter<T>* bz_ = nullptr;
  nn::Parameter<T>* wp_ = nullptr;
  std::vector<nn::Linear<T>> hidden_;
  nn::Linear<T> out_;
  nn::Linear<T> head_trunk_, head_out_;
};

}  // namespace horec::objbr
