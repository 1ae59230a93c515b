#pragma once

// Image-side networks: the monocular depth estimator with its masked
// L1 + inverse-SSIM loss, and the two-branch RGB-D feature encoders with the
// shared-encoder ablation variant. Encoders are reduced-width residual
// networks trained from scratch; the depth decoder alternates 5x5 and 1x1
// convolutions with ReLU activations and nearest-neighbor upsampling.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "horec/autodiff.hpp"
#include "horec/core.hpp"
#include "horec/nn.hpp"
#include "horec/tensor.hpp"

namespace horec::percept {

constexpr double kLambdaSsim = 1000.0;      // inverse-SSIM weight denominator
constexpr double kSsimFloor = 1e-4;         // keeps 1/SSIM finite
constexpr double kDepthInputNormMm = 1000.0;  // depth channel scale at encode
constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

// Single-image ground-truth depth: millimeters, zero outside the mask.
struct DepthMap {
  Tensor<float> depth;          // [H,W]
  Tensor<std::uint8_t> valid;   // [H,W]
};

// ---- encoder ---------------------------------------------------------------

struct EncoderConfig {
  int in_channels = 4;
  std::vector<int> widths = {8, 12, 24, 48};
  int blocks_per_stage = 1;
  int feature_dim = 512;
  int norm_groups = 4;
  int input_hw = 96;
};

// Stem (3x3, stride 2) + residual stages with strided transitions; the head
// is global average pooling into a linear feature. 16x total downsampling.
template <class T>
struct Encoder {
  EncoderConfig cfg;
  nn::Conv2d<T> stem;
  nn::GroupNorm<T> stem_norm;
  std::vector<std::vector<nn::ResidualBlock<T>>> stages;
  std::vector<nn::Conv2d<T>> downs;
  std::vector<nn::GroupNorm<T>> down_norms;
  nn::Linear<T> head;
  bool with_head = true;

  Encoder() = default;
  Encoder(nn::ParamStore<T>& ps, const std::string& prefix, EncoderConfig cfg_,
          Rng& rng, bool with_head_ = true)
      : cfg(std::move(cfg_)), with_head(with_head_) {
    require(cfg.input_hw % 16 == 0 && cfg.input_hw >= 16, "perception",
            "encoder input size must be a multiple of 16");
    require(cfg.widths.size() == 4, "perception", "encoder expects 4 stage widths");
    stem = nn::Conv2d<T>(ps, prefix + ".stem", cfg.in_channels, cfg.widths[0], 3,
                         2, 1, rng);
    stem_norm = nn::GroupNorm<T>(ps, prefix + ".stem_norm", cfg.widths[0],
                                 cfg.norm_groups);
    for (int s = 0; s < 4; ++s) {
      std::vector<nn::ResidualBlock<T>> blocks;
      for (int b = 0; b < cfg.blocks_per_stage; ++b)
        blocks.emplace_back(ps, prefix + ".s" + std::to_string(s) + ".b" +
                                    std::to_string(b),
                            cfg.widths[s], cfg.norm_groups, rng);
      stages.push_back(std::move(blocks));
      if (s < 3) {
        downs.emplace_back(ps, prefix + ".down" + std::to_string(s),
                           cfg.widths[s], cfg.widths[s + 1], 3, 2, 1, rng);
        down_norms.emplace_back(ps, prefix + ".down_norm" + std::to_string(s),
                                cfg.widths[s + 1], cfg.norm_groups);
      }
    }
    if (with_head)
      head = nn::Linear<T>(ps, prefix + ".head", cfg.widths[3], cfg.feature_dim,
                           rng);
  }

  // [N,C,H,W] -> [N, widths[3], H/16, W/16]
  ad::Var<T> backbone(const ad::Var<T>& x) const {
    require(x.value().rank() == 4 && x.value().dim(1) == cfg.in_channels,
            "perception", "encode: dimension mismatch");
    auto h = ad::relu(stem_norm(stem(x)));
    for (int s = 0; s < 4; ++s) {
      for (const auto& block : stages[s]) h = block(h);
      if (s < 3) h = ad::relu(down_norms[s](downs[s](h)));
    }
    return h;
  }

  // [N,C,H,W] -> [N, feature_dim]
  ad::Var<T> features(const ad::Var<T>& x) const {
    require(with_head, "perception", "this encoder has no feature head");
    return head(ad::global_avg_pool(backbone(x)));
  }
};

// ---- depth estimator -------------------------------------------------------

struct DepthNetConfig {
  EncoderConfig encoder;                      // forced to 3 input channels
  std::vector<int> decoder_widths = {32, 16, 8, 6};
  double output_scale_mm = 1000.0;
  double final_bias = 0.45;  // pre-scale prior, roughly 450 mm scenes
};

// Depth from RGB: residual encoder to 1/16 resolution, then four rounds of
// [nearest x2 upsample, 5x5 conv, ReLU, 1x1 conv, ReLU]; the last 1x1 maps to
// one channel and a fixed scale converts to millimeters (outputs stay >= 0).
template <class T>
struct DepthNet {
  DepthNetConfig cfg;
  Encoder<T> enc;
  std::vector<nn::Conv2d<T>> conv5, conv1;

  DepthNet() = default;
  DepthNet(nn::ParamStore<T>& ps, const std::string& prefix, DepthNetConfig cfg_,
           Rng& rng)
      : cfg(std::move(cfg_)) {
    require(cfg.decoder_widths.size() == 4, "perception",
            "depth decoder expects 4 widths");
    cfg.encoder.in_channels = 3;
    enc = Encoder<T>(ps, prefix + ".enc", cfg.encoder, rng, /*with_head=*/false);
    int in_ch = cfg.encoder.widths[3];
    for (int i = 0; i < 4; ++i) {
      int w = cfg.decoder_widths[i];
      conv5.emplace_back(ps, prefix + ".dec5_" + std::to_string(i), in_ch, w, 5,
                         1, 2, rng);
      int out = (i == 3) ? 1 : w;
      conv1.emplace_back(ps, prefix + ".dec1_" + std::to_string(i), w, out, 1, 1,
                         0, rng);
      in_ch = w;
    }
    conv1.back().b->value()[0] = T(cfg.final_bias);
  }

  // [N,3,H,W] in [0,1] -> depth [N,1,H,W] in mm, nonnegative.
  ad::Var<T> operator()(const ad::Var<T>& rgb) const {
    require(rgb.value().rank() == 4 && rgb.value().dim(1) == 3 &&
                rgb.value().dim(2) == cfg.encoder.input_hw &&
                rgb.value().dim(3) == cfg.encoder.input_hw,
            "perception", "estimate_depth: dimension mismatch");
    auto h = enc.backbone(rgb);
    for (int i = 0; i < 4; ++i) {
      h = ad::upsample_nearest2(h);
      h = ad::relu(conv5[i](h));
      h = ad::relu(conv1[i](h));
    }
    return ad::scale(h, T(cfg.output_scale_mm));
  }
};

// ---- SSIM and the depth loss ------------------------------------------------

// Normalized Gaussian window as a [1,1,k,k] conv kernel.
template <class T>
Tensor<T> gaussian_window(int k = kSsimWindow, double sigma = kSsimSigma) {
  Tensor<T> w({1, 1, k, k});
  double sum = 0.0;
  int half = k / 2;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      double di = i - half, dj = j - half;
      double v = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      w.at(0, 0, i, j) = static_cast<T>(v);
      sum += v;
    }
  for (std::int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(static_cast<double>(w[i]) / sum);
  return w;
}

// Per-pixel SSIM of two single-channel fields under Gaussian-weighted local
// statistics. Stabilizers follow the standard (0.01 L)^2 / (0.03 L)^2 form.
template <class T>
ad::Var<T> ssim_map(const ad::Var<T>& x, const ad::Var<T>& y, T dynamic_range) {
  require(x.value().rank() == 4 && x.value().dim(1) == 1 &&
              same_shape(x.value(), y.value()),
          "perception", "ssim_map: needs matching [N,1,H,W] fields");
  auto window = ad::Var<T>::constant(gaussian_window<T>());
  auto zero_bias = ad::Var<T>::constant(Tensor<T>::zeros({1}));
  std::int64_t pad = kSsimWindow / 2;
  auto blur = [&](const ad::Var<T>& v) {
    return ad::conv2d(v, window, zero_bias, 1, pad);
  };
  T c1 = static_cast<T>(0.01 * dynamic_range) * static_cast<T>(0.01 * dynamic_range);
  T c2 = static_cast<T>(0.03 * dynamic_range) * static_cast<T>(0.03 * dynamic_range);

  auto mu_x = blur(x), mu_y = blur(y);
  auto sigma_x = ad::sub(blur(ad::mul(x, x)), ad::mul(mu_x, mu_x));
  auto sigma_y = ad::sub(blur(ad::mul(y, y)), ad::mul(mu_y, mu_y));
  auto sigma_xy = ad::sub(blur(ad::mul(x, y)), ad::mul(mu_x, mu_y));
  auto num = ad::mul(ad::add_const(ad::scale(ad::mul(mu_x, mu_y), T(2)), c1),
                     ad::add_const(ad::scale(sigma_xy, T(2)), c2));
  auto den = ad::mul(ad::add_const(ad::add(ad::mul(mu_x, mu_x), ad::mul(mu_y, mu_y)), c1),
                     ad::add_const(ad::add(sigma_x, sigma_y), c2));
  return ad::div(num, den);
}

template <class T>
struct DepthLoss {
  ad::Var<T> total;      // l1 + 1/(lambda * SSIM)
  ad::Var<T> l1;         // mean |pred - truth| over valid pixels, mm
  ad::Var<T> ssim_term;  // 1/(lambda * SSIM)
  T ssim_mean;           // masked mean SSIM, diagnostic
};

// Masked depth loss: L1 over valid pixels plus the inverse-SSIM term with
// lambda = 1000. SSIM statistics use mask-zeroed fields and the dynamic range
// is the maximum valid ground-truth depth. Identical fields give exactly
// l1 = 0 and ssim_term = 1/lambda.
template <class T>
DepthLoss<T> depth_loss(const ad::Var<T>& pred, const Tensor<T>& truth,
                        const Tensor<std::uint8_t>& mask) {
  require(same_shape(pred.value(), truth), "perception",
          "depth_loss: shape mismatch");
  require(same_shape_dims(mask, truth), "perception",
          "depth_loss: mask shape mismatch");
  std::int64_t valid = 0;
  T range = T(0);
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i]) {
      ++valid;
      range = std::max(range, truth[i]);
    }
  require(valid > 0, "no-foreground", "no foreground");
  range = std::max(range, T(1));  // all-zero foreground still gets finite C1/C2

  auto truth_c = ad::Var<T>::constant(truth);
  auto l1 = ad::masked_mean(ad::abs_op(ad::sub(pred, truth_c)), mask);

  Tensor<T> mask_f(truth.shape());
  Tensor<T> truth_masked(truth.shape());
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    mask_f[i] = mask[i] ? T(1) : T(0);
    truth_masked[i] = mask[i] ? truth[i] : T(0);
  }
  auto x = ad::mul(pred, ad::Var<T>::constant(mask_f));
  auto y = ad::Var<T>::constant(truth_masked);
  auto ssim = ad::masked_mean(ssim_map<T>(x, y, range), mask);
  auto ssim_term =
      ad::div(ad::Var<T>::scalar(T(1)),
              ad::scale(ad::clamp_min(ssim, T(kSsimFloor)), T(kLambdaSsim)));
  DepthLoss<T> out{ad::add(l1, ssim_term), l1, ssim_term, ssim.value()[0]};
  return out;
}

// ---- branch encoders --------------------------------------------------------

enum class Branch { hand, object };

struct BranchEncodersConfig {
  EncoderConfig encoder;            // per-branch config (4 input channels)
  bool shared = false;              // one deeper encoder serves both branches
  int shared_blocks_per_stage = 3;  // balances parameters against two encoders
};

// The two RGB-D feature extractors (or the single shared one). Input is the
// channel concatenation of RGB and estimated depth over kDepthInputNormMm.
template <class T>
struct BranchEncoders {
  BranchEncodersConfig cfg;
  std::optional<Encoder<T>> hand_enc, obj_enc, shared_enc;

  BranchEncoders() = default;
  BranchEncoders(nn::ParamStore<T>& ps, const std::string& prefix,
                 BranchEncodersConfig cfg_, Rng& rng)
      : cfg(std::move(cfg_)) {
    cfg.encoder.in_channels = 4;
    if (cfg.shared) {
      EncoderConfig shared_cfg = cfg.encoder;
      shared_cfg.blocks_per_stage = cfg.shared_blocks_per_stage;
      shared_enc.emplace(ps, prefix + ".shared", shared_cfg, rng);
    } else {
      hand_enc.emplace(ps, prefix + ".hand", cfg.encoder, rng);
      obj_enc.emplace(ps, prefix + ".obj", cfg.encoder, rng);
    }
  }

  // rgb [N,3,H,W] in [0,1], depth_mm [N,1,H,W] -> feature [N,D]
  ad::Var<T> encode(const ad::Var<T>& rgb, const ad::Var<T>& depth_mm,
                    Branch branch) const {
    require(rgb.value().rank() == 4 && depth_mm.value().rank() == 4 &&
                rgb.value().dim(1) == 3 && depth_mm.value().dim(1) == 1 &&
                rgb.value().dim(0) == depth_mm.value().dim(0) &&
                rgb.value().dim(2) == depth_mm.value().dim(2) &&
                rgb.value().dim(3) == depth_mm.value().dim(3),
            "perception", "encode: dimension mismatch");
    auto x = ad::concat_channels(rgb, ad::scale(depth_mm, T(1.0 / kDepthInputNormMm)));
    if (cfg.shared) return shared_enc->features(x);
    return branch == Branch::hand ? hand_enc->features(x) : obj_enc->features(x);
  }
};

}  // namespace horec::percept
