#pragma once
// Reconstruction quality metrics and report emission. Joint and vertex errors
// are means over every joint/vertex of every evaluated frame; the keypoint
// correctness curve pools all joints of the split. Surface error samples the
// ground-truth mesh with a frozen seed so evaluation is run-to-run stable.
// Writers emit byte-stable JSON, CSV, and SVG.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "horec/core.hpp"
#include "horec/geometry.hpp"
#include "horec/losses.hpp"
#include "horec/tensor.hpp"

namespace horec::eval {

constexpr std::int64_t kCdGtSamples = loss::kObjectGtSamples;
constexpr std::uint64_t kCdSampleSeed = loss::kObjectSampleSeed;

namespace detail {

inline void check_joint_pair(const Tensor<double>& pred, const Tensor<double>& gt,
                             const char* who) {
  require(pred.shape() == gt.shape(), "metric",
          std::string(who) + ": shape mismatch");
  require((pred.rank() == 2 || pred.rank() == 3) && pred.dim(pred.rank() - 1) == 3,
          "metric", std::string(who) + ": expected [N,J,3] or [J,3] joints");
}

// Euclidean distance per row of two stacked [*,3] arrays.
inline std::vector<double> row_errors(const Tensor<double>& pred,
                                      const Tensor<double>& gt) {
  std::int64_t rows = pred.numel() / 3;
  std::vector<double> err(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i) {
    double dx = pred[3 * i] - gt[3 * i];
    double dy = pred[3 * i + 1] - gt[3 * i + 1];
    double dz = pred[3 * i + 2] - gt[3 * i + 2];
    err[static_cast<std::size_t>(i)] = std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return err;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

}  // namespace detail

// Mean per-joint position error in mm over all joints and frames.
inline double mpjpe(const Tensor<double>& pred_joints, const Tensor<double>& gt_joints) {
  detail::check_joint_pair(pred_joints, gt_joints, "mpjpe");
  return detail::mean(detail::row_errors(pred_joints, gt_joints));
}

// Mean per-vertex error in mm between index-corresponding mesh vertices.
inline double hme(const geo::VertMat& pred_vertices, const geo::VertMat& gt_vertices) {
  require(pred_vertices.rows() == gt_vertices.rows(), "metric",
          "hme: vertex count mismatch");
  require(pred_vertices.rows() > 0, "metric", "hme: empty vertex set");
  double s = 0;
  for (Eigen::Index i = 0; i < pred_vertices.rows(); ++i)
    s += (pred_vertices.row(i) - gt_vertices.row(i)).norm();
  return s / static_cast<double>(pred_vertices.rows());
}

inline std::vector<double> default_pck_thresholds() {
  std::vector<double> t(51);
  for (int i = 0; i <= 50; ++i) t[static_cast<std::size_t>(i)] = i;
  return t;
}

// Fraction of joints whose error is at most the threshold, pooled over every
// joint of every frame, for each threshold in the grid.
inline std::vector<std::pair<double, double>> pck_curve(
    const Tensor<double>& pred_joints, const Tensor<double>& gt_joints,
    const std::vector<double>& thresholds = default_pck_thresholds()) {
  detail::check_joint_pair(pred_joints, gt_joints, "pck_curve");
  auto err = detail::row_errors(pred_joints, gt_joints);
  std::vector<std::pair<double, double>> curve;
  curve.reserve(thresholds.size());
  for (double thr : thresholds) {
    std::int64_t hit = 0;
    for (double e : err) hit += e <= thr;
    curve.emplace_back(thr, static_cast<double>(hit) /
                                static_cast<double>(std::max<std::size_t>(err.size(), 1)));
  }
  return curve;
}

// Symmetric Chamfer error in mm^2 between the predicted mesh vertices and a
// fixed-seed sampling of the ground-truth surface, matching the training term.
inline double cd_mm2(const geo::TriMesh& pred, const geo::TriMesh& gt,
                     std::int64_t n_samples = kCdGtSamples,
                     std::uint64_t seed = kCdSampleSeed) {
  geo::PointSet samples = geo::sample_surface(gt, n_samples, seed);
  return geo::chamfer(pred.vertices, samples);
}

// ---- split-level evaluation ---------------------------------------------------

// Predictions and ground truth for one test frame. Meshes carry topology so the
// surface and penetration measures can run; hand meshes correspond by index.
struct SamplePrediction {
  Tensor<double> pred_joints;  // [21,3]
  Tensor<double> gt_joints;
  geo::TriMesh pred_hand;
  geo::TriMesh gt_hand;
  geo::TriMesh pred_object;  // closed, for the penetration measure
  geo::TriMesh gt_object;
};

struct FrameMetrics {
  double mpjpe_mm = 0;
  double hme_mm = 0;
  double cd_mm2 = 0;
  double pd_mm = 0;
  std::vector<double> joint_err_mm;  // one entry per joint, for curve pooling
};

struct MetricReport {
  double mpjpe_mm = 0;
  double hme_mm = 0;
  double cd_mm2 = 0;
  double pd_mm = 0;
  std::vector<std::pair<double, double>> pck;
  std::int64_t sample_count = 0;
  std::string config_fingerprint;
};

inline FrameMetrics evaluate_frame(const SamplePrediction& s,
                                   std::int64_t n_samples = kCdGtSamples,
                                   std::uint64_t seed = kCdSampleSeed) {
  FrameMetrics m;
  m.joint_err_mm = detail::row_errors(s.pred_joints, s.gt_joints);
  detail::check_joint_pair(s.pred_joints, s.gt_joints, "evaluate_frame");
  m.mpjpe_mm = detail::mean(m.joint_err_mm);
  m.hme_mm = hme(s.pred_hand.vertices, s.gt_hand.vertices);
  m.cd_mm2 = cd_mm2(s.pred_object, s.gt_object, n_samples, seed);
  m.pd_mm = geo::penetration_depth(s.pred_hand, s.pred_object);
  return m;
}

// Report means are plain means of the per-frame metrics; the correctness curve
// pools every joint of the split.
inline MetricReport aggregate(const std::vector<SamplePrediction>& samples,
                              const std::string& config_fingerprint,
                              const std::vector<double>& thresholds = default_pck_thresholds(),
                              std::int64_t n_samples = kCdGtSamples,
                              std::uint64_t seed = kCdSampleSeed) {
  require(!samples.empty(), "metric", "aggregate: no samples");
  MetricReport r;
  r.config_fingerprint = config_fingerprint;
  r.sample_count = static_cast<std::int64_t>(samples.size());
  std::vector<double> pooled;
  for (const auto& s : samples) {
    FrameMetrics m = evaluate_frame(s, n_samples, seed);
    r.mpjpe_mm += m.mpjpe_mm;
    r.hme_mm += m.hme_mm;
    r.cd_mm2 += m.cd_mm2;
    r.pd_mm += m.pd_mm;
    pooled.insert(pooled.end(), m.joint_err_mm.begin(), m.joint_err_mm.end());
  }
  double n = static_cast<double>(samples.size());
  r.mpjpe_mm /= n;
  r.hme_mm /= n;
  r.cd_mm2 /= n;
  r.pd_mm /= n;
  r.pck.reserve(thresholds.size());
  for (double thr : thresholds) {
    std::int64_t hit = 0;
    for (double e : pooled) hit += e <= thr;
    r.pck.emplace_back(thr, static_cast<double>(hit) /
                                static_cast<double>(std::max<std::size_t>(pooled.size(), 1)));
  }
  return r;
}

// ---- writers --------------------------------------------------------------------

// Two-space-indented JSON with a fixed key order; numbers via the shortest
// round-trip formatter so equal reports serialize to equal bytes.
inline std::string report_json(const MetricReport& r) {
  std::string out = "{\n";
  out += "  \"config_fingerprint\": \"" + r.config_fingerprint + "\",\n";
  out += "  \"sample_count\": " + std::to_string(r.sample_count) + ",\n";
  out += "  \"mpjpe_mm\": " + format_double(r.mpjpe_mm) + ",\n";
  out += "  \"hme_mm\": " + format_double(r.hme_mm) + ",\n";
  out += "  \"cd_mm2\": " + format_double(r.cd_mm2) + ",\n";
  out += "  \"pd_mm\": " + format_double(r.pd_mm) + ",\n";
  out += "  \"pck\": [";
  for (std::size_t i = 0; i < r.pck.size(); ++i) {
    if (i) out += ", ";
    out += "[" + format_double(r.pck[i].first) + ", " + format_double(r.pck[i].second) + "]";
  }
  out += "]\n}\n";
  return out;
}

inline const std::vector<std::string>& all_table_columns() {
  static const std::vector<std::string> cols = {"mpjpe_mm", "hme_mm", "cd_mm2",
                                                "pd_mm", "sample_count"};
  return cols;
}

// CSV table of named reports. Column order follows the `columns` argument
// (defaulting to all metrics); see docs/report_schema.md.
inline std::string table_csv(
    const std::vector<std::pair<std::string, MetricReport>>& rows,
    const std::vector<std::string>& columns = all_table_columns()) {
  std::string out = "variant";
  for (const auto& c : columns) out += "," + c;
  out += "\n";
  for (const auto& [label, r] : rows) {
    out += label;
    for (const auto& c : columns) {
      out += ",";
      if (c == "mpjpe_mm")
        out += format_double(r.mpjpe_mm);
      else if (c == "hme_mm")
        out += format_double(r.hme_mm);
      else if (c == "cd_mm2")
        out += format_double(r.cd_mm2);
      else if (c == "pd_mm")
        out += format_double(r.pd_mm);
      else if (c == "sample_count")
        out += std::to_string(r.sample_count);
      else
        fail("metric", "table_csv: unknown column '" + c + "'");
    }
    out += "\n";
  }
  return out;
}

// Standalone SVG polyline of one curve, e.g. keypoint correctness against its
// threshold or a per-epoch training trace. Fixed canvas, data-fit axes.
inline std::string curve_svg(const std::string& title,
                             const std::string& x_label, const std::string& y_label,
                             const std::vector<std::pair<double, double>>& points) {
  require(points.size() >= 2, "metric", "curve_svg: need at least two points");
  constexpr double kW = 640, kH = 440, kMargin = 56;
  double x_lo = points[0].first, x_hi = points[0].first;
  double y_lo = points[0].second, y_hi = points[0].second;
  for (const auto& [x, y] : points) {
    x_lo = std::min(x_lo, x), x_hi = std::max(x_hi, x);
    y_lo = std::min(y_lo, y), y_hi = std::max(y_hi, y);
  }
  if (x_hi == x_lo) x_hi = x_lo + 1;
  if (y_hi == y_lo) y_hi = y_lo + 1;
  auto sx = [&](double x) {
    return kMargin + (x - x_lo) / (x_hi - x_lo) * (kW - 2 * kMargin);
  };
  auto sy = [&](double y) {
    return kH - kMargin - (y - y_lo) / (y_hi - y_lo) * (kH - 2 * kMargin);
  };
  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"440\" "
         "viewBox=\"0 0 640 440\">\n";
  svg += "<rect width=\"640\" height=\"440\" fill=\"white\"/>\n";
  svg += "<text x=\"320\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"16\">" + detail::xml_escape(title) + "</text>\n";
  svg += "<line x1=\"" + format_double(kMargin) + "\" y1=\"" + format_double(kH - kMargin) +
         "\" x2=\"" + format_double(kW - kMargin) + "\" y2=\"" + format_double(kH - kMargin) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + format_double(kMargin) + "\" y1=\"" + format_double(kMargin) +
         "\" x2=\"" + format_double(kMargin) + "\" y2=\"" + format_double(kH - kMargin) +
         "\" stroke=\"black\"/>\n";
  svg += "<text x=\"320\" y=\"430\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\">" + detail::xml_escape(x_label) + "</text>\n";
  svg += "<text x=\"16\" y=\"220\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\" transform=\"rotate(-90 16 220)\">" +
         detail::xml_escape(y_label) + "</text>\n";
  svg += "<text x=\"" + format_double(kMargin) + "\" y=\"" + format_double(kH - kMargin + 16) +
         "\" font-family=\"sans-serif\" font-size=\"10\">" + format_double(x_lo) + "</text>\n";
  svg += "<text x=\"" + format_double(kW - kMargin) + "\" y=\"" +
         format_double(kH - kMargin + 16) + "\" text-anchor=\"end\" "
         "font-family=\"sans-serif\" font-size=\"10\">" + format_double(x_hi) + "</text>\n";
  svg += "<text x=\"" + format_double(kMargin - 6) + "\" y=\"" + format_double(kH - kMargin) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
         format_double(y_lo) + "</text>\n";
  svg += "<text x=\"" + format_double(kMargin - 6) + "\" y=\"" + format_double(kMargin + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
         format_double(y_hi) + "</text>\n";
  svg += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (i) svg += " ";
    svg += format_double(sx(points[i].first)) + "," + format_double(sy(points[i].second));
  }
  svg += "\"/>\n</svg>\n";
  return svg;
}

}  // namespace horec::eval
