#pragma once

// Layer-level, mask-level and reconstruction metrics for layer stacks.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cld/imaging.hpp"

namespace cld {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kMaskThreshold = 0.5;

namespace detail {

template <std::size_t C>
void require_same_size(const Image<C>& a, const Image<C>& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw ContractError(std::string(what) + ": image sizes " + std::to_string(a.height) + "x" +
                        std::to_string(a.width) + " and " + std::to_string(b.height) + "x" +
                        std::to_string(b.width) + " differ");
  }
}

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ContractError(std::string(what) + ": lengths " + std::to_string(a) + " and " +
                        std::to_string(b) + " differ");
  }
}

}  // namespace detail

// 10 log10(1 / MSE), capped at kPsnrCap.
inline double psnr(const RgbImage& a, const RgbImage& b) {
  detail::require_same_size(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline constexpr std::size_t kSsimWindow = 11;

// Mean local SSIM over all valid 11x11 Gaussian windows (sigma 1.5), per
// channel, averaged over channels.
inline double ssim(const RgbImage& a, const RgbImage& b) {
  detail::require_same_size(a, b, "ssim");
  if (a.height < kSsimWindow || a.width < kSsimWindow) {
    throw ContractError("ssim: images must be at least 11x11");
  }
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03, kSigma = 1.5;
  constexpr int kRadius = static_cast<int>(kSsimWindow / 2);
  std::array<double, kSsimWindow> g{};
  double gsum = 0.0;
  for (int i = -kRadius; i <= kRadius; ++i) {
    g[i + kRadius] = std::exp(-(i * i) / (2.0 * kSigma * kSigma));
    gsum += g[i + kRadius];
  }
  for (double& v : g) v /= gsum;

  const std::size_t oh = a.height - kSsimWindow + 1, ow = a.width - kSsimWindow + 1;
  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double channel = 0.0;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < kSsimWindow; ++i) {
          for (std::size_t j = 0; j < kSsimWindow; ++j) {
            const double w = g[i] * g[j];
            const double va = a.at(y + i, x + j, c), vb = b.at(y + i, x + j, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        channel += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                   ((ma * ma + mb * mb + kC1) * (var_a + var_b + kC2));
      }
    }
    total += channel / static_cast<double>(oh * ow);
  }
  return total / 3.0;
}

// Mean absolute difference after flattening both layers onto neutral gray.
inline double rgb_l1(const RgbaImage& pred, const RgbaImage& gt) {
  detail::require_same_size(pred, gt, "rgb_l1");
  const RgbImage p = rgba_to_rgb(pred), g = rgba_to_rgb(gt);
  double s = 0.0;
  for (std::size_t i = 0; i < p.data.size(); ++i) s += std::abs(p.data[i] - g.data[i]);
  return s / static_cast<double>(p.data.size());
}

// sum min(p, g) / sum max(p, g); two all-zero maps score 1.
inline double alpha_soft_iou(const std::vector<double>& pred, const std::vector<double>& gt) {
  detail::require_same_length(pred.size(), gt.size(), "alpha_soft_iou");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    num += std::min(pred[i], gt[i]);
    den += std::max(pred[i], gt[i]);
  }
  return den == 0.0 ? 1.0 : num / den;
}

struct MaskCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline MaskCounts mask_counts(const std::vector<double>& pred, const std::vector<double>& gt,
                              double threshold) {
  detail::require_same_length(pred.size(), gt.size(), "mask");
  MaskCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > threshold, g = gt[i] > threshold;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

// IoU of the alpha > threshold masks; two empty masks score 1.
inline double mask_iou(const std::vector<double>& pred, const std::vector<double>& gt,
                       double threshold = kMaskThreshold) {
  const MaskCounts c = mask_counts(pred, gt, threshold);
  const std::size_t uni = c.tp + c.fp + c.fn;
  return uni == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(uni);
}

inline double f1_score(const std::vector<double>& pred, const std::vector<double>& gt,
                       double threshold = kMaskThreshold) {
  const MaskCounts c = mask_counts(pred, gt, threshold);
  const std::size_t den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

// (rgb_l1 + 1 - soft_iou) / 2; lower is better.
inline double unified_score(double rgb_l1_value, double soft_iou) {
  if (!(rgb_l1_value >= 0.0 && rgb_l1_value <= 1.0) || !(soft_iou >= 0.0 && soft_iou <= 1.0)) {
    throw ContractError("unified_score: inputs must lie in [0, 1]");
  }
  return (rgb_l1_value + (1.0 - soft_iou)) / 2.0;
}

// ---------------------------------------------------------------------------
// Frechet distance

inline constexpr const char* kPixel64Embedding = "pixel64";

// 8x8 average-pooled luma of an RGB image (64 values).
inline std::vector<double> pixel64_embedding(const RgbImage& img) {
  constexpr std::size_t kCells = 8;
  std::vector<double> out(kCells * kCells, 0.0);
  std::vector<double> counts(kCells * kCells, 0.0);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::size_t cy = y * kCells / img.height, cx = x * kCells / img.width;
      const double luma =
          0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      out[cy * kCells + cx] += luma;
      counts[cy * kCells + cx] += 1.0;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (counts[i] > 0) out[i] /= counts[i];
  }
  return out;
}

struct FrechetResult {
  double value = 0.0;
  bool regularized = false;
  double epsilon = 0.0;
};

inline constexpr double kFrechetEpsilon = 1e-6;

namespace detail {

using DMat = Eigen::MatrixXd;
using DVec = Eigen::VectorXd;

inline DMat rows_to_matrix(const std::vector<std::vector<double>>& rows) {
  DMat m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

inline DMat sqrt_psd(const DMat& m) {
  Eigen::SelfAdjointEigenSolver<DMat> es(m);
  const DVec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline bool ill_conditioned(const DMat& cov) {
  Eigen::SelfAdjointEigenSolver<DMat> es(cov);
  const double max_ev = std::max(es.eigenvalues().maxCoeff(), 0.0);
  const double min_ev = es.eigenvalues().minCoeff();
  return min_ev <= 1e-12 * std::max(max_ev, 1.0);
}

}  // namespace detail

// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2). Singular
// covariances get epsilon * I added to both, and the result says so.
inline FrechetResult frechet_distance(const std::vector<std::vector<double>>& set_a,
                                      const std::vector<std::vector<double>>& set_b) {
  if (set_a.size() < 2 || set_b.size() < 2) {
    throw ContractError("frechet: each set needs at least two samples");
  }
  const std::size_t dim = set_a.front().size();
  for (const auto* set : {&set_a, &set_b}) {
    for (const auto& row : *set) {
      if (row.size() != dim || dim == 0) throw ContractError("frechet: embedding sizes differ");
    }
  }
  const detail::DMat a = detail::rows_to_matrix(set_a), b = detail::rows_to_matrix(set_b);
  const detail::DVec mu_a = a.colwise().mean(), mu_b = b.colwise().mean();
  const detail::DMat ca = a.rowwise() - mu_a.transpose(), cb = b.rowwise() - mu_b.transpose();
  detail::DMat sa = ca.transpose() * ca / static_cast<double>(a.rows() - 1);
  detail::DMat sb = cb.transpose() * cb / static_cast<double>(b.rows() - 1);
  FrechetResult r;
  if (detail::ill_conditioned(sa) || detail::ill_conditioned(sb)) {
    r.regularized = true;
    r.epsilon = kFrechetEpsilon;
    sa += kFrechetEpsilon * detail::DMat::Identity(dim, dim);
    sb += kFrechetEpsilon * detail::DMat::Identity(dim, dim);
  }
  const detail::DMat root_a = detail::sqrt_psd(sa);
  const detail::DMat inner = root_a * sb * root_a;
  Eigen::SelfAdjointEigenSolver<detail::DMat> es(0.5 * (inner + inner.transpose()),
                                                 Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  r.value = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  // Round-off can push identical sets slightly below zero.
  if (r.value < 0.0) r.value = 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// DTW alignment

struct DtwResult {
  std::vector<std::pair<std::size_t, std::size_t>> path;  // (pred, gt) pairs
  double cost = 0.0;
};

// Monotone, contiguous alignment from (0, 0) to (n-1, m-1) minimizing the
// summed pair cost.
inline DtwResult dtw_align(const std::vector<std::vector<double>>& cost) {
  if (cost.empty() || cost.front().empty()) throw ContractError("dtw: empty cost matrix");
  const std::size_t n = cost.size(), m = cost.front().size();
  for (const auto& row : cost) detail::require_same_length(row.size(), m, "dtw");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> acc(n, std::vector<double>(m, kInf));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double best = 0.0;
      if (i > 0 || j > 0) {
        best = kInf;
        if (i > 0 && j > 0) best = std::min(best, acc[i - 1][j - 1]);
        if (i > 0) best = std::min(best, acc[i - 1][j]);
        if (j > 0) best = std::min(best, acc[i][j - 1]);
      }
      acc[i][j] = cost[i][j] + best;
    }
  }
  DtwResult r;
  r.cost = acc[n - 1][m - 1];
  std::size_t i = n - 1, j = m - 1;
  r.path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && acc[i - 1][j - 1] <= acc[i - 1][j] && acc[i - 1][j - 1] <= acc[i][j - 1]) {
      --i;
      --j;
    } else if (i > 0 && (j == 0 || acc[i - 1][j] <= acc[i][j - 1])) {
      --i;
    } else {
      --j;
    }
    r.path.emplace_back(i, j);
  }
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

// Pair cost used for alignment: the two unified-score terms averaged.
inline double layer_pair_cost(const RgbaImage& pred, const RgbaImage& gt) {
  return unified_score(rgb_l1(pred, gt), alpha_soft_iou(alpha_channel(pred), alpha_channel(gt)));
}

// ---------------------------------------------------------------------------
// Stack evaluation

struct LayerMetrics {
  std::size_t pred_index = 0;
  std::size_t gt_index = 0;
  double psnr = 0, ssim = 0, rgb_l1 = 0, alpha_soft_iou = 0, mask_iou = 0, f1 = 0;
};

struct MetricReport {
  std::vector<LayerMetrics> per_layer;
  double mean_psnr = 0, mean_ssim = 0, mean_rgb_l1 = 0, mean_alpha_soft_iou = 0;
  double mean_mask_iou = 0, mean_f1 = 0;
  double unified_score = 0;
  double recon_psnr = 0, recon_ssim = 0;
  bool dtw = false;
  double dtw_cost = 0;
  std::optional<FrechetResult> frechet;
  std::string frechet_embedding;

  nlohmann::json to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : per_layer) {
      layers.push_back({{"pred_index", l.pred_index},
                        {"gt_index", l.gt_index},
                        {"psnr", l.psnr},
                        {"ssim", l.ssim},
                        {"rgb_l1", l.rgb_l1},
                        {"alpha_soft_iou", l.alpha_soft_iou},
                        {"mask_iou", l.mask_iou},
                        {"f1", l.f1}});
    }
    nlohmann::json j = {{"per_layer", layers},
                        {"mean", {{"psnr", mean_psnr},
                                  {"ssim", mean_ssim},
                                  {"rgb_l1", mean_rgb_l1},
                                  {"alpha_soft_iou", mean_alpha_soft_iou},
                                  {"mask_iou", mean_mask_iou},
                                  {"f1", mean_f1}}},
                        {"unified_score", unified_score},
                        {"reconstruction", {{"psnr", recon_psnr}, {"ssim", recon_ssim}}},
                        {"alignment", dtw ? "dtw" : "positional"}};
    if (dtw) j["dtw_cost"] = dtw_cost;
    if (frechet) {
      j["frechet"] = {{"value", frechet->value},
                      {"embedding", frechet_embedding},
                      {"regularized", frechet->regularized},
                      {"epsilon", frechet->epsilon}};
    }
    return j;
  }
};

struct EvalOptions {
  bool dtw = false;
  double threshold = kMaskThreshold;
};

inline LayerMetrics layer_metrics(const RgbaImage& pred, const RgbaImage& gt, double threshold) {
  LayerMetrics m;
  const RgbImage p = rgba_to_rgb(pred), g = rgba_to_rgb(gt);
  const auto pa = alpha_channel(pred), ga = alpha_channel(gt);
  m.psnr = psnr(p, g);
  m.ssim = ssim(p, g);
  m.rgb_l1 = rgb_l1(pred, gt);
  m.alpha_soft_iou = alpha_soft_iou(pa, ga);
  m.mask_iou = mask_iou(pa, ga, threshold);
  m.f1 = f1_score(pa, ga, threshold);
  return m;
}

// Per-layer metrics (background first) and reconstruction of the predicted
// layers against the ground-truth composite. Layers correspond by position
// unless opts.dtw is set.
inline MetricReport evaluate_stack(const LayerStack& pred, const LayerStack& gt,
                                   const EvalOptions& opts = {}) {
  if (!pred.background.same_size(gt.height(), gt.width())) {
    throw ValidationError("evaluate: predicted frame does not match ground truth");
  }
  MetricReport r;
  r.dtw = opts.dtw;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (opts.dtw) {
    std::vector<std::vector<double>> cost(pred.layer_count(),
                                          std::vector<double>(gt.layer_count()));
    for (std::size_t i = 0; i < pred.layer_count(); ++i) {
      for (std::size_t j = 0; j < gt.layer_count(); ++j) {
        cost[i][j] = layer_pair_cost(pred.layer(i), gt.layer(j));
      }
    }
    const DtwResult d = dtw_align(cost);
    pairs = d.path;
    r.dtw_cost = d.cost;
  } else {
    if (pred.layer_count() != gt.layer_count()) {
      throw ValidationError("evaluate: predicted stack has " + std::to_string(pred.layer_count()) +
                            " layers, ground truth has " + std::to_string(gt.layer_count()) +
                            "; positional correspondence needs equal counts (use DTW)");
    }
    for (std::size_t k = 0; k < gt.layer_count(); ++k) pairs.emplace_back(k, k);
  }
  for (const auto& [i, j] : pairs) {
    LayerMetrics m = layer_metrics(pred.layer(i), gt.layer(j), opts.threshold);
    m.pred_index = i;
    m.gt_index = j;
    r.per_layer.push_back(m);
  }
  const double n = static_cast<double>(r.per_layer.size());
  for (const auto& m : r.per_layer) {
    r.mean_psnr += m.psnr;
    r.mean_ssim += m.ssim;
    r.mean_rgb_l1 += m.rgb_l1;
    r.mean_alpha_soft_iou += m.alpha_soft_iou;
    r.mean_mask_iou += m.mask_iou;
    r.mean_f1 += m.f1;
  }
  for (double* v : {&r.mean_psnr, &r.mean_ssim, &r.mean_rgb_l1, &r.mean_alpha_soft_iou,
                    &r.mean_mask_iou, &r.mean_f1}) {
    *v /= n;
  }
  r.mean_rgb_l1 = std::clamp(r.mean_rgb_l1, 0.0, 1.0);
  r.mean_alpha_soft_iou = std::clamp(r.mean_alpha_soft_iou, 0.0, 1.0);
  r.unified_score = cld::unified_score(r.mean_rgb_l1, r.mean_alpha_soft_iou);
  const RgbImage recon = over_composite(pred);
  r.recon_psnr = psnr(recon, gt.composite);
  r.recon_ssim = ssim(recon, gt.composite);
  return r;
}

}  // namespace cld
