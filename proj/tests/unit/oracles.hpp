#pragma once

// Reference implementations written independently of the library kernels.
// Shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "prompt_evolve/tensor.hpp"

namespace oracle {

using prompt_evolve::Tensor;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::zeros({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  return c;
}

// Index set of the floor(f * n) largest magnitudes; among equal magnitudes
// the lower index wins. Selection by repeated linear scans.
inline std::vector<bool> top_set(const std::vector<double>& mag, double f) {
  const std::size_t n = mag.size();
  std::size_t want = static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  std::vector<bool> chosen(n, false);
  while (want-- > 0) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen[i]) continue;
      if (best == n || mag[i] > mag[best]) best = i;
    }
    chosen[best] = true;
  }
  return chosen;
}

inline int sgn(double v) { return (v > 0) - (v < 0); }

// Per-index branch enumeration of the fusion rule.
inline std::vector<double> fuse(const std::vector<double>& curr, const std::vector<double>& prev,
                                const std::vector<double>& init, double top_k, double top_l,
                                std::size_t counts[4] = nullptr) {
  const std::size_t n = curr.size();
  std::vector<double> mag_prev(n), mag_curr(n);
  for (std::size_t i = 0; i < n; ++i) {
    mag_prev[i] = std::fabs(prev[i] - init[i]);
    mag_curr[i] = std::fabs(curr[i] - prev[i]);
  }
  const auto keep_prev = top_set(mag_prev, top_k);
  const auto keep_curr = top_set(mag_curr, top_l);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int s_prev = sgn(prev[i] - init[i]);
    const int s_curr = sgn(curr[i] - prev[i]);
    int branch;
    if (keep_prev[i]) {
      branch = 0;
      out[i] = prev[i];
    } else if (keep_curr[i]) {
      branch = 1;
      out[i] = curr[i];
    } else if (s_prev != 0 && s_prev == s_curr) {
      branch = 2;
      out[i] = (prev[i] + curr[i]) / 2;
    } else {
      branch = 3;
      out[i] = prev[i];
    }
    if (counts) ++counts[branch];
  }
  return out;
}

// Bilinear interpolation of a [C x H x W] map with border clamping.
inline double bilinear(const Tensor& map, std::size_t c, double x, double y) {
  const std::size_t H = map.dim(1), W = map.dim(2);
  x = std::min(std::max(x, 0.0), static_cast<double>(W - 1));
  y = std::min(std::max(y, 0.0), static_cast<double>(H - 1));
  const double xf = std::floor(x), yf = std::floor(y);
  double acc = 0.0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const double wx = dx ? x - xf : 1.0 - (x - xf);
      const double wy = dy ? y - yf : 1.0 - (y - yf);
      if (wx == 0.0 || wy == 0.0) continue;
      const std::size_t xi = std::min(static_cast<std::size_t>(xf) + dx, W - 1);
      const std::size_t yi = std::min(static_cast<std::size_t>(yf) + dy, H - 1);
      acc += wx * wy * map.data()[(c * H + yi) * W + xi];
    }
  return acc;
}

// out[q] = sum_m W_m sum_k A[q,m,k] W'_m x(p_q + dp[q,m,k]).
inline Tensor deformable(const std::vector<double>& ref_x, const std::vector<double>& ref_y, const Tensor& map,
                         const std::vector<double>& off_x, const std::vector<double>& off_y,
                         const std::vector<double>& attn, std::size_t heads, std::size_t points,
                         const std::vector<Tensor>& value_proj, const std::vector<Tensor>& output_proj) {
  const std::size_t nq = ref_x.size(), C = map.dim(0), cv = C / heads;
  Tensor out = Tensor::zeros({nq, C});
  for (std::size_t q = 0; q < nq; ++q)
    for (std::size_t m = 0; m < heads; ++m)
      for (std::size_t k = 0; k < points; ++k) {
        const std::size_t idx = (q * heads + m) * points + k;
        std::vector<double> sample(C);
        for (std::size_t c = 0; c < C; ++c) sample[c] = bilinear(map, c, ref_x[q] + off_x[idx], ref_y[q] + off_y[idx]);
        for (std::size_t o = 0; o < C; ++o) {
          double acc = 0.0;
          for (std::size_t r = 0; r < cv; ++r) {
            double proj = 0.0;
            for (std::size_t c = 0; c < C; ++c) proj += value_proj[m].at(r, c) * sample[c];
            acc += output_proj[m].at(o, r) * proj;
          }
          out.at(q, o) += attn[idx] * acc;
        }
      }
  return out;
}

// Biased squared MMD with Gaussian kernel, plain double loop.
inline double mmd2(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y,
                   double sigma) {
  auto k = [sigma](const std::vector<double>& a, const std::vector<double>& b) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    return std::exp(-d2 / (2 * sigma * sigma));
  };
  double xx = 0, yy = 0, xy = 0;
  for (const auto& a : x)
    for (const auto& b : x) xx += k(a, b);
  for (const auto& a : y)
    for (const auto& b : y) yy += k(a, b);
  for (const auto& a : x)
    for (const auto& b : y) xy += k(a, b);
  const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
  return xx / (n * n) + yy / (m * m) - 2 * xy / (n * m);
}

// All-point interpolated AP: for each recall step, the best precision at any
// rank reaching at least that recall.
inline double average_precision(const std::vector<bool>& hits, std::size_t num_gt) {
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i];
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  double ap = 0.0;
  for (std::size_t step = 1; step <= num_gt; ++step) {
    const double r = static_cast<double>(step) / static_cast<double>(num_gt);
    double best = 0.0;
    for (std::size_t i = 0; i < rec.size(); ++i)
      if (rec[i] >= r - 1e-12) best = std::max(best, prec[i]);
    ap += best / static_cast<double>(num_gt);
  }
  return ap;
}

}  // namespace oracle
