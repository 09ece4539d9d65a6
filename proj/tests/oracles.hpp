// Independent reference implementations shared by the unit tests and the
// acceptance suite. Written for clarity, not speed.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "diffpath/mixture.hpp"
#include "diffpath/schedule.hpp"
#include "diffpath/trajectory.hpp"

namespace diffpath::oracle {

// log p_t(x) of the mixture pushed through the forward process, evaluated
// directly from the component densities in long double.
inline long double mixture_log_density(const GaussianMixtureDataModel& m, const DiffusionSchedule& s, int t,
                                const std::vector<long double>& x) {
  const long double ab = s.alpha_bar(t);
  const long double sg = s.sigma(t);
  long double total = 0.0L;
  for (std::size_t k = 0; k < m.components(); ++k) {
    const long double v = ab * m.stddev(k) * m.stddev(k) + sg * sg;
    long double sq = 0.0L;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const long double d = x[j] - std::sqrt(ab) * m.mean(k)[j];
      sq += d * d;
    }
    total += m.weight(k) * std::exp(-0.5L * sq / v) /
             std::pow(2.0L * std::numbers::pi_v<long double> * v, 0.5L * static_cast<long double>(x.size()));
  }
  return std::log(total);
}

inline double fd_relative_error(const GaussianMixtureDataModel& m, const DiffusionSchedule& s, int t, const Tensor& xt) {
  const AnalyticPredictor pred(m, s);
  const Tensor out = pred.predict(xt, t, "");
  std::vector<long double> x(xt.values().begin(), xt.values().end());
  constexpr long double h = 1e-4L;
  long double num = 0.0L, den = 0.0L;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const long double keep = x[j];
    x[j] = keep + h;
    const long double up = mixture_log_density(m, s, t, x);
    x[j] = keep - h;
    const long double down = mixture_log_density(m, s, t, x);
    x[j] = keep;
    const long double ref = -static_cast<long double>(s.sigma(t)) * (up - down) / (2.0L * h);
    num += (out[j] - ref) * (out[j] - ref);
    den += ref * ref;
  }
  return static_cast<double>(std::sqrt(num / den));
}

// Solves c1 x + c2 eps(x) = y for x by Newton's method with a central
// difference Jacobian of the predictor.
inline Tensor invert_step(const NoisePredictor& p, const Tensor& y, int t, double c1, double c2) {
  const auto D = static_cast<Eigen::Index>(y.size());
  Tensor x = y;
  for (float& v : x.values()) v = static_cast<float>(v / c1);
  for (int it = 0; it < 50; ++it) {
    const Tensor e = p.predict(x, t, "");
    Eigen::VectorXd r(D);
    for (Eigen::Index j = 0; j < D; ++j) r(j) = c1 * x[j] + c2 * e[j] - y[j];
    if (r.cwiseAbs().maxCoeff() < 1e-7) break;
    Eigen::MatrixXd J = Eigen::MatrixXd::Identity(D, D) * c1;
    for (Eigen::Index j = 0; j < D; ++j) {
      Tensor hi = x, lo = x;
      hi[j] += 1e-3f;
      lo[j] -= 1e-3f;
      const Tensor eh = p.predict(hi, t, ""), el = p.predict(lo, t, "");
      const double h = static_cast<double>(hi[j]) - lo[j];
      for (Eigen::Index i = 0; i < D; ++i) J(i, j) += c2 * (static_cast<double>(eh[i]) - el[i]) / h;
    }
    const Eigen::VectorXd dx = J.partialPivLu().solve(r);
    for (Eigen::Index j = 0; j < D; ++j) x[j] = static_cast<float>(x[j] - dx(j));
  }
  return x;
}

// Direct 2-D window SSIM: explicit double loop, mirror padding by period folding.
inline std::vector<double> reference_ssim(const std::vector<double>& a, const std::vector<double>& b, std::size_t C,
                                   std::size_t H, std::size_t W, int win = 11, double sd = 1.5) {
  const int r = win / 2;
  auto mirror = [](long i, long n) {
    if (n == 1) return 0L;
    const long p = 2 * (n - 1);
    i = ((i % p) + p) % p;
    return i > n - 1 ? p - i : i;
  };
  double wsum = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) wsum += std::exp(-(dy * dy + dx * dx) / (2 * sd * sd));
  const double c1 = 1e-4, c2 = 9e-4;
  std::vector<double> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (long y = 0; y < static_cast<long>(H); ++y) {
      for (long x = 0; x < static_cast<long>(W); ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = -r; dy <= r; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            const double w = std::exp(-(dy * dy + dx * dx) / (2 * sd * sd)) / wsum;
            const std::size_t j = c * H * W + mirror(y + dy, H) * W + mirror(x + dx, W);
            mx += w * a[j];
            my += w * b[j];
            sxx += w * a[j] * a[j];
            syy += w * b[j] * b[j];
            sxy += w * a[j] * b[j];
          }
        }
        const double vx = sxx - mx * mx, vy = syy - my * my, cv = sxy - mx * my;
        out[c * H * W + y * W + x] =
            (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
  }
  return out;
}

inline std::vector<double> reference_minmax(const Tensor& t) {
  double lo = t[0], hi = t[0];
  for (float v : t.values()) {
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  std::vector<double> out(t.size(), 0.0);
  if (hi > lo) {
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = (t[i] - lo) / (hi - lo);
  }
  return out;
}

struct RefScore {
  std::array<long double, 6> s{};
  std::array<long double, 6> scale{};
};

// Score pooling evaluated pixel by pixel, with the temporal
// difference sum written in telescoped form.
inline RefScore reference_score(const Tensor& x0, const TrajectoryRecord& rec, bool use_error, bool use_ssim, std::size_t C,
                         std::size_t H, std::size_t W) {
  const std::size_t D = x0.size(), n = rec.length();
  std::vector<double> weight(D, 1.0);
  if (use_ssim) {
    Tensor sum(x0.dims());
    for (std::size_t j = 0; j < D; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < n; ++t) s += rec.predicted[t][j];
      sum[j] = static_cast<float>(s);
    }
    const auto ssim = reference_ssim(reference_minmax(x0), reference_minmax(sum), C, H, W);
    for (std::size_t j = 0; j < D; ++j) weight[j] = 1.0 - ssim[j];
  }
  RefScore out;
  for (std::size_t j = 0; j < D; ++j) {
    for (int p = 1; p <= 3; ++p) {
      long double level = 0;
      auto e = [&](std::size_t t) {
        const long double v = use_error ? static_cast<long double>(rec.predicted[t][j]) - rec.truth[t][j]
                                        : static_cast<long double>(rec.predicted[t][j]);
        return std::pow(use_error ? v * v : v, p);
      };
      for (std::size_t t = 0; t < n; ++t) level += e(t);
      const long double delta = e(n - 1) - e(0);
      out.s[p - 1] += weight[j] * level;
      out.s[p + 2] += weight[j] * delta;
      out.scale[p - 1] += std::abs(weight[j] * level);
      out.scale[p + 2] += std::abs(weight[j]) * (std::abs(e(n - 1)) + std::abs(e(0)));
    }
  }
  return out;
}

// Pairwise count over all (id, ood) pairs, ties worth one half, in integer halves.
inline double pairwise_auroc(const std::vector<double>& id, const std::vector<double>& ood) {
  long long halves = 0;
  for (double a : id) {
    for (double b : ood) halves += b > a ? 2 : (b == a ? 1 : 0);
  }
  return static_cast<double>(halves) / (2.0 * static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

// Plain Gaussian elimination with partial pivoting: returns log|det A| and A^{-1} b.
inline double solve_logdet(std::vector<std::vector<long double>> a, std::vector<long double>& b) {
  const std::size_t n = a.size();
  long double logdet = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    std::swap(a[p], a[c]);
    std::swap(b[p], b[c]);
    logdet += std::log(std::abs(a[c][c]));
    for (std::size_t r = c + 1; r < n; ++r) {
      const long double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  for (std::size_t c = n; c-- > 0;) {
    for (std::size_t k = c + 1; k < n; ++k) b[c] -= a[c][k] * b[k];
    b[c] /= a[c][c];
  }
  return static_cast<double>(logdet);
}

inline long double gaussian_density(const Eigen::VectorXd& z, const Eigen::VectorXd& m, const Eigen::MatrixXd& S) {
  const std::size_t d = static_cast<std::size_t>(z.size());
  std::vector<std::vector<long double>> a(d, std::vector<long double>(d));
  std::vector<long double> diff(d), sol(d);
  for (std::size_t i = 0; i < d; ++i) {
    diff[i] = z(i) - m(i);
    for (std::size_t j = 0; j < d; ++j) a[i][j] = S(i, j);
  }
  sol = diff;
  const double logdet = solve_logdet(a, sol);
  long double q = 0;
  for (std::size_t i = 0; i < d; ++i) q += diff[i] * sol[i];
  return std::exp(-0.5L * (static_cast<long double>(d) * std::log(2.0L * std::numbers::pi_v<long double>) + logdet + q));
}

}  // namespace diffpath::oracle
