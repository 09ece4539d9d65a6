#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/random.hpp"
#include "diffpath/tensor_io.hpp"

namespace diffpath {

enum class CovarianceType { kFull, kDiagonal };

inline std::string_view to_string(CovarianceType c) { return c == CovarianceType::kFull ? "full" : "diag"; }

inline CovarianceType parse_covariance_type(std::string_view s) {
  if (s == "full") return CovarianceType::kFull;
  if (s == "diag" || s == "diagonal") return CovarianceType::kDiagonal;
  throw InvalidArgument("unknown covariance type '" + std::string(s) + "' (expected full or diag)");
}

/// Per-dimension z-scoring fitted on the training features.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& x) {
    Standardizer s;
    const auto n = static_cast<double>(x.rows());
    s.mean = x.colwise().mean().transpose();
    s.scale.resize(x.cols());
    for (Eigen::Index d = 0; d < x.cols(); ++d) {
      const double var = (x.col(d).array() - s.mean(d)).square().sum() / n;
      const double sd = std::sqrt(var);
      // Constant features carry no information; leave them centred but unscaled.
      s.scale(d) = sd > 0.0 && std::isfinite(sd) ? sd : 1.0;
    }
    return s;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return (v - mean).cwiseQuotient(scale); }
};

struct GmmModel {
  CovarianceType cov_type = CovarianceType::kFull;
  Eigen::VectorXd weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covariances;
  Standardizer standardizer;
  double log_likelihood = -std::numeric_limits<double>::infinity();  // mean over the fit set
  int iterations = 0;
  bool converged = false;
  std::vector<double> log_likelihood_trace;

  int components() const { return static_cast<int>(weights.size()); }
  Eigen::Index dim() const { return standardizer.mean.size(); }
};

struct EmOptions {
  int max_iter = 500;
  double tol = 1e-6;
  double reg = 1e-6;  // floor on covariance eigenvalues
  /// Allowed decrease of the mean log-likelihood between iterations.
  double monotonicity_slack = 1e-9;
};

inline constexpr double kCollapseWeight = 1e-8;

namespace detail {

/// log N(z; m, S) for each row of z, all components. Returns n×K.
inline Eigen::MatrixXd component_log_densities(const GmmModel& m, const Eigen::MatrixXd& z) {
  const Eigen::Index n = z.rows();
  const Eigen::Index d = z.cols();
  const int K = m.components();
  Eigen::MatrixXd out(n, K);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (int k = 0; k < K; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(m.covariances[static_cast<std::size_t>(k)]);
    if (llt.info() != Eigen::Success) {
      throw ComponentCollapse("covariance of component " + std::to_string(k) + " is not positive definite", k);
    }
    const Eigen::MatrixXd L = llt.matrixL();
    const double logdet = 2.0 * L.diagonal().array().log().sum();
    const Eigen::MatrixXd centred = (z.rowwise() - m.means[static_cast<std::size_t>(k)].transpose()).transpose();
    const Eigen::MatrixXd solved = L.triangularView<Eigen::Lower>().solve(centred);
    const Eigen::VectorXd maha = solved.colwise().squaredNorm().transpose();
    out.col(k) = (-0.5 * (static_cast<double>(d) * log2pi + logdet + maha.array())).matrix() +
                 Eigen::VectorXd::Constant(n, std::log(m.weights(k)));
  }
  return out;
}

inline double log_sum_exp(const Eigen::RowVectorXd& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.array() - mx).exp().sum());
}

/// M-step from responsibilities r (n×K) on standardized data z.
inline void m_step(GmmModel& m, const Eigen::MatrixXd& z, const Eigen::MatrixXd& r, double reg) {
  const Eigen::Index n = z.rows();
  const Eigen::Index d = z.cols();
  const auto K = r.cols();
  m.weights.resize(K);
  m.means.assign(static_cast<std::size_t>(K), Eigen::VectorXd::Zero(d));
  m.covariances.assign(static_cast<std::size_t>(K), Eigen::MatrixXd::Zero(d, d));
  for (Eigen::Index k = 0; k < K; ++k) {
    const double nk = r.col(k).sum();
    const double w = nk / static_cast<double>(n);
    if (!(w >= kCollapseWeight)) {
      throw ComponentCollapse("mixture component " + std::to_string(k) + " collapsed (weight " + std::to_string(w) + ")",
                              static_cast<int>(k));
    }
    m.weights(k) = w;
    const Eigen::VectorXd mu = (z.transpose() * r.col(k)) / nk;
    const Eigen::MatrixXd c = z.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = (c.transpose() * r.col(k).asDiagonal() * c) / nk;
    if (m.cov_type == CovarianceType::kDiagonal) cov = Eigen::MatrixXd(cov.diagonal().asDiagonal());
    if (m.cov_type == CovarianceType::kDiagonal) {
      cov.diagonal() = cov.diagonal().cwiseMax(reg);
    } else {
      const double lo = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(cov, Eigen::EigenvaluesOnly).eigenvalues()(0);
      if (!(lo >= reg)) cov.diagonal().array() += reg - lo;
    }
    m.means[static_cast<std::size_t>(k)] = mu;
    m.covariances[static_cast<std::size_t>(k)] = cov;
  }
}

}  // namespace detail

/// E-step on standardized data: responsibilities (n×K) and mean log-likelihood.
inline std::pair<Eigen::MatrixXd, double> e_step(const GmmModel& m, const Eigen::MatrixXd& z) {
  Eigen::MatrixXd logp = detail::component_log_densities(m, z);
  double total = 0.0;
  for (Eigen::Index i = 0; i < logp.rows(); ++i) {
    const double lse = detail::log_sum_exp(logp.row(i));
    total += lse;
    logp.row(i) = (logp.row(i).array() - lse).exp();
  }
  return {logp, total / static_cast<double>(z.rows())};
}

/// One EM iteration (E-step then M-step) on standardized data.
inline GmmModel em_step(const GmmModel& current, const Eigen::MatrixXd& z, double reg = 1e-6) {
  GmmModel next = current;
  const auto [resp, ll] = e_step(current, z);
  detail::m_step(next, z, resp, reg);
  return next;
}

/// k-means++ seeding on standardized data followed by an M-step on the hard
/// nearest-centre assignment.
inline GmmModel kmeanspp_init(const Eigen::MatrixXd& z, int K, CovarianceType type, std::uint64_t seed,
                              double reg = 1e-6) {
  const Eigen::Index n = z.rows();
  Rng rng(seed);
  std::vector<Eigen::Index> centres;
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centres.push_back(first(rng));
  Eigen::VectorXd d2 = (z.rowwise() - z.row(centres[0])).rowwise().squaredNorm();
  while (static_cast<int>(centres.size()) < K) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        target -= d2(pick);
        if (target < 0.0) break;
      }
    } else {
      pick = first(rng);
    }
    centres.push_back(pick);
    d2 = d2.cwiseMin((z.rowwise() - z.row(pick)).rowwise().squaredNorm());
  }
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double dist = (z.row(i) - z.row(centres[static_cast<std::size_t>(k)])).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    r(i, best) = 1.0;
  }
  GmmModel m;
  m.cov_type = type;
  detail::m_step(m, z, r, reg);
  return m;
}

/// Fits a K-component mixture by EM on z-scored features (one row per sample).
inline GmmModel fit_em(const Eigen::MatrixXd& features, int K, CovarianceType type, std::uint64_t seed,
                       const EmOptions& opt = {}) {
  if (K < 1) throw InvalidArgument("K must be >= 1");
  if (features.rows() < static_cast<Eigen::Index>(K) * 7) {
    throw InvalidArgument("need at least " + std::to_string(K * 7) + " feature vectors for K=" + std::to_string(K) +
                          ", got " + std::to_string(features.rows()));
  }
  if (!features.allFinite()) throw InvalidArgument("features contain non-finite values");

  const Standardizer stdz = Standardizer::fit(features);
  const Eigen::MatrixXd z = stdz.apply(features);
  GmmModel m = kmeanspp_init(z, K, type, seed, opt.reg);
  m.standardizer = stdz;

  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0;; ++iter) {
    auto [resp, ll] = e_step(m, z);
    m.log_likelihood_trace.push_back(ll);
    if (ll < prev - opt.monotonicity_slack) {
      throw Error("EM log-likelihood decreased from " + format_double(prev) + " to " + format_double(ll) +
                  " at iteration " + std::to_string(iter));
    }
    m.log_likelihood = ll;
    m.iterations = iter;
    if (ll - prev < opt.tol) {
      m.converged = true;
      break;
    }
    if (iter == opt.max_iter) break;
    prev = ll;
    detail::m_step(m, z, resp, opt.reg);
  }
  return m;
}

/// log sum_k pi_k N(z; m_k, S_k) of a raw (unstandardized) feature vector.
inline double log_likelihood(const GmmModel& m, const Eigen::VectorXd& feature) {
  if (feature.size() != m.dim()) throw InvalidArgument("feature dimension differs from the model's");
  if (!feature.allFinite()) throw InvalidArgument("feature contains non-finite values");
  const Eigen::MatrixXd z = m.standardizer.apply(feature).transpose();
  return detail::log_sum_exp(detail::component_log_densities(m, z).row(0));
}

/// Row-wise log-likelihood of a feature matrix.
inline Eigen::VectorXd log_likelihood(const GmmModel& m, const Eigen::MatrixXd& features) {
  if (features.cols() != m.dim()) throw InvalidArgument("feature dimension differs from the model's");
  if (!features.allFinite()) throw InvalidArgument("features contain non-finite values");
  const Eigen::MatrixXd logp = detail::component_log_densities(m, m.standardizer.apply(features));
  Eigen::VectorXd out(logp.rows());
  for (Eigen::Index i = 0; i < logp.rows(); ++i) out(i) = detail::log_sum_exp(logp.row(i));
  return out;
}

struct GmmGrid {
  std::vector<int> components;
  std::vector<CovarianceType> covariance_types;

  /// K in 1..10, full and diagonal covariances.
  static GmmGrid standard() {
    GmmGrid g;
    for (int k = 1; k <= 10; ++k) g.components.push_back(k);
    g.covariance_types = {CovarianceType::kFull, CovarianceType::kDiagonal};
    return g;
  }
};

/// Parses "<Ks>:<covs>", e.g. "1..10:full,diag" or "1,2,4:diag".
inline GmmGrid parse_gmm_grid(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw InvalidArgument("gmm grid '" + std::string(text) + "' lacks ':'");
  GmmGrid g;
  auto split = [](std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else if (c != ' ') {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  };
  for (const auto& item : split(text.substr(0, colon))) {
    try {
      const auto dots = item.find("..");
      if (dots != std::string::npos) {
        const int lo = std::stoi(item.substr(0, dots));
        const int hi = std::stoi(item.substr(dots + 2));
        for (int k = lo; k <= hi; ++k) g.components.push_back(k);
      } else {
        g.components.push_back(std::stoi(item));
      }
    } catch (const std::logic_error&) {
      throw InvalidArgument("bad component count '" + item + "' in gmm grid");
    }
  }
  for (const auto& item : split(text.substr(colon + 1))) g.covariance_types.push_back(parse_covariance_type(item));
  for (int k : g.components) {
    if (k < 1) throw InvalidArgument("gmm grid component counts must be >= 1");
  }
  if (g.components.empty() || g.covariance_types.empty()) throw InvalidArgument("gmm grid is empty");
  return g;
}

inline std::string format_gmm_grid(const GmmGrid& g) {
  std::string s;
  for (std::size_t i = 0; i < g.components.size(); ++i) s += (i ? "," : "") + std::to_string(g.components[i]);
  s += ':';
  for (std::size_t i = 0; i < g.covariance_types.size(); ++i) {
    s += std::string(i ? "," : "") + std::string(to_string(g.covariance_types[i]));
  }
  return s;
}

struct GridCandidate {
  int components = 0;
  CovarianceType cov_type = CovarianceType::kFull;
  bool fitted = false;
  double holdout_log_likelihood = -std::numeric_limits<double>::infinity();
  std::string failure;
};

/// Fits every (K, covariance) pair on a seeded split and scores each by mean
/// holdout log-likelihood. Candidates within one paired standard error of the
/// best count as tied; ties go to smaller K, then to diagonal covariance. The
/// winner is refitted on all features with the same seed.
inline GmmModel grid_search(const Eigen::MatrixXd& features, const GmmGrid& grid, double holdout_fraction,
                            std::uint64_t seed, const EmOptions& opt = {},
                            std::vector<GridCandidate>* report = nullptr) {
  if (grid.components.empty() || grid.covariance_types.empty()) throw InvalidArgument("gmm grid is empty");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw InvalidArgument("holdout fraction must lie in (0, 1)");
  }
  const Eigen::Index n = features.rows();
  const auto n_hold = static_cast<Eigen::Index>(std::llround(static_cast<double>(n) * holdout_fraction));
  if (n_hold < 1 || n - n_hold < 7) throw InvalidArgument("too few feature vectors for a fit/holdout split");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng(derive_seed(seed, "gmm-split"));
  std::shuffle(order.begin(), order.end(), rng);
  Eigen::MatrixXd hold(n_hold, features.cols());
  Eigen::MatrixXd fit(n - n_hold, features.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i < n_hold) {
      hold.row(i) = features.row(order[static_cast<std::size_t>(i)]);
    } else {
      fit.row(i - n_hold) = features.row(order[static_cast<std::size_t>(i)]);
    }
  }

  std::vector<GridCandidate> cands;
  for (int k : grid.components) {
    for (CovarianceType c : grid.covariance_types) {
      const bool dup = std::any_of(cands.begin(), cands.end(),
                                   [&](const GridCandidate& g) { return g.components == k && g.cov_type == c; });
      if (!dup) cands.push_back({k, c, false, -std::numeric_limits<double>::infinity(), {}});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const GridCandidate& a, const GridCandidate& b) {
    if (a.components != b.components) return a.components < b.components;
    return a.cov_type == CovarianceType::kDiagonal && b.cov_type == CovarianceType::kFull;
  });

  std::vector<Eigen::VectorXd> point_ll(cands.size());
  std::size_t best = cands.size();
  for (std::size_t i = 0; i < cands.size(); ++i) {
    auto& c = cands[i];
    try {
      const GmmModel m = fit_em(fit, c.components, c.cov_type, seed, opt);
      point_ll[i] = log_likelihood(m, hold);
      c.holdout_log_likelihood = point_ll[i].mean();
      c.fitted = std::isfinite(c.holdout_log_likelihood);
      if (!c.fitted) c.failure = "non-finite holdout likelihood";
    } catch (const Error& e) {
      c.failure = e.what();
    }
    if (c.fitted && (best == cands.size() || c.holdout_log_likelihood > cands[best].holdout_log_likelihood)) best = i;
  }
  if (report != nullptr) *report = cands;

  // Paired one-standard-error rule against the best candidate.
  auto tied_with_best = [&](std::size_t i) {
    if (i == best) return true;
    if (n_hold < 2) return false;
    const Eigen::ArrayXd d = (point_ll[best] - point_ll[i]).array();
    const double mean = d.mean();
    const double var = (d - mean).square().sum() / static_cast<double>(d.size() - 1);
    return mean <= std::sqrt(var / static_cast<double>(d.size()));
  };
  std::vector<const GridCandidate*> tied, rest;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (cands[i].fitted) (tied_with_best(i) ? tied : rest).push_back(&cands[i]);
  }
  // Tied candidates keep the (K ascending, diagonal first) order; the rest
  // back up a failed refit in order of holdout likelihood.
  std::stable_sort(rest.begin(), rest.end(), [](const GridCandidate* x, const GridCandidate* y) {
    return x->holdout_log_likelihood > y->holdout_log_likelihood;
  });
  std::vector<const GridCandidate*> ranked = tied;
  ranked.insert(ranked.end(), rest.begin(), rest.end());
  std::string failures;
  for (const GridCandidate* c : ranked) {
    try {
      return fit_em(features, c->components, c->cov_type, seed, opt);
    } catch (const Error& e) {
      failures += std::string("; refit K=") + std::to_string(c->components) + ": " + e.what();
    }
  }
  for (const auto& c : cands) {
    if (!c.fitted) failures += "; K=" + std::to_string(c.components) + "/" + std::string(to_string(c.cov_type)) + ": " + c.failure;
  }
  throw GridExhausted("every GMM grid candidate failed" + failures);
}

// Plain-text parameter block in shortest round-trip decimals, so reloads are bit-exact.
inline std::string format_gmm(const GmmModel& m) {
  std::ostringstream os;
  os << "# diffpath gmm\n";
  os << "dim " << m.dim() << '\n';
  os << "components " << m.components() << '\n';
  os << "covariance " << to_string(m.cov_type) << '\n';
  os << "log_likelihood " << format_double(m.log_likelihood) << '\n';
  os << "iterations " << m.iterations << '\n';
  auto vec = [&](const char* key, const Eigen::VectorXd& v) {
    os << key;
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ' ' << format_double(v(i));
    os << '\n';
  };
  vec("standardize_mean", m.standardizer.mean);
  vec("standardize_scale", m.standardizer.scale);
  for (int k = 0; k < m.components(); ++k) {
    os << "component " << k << " weight " << format_double(m.weights(k)) << '\n';
    vec("mean", m.means[static_cast<std::size_t>(k)]);
    const Eigen::MatrixXd& c = m.covariances[static_cast<std::size_t>(k)];
    os << "cov";
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      for (Eigen::Index j = 0; j < c.cols(); ++j) os << ' ' << format_double(c(i, j));
    }
    os << '\n';
  }
  return os.str();
}

inline GmmModel parse_gmm(const std::string& text) {
  std::istringstream in(text);
  GmmModel m;
  Eigen::Index d = 0;
  int K = 0;
  std::string line;
  auto read_vec = [&](std::istringstream& ls, Eigen::Index len) {
    Eigen::VectorXd v(len);
    for (Eigen::Index i = 0; i < len; ++i) {
      std::string tok;
      if (!(ls >> tok)) throw InvalidArgument("gmm block: vector too short");
      v(i) = std::stod(tok);
    }
    return v;
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "dim") {
      ls >> d;
    } else if (key == "components") {
      ls >> K;
      m.weights = Eigen::VectorXd::Zero(K);
    } else if (key == "covariance") {
      std::string c;
      ls >> c;
      m.cov_type = parse_covariance_type(c);
    } else if (key == "log_likelihood") {
      std::string tok;
      ls >> tok;
      m.log_likelihood = std::stod(tok);
    } else if (key == "iterations") {
      ls >> m.iterations;
    } else if (key == "standardize_mean") {
      m.standardizer.mean = read_vec(ls, d);
    } else if (key == "standardize_scale") {
      m.standardizer.scale = read_vec(ls, d);
    } else if (key == "component") {
      int k = 0;
      std::string wkey, tok;
      ls >> k >> wkey >> tok;
      if (k < 0 || k >= K || wkey != "weight") throw InvalidArgument("gmm block: bad component line");
      m.weights(k) = std::stod(tok);
    } else if (key == "mean") {
      m.means.push_back(read_vec(ls, d));
    } else if (key == "cov") {
      const Eigen::VectorXd flat = read_vec(ls, d * d);
      m.covariances.emplace_back(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          flat.data(), d, d));
    } else {
      throw InvalidArgument("gmm block: unknown key '" + key + "'");
    }
  }
  if (d < 1 || K < 1 || static_cast<int>(m.means.size()) != K || static_cast<int>(m.covariances.size()) != K ||
      m.standardizer.mean.size() != d || m.standardizer.scale.size() != d) {
    throw InvalidArgument("gmm block is incomplete");
  }
  return m;
}

inline void save_gmm(const std::filesystem::path& path, const GmmModel& m) { write_text_file(path, format_gmm(m)); }

inline GmmModel load_gmm(const std::filesystem::path& path) {
  return parse_gmm(read_text_file(path));
}

}  // namespace diffpath
