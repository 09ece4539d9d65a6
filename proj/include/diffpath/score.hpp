#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/ssim.hpp"
#include "diffpath/tensor.hpp"
#include "diffpath/tensor_io.hpp"
#include "diffpath/trajectory.hpp"

namespace diffpath {

/// Per-timestep squared-error maps, one per trajectory step.
struct MseTrajectory {
  std::vector<Tensor> maps;
};

inline MseTrajectory mse_trajectory(const TrajectoryRecord& rec) {
  rec.validate();
  MseTrajectory out;
  out.maps.reserve(rec.length());
  for (std::size_t i = 0; i < rec.length(); ++i) {
    Tensor m(rec.predicted[i].dims());
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double d = static_cast<double>(rec.predicted[i][j]) - rec.truth[i][j];
      m[j] = static_cast<float>(d * d);
    }
    out.maps.push_back(std::move(m));
  }
  return out;
}

/// s_1..s_3: pooled sums of error powers p = 1..3; s_4..s_6: pooled sums of
/// their backward differences along the trajectory.
using Score6D = std::array<double, 6>;

struct ScoreOptions {
  /// Score the prediction error (true) or the raw predictions (false).
  bool use_error = true;
  /// Weight every pixel by (1 - SSIM(x0, sum_t eps_theta)) before pooling.
  bool use_ssim = true;
  SsimOptions ssim{};
};

/// 1 - SSIM between x0 and the accumulated predictions, both min-max
/// rescaled to [0, 1] per sample first.
inline std::vector<double> structural_weight(const Tensor& x0, const Tensor& eps_sum, const SsimOptions& opt = {}) {
  const SsimMap map = ssim_map(minmax_rescale(x0), minmax_rescale(eps_sum), opt);
  std::vector<double> w(map.values.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 - map.values[i];
  return w;
}

/// Pools per-step maps into the 6D score: for p = 1..3,
/// s_p = sum_j w_j sum_t E_t[j]^p and s_{p+3} = sum_j w_j sum_t (E_t[j]^p - E_{t-1}[j]^p).
inline Score6D pool_score(std::span<const Tensor> maps, std::span<const double> weight) {
  if (maps.size() < 2) {
    throw InsufficientTrajectory("the temporal-difference terms need at least 2 steps");
  }
  const std::size_t D = maps[0].size();
  if (weight.size() != D) throw InvalidArgument("weight map size differs from the error maps");
  for (const auto& m : maps) {
    if (m.size() != D) throw InvalidArgument("error maps differ in size");
  }
  Score6D score{};
  for (std::size_t j = 0; j < D; ++j) {
    std::array<double, 3> level{};
    std::array<double, 3> delta{};
    std::array<double, 3> prev{};
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const double e = maps[i][j];
      const std::array<double, 3> pw{e, e * e, e * e * e};
      for (std::size_t p = 0; p < 3; ++p) {
        level[p] += pw[p];
        if (i > 0) delta[p] += pw[p] - prev[p];
      }
      prev = pw;
    }
    for (std::size_t p = 0; p < 3; ++p) {
      score[p] += level[p] * weight[j];
      score[p + 3] += delta[p] * weight[j];
    }
  }
  return score;
}

/// Six-dimensional trajectory score. The spatial weight is applied per pixel
/// before pooling over (c, h, w).
inline Score6D compute_score(const Tensor& x0, const TrajectoryRecord& rec, const ScoreOptions& opt = {}) {
  rec.validate();
  const std::size_t n = rec.length();
  if (n < 2) {
    throw InsufficientTrajectory("trajectory '" + rec.sample_id + "' has " + std::to_string(n) +
                                 " step(s); the temporal-difference terms need at least 2");
  }
  if (x0.size() != rec.predicted[0].size()) {
    throw InvalidArgument("x0 and trajectory '" + rec.sample_id + "' differ in element count");
  }
  const std::size_t D = x0.size();

  std::vector<Tensor> err;
  if (opt.use_error) {
    err = mse_trajectory(rec).maps;
  } else {
    err = rec.predicted;
  }

  std::vector<double> weight(D, 1.0);
  if (opt.use_ssim) {
    Tensor eps_sum(rec.predicted[0].dims());
    for (std::size_t j = 0; j < D; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += rec.predicted[i][j];
      eps_sum[j] = static_cast<float>(s);
    }
    weight = structural_weight(Tensor(rec.predicted[0].dims(), std::vector<float>(x0.values().begin(), x0.values().end())),
                               eps_sum, opt.ssim);
  }

  return pool_score(err, weight);
}

/// One row of a score table.
struct ScoreRow {
  std::string sample_id;
  Score6D score{};
};

/// Tab-separated table: header line, then sample_id followed by s1..s6.
inline std::string format_score_table(const std::vector<ScoreRow>& rows) {
  std::string out = "sample_id\ts1\ts2\ts3\ts4\ts5\ts6\n";
  for (const auto& r : rows) {
    out += r.sample_id;
    for (double v : r.score) out += '\t' + format_double(v);
    out += '\n';
  }
  return out;
}

inline void write_score_table(const std::filesystem::path& path, const std::vector<ScoreRow>& rows) {
  write_text_file(path, format_score_table(rows));
}

inline std::vector<ScoreRow> read_score_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open score table '" + path.string() + "'");
  std::vector<ScoreRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#' || line.rfind("sample_id\t", 0) == 0) continue;
    std::istringstream ls(line);
    ScoreRow row;
    std::getline(ls, row.sample_id, '\t');
    for (double& v : row.score) {
      std::string field;
      if (!std::getline(ls, field, '\t')) {
        throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": expected 7 columns");
      }
      v = std::stod(field);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace diffpath
