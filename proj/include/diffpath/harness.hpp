#pragma once

// Benchmark pipeline: load and prepare datasets, extract trajectories, score
// every sample, fit the GMM on ID validation scores, and compare the ID test
// set against every OOD test set by AUROC.
//
// Dataset layout: <root>/val/*.dpv2 (ID only) and <root>/test/*.dpv2.
// Sample ids are "<dataset>/<split>/<file stem>/<index in file>".

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "diffpath/auroc.hpp"
#include "diffpath/config.hpp"
#include "diffpath/denoiser.hpp"
#include "diffpath/error.hpp"
#include "diffpath/file_predictor.hpp"
#include "diffpath/gmm.hpp"
#include "diffpath/mixture.hpp"
#include "diffpath/predictor.hpp"
#include "diffpath/random.hpp"
#include "diffpath/schedule.hpp"
#include "diffpath/score.hpp"
#include "diffpath/tensor.hpp"
#include "diffpath/tensor_io.hpp"
#include "diffpath/trajectory.hpp"

namespace diffpath {

/// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware
/// concurrency). Each index is handled exactly once; callers write results
/// into pre-sized slots, so output never depends on scheduling. The first
/// exception thrown by any worker is rethrown.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct DatasetRef {
  std::string name;
  std::filesystem::path root;
};

inline constexpr double kDefaultHoldoutFraction = 0.2;

struct BenchmarkSpec {
  DatasetRef id;
  std::vector<DatasetRef> ood;
  std::string predictor = "zero";
  int T = kDefaultSteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  SigmaConvention sigma_convention = SigmaConvention::kVariancePreserving;
  TrajectoryConfig trajectory{};
  ScoreOptions scoring{};
  GmmGrid gmm_grid = GmmGrid::standard();
  double holdout = kDefaultHoldoutFraction;
  EmOptions em{};
  std::size_t resize = 32;
  ValueRange value_range = ValueRange::kUnit;  // range of the stored pixels
  std::uint64_t seed = 0;
  unsigned threads = 0;

  DiffusionSchedule schedule() const { return make_linear_schedule(T, beta_start, beta_end, sigma_convention); }
};

/// "name:path, name:path, ..."; the first entry is the ID dataset.
inline std::vector<DatasetRef> parse_dataset_list(std::string_view text) {
  std::vector<DatasetRef> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const std::string_view item = detail::trim(text.substr(0, comma));
    text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 == item.size()) {
      throw ConfigError("datasets", "entry '" + std::string(item) + "' is not name:path");
    }
    const std::string name(detail::trim(item.substr(0, colon)));
    if (name.find_first_of(" \t/") != std::string::npos) {
      throw ConfigError("datasets", "dataset name '" + name + "' contains whitespace or '/'");
    }
    for (const auto& d : out) {
      if (d.name == name) throw ConfigError("datasets", "dataset name '" + name + "' appears twice");
    }
    out.push_back({name, std::filesystem::path(std::string(detail::trim(item.substr(colon + 1))))});
  }
  if (out.size() < 2) throw ConfigError("datasets", "need one ID dataset followed by at least one OOD dataset");
  return out;
}

inline std::string format_dataset_list(const BenchmarkSpec& spec) {
  std::string out = spec.id.name + ":" + spec.id.root.string();
  for (const auto& d : spec.ood) out += ", " + d.name + ":" + d.root.string();
  return out;
}

namespace detail {

template <typename F>
auto config_field(const std::string& key, F&& parse) -> decltype(parse()) {
  try {
    return parse();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace detail

/// Reads the benchmark keys shared by every verb. Keys not present keep
/// their defaults. Dataset paths are not checked here.
inline BenchmarkSpec benchmark_spec_from_config(const Config& c, bool require_datasets = true) {
  BenchmarkSpec s;
  if (require_datasets || c.has("datasets")) {
    const auto list = parse_dataset_list(c.get_string("datasets"));
    s.id = list.front();
    s.ood.assign(list.begin() + 1, list.end());
  }
  s.predictor = c.get_string("predictor", s.predictor);
  s.T = static_cast<int>(c.get_int("T", s.T));
  if (s.T < 1) throw ConfigError("T", "must be >= 1");
  s.beta_start = c.get_double("beta_start", s.beta_start);
  s.beta_end = c.get_double("beta_end", s.beta_end);
  if (c.has("sigma_convention")) {
    s.sigma_convention =
        detail::config_field("sigma_convention", [&] { return parse_sigma_convention(c.get_string("sigma_convention")); });
  }
  detail::config_field("beta_start", [&] { return s.schedule().steps(); });
  if (c.has("mode")) {
    s.trajectory.mode = detail::config_field("mode", [&] { return parse_trajectory_mode(c.get_string("mode")); });
  }
  s.trajectory.steps = static_cast<int>(c.get_int("T_prime", s.trajectory.steps));
  detail::config_field("T_prime", [&] {
    s.trajectory.validate(s.T);
    return 0;
  });
  s.scoring.use_error = c.get_bool("use_error", s.scoring.use_error);
  s.scoring.use_ssim = c.get_bool("use_ssim", s.scoring.use_ssim);
  if (c.has("gmm_grid")) {
    s.gmm_grid = detail::config_field("gmm_grid", [&] { return parse_gmm_grid(c.get_string("gmm_grid")); });
  }
  s.holdout = c.get_double("holdout", s.holdout);
  if (!(s.holdout > 0.0 && s.holdout < 1.0)) throw ConfigError("holdout", "must lie in (0, 1)");
  s.em.max_iter = static_cast<int>(c.get_int("em_max_iter", s.em.max_iter));
  if (s.em.max_iter < 1) throw ConfigError("em_max_iter", "must be >= 1");
  s.em.tol = c.get_double("em_tol", s.em.tol);
  if (!(s.em.tol >= 0.0)) throw ConfigError("em_tol", "must be >= 0");
  const long long resize = c.get_int("resize", static_cast<long long>(s.resize));
  if (resize != 32 && resize != 64) throw ConfigError("resize", "must be 32 or 64, got " + std::to_string(resize));
  s.resize = static_cast<std::size_t>(resize);
  if (c.has("value_range")) {
    s.value_range = detail::config_field("value_range", [&] { return parse_value_range(c.get_string("value_range")); });
  }
  s.seed = c.get_uint64("seed", s.seed);
  const long long threads = c.get_int("threads", 0);
  if (threads < 0) throw ConfigError("threads", "must be >= 0");
  s.threads = static_cast<unsigned>(threads);
  return s;
}

/// Every benchmark key with its resolved value.
inline Config benchmark_spec_to_config(const BenchmarkSpec& s) {
  Config c;
  if (!s.id.name.empty()) c.set("datasets", format_dataset_list(s));
  c.set("predictor", s.predictor);
  c.set("T", std::to_string(s.T));
  c.set("beta_start", format_double(s.beta_start));
  c.set("beta_end", format_double(s.beta_end));
  c.set("sigma_convention", std::string(to_string(s.sigma_convention)));
  c.set("mode", std::string(to_string(s.trajectory.mode)));
  c.set("T_prime", std::to_string(s.trajectory.steps));
  c.set("use_error", s.scoring.use_error ? "true" : "false");
  c.set("use_ssim", s.scoring.use_ssim ? "true" : "false");
  c.set("gmm_grid", format_gmm_grid(s.gmm_grid));
  c.set("holdout", format_double(s.holdout));
  c.set("em_max_iter", std::to_string(s.em.max_iter));
  c.set("em_tol", format_double(s.em.tol));
  c.set("resize", std::to_string(s.resize));
  c.set("value_range", std::string(to_string(s.value_range)));
  c.set("seed", std::to_string(s.seed));
  c.set("threads", std::to_string(s.threads));
  return c;
}

/// Builds a predictor from "zero", "analytic:<mixture file>",
/// "denoiser:<directory>" or "files:<manifest>".
inline std::unique_ptr<NoisePredictor> make_predictor(const std::string& spec, const DiffusionSchedule& schedule) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? std::string{} : spec.substr(colon + 1);
  if (kind == "zero" && arg.empty()) return std::make_unique<ZeroPredictor>();
  if (arg.empty()) {
    throw ConfigError("predictor", "expected zero, analytic:<file>, denoiser:<dir> or files:<manifest>, got '" + spec + "'");
  }
  if (kind == "analytic") return std::make_unique<AnalyticPredictor>(load_mixture(arg), schedule);
  if (kind == "denoiser") return std::make_unique<TinyDenoiser>(load_denoiser(arg));
  if (kind == "files") return std::make_unique<FilePredictor>(arg);
  throw ConfigError("predictor", "unknown predictor kind '" + kind + "'");
}

/// One prepared split: images at the benchmark resolution in [-1, 1].
struct PreparedSplit {
  std::string dataset;
  std::string split;
  std::vector<std::string> sample_ids;
  ImageTensor images;
};

/// Loads a split directory, resizes to size×size and maps to [-1, 1].
inline PreparedSplit prepare_split(const std::string& dataset, const std::string& split,
                                   const std::filesystem::path& dir, std::size_t size, ValueRange stored) {
  const auto batches = load_split(dir, stored);
  if (batches.empty()) throw IoError("dataset split directory '" + dir.string() + "' holds no tensor files");
  std::vector<ImageTensor> parts;
  std::vector<std::string> ids;
  std::size_t channels = 0;
  for (const auto& b : batches) {
    const ImageShape s = b.images.shape();
    if (channels == 0) channels = s.c;
    if (s.c != channels) {
      throw ConfigError("datasets", "file '" + b.stem + "' in '" + dir.string() + "' has " + std::to_string(s.c) +
                                        " channels, expected " + std::to_string(channels));
    }
    parts.push_back(normalize(resize_bilinear(b.images, size, size), ValueRange::kSigned));
    for (std::size_t i = 0; i < s.n; ++i) ids.push_back(dataset + "/" + split + "/" + b.stem + "/" + std::to_string(i));
  }
  return {dataset, split, std::move(ids), concat_batches(parts)};
}

/// Per-sample 6D scores of a split, computed in parallel.
inline std::vector<ScoreRow> score_split(const PreparedSplit& data, const NoisePredictor& predictor,
                                         const DiffusionSchedule& schedule, TrajectoryConfig trajectory,
                                         const ScoreOptions& scoring, unsigned threads) {
  std::vector<ScoreRow> rows(data.sample_ids.size());
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    const Tensor x0 = data.images.sample(i);
    const TrajectoryRecord rec = extract_trajectory(x0, predictor, schedule, trajectory, data.sample_ids[i]);
    rows[i] = {data.sample_ids[i], compute_score(x0, rec, scoring)};
  });
  return rows;
}

inline Eigen::MatrixXd score_matrix(const std::vector<ScoreRow>& rows) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), 6);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < 6; ++j) m(static_cast<Eigen::Index>(i), j) = rows[i].score[static_cast<std::size_t>(j)];
  }
  return m;
}

struct AnomalyRow {
  std::string sample_id;
  double anomaly = 0.0;  // negative GMM log-likelihood; higher = more anomalous
};

struct PairResult {
  std::string id_dataset;
  std::string ood_dataset;
  double auroc = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

struct BenchmarkResult {
  Config config;  // resolved benchmark keys
  std::string predictor_name;
  GmmModel gmm;
  std::vector<GridCandidate> grid;
  std::map<std::string, std::vector<ScoreRow>> scores;      // keyed "<dataset>/<split>"
  std::map<std::string, std::vector<AnomalyRow>> anomaly;  // keyed "<dataset>/<split>", test splits only
  std::vector<PairResult> pairs;
  std::vector<std::pair<std::string, double>> timings;  // wall-clock seconds per stage
};

/// Splits already prepared in memory; used by run_benchmark and by callers
/// that synthesise data directly.
struct BenchmarkData {
  PreparedSplit id_val;
  PreparedSplit id_test;
  std::vector<PreparedSplit> ood_test;
};

using LogFn = std::function<void(const std::string&)>;

inline std::vector<AnomalyRow> anomaly_scores(const GmmModel& gmm, const std::vector<ScoreRow>& rows) {
  const Eigen::VectorXd ll = log_likelihood(gmm, score_matrix(rows));
  std::vector<AnomalyRow> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = {rows[i].sample_id, -ll(static_cast<Eigen::Index>(i))};
  return out;
}

inline PairResult compare(const std::string& id_name, const std::vector<AnomalyRow>& id,
                          const std::string& ood_name, const std::vector<AnomalyRow>& ood) {
  std::vector<double> a, b;
  for (const auto& r : id) a.push_back(r.anomaly);
  for (const auto& r : ood) b.push_back(r.anomaly);
  return {id_name, ood_name, auroc(a, b), a.size(), b.size()};
}

inline BenchmarkResult run_benchmark(const BenchmarkSpec& spec, const BenchmarkData& data,
                                     const NoisePredictor& predictor, const LogFn& log = {}) {
  using clock = std::chrono::steady_clock;
  const auto note = [&](const std::string& m) {
    if (log) log(m);
  };
  const DiffusionSchedule schedule = spec.schedule();
  spec.trajectory.validate(schedule.steps());

  const ImageShape ref = data.id_val.images.shape();
  const auto check_shape = [&](const PreparedSplit& s) {
    const ImageShape sh = s.images.shape();
    if (sh.c != ref.c || sh.h != ref.h || sh.w != ref.w) {
      throw ConfigError("datasets", "split " + s.dataset + "/" + s.split + " has per-sample shape " +
                                        dims_to_string({sh.c, sh.h, sh.w}) + ", ID validation has " +
                                        dims_to_string({ref.c, ref.h, ref.w}));
    }
  };
  check_shape(data.id_test);
  for (const auto& s : data.ood_test) check_shape(s);

  BenchmarkResult result;
  result.config = benchmark_spec_to_config(spec);
  result.predictor_name = predictor.name();

  const auto score = [&](const PreparedSplit& s) {
    const auto start = clock::now();
    TrajectoryConfig tc = spec.trajectory;
    tc.seed = derive_seed(spec.seed, s.dataset + "/" + s.split);
    note("scoring " + s.dataset + "/" + s.split + " (" + std::to_string(s.sample_ids.size()) + " samples)");
    auto rows = score_split(s, predictor, schedule, tc, spec.scoring, spec.threads);
    result.timings.emplace_back("score " + s.dataset + "/" + s.split,
                                std::chrono::duration<double>(clock::now() - start).count());
    result.scores[s.dataset + "/" + s.split] = rows;
    return rows;
  };

  const auto val_rows = score(data.id_val);
  const auto id_rows = score(data.id_test);
  std::vector<std::vector<ScoreRow>> ood_rows;
  for (const auto& s : data.ood_test) ood_rows.push_back(score(s));

  const auto start = clock::now();
  note("fitting GMM grid " + format_gmm_grid(spec.gmm_grid) + " on " + std::to_string(val_rows.size()) + " scores");
  result.gmm = grid_search(score_matrix(val_rows), spec.gmm_grid, spec.holdout, derive_seed(spec.seed, "gmm"), spec.em,
                           &result.grid);
  result.timings.emplace_back("gmm", std::chrono::duration<double>(clock::now() - start).count());

  const std::string id_key = data.id_test.dataset + "/" + data.id_test.split;
  result.anomaly[id_key] = anomaly_scores(result.gmm, id_rows);
  for (std::size_t j = 0; j < data.ood_test.size(); ++j) {
    const auto& s = data.ood_test[j];
    const std::string key = s.dataset + "/" + s.split;
    result.anomaly[key] = anomaly_scores(result.gmm, ood_rows[j]);
    result.pairs.push_back(compare(data.id_test.dataset, result.anomaly[id_key], s.dataset, result.anomaly[key]));
    note(s.dataset + ": AUROC " + format_double(result.pairs.back().auroc));
  }
  return result;
}

/// Loads every split named by the spec and runs the pipeline.
inline BenchmarkResult run_benchmark(const BenchmarkSpec& spec, const LogFn& log = {}) {
  const auto require_dir = [](const std::filesystem::path& p) {
    if (!std::filesystem::is_directory(p)) throw ConfigError("datasets", "directory '" + p.string() + "' does not exist");
  };
  require_dir(spec.id.root / "val");
  require_dir(spec.id.root / "test");
  for (const auto& d : spec.ood) require_dir(d.root / "test");

  const DiffusionSchedule schedule = spec.schedule();
  const auto predictor = make_predictor(spec.predictor, schedule);
  BenchmarkData data{prepare_split(spec.id.name, "val", spec.id.root / "val", spec.resize, spec.value_range),
                     prepare_split(spec.id.name, "test", spec.id.root / "test", spec.resize, spec.value_range),
                     {}};
  for (const auto& d : spec.ood) {
    data.ood_test.push_back(prepare_split(d.name, "test", d.root / "test", spec.resize, spec.value_range));
  }
  return run_benchmark(spec, data, *predictor, log);
}

// Report: '#' header lines (report marker, polarity, resolved config), then a
// tab-separated table with one row per (ID, OOD) pair.

inline constexpr const char* kReportMarker = "# diffpath report v1";
inline constexpr const char* kReportColumns = "id_dataset\tood_dataset\tauroc\tn_id\tn_ood";

inline std::string format_auroc(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string emit_report(const Config& config, const std::vector<PairResult>& pairs) {
  std::ostringstream os;
  os << kReportMarker << '\n';
  os << "# positive_class=ood\n";
  os << "# anomaly_score=-gmm_log_likelihood\n";
  for (const auto& [k, v] : config.values()) os << "# config " << k << " = " << v << '\n';
  os << kReportColumns << '\n';
  for (const auto& p : pairs) {
    os << p.id_dataset << '\t' << p.ood_dataset << '\t' << format_auroc(p.auroc) << '\t' << p.n_id << '\t' << p.n_ood
       << '\n';
  }
  return os.str();
}

inline std::string emit_report(const BenchmarkResult& result) {
  Config c = result.config;
  c.set("gmm_selected", std::to_string(result.gmm.components()) + "/" + std::string(to_string(result.gmm.cov_type)));
  return emit_report(c, result.pairs);
}

struct ParsedReport {
  Config config;
  std::vector<PairResult> pairs;
};

inline ParsedReport parse_report(std::string_view text) {
  ParsedReport out;
  bool marker = false, header = false;
  int lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string line(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++lineno;
    if (line.empty()) continue;
    if (line == kReportMarker) {
      marker = true;
      continue;
    }
    if (line.rfind("# config ", 0) == 0) {
      out.config.apply_override(line.substr(9));
      continue;
    }
    if (line[0] == '#') continue;
    if (!header) {
      if (line != kReportColumns) throw InvalidArgument("report line " + std::to_string(lineno) + ": unexpected header");
      header = true;
      continue;
    }
    std::istringstream ls(line);
    PairResult p;
    std::string a;
    if (!std::getline(ls, p.id_dataset, '\t') || !std::getline(ls, p.ood_dataset, '\t') ||
        !std::getline(ls, a, '\t') || !(ls >> p.n_id >> p.n_ood)) {
      throw InvalidArgument("report line " + std::to_string(lineno) + ": malformed row");
    }
    p.auroc = std::stod(a);
    out.pairs.push_back(p);
  }
  if (!marker || !header) throw InvalidArgument("not a diffpath report");
  return out;
}

inline std::string format_anomaly_table(const std::vector<AnomalyRow>& rows) {
  std::string out = "sample_id\tanomaly\n";
  for (const auto& r : rows) out += r.sample_id + "\t" + format_double(r.anomaly) + "\n";
  return out;
}

inline std::vector<AnomalyRow> parse_anomaly_table(std::string_view text) {
  std::vector<AnomalyRow> rows;
  bool header = true;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string line(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw InvalidArgument("anomaly table row without a tab: '" + line + "'");
    rows.push_back({line.substr(0, tab), std::stod(line.substr(tab + 1))});
  }
  return rows;
}

inline std::string anomaly_file_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '/', '.');
  return f + ".tsv";
}

/// Writes report.tsv, gmm.txt, grid.tsv, scores/<dataset>.<split>.tsv and
/// anomaly/<dataset>.<split>.tsv under `dir`.
inline void write_benchmark_outputs(const std::filesystem::path& dir, const BenchmarkResult& result) {
  write_text_file(dir / "report.tsv", emit_report(result));
  save_gmm(dir / "gmm.txt", result.gmm);
  std::string grid = "components\tcovariance\tholdout_log_likelihood\tstatus\n";
  for (const auto& g : result.grid) {
    grid += std::to_string(g.components) + "\t" + std::string(to_string(g.cov_type)) + "\t" +
            (g.fitted ? format_double(g.holdout_log_likelihood) : "nan") + "\t" + (g.fitted ? "ok" : g.failure) + "\n";
  }
  write_text_file(dir / "grid.tsv", grid);
  for (const auto& [key, rows] : result.scores) write_score_table(dir / "scores" / anomaly_file_name(key), rows);
  for (const auto& [key, rows] : result.anomaly) write_text_file(dir / "anomaly" / anomaly_file_name(key), format_anomaly_table(rows));
}

}  // namespace diffpath
