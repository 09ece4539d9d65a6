#pragma once

// Command-line front end. Every verb takes --config FILE, repeatable
// --set key=value overrides and --out DIR, and writes DIR/effective.cfg.
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffpath/config.hpp"
#include "diffpath/denoiser.hpp"
#include "diffpath/error.hpp"
#include "diffpath/file_predictor.hpp"
#include "diffpath/gmm.hpp"
#include "diffpath/harness.hpp"
#include "diffpath/mixture.hpp"
#include "diffpath/npy.hpp"
#include "diffpath/score.hpp"
#include "diffpath/tensor_io.hpp"
#include "diffpath/trajectory.hpp"

namespace diffpath {

enum ExitCode : int { kExitOk = 0, kExitInvalid = 1, kExitRuntime = 2 };

inline constexpr const char* kEffectiveConfig = "effective.cfg";

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      // benchmark
      "datasets", "predictor", "T", "beta_start", "beta_end", "sigma_convention", "mode", "T_prime", "use_error",
      "use_ssim", "gmm_grid", "holdout", "em_max_iter", "em_tol", "resize", "value_range", "seed", "threads",
      // convert
      "source", "count", "shift", "batch_size", "layout", "mixture_components", "mixture_channels",
      "mixture_size", "mixture_mean_scale", "mixture_std",
      // train-denoiser
      "train_data", "epochs", "lr", "features", "embed_dim",
      // dump-trajectories
      "data", "id_prefix", "record_predictions", "keep_latents",
      // fit-gmm
      "scores",
      // report
      "run_dir"};
  return keys;
}

struct CliContext {
  Config config;
  std::filesystem::path out;
  bool quiet = false;
  std::ostream* err = &std::cerr;

  void log(const std::string& m) const {
    if (!quiet) *err << "diffpath: " << m << '\n';
  }
  LogFn logger() const {
    return [this](const std::string& m) { log(m); };
  }
};

namespace cli {

/// Resolved keys written to effective.cfg: the merged file + overrides with
/// every default of the verb filled in.
inline void write_effective(const CliContext& ctx, const Config& resolved) {
  write_text_file(ctx.out / kEffectiveConfig, resolved.format());
}

inline Config merged_with(const Config& base, const Config& extra) {
  Config c = base;
  for (const auto& [k, v] : extra.values()) c.set(k, v);
  return c;
}

inline std::vector<std::string> part_names(std::size_t parts) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < parts; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "part-%04zu", i);
    names.emplace_back(buf);
  }
  return names;
}

/// Writes a unit-range image batch as part files of at most `batch` images.
inline std::size_t write_parts(const std::filesystem::path& dir, const ImageTensor& images, std::size_t batch) {
  const ImageShape s = images.shape();
  const std::size_t parts = (s.n + batch - 1) / batch;
  const auto names = part_names(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t lo = p * batch, hi = std::min(s.n, lo + batch);
    const auto v = images.values().subspan(lo * s.sample_size(), (hi - lo) * s.sample_size());
    write_tensor_file(dir / (names[p] + kTensorExtension),
                      Tensor({hi - lo, s.c, s.h, s.w}, std::vector<float>(v.begin(), v.end())));
  }
  return parts;
}

/// convert: source = npy:<file> | mixture:<mixture file> | random-mixture
inline void run_convert(CliContext& ctx) {
  const Config& c = ctx.config;
  const std::string source = c.get_string("source");
  const std::uint64_t seed = c.get_uint64("seed", 0);
  const auto batch = static_cast<std::size_t>(c.get_int("batch_size", 256));
  if (batch == 0) throw ConfigError("batch_size", "must be >= 1");
  Config resolved = c;
  resolved.set("seed", std::to_string(seed));
  resolved.set("batch_size", std::to_string(batch));

  if (source == "random-mixture") {
    const auto K = c.get_int("mixture_components", 3);
    const auto C = c.get_int("mixture_channels", 1);
    const auto S = c.get_int("mixture_size", 32);
    const double scale = c.get_double("mixture_mean_scale", 0.3);
    const double sd = c.get_double("mixture_std", 0.1);
    if (K < 1) throw ConfigError("mixture_components", "must be >= 1");
    if (C < 1) throw ConfigError("mixture_channels", "must be >= 1");
    if (S < 1) throw ConfigError("mixture_size", "must be >= 1");
    if (!(sd > 0.0)) throw ConfigError("mixture_std", "must be > 0");
    resolved.set("mixture_components", std::to_string(K));
    resolved.set("mixture_channels", std::to_string(C));
    resolved.set("mixture_size", std::to_string(S));
    resolved.set("mixture_mean_scale", format_double(scale));
    resolved.set("mixture_std", format_double(sd));
    write_effective(ctx, resolved);
    const auto model = make_random_mixture(static_cast<std::size_t>(K),
                                           ImageShape{1, static_cast<std::size_t>(C), static_cast<std::size_t>(S),
                                                      static_cast<std::size_t>(S)},
                                           scale, sd, seed);
    save_mixture(ctx.out / "mixture.txt", model);
    ctx.log("wrote " + (ctx.out / "mixture.txt").string());
    return;
  }

  const auto colon = source.find(':');
  const std::string kind = source.substr(0, colon);
  const std::string arg = colon == std::string::npos ? std::string{} : source.substr(colon + 1);
  ImageTensor images = [&] {
    if (kind == "mixture" && !arg.empty()) {
      const auto count = c.get_int("count", 1000);
      if (count < 1) throw ConfigError("count", "must be >= 1");
      const double shift = c.get_double("shift", 0.0);
      resolved.set("count", std::to_string(count));
      resolved.set("shift", format_double(shift));
      write_effective(ctx, resolved);
      const auto model = load_mixture(arg).shifted(shift);
      Rng rng(derive_seed(seed, "convert"));
      return normalize(sample_images(model, static_cast<std::size_t>(count), rng), ValueRange::kUnit);
    }
    if (kind == "npy" && !arg.empty()) {
      const std::string layout = c.get_string("layout", "nchw");
      if (layout != "nchw" && layout != "nhwc") throw ConfigError("layout", "expected nchw or nhwc, got '" + layout + "'");
      const std::string range = c.get_string("value_range", "unit");
      const auto vr = detail::config_field("value_range", [&] { return parse_value_range(range); });
      resolved.set("layout", layout);
      resolved.set("value_range", range);
      write_effective(ctx, resolved);
      if (!std::filesystem::is_regular_file(arg)) throw ConfigError("source", "file '" + arg + "' does not exist");
      const auto loaded =
          npy_to_images(read_npy(arg), layout == "nchw" ? PixelLayout::kNCHW : PixelLayout::kNHWC, vr);
      return normalize(loaded, ValueRange::kUnit);
    }
    throw ConfigError("source", "expected npy:<file>, mixture:<file> or random-mixture, got '" + source + "'");
  }();
  const std::size_t parts = write_parts(ctx.out, images, batch);
  ctx.log("wrote " + std::to_string(images.shape().n) + " images in " + std::to_string(parts) + " file(s)");
}

inline ImageTensor load_prepared(const std::filesystem::path& dir, const BenchmarkSpec& spec,
                                 std::vector<std::string>* ids, const std::string& prefix,
                                 const std::string& key = "data") {
  if (!std::filesystem::is_directory(dir)) throw ConfigError(key, "directory '" + dir.string() + "' does not exist");
  const auto batches = load_split(dir, spec.value_range);
  if (batches.empty()) throw ConfigError(key, "directory '" + dir.string() + "' holds no tensor files");
  const std::string lead = prefix.empty() || prefix.back() == '/' ? prefix : prefix + "/";
  std::vector<ImageTensor> parts;
  for (const auto& b : batches) {
    parts.push_back(normalize(resize_bilinear(b.images, spec.resize, spec.resize), ValueRange::kSigned));
    if (ids != nullptr) {
      for (std::size_t i = 0; i < b.images.shape().n; ++i) ids->push_back(lead + b.stem + "/" + std::to_string(i));
    }
  }
  return concat_batches(parts);
}

inline void run_train_denoiser(CliContext& ctx) {
  const Config& c = ctx.config;
  const BenchmarkSpec spec = benchmark_spec_from_config(c, false);
  const std::filesystem::path data_dir = c.get_string("train_data");
  TrainOptions opt;
  opt.epochs = static_cast<int>(c.get_int("epochs", opt.epochs));
  opt.lr = c.get_double("lr", opt.lr);
  opt.batch_size = static_cast<std::size_t>(c.get_int("batch_size", static_cast<long long>(opt.batch_size)));
  opt.arch.features = static_cast<std::size_t>(c.get_int("features", static_cast<long long>(opt.arch.features)));
  opt.arch.embed_dim = static_cast<std::size_t>(c.get_int("embed_dim", static_cast<long long>(opt.arch.embed_dim)));
  opt.seed = spec.seed;
  if (opt.epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (!(opt.lr > 0.0)) throw ConfigError("lr", "must be > 0");
  if (opt.batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (opt.arch.features < 1) throw ConfigError("features", "must be >= 1");
  if (opt.arch.embed_dim < 1) throw ConfigError("embed_dim", "must be >= 1");

  Config resolved = merged_with(c, benchmark_spec_to_config(spec));
  resolved.set("epochs", std::to_string(opt.epochs));
  resolved.set("lr", format_double(opt.lr));
  resolved.set("batch_size", std::to_string(opt.batch_size));
  resolved.set("features", std::to_string(opt.arch.features));
  resolved.set("embed_dim", std::to_string(opt.arch.embed_dim));
  write_effective(ctx, resolved);

  const ImageTensor data = load_prepared(data_dir, spec, nullptr, "", "train_data");
  opt.on_epoch = [&](int epoch, const TinyDenoiser&, double loss) {
    ctx.log("epoch " + std::to_string(epoch + 1) + " loss " + format_double(loss));
  };
  const TrainResult r = train_denoiser(data, spec.schedule(), opt);
  save_denoiser(ctx.out / "denoiser", r.model);
  std::string losses = "epoch\tloss\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
    losses += std::to_string(e + 1) + "\t" + format_double(r.epoch_loss[e]) + "\n";
  }
  write_text_file(ctx.out / "loss.tsv", losses);
}

inline void run_dump_trajectories(CliContext& ctx) {
  const Config& c = ctx.config;
  const BenchmarkSpec spec = benchmark_spec_from_config(c, false);
  const std::filesystem::path data_dir = c.get_string("data");
  const std::string prefix = c.get_string("id_prefix", "");
  const bool record = c.get_bool("record_predictions", false);
  const bool keep_latents = c.get_bool("keep_latents", false);
  Config resolved = merged_with(c, benchmark_spec_to_config(spec));
  resolved.set("id_prefix", prefix);
  resolved.set("record_predictions", record ? "true" : "false");
  resolved.set("keep_latents", keep_latents ? "true" : "false");
  write_effective(ctx, resolved);

  const DiffusionSchedule schedule = spec.schedule();
  const auto predictor = make_predictor(spec.predictor, schedule);
  std::vector<std::string> ids;
  const ImageTensor images = load_prepared(data_dir, spec, &ids, prefix);
  TrajectoryConfig tc = spec.trajectory;
  tc.seed = derive_seed(spec.seed, "dump/" + prefix);
  tc.keep_latents = keep_latents;

  const auto timesteps = select_timesteps(spec.T, tc.steps);
  std::string ts = "timesteps";
  for (int t : timesteps) ts += " " + std::to_string(t);
  write_text_file(ctx.out / "timesteps.txt", ts + "\n");

  std::vector<ScoreRow> rows(ids.size());
  std::vector<TrajectoryRecord> records(record ? ids.size() : 0);
  std::filesystem::create_directories(ctx.out / "trajectories");
  parallel_for(ids.size(), spec.threads, [&](std::size_t i) {
    const Tensor x0 = images.sample(i);
    TrajectoryRecord rec = extract_trajectory(x0, *predictor, schedule, tc, ids[i]);
    std::string file = ids[i];
    std::replace(file.begin(), file.end(), '/', '.');
    write_tensor_file(ctx.out / "trajectories" / (file + kTensorExtension), pack_trajectory(rec));
    if (keep_latents) {
      Tensor lat({rec.latents.size(), x0.dims()[1], x0.dims()[2], x0.dims()[3]});
      for (std::size_t k = 0; k < rec.latents.size(); ++k) {
        std::copy(rec.latents[k].values().begin(), rec.latents[k].values().end(),
                  lat.values().begin() + static_cast<std::ptrdiff_t>(k * x0.size()));
      }
      write_tensor_file(ctx.out / "latents" / (file + kTensorExtension), lat);
    }
    rows[i] = {ids[i], compute_score(x0, rec, spec.scoring)};
    if (record) records[i] = std::move(rec);
  });
  write_score_table(ctx.out / "scores.tsv", rows);
  if (record) {
    PredictionWriter writer(ctx.out / "predictions");
    for (const auto& rec : records) {
      for (std::size_t k = 0; k < rec.length(); ++k) writer.add(rec.sample_id, rec.timesteps[k], rec.predicted[k]);
    }
    writer.finish();
  }
  ctx.log("wrote " + std::to_string(ids.size()) + " trajectories");
}

inline void run_fit_gmm(CliContext& ctx) {
  const Config& c = ctx.config;
  const BenchmarkSpec spec = benchmark_spec_from_config(c, false);
  const std::filesystem::path scores = c.get_string("scores");
  if (!std::filesystem::is_regular_file(scores)) {
    throw ConfigError("scores", "score table '" + scores.string() + "' does not exist");
  }
  write_effective(ctx, merged_with(c, benchmark_spec_to_config(spec)));
  const auto rows = read_score_table(scores);
  std::vector<GridCandidate> grid;
  const GmmModel m =
      grid_search(score_matrix(rows), spec.gmm_grid, spec.holdout, derive_seed(spec.seed, "gmm"), spec.em, &grid);
  save_gmm(ctx.out / "gmm.txt", m);
  std::string g = "components\tcovariance\tholdout_log_likelihood\tstatus\n";
  for (const auto& x : grid) {
    g += std::to_string(x.components) + "\t" + std::string(to_string(x.cov_type)) + "\t" +
         (x.fitted ? format_double(x.holdout_log_likelihood) : "nan") + "\t" + (x.fitted ? "ok" : x.failure) + "\n";
  }
  write_text_file(ctx.out / "grid.tsv", g);
  ctx.log("selected K=" + std::to_string(m.components()) + " " + std::string(to_string(m.cov_type)));
}

inline void run_benchmark_verb(CliContext& ctx) {
  const BenchmarkSpec spec = benchmark_spec_from_config(ctx.config, true);
  write_effective(ctx, merged_with(ctx.config, benchmark_spec_to_config(spec)));
  const BenchmarkResult result = run_benchmark(spec, ctx.logger());
  write_benchmark_outputs(ctx.out, result);
  for (const auto& [stage, seconds] : result.timings) ctx.log("timing " + stage + " " + format_double(seconds) + " s");
}

/// Recomputes the report of a finished run from its anomaly tables.
inline void run_report(CliContext& ctx) {
  const std::filesystem::path run_dir = ctx.config.get_string("run_dir");
  const auto report_path = run_dir / "report.tsv";
  if (!std::filesystem::is_regular_file(report_path)) {
    throw ConfigError("run_dir", "'" + run_dir.string() + "' holds no report.tsv");
  }
  write_effective(ctx, ctx.config);
  const ParsedReport previous = parse_report(read_text_file(report_path));
  const BenchmarkSpec spec = benchmark_spec_from_config(previous.config, true);
  const auto table = [&](const std::string& dataset) {
    return parse_anomaly_table(read_text_file(run_dir / "anomaly" / anomaly_file_name(dataset + "/test")));
  };
  const auto id = table(spec.id.name);
  std::vector<PairResult> pairs;
  for (const auto& d : spec.ood) pairs.push_back(compare(spec.id.name, id, d.name, table(d.name)));
  write_text_file(ctx.out / "report.tsv", emit_report(previous.config, pairs));
}

}  // namespace cli

/// Parses argv and runs one verb; returns the process exit code.
inline int dispatch(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"diffpath: diffusion-path OOD detection"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool quiet = false;

  struct Verb {
    const char* name;
    const char* help;
    void (*run)(CliContext&);
  };
  const Verb verbs[] = {
      {"convert", "convert npy arrays or mixture samples into tensor files", cli::run_convert},
      {"train-denoiser", "train the small convolutional noise predictor", cli::run_train_denoiser},
      {"dump-trajectories", "extract and store per-sample trajectories and scores", cli::run_dump_trajectories},
      {"fit-gmm", "grid-search a GMM on a score table", cli::run_fit_gmm},
      {"run-benchmark", "run the full ID-vs-OOD benchmark", cli::run_benchmark_verb},
      {"report", "rebuild the report of a finished benchmark run", cli::run_report},
  };
  for (const auto& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("-c,--config", config_path, "configuration file")->required();
    sub->add_option("-s,--set", overrides, "override key=value (repeatable, last wins)");
    sub->add_option("-o,--out", out_dir, "output directory")->required();
    sub->add_flag("-q,--quiet", quiet, "suppress log messages");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    err << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    err << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "diffpath: " << e.what() << "\n" << app.help();
    return kExitInvalid;
  }

  const Verb* verb = nullptr;
  for (const auto& v : verbs) {
    if (app.got_subcommand(v.name)) verb = &v;
  }

  CliContext ctx;
  ctx.out = out_dir;
  ctx.quiet = quiet;
  ctx.err = &err;
  try {
    std::filesystem::create_directories(ctx.out);
    Config merged;
    try {
      merged = Config::load(config_path);
    } catch (const ConfigError&) {
      for (const auto& o : overrides) merged.apply_override(o);
      write_text_file(ctx.out / kEffectiveConfig, merged.format());
      throw;
    }
    for (const auto& o : overrides) merged.apply_override(o);
    // Echo the merged config before validation; verbs overwrite it with the
    // fully resolved form.
    write_text_file(ctx.out / kEffectiveConfig, merged.format());
    for (const auto& [k, v] : merged.values()) {
      if (known_config_keys().count(k) == 0) throw ConfigError(k, "unknown key");
    }
    ctx.config = merged;
    verb->run(ctx);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "diffpath: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "diffpath: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace diffpath
