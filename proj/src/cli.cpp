#include "fmrc/cli.hpp"

#include "fmrc/config.hpp"
#include "fmrc/diagnostics.hpp"
#include "fmrc/flowmatch.hpp"
#include "fmrc/io.hpp"
#include "fmrc/msm.hpp"
#include "fmrc/random.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <thread>

namespace fmrc::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "fmrc 0.1.0";

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string encoder;
  std::string pairs;
  std::vector<std::string> manifests;
  std::optional<std::int64_t> iterations;
  bool csv = false;
};

// Exclusive marker guarding an output directory against concurrent runs.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".fmrc.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST) throw IoError("output directory is locked by another run: " + path_.string());
      throw IoError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;
  ~OutputLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

std::string absolute_path(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

int thread_budget() {
  if (const char* env = std::getenv("FMRC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(v);
    throw InvalidArgument("FMRC_THREADS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

RunConfig resolve(const Options& opt) {
  RunConfig cfg = opt.config.empty() ? RunConfig{} : RunConfig::load(opt.config);
  if (!opt.out.empty()) cfg.out = opt.out;
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.mode.empty()) cfg.training.mode = opt.mode;
  if (opt.iterations) cfg.training.iterations = *opt.iterations;
  if (!opt.pairs.empty()) cfg.io.pairs = opt.pairs;
  if (!opt.encoder.empty()) cfg.io.encoder = opt.encoder;
  if (!opt.manifests.empty()) cfg.io.manifests = opt.manifests;
  if (opt.csv) cfg.dataset.write_csv = true;
  cfg.out = absolute_path(cfg.out);
  cfg.io.pairs = absolute_path(cfg.io.pairs);
  cfg.io.encoder = absolute_path(cfg.io.encoder);
  for (auto& m : cfg.io.manifests) m = absolute_path(m);
  cfg.validate();
  return cfg;
}

void write_snapshot(const RunConfig& cfg, const std::string& command) {
  nlohmann::json j = cfg.to_json();
  j["version"] = kVersion;
  io::write_json(fs::path(cfg.out) / ("resolved_" + command + ".json"), j);
}

fs::path pairs_path(const RunConfig& cfg) {
  return cfg.io.pairs.empty() ? fs::path(cfg.out) / "pairs.fmrc" : fs::path(cfg.io.pairs);
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw IoError(what + " not found: " + p.string());
}

int cmd_simulate(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir(cfg.out);
  const auto spec = cfg.potential.spec();
  const auto sde = cfg.sde_config();
  const auto x0 = default_initial_states(spec, cfg.sde.n_trajectories, derive_seed(sde.seed, "initial"));
  auto trajs = simulate_ensemble(spec, sde, x0, thread_budget());
  if (cfg.swiss_roll.enabled) {
    const auto map = cfg.swiss_roll.map();
    for (auto& t : trajs) t = apply_swiss_roll(map, t);
  }
  nlohmann::json names = nlohmann::json::array();
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "traj_%03zu", i);
    io::write_trajectory(dir / (std::string(name) + ".fmrc"), trajs[i]);
    if (cfg.dataset.write_csv) io::write_trajectory_csv(dir / (std::string(name) + ".csv"), trajs[i]);
    names.push_back(std::string(name) + ".fmrc");
  }
  auto pairs = extract_pairs(std::span<const Trajectory>(trajs), cfg.dataset.lag_steps);
  if (cfg.dataset.max_pairs > 0 && pairs.size() > cfg.dataset.max_pairs)
    pairs = subsample_pairs(pairs, cfg.dataset.max_pairs, derive_seed(sde.seed, "subsample"));
  io::write_pairs(dir / "pairs.fmrc", pairs,
                  {{"trajectories", names},
                   {"potential", spec.name()},
                   {"transform", cfg.swiss_roll.enabled ? "swiss_roll" : "none"},
                   {"dt", cfg.sde.dt},
                   {"seed", cfg.seed}});
  if (cfg.dataset.write_csv) io::write_pairs_csv(dir / "pairs.csv", pairs);
  out << "simulated " << trajs.size() << " trajectories, " << pairs.size() << " pairs (lag " << pairs.lag_steps
      << ") -> " << dir.string() << "\n";
  return kOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir(cfg.out);
  const fs::path data_path = pairs_path(cfg);
  require_file(data_path, "pair file");
  const auto data = io::read_pairs(data_path);
  const auto mode = flow::train_mode_from_string(cfg.training.mode);
  const auto tc = cfg.train_config();

  std::optional<flow::EncoderModel> frozen;
  if (mode == flow::TrainMode::FixedEncoder) {
    if (cfg.io.encoder.empty()) throw InvalidArgument("assess mode needs --encoder <checkpoint>");
    require_file(cfg.io.encoder, "encoder checkpoint");
    frozen = flow::load_encoder(cfg.io.encoder);
  }
  const auto result = flow::train(data, mode, tc, frozen ? &*frozen : nullptr);

  const auto sub = subsample_pairs(data, cfg.training.final_loss_samples, derive_seed(cfg.seed, "final-loss"));
  const auto final = flow::evaluate_loss(result.models, sub.x, sub.y, derive_seed(cfg.seed, "final-loss-noise"));

  flow::Manifest manifest;
  manifest.mode = flow::to_string(mode);
  manifest.pairs = data_path.string();
  manifest.dataset_hash = flow::hash_file(data_path);
  manifest.final_loss = final.total;
  manifest.iterations = cfg.training.iterations;
  if (mode == flow::TrainMode::Full) manifest.encoder.clear();
  manifest.extra = {{"final_l0", final.l0},
                    {"final_l1", final.l1},
                    {"best_validation", result.best_validation},
                    {"best_iteration", result.best_iteration},
                    {"rc_dim", mode == flow::TrainMode::Full ? 0 : result.models.encoder.rc_dim()}};
  if (frozen) io::write_file(dir / manifest.encoder, io::read_file(cfg.io.encoder));
  flow::save_models(dir, result.models, manifest, frozen.has_value());

  Eigen::MatrixXd hist(static_cast<Eigen::Index>(result.history.size()), 5);
  for (std::size_t i = 0; i < result.history.size(); ++i) {
    const auto& r = result.history[i];
    hist.row(static_cast<Eigen::Index>(i)) << static_cast<double>(r.iteration), r.l0, r.l1, r.total,
        r.validation_total;
  }
  io::write_matrix_csv(dir / "loss_history.csv", hist, {"iteration", "l0", "l1", "total", "validation_total"});
  out << "trained " << manifest.mode << " for " << cfg.training.iterations
      << " iterations; final loss " << io::format_double(final.total) << "\n";
  return kOk;
}

struct LoadedRun {
  flow::TrainedModels models;
  flow::Manifest manifest;
  fs::path pairs;
};

LoadedRun load_run(const RunConfig& cfg, const std::string& manifest_path) {
  require_file(manifest_path, "manifest");
  LoadedRun run;
  run.models = flow::load_models(manifest_path, &run.manifest);
  run.pairs = cfg.io.pairs.empty() ? fs::path(run.manifest.pairs) : fs::path(cfg.io.pairs);
  require_file(run.pairs, "pair file");
  return run;
}

std::vector<std::string> manifest_list(const RunConfig& cfg) {
  if (!cfg.io.manifests.empty()) return cfg.io.manifests;
  return {(fs::path(cfg.out) / "manifest.json").string()};
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir(cfg.out);
  const auto manifests = manifest_list(cfg);
  if (manifests.size() != 1) throw InvalidArgument("eval takes exactly one --manifest");
  const auto run = load_run(cfg, manifests.front());
  if (run.models.mode == flow::TrainMode::Full) throw InvalidArgument("eval needs a reaction coordinate; got a full-mode run");

  const auto meta = io::decode_fmrc1(io::read_file(run.pairs)).metadata;
  if (!meta.contains("trajectories")) throw IoError("pair file does not list its trajectories");
  const bool rolled = meta.value("transform", std::string("none")) == "swiss_roll";
  const auto map = cfg.swiss_roll.map();

  std::vector<Eigen::MatrixXd> observed, plane;
  Eigen::Index total = 0;
  for (const auto& name : meta.at("trajectories")) {
    const auto path = run.pairs.parent_path() / name.get<std::string>();
    require_file(path, "trajectory");
    const auto traj = io::read_trajectory(path);
    const Eigen::MatrixXd clean = rolled ? map.inverse_rows(traj.points) : traj.points;
    observed.push_back(traj.points);
    plane.push_back(clean.leftCols(std::min<Eigen::Index>(2, clean.cols())));
    total += traj.length();
  }

  // Microstates on the clean projected coordinates.
  const std::uint64_t seed = stage_seed(cfg, "eval");
  const Eigen::Index n_fit = std::min<Eigen::Index>(cfg.msm.fit_subsample, total);
  Eigen::MatrixXd all(total, plane.front().cols());
  Eigen::Index row = 0;
  for (const auto& p : plane) {
    all.middleRows(row, p.rows()) = p;
    row += p.rows();
  }
  std::vector<Eigen::Index> idx(total);
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  Rng rng(derive_seed(seed, "fit-subsample"));
  for (Eigen::Index i = 0; i < n_fit; ++i) std::swap(idx[i], idx[i + rng.index(total - i)]);
  std::sort(idx.begin(), idx.begin() + n_fit);
  Eigen::MatrixXd fit(n_fit, all.cols());
  for (Eigen::Index i = 0; i < n_fit; ++i) fit.row(i) = all.row(idx[i]);
  msm::KMeansOptions km;
  km.max_iterations = cfg.msm.kmeans_max_iterations;
  const auto disc = msm::kmeans_discretize(fit, cfg.msm.n_microstates, derive_seed(seed, "kmeans"), km).discretization;

  std::vector<std::vector<int>> seqs;
  for (const auto& p : plane) seqs.push_back(disc.assign(p));
  const auto T = msm::count_transition_matrix(seqs, disc.size(), cfg.msm.lag_steps);
  msm::PccaOptions po;
  po.reversibilize = cfg.msm.reversibilize;
  const auto pcca = msm::pcca_plus(T, cfg.msm.n_clusters, po);

  // Strided frames carrying (clean plane, RC, metastable label).
  std::vector<Eigen::Index> frame_traj, frame_row;
  for (std::size_t t = 0; t < observed.size(); ++t)
    for (Eigen::Index i = 0; i < observed[t].rows(); i += cfg.msm.report_stride) {
      frame_traj.push_back(static_cast<Eigen::Index>(t));
      frame_row.push_back(i);
    }
  const auto n_frames = static_cast<Eigen::Index>(frame_row.size());
  Eigen::MatrixXd obs(n_frames, observed.front().cols()), xy(n_frames, plane.front().cols());
  std::vector<int> label(n_frames);
  for (Eigen::Index f = 0; f < n_frames; ++f) {
    const auto t = frame_traj[f];
    obs.row(f) = observed[t].row(frame_row[f]);
    xy.row(f) = plane[t].row(frame_row[f]);
    const int a = T.active_index(seqs[t][frame_row[f]]);
    label[f] = a < 0 ? -1 : pcca.crisp[a];
  }
  const Eigen::MatrixXd rc = flow::evaluate_rc(run.models.encoder, obs);

  std::vector<double> rc_kept;
  std::vector<int> label_kept;
  for (Eigen::Index f = 0; f < n_frames; ++f)
    if (label[f] >= 0) {
      rc_kept.push_back(rc(f, 0));
      label_kept.push_back(label[f]);
    }
  msm::SeparationOptions so;
  so.allow_single_merge = cfg.msm.allow_single_merge;
  so.min_cluster_size = cfg.msm.min_cluster_size;
  const auto report = msm::rc_cluster_separation(rc_kept, label_kept, so);

  nlohmann::json j = report.to_json();
  j["rc_component"] = 0;
  j["frames"] = n_frames;
  j["unlabeled_frames"] = n_frames - static_cast<Eigen::Index>(rc_kept.size());
  j["msm"] = {{"n_microstates", disc.size()},
              {"lag_steps", cfg.msm.lag_steps},
              {"active_states", T.active.size()},
              {"excluded_states", T.excluded},
              {"n_clusters", cfg.msm.n_clusters},
              {"eigenvalues", std::vector<double>(pcca.eigenvalues.data(),
                                                  pcca.eigenvalues.data() + pcca.eigenvalues.size())}};
  io::write_json(dir / "separation_report.json", j);

  std::vector<std::string> head2d;
  for (Eigen::Index c = 0; c < xy.cols(); ++c) head2d.push_back("x" + std::to_string(c + 1));
  for (Eigen::Index c = 0; c < rc.cols(); ++c) head2d.push_back(rc.cols() == 1 ? "rc" : "rc" + std::to_string(c + 1));
  Eigen::MatrixXd t2d(n_frames, xy.cols() + rc.cols());
  t2d << xy, rc;
  io::write_matrix_csv(dir / "rc_2d.csv", t2d, head2d);

  Eigen::MatrixXd tc(n_frames, 2);
  tc.col(0) = rc.col(0);
  for (Eigen::Index f = 0; f < n_frames; ++f) tc(f, 1) = label[f];
  io::write_matrix_csv(dir / "rc_cluster.csv", tc, {"rc", "cluster"});

  std::vector<std::string> headP, headChi;
  for (int s : T.active) headP.push_back("s" + std::to_string(s));
  for (int c = 0; c < pcca.chi.cols(); ++c) headChi.push_back("chi" + std::to_string(c));
  io::write_matrix_csv(dir / "P.csv", T.P, headP);
  io::write_matrix_csv(dir / "chi.csv", pcca.chi, headChi);

  out << "accuracy " << io::format_double(report.accuracy) << ", min gap ratio "
      << io::format_double(report.min_gap_ratio) << (report.merged ? " (one merge)" : "") << "\n";
  return kOk;
}

nlohmann::json sweep_row_json(const diag::SweepRow& r) {
  return {{"budget", r.budget},
          {"train_loss", r.train_loss},
          {"weak_error_forward", r.weak_error_forward},
          {"weak_error_backward", r.weak_error_backward},
          {"w2_pairs", r.w2_pairs},
          {"noise_forward", r.noise_forward},
          {"noise_backward", r.noise_backward}};
}

int cmd_diagnose(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir(cfg.out);
  const auto manifests = manifest_list(cfg);
  std::vector<LoadedRun> runs;
  for (const auto& m : manifests) runs.push_back(load_run(cfg, m));
  for (const auto& r : runs)
    if (r.manifest.dataset_hash != runs.front().manifest.dataset_hash || r.pairs != runs.front().pairs)
      throw InvalidArgument("all manifests must refer to the same pair file");
  const auto pairs = io::read_pairs(runs.front().pairs);
  const auto wcfg = cfg.weak_error_config();

  if (runs.size() == 1) {
    const auto res = diag::weak_operator_error(pairs, runs.front().models, wcfg);
    io::write_json(dir / "diagnostics.json", {{"forward", res.forward.to_json()},
                                             {"backward", res.backward.to_json()},
                                             {"w2_pairs", res.w2_pairs},
                                             {"train_loss", runs.front().manifest.final_loss},
                                             {"budget", runs.front().manifest.iterations}});
    out << "weak error forward " << io::format_double(res.forward.weak_error) << ", backward "
        << io::format_double(res.backward.weak_error) << ", W2 " << io::format_double(res.w2_pairs) << "\n";
    return kOk;
  }

  std::vector<diag::SweepEntry> entries;
  for (const auto& r : runs)
    entries.push_back({static_cast<double>(r.manifest.iterations), r.manifest.final_loss, &r.models});
  const auto rows = diag::fmrc_vs_operator_error_sweep(pairs, entries, wcfg);
  diag::write_sweep_csv(dir / "sweep.csv", rows);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back(sweep_row_json(r));
  io::write_json(dir / "diagnostics.json", {{"sweep", j}});
  out << "sweep over " << rows.size() << " snapshots -> " << (dir / "sweep.csv").string() << "\n";
  return kOk;
}

void write_failure(const std::string& out_dir, const std::string& command, const NumericalFailure& e) {
  if (out_dir.empty()) return;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  nlohmann::json diag = nlohmann::json::parse(e.diagnostics(), nullptr, false);
  if (diag.is_discarded()) diag = e.diagnostics();
  try {
    io::write_json(fs::path(out_dir) / "failure.json", {{"command", command}, {"error", e.what()}, {"diagnostics", diag}});
  } catch (const Error&) {
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Flow-matching reaction coordinates: simulate, train, evaluate, diagnose"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON or INI config file");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--seed", opt.seed, "global seed");
  };
  auto* sim = app.add_subcommand("simulate", "simulate trajectories and extract transition pairs");
  add_common(sim);
  sim->add_flag("--csv", opt.csv, "also write CSV copies");
  auto* train = app.add_subcommand("train", "train velocity fields (and the encoder in fmrc mode)");
  add_common(train);
  train->add_option("--mode", opt.mode, "fmrc | full | assess")->check(CLI::IsMember({"fmrc", "full", "assess"}));
  train->add_option("--encoder", opt.encoder, "frozen encoder checkpoint (assess mode)");
  train->add_option("--pairs", opt.pairs, "pair file");
  train->add_option("--iterations", opt.iterations, "training iterations");
  auto* eval = app.add_subcommand("eval", "MSM, PCCA+ and RC separation report");
  add_common(eval);
  eval->add_option("--manifest", opt.manifests, "checkpoint manifest");
  eval->add_option("--pairs", opt.pairs, "pair file (defaults to the manifest's)");
  auto* diagnose = app.add_subcommand("diagnose", "weak operator error; several manifests give a sweep");
  add_common(diagnose);
  diagnose->add_option("--manifest", opt.manifests, "checkpoint manifest (repeatable)")->expected(1, -1);
  diagnose->add_option("--pairs", opt.pairs, "pair file (defaults to the manifests')");
  auto* version = app.add_subcommand("version", "print the version");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "fmrc: " << e.what() << "\n";
    return kUsageError;
  }
  if (version->parsed()) {
    out << kVersion << "\n";
    return kOk;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  std::string out_dir;
  try {
    const RunConfig cfg = resolve(opt);
    out_dir = cfg.out;
    OutputLock lock(cfg.out);
    write_snapshot(cfg, command);
    if (command == "simulate") return cmd_simulate(cfg, out);
    if (command == "train") return cmd_train(cfg, out);
    if (command == "eval") return cmd_eval(cfg, out);
    return cmd_diagnose(cfg, out);
  } catch (const ConfigError& e) {
    err << "fmrc " << command << ": " << e.what() << "\n";
    return kUsageError;
  } catch (const NumericalFailure& e) {
    err << "fmrc " << command << ": numerical failure: " << e.what() << "\n";
    write_failure(out_dir, command, e);
    return kNumericalFailure;
  } catch (const BlowUp& e) {
    err << "fmrc " << command << ": " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const SingularPoint& e) {
    err << "fmrc " << command << ": " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const Error& e) {
    err << "fmrc " << command << ": " << e.what() << "\n";
    return kUsageError;
  } catch (const fs::filesystem_error& e) {
    err << "fmrc " << command << ": " << e.what() << "\n";
    return kUsageError;
  } catch (const nlohmann::json::exception& e) {
    err << "fmrc " << command << ": malformed input: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "fmrc " << command << ": internal error: " << e.what() << "\n";
    return kInternalError;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace fmrc::cli
