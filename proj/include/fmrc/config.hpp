#pragma once

#include "fmrc/diagnostics.hpp"
#include "fmrc/dynamics.hpp"
#include "fmrc/errors.hpp"
#include "fmrc/flowmatch.hpp"
#include "fmrc/msm.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fmrc {

class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& what, std::vector<std::string> keys)
      : InvalidArgument(what), keys_(std::move(keys)) {}
  const std::vector<std::string>& keys() const { return keys_; }

 private:
  std::vector<std::string> keys_;
};

// Every knob of the pipeline. Serialized as nested JSON objects, one per section.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "fmrc_out";

  struct Potential {
    std::string kind = "seven_well";  // seven_well | double_well_toy
    double radial_stiffness = 10.0;
    double multiplicity = 7.0;
    double ou_stiffness = 10.0;
    double barrier = 3.0;
    double fast_stiffness = 20.0;

    PotentialSpec spec() const;
  } potential;

  struct Sde {
    double dt = 0.001;
    double beta = 1.0;
    std::int64_t n_steps = 100000;
    std::int64_t burn_in = 1000;
    int n_trajectories = 10;
    double blowup_cap = 1e6;
  } sde;

  struct SwissRoll {
    bool enabled = true;
    double angle_offset = 1.5 * std::numbers::pi;
    double angle_scale = 0.375 * std::numbers::pi;
    double thickness_scale = 1.0;

    SwissRollMap map() const;
  } swiss_roll;

  struct Dataset {
    int lag_steps = 100;
    std::int64_t max_pairs = 0;  // 0 keeps every pair
    bool write_csv = false;
  } dataset;

  flow::ModelConfig model;

  struct Training {
    std::string mode = "fmrc";
    std::int64_t iterations = 20000;
    std::int64_t batch_size = 512;
    double learning_rate = 1e-3;
    std::string optimizer = "adam";
    double validation_fraction = 0.1;
    std::int64_t validation_size = 4096;
    std::int64_t log_every = 100;
    double ema = 0.05;
    double weight_l0 = 1.0;
    double weight_l1 = 1.0;
    bool standardize = true;
    int nonfinite_patience = 5;
    std::int64_t final_loss_samples = 20000;
  } training;

  struct Msm {
    int n_microstates = 100;
    int lag_steps = 100;
    int n_clusters = 7;
    std::int64_t fit_subsample = 20000;
    int kmeans_max_iterations = 200;
    bool reversibilize = true;
    bool allow_single_merge = true;
    std::int64_t min_cluster_size = 10;
    int report_stride = 10;
  } msm;

  struct Diagnostics {
    int bins_per_dim = 5;
    int dictionary_size = 25;
    double bandwidth_factor = 2.0;
    std::int64_t max_samples = 2000;
    std::string ode_method = "rk4";
    int ode_steps = 20;
  } diagnostics;

  // Inputs named on the command line, recorded so a snapshot can be replayed.
  struct Io {
    std::string pairs;
    std::string encoder;
    std::vector<std::string> manifests;
  } io;

  SdeConfig sde_config() const;
  flow::TrainConfig train_config() const;
  diag::WeakErrorConfig weak_error_config() const;
  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys take defaults; unknown or mistyped keys raise ConfigError naming them.
  static RunConfig from_json(const nlohmann::json& j);
  // JSON when the text parses as a JSON object, otherwise INI ([section] key = value).
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

// Named sub-streams of the global seed.
std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage);

}  // namespace fmrc
