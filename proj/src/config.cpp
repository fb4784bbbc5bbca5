#include "fmrc/config.hpp"

#include "fmrc/io.hpp"
#include "fmrc/random.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <type_traits>

namespace fmrc {

namespace {

// Lists every serialized field once; shared by encoding, decoding and INI typing.
template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("", "seed", c.seed);
  f("", "out", c.out);

  f("potential", "kind", c.potential.kind);
  f("potential", "radial_stiffness", c.potential.radial_stiffness);
  f("potential", "multiplicity", c.potential.multiplicity);
  f("potential", "ou_stiffness", c.potential.ou_stiffness);
  f("potential", "barrier", c.potential.barrier);
  f("potential", "fast_stiffness", c.potential.fast_stiffness);

  f("sde", "dt", c.sde.dt);
  f("sde", "beta", c.sde.beta);
  f("sde", "n_steps", c.sde.n_steps);
  f("sde", "burn_in", c.sde.burn_in);
  f("sde", "n_trajectories", c.sde.n_trajectories);
  f("sde", "blowup_cap", c.sde.blowup_cap);

  f("swiss_roll", "enabled", c.swiss_roll.enabled);
  f("swiss_roll", "angle_offset", c.swiss_roll.angle_offset);
  f("swiss_roll", "angle_scale", c.swiss_roll.angle_scale);
  f("swiss_roll", "thickness_scale", c.swiss_roll.thickness_scale);

  f("dataset", "lag_steps", c.dataset.lag_steps);
  f("dataset", "max_pairs", c.dataset.max_pairs);
  f("dataset", "write_csv", c.dataset.write_csv);

  f("model", "rc_dim", c.model.rc_dim);
  f("model", "encoder_hidden", c.model.encoder_hidden);
  f("model", "velocity_hidden", c.model.velocity_hidden);
  f("model", "s_frequencies", c.model.s_frequencies);
  f("model", "encoder_activation", c.model.encoder_activation);
  f("model", "velocity_activation", c.model.velocity_activation);

  f("training", "mode", c.training.mode);
  f("training", "iterations", c.training.iterations);
  f("training", "batch_size", c.training.batch_size);
  f("training", "learning_rate", c.training.learning_rate);
  f("training", "optimizer", c.training.optimizer);
  f("training", "validation_fraction", c.training.validation_fraction);
  f("training", "validation_size", c.training.validation_size);
  f("training", "log_every", c.training.log_every);
  f("training", "ema", c.training.ema);
  f("training", "weight_l0", c.training.weight_l0);
  f("training", "weight_l1", c.training.weight_l1);
  f("training", "standardize", c.training.standardize);
  f("training", "nonfinite_patience", c.training.nonfinite_patience);
  f("training", "final_loss_samples", c.training.final_loss_samples);

  f("msm", "n_microstates", c.msm.n_microstates);
  f("msm", "lag_steps", c.msm.lag_steps);
  f("msm", "n_clusters", c.msm.n_clusters);
  f("msm", "fit_subsample", c.msm.fit_subsample);
  f("msm", "kmeans_max_iterations", c.msm.kmeans_max_iterations);
  f("msm", "reversibilize", c.msm.reversibilize);
  f("msm", "allow_single_merge", c.msm.allow_single_merge);
  f("msm", "min_cluster_size", c.msm.min_cluster_size);
  f("msm", "report_stride", c.msm.report_stride);

  f("diagnostics", "bins_per_dim", c.diagnostics.bins_per_dim);
  f("diagnostics", "dictionary_size", c.diagnostics.dictionary_size);
  f("diagnostics", "bandwidth_factor", c.diagnostics.bandwidth_factor);
  f("diagnostics", "max_samples", c.diagnostics.max_samples);
  f("diagnostics", "ode_method", c.diagnostics.ode_method);
  f("diagnostics", "ode_steps", c.diagnostics.ode_steps);

  f("io", "pairs", c.io.pairs);
  f("io", "encoder", c.io.encoder);
  f("io", "manifests", c.io.manifests);
}

// Sections written for information only and ignored when loading.
const std::set<std::string> kInformational = {"seeds", "version"};

nlohmann::json encode(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

template <typename T>
nlohmann::json encode(const T& v) {
  if constexpr (std::is_same_v<T, nn::Activation>)
    return nn::to_string(v);
  else
    return v;
}

template <typename T>
bool decode(const nlohmann::json& j, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) return false;
    out = j.get<bool>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (j.is_number()) {
      out = j.get<double>();
    } else if (j.is_string() && (j == "inf" || j == "infinity")) {
      out = std::numeric_limits<double>::infinity();
    } else {
      return false;
    }
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) return false;
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) {
        out = j.get<T>();
        return true;
      }
      if (j.get<std::int64_t>() < 0) return false;
    }
    out = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) return false;
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, nn::Activation>) {
    if (!j.is_string()) return false;
    try {
      out = nn::activation_from_string(j.get<std::string>());
    } catch (const Error&) {
      return false;
    }
  } else if constexpr (std::is_same_v<T, std::vector<int>>) {
    if (!j.is_array()) return false;
    T v;
    for (const auto& e : j) {
      if (!e.is_number_integer()) return false;
      v.push_back(e.get<int>());
    }
    out = v;
  } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
    if (!j.is_array()) return false;
    T v;
    for (const auto& e : j) {
      if (!e.is_string()) return false;
      v.push_back(e.get<std::string>());
    }
    out = v;
  }
  return true;
}

std::string dotted(const char* section, const char* key) {
  return *section ? std::string(section) + "." + key : std::string(key);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// INI values are strings; the default's JSON type decides how to read them.
nlohmann::json ini_value(const nlohmann::json& like, const std::string& raw) {
  const std::string s = trim(raw);
  try {
    if (like.is_boolean()) {
      if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
      if (s == "false" || s == "no" || s == "off" || s == "0") return false;
    } else if (like.is_number_unsigned()) {
      std::size_t pos = 0;
      const auto v = std::stoull(s, &pos);
      if (pos == s.size() && s.find('-') == std::string::npos) return v;
    } else if (like.is_number_integer()) {
      std::size_t pos = 0;
      const auto v = std::stoll(s, &pos);
      if (pos == s.size()) return v;
    } else if (like.is_number_float()) {
      if (s == "inf" || s == "infinity") return "inf";
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos == s.size()) return v;
    } else if (like.is_array()) {
      nlohmann::json arr = nlohmann::json::array();
      std::stringstream ss(s);
      std::string item;
      const bool numeric = ss.str().find_first_not_of("0123456789, -") == std::string::npos;
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        if (numeric)
          arr.push_back(std::stoi(item));
        else
          arr.push_back(item);
      }
      return arr;
    } else {
      return s;
    }
  } catch (const std::exception&) {
  }
  return s;
}

}  // namespace

PotentialSpec RunConfig::Potential::spec() const {
  if (kind == "seven_well") return PotentialSpec::seven_well(radial_stiffness, multiplicity, ou_stiffness);
  if (kind == "double_well_toy") return PotentialSpec::double_well_toy(barrier, fast_stiffness);
  throw ConfigError("unknown potential kind '" + kind + "'", {"potential.kind"});
}

SwissRollMap RunConfig::SwissRoll::map() const {
  SwissRollMap m;
  m.angle_offset = angle_offset;
  m.angle_scale = angle_scale;
  m.thickness_scale = thickness_scale;
  return m;
}

SdeConfig RunConfig::sde_config() const {
  SdeConfig c;
  c.dt = sde.dt;
  c.beta = sde.beta;
  c.n_steps = sde.n_steps;
  c.burn_in = sde.burn_in;
  c.seed = stage_seed(*this, "simulate");
  c.blowup_cap = sde.blowup_cap;
  return c;
}

flow::TrainConfig RunConfig::train_config() const {
  flow::TrainConfig c;
  c.iterations = training.iterations;
  c.batch_size = training.batch_size;
  c.learning_rate = training.learning_rate;
  c.use_sgd = training.optimizer == "sgd";
  c.validation_fraction = training.validation_fraction;
  c.validation_size = training.validation_size;
  c.log_every = training.log_every;
  c.ema = training.ema;
  c.weights = {training.weight_l0, training.weight_l1};
  c.seed = stage_seed(*this, "train");
  c.standardize = training.standardize;
  c.nonfinite_patience = training.nonfinite_patience;
  c.model = model;
  return c;
}

diag::WeakErrorConfig RunConfig::weak_error_config() const {
  diag::WeakErrorConfig c;
  c.grid.bins_per_dim = diagnostics.bins_per_dim;
  c.grid.dictionary_size = diagnostics.dictionary_size;
  c.grid.bandwidth_factor = diagnostics.bandwidth_factor;
  c.max_samples = diagnostics.max_samples;
  c.solver.method = flow::ode_method_from_string(diagnostics.ode_method);
  c.solver.n_steps = diagnostics.ode_steps;
  c.seed = stage_seed(*this, "diagnose");
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> bad;
  auto check = [&](bool ok, const char* key) {
    if (!ok) bad.emplace_back(key);
  };
  check(potential.kind == "seven_well" || potential.kind == "double_well_toy", "potential.kind");
  check(potential.radial_stiffness > 0, "potential.radial_stiffness");
  check(potential.multiplicity >= 1, "potential.multiplicity");
  check(potential.ou_stiffness > 0, "potential.ou_stiffness");
  check(potential.barrier > 0, "potential.barrier");
  check(potential.fast_stiffness > 0, "potential.fast_stiffness");
  check(sde.dt > 0 && std::isfinite(sde.dt), "sde.dt");
  check(sde.beta > 0, "sde.beta");
  check(sde.n_steps >= 1, "sde.n_steps");
  check(sde.burn_in >= 0 && sde.burn_in < sde.n_steps, "sde.burn_in");
  check(sde.n_trajectories >= 1, "sde.n_trajectories");
  check(sde.blowup_cap > 0, "sde.blowup_cap");
  check(!swiss_roll.enabled || potential.kind == "seven_well", "swiss_roll.enabled");
  check(swiss_roll.angle_scale > 0, "swiss_roll.angle_scale");
  check(swiss_roll.thickness_scale > 0, "swiss_roll.thickness_scale");
  check(dataset.lag_steps >= 1 && dataset.lag_steps < sde.n_steps - sde.burn_in, "dataset.lag_steps");
  check(dataset.max_pairs >= 0, "dataset.max_pairs");
  check(model.rc_dim >= 1, "model.rc_dim");
  check(!model.encoder_hidden.empty(), "model.encoder_hidden");
  check(!model.velocity_hidden.empty(), "model.velocity_hidden");
  for (int w : model.encoder_hidden) check(w >= 1, "model.encoder_hidden");
  for (int w : model.velocity_hidden) check(w >= 1, "model.velocity_hidden");
  check(model.s_frequencies >= 1, "model.s_frequencies");
  check(training.mode == "fmrc" || training.mode == "full" || training.mode == "assess", "training.mode");
  check(training.iterations >= 0, "training.iterations");
  check(training.batch_size >= 1, "training.batch_size");
  check(training.learning_rate > 0, "training.learning_rate");
  check(training.optimizer == "adam" || training.optimizer == "sgd", "training.optimizer");
  check(training.validation_fraction > 0 && training.validation_fraction < 1, "training.validation_fraction");
  check(training.validation_size >= 1, "training.validation_size");
  check(training.log_every >= 1, "training.log_every");
  check(training.ema > 0 && training.ema <= 1, "training.ema");
  check(training.weight_l0 >= 0, "training.weight_l0");
  check(training.weight_l1 >= 0, "training.weight_l1");
  check(training.nonfinite_patience >= 1, "training.nonfinite_patience");
  check(training.final_loss_samples >= 1, "training.final_loss_samples");
  check(msm.n_microstates >= 2, "msm.n_microstates");
  check(msm.lag_steps >= 1, "msm.lag_steps");
  check(msm.n_clusters >= 2 && msm.n_clusters <= msm.n_microstates, "msm.n_clusters");
  check(msm.fit_subsample >= msm.n_microstates, "msm.fit_subsample");
  check(msm.kmeans_max_iterations >= 1, "msm.kmeans_max_iterations");
  check(msm.min_cluster_size >= 0, "msm.min_cluster_size");
  check(msm.report_stride >= 1, "msm.report_stride");
  check(diagnostics.bins_per_dim >= 1, "diagnostics.bins_per_dim");
  check(diagnostics.dictionary_size >= 1, "diagnostics.dictionary_size");
  check(diagnostics.bandwidth_factor > 0, "diagnostics.bandwidth_factor");
  check(diagnostics.max_samples >= 2, "diagnostics.max_samples");
  check(diagnostics.ode_method == "rk4" || diagnostics.ode_method == "euler", "diagnostics.ode_method");
  check(diagnostics.ode_steps >= 1, "diagnostics.ode_steps");
  if (!bad.empty()) {
    std::string msg = "invalid config value(s):";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg, bad);
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  visit_fields(*this, [&](const char* section, const char* key, const auto& v) {
    if (*section)
      j[section][key] = encode(v);
    else
      j[key] = encode(v);
  });
  for (const char* stage : {"simulate", "train", "eval", "diagnose"}) j["seeds"][stage] = stage_seed(*this, stage);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be an object", {});
  const RunConfig defaults;
  std::set<std::string> sections, top;
  visit_fields(defaults, [&](const char* section, const char* key, const auto&) {
    if (*section)
      sections.insert(section);
    else
      top.insert(key);
  });
  std::set<std::string> known;
  visit_fields(defaults, [&](const char* s, const char* k, const auto&) { known.insert(dotted(s, k)); });

  std::vector<std::string> bad;
  for (const auto& [k, v] : j.items()) {
    if (kInformational.count(k) || top.count(k)) continue;
    if (!sections.count(k)) {
      bad.push_back(k);
      continue;
    }
    if (!v.is_object()) {
      bad.push_back(k);
      continue;
    }
    for (const auto& [sub, unused] : v.items())
      if (!known.count(k + "." + sub)) bad.push_back(k + "." + sub);
  }

  RunConfig c;
  visit_fields(c, [&](const char* section, const char* key, auto& field) {
    const nlohmann::json* node = nullptr;
    if (*section) {
      auto s = j.find(section);
      if (s != j.end() && s->is_object()) {
        auto it = s->find(key);
        if (it != s->end()) node = &*it;
      }
    } else {
      auto it = j.find(key);
      if (it != j.end()) node = &*it;
    }
    if (node && !decode(*node, field)) bad.push_back(dotted(section, key));
  });
  if (!bad.empty()) {
    std::string msg = "unknown or mistyped config key(s):";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg, bad);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::parse(const std::string& text) {
  const auto as_json = nlohmann::json::parse(text, nullptr, false);
  if (!as_json.is_discarded() && as_json.is_object()) return from_json(as_json);

  boost::property_tree::ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("malformed config (line " + std::to_string(e.line()) + "): " + e.message(), {});
  }
  const nlohmann::json defaults = RunConfig{}.to_json();
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      j[name] = ini_value(defaults.value(name, nlohmann::json("")), node.data());
      continue;
    }
    nlohmann::json section = nlohmann::json::object();
    const nlohmann::json like = defaults.value(name, nlohmann::json::object());
    for (const auto& [key, leaf] : node) section[key] = ini_value(like.value(key, nlohmann::json("")), leaf.data());
    j[name] = section;
  }
  return from_json(j);
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage) { return derive_seed(cfg.seed, stage); }

}  // namespace fmrc
