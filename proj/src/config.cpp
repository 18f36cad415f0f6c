#include "ncdsfl/config.hpp"

#include <cmath>
#include <fstream>

#include "ncdsfl/errors.hpp"

namespace ncdsfl::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Every key of `given` must exist in `known`, recursively through objects.
void check_known(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) return;
  if (!known.is_object()) throw ConfigError(path + ": expected a value, got an object");
  for (const auto& [k, v] : given.items()) {
    const std::string here = path.empty() ? k : path + "." + k;
    if (!known.contains(k)) throw ConfigError("unknown config key '" + here + "'");
    if (v.is_object()) check_known(v, known.at(k), here);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  out = j.at(key).get<T>();
}

json channel_json(const ofdm::ChannelParams& p) {
  return {{"n_paths", p.n_paths},
          {"max_delay", p.max_delay},
          {"log10_ds_mean", p.log10_ds_mean},
          {"log10_ds_std", p.log10_ds_std},
          {"shadow_std_db", p.shadow_std_db},
          {"sample_rate_hz", p.sample_rate_hz},
          {"carrier_hz", p.carrier_hz},
          {"delay_scaling", p.delay_scaling},
          {"path_shadow_std_db", p.path_shadow_std_db}};
}

ofdm::ChannelParams channel_from(const json& j) {
  ofdm::ChannelParams p;
  read(j, "n_paths", p.n_paths);
  read(j, "max_delay", p.max_delay);
  read(j, "log10_ds_mean", p.log10_ds_mean);
  read(j, "log10_ds_std", p.log10_ds_std);
  read(j, "shadow_std_db", p.shadow_std_db);
  read(j, "sample_rate_hz", p.sample_rate_hz);
  read(j, "carrier_hz", p.carrier_hz);
  read(j, "delay_scaling", p.delay_scaling);
  read(j, "path_shadow_std_db", p.path_shadow_std_db);
  return p;
}

json frame_json(const ofdm::FrameConfig& f) {
  return {{"n_subcarriers", f.n_subcarriers}, {"cp_len", f.cp_len},
          {"pilot_spacing", f.pilot_spacing}, {"pilot_seed", f.pilot_seed},
          {"normalize_input", f.normalize_input}};
}

ofdm::FrameConfig frame_from(const json& j) {
  ofdm::FrameConfig f;
  read(j, "n_subcarriers", f.n_subcarriers);
  read(j, "cp_len", f.cp_len);
  read(j, "pilot_spacing", f.pilot_spacing);
  read(j, "pilot_seed", f.pilot_seed);
  read(j, "normalize_input", f.normalize_input);
  return f;
}

json fed_json(const fed::FedConfig& c) {
  return {{"algorithm", fed::to_string(c.algorithm)},
          {"n_clients", c.n_clients},
          {"heads", c.heads},
          {"rounds", c.rounds},
          {"local_iters", c.local_iters},
          {"batch_size", c.batch_size},
          {"hidden_dims", c.hidden_dims},
          {"mu", c.mu},
          {"nc_norm", c.nc_norm},
          {"weight_decay", c.weight_decay},
          {"optimizer", {{"step_size", c.optimizer.step_size},
                         {"decay", c.optimizer.decay},
                         {"epsilon", c.optimizer.epsilon}}},
          {"val_samples_per_client", c.val_samples_per_client},
          {"val_seed", c.val_seed},
          {"probe_size", c.probe_size},
          {"track_collapse", c.track_collapse}};
}

fed::FedConfig fed_from(const json& j) {
  fed::FedConfig c;
  c.algorithm = fed::parse_algorithm(j.at("algorithm").get<std::string>());
  read(j, "n_clients", c.n_clients);
  read(j, "heads", c.heads);
  read(j, "rounds", c.rounds);
  read(j, "local_iters", c.local_iters);
  read(j, "batch_size", c.batch_size);
  read(j, "hidden_dims", c.hidden_dims);
  read(j, "mu", c.mu);
  read(j, "nc_norm", c.nc_norm);
  read(j, "weight_decay", c.weight_decay);
  const json& o = j.at("optimizer");
  read(o, "step_size", c.optimizer.step_size);
  read(o, "decay", c.optimizer.decay);
  read(o, "epsilon", c.optimizer.epsilon);
  read(j, "val_samples_per_client", c.val_samples_per_client);
  read(j, "val_seed", c.val_seed);
  read(j, "probe_size", c.probe_size);
  read(j, "track_collapse", c.track_collapse);
  return c;
}

json sweep_json(const eval::SweepSpec& s) {
  return {{"axis", eval::to_string(s.axis)},
          {"values", s.values},
          {"algorithms", s.algorithms},
          {"seeds", s.seeds},
          {"snr_db", s.snr_db},
          {"mixed_extra_clients", s.mixed_extra_clients},
          {"mixed_k_db", s.mixed_k_db},
          {"ber_threshold", s.ber_threshold},
          {"resume", s.resume}};
}

eval::SweepSpec sweep_from(const json& j) {
  eval::SweepSpec s;
  s.axis = eval::parse_axis(j.at("axis").get<std::string>());
  read(j, "values", s.values);
  read(j, "algorithms", s.algorithms);
  read(j, "seeds", s.seeds);
  read(j, "snr_db", s.snr_db);
  read(j, "mixed_extra_clients", s.mixed_extra_clients);
  read(j, "mixed_k_db", s.mixed_k_db);
  read(j, "ber_threshold", s.ber_threshold);
  read(j, "resume", s.resume);
  return s;
}

json nc_json(const NcValidateSettings& n) {
  return {{"lemma_max_bits", n.lemma_max_bits},
          {"lemma_max_replication", n.lemma_max_replication},
          {"lemma_max_dim", n.lemma_max_dim},
          {"solver_bits", n.solver_bits},
          {"solver_replication", n.solver_replication},
          {"solver_dim", n.solver_dim},
          {"solver_lambda", n.solver_lambda},
          {"solver_step", n.solver_step},
          {"solver_max_iters", n.solver_max_iters},
          {"loss_tolerance", n.loss_tolerance},
          {"nc_tolerance", n.nc_tolerance},
          {"gradient_cases", n.gradient_cases},
          {"gradient_tolerance", n.gradient_tolerance}};
}

NcValidateSettings nc_from(const json& j) {
  NcValidateSettings n;
  read(j, "lemma_max_bits", n.lemma_max_bits);
  read(j, "lemma_max_replication", n.lemma_max_replication);
  read(j, "lemma_max_dim", n.lemma_max_dim);
  read(j, "solver_bits", n.solver_bits);
  read(j, "solver_replication", n.solver_replication);
  read(j, "solver_dim", n.solver_dim);
  read(j, "solver_lambda", n.solver_lambda);
  read(j, "solver_step", n.solver_step);
  read(j, "solver_max_iters", n.solver_max_iters);
  read(j, "loss_tolerance", n.loss_tolerance);
  read(j, "nc_tolerance", n.nc_tolerance);
  read(j, "gradient_cases", n.gradient_cases);
  read(j, "gradient_tolerance", n.gradient_tolerance);
  return n;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (profile != "paper-full" && profile != "paper-small")
    throw ConfigError("profile must be paper-full or paper-small, got '" + profile + "'");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (n_channels < 1) throw ConfigError("n_channels must be >= 1");
  if (!std::isfinite(snr_db)) throw ConfigError("snr_db must be finite");
  if (rician_k_db && !std::isfinite(*rician_k_db)) throw ConfigError("rician_k_db must be finite");
  if (export_samples < 0) throw ConfigError("export_samples must be >= 0");
  if (channel.n_paths < 1) throw ConfigError("channel.n_paths must be >= 1");
  if (channel.max_delay < 0) throw ConfigError("channel.max_delay must be >= 0");
  if (!(channel.sample_rate_hz > 0.0)) throw ConfigError("channel.sample_rate_hz must be positive");
  if (!(channel.delay_scaling > 1.0)) throw ConfigError("channel.delay_scaling must exceed 1");
  if (channel.log10_ds_std < 0.0 || channel.shadow_std_db < 0.0 || channel.path_shadow_std_db < 0.0)
    throw ConfigError("channel standard deviations must be nonnegative");
  if (frame.n_subcarriers < 16) throw ConfigError("frame.n_subcarriers must be >= 16");
  if (frame.cp_len < channel.max_delay) throw ConfigError("frame.cp_len must cover channel.max_delay");
  if (frame.cp_len > frame.n_subcarriers) throw ConfigError("frame.cp_len exceeds the symbol length");
  if (frame.pilot_spacing < 1 || frame.n_subcarriers % frame.pilot_spacing != 0)
    throw ConfigError("frame.pilot_spacing must divide n_subcarriers");
  if (fed.heads * 16 > frame.n_subcarriers) throw ConfigError("fed.heads exceeds the subcarrier blocks");
  fed.validate();
  if (fed.seed != seed || fed.jobs != jobs) throw ConfigError("fed.seed/fed.jobs must mirror seed/jobs");
  const NcValidateSettings& n = nc_validate;
  if (n.lemma_max_bits < 1 || n.lemma_max_bits > 12 || n.lemma_max_replication < 1 || n.lemma_max_dim < 1)
    throw ConfigError("nc_validate lemma ranges must be positive (bits <= 12)");
  if (n.solver_bits < 1 || n.solver_replication < 1 || n.solver_dim < 2 * n.solver_bits)
    throw ConfigError("nc_validate solver sizes need dim >= 2 * bits");
  if (!(n.solver_lambda > 0.0) || !(n.solver_step > 0.0) || n.solver_max_iters < 1)
    throw ConfigError("nc_validate solver lambda, step and iterations must be positive");
  if (!(n.loss_tolerance > 0.0) || !(n.nc_tolerance > 0.0) || !(n.gradient_tolerance > 0.0))
    throw ConfigError("nc_validate tolerances must be positive");
  if (n.gradient_cases < 1) throw ConfigError("nc_validate.gradient_cases must be >= 1");
}

ExperimentConfig profile_config(const std::string& name) {
  ExperimentConfig c;
  c.profile = name;
  c.fed.seed = c.seed;
  c.fed.jobs = c.jobs;
  c.fed.optimizer = nn::RmsPropConfig{1e-3, 0.99, 1e-8};
  c.fed.mu = 0.5;
  c.fed.nc_norm = 0.2;
  c.fed.hidden_dims = {500, 250, 128};
  c.fed.batch_size = 64;
  c.sweep.axis = eval::SweepAxis::kSnr;
  c.sweep.values = {0, 5, 10, 15, 20};
  c.sweep.algorithms = {"ncdsfl", "fedavg", "il", "mmse"};
  c.sweep.seeds = {1, 2, 3};
  if (name == "paper-full") {
    c.fed.n_clients = 10;
    c.fed.heads = 4;
    c.fed.local_iters = 50;
    c.fed.rounds = 200;
    c.n_channels = 500;
    c.fed.val_samples_per_client = 200;
  } else if (name == "paper-small") {
    c.fed.n_clients = 4;
    c.fed.heads = 1;
    c.fed.local_iters = 20;
    c.fed.rounds = 300;
    c.n_channels = 100;
    c.fed.val_samples_per_client = 250;
  } else {
    throw ConfigError("unknown profile '" + name + "' (expected paper-full or paper-small)");
  }
  return c;
}

json to_json(const ExperimentConfig& c) {
  return {{"profile", c.profile},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"channel", channel_json(c.channel)},
          {"frame", frame_json(c.frame)},
          {"data", {{"n_channels", c.n_channels},
                    {"snr_db", c.snr_db},
                    {"rician_k_db", c.rician_k_db ? json(*c.rician_k_db) : json(nullptr)},
                    {"export_samples", c.export_samples}}},
          {"fed", fed_json(c.fed)},
          {"sweep", sweep_json(c.sweep)},
          {"nc_validate", nc_json(c.nc_validate)}};
}

ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    const std::string profile = j.contains("profile") ? j.at("profile").get<std::string>() : "paper-small";
    json full = to_json(profile_config(profile));
    check_known(j, full, "");
    full.merge_patch(j);
    // merge_patch drops keys set to null; the only nullable key comes back here
    if (!full["data"].contains("rician_k_db")) full["data"]["rician_k_db"] = nullptr;

    ExperimentConfig c;
    read(full, "profile", c.profile);
    read(full, "seed", c.seed);
    read(full, "jobs", c.jobs);
    c.channel = channel_from(full.at("channel"));
    c.frame = frame_from(full.at("frame"));
    const json& d = full.at("data");
    read(d, "n_channels", c.n_channels);
    read(d, "snr_db", c.snr_db);
    if (!d.at("rician_k_db").is_null()) c.rician_k_db = d.at("rician_k_db").get<double>();
    read(d, "export_samples", c.export_samples);
    c.fed = fed_from(full.at("fed"));
    c.fed.seed = c.seed;
    c.fed.jobs = c.jobs;
    c.sweep = sweep_from(full.at("sweep"));
    c.nc_validate = nc_from(full.at("nc_validate"));
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void save_config(const ExperimentConfig& c, const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << to_json(c).dump(2) << '\n';
}

eval::Experiment make_experiment(const ExperimentConfig& c) {
  eval::Experiment ex;
  ex.fed = c.fed;
  ex.fed.seed = c.seed;
  ex.fed.jobs = c.jobs;
  ex.channel = c.channel;
  ex.frame = c.frame;
  ex.n_channels = c.n_channels;
  ex.clients = eval::uniform_clients(c.fed.n_clients, c.snr_db, c.rician_k_db);
  return ex;
}

}  // namespace ncdsfl::cli
