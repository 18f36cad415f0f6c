#pragma once

// Declarative experiment configuration (JSON) and the command entry points
// behind the ncdsfl tool.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "ncdsfl/eval_harness.hpp"
#include "ncdsfl/fed_runtime.hpp"
#include "ncdsfl/ofdm_channel.hpp"

namespace ncdsfl::cli {

struct NcValidateSettings {
  int lemma_max_bits = 6;
  int lemma_max_replication = 4;
  int lemma_max_dim = 3;
  int solver_bits = 2;
  int solver_replication = 2;
  int solver_dim = 8;
  double solver_lambda = 0.01;
  double solver_step = 1.0;
  int solver_max_iters = 200000;
  double loss_tolerance = 1e-3;
  double nc_tolerance = 1e-2;
  int gradient_cases = 20;
  double gradient_tolerance = 1e-5;

  bool operator==(const NcValidateSettings&) const = default;
};

struct ExperimentConfig {
  std::string profile = "paper-small";
  std::uint64_t seed = 1;
  int jobs = 1;
  ofdm::ChannelParams channel;
  ofdm::FrameConfig frame;
  int n_channels = 100;
  double snr_db = 10.0;
  std::optional<double> rician_k_db;
  fed::FedConfig fed;
  eval::SweepSpec sweep;
  NcValidateSettings nc_validate;
  int export_samples = 64;  // gen-data validation rows written out

  void validate() const;  // ConfigError
  bool operator==(const ExperimentConfig&) const = default;
};

/// Built-in profiles: "paper-full" and "paper-small".
ExperimentConfig profile_config(const std::string& name);

nlohmann::json to_json(const ExperimentConfig& c);
/// Overlays j onto the profile named in j (default paper-small). Unknown
/// keys and type errors raise ConfigError.
ExperimentConfig from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& c, const std::filesystem::path& path);

/// Training experiment with homogeneous clients at c.snr_db. fed.seed and
/// fed.jobs follow the top-level seed and jobs.
eval::Experiment make_experiment(const ExperimentConfig& c);

/// Exit codes shared by the commands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRunFailure = 1;
inline constexpr int kExitConfigError = 2;

int cmd_nc_validate(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);
int cmd_train(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);
int cmd_sweep(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);
int cmd_gen_data(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log);

}  // namespace ncdsfl::cli
