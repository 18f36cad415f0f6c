#pragma once

// In-process federation: clients train copies of a per-head model set on
// their own channel pools, a coordinator averages the backbones.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ncdsfl/neural_net.hpp"
#include "ncdsfl/ofdm_channel.hpp"

namespace ncdsfl::fed {

enum class Algorithm { kNcdsfl, kFedAvg, kIl };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);  // ConfigError on unknown tags

/// One network per head; head e detects the bits of subcarriers [16e, 16e+16).
using ModelSet = std::vector<nn::DeepSupervisedNet>;

struct FedConfig {
  Algorithm algorithm = Algorithm::kNcdsfl;
  int n_clients = 4;
  int heads = 1;
  int rounds = 100;
  int local_iters = 20;
  int batch_size = 64;
  std::vector<int> hidden_dims{500, 250, 128};
  double mu = 0.5;
  double nc_norm = 0.2;
  double weight_decay = 0.0;
  nn::RmsPropConfig optimizer;
  std::uint64_t seed = 1;
  int jobs = 1;
  int val_samples_per_client = 250;
  std::uint64_t val_seed = 0x56414c31ULL;
  int probe_size = 256;
  bool track_collapse = true;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  /// Net options implied by the algorithm: ncdsfl keeps frozen NC heads and
  /// the auxiliary loss, the baselines train a plain output head with mu = 0.
  nn::NetOptions net_options() const;
  bool aggregates() const { return algorithm != Algorithm::kIl; }

  bool operator==(const FedConfig&) const = default;
};

struct RoundRecord {
  int round = 0;  // 1-based
  double ber = 0.0;
  double loss = 0.0;  // mean training loss over clients, heads and iterations
  double theta = 0.0;
  double vartheta = 0.0;
  double seconds = 0.0;
  std::size_t transmitted_params = 0;  // uplink parameters per client this round
};

struct TrainingHistory {
  Algorithm algorithm = Algorithm::kNcdsfl;
  std::vector<RoundRecord> records;
  ModelSet global;                   // aggregated model (client 0's for il)
  std::vector<ModelSet> client_models;
  int aggregation_events = 0;
  bool theta_trivial = false;        // frozen NC head: theta is zero by construction
};

/// Parameters a client uploads per round for one model set.
std::size_t transmitted_parameter_count(const ModelSet& models);

/// Elementwise mean of the trainable parameters, accumulated in list order.
/// Frozen layers are copied from the first model.
nn::DeepSupervisedNet aggregate(const std::vector<const nn::DeepSupervisedNet*>& models);
ModelSet aggregate(const std::vector<ModelSet>& client_sets);

/// Global models drawn from cfg.seed; every head gets its own NC classifier.
ModelSet init_model_set(const FedConfig& cfg, int input_dim);

/// Per-head optimizer states of one client.
using ClientOptimizer = std::vector<nn::OptimizerState>;
ClientOptimizer make_client_optimizer(const ModelSet& models, const nn::RmsPropConfig& cfg);

/// U RMSprop steps on fresh batches keyed by (seed, client, round, iter).
/// Returns the mean training loss. Throws DivergenceError on a non-finite loss.
double local_update(ModelSet& models, ClientOptimizer& opt, const ofdm::ClientDataset& data,
                    int local_iters, int batch_size, std::uint64_t seed, int round);

/// Bit error rate of a model set over every head of a batch.
double model_set_ber(const ModelSet& models, const ofdm::SampleBatch& batch);

using RoundCallback = std::function<void(const RoundRecord&, const TrainingHistory&)>;
using LogCallback = std::function<void(const std::string&)>;

/// Runs cfg.rounds rounds. The validation batch is shared by all algorithms;
/// the probe batch feeds the collapse metrics.
TrainingHistory run_training(const FedConfig& cfg, const std::vector<ofdm::ClientDataset>& clients,
                             const ofdm::SampleBatch& validation,
                             const std::optional<ofdm::SampleBatch>& probe = std::nullopt,
                             const RoundCallback& on_round = {}, const LogCallback& log = {});

/// Runs f(0..n-1) on up to jobs threads. Results must go to per-index slots.
void parallel_for(int n, int jobs, const std::function<void(int)>& f);

}  // namespace ncdsfl::fed
