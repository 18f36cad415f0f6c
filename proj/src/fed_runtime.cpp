#include "ncdsfl/fed_runtime.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "ncdsfl/errors.hpp"
#include "ncdsfl/eval_harness.hpp"
#include "ncdsfl/rng.hpp"

namespace ncdsfl::fed {

namespace {

constexpr int kBitsPerHead = 32;

void add_offset(nn::DenseLayer& acc, const nn::DenseLayer& l, const nn::DenseLayer& base, double s) {
  acc.weights += s * (l.weights - base.weights);
  acc.bias += s * (l.bias - base.bias);
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kNcdsfl: return "ncdsfl";
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kIl: return "il";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& s) {
  if (s == "ncdsfl") return Algorithm::kNcdsfl;
  if (s == "fedavg") return Algorithm::kFedAvg;
  if (s == "il") return Algorithm::kIl;
  throw ConfigError("unknown algorithm '" + s + "' (expected ncdsfl, fedavg or il)");
}

void FedConfig::validate() const {
  if (n_clients < 1) throw ConfigError("n_clients must be >= 1");
  if (heads < 1 || heads > 4) throw ConfigError("heads must be in 1..4");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (local_iters < 0) throw ConfigError("local_iters must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (hidden_dims.size() < 2) throw ConfigError("need at least two hidden layers");
  for (int d : hidden_dims)
    if (d < 1) throw ConfigError("hidden widths must be positive");
  if (hidden_dims.back() < 2 * kBitsPerHead)
    throw ConfigError("last hidden layer must hold 64 orthogonal classifier directions");
  if (hidden_dims[hidden_dims.size() - 2] < 2 * kBitsPerHead)
    throw ConfigError("auxiliary layer must hold 64 orthogonal classifier directions");
  if (mu < 0.0) throw ConfigError("mu must be nonnegative");
  if (!(nc_norm > 0.0)) throw ConfigError("nc_norm must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  if (!(optimizer.step_size > 0.0) || !(optimizer.decay > 0.0 && optimizer.decay < 1.0) ||
      !(optimizer.epsilon > 0.0))
    throw ConfigError("invalid RMSprop settings");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (val_samples_per_client < 1) throw ConfigError("val_samples_per_client must be >= 1");
  if (probe_size < 2) throw ConfigError("probe_size must be >= 2");
}

nn::NetOptions FedConfig::net_options() const {
  nn::NetOptions o;
  o.nc_norm = nc_norm;
  o.weight_decay = weight_decay;
  if (algorithm == Algorithm::kNcdsfl) {
    o.mu = mu;
    o.trainable_output_head = false;
  } else {
    o.mu = 0.0;
    o.trainable_output_head = true;
  }
  return o;
}

std::size_t transmitted_parameter_count(const ModelSet& models) {
  std::size_t n = 0;
  for (const auto& m : models) n += m.trainable_parameter_count();
  return n;
}

nn::DeepSupervisedNet aggregate(const std::vector<const nn::DeepSupervisedNet*>& models) {
  if (models.empty()) throw SizeError("nothing to aggregate");
  const nn::DeepSupervisedNet& first = *models.front();
  for (const auto* m : models) {
    if (m->backbone.size() != first.backbone.size() ||
        m->output_head.frozen != first.output_head.frozen)
      throw SizeError("aggregate: model structures differ");
    for (std::size_t o = 0; o < first.backbone.size(); ++o)
      if (m->backbone[o].weights.rows() != first.backbone[o].weights.rows() ||
          m->backbone[o].weights.cols() != first.backbone[o].weights.cols())
        throw SizeError("aggregate: layer shapes differ");
    if (m->output_head.weights.rows() != first.output_head.weights.rows() ||
        m->output_head.weights.cols() != first.output_head.weights.cols())
      throw SizeError("aggregate: head shapes differ");
  }
  nn::DeepSupervisedNet out = first;
  const double w = 1.0 / static_cast<double>(models.size());
  // first + mean of the offsets from it: exact when all inputs agree
  auto average = [&](nn::DenseLayer& acc, auto layer_of) {
    if (acc.frozen) return;
    const nn::DenseLayer& base = layer_of(first);
    for (const auto* m : models) add_offset(acc, layer_of(*m), base, w);
  };
  for (std::size_t o = 0; o < out.backbone.size(); ++o)
    average(out.backbone[o], [o](const nn::DeepSupervisedNet& n) -> const nn::DenseLayer& { return n.backbone[o]; });
  average(out.output_head, [](const nn::DeepSupervisedNet& n) -> const nn::DenseLayer& { return n.output_head; });
  return out;
}

ModelSet aggregate(const std::vector<ModelSet>& client_sets) {
  if (client_sets.empty()) throw SizeError("nothing to aggregate");
  ModelSet out;
  for (std::size_t e = 0; e < client_sets.front().size(); ++e) {
    std::vector<const nn::DeepSupervisedNet*> ptrs;
    for (const auto& s : client_sets) {
      if (s.size() != client_sets.front().size()) throw SizeError("aggregate: head counts differ");
      ptrs.push_back(&s[e]);
    }
    out.push_back(aggregate(ptrs));
  }
  return out;
}

ModelSet init_model_set(const FedConfig& cfg, int input_dim) {
  std::vector<int> dims{input_dim};
  dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  ModelSet set;
  for (int e = 0; e < cfg.heads; ++e) {
    const auto eu = static_cast<std::uint64_t>(e);
    set.push_back(nn::init_net_with_heads(dims, kBitsPerHead, cfg.net_options(),
                                          derive_seed({cfg.seed, 0x4e4554ULL, eu}),
                                          derive_seed({cfg.seed, 0x48454144ULL, eu})));
  }
  return set;
}

ClientOptimizer make_client_optimizer(const ModelSet& models, const nn::RmsPropConfig& cfg) {
  ClientOptimizer opt;
  for (const auto& m : models) opt.push_back(nn::make_optimizer(m, cfg));
  return opt;
}

double local_update(ModelSet& models, ClientOptimizer& opt, const ofdm::ClientDataset& data,
                    int local_iters, int batch_size, std::uint64_t seed, int round) {
  if (opt.size() != models.size()) throw SizeError("optimizer/model head counts differ");
  if (static_cast<int>(models.size()) > data.heads()) throw SizeError("dataset has fewer heads than models");
  double loss_sum = 0.0;
  const auto client = static_cast<std::uint64_t>(data.spec().client_id);
  for (int u = 0; u < local_iters; ++u) {
    const ofdm::SampleBatch b =
        data.draw(batch_size, derive_seed({seed, client, static_cast<std::uint64_t>(round),
                                           static_cast<std::uint64_t>(u)}));
    for (std::size_t e = 0; e < models.size(); ++e) {
      const nn::GradientSet g = nn::ds_grads(models[e], {b.inputs, b.head_bits[e]});
      if (!std::isfinite(g.loss))
        throw DivergenceError("non-finite training loss on client " + std::to_string(client) +
                                  " at round " + std::to_string(round),
                              round);
      nn::rmsprop_step(models[e], g, opt[e]);
      loss_sum += g.loss;
    }
  }
  const int steps = local_iters * static_cast<int>(models.size());
  return steps > 0 ? loss_sum / steps : 0.0;
}

double model_set_ber(const ModelSet& models, const ofdm::SampleBatch& batch) {
  if (models.size() > batch.head_bits.size()) throw SizeError("batch has fewer heads than models");
  double errors = 0.0, total = 0.0;
  for (std::size_t e = 0; e < models.size(); ++e) {
    const Eigen::MatrixXd pred = nn::predict_bits(models[e], batch.inputs);
    errors += (pred - batch.head_bits[e]).cwiseAbs().sum();
    total += static_cast<double>(pred.size());
  }
  return total > 0.0 ? errors / total : 0.0;
}

void parallel_for(int n, int jobs, const std::function<void(int)>& f) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

TrainingHistory run_training(const FedConfig& cfg, const std::vector<ofdm::ClientDataset>& clients,
                             const ofdm::SampleBatch& validation,
                             const std::optional<ofdm::SampleBatch>& probe,
                             const RoundCallback& on_round, const LogCallback& log) {
  cfg.validate();
  if (static_cast<int>(clients.size()) != cfg.n_clients)
    throw ConfigError("expected " + std::to_string(cfg.n_clients) + " client datasets, got " +
                      std::to_string(clients.size()));
  const int input_dim = clients.front().frame().input_dim();

  TrainingHistory h;
  h.algorithm = cfg.algorithm;
  h.global = init_model_set(cfg, input_dim);
  h.theta_trivial = h.global.front().output_head.frozen;
  h.client_models.assign(clients.size(), h.global);
  std::vector<ClientOptimizer> opts;
  for (const auto& m : h.client_models) opts.push_back(make_client_optimizer(m, cfg.optimizer));
  std::vector<double> losses(clients.size(), 0.0);
  const std::size_t uplink = cfg.aggregates() ? transmitted_parameter_count(h.global) : 0;

  for (int k = 1; k <= cfg.rounds; ++k) {
    const auto start = std::chrono::steady_clock::now();
    if (cfg.aggregates())
      for (auto& m : h.client_models) m = h.global;  // broadcast

    parallel_for(cfg.n_clients, cfg.jobs, [&](int j) {
      losses[j] = local_update(h.client_models[j], opts[j], clients[j], cfg.local_iters,
                               cfg.batch_size, cfg.seed, k);
    });

    RoundRecord r;
    r.round = k;
    for (double l : losses) r.loss += l / static_cast<double>(losses.size());
    if (cfg.aggregates()) {
      h.global = aggregate(h.client_models);
      ++h.aggregation_events;
      if (log) log("round " + std::to_string(k) + ": aggregated " + std::to_string(cfg.n_clients) + " clients");
      r.ber = model_set_ber(h.global, validation);
    } else {
      h.global = h.client_models.front();
      for (const auto& m : h.client_models) r.ber += model_set_ber(m, validation) / cfg.n_clients;
    }
    r.transmitted_params = uplink;
    if (cfg.track_collapse && probe) {
      try {
        const eval::CollapseMetrics c =
            eval::track_collapse(h.global.front(), probe->inputs, probe->head_bits.front());
        r.theta = c.theta;
        r.vartheta = c.vartheta;
      } catch (const DegenerateInputError&) {
        // all penultimate units dead: the metrics are undefined this round
        r.theta = r.vartheta = std::numeric_limits<double>::quiet_NaN();
      }
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    h.records.push_back(r);
    if (on_round) on_round(r, h);
  }
  return h;
}

}  // namespace ncdsfl::fed
