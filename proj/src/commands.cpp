#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include "ncdsfl/config.hpp"
#include "ncdsfl/errors.hpp"
#include "ncdsfl/nc_core.hpp"
#include "ncdsfl/rng.hpp"

namespace ncdsfl::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(10);
  os << x;
  return os.str();
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

// ---- nc-validate checks --------------------------------------------------

struct Check {
  std::string name;
  bool passed = false;
  json detail;
};

Check lemma_check(const NcValidateSettings& s) {
  Check c{"lemma_row_orthogonality", true, json::object()};
  int cases = 0;
  for (int bits = 1; bits <= s.lemma_max_bits; ++bits)
    for (int k = 1; k <= s.lemma_max_replication; ++k)
      for (int d = 1; d <= s.lemma_max_dim; ++d) {
        const nc::OperatorA op(nc::build_sign_pattern(bits), d, k);
        const Eigen::MatrixXi a = op.dense();
        const Eigen::MatrixXi gram = a * a.transpose();
        const Eigen::MatrixXi expect = Eigen::MatrixXi::Identity(gram.rows(), gram.cols()) * (k << bits);
        ++cases;
        if (gram != expect) {
          c.passed = false;
          c.detail["first_failure"] = {{"bits", bits}, {"replication", k}, {"dim", d}};
          return c;
        }
      }
  c.detail["cases"] = cases;
  return c;
}

Check solver_check(const NcValidateSettings& s) {
  Check c{"layer_peeled_optimum", false, json::object()};
  nc::SolverOptions opt;
  opt.step_size = s.solver_step;
  opt.max_iters = s.solver_max_iters;
  // Large lambda stiffens the objective; back off the step until it is stable.
  std::optional<nc::SolverResult> found;
  for (int attempt = 0; attempt < 30 && !found; ++attempt) {
    try {
      found = nc::solve_layer_peeled(s.solver_bits, s.solver_replication, s.solver_dim, s.solver_lambda, opt);
    } catch (const StepSizeError&) {
      opt.step_size /= 2.0;
    }
  }
  if (!found) {
    c.detail["error"] = "solver diverged at every step size tried";
    return c;
  }
  const nc::SolverResult& r = *found;
  const double target = nc::optimal_loss(s.solver_bits, s.solver_replication, s.solver_lambda);
  const double t = nc::bound_slope(s.solver_bits, s.solver_replication);
  const double loss = r.trace.back();
  const bool trivial = s.solver_lambda >= t / 2.0;
  c.detail = {{"loss", loss}, {"optimal_loss", target}, {"iterations", r.iterations},
              {"step_size", opt.step_size}, {"trivial_regime", trivial}};
  bool ok = std::abs(loss - target) <= s.loss_tolerance;
  if (trivial) {
    const double rho = r.state.W.squaredNorm() + r.state.H.squaredNorm();
    c.detail["rho"] = rho;
    ok = ok && rho <= s.nc_tolerance;
  } else {
    const nc::OperatorA op(nc::build_sign_pattern(s.solver_bits), s.solver_dim, s.solver_replication);
    const int bits = s.solver_bits;
    const double theta = nc::theta_metric(r.state.W.leftCols(bits), r.state.W.rightCols(bits));
    const double vartheta = nc::vartheta_metric(r.state.W, r.state.H, op);
    c.detail["theta"] = theta;
    c.detail["vartheta"] = vartheta;
    ok = ok && theta < s.nc_tolerance && vartheta < s.nc_tolerance;
  }
  c.passed = ok;
  return c;
}

double max_rel_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(numeric.cwiseAbs().maxCoeff(), 1e-8);
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

Check layer_peeled_gradient_check(const NcValidateSettings& s) {
  Check c{"layer_peeled_gradient", true, json::object()};
  Rng rng(derive_seed({0x4c50ULL}));
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 0.0;
  for (int n = 0; n < s.gradient_cases; ++n) {
    const int bits = 1 + static_cast<int>(rng() % 3);
    const int k = 1 + static_cast<int>(rng() % 2);
    const int d = 2 * bits + static_cast<int>(rng() % 3);
    const nc::OperatorA op(nc::build_sign_pattern(bits), d, k);
    nc::LayerPeeledState st;
    st.lambda = 0.01 + 0.1 * std::abs(g(rng));
    st.W = Eigen::MatrixXd::NullaryExpr(d, 2 * bits, [&] { return g(rng); });
    st.H = Eigen::MatrixXd::NullaryExpr(d, k << bits, [&] { return g(rng); });
    const nc::LayerPeeledGrad an = nc::layer_peeled_grad(st, op);
    const double eps = 1e-6;
    auto numeric = [&](Eigen::MatrixXd& var) {
      Eigen::MatrixXd out(var.rows(), var.cols());
      for (Eigen::Index i = 0; i < var.size(); ++i) {
        const double keep = var.data()[i];
        var.data()[i] = keep + eps;
        const double up = nc::layer_peeled_loss(st, op);
        var.data()[i] = keep - eps;
        const double down = nc::layer_peeled_loss(st, op);
        var.data()[i] = keep;
        out.data()[i] = (up - down) / (2 * eps);
      }
      return out;
    };
    const Eigen::MatrixXd nw = numeric(st.W);
    const Eigen::MatrixXd nh = numeric(st.H);
    worst = std::max({worst, max_rel_error(an.dW, nw), max_rel_error(an.dH, nh)});
  }
  c.detail["max_relative_error"] = worst;
  c.passed = worst < s.gradient_tolerance;
  return c;
}

// Global relative error sqrt(sum (fd - g)^2 / sum fd^2) over every
// trainable parameter.
Check ds_gradient_check(const NcValidateSettings& s) {
  Check c{"deep_supervision_gradient", true, json::object()};
  Rng rng(derive_seed({0x4453ULL}));
  std::normal_distribution<double> g(0.0, 1.0);
  const double eps = 1e-6;
  double worst = 0.0;
  for (int n = 0; n < s.gradient_cases; ++n) {
    nn::NetOptions o;
    o.mu = (n % 3) * 0.5;
    o.trainable_output_head = n % 2 == 1;
    o.weight_decay = n % 4 == 3 ? 0.01 : 0.0;
    const int bits = 2;
    nn::DeepSupervisedNet net = nn::init_net({5, 8, 8, 5}, bits, o, static_cast<std::uint64_t>(n));
    // Zero biases put dead-unit pre-activations exactly on the ReLU kink.
    for (auto& layer : net.backbone) layer.bias = Eigen::VectorXd::NullaryExpr(layer.bias.size(), [&] { return 0.1 * g(rng); });
    nn::BitBatch b;
    b.inputs = Eigen::MatrixXd::NullaryExpr(6, 5, [&] { return g(rng); });
    b.target_bits = Eigen::MatrixXd::NullaryExpr(6, bits, [&] { return static_cast<double>(rng() & 1U); });
    const nn::GradientSet an = nn::ds_grads(net, b);
    double num = 0.0, den = 0.0;
    auto probe = [&](double* v, const double* analytic, Eigen::Index size) {
      for (Eigen::Index i = 0; i < size; ++i) {
        const double keep = v[i];
        v[i] = keep + eps;
        const double up = nn::ds_loss(net, b);
        v[i] = keep - eps;
        const double down = nn::ds_loss(net, b);
        v[i] = keep;
        const double fd = (up - down) / (2 * eps);
        num += (fd - analytic[i]) * (fd - analytic[i]);
        den += fd * fd;
      }
    };
    for (std::size_t l = 0; l < net.backbone.size(); ++l) {
      auto& layer = net.backbone[l];
      probe(layer.weights.data(), an.backbone[l].weights.data(), layer.weights.size());
      probe(layer.bias.data(), an.backbone[l].bias.data(), layer.bias.size());
    }
    if (an.output_head) {
      probe(net.output_head.weights.data(), an.output_head->weights.data(), net.output_head.weights.size());
      probe(net.output_head.bias.data(), an.output_head->bias.data(), net.output_head.bias.size());
    }
    worst = std::max(worst, std::sqrt(num / std::max(den, 1e-300)));
  }
  c.detail["max_relative_error"] = worst;
  c.passed = worst < s.gradient_tolerance;
  return c;
}

}  // namespace

int cmd_nc_validate(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out);
  save_config(cfg, out / "config.json");
  std::vector<Check> checks;
  checks.push_back(lemma_check(cfg.nc_validate));
  checks.push_back(solver_check(cfg.nc_validate));
  checks.push_back(layer_peeled_gradient_check(cfg.nc_validate));
  checks.push_back(ds_gradient_check(cfg.nc_validate));
  json report{{"checks", json::array()}};
  bool all = true;
  for (const auto& c : checks) {
    report["checks"].push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    log << (c.passed ? "PASS " : "FAIL ") << c.name << ' ' << c.detail.dump() << '\n';
    all = all && c.passed;
  }
  report["passed"] = all;
  open_out(out / "nc_validate.json") << report.dump(2) << '\n';
  return all ? kExitOk : kExitRunFailure;
}

int cmd_train(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out / "checkpoints");
  save_config(cfg, out / "config.json");
  const eval::Experiment ex = make_experiment(cfg);
  const std::string algo = fed::to_string(ex.fed.algorithm);

  std::ofstream run_log = open_out(out / "run.log");
  std::ofstream conv = open_out(out / "convergence.csv");
  std::ofstream hist = open_out(out / "history.csv");
  conv << "round,algo,seed,ber,theta,vartheta\n";
  hist << "round,algo,ber,loss,theta,vartheta,seconds,transmitted_params\n";
  run_log << "start algo=" << algo << " seed=" << cfg.seed << " clients=" << ex.fed.n_clients
          << " rounds=" << ex.fed.rounds << '\n';

  const eval::ExperimentData data = eval::build_experiment_data(ex);
  std::vector<double> bers;
  auto on_round = [&](const fed::RoundRecord& r, const fed::TrainingHistory&) {
    bers.push_back(r.ber);
    conv << r.round << ',' << algo << ',' << cfg.seed << ',' << fmt(r.ber) << ',' << fmt(r.theta) << ','
         << fmt(r.vartheta) << '\n';
    hist << r.round << ',' << algo << ',' << fmt(r.ber) << ',' << fmt(r.loss) << ',' << fmt(r.theta) << ','
         << fmt(r.vartheta) << ',' << fmt(r.seconds) << ',' << r.transmitted_params << '\n';
    conv.flush();
    hist.flush();
    run_log << "round " << r.round << " ber=" << fmt(r.ber) << " loss=" << fmt(r.loss) << '\n';
    if (r.round % 10 == 0 || r.round == ex.fed.rounds)
      log << algo << " round " << r.round << "/" << ex.fed.rounds << " ber " << fmt(r.ber) << '\n';
  };
  auto on_log = [&](const std::string& s) { run_log << s << '\n'; };

  json summary{{"algo", algo}, {"seed", cfg.seed}, {"rounds", ex.fed.rounds},
               {"ber_threshold", cfg.sweep.ber_threshold}};
  fed::TrainingHistory h;
  try {
    h = fed::run_training(ex.fed, data.clients, data.validation, data.probe, on_round, on_log);
  } catch (const DivergenceError& e) {
    run_log << "diverged at round " << e.round() << ": " << e.what() << '\n';
    summary["error"] = e.what();
    summary["diverged_round"] = e.round();
    open_out(out / "summary.json") << summary.dump(2) << '\n';
    log << "training diverged at round " << e.round() << '\n';
    return kExitRunFailure;
  }

  const auto rtt = eval::rounds_to_threshold(bers, cfg.sweep.ber_threshold);
  summary["final_ber"] = bers.back();
  summary["rounds_to_threshold"] = rtt ? json(*rtt) : json(nullptr);
  summary["theta_trivial"] = h.theta_trivial;
  summary["transmitted_params_per_round"] = h.records.back().transmitted_params;
  summary["aggregation_events"] = h.aggregation_events;
  open_out(out / "summary.json") << summary.dump(2) << '\n';

  if (ex.fed.aggregates()) {
    for (std::size_t e = 0; e < h.global.size(); ++e)
      nn::save_checkpoint(h.global[e], (out / "checkpoints" / ("head" + std::to_string(e) + ".ckpt")).string());
  } else {
    for (std::size_t j = 0; j < h.client_models.size(); ++j)
      for (std::size_t e = 0; e < h.client_models[j].size(); ++e)
        nn::save_checkpoint(h.client_models[j][e],
                            (out / "checkpoints" /
                             ("client" + std::to_string(j) + "_head" + std::to_string(e) + ".ckpt"))
                                .string());
  }
  run_log << "done final_ber=" << fmt(bers.back()) << '\n';
  return kExitOk;
}

int cmd_sweep(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  cfg.sweep.validate();
  fs::create_directories(out);
  save_config(cfg, out / "config.json");
  const eval::SweepResult r =
      eval::run_sweep(cfg.sweep, make_experiment(cfg), out, [&](const std::string& s) { log << s << '\n'; });
  if (r.failed_points > 0) {
    log << r.failed_points << " sweep point(s) failed\n";
    return kExitRunFailure;
  }
  return kExitOk;
}

int cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out);
  save_config(cfg, out / "config.json");
  const eval::Experiment ex = make_experiment(cfg);
  const eval::ExperimentData data = eval::build_experiment_data(ex);

  std::ofstream channels = open_out(out / "channels.csv");
  json meta{{"clients", json::array()}};
  for (std::size_t j = 0; j < data.clients.size(); ++j) {
    const auto& c = data.clients[j];
    ofdm::write_channel_pool_csv(c, channels, j == 0);
    const auto& p = c.pdp();
    json client{{"client_id", c.spec().client_id},
                {"snr_db", c.spec().snr_db},
                {"rician_k_db", c.spec().rician_k_db ? json(*c.spec().rician_k_db) : json(nullptr)},
                {"pdp", {{"path_powers", p.path_powers},
                         {"path_delays", p.path_delays},
                         {"shadow_db", p.shadow_db},
                         {"rms_delay_spread_s", p.rms_delay_spread_s}}}};
    meta["clients"].push_back(client);
  }
  const ofdm::CVec& pilots = data.clients.front().pilots();
  std::vector<double> re, im;
  for (Eigen::Index r = 0; r < pilots.size(); ++r) {
    re.push_back(pilots(r).real());
    im.push_back(pilots(r).imag());
  }
  meta["pilots"] = {{"re", re}, {"im", im}};
  open_out(out / "dataset.json") << meta.dump(2) << '\n';

  std::ofstream samples = open_out(out / "validation_samples.csv");
  samples.precision(17);
  const int rows = std::min(cfg.export_samples, data.validation.size());
  samples << "client";
  for (Eigen::Index k = 0; k < data.validation.inputs.cols(); ++k) samples << ",x" << k;
  for (Eigen::Index k = 0; k < data.validation.data_bits.cols(); ++k) samples << ",b" << k;
  samples << '\n';
  for (int s = 0; s < rows; ++s) {
    samples << data.validation.client_ids[static_cast<std::size_t>(s)];
    for (Eigen::Index k = 0; k < data.validation.inputs.cols(); ++k) samples << ',' << data.validation.inputs(s, k);
    for (Eigen::Index k = 0; k < data.validation.data_bits.cols(); ++k)
      samples << ',' << static_cast<int>(data.validation.data_bits(s, k));
    samples << '\n';
  }
  log << "wrote " << data.clients.size() << " client pools and " << rows << " validation samples to "
      << out.string() << '\n';
  return kExitOk;
}

}  // namespace ncdsfl::cli
