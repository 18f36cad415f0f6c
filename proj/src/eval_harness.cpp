#include "ncdsfl/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "ncdsfl/errors.hpp"
#include "ncdsfl/nc_core.hpp"
#include "ncdsfl/rng.hpp"

namespace ncdsfl::eval {

namespace fs = std::filesystem;
using nlohmann::json;
using ofdm::cd;

namespace {

constexpr int kBitsPerHead = 32;

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(10);
  os << x;
  return os.str();
}

std::string point_label(const std::string& prefix, double v) {
  std::ostringstream os;
  os << prefix << '_' << v;
  return os.str();
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << content;
}

json run_to_json(const RunSummary& r) {
  json j{{"algo", r.algo}, {"seed", r.seed}, {"final_ber", r.final_ber}};
  j["rounds_to_threshold"] = r.rounds_to_threshold ? json(*r.rounds_to_threshold) : json(nullptr);
  return j;
}

RunSummary run_from_json(const json& j, const std::string& point) {
  RunSummary r;
  r.point = point;
  r.algo = j.at("algo").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.final_ber = j.at("final_ber").get<double>();
  if (!j.at("rounds_to_threshold").is_null()) r.rounds_to_threshold = j.at("rounds_to_threshold").get<int>();
  return r;
}

// One evaluation condition of a sweep point.
struct Condition {
  double x = 0.0;
  ofdm::SampleBatch batch;
};

struct PointSpec {
  std::string label;
  std::vector<ofdm::ClientSpec> clients;
};

}  // namespace

double ber(const MatrixXd& predicted, const MatrixXd& truth) {
  if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
    throw SizeError("ber: shapes differ");
  if (truth.size() == 0) throw SizeError("ber: empty input");
  return (predicted - truth).cwiseAbs().sum() / static_cast<double>(truth.size());
}

double ber(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth) {
  if (predicted.size() != truth.size()) throw SizeError("ber: lengths differ");
  if (truth.empty()) throw SizeError("ber: empty input");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) wrong += (predicted[i] != 0) != (truth[i] != 0);
  return static_cast<double>(wrong) / static_cast<double>(truth.size());
}

DetectorResult mmse_detect(const CVec& freq_pilot, const CVec& freq_data,
                           const std::vector<int>& pilot_positions, const CVec& pilot_symbols,
                           double noise_var, const MmseModel& model) {
  const Eigen::Index n = freq_data.size();
  if (freq_pilot.size() != n || pilot_symbols.size() != n) throw SizeError("mmse: length mismatch");
  if (pilot_positions.empty()) throw ParameterError("mmse: no pilot subcarriers");
  if (noise_var < 0.0) throw ParameterError("mmse: negative noise variance");
  const auto np = static_cast<Eigen::Index>(pilot_positions.size());

  CVec h_ls(np);
  Eigen::VectorXd ls_noise(np);
  for (Eigen::Index i = 0; i < np; ++i) {
    const int r = pilot_positions[static_cast<std::size_t>(i)];
    if (r < 0 || r >= n) throw SizeError("mmse: pilot position out of range");
    const cd a = pilot_symbols(r);
    if (std::abs(a) < 1e-12) throw DegenerateInputError("mmse: zero pilot symbol at subcarrier " + std::to_string(r));
    h_ls(i) = freq_pilot(r) / a;
    ls_noise(i) = noise_var / std::norm(a);
  }

  // prior delay profile, scaled to the power seen at the pilots
  Eigen::VectorXd prior(model.max_delay + 1);
  for (int k = 0; k <= model.max_delay; ++k) prior(k) = std::exp(-k / model.rms_spread_samples);
  prior /= prior.sum();
  const double seen = h_ls.squaredNorm() / static_cast<double>(np);
  const double power = std::max(seen - ls_noise.mean(), 1e-3 * seen);

  auto corr = [&](Eigen::Index r1, Eigen::Index r2) {
    cd c = 0.0;
    for (int k = 0; k <= model.max_delay; ++k)
      c += prior(k) * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>((r1 - r2) * k) / n);
    return power * c;
  };
  Eigen::MatrixXcd r_pp(np, np), r_ap(n, np);
  for (Eigen::Index i = 0; i < np; ++i) {
    for (Eigen::Index k = 0; k < np; ++k) r_pp(i, k) = corr(pilot_positions[i], pilot_positions[k]);
    r_pp(i, i) += ls_noise(i) + model.loading * power;
    for (Eigen::Index r = 0; r < n; ++r) r_ap(r, i) = corr(r, pilot_positions[i]);
  }

  DetectorResult out;
  out.channel = r_ap * r_pp.ldlt().solve(h_ls);
  out.symbols.resize(n);
  out.bits.resize(static_cast<std::size_t>(2 * n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const cd h = out.channel(r);
    out.symbols(r) = std::abs(h) > 0.0 ? freq_data(r) / h : cd(0.0, 0.0);
    out.bits[2 * r] = out.symbols(r).real() > 0.0;
    out.bits[2 * r + 1] = out.symbols(r).imag() > 0.0;
  }
  return out;
}

double mmse_batch_ber(const ofdm::SampleBatch& batch, const ofdm::FrameConfig& frame,
                      const CVec& pilots, int heads, const MmseModel& model) {
  if (batch.frames.size() != static_cast<std::size_t>(batch.size()))
    throw SizeError("mmse_batch_ber needs the received frames");
  const int bits = kBitsPerHead * heads;
  const std::vector<int> positions = frame.pilot_positions();
  double wrong = 0.0;
  for (int s = 0; s < batch.size(); ++s) {
    const auto& f = batch.frames[static_cast<std::size_t>(s)];
    const DetectorResult d = mmse_detect(f.freq_pilot, f.freq_data, positions, pilots,
                                         batch.noise_vars[static_cast<std::size_t>(s)], model);
    for (int k = 0; k < bits; ++k) wrong += d.bits[static_cast<std::size_t>(k)] != batch.data_bits(s, k);
  }
  return wrong / (static_cast<double>(bits) * batch.size());
}

CollapseMetrics track_collapse(const nn::DeepSupervisedNet& net, const MatrixXd& probe_inputs,
                               const MatrixXd& probe_bits) {
  const int bits = net.num_bits;
  if (probe_bits.cols() != bits || probe_bits.rows() != probe_inputs.rows())
    throw SizeError("probe labels do not match the network");
  for (int i = 0; i < bits; ++i) {
    const double ones = probe_bits.col(i).sum();
    if (ones < 0.5 || ones > probe_bits.rows() - 0.5)
      throw CoverageError("probe batch never shows both values of bit " + std::to_string(i));
  }
  const MatrixXd w = net.output_head.weights.transpose();  // d x 2I
  CollapseMetrics m;
  m.theta_trivial = net.output_head.frozen;
  m.theta = nc::theta_metric(w.leftCols(bits), w.rightCols(bits));
  const nn::ForwardPass fp = nn::forward(net, probe_inputs);
  const MatrixXd signs = (2.0 * probe_bits.array() - 1.0).matrix().transpose();
  m.vartheta = nc::vartheta_from_signs(w, fp.penultimate().transpose(), signs);
  return m;
}

std::optional<int> rounds_to_threshold(const std::vector<double>& ber, double threshold, int window) {
  if (window < 1) throw ParameterError("window must be >= 1");
  for (std::size_t k = 0; k < ber.size(); ++k) {
    const std::size_t from = k + 1 > static_cast<std::size_t>(window) ? k + 1 - window : 0;
    double sum = 0.0;
    for (std::size_t i = from; i <= k; ++i) sum += ber[i];
    if (sum / static_cast<double>(k + 1 - from) <= threshold) return static_cast<int>(k + 1);
  }
  return std::nullopt;
}

double decreasing_fraction(const std::vector<double>& series, int window) {
  if (window < 1 || series.size() < static_cast<std::size_t>(window) + 1) return 0.0;
  std::vector<double> ma;
  double sum = 0.0;
  for (std::size_t k = 0; k < series.size(); ++k) {
    sum += series[k];
    if (k >= static_cast<std::size_t>(window)) sum -= series[k - window];
    if (k + 1 >= static_cast<std::size_t>(window)) ma.push_back(sum / window);
  }
  int down = 0;
  for (std::size_t k = 1; k < ma.size(); ++k) down += ma[k] < ma[k - 1];
  return static_cast<double>(down) / static_cast<double>(ma.size() - 1);
}

ExperimentData build_experiment_data(const Experiment& ex) {
  if (static_cast<int>(ex.clients.size()) != ex.fed.n_clients)
    throw ConfigError("client list has " + std::to_string(ex.clients.size()) + " entries, n_clients is " +
                      std::to_string(ex.fed.n_clients));
  const std::uint64_t seed = ex.fed.seed;
  const std::uint64_t data_seed = derive_seed({seed, 0x44415441ULL});
  ExperimentData d;
  for (const auto& spec : ex.clients)
    d.clients.push_back(
        ofdm::build_client_dataset(spec, ex.n_channels, data_seed, ex.channel, ex.frame, ex.fed.heads));
  d.validation = ofdm::build_evaluation_set(d.clients, ex.fed.val_samples_per_client,
                                            derive_seed({seed, ex.fed.val_seed}), std::nullopt, true);
  std::vector<ofdm::SampleBatch> parts;
  const int per_client = (ex.fed.probe_size + ex.fed.n_clients - 1) / ex.fed.n_clients;
  for (const auto& c : d.clients)
    parts.push_back(c.draw(per_client, derive_seed({seed, 0x50524f4245ULL,
                                                    static_cast<std::uint64_t>(c.spec().client_id)})));
  d.probe = ofdm::concat(parts);
  return d;
}

std::vector<ofdm::ClientSpec> uniform_clients(int n, double snr_db, std::optional<double> rician_k_db) {
  std::vector<ofdm::ClientSpec> v;
  for (int j = 0; j < n; ++j) v.push_back({j, snr_db, rician_k_db});
  return v;
}

std::vector<ofdm::ClientSpec> paired_snr_clients(int n, const std::vector<double>& snrs) {
  if (snrs.empty()) throw ConfigError("no SNR values to assign");
  std::vector<ofdm::ClientSpec> v;
  for (int j = 0; j < n; ++j) v.push_back({j, snrs[static_cast<std::size_t>(j / 2) % snrs.size()], std::nullopt});
  return v;
}

std::vector<ofdm::ClientSpec> paired_rician_clients(int n, const std::vector<double>& k_db, double snr_db) {
  if (k_db.empty()) throw ConfigError("no Rician factors to assign");
  std::vector<ofdm::ClientSpec> v;
  for (int j = 0; j < n; ++j) v.push_back({j, snr_db, k_db[static_cast<std::size_t>(j / 2) % k_db.size()]});
  return v;
}

std::vector<ofdm::ClientSpec> mixed_clients(int n, int extra, double snr_db, double extra_k_db) {
  std::vector<ofdm::ClientSpec> v = uniform_clients(n, snr_db);
  for (int j = 0; j < extra; ++j) v.push_back({n + j, snr_db, extra_k_db});
  return v;
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kSnr: return "snr";
    case SweepAxis::kHeteroSnr: return "hetero-snr";
    case SweepAxis::kRician: return "rician";
    case SweepAxis::kMixed: return "mixed";
  }
  return "?";
}

SweepAxis parse_axis(const std::string& s) {
  if (s == "snr") return SweepAxis::kSnr;
  if (s == "hetero-snr") return SweepAxis::kHeteroSnr;
  if (s == "rician") return SweepAxis::kRician;
  if (s == "mixed") return SweepAxis::kMixed;
  throw ConfigError("unknown sweep axis '" + s + "' (expected snr, hetero-snr, rician or mixed)");
}

void SweepSpec::validate() const {
  if (values.empty() && axis != SweepAxis::kMixed) throw ConfigError("sweep axis has no values");
  if (algorithms.empty()) throw ConfigError("sweep has no algorithms");
  if (seeds.empty()) throw ConfigError("sweep has no seeds");
  for (const auto& a : algorithms)
    if (a != "mmse") fed::parse_algorithm(a);
  if (mixed_extra_clients < 0) throw ConfigError("mixed_extra_clients must be >= 0");
}

SweepResult run_sweep(const SweepSpec& spec, const Experiment& base, const fs::path& out_dir,
                      const fed::LogCallback& log) {
  spec.validate();
  const int n = base.fed.n_clients;
  std::vector<PointSpec> points;
  switch (spec.axis) {
    case SweepAxis::kSnr:
      for (double v : spec.values) points.push_back({point_label("snr", v), uniform_clients(n, v)});
      break;
    case SweepAxis::kHeteroSnr:
      points.push_back({"hetero-snr", paired_snr_clients(n, spec.values)});
      break;
    case SweepAxis::kRician:
      points.push_back({"rician", paired_rician_clients(n, spec.values, spec.snr_db)});
      break;
    case SweepAxis::kMixed:
      points.push_back({"mixed", mixed_clients(n, spec.mixed_extra_clients, spec.snr_db, spec.mixed_k_db)});
      break;
  }

  fs::create_directories(out_dir / "points");
  SweepResult result;
  const std::string x_name = spec.axis == SweepAxis::kRician ? "rician_k_db" : "snr_db";
  const bool wants_mmse = std::find(spec.algorithms.begin(), spec.algorithms.end(), "mmse") != spec.algorithms.end();

  auto flush = [&] {
    // medians over seeds per (x, algo), in point then algorithm order
    std::ostringstream csv;
    csv << x_name << ",algo,ber\n";
    std::vector<std::pair<double, std::string>> keys;
    for (const auto& r : result.rows) {
      const std::pair<double, std::string> k{r.x, r.algo};
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    for (const auto& k : keys) {
      std::vector<double> v;
      for (const auto& r : result.rows)
        if (r.x == k.first && r.algo == k.second) v.push_back(r.ber);
      csv << fmt(k.first) << ',' << k.second << ',' << fmt(median(v)) << '\n';
    }
    write_file(out_dir / (spec.axis == SweepAxis::kRician ? "ber_vs_rician.csv" : "ber_vs_snr.csv"), csv.str());

    json summary{{"axis", to_string(spec.axis)}, {"ber_threshold", spec.ber_threshold},
                 {"failed_points", result.failed_points}};
    json pts = json::array();
    for (const auto& p : points) {
      json runs = json::array();
      std::map<std::string, std::vector<const RunSummary*>> by_algo;
      for (const auto& r : result.runs)
        if (r.point == p.label) {
          runs.push_back(run_to_json(r));
          by_algo[r.algo].push_back(&r);
        }
      json med = json::object();
      for (const auto& [algo, rs] : by_algo) {
        std::vector<double> fb, rt;
        for (const auto* r : rs) {
          fb.push_back(r->final_ber);
          rt.push_back(r->rounds_to_threshold ? *r->rounds_to_threshold : std::numeric_limits<double>::infinity());
        }
        const double m = median(rt);
        med[algo] = {{"final_ber", median(fb)}, {"rounds_to_threshold", std::isfinite(m) ? json(m) : json(nullptr)}};
      }
      pts.push_back({{"label", p.label}, {"runs", runs}, {"median", med}});
    }
    summary["points"] = pts;
    write_file(out_dir / "summary.json", summary.dump(2) + "\n");
  };

  for (const auto& point : points) {
    const fs::path pdir = out_dir / "points" / point.label;
    const fs::path done = pdir / "result.json";
    if (spec.resume && fs::exists(done)) {
      std::ifstream f(done);
      const json j = json::parse(f);
      for (const auto& r : j.at("rows"))
        result.rows.push_back({point.label, r.at("x").get<double>(), r.at("algo").get<std::string>(),
                               r.at("seed").get<std::uint64_t>(), r.at("ber").get<double>()});
      for (const auto& r : j.at("runs")) result.runs.push_back(run_from_json(r, point.label));
      if (log) log("point " + point.label + ": reused completed results");
      continue;
    }
    fs::create_directories(pdir);
    try {
      std::vector<SweepRow> rows;
      std::vector<RunSummary> runs;
      std::ostringstream conv;
      conv << "round,algo,seed,ber,theta,vartheta\n";
      for (std::uint64_t seed : spec.seeds) {
        Experiment ex = base;
        ex.clients = point.clients;
        ex.fed.n_clients = static_cast<int>(point.clients.size());
        ex.fed.seed = seed;
        const ExperimentData data = build_experiment_data(ex);

        std::vector<Condition> conds;
        const std::uint64_t eval_seed = derive_seed({seed, 0x4556414cULL});
        if (spec.axis == SweepAxis::kHeteroSnr) {
          for (double v : spec.values)
            conds.push_back({v, ofdm::build_evaluation_set(data.clients, ex.fed.val_samples_per_client,
                                                           eval_seed, v, wants_mmse)});
        } else if (spec.axis == SweepAxis::kRician) {
          for (double v : spec.values) {
            std::vector<ofdm::ClientDataset> group;
            for (const auto& c : data.clients)
              if (c.spec().rician_k_db && *c.spec().rician_k_db == v) group.push_back(c);
            if (group.empty()) continue;
            conds.push_back({v, ofdm::build_evaluation_set(group, ex.fed.val_samples_per_client, eval_seed,
                                                           std::nullopt, wants_mmse)});
          }
        } else {
          const double x = spec.axis == SweepAxis::kSnr ? point.clients.front().snr_db : spec.snr_db;
          conds.push_back({x, data.validation});
        }

        for (const auto& algo : spec.algorithms) {
          if (algo == "mmse") {
            for (const auto& c : conds) {
              const double b = mmse_batch_ber(c.batch, ex.frame, data.clients.front().pilots(), ex.fed.heads);
              rows.push_back({point.label, c.x, algo, seed, b});
            }
            continue;
          }
          ex.fed.algorithm = fed::parse_algorithm(algo);
          const fed::TrainingHistory h = fed::run_training(ex.fed, data.clients, data.validation, data.probe);
          std::vector<double> bers;
          for (const auto& r : h.records) {
            bers.push_back(r.ber);
            conv << r.round << ',' << algo << ',' << seed << ',' << fmt(r.ber) << ',' << fmt(r.theta) << ','
                 << fmt(r.vartheta) << '\n';
          }
          runs.push_back({point.label, algo, seed, bers.back(), rounds_to_threshold(bers, spec.ber_threshold)});
          for (const auto& c : conds) {
            double b = 0.0;
            if (ex.fed.aggregates()) {
              b = fed::model_set_ber(h.global, c.batch);
            } else {
              for (const auto& m : h.client_models) b += fed::model_set_ber(m, c.batch) / h.client_models.size();
            }
            rows.push_back({point.label, c.x, algo, seed, b});
          }
          if (log) log("point " + point.label + " " + algo + " seed " + std::to_string(seed) +
                       ": final BER " + fmt(bers.back()));
        }
      }
      write_file(pdir / "convergence.csv", conv.str());
      json j{{"rows", json::array()}, {"runs", json::array()}};
      for (const auto& r : rows) j["rows"].push_back({{"x", r.x}, {"algo", r.algo}, {"seed", r.seed}, {"ber", r.ber}});
      for (const auto& r : runs) j["runs"].push_back(run_to_json(r));
      write_file(done, j.dump(2) + "\n");
      result.rows.insert(result.rows.end(), rows.begin(), rows.end());
      result.runs.insert(result.runs.end(), runs.begin(), runs.end());
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      ++result.failed_points;
      if (log) log("point " + point.label + " failed: " + e.what());
    }
    flush();
  }
  flush();
  return result;
}

}  // namespace ncdsfl::eval
