#pragma once

// BER, the pilot-aided MMSE receiver, collapse tracking and experiment sweeps.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ncdsfl/fed_runtime.hpp"
#include "ncdsfl/neural_net.hpp"
#include "ncdsfl/ofdm_channel.hpp"

namespace ncdsfl::eval {

using Eigen::MatrixXd;
using ofdm::CVec;

double ber(const MatrixXd& predicted, const MatrixXd& truth);
double ber(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth);

struct DetectorResult {
  std::vector<std::uint8_t> bits;  // 2 per subcarrier, Re/Im interleaved
  CVec symbols;                    // equalized data symbols
  CVec channel;                    // channel estimate on every subcarrier
};

/// Prior for the frequency correlation: exponential delay profile with the
/// given RMS spread (in samples) over taps 0..max_delay.
struct MmseModel {
  int max_delay = 16;
  double rms_spread_samples = 1.5178;  // 10^-7.12 s at 20 MHz
  double loading = 1e-10;              // relative diagonal loading
};

/// LS at the pilots, MMSE interpolation, zero-forcing equalization and
/// hard QPSK slicing. noise_var is per subcarrier (unitary DFT).
DetectorResult mmse_detect(const CVec& freq_pilot, const CVec& freq_data,
                           const std::vector<int>& pilot_positions, const CVec& pilot_symbols,
                           double noise_var, const MmseModel& model = {});

/// MMSE BER over the bits the detector heads cover (first 32 * heads).
/// The batch must have been drawn with keep_frames.
double mmse_batch_ber(const ofdm::SampleBatch& batch, const ofdm::FrameConfig& frame,
                      const CVec& pilots, int heads, const MmseModel& model = {});

struct CollapseMetrics {
  double theta = 0.0;
  double vartheta = 0.0;
  bool theta_trivial = false;  // frozen NC head
};

/// Metrics of one head's net on a probe batch. Each probe sample counts as
/// its own label class. Throws CoverageError when some bit never takes
/// both values in the probe.
CollapseMetrics track_collapse(const nn::DeepSupervisedNet& net, const MatrixXd& probe_inputs,
                               const MatrixXd& probe_bits);

/// First round (1-based) whose trailing moving average over `window`
/// rounds is at or below the threshold. Rounds before a full window average
/// what is available.
std::optional<int> rounds_to_threshold(const std::vector<double>& ber, double threshold,
                                       int window = 5);

/// Strictly-decreasing fraction of a series' trailing moving average.
double decreasing_fraction(const std::vector<double>& series, int window);

// ---- experiments -------------------------------------------------------

struct Experiment {
  fed::FedConfig fed;
  ofdm::ChannelParams channel;
  ofdm::FrameConfig frame;
  int n_channels = 100;
  std::vector<ofdm::ClientSpec> clients;  // size fed.n_clients
};

struct ExperimentData {
  std::vector<ofdm::ClientDataset> clients;
  ofdm::SampleBatch validation;  // frames kept for the MMSE baseline
  ofdm::SampleBatch probe;
};

/// Datasets, validation and probe batches, all keyed by fed.seed.
ExperimentData build_experiment_data(const Experiment& ex);

/// Homogeneous clients at one SNR.
std::vector<ofdm::ClientSpec> uniform_clients(int n, double snr_db,
                                              std::optional<double> rician_k_db = std::nullopt);
/// values[p] assigned to clients 2p and 2p+1 (wrapping when more clients).
std::vector<ofdm::ClientSpec> paired_snr_clients(int n, const std::vector<double>& snrs);
std::vector<ofdm::ClientSpec> paired_rician_clients(int n, const std::vector<double>& k_db,
                                                    double snr_db);
/// n Rayleigh clients plus extra Rician clients at the same SNR.
std::vector<ofdm::ClientSpec> mixed_clients(int n, int extra, double snr_db, double extra_k_db);

enum class SweepAxis { kSnr, kHeteroSnr, kRician, kMixed };
std::string to_string(SweepAxis a);
SweepAxis parse_axis(const std::string& s);

struct SweepSpec {
  SweepAxis axis = SweepAxis::kSnr;
  std::vector<double> values;              // SNRs or Rician factors
  std::vector<std::string> algorithms;     // ncdsfl, fedavg, il, mmse
  std::vector<std::uint64_t> seeds;
  double snr_db = 10.0;                    // fixed SNR of rician/mixed runs
  int mixed_extra_clients = 5;
  double mixed_k_db = 0.0;
  double ber_threshold = 0.05;
  bool resume = false;

  void validate() const;  // ConfigError

  bool operator==(const SweepSpec&) const = default;
};

struct SweepRow {
  std::string point;
  double x = 0.0;  // snr_db or rician_k_db
  std::string algo;
  std::uint64_t seed = 0;
  double ber = 0.0;
};

struct RunSummary {
  std::string point;
  std::string algo;
  std::uint64_t seed = 0;
  double final_ber = 0.0;
  std::optional<int> rounds_to_threshold;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // per seed
  std::vector<RunSummary> runs;
  int failed_points = 0;
};

/// Every axis point x algorithm x seed. Per-point results land in
/// out_dir/points/<label>/ and are reused when resume is set. Writes
/// ber_vs_snr.csv (or ber_vs_rician.csv) with per-seed medians and
/// summary.json.
SweepResult run_sweep(const SweepSpec& spec, const Experiment& base,
                      const std::filesystem::path& out_dir, const fed::LogCallback& log = {});

}  // namespace ncdsfl::eval
