#pragma once

// Statistical tapped-delay-line channels, a two-symbol QPSK OFDM frame
// (pilot symbol + data symbol) and the supervised samples fed to the
// detector networks.

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "ncdsfl/rng.hpp"

namespace ncdsfl::ofdm {

using cd = std::complex<double>;
using CVec = Eigen::VectorXcd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ChannelParams {
  int n_paths = 24;
  int max_delay = 16;                  // sample periods
  double log10_ds_mean = -7.12;        // log10(seconds)
  double log10_ds_std = 0.12;
  double shadow_std_db = 4.0;
  double sample_rate_hz = 20e6;
  double carrier_hz = 2.6e9;           // recorded only; channels are static
  double delay_scaling = 2.4;          // delay spread multiplier for path delays
  double path_shadow_std_db = 3.0;     // per-path power perturbation

  bool operator==(const ChannelParams&) const = default;
};

struct PowerDelayProfile {
  int client_id = 0;
  std::vector<double> path_powers;  // sums to 1
  std::vector<int> path_delays;     // sorted, first is 0
  double shadow_db = 0.0;
  double rms_delay_spread_s = 0.0;  // the drawn log-normal spread

  /// Power per delay bin 0..max_delay (paths sharing a bin add up).
  VectorXd delay_bin_powers(int max_delay) const;
};

PowerDelayProfile sample_pdp(int client_id, std::uint64_t seed, const ChannelParams& params);

struct ChannelRealization {
  CVec taps;  // delays 0..max_delay
  int client_id = 0;
  std::optional<double> rician_k_db;
};

ChannelRealization realize_taps(const PowerDelayProfile& pdp, std::uint64_t seed,
                                std::optional<double> rician_k_db, const ChannelParams& params);

/// Frame layout. pilot_spacing 1 fills every subcarrier with pilots; 8
/// gives the limited-pilot comb (subcarriers 0, 8, ...; others zero).
struct FrameConfig {
  int n_subcarriers = 64;
  int cp_len = 16;
  int pilot_spacing = 1;
  std::uint64_t pilot_seed = 0x50494c4fULL;
  bool normalize_input = true;  // scale each detector input to unit RMS

  int data_bits() const { return 2 * n_subcarriers; }
  int symbol_len() const { return n_subcarriers + cp_len; }
  int frame_len() const { return 2 * symbol_len(); }
  int input_dim() const { return 4 * n_subcarriers; }
  std::vector<int> pilot_positions() const;

  bool operator==(const FrameConfig&) const = default;
};

/// Unitary DFT pair.
CVec dft(const CVec& x);
CVec idft(const CVec& x);

/// Un-normalized DFT of zero-padded taps: the per-subcarrier response.
CVec frequency_response(const CVec& taps, int n_subcarriers);

cd qpsk_symbol(std::uint8_t bit_re, std::uint8_t bit_im);

/// The fixed known pilot symbol (identical across clients and phases).
CVec make_pilot_symbols(const FrameConfig& cfg);

struct OfdmFrame {
  CVec pilot_symbols;
  std::vector<std::uint8_t> data_bits;
  CVec data_symbols;
  CVec tx_time;  // [CP | pilot][CP | data]
};

OfdmFrame qpsk_modulate_frame(const std::vector<std::uint8_t>& data_bits, const CVec& pilots,
                              const FrameConfig& cfg);

/// Noise variance for a per-sample SNR relative to the received power of
/// a unit-power transmission through these taps.
double noise_variance(const CVec& taps, double snr_db);

/// Linear convolution truncated to the frame, plus AWGN. snr_db = nullopt
/// transmits noiselessly.
CVec transmit(const CVec& tx_time, const CVec& taps, std::optional<double> snr_db, Rng& rng);

struct ReceivedFrame {
  VectorXd x;        // Re/Im interleaved post-CP samples
  CVec freq_pilot;   // DFT of the pilot symbol
  CVec freq_data;    // DFT of the data symbol
};

ReceivedFrame receive(const CVec& rx, const FrameConfig& cfg);

/// Labels of head e: the 32 bits on data subcarriers [16e, 16e + 16),
/// Re/Im interleaved.
std::vector<std::uint8_t> head_bits(const std::vector<std::uint8_t>& data_bits, int head,
                                    int subcarriers_per_head);

struct ClientSpec {
  int client_id = 0;
  double snr_db = 10.0;
  std::optional<double> rician_k_db;
};

/// A mini-batch from one or more clients. head_bits[e] is batch x 32.
struct SampleBatch {
  MatrixXd inputs;                     // detector inputs (x, RMS-normalized if configured)
  std::vector<MatrixXd> head_bits;
  MatrixXd data_bits;                  // batch x 128
  std::vector<ReceivedFrame> frames;   // kept only on request
  std::vector<double> noise_vars;
  std::vector<int> client_ids;

  int size() const { return static_cast<int>(inputs.rows()); }
};

class ClientDataset {
 public:
  ClientDataset(ClientSpec spec, PowerDelayProfile pdp, std::vector<ChannelRealization> pool,
                FrameConfig frame, int heads);

  const ClientSpec& spec() const { return spec_; }
  const PowerDelayProfile& pdp() const { return pdp_; }
  const std::vector<ChannelRealization>& channel_pool() const { return pool_; }
  const FrameConfig& frame() const { return frame_; }
  const CVec& pilots() const { return pilots_; }
  int heads() const { return heads_; }

  /// Fresh bits and noise over channels picked from the frozen pool. The
  /// stream seed fully determines the batch.
  SampleBatch draw(int batch_size, std::uint64_t stream_seed, bool keep_frames = false) const;

 private:
  ClientSpec spec_;
  PowerDelayProfile pdp_;
  std::vector<ChannelRealization> pool_;
  FrameConfig frame_;
  CVec pilots_;
  int heads_;
};

ClientDataset build_client_dataset(const ClientSpec& spec, int n_channels, std::uint64_t seed,
                                   const ChannelParams& params, const FrameConfig& frame, int heads);

/// Samples over fresh channel draws from each listed PDP (not the training
/// pools). snr_override replaces every client's SNR when set.
SampleBatch build_evaluation_set(const std::vector<ClientDataset>& clients, int samples_per_client,
                                 std::uint64_t seed, std::optional<double> snr_override,
                                 bool keep_frames);

/// Stacks batches row-wise.
SampleBatch concat(const std::vector<SampleBatch>& parts);

/// CSV rows: client, channel, delay, re, im.
void write_channel_pool_csv(const ClientDataset& ds, std::ostream& out, bool header);

}  // namespace ncdsfl::ofdm
