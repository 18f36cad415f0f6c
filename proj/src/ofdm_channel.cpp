#include "ncdsfl/ofdm_channel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <unordered_map>

#include "ncdsfl/errors.hpp"

namespace ncdsfl::ofdm {

namespace {

using Eigen::MatrixXcd;

const MatrixXcd& dft_matrix(Eigen::Index n) {
  thread_local std::unordered_map<Eigen::Index, MatrixXcd> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  MatrixXcd f(n, n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index t = 0; t < n; ++t) {
      // reduce the exponent first so large products stay exact
      const double ang = -2.0 * std::numbers::pi * static_cast<double>((r * t) % n) / n;
      f(r, t) = std::polar(scale, ang);
    }
  return cache.emplace(n, std::move(f)).first->second;
}

cd complex_gaussian(Rng& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(0.5));
  const double re = n(rng);
  const double im = n(rng);
  return {re, im};
}

std::vector<std::uint8_t> random_bits(int n, Rng& rng) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(n));
  for (int i = 0; i < n; i += 64) {
    const std::uint64_t word = rng();
    for (int b = 0; b < 64 && i + b < n; ++b) bits[i + b] = static_cast<std::uint8_t>((word >> b) & 1U);
  }
  return bits;
}

SampleBatch empty_batch(int rows, const FrameConfig& frame, int heads, bool keep_frames) {
  SampleBatch b;
  b.inputs.resize(rows, frame.input_dim());
  b.data_bits.resize(rows, frame.data_bits());
  const int per_head = frame.data_bits() / std::max(heads, 1);
  b.head_bits.assign(static_cast<std::size_t>(heads), MatrixXd(rows, std::min(32, per_head)));
  if (keep_frames) b.frames.reserve(static_cast<std::size_t>(rows));
  b.noise_vars.reserve(static_cast<std::size_t>(rows));
  b.client_ids.reserve(static_cast<std::size_t>(rows));
  return b;
}

// One sample: fresh bits and noise through the given channel.
void fill_row(SampleBatch& b, int row, const CVec& taps, double snr_db, int client_id,
              const CVec& pilots, const FrameConfig& frame, int heads, bool keep_frames, Rng& rng) {
  const std::vector<std::uint8_t> bits = random_bits(frame.data_bits(), rng);
  const OfdmFrame f = qpsk_modulate_frame(bits, pilots, frame);
  const CVec rx = transmit(f.tx_time, taps, snr_db, rng);
  ReceivedFrame rf = receive(rx, frame);
  b.inputs.row(row) = rf.x.transpose();
  if (frame.normalize_input) {
    const double rms = std::sqrt(rf.x.squaredNorm() / static_cast<double>(rf.x.size()));
    if (rms > 0.0) b.inputs.row(row) /= rms;
  }
  for (int k = 0; k < frame.data_bits(); ++k) b.data_bits(row, k) = bits[static_cast<std::size_t>(k)];
  const int sc_per_head = 16;
  for (int e = 0; e < heads; ++e) {
    const std::vector<std::uint8_t> hb = head_bits(bits, e, sc_per_head);
    for (std::size_t k = 0; k < hb.size(); ++k) b.head_bits[static_cast<std::size_t>(e)](row, static_cast<Eigen::Index>(k)) = hb[k];
  }
  b.noise_vars.push_back(noise_variance(taps, snr_db));
  b.client_ids.push_back(client_id);
  if (keep_frames) b.frames.push_back(std::move(rf));
}

void check_heads(const FrameConfig& frame, int heads) {
  if (heads < 1 || heads * 16 > frame.n_subcarriers)
    throw SizeError("heads must tile 16-subcarrier blocks inside the frame: got " +
                    std::to_string(heads));
}

}  // namespace

VectorXd PowerDelayProfile::delay_bin_powers(int max_delay) const {
  VectorXd p = VectorXd::Zero(max_delay + 1);
  for (std::size_t m = 0; m < path_powers.size(); ++m) p(path_delays[m]) += path_powers[m];
  return p;
}

PowerDelayProfile sample_pdp(int client_id, std::uint64_t seed, const ChannelParams& params) {
  if (params.n_paths < 1 || params.max_delay < 0) throw ParameterError("invalid channel parameters");
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(client_id), 0x504450ULL});
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  PowerDelayProfile pdp;
  pdp.client_id = client_id;
  pdp.rms_delay_spread_s = std::pow(10.0, params.log10_ds_mean + params.log10_ds_std * std_normal(rng));
  pdp.shadow_db = params.shadow_std_db * std_normal(rng);
  const double spread = pdp.rms_delay_spread_s * params.sample_rate_hz;  // in samples

  std::vector<double> raw(static_cast<std::size_t>(params.n_paths));
  for (double& d : raw) d = -params.delay_scaling * spread * std::log(1.0 - uniform(rng));
  std::sort(raw.begin(), raw.end());
  const double first = raw.front();
  for (double& d : raw) d -= first;

  const double decay = (params.delay_scaling - 1.0) / (params.delay_scaling * spread);
  pdp.path_powers.resize(raw.size());
  pdp.path_delays.resize(raw.size());
  double total = 0.0;
  for (std::size_t m = 0; m < raw.size(); ++m) {
    const double perturb_db = params.path_shadow_std_db * std_normal(rng);
    pdp.path_powers[m] = std::exp(-raw[m] * decay) * std::pow(10.0, -perturb_db / 10.0);
    total += pdp.path_powers[m];
    pdp.path_delays[m] = std::min(params.max_delay, static_cast<int>(std::lround(raw[m])));
  }
  for (double& p : pdp.path_powers) p /= total;
  return pdp;
}

ChannelRealization realize_taps(const PowerDelayProfile& pdp, std::uint64_t seed,
                                std::optional<double> rician_k_db, const ChannelParams& params) {
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(pdp.client_id), 0x544150ULL});
  ChannelRealization ch;
  ch.client_id = pdp.client_id;
  ch.rician_k_db = rician_k_db;
  ch.taps = CVec::Zero(params.max_delay + 1);

  const double kappa = rician_k_db ? std::pow(10.0, *rician_k_db / 10.0) : 0.0;
  const double nlos_scale = 1.0 / (1.0 + kappa);
  const double gain = std::sqrt(std::pow(10.0, pdp.shadow_db / 10.0));
  for (std::size_t m = 0; m < pdp.path_powers.size(); ++m)
    ch.taps(pdp.path_delays[m]) += std::sqrt(pdp.path_powers[m] * nlos_scale) * complex_gaussian(rng);
  if (rician_k_db) {
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    ch.taps(0) += std::polar(std::sqrt(kappa / (1.0 + kappa)), phase(rng));
  }
  ch.taps *= gain;
  return ch;
}

std::vector<int> FrameConfig::pilot_positions() const {
  std::vector<int> pos;
  for (int r = 0; r < n_subcarriers; r += pilot_spacing) pos.push_back(r);
  return pos;
}

CVec dft(const CVec& x) { return dft_matrix(x.size()) * x; }

CVec idft(const CVec& x) { return dft_matrix(x.size()).adjoint() * x; }

CVec frequency_response(const CVec& taps, int n_subcarriers) {
  if (taps.size() > n_subcarriers) throw SizeError("channel longer than the DFT size");
  CVec padded = CVec::Zero(n_subcarriers);
  padded.head(taps.size()) = taps;
  return dft(padded) * std::sqrt(static_cast<double>(n_subcarriers));
}

cd qpsk_symbol(std::uint8_t bit_re, std::uint8_t bit_im) {
  return cd(2.0 * bit_re - 1.0, 2.0 * bit_im - 1.0) / std::numbers::sqrt2;
}

CVec make_pilot_symbols(const FrameConfig& cfg) {
  if (cfg.pilot_spacing < 1 || cfg.n_subcarriers % cfg.pilot_spacing != 0)
    throw ParameterError("pilot spacing must divide the subcarrier count");
  Rng rng = make_rng({cfg.pilot_seed});
  const std::vector<std::uint8_t> bits = random_bits(2 * cfg.n_subcarriers, rng);
  CVec p = CVec::Zero(cfg.n_subcarriers);
  for (int r : cfg.pilot_positions()) p(r) = qpsk_symbol(bits[2 * r], bits[2 * r + 1]);
  return p;
}

OfdmFrame qpsk_modulate_frame(const std::vector<std::uint8_t>& data_bits, const CVec& pilots,
                              const FrameConfig& cfg) {
  if (static_cast<int>(data_bits.size()) != cfg.data_bits())
    throw SizeError("frame carries " + std::to_string(cfg.data_bits()) + " data bits, got " +
                    std::to_string(data_bits.size()));
  if (pilots.size() != cfg.n_subcarriers) throw SizeError("pilot symbol length mismatch");
  if (cfg.cp_len < 0 || cfg.cp_len > cfg.n_subcarriers) throw ParameterError("invalid cyclic prefix");
  OfdmFrame f;
  f.pilot_symbols = pilots;
  f.data_bits = data_bits;
  f.data_symbols.resize(cfg.n_subcarriers);
  for (int r = 0; r < cfg.n_subcarriers; ++r)
    f.data_symbols(r) = qpsk_symbol(data_bits[2 * r], data_bits[2 * r + 1]);

  f.tx_time.resize(cfg.frame_len());
  const int n = cfg.n_subcarriers, cp = cfg.cp_len;
  int offset = 0;
  for (const CVec* sym : {&f.pilot_symbols, &f.data_symbols}) {
    const CVec t = idft(*sym);
    f.tx_time.segment(offset, cp) = t.tail(cp);
    f.tx_time.segment(offset + cp, n) = t;
    offset += n + cp;
  }
  return f;
}

double noise_variance(const CVec& taps, double snr_db) {
  return taps.squaredNorm() / std::pow(10.0, snr_db / 10.0);
}

CVec transmit(const CVec& tx_time, const CVec& taps, std::optional<double> snr_db, Rng& rng) {
  const Eigen::Index n = tx_time.size();
  CVec rx = CVec::Zero(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    cd acc = 0.0;
    const Eigen::Index kmax = std::min<Eigen::Index>(taps.size() - 1, t);
    for (Eigen::Index k = 0; k <= kmax; ++k) acc += taps(k) * tx_time(t - k);
    rx(t) = acc;
  }
  if (snr_db) {
    const double sigma = std::sqrt(noise_variance(taps, *snr_db) / 2.0);
    std::normal_distribution<double> normal(0.0, sigma);
    for (Eigen::Index t = 0; t < n; ++t) {
      const double re = normal(rng);
      const double im = normal(rng);
      rx(t) += cd(re, im);
    }
  }
  return rx;
}

ReceivedFrame receive(const CVec& rx, const FrameConfig& cfg) {
  if (rx.size() != cfg.frame_len())
    throw SizeError("received sequence must hold exactly one aligned frame (" +
                    std::to_string(cfg.frame_len()) + " samples), got " + std::to_string(rx.size()));
  const int n = cfg.n_subcarriers, cp = cfg.cp_len;
  const CVec pilot_t = rx.segment(cp, n);
  const CVec data_t = rx.segment(n + 2 * cp, n);
  ReceivedFrame out;
  out.x.resize(4 * n);
  for (int t = 0; t < n; ++t) {
    out.x(2 * t) = pilot_t(t).real();
    out.x(2 * t + 1) = pilot_t(t).imag();
    out.x(2 * (n + t)) = data_t(t).real();
    out.x(2 * (n + t) + 1) = data_t(t).imag();
  }
  out.freq_pilot = dft(pilot_t);
  out.freq_data = dft(data_t);
  return out;
}

std::vector<std::uint8_t> head_bits(const std::vector<std::uint8_t>& data_bits, int head,
                                    int subcarriers_per_head) {
  const std::size_t begin = static_cast<std::size_t>(2 * subcarriers_per_head * head);
  const std::size_t len = static_cast<std::size_t>(2 * subcarriers_per_head);
  if (head < 0 || begin + len > data_bits.size()) throw SizeError("head outside the frame");
  return {data_bits.begin() + static_cast<std::ptrdiff_t>(begin),
          data_bits.begin() + static_cast<std::ptrdiff_t>(begin + len)};
}

ClientDataset::ClientDataset(ClientSpec spec, PowerDelayProfile pdp,
                             std::vector<ChannelRealization> pool, FrameConfig frame, int heads)
    : spec_(spec), pdp_(std::move(pdp)), pool_(std::move(pool)), frame_(frame),
      pilots_(make_pilot_symbols(frame)), heads_(heads) {
  if (pool_.empty()) throw ParameterError("a client needs at least one channel");
  check_heads(frame_, heads_);
  for (const auto& ch : pool_)
    if (ch.taps.size() - 1 > frame_.cp_len) throw ParameterError("cyclic prefix shorter than the channel");
}

SampleBatch ClientDataset::draw(int batch_size, std::uint64_t stream_seed, bool keep_frames) const {
  Rng rng(stream_seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
  SampleBatch b = empty_batch(batch_size, frame_, heads_, keep_frames);
  for (int n = 0; n < batch_size; ++n) {
    const ChannelRealization& ch = pool_[pick(rng)];
    fill_row(b, n, ch.taps, spec_.snr_db, spec_.client_id, pilots_, frame_, heads_, keep_frames, rng);
  }
  return b;
}

ClientDataset build_client_dataset(const ClientSpec& spec, int n_channels, std::uint64_t seed,
                                   const ChannelParams& params, const FrameConfig& frame, int heads) {
  if (n_channels < 1) throw ParameterError("n_channels must be at least 1");
  PowerDelayProfile pdp = sample_pdp(spec.client_id, seed, params);
  std::vector<ChannelRealization> pool;
  pool.reserve(static_cast<std::size_t>(n_channels));
  for (int c = 0; c < n_channels; ++c)
    pool.push_back(realize_taps(pdp, derive_seed({seed, 0x504f4f4cULL, static_cast<std::uint64_t>(c)}),
                                spec.rician_k_db, params));
  return ClientDataset(spec, std::move(pdp), std::move(pool), frame, heads);
}

SampleBatch build_evaluation_set(const std::vector<ClientDataset>& clients, int samples_per_client,
                                 std::uint64_t seed, std::optional<double> snr_override,
                                 bool keep_frames) {
  if (clients.empty()) throw ParameterError("evaluation set needs at least one client");
  const FrameConfig& frame = clients.front().frame();
  const int heads = clients.front().heads();
  ChannelParams params;
  params.max_delay = static_cast<int>(clients.front().channel_pool().front().taps.size()) - 1;
  SampleBatch b = empty_batch(samples_per_client * static_cast<int>(clients.size()), frame, heads,
                              keep_frames);
  int row = 0;
  for (const ClientDataset& c : clients) {
    Rng rng = make_rng({seed, static_cast<std::uint64_t>(c.spec().client_id), 0x56414cULL});
    const double snr = snr_override.value_or(c.spec().snr_db);
    for (int n = 0; n < samples_per_client; ++n, ++row) {
      const ChannelRealization ch = realize_taps(c.pdp(), rng(), c.spec().rician_k_db, params);
      fill_row(b, row, ch.taps, snr, c.spec().client_id, c.pilots(), frame, heads, keep_frames, rng);
    }
  }
  return b;
}

SampleBatch concat(const std::vector<SampleBatch>& parts) {
  if (parts.empty()) return {};
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.inputs.rows();
  SampleBatch out;
  out.inputs.resize(rows, parts.front().inputs.cols());
  out.data_bits.resize(rows, parts.front().data_bits.cols());
  out.head_bits.resize(parts.front().head_bits.size());
  for (std::size_t e = 0; e < out.head_bits.size(); ++e)
    out.head_bits[e].resize(rows, parts.front().head_bits[e].cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    const Eigen::Index n = p.inputs.rows();
    out.inputs.middleRows(r, n) = p.inputs;
    out.data_bits.middleRows(r, n) = p.data_bits;
    for (std::size_t e = 0; e < out.head_bits.size(); ++e) out.head_bits[e].middleRows(r, n) = p.head_bits[e];
    out.frames.insert(out.frames.end(), p.frames.begin(), p.frames.end());
    out.noise_vars.insert(out.noise_vars.end(), p.noise_vars.begin(), p.noise_vars.end());
    out.client_ids.insert(out.client_ids.end(), p.client_ids.begin(), p.client_ids.end());
    r += n;
  }
  return out;
}

void write_channel_pool_csv(const ClientDataset& ds, std::ostream& out, bool header) {
  if (header) out << "client,channel,delay,re,im\n";
  const auto old = out.precision(17);
  for (std::size_t c = 0; c < ds.channel_pool().size(); ++c) {
    const CVec& taps = ds.channel_pool()[c].taps;
    for (Eigen::Index d = 0; d < taps.size(); ++d)
      out << ds.spec().client_id << ',' << c << ',' << d << ',' << taps(d).real() << ','
          << taps(d).imag() << '\n';
  }
  out.precision(old);
}

}  // namespace ncdsfl::ofdm
