#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ncdsfl/errors.hpp"
#include "ncdsfl/ofdm_channel.hpp"

using namespace ncdsfl;
using namespace ncdsfl::ofdm;

namespace {

CVec random_cvec(int n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  CVec v(n);
  for (int i = 0; i < n; ++i) {
    const double re = g(rng);
    const double im = g(rng);
    v(i) = cd(re, im);
  }
  return v;
}

std::vector<std::uint8_t> random_bits(int n, Rng& rng) {
  std::vector<std::uint8_t> b(static_cast<std::size_t>(n));
  for (auto& x : b) x = static_cast<std::uint8_t>(rng() & 1U);
  return b;
}

// Direct O(N^2) DFT with the textbook sum, independent of the library matrix.
CVec naive_dft(const CVec& x) {
  const int n = static_cast<int>(x.size());
  CVec y = CVec::Zero(n);
  for (int r = 0; r < n; ++r)
    for (int t = 0; t < n; ++t) y(r) += x(t) * std::exp(cd(0.0, -2.0 * M_PI * r * t / n));
  return y / std::sqrt(static_cast<double>(n));
}

}  // namespace

TEST_CASE("dft matches the direct sum and round-trips") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const CVec x = random_cvec(64, rng);
    CHECK((dft(x) - naive_dft(x)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((idft(dft(x)) - x).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((dft(idft(x)) - x).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("qpsk mapping and pilot impulse") {
  CHECK(std::abs(qpsk_symbol(1, 1) - cd(1.0, 1.0) / std::sqrt(2.0)) < 1e-15);
  CHECK(std::abs(qpsk_symbol(0, 1) - cd(-1.0, 1.0) / std::sqrt(2.0)) < 1e-15);
  CHECK(std::abs(qpsk_symbol(0, 0) - cd(-1.0, -1.0) / std::sqrt(2.0)) < 1e-15);

  const CVec ones = CVec::Ones(64);
  const CVec t = idft(ones);
  CHECK(std::abs(t(0) - 8.0) < 1e-12);
  CHECK(t.tail(63).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("frame layout and transmit power") {
  FrameConfig cfg;
  Rng rng(2);
  const CVec pilots = make_pilot_symbols(cfg);
  CHECK(pilots.cwiseAbs().minCoeff() == doctest::Approx(1.0));

  double power = 0.0;
  long count = 0;
  for (int f = 0; f < 400; ++f) {
    const OfdmFrame fr = qpsk_modulate_frame(random_bits(128, rng), pilots, cfg);
    REQUIRE(fr.tx_time.size() == 160);
    // CP copies the symbol tail
    CHECK((fr.tx_time.segment(0, 16) - fr.tx_time.segment(64, 16)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((fr.tx_time.segment(80, 16) - fr.tx_time.segment(144, 16)).cwiseAbs().maxCoeff() < 1e-15);
    power += fr.tx_time.segment(80, 80).squaredNorm();
    count += 80;
  }
  CHECK(power / count == doctest::Approx(1.0).epsilon(0.02));

  CHECK_THROWS_AS(qpsk_modulate_frame(random_bits(127, rng), pilots, cfg), SizeError);
}

TEST_CASE("comb pilots sit on every eighth subcarrier") {
  FrameConfig cfg;
  cfg.pilot_spacing = 8;
  const CVec p = make_pilot_symbols(cfg);
  for (int r = 0; r < 64; ++r) CHECK(std::abs(p(r)) == doctest::Approx(r % 8 == 0 ? 1.0 : 0.0));
  // the comb values agree with the full pilot at the shared positions
  const CVec full = make_pilot_symbols(FrameConfig{});
  for (int r = 0; r < 64; r += 8) CHECK(std::abs(p(r) - full(r)) < 1e-15);
  cfg.pilot_spacing = 7;
  CHECK_THROWS_AS(make_pilot_symbols(cfg), ParameterError);
}

TEST_CASE("transmit without noise") {
  FrameConfig cfg;
  Rng rng(3);
  const OfdmFrame fr = qpsk_modulate_frame(random_bits(128, rng), make_pilot_symbols(cfg), cfg);
  CVec unit = CVec::Zero(1);
  unit(0) = 1.0;
  CHECK((transmit(fr.tx_time, unit, std::nullopt, rng) - fr.tx_time).cwiseAbs().maxCoeff() == 0.0);
  unit(0) = 0.5;
  CHECK((transmit(fr.tx_time, unit, std::nullopt, rng) - 0.5 * fr.tx_time).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("delta channel gives the transmitted symbols back") {
  FrameConfig cfg;
  Rng rng(4);
  const OfdmFrame fr = qpsk_modulate_frame(random_bits(128, rng), make_pilot_symbols(cfg), cfg);
  CVec delta = CVec::Zero(17);
  delta(0) = 1.0;
  const ReceivedFrame rf = receive(transmit(fr.tx_time, delta, std::nullopt, rng), cfg);
  CHECK(rf.x.size() == 256);
  CHECK((rf.freq_data - fr.data_symbols).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((rf.freq_pilot - fr.pilot_symbols).cwiseAbs().maxCoeff() < 1e-12);
  for (int e = 0; e < 4; ++e) CHECK(head_bits(fr.data_bits, e, 16).size() == 32);
}

TEST_CASE("cyclic prefix turns the channel into a per-subcarrier product") {
  FrameConfig cfg;
  Rng rng(5);
  const CVec pilots = make_pilot_symbols(cfg);
  for (int trial = 0; trial < 50; ++trial) {
    const int support = 1 + static_cast<int>(rng() % 17);
    CVec taps = CVec::Zero(17);
    taps.head(support) = random_cvec(support, rng);
    const OfdmFrame fr = qpsk_modulate_frame(random_bits(128, rng), pilots, cfg);
    const ReceivedFrame rf = receive(transmit(fr.tx_time, taps, std::nullopt, rng), cfg);
    CVec padded = CVec::Zero(64);
    padded.head(17) = taps;
    const CVec h = naive_dft(padded) * 8.0;
    CHECK((rf.freq_data - fr.data_symbols.cwiseProduct(h)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((rf.freq_pilot - pilots.cwiseProduct(h)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((frequency_response(taps, 64) - h).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("receive interleaves Re/Im of the post-CP samples") {
  FrameConfig cfg;
  Rng rng(6);
  const CVec rx = random_cvec(160, rng);
  const ReceivedFrame rf = receive(rx, cfg);
  for (int t = 0; t < 64; ++t) {
    CHECK(rf.x(2 * t) == rx(16 + t).real());
    CHECK(rf.x(2 * t + 1) == rx(16 + t).imag());
    CHECK(rf.x(128 + 2 * t) == rx(96 + t).real());
    CHECK(rf.x(128 + 2 * t + 1) == rx(96 + t).imag());
  }
  CHECK_THROWS_AS(receive(random_cvec(159, rng), cfg), SizeError);
}

TEST_CASE("heads partition the data subcarriers") {
  std::vector<std::uint8_t> bits(128);
  for (int k = 0; k < 128; ++k) bits[k] = static_cast<std::uint8_t>(k % 2);
  std::vector<int> seen(128, 0);
  for (int e = 0; e < 4; ++e) {
    const auto hb = head_bits(bits, e, 16);
    for (int k = 0; k < 32; ++k) {
      ++seen[32 * e + k];
      CHECK(hb[k] == bits[32 * e + k]);
    }
  }
  for (int s : seen) CHECK(s == 1);
  CHECK_THROWS_AS(head_bits(bits, 4, 16), SizeError);
}

TEST_CASE("measured SNR matches the target") {
  Rng rng(7);
  CVec taps = random_cvec(17, rng) * 0.3;
  CVec silent = CVec::Zero(100000);
  for (double snr_db : {0.0, 10.0, 20.0}) {
    // noise alone: transmit silence through the same taps
    const CVec noise = transmit(silent, taps, snr_db, rng);
    const double measured = noise.squaredNorm() / noise.size();
    const double target = taps.squaredNorm() / std::pow(10.0, snr_db / 10.0);
    CHECK(std::abs(10.0 * std::log10(measured / target)) < 0.2);
    CHECK(noise_variance(taps, snr_db) == doctest::Approx(target));
  }
}

TEST_CASE("power delay profile invariants") {
  ChannelParams params;
  for (int client = 0; client < 50; ++client) {
    const PowerDelayProfile a = sample_pdp(client, 11, params);
    const PowerDelayProfile b = sample_pdp(client, 11, params);
    CHECK(a.path_powers == b.path_powers);
    CHECK(a.path_delays == b.path_delays);
    CHECK(a.shadow_db == b.shadow_db);
    REQUIRE(a.path_powers.size() == 24);
    double sum = 0.0;
    for (double p : a.path_powers) {
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(a.path_delays.front() == 0);
    for (std::size_t m = 0; m < 24; ++m) {
      CHECK(a.path_delays[m] <= 16);
      if (m > 0) CHECK(a.path_delays[m] >= a.path_delays[m - 1]);
    }
  }
  CHECK(sample_pdp(0, 11, params).path_powers != sample_pdp(1, 11, params).path_powers);
}

TEST_CASE("tap powers follow the profile") {
  ChannelParams params;
  params.shadow_std_db = 0.0;
  const PowerDelayProfile pdp = sample_pdp(3, 21, params);
  const VectorXd expected = pdp.delay_bin_powers(16);
  VectorXd acc = VectorXd::Zero(17);
  const int draws = 10000;
  for (int n = 0; n < draws; ++n) acc += realize_taps(pdp, derive_seed({21, 7, static_cast<std::uint64_t>(n)}),
                                                      std::nullopt, params).taps.cwiseAbs2();
  acc /= draws;
  for (int d = 0; d < 17; ++d) {
    // only bins holding a noticeable share of the power are resolvable at 1e4 draws
    if (expected(d) > 0.02) CHECK(std::abs(acc(d) / expected(d) - 1.0) < 0.05);
    if (expected(d) == 0.0) CHECK(acc(d) == 0.0);
  }

  const ChannelRealization a = realize_taps(pdp, 5, std::nullopt, params);
  const ChannelRealization b = realize_taps(pdp, 5, std::nullopt, params);
  CHECK((a.taps - b.taps).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("shadowing is a common gain") {
  ChannelParams with;
  const PowerDelayProfile p1 = sample_pdp(4, 9, with);
  PowerDelayProfile p0 = p1;
  p0.shadow_db = 0.0;
  const CVec t1 = realize_taps(p1, 3, std::nullopt, with).taps;
  const CVec t0 = realize_taps(p0, 3, std::nullopt, with).taps;
  const double g = std::sqrt(std::pow(10.0, p1.shadow_db / 10.0));
  CHECK((t1 - g * t0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((t1.cwiseAbs2() / t1.squaredNorm() - t0.cwiseAbs2() / t0.squaredNorm()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("strong line of sight concentrates power at delay zero") {
  ChannelParams params;
  params.shadow_std_db = 0.0;
  const PowerDelayProfile pdp = sample_pdp(2, 31, params);
  for (int n = 0; n < 100; ++n) {
    const CVec taps = realize_taps(pdp, static_cast<std::uint64_t>(n), 60.0, params).taps;
    const double total = taps.squaredNorm();
    CHECK(std::abs(std::norm(taps(0)) / total - 1.0) < 1e-3);
    CHECK(taps.tail(16).squaredNorm() / total < 1e-3);
  }
  // moderate factor: mean total power stays 1 and LoS share is kappa/(1+kappa)
  double total = 0.0, los_dev = 0.0;
  for (int n = 0; n < 4000; ++n) {
    const CVec taps = realize_taps(pdp, static_cast<std::uint64_t>(n), 3.0, params).taps;
    total += taps.squaredNorm();
    los_dev += taps.tail(16).squaredNorm();
  }
  const double kappa = std::pow(10.0, 0.3);
  CHECK(total / 4000 == doctest::Approx(1.0).epsilon(0.05));
  const double nlos_tail = pdp.delay_bin_powers(16).tail(16).sum() / (1.0 + kappa);
  CHECK(los_dev / 4000 == doctest::Approx(nlos_tail).epsilon(0.05));
}

TEST_CASE("client dataset pools are frozen and deterministic") {
  ChannelParams params;
  FrameConfig frame;
  const ClientSpec spec{2, 10.0, std::nullopt};
  const ClientDataset ds = build_client_dataset(spec, 500, 77, params, frame, 4);
  CHECK(ds.channel_pool().size() == 500);

  const ClientDataset again = build_client_dataset(spec, 500, 77, params, frame, 4);
  for (std::size_t c = 0; c < 500; ++c)
    CHECK((ds.channel_pool()[c].taps - again.channel_pool()[c].taps).cwiseAbs().maxCoeff() == 0.0);

  const SampleBatch b1 = ds.draw(32, 1234);
  const SampleBatch b2 = ds.draw(32, 1234);
  CHECK(b1.inputs == b2.inputs);
  CHECK(b1.data_bits == b2.data_bits);
  CHECK(b1.inputs != ds.draw(32, 1235).inputs);
  // drawing leaves the pool untouched
  for (std::size_t c = 0; c < 500; ++c)
    CHECK((ds.channel_pool()[c].taps - again.channel_pool()[c].taps).cwiseAbs().maxCoeff() == 0.0);

  REQUIRE(b1.head_bits.size() == 4);
  for (int e = 0; e < 4; ++e) CHECK(b1.head_bits[e] == b1.data_bits.middleCols(32 * e, 32));
  CHECK(b1.inputs.cols() == 256);

  CHECK_THROWS_AS(build_client_dataset(spec, 0, 77, params, frame, 4), ParameterError);
  CHECK_THROWS_AS(build_client_dataset(spec, 5, 77, params, frame, 5), SizeError);
}

TEST_CASE("pilots are shared across clients and sets") {
  ChannelParams params;
  FrameConfig frame;
  std::vector<ClientDataset> clients;
  for (int j = 0; j < 3; ++j)
    clients.push_back(build_client_dataset({j, 10.0, std::nullopt}, 10, 5, params, frame, 1));
  for (const auto& c : clients) CHECK(c.pilots() == clients.front().pilots());

  // noiseless-limit check: with a very high SNR the received pilot equals pilots x H
  const SampleBatch ev = build_evaluation_set(clients, 5, 99, 200.0, true);
  REQUIRE(ev.size() == 15);
  for (const auto& f : ev.frames) {
    const CVec h = f.freq_pilot.cwiseQuotient(clients.front().pilots());
    const CVec eq = f.freq_data.cwiseQuotient(h);
    for (int r = 0; r < 64; ++r) {
      CHECK(std::abs(std::abs(eq(r).real()) - 1.0 / std::sqrt(2.0)) < 1e-6);
    }
  }
  const SampleBatch ev2 = build_evaluation_set(clients, 5, 99, 200.0, false);
  CHECK(ev.inputs == ev2.inputs);
  CHECK(ev.client_ids == std::vector<int>({0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2}));

  const SampleBatch both = concat({ev, ev2});
  CHECK(both.size() == 30);
  CHECK(both.inputs.bottomRows(15) == ev2.inputs);
}

TEST_CASE("channel pool csv export") {
  ChannelParams params;
  const ClientDataset ds = build_client_dataset({1, 10.0, std::nullopt}, 3, 5, params, FrameConfig{}, 1);
  std::ostringstream os;
  write_channel_pool_csv(ds, os, true);
  std::istringstream is(os.str());
  std::string line;
  int lines = 0;
  std::getline(is, line);
  CHECK(line == "client,channel,delay,re,im");
  while (std::getline(is, line)) ++lines;
  CHECK(lines == 3 * 17);
}
