#include <doctest.h>

#include <cmath>
#include <random>

#include "ncdsfl/errors.hpp"
#include "ncdsfl/neural_net.hpp"

using namespace ncdsfl;
using namespace ncdsfl::nn;

namespace {

MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = n(rng);
  return m;
}

MatrixXd random_bits(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.5);
  MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = b(rng) ? 1.0 : 0.0;
  return m;
}

BitBatch random_batch(int n, int in, int bits, std::mt19937_64& rng) {
  return {gaussian(n, in, rng), random_bits(n, bits, rng)};
}

void zero_backbone(DeepSupervisedNet& net) {
  for (auto& l : net.backbone) {
    l.weights.setZero();
    l.bias.setZero();
  }
}

// Central differences over every trainable scalar, compared by global
// relative error.
double fd_relative_error(const DeepSupervisedNet& net, const BitBatch& batch, double eps) {
  const GradientSet g = ds_grads(net, batch);
  double num = 0.0, den = 0.0;
  auto probe = [&](auto&& access, double analytic) {
    DeepSupervisedNet p = net, m = net;
    access(p) += eps;
    access(m) -= eps;
    const double fd = (ds_loss(p, batch) - ds_loss(m, batch)) / (2 * eps);
    num += (fd - analytic) * (fd - analytic);
    den += fd * fd;
  };
  for (std::size_t o = 0; o < net.backbone.size(); ++o) {
    for (Eigen::Index i = 0; i < net.backbone[o].weights.size(); ++i)
      probe([&](DeepSupervisedNet& n) -> double& { return n.backbone[o].weights.data()[i]; },
            g.backbone[o].weights.data()[i]);
    for (Eigen::Index i = 0; i < net.backbone[o].bias.size(); ++i)
      probe([&](DeepSupervisedNet& n) -> double& { return n.backbone[o].bias.data()[i]; },
            g.backbone[o].bias.data()[i]);
  }
  if (g.output_head) {
    for (Eigen::Index i = 0; i < net.output_head.weights.size(); ++i)
      probe([&](DeepSupervisedNet& n) -> double& { return n.output_head.weights.data()[i]; },
            g.output_head->weights.data()[i]);
    for (Eigen::Index i = 0; i < net.output_head.bias.size(); ++i)
      probe([&](DeepSupervisedNet& n) -> double& { return n.output_head.bias.data()[i]; },
            g.output_head->bias.data()[i]);
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("init_net") {
  NetOptions opt;
  opt.mu = 0.5;
  SUBCASE("shape contract") {
    const DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 1);
    CHECK(net.output_head.weights.rows() == 4);
    CHECK(net.output_head.weights.cols() == 4);
    CHECK(net.output_head.frozen);
    CHECK(net.aux_head.weights.rows() == 4);
    CHECK(net.aux_head.weights.cols() == 8);
    CHECK(net.aux_head.frozen);
    CHECK(net.layer_dims() == std::vector<int>{4, 8, 8, 4});
  }
  SUBCASE("determinism") {
    CHECK(identical(init_net({4, 8, 8, 4}, 2, opt, 9), init_net({4, 8, 8, 4}, 2, opt, 9)));
    CHECK_FALSE(identical(init_net({4, 8, 8, 4}, 2, opt, 9), init_net({4, 8, 8, 4}, 2, opt, 10)));
  }
  SUBCASE("infeasible head") {
    CHECK_THROWS_AS(init_net({4, 8, 8, 4}, 5, opt, 1), InfeasibleOrthogonalityError);
    CHECK_THROWS_AS(init_net({4, 8, 3, 8}, 4, opt, 1), InfeasibleOrthogonalityError);
  }
  SUBCASE("heads satisfy the NC classifier invariants") {
    const DeepSupervisedNet net = init_net({6, 12, 10, 9}, 3, opt, 4);
    for (const DenseLayer* head : {&net.output_head, &net.aux_head}) {
      const MatrixXd w0 = head->weights.topRows(3), w1 = head->weights.bottomRows(3);
      CHECK((w0 + w1).norm() == 0.0);
      const MatrixXd gram = w1 * w1.transpose();
      CHECK((gram - gram(0, 0) * MatrixXd::Identity(3, 3)).norm() < 1e-12);
    }
  }
  SUBCASE("trainable head variant") {
    NetOptions fed = opt;
    fed.trainable_output_head = true;
    fed.mu = 0.0;
    const DeepSupervisedNet a = init_net({4, 8, 8, 4}, 2, fed, 1);
    const DeepSupervisedNet b = init_net({4, 8, 8, 4}, 2, opt, 1);
    CHECK_FALSE(a.output_head.frozen);
    CHECK(a.trainable_parameter_count() - b.trainable_parameter_count() ==
          a.output_head.parameter_count());
  }
}

TEST_CASE("forward") {
  NetOptions opt;
  std::mt19937_64 rng(3);
  SUBCASE("zero backbone gives zero logits") {
    DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 2);
    zero_backbone(net);
    const ForwardPass fp = forward(net, gaussian(5, 4, rng));
    CHECK(fp.main_logits.isZero(0.0));
    CHECK(fp.aux_logits.isZero(0.0));
  }
  SUBCASE("identity backbone on the positive orthant") {
    DeepSupervisedNet net = init_net({4, 4, 4}, 2, opt, 2);
    for (auto& l : net.backbone) {
      l.weights = MatrixXd::Identity(4, 4);
      l.bias.setZero();
    }
    const MatrixXd x = gaussian(6, 4, rng).cwiseAbs();
    const ForwardPass fp = forward(net, x);
    CHECK((fp.main_logits - x * net.output_head.weights.transpose()).norm() < 1e-14);
  }
  SUBCASE("batch shape and dimension errors") {
    const DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 2);
    const ForwardPass fp = forward(net, gaussian(7, 4, rng));
    CHECK(fp.main_logits.rows() == 7);
    CHECK(fp.main_logits.cols() == 4);
    CHECK(fp.aux_logits.rows() == 7);
    CHECK_THROWS_AS(forward(net, gaussian(7, 5, rng)), SizeError);
  }
}

TEST_CASE("ds_loss") {
  NetOptions opt;
  opt.mu = 0.5;
  std::mt19937_64 rng(5);
  DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 2);
  const BitBatch batch = random_batch(9, 4, 2, rng);
  SUBCASE("zero logits") {
    zero_backbone(net);
    CHECK(ds_loss(net, batch) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("mu = 0 leaves the main head only") {
    DeepSupervisedNet m0 = net;
    m0.mu = 0.0;
    const ForwardPass fp = forward(net, batch.inputs);
    CHECK(ds_loss(m0, batch) == doctest::Approx(pair_cross_entropy(fp.main_logits, batch.target_bits)));
    CHECK(ds_loss(net, batch) ==
          doctest::Approx(pair_cross_entropy(fp.main_logits, batch.target_bits) +
                          0.5 * pair_cross_entropy(fp.aux_logits, batch.target_bits)));
  }
  SUBCASE("separated logits drive the loss to zero") {
    MatrixXd bits(1, 2);
    bits << 1, 0;
    MatrixXd logits(1, 4);
    // layout [z_{1,0}, z_{2,0}, z_{1,1}, z_{2,1}]
    logits << 400, -400, -400, 400;  // both pairs favour the wrong bit
    CHECK(pair_cross_entropy(logits, bits) == doctest::Approx(800.0));
    logits << -400, 400, 400, -400;
    CHECK(pair_cross_entropy(logits, bits) < 1e-300);
  }
  SUBCASE("equals the mean logistic loss of the pair form") {
    std::mt19937_64 r2(8);
    for (int trial = 0; trial < 10; ++trial) {
      DeepSupervisedNet m0 = init_net({5, 9, 7, 6}, 3, opt, trial);
      m0.mu = 0.0;
      const BitBatch b = random_batch(11, 5, 3, r2);
      const MatrixXd h = forward(m0, b.inputs).penultimate();
      double sum = 0.0;
      for (Eigen::Index n = 0; n < h.rows(); ++n)
        for (int i = 0; i < 3; ++i) {
          const int s = static_cast<int>(b.target_bits(n, i));
          const Eigen::RowVectorXd w_other = m0.output_head.weights.row((1 - s) * 3 + i);
          const Eigen::RowVectorXd w_own = m0.output_head.weights.row(s * 3 + i);
          const double phi = (w_other - w_own).dot(h.row(n));
          sum += std::log(1.0 + std::exp(phi));
        }
      CHECK(std::abs(ds_loss(m0, b) - sum / (h.rows() * 3.0)) < 1e-12);
    }
  }
}

TEST_CASE("ds_grads match central finite differences") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    NetOptions opt;
    opt.mu = (trial % 3 == 0) ? 0.0 : 0.5;
    opt.trainable_output_head = trial % 4 == 1;
    opt.weight_decay = trial % 5 == 2 ? 1e-3 : 0.0;
    const DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 100 + trial);
    const BitBatch batch = random_batch(6, 4, 2, rng);
    CAPTURE(trial);
    CHECK(fd_relative_error(net, batch, 1e-6) < 1e-5);
  }
}

TEST_CASE("ds_grads structure") {
  std::mt19937_64 rng(14);
  NetOptions opt;
  opt.mu = 0.0;
  const DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 3);
  const BitBatch batch = random_batch(5, 4, 2, rng);
  const GradientSet g = ds_grads(net, batch);
  CHECK(g.backbone.size() == 3);
  CHECK_FALSE(g.output_head.has_value());

  SUBCASE("mu = 0: the auxiliary head has no influence") {
    DeepSupervisedNet other = net;
    other.aux_head.weights *= -3.0;
    const GradientSet g2 = ds_grads(other, batch);
    for (std::size_t o = 0; o < 3; ++o) CHECK(g.backbone[o].weights == g2.backbone[o].weights);
  }
  SUBCASE("duplicated sample gives the single-sample gradient") {
    BitBatch one{batch.inputs.topRows(1), batch.target_bits.topRows(1)};
    BitBatch two{MatrixXd(2, 4), MatrixXd(2, 2)};
    two.inputs << one.inputs, one.inputs;
    two.target_bits << one.target_bits, one.target_bits;
    const GradientSet a = ds_grads(net, one), b = ds_grads(net, two);
    for (std::size_t o = 0; o < 3; ++o)
      CHECK((a.backbone[o].weights - b.backbone[o].weights).norm() < 1e-15);
  }
}

TEST_CASE("rmsprop_step") {
  NetOptions opt;
  std::mt19937_64 rng(15);
  SUBCASE("zero gradient leaves parameters and decays accumulators") {
    DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 3);
    const DeepSupervisedNet before = net;
    OptimizerState st = make_optimizer(net, {});
    for (auto& acc : st.backbone) acc.weights.setConstant(4.0);
    GradientSet g = ds_grads(net, random_batch(3, 4, 2, rng));
    for (auto& l : g.backbone) {
      l.weights.setZero();
      l.bias.setZero();
    }
    rmsprop_step(net, g, st);
    CHECK(identical(net, before));
    CHECK(st.backbone[0].weights(0, 0) == doctest::Approx(0.99 * 4.0));
  }
  SUBCASE("first step magnitude") {
    DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 3);
    const double before = net.backbone[0].weights(1, 2);
    RmsPropConfig cfg;
    cfg.step_size = 0.01;
    OptimizerState st = make_optimizer(net, cfg);
    GradientSet g = ds_grads(net, random_batch(3, 4, 2, rng));
    for (auto& l : g.backbone) {
      l.weights.setZero();
      l.bias.setZero();
    }
    g.backbone[0].weights(1, 2) = -0.37;
    rmsprop_step(net, g, st);
    const double expected = 0.01 * 0.37 / (std::sqrt(0.01 * 0.37 * 0.37) + 1e-8);
    CHECK(net.backbone[0].weights(1, 2) - before == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.01 / std::sqrt(0.01)).epsilon(1e-6));
  }
  SUBCASE("frozen heads stay bit-identical and loss falls") {
    opt.mu = 0.5;
    DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 3);
    const DeepSupervisedNet start = net;
    const BitBatch batch = random_batch(8, 4, 2, rng);
    RmsPropConfig cfg;
    cfg.step_size = 1e-2;
    OptimizerState st = make_optimizer(net, cfg);
    const double l0 = ds_loss(net, batch);
    for (int s = 0; s < 200; ++s) rmsprop_step(net, ds_grads(net, batch), st);
    CHECK(identical(DeepSupervisedNet{start.backbone, net.output_head, net.aux_head, start.mu,
                                      start.weight_decay, start.num_bits, start.seed, start.head_seed},
                    start));
    CHECK(ds_loss(net, batch) < 0.5 * l0);
  }
}

TEST_CASE("loss decrease from the uniform neighbourhood") {
  std::mt19937_64 rng(16);
  NetOptions opt;
  opt.mu = 0.5;
  for (int trial = 0; trial < 5; ++trial) {
    DeepSupervisedNet net = init_net({6, 16, 16, 8}, 3, opt, 50 + trial);
    for (auto& l : net.backbone) l.weights *= 0.1;  // start near (1 + mu) ln 2
    const BitBatch batch = random_batch(16, 6, 3, rng);
    const double l0 = ds_loss(net, batch);
    CHECK(l0 == doctest::Approx(1.5 * std::log(2.0)).epsilon(0.05));
    RmsPropConfig cfg;
    cfg.step_size = 1e-2;
    OptimizerState st = make_optimizer(net, cfg);
    for (int s = 0; s < 200; ++s) rmsprop_step(net, ds_grads(net, batch), st);
    CHECK(ds_loss(net, batch) <= 0.5 * l0);
  }
}

TEST_CASE("predict_bits") {
  MatrixXd logits(1, 2);
  logits << 0.1, 0.9;
  CHECK(decide_bits(logits)(0, 0) == 1.0);
  logits << 0.4, 0.4;
  CHECK(decide_bits(logits)(0, 0) == 0.0);

  NetOptions opt;
  DeepSupervisedNet net = init_net({4, 8, 8, 4}, 2, opt, 2);
  zero_backbone(net);
  CHECK(predict_bits(net, MatrixXd::Zero(3, 4)).isZero(0.0));

  std::mt19937_64 rng(4);
  const DeepSupervisedNet live = init_net({4, 8, 8, 4}, 2, opt, 2);
  const MatrixXd h = forward(live, gaussian(20, 4, rng)).penultimate();
  const MatrixXd base = decide_bits(h * live.output_head.weights.transpose());
  for (double s : {1e-3, 0.5, 7.0, 1e4})
    CHECK(decide_bits((s * h) * live.output_head.weights.transpose()) == base);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  NetOptions opt;
  opt.trainable_output_head = true;
  opt.weight_decay = 1e-4;
  std::mt19937_64 rng(19);
  DeepSupervisedNet net = init_net({5, 7, 6, 4}, 2, opt, 77);
  RmsPropConfig cfg;
  cfg.step_size = 1e-2;
  OptimizerState st = make_optimizer(net, cfg);
  const BitBatch batch = random_batch(4, 5, 2, rng);
  for (int s = 0; s < 3; ++s) rmsprop_step(net, ds_grads(net, batch), st);
  const DeepSupervisedNet back = deserialize_checkpoint(serialize_checkpoint(net));
  CHECK(identical(back, net));
  CHECK(back.seed == 77);
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(net));
  CHECK_THROWS_AS(deserialize_checkpoint("garbage"), SizeError);
}
