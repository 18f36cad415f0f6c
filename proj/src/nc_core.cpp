#include "ncdsfl/nc_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "ncdsfl/errors.hpp"
#include "ncdsfl/rng.hpp"

namespace ncdsfl::nc {

namespace {

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_state(const LayerPeeledState& s, const OperatorA& op) {
  if (s.W.rows() != op.feature_dim() || s.W.cols() != 2 * op.num_bits())
    throw SizeError("W must be d x 2I");
  if (s.H.rows() != op.feature_dim() ||
      s.H.cols() != op.replication() * op.num_labels())
    throw SizeError("H must be d x K2^I");
}

// Per-(bit, column) logit differences <w_{i,1} - w_{i,0}, h_n>.
MatrixXd logit_gaps(const MatrixXd& W, const MatrixXd& H, int num_bits) {
  const MatrixXd delta = W.rightCols(num_bits) - W.leftCols(num_bits);
  return delta.transpose() * H;
}

}  // namespace

SignPattern build_sign_pattern(int num_bits) {
  if (num_bits < 1 || num_bits > kMaxSignBits)
    throw SizeError("sign pattern bit count must lie in [1, " + std::to_string(kMaxSignBits) +
                    "], got " + std::to_string(num_bits));
  const Eigen::Index labels = Eigen::Index{1} << num_bits;
  SignPattern p;
  p.num_bits = num_bits;
  p.signs.resize(num_bits, labels);
  for (Eigen::Index j = 0; j < labels; ++j)
    for (int i = 0; i < num_bits; ++i) p.signs(i, j) = ((j >> i) & 1) ? 1 : -1;
  return p;
}

OperatorA::OperatorA(SignPattern pattern, int feature_dim, int replication)
    : pattern_(std::move(pattern)), feature_dim_(feature_dim), replication_(replication) {
  if (feature_dim_ < 1 || replication_ < 1) throw SizeError("OperatorA needs d >= 1 and K >= 1");
  if (pattern_.num_bits < 1 || pattern_.signs.rows() != pattern_.num_bits)
    throw SizeError("OperatorA needs a valid sign pattern");
}

MatrixXd OperatorA::column_signs() const {
  MatrixXd s(num_bits(), static_cast<Eigen::Index>(replication_) * num_labels());
  const MatrixXd base = pattern_.signs.cast<double>();
  for (int k = 0; k < replication_; ++k) s.middleCols(k * num_labels(), num_labels()) = base;
  return s;
}

VectorXd OperatorA::apply(const VectorXd& h) const {
  if (h.size() != cols())
    throw SizeError("apply_A: expected length " + std::to_string(cols()) + ", got " +
                    std::to_string(h.size()));
  const Eigen::Map<const MatrixXd> Hm(h.data(), feature_dim_,
                                      static_cast<Eigen::Index>(replication_) * num_labels());
  const MatrixXd out = Hm * column_signs().transpose();
  return Eigen::Map<const VectorXd>(out.data(), out.size());
}

VectorXd OperatorA::apply_transpose(const VectorXd& w) const {
  if (w.size() != rows())
    throw SizeError("apply_A_transpose: expected length " + std::to_string(rows()) + ", got " +
                    std::to_string(w.size()));
  const Eigen::Map<const MatrixXd> Wm(w.data(), feature_dim_, num_bits());
  const MatrixXd out = Wm * column_signs();
  return Eigen::Map<const VectorXd>(out.data(), out.size());
}

MatrixXi OperatorA::dense() const {
  MatrixXi a = MatrixXi::Zero(rows(), cols());
  const int labels = num_labels();
  for (int i = 0; i < num_bits(); ++i)
    for (int n = 0; n < replication_ * labels; ++n)
      for (int c = 0; c < feature_dim_; ++c)
        a(i * feature_dim_ + c, n * feature_dim_ + c) = pattern_.signs(i, n % labels);
  return a;
}

NcClassifier generate_nc_weights(int num_bits, int feature_dim, double column_norm,
                                 std::uint64_t seed) {
  if (num_bits < 1) throw ParameterError("NC weights need at least one bit");
  if (num_bits > feature_dim)
    throw InfeasibleOrthogonalityError("cannot place " + std::to_string(num_bits) +
                                       " orthogonal classifiers in " +
                                       std::to_string(feature_dim) + " dimensions");
  if (!(column_norm > 0.0)) throw ParameterError("NC column norm must be positive");

  Rng rng = make_rng({seed, 0x4e43ULL});
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd g(feature_dim, num_bits);
  for (Eigen::Index c = 0; c < g.cols(); ++c)
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = normal(rng);

  Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(feature_dim, num_bits);
  // Fix the sign ambiguity of QR so the frame depends only on the seed.
  const MatrixXd r = qr.matrixQR().topRows(num_bits).triangularView<Eigen::Upper>();
  for (int i = 0; i < num_bits; ++i)
    if (r(i, i) < 0.0) q.col(i) = -q.col(i);

  NcClassifier nc;
  nc.num_bits = num_bits;
  nc.feature_dim = feature_dim;
  nc.column_norm = column_norm;
  nc.rows.resize(2 * num_bits, feature_dim);
  nc.rows.bottomRows(num_bits) = column_norm * q.transpose();
  nc.rows.topRows(num_bits) = -nc.rows.bottomRows(num_bits);
  return nc;
}

double theta_metric(const MatrixXd& W0, const MatrixXd& W1) {
  if (W0.rows() != W1.rows() || W0.cols() != W1.cols())
    throw SizeError("theta_metric: W0 and W1 shapes differ");
  const double bits = static_cast<double>(W0.cols());
  auto term = [bits](const MatrixXd& w) {
    const MatrixXd gram = w.transpose() * w;
    // Gram matrices are PSD, so the nuclear norm is the trace.
    const double nuclear = gram.trace();
    if (!(nuclear > 0.0)) throw DegenerateInputError("theta_metric: zero classifier matrix");
    return (bits * gram / nuclear - MatrixXd::Identity(gram.rows(), gram.cols())).norm();
  };
  return term(W0) + term(W1);
}

double vartheta_from_signs(const MatrixXd& W, const MatrixXd& H, const MatrixXd& label_signs) {
  const Eigen::Index bits = label_signs.rows();
  if (W.cols() != 2 * bits || W.rows() != H.rows() || H.cols() != label_signs.cols())
    throw SizeError("vartheta: inconsistent W / H / label dimensions");
  const MatrixXd delta = W.rightCols(bits) - W.leftCols(bits);
  const MatrixXd target = delta * label_signs;
  const double hn = H.norm();
  const double tn = target.norm();
  if (!(hn > 0.0) || !(tn > 0.0)) throw DegenerateInputError("vartheta: zero feature or classifier");
  return (H / hn - target / tn).norm();
}

MatrixXd nc_alignment_target(const MatrixXd& W, const OperatorA& op) {
  if (W.rows() != op.feature_dim() || W.cols() != 2 * op.num_bits())
    throw SizeError("W must be d x 2I");
  const MatrixXd delta = W.rightCols(op.num_bits()) - W.leftCols(op.num_bits());
  return delta * op.column_signs();
}

double vartheta_metric(const MatrixXd& W, const MatrixXd& H, const OperatorA& op) {
  if (H.rows() != op.feature_dim() || H.cols() != op.replication() * op.num_labels())
    throw SizeError("H must be d x K2^I");
  if (W.rows() != op.feature_dim() || W.cols() != 2 * op.num_bits())
    throw SizeError("W must be d x 2I");
  return vartheta_from_signs(W, H, op.column_signs());
}

double layer_peeled_loss(const LayerPeeledState& state, const OperatorA& op) {
  check_state(state, op);
  const int bits = op.num_bits();
  const MatrixXd phi =
      -(op.column_signs().array() * logit_gaps(state.W, state.H, bits).array()).matrix();
  double data = 0.0;
  for (Eigen::Index c = 0; c < phi.cols(); ++c)
    for (Eigen::Index r = 0; r < phi.rows(); ++r) data += softplus(phi(r, c));
  data /= static_cast<double>(phi.size());
  return state.lambda * (state.W.squaredNorm() + state.H.squaredNorm()) + data;
}

LayerPeeledGrad layer_peeled_grad(const LayerPeeledState& state, const OperatorA& op) {
  check_state(state, op);
  const int bits = op.num_bits();
  const MatrixXd signs = op.column_signs();
  const MatrixXd phi = -(signs.array() * logit_gaps(state.W, state.H, bits).array()).matrix();
  const double n = static_cast<double>(phi.size());
  // d loss / d gap(i, n) = -sign * sigmoid(phi) / N
  MatrixXd r(phi.rows(), phi.cols());
  for (Eigen::Index c = 0; c < phi.cols(); ++c)
    for (Eigen::Index i = 0; i < phi.rows(); ++i) r(i, c) = -signs(i, c) * sigmoid(phi(i, c)) / n;

  const MatrixXd delta = state.W.rightCols(bits) - state.W.leftCols(bits);
  const MatrixXd d_delta = state.H * r.transpose();

  LayerPeeledGrad g;
  g.dW.resize(state.W.rows(), state.W.cols());
  g.dW.leftCols(bits) = -d_delta;
  g.dW.rightCols(bits) = d_delta;
  g.dW += 2.0 * state.lambda * state.W;
  g.dH = delta * r + 2.0 * state.lambda * state.H;
  return g;
}

double bound_slope(int num_bits, int replication) {
  if (num_bits < 1 || replication < 1) throw ParameterError("bound_slope needs I >= 1, K >= 1");
  const double labels = std::ldexp(1.0, num_bits);
  return 1.0 / (num_bits * std::sqrt(2.0 * replication * labels));
}

double scalar_lower_bound(double rho, int num_bits, int replication, double lambda) {
  const double t = bound_slope(num_bits, replication);
  return softplus(-t * rho) + lambda * rho;
}

double rho_opt(int num_bits, int replication, double lambda) {
  if (!(lambda > 0.0)) throw ParameterError("rho_opt: lambda must be positive");
  const double t = bound_slope(num_bits, replication);
  if (lambda >= 0.5 * t) return 0.0;
  return std::log((t - lambda) / lambda) / t;
}

double optimal_loss(int num_bits, int replication, double lambda) {
  return scalar_lower_bound(rho_opt(num_bits, replication, lambda), num_bits, replication, lambda);
}

SolverResult solve_layer_peeled(int num_bits, int replication, int feature_dim, double lambda,
                                const SolverOptions& options) {
  if (!(lambda > 0.0)) throw ParameterError("solve_layer_peeled: lambda must be positive");
  if (num_bits > feature_dim)
    throw InfeasibleOrthogonalityError("solve_layer_peeled: I must not exceed d");
  if (!(options.step_size > 0.0)) throw ParameterError("solve_layer_peeled: step size must be positive");
  const OperatorA op(build_sign_pattern(num_bits), feature_dim, replication);

  Rng rng = make_rng({options.seed, 0x4c50ULL});
  std::normal_distribution<double> normal(0.0, options.init_std);
  SolverResult result;
  LayerPeeledState& s = result.state;
  s.lambda = lambda;
  s.W.resize(feature_dim, 2 * num_bits);
  s.H.resize(feature_dim, static_cast<Eigen::Index>(replication) * op.num_labels());
  for (Eigen::Index c = 0; c < s.W.cols(); ++c)
    for (Eigen::Index r = 0; r < s.W.rows(); ++r) s.W(r, c) = normal(rng);
  for (Eigen::Index c = 0; c < s.H.cols(); ++c)
    for (Eigen::Index r = 0; r < s.H.rows(); ++r) s.H(r, c) = normal(rng);

  const double initial = layer_peeled_loss(s, op);
  result.trace.reserve(static_cast<std::size_t>(std::min(options.max_iters, 1 << 20)) + 1);
  for (int it = 0; it < options.max_iters; ++it) {
    const double loss = layer_peeled_loss(s, op);
    result.trace.push_back(loss);
    if (!std::isfinite(loss) || loss > 10.0 * initial)
      throw StepSizeError("layer-peeled descent diverged at iteration " + std::to_string(it) +
                          "; reduce the step size");
    const LayerPeeledGrad g = layer_peeled_grad(s, op);
    const double gn = std::sqrt(g.dW.squaredNorm() + g.dH.squaredNorm());
    result.iterations = it;
    if (gn < options.grad_tol) {
      result.converged = true;
      return result;
    }
    s.W -= options.step_size * g.dW;
    s.H -= options.step_size * g.dH;
  }
  result.trace.push_back(layer_peeled_loss(s, op));
  result.iterations = options.max_iters;
  return result;
}

NcResidualReport check_nc(const MatrixXd& W, const MatrixXd& H, const OperatorA& op, double tol) {
  (void)tol;
  if (W.rows() != op.feature_dim() || W.cols() != 2 * op.num_bits() ||
      H.rows() != op.feature_dim() || H.cols() != op.replication() * op.num_labels())
    throw SizeError("check_nc: inconsistent dimensions");
  constexpr double kTiny = 1e-150;
  const int bits = op.num_bits();
  const int labels = op.num_labels();
  const int reps = op.replication();

  NcResidualReport rep;
  // NC1: each replica feature equals its per-label mean.
  const double hnorm = H.norm();
  double nc1 = 0.0;
  for (int j = 0; j < labels; ++j) {
    VectorXd mean = VectorXd::Zero(H.rows());
    for (int k = 0; k < reps; ++k) mean += H.col(k * labels + j);
    mean /= reps;
    for (int k = 0; k < reps; ++k) nc1 = std::max(nc1, (H.col(k * labels + j) - mean).norm());
  }
  rep.nc1_residual = nc1 / (1.0 + hnorm);

  const MatrixXd W0 = W.leftCols(bits);
  const MatrixXd W1 = W.rightCols(bits);
  double antipodal = 0.0;
  for (int i = 0; i < bits; ++i) antipodal = std::max(antipodal, (W0.col(i) + W1.col(i)).norm());

  const bool w_degenerate = !(W0.squaredNorm() > kTiny) || !(W1.squaredNorm() > kTiny);
  const bool h_degenerate = !(hnorm > std::sqrt(kTiny));
  const MatrixXd target = nc_alignment_target(W, op);
  const bool t_degenerate = !(target.norm() > std::sqrt(kTiny));
  rep.degenerate = w_degenerate || h_degenerate || t_degenerate;

  rep.nc2_residual = antipodal + (w_degenerate ? 0.0 : theta_metric(W0, W1));
  rep.nc3_residual = (h_degenerate || t_degenerate) ? 0.0 : vartheta_metric(W, H, op);
  return rep;
}

}  // namespace ncdsfl::nc
