#pragma once

// Layer-peeled multi-binary classification: sign patterns, the replicated
// operator A, NC classifier construction, collapse metrics and a
// first-order solver for the regularized cross-entropy objective.

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace ncdsfl::nc {

using Eigen::MatrixXd;
using Eigen::MatrixXi;
using Eigen::VectorXd;

inline constexpr int kMaxSignBits = 20;

/// I x 2^I matrix of +-1 entries. Column j is the antipodal encoding of the
/// label whose bit i (row i, least significant first) is bit i of j.
struct SignPattern {
  int num_bits = 0;
  MatrixXi signs;

  int num_labels() const { return static_cast<int>(signs.cols()); }
};

SignPattern build_sign_pattern(int num_bits);

/// The dI x dK2^I matrix [B, ..., B] (K copies), B = signs (x) I_d, kept in
/// factored form. Columns follow the feature vectorization: replica-major,
/// then label, then feature coordinate.
class OperatorA {
 public:
  OperatorA(SignPattern pattern, int feature_dim, int replication);

  const SignPattern& pattern() const { return pattern_; }
  int num_bits() const { return pattern_.num_bits; }
  int feature_dim() const { return feature_dim_; }
  int replication() const { return replication_; }
  int num_labels() const { return pattern_.num_labels(); }
  int rows() const { return feature_dim_ * num_bits(); }
  int cols() const { return feature_dim_ * replication_ * num_labels(); }

  VectorXd apply(const VectorXd& h) const;
  VectorXd apply_transpose(const VectorXd& w) const;

  /// Dense integer form. Only meant for small sizes (tests, validation).
  MatrixXi dense() const;

  /// I x K2^I sign matrix whose column n is the label of feature column n.
  MatrixXd column_signs() const;

 private:
  SignPattern pattern_;
  int feature_dim_;
  int replication_;
};

/// Fixed classifier for I parallel binary decisions. Rows 0..I-1 hold
/// w_{i,0}, rows I..2I-1 hold w_{i,1}; w_{i,1} = -w_{i,0}, the w_{i,1}
/// are mutually orthogonal with common norm column_norm.
struct NcClassifier {
  int num_bits = 0;
  int feature_dim = 0;
  double column_norm = 1.0;
  MatrixXd rows;

  MatrixXd w0() const { return rows.topRows(num_bits).transpose(); }
  MatrixXd w1() const { return rows.bottomRows(num_bits).transpose(); }
};

NcClassifier generate_nc_weights(int num_bits, int feature_dim, double column_norm,
                                 std::uint64_t seed);

/// Variables of the layer-peeled problem. W is d x 2I with columns
/// [w_{1,0}..w_{I,0}, w_{1,1}..w_{I,1}]; H is d x K2^I, column k*2^I + j is
/// the feature of replica k for label j.
struct LayerPeeledState {
  MatrixXd W;
  MatrixXd H;
  double lambda = 0.0;
};

struct LayerPeeledGrad {
  MatrixXd dW;
  MatrixXd dH;
};

struct NcResidualReport {
  double nc1_residual = 0.0;
  double nc2_residual = 0.0;
  double nc3_residual = 0.0;
  bool degenerate = false;

  bool within(double tol) const {
    return !degenerate && nc1_residual <= tol && nc2_residual <= tol && nc3_residual <= tol;
  }
};

/// Classifier-collapse metric. The inner normalization uses the nuclear
/// norm so that an exact orthogonal equal-norm frame scores zero.
double theta_metric(const MatrixXd& W0, const MatrixXd& W1);

/// Duality metric: distance between the unit feature vector and the unit
/// alignment direction A^T(vec W1 - vec W0). Value in [0, 2].
double vartheta_metric(const MatrixXd& W, const MatrixXd& H, const OperatorA& op);

/// Same metric over an arbitrary set of labelled features. label_signs is
/// I x n (+-1), H is d x n. With the full label grid this reduces to
/// vartheta_metric.
double vartheta_from_signs(const MatrixXd& W, const MatrixXd& H, const MatrixXd& label_signs);

/// Alignment direction A^T(vec W1 - vec W0), reshaped to d x K2^I.
MatrixXd nc_alignment_target(const MatrixXd& W, const OperatorA& op);

double layer_peeled_loss(const LayerPeeledState& state, const OperatorA& op);
LayerPeeledGrad layer_peeled_grad(const LayerPeeledState& state, const OperatorA& op);

/// t = 1 / (I sqrt(2K 2^I)), the slope in the scalar lower bound
/// ln(1 + exp(-t rho)) + lambda rho.
double bound_slope(int num_bits, int replication);

/// Scalar lower bound on the layer-peeled loss as a function of
/// rho = |W|^2 + |H|^2.
double scalar_lower_bound(double rho, int num_bits, int replication, double lambda);

/// Minimizer of the scalar lower bound; zero when lambda >= t/2.
double rho_opt(int num_bits, int replication, double lambda);

/// Optimal value of the layer-peeled problem implied by rho_opt.
double optimal_loss(int num_bits, int replication, double lambda);

struct SolverOptions {
  int max_iters = 200000;
  double step_size = 1.0;
  double init_std = 0.1;
  double grad_tol = 1e-11;
  std::uint64_t seed = 0;
};

struct SolverResult {
  LayerPeeledState state;
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

SolverResult solve_layer_peeled(int num_bits, int replication, int feature_dim, double lambda,
                                const SolverOptions& options);

NcResidualReport check_nc(const MatrixXd& W, const MatrixXd& H, const OperatorA& op, double tol);

}  // namespace ncdsfl::nc
