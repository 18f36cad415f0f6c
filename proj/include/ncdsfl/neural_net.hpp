#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ncdsfl::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation { kRelu, kNone };

/// y = act(W x + b). Stored out_dim x in_dim.
struct DenseLayer {
  MatrixXd weights;
  VectorXd bias;
  Activation activation = Activation::kRelu;
  bool frozen = false;

  int in_dim() const { return static_cast<int>(weights.cols()); }
  int out_dim() const { return static_cast<int>(weights.rows()); }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(weights.size() + bias.size());
  }
};

/// Dense backbone with two classifier heads. The output head reads the last
/// hidden layer, the auxiliary head reads the one before it. Each head has
/// 2I rows laid out as [w_{1,0}..w_{I,0}, w_{1,1}..w_{I,1}].
struct DeepSupervisedNet {
  std::vector<DenseLayer> backbone;
  DenseLayer output_head;
  DenseLayer aux_head;
  double mu = 0.0;
  double weight_decay = 0.0;
  int num_bits = 0;
  std::uint64_t seed = 0;
  std::uint64_t head_seed = 0;

  int in_dim() const { return backbone.front().in_dim(); }
  std::vector<int> layer_dims() const;
  std::size_t trainable_parameter_count() const;
};

struct NetOptions {
  double mu = 0.5;
  double nc_norm = 1.0;
  /// When set the output head is a learned linear layer (FedAvg baseline)
  /// instead of a frozen NC classifier.
  bool trainable_output_head = false;
  double weight_decay = 0.0;
};

/// layer_dims = [in, h_1, ..., h_L] with L >= 2.
DeepSupervisedNet init_net(const std::vector<int>& layer_dims, int num_bits,
                           const NetOptions& options, std::uint64_t seed);

/// Heads built from externally generated NC classifiers, shared by every
/// client of a federation.
DeepSupervisedNet init_net_with_heads(const std::vector<int>& layer_dims, int num_bits,
                                      const NetOptions& options, std::uint64_t backbone_seed,
                                      std::uint64_t head_seed);

/// Samples are rows throughout.
struct ForwardPass {
  std::vector<MatrixXd> pre;     // pre-activations of each backbone layer
  std::vector<MatrixXd> hidden;  // hidden[0] = input, hidden[o] = layer o output
  MatrixXd main_logits;          // batch x 2I
  MatrixXd aux_logits;           // batch x 2I

  const MatrixXd& penultimate() const { return hidden.back(); }
  const MatrixXd& auxiliary_features() const { return hidden[hidden.size() - 2]; }
};

ForwardPass forward(const DeepSupervisedNet& net, const MatrixXd& inputs);

/// inputs: batch x in_dim; target_bits: batch x I in {0, 1}.
struct BitBatch {
  MatrixXd inputs;
  MatrixXd target_bits;
};

/// Mean per-bit pair cross entropy of a logit matrix laid out as the heads.
double pair_cross_entropy(const MatrixXd& logits, const MatrixXd& target_bits);

double ds_loss(const DeepSupervisedNet& net, const BitBatch& batch);

struct LayerGrad {
  MatrixXd weights;
  VectorXd bias;
};

struct GradientSet {
  std::vector<LayerGrad> backbone;
  std::optional<LayerGrad> output_head;  // only when the head is trainable
  double loss = 0.0;
};

GradientSet ds_grads(const DeepSupervisedNet& net, const BitBatch& batch);

struct RmsPropConfig {
  double step_size = 1e-3;
  double decay = 0.99;
  double epsilon = 1e-8;

  bool operator==(const RmsPropConfig&) const = default;
};

struct OptimizerState {
  RmsPropConfig config;
  std::vector<LayerGrad> backbone;           // second-moment accumulators
  std::optional<LayerGrad> output_head;
};

OptimizerState make_optimizer(const DeepSupervisedNet& net, const RmsPropConfig& config);

void rmsprop_step(DeepSupervisedNet& net, const GradientSet& grads, OptimizerState& state);

/// bit i = 1 iff the w_{i,1} logit strictly exceeds the w_{i,0} logit.
MatrixXd predict_bits(const DeepSupervisedNet& net, const MatrixXd& inputs);
MatrixXd decide_bits(const MatrixXd& logits);

/// Binary checkpoint: magic, JSON header with dims/flags/seed, then the raw
/// little-endian doubles. Round-trips bit-exactly.
std::string serialize_checkpoint(const DeepSupervisedNet& net);
DeepSupervisedNet deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const DeepSupervisedNet& net, const std::string& path);
DeepSupervisedNet load_checkpoint(const std::string& path);

bool identical(const DeepSupervisedNet& a, const DeepSupervisedNet& b);

}  // namespace ncdsfl::nn
