#include "ncdsfl/neural_net.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "ncdsfl/errors.hpp"
#include "ncdsfl/nc_core.hpp"
#include "ncdsfl/rng.hpp"

namespace ncdsfl::nn {

namespace {

using Eigen::ArrayXXd;

constexpr char kMagic[8] = {'N', 'C', 'D', 'S', 'C', 'K', 'P', '1'};

ArrayXXd softplus(const ArrayXXd& x) { return x.max(0.0) + (-x.abs()).exp().log1p(); }

ArrayXXd sigmoid(const ArrayXXd& x) {
  // exp(-|x|) keeps both branches finite.
  const ArrayXXd e = (-x.abs()).exp();
  return (x >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
}

// Signed gap (1 - 2s)(z1 - z0): each bit's loss is softplus of it.
ArrayXXd signed_gaps(const MatrixXd& logits, const MatrixXd& target_bits) {
  const Eigen::Index bits = target_bits.cols();
  const ArrayXXd gap = (logits.rightCols(bits) - logits.leftCols(bits)).array();
  return (1.0 - 2.0 * target_bits.array()) * gap;
}

// Gradient of the mean pair cross entropy w.r.t. the 2I logits, scaled.
MatrixXd pair_logit_grad(const MatrixXd& logits, const MatrixXd& target_bits, double scale) {
  const Eigen::Index bits = target_bits.cols();
  const ArrayXXd sgn = 1.0 - 2.0 * target_bits.array();
  const double n = static_cast<double>(target_bits.size());
  const MatrixXd d_gap = (scale / n) * (sgn * sigmoid(signed_gaps(logits, target_bits))).matrix();
  MatrixXd out(logits.rows(), logits.cols());
  out.leftCols(bits) = -d_gap;
  out.rightCols(bits) = d_gap;
  return out;
}

MatrixXd affine(const DenseLayer& layer, const MatrixXd& x) {
  MatrixXd z = x * layer.weights.transpose();
  z.rowwise() += layer.bias.transpose();
  return z;
}

MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std);
  MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal(rng);
  return m;
}

DenseLayer nc_head(int num_bits, int feature_dim, double norm, std::uint64_t seed) {
  const nc::NcClassifier nc = nc::generate_nc_weights(num_bits, feature_dim, norm, seed);
  DenseLayer head;
  head.weights = nc.rows;
  head.bias = VectorXd::Zero(2 * num_bits);
  head.activation = Activation::kNone;
  head.frozen = true;
  return head;
}

void check_batch(const DeepSupervisedNet& net, const BitBatch& batch) {
  if (batch.inputs.cols() != net.in_dim())
    throw SizeError("batch input width " + std::to_string(batch.inputs.cols()) +
                    " does not match network input " + std::to_string(net.in_dim()));
  if (batch.target_bits.rows() != batch.inputs.rows() || batch.target_bits.cols() != net.num_bits)
    throw SizeError("target bits must be batch x I");
}

LayerGrad zeros_like(const DenseLayer& layer) {
  return {MatrixXd::Zero(layer.weights.rows(), layer.weights.cols()),
          VectorXd::Zero(layer.bias.size())};
}

void rmsprop_update(DenseLayer& layer, const LayerGrad& g, LayerGrad& acc,
                    const RmsPropConfig& cfg) {
  acc.weights.array() =
      cfg.decay * acc.weights.array() + (1.0 - cfg.decay) * g.weights.array().square();
  acc.bias.array() = cfg.decay * acc.bias.array() + (1.0 - cfg.decay) * g.bias.array().square();
  layer.weights.array() -=
      cfg.step_size * g.weights.array() / (acc.weights.array().sqrt() + cfg.epsilon);
  layer.bias.array() -= cfg.step_size * g.bias.array() / (acc.bias.array().sqrt() + cfg.epsilon);
}

nlohmann::json layer_header(const DenseLayer& l) {
  return {{"in", l.in_dim()},
          {"out", l.out_dim()},
          {"activation", l.activation == Activation::kRelu ? "relu" : "none"},
          {"frozen", l.frozen}};
}

void append_doubles(std::string& out, const double* data, Eigen::Index n) {
  static_assert(std::endian::native == std::endian::little, "checkpoint assumes little endian");
  out.append(reinterpret_cast<const char*>(data), static_cast<std::size_t>(n) * sizeof(double));
}

DenseLayer read_layer(const nlohmann::json& h, const std::string& bytes, std::size_t& offset) {
  DenseLayer l;
  const int in = h.at("in"), out = h.at("out");
  l.activation = h.at("activation") == "relu" ? Activation::kRelu : Activation::kNone;
  l.frozen = h.at("frozen");
  l.weights.resize(out, in);
  l.bias.resize(out);
  const std::size_t nw = static_cast<std::size_t>(out) * in * sizeof(double);
  const std::size_t nb = static_cast<std::size_t>(out) * sizeof(double);
  if (offset + nw + nb > bytes.size()) throw SizeError("checkpoint truncated");
  std::memcpy(l.weights.data(), bytes.data() + offset, nw);
  offset += nw;
  std::memcpy(l.bias.data(), bytes.data() + offset, nb);
  offset += nb;
  return l;
}

bool same_layer(const DenseLayer& a, const DenseLayer& b) {
  return a.activation == b.activation && a.frozen == b.frozen &&
         a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols() &&
         a.bias.size() == b.bias.size() &&
         std::memcmp(a.weights.data(), b.weights.data(), a.weights.size() * sizeof(double)) == 0 &&
         std::memcmp(a.bias.data(), b.bias.data(), a.bias.size() * sizeof(double)) == 0;
}

}  // namespace

std::vector<int> DeepSupervisedNet::layer_dims() const {
  std::vector<int> dims{in_dim()};
  for (const auto& l : backbone) dims.push_back(l.out_dim());
  return dims;
}

std::size_t DeepSupervisedNet::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : backbone) n += l.parameter_count();
  if (!output_head.frozen) n += output_head.parameter_count();
  return n;
}

DeepSupervisedNet init_net_with_heads(const std::vector<int>& layer_dims, int num_bits,
                                      const NetOptions& options, std::uint64_t backbone_seed,
                                      std::uint64_t head_seed) {
  if (layer_dims.size() < 3)
    throw SizeError("need an input and at least two hidden layers for deep supervision");
  for (int d : layer_dims)
    if (d < 1) throw SizeError("layer widths must be positive");
  if (options.mu < 0.0) throw ParameterError("mu must be nonnegative");

  const int last = layer_dims.back();
  const int second_last = layer_dims[layer_dims.size() - 2];
  DeepSupervisedNet net;
  net.mu = options.mu;
  net.weight_decay = options.weight_decay;
  net.num_bits = num_bits;
  net.seed = backbone_seed;
  net.head_seed = head_seed;

  Rng rng = make_rng({backbone_seed, 0x424bULL});
  for (std::size_t o = 1; o < layer_dims.size(); ++o) {
    DenseLayer l;
    const double he = std::sqrt(2.0 / layer_dims[o - 1]);
    l.weights = gaussian(layer_dims[o], layer_dims[o - 1], he, rng);
    l.bias = VectorXd::Zero(layer_dims[o]);
    l.activation = Activation::kRelu;
    net.backbone.push_back(std::move(l));
  }

  net.aux_head = nc_head(num_bits, second_last, options.nc_norm, derive_seed({head_seed, 2}));
  if (options.trainable_output_head) {
    net.output_head.weights = gaussian(2 * num_bits, last, std::sqrt(1.0 / last), rng);
    net.output_head.bias = VectorXd::Zero(2 * num_bits);
    net.output_head.activation = Activation::kNone;
    net.output_head.frozen = false;
  } else {
    net.output_head = nc_head(num_bits, last, options.nc_norm, derive_seed({head_seed, 1}));
  }
  return net;
}

DeepSupervisedNet init_net(const std::vector<int>& layer_dims, int num_bits,
                           const NetOptions& options, std::uint64_t seed) {
  return init_net_with_heads(layer_dims, num_bits, options, seed, derive_seed({seed, 0x4844ULL}));
}

ForwardPass forward(const DeepSupervisedNet& net, const MatrixXd& inputs) {
  if (inputs.cols() != net.in_dim())
    throw SizeError("input width " + std::to_string(inputs.cols()) + " does not match network input " +
                    std::to_string(net.in_dim()));
  ForwardPass fp;
  fp.hidden.reserve(net.backbone.size() + 1);
  fp.pre.reserve(net.backbone.size());
  fp.hidden.push_back(inputs);
  for (const auto& layer : net.backbone) {
    fp.pre.push_back(affine(layer, fp.hidden.back()));
    if (layer.activation == Activation::kRelu)
      fp.hidden.push_back(fp.pre.back().cwiseMax(0.0));
    else
      fp.hidden.push_back(fp.pre.back());
  }
  fp.main_logits = affine(net.output_head, fp.penultimate());
  fp.aux_logits = affine(net.aux_head, fp.auxiliary_features());
  return fp;
}

double pair_cross_entropy(const MatrixXd& logits, const MatrixXd& target_bits) {
  if (logits.cols() != 2 * target_bits.cols() || logits.rows() != target_bits.rows())
    throw SizeError("logits must be batch x 2I for batch x I targets");
  return softplus(signed_gaps(logits, target_bits)).mean();
}

double ds_loss(const DeepSupervisedNet& net, const BitBatch& batch) {
  check_batch(net, batch);
  const ForwardPass fp = forward(net, batch.inputs);
  double loss = pair_cross_entropy(fp.main_logits, batch.target_bits);
  if (net.mu > 0.0) loss += net.mu * pair_cross_entropy(fp.aux_logits, batch.target_bits);
  if (net.weight_decay > 0.0)
    for (const auto& l : net.backbone) loss += net.weight_decay * l.weights.squaredNorm();
  return loss;
}

GradientSet ds_grads(const DeepSupervisedNet& net, const BitBatch& batch) {
  check_batch(net, batch);
  const ForwardPass fp = forward(net, batch.inputs);
  const std::size_t depth = net.backbone.size();

  GradientSet g;
  g.loss = pair_cross_entropy(fp.main_logits, batch.target_bits);
  const MatrixXd d_main = pair_logit_grad(fp.main_logits, batch.target_bits, 1.0);
  if (!net.output_head.frozen) {
    LayerGrad head;
    head.weights = d_main.transpose() * fp.penultimate();
    head.bias = d_main.colwise().sum().transpose();
    g.output_head = std::move(head);
  }

  MatrixXd d_hidden = d_main * net.output_head.weights;
  g.backbone.resize(depth);
  for (std::size_t o = depth; o-- > 0;) {
    const DenseLayer& layer = net.backbone[o];
    if (o + 2 == depth && net.mu > 0.0) {
      g.loss += net.mu * pair_cross_entropy(fp.aux_logits, batch.target_bits);
      d_hidden += pair_logit_grad(fp.aux_logits, batch.target_bits, net.mu) * net.aux_head.weights;
    }
    MatrixXd d_pre = d_hidden;
    if (layer.activation == Activation::kRelu)
      d_pre = (fp.pre[o].array() > 0.0).select(d_hidden, 0.0);
    g.backbone[o].weights = d_pre.transpose() * fp.hidden[o];
    g.backbone[o].bias = d_pre.colwise().sum().transpose();
    if (net.weight_decay > 0.0) {
      g.backbone[o].weights += 2.0 * net.weight_decay * layer.weights;
      g.loss += net.weight_decay * layer.weights.squaredNorm();
    }
    if (o > 0) d_hidden = d_pre * layer.weights;
  }
  return g;
}

OptimizerState make_optimizer(const DeepSupervisedNet& net, const RmsPropConfig& config) {
  if (!(config.step_size > 0.0) || !(config.decay > 0.0 && config.decay < 1.0) ||
      !(config.epsilon > 0.0))
    throw ParameterError("RMSprop needs step_size > 0, decay in (0,1), epsilon > 0");
  OptimizerState s;
  s.config = config;
  for (const auto& l : net.backbone) s.backbone.push_back(zeros_like(l));
  if (!net.output_head.frozen) s.output_head = zeros_like(net.output_head);
  return s;
}

void rmsprop_step(DeepSupervisedNet& net, const GradientSet& grads, OptimizerState& state) {
  if (grads.backbone.size() != net.backbone.size() || state.backbone.size() != net.backbone.size())
    throw SizeError("gradient set does not match the network");
  for (std::size_t o = 0; o < net.backbone.size(); ++o) {
    if (net.backbone[o].frozen) continue;
    rmsprop_update(net.backbone[o], grads.backbone[o], state.backbone[o], state.config);
  }
  if (!net.output_head.frozen) {
    if (!grads.output_head || !state.output_head)
      throw SizeError("trainable output head is missing its gradient or accumulator");
    rmsprop_update(net.output_head, *grads.output_head, *state.output_head, state.config);
  }
}

MatrixXd decide_bits(const MatrixXd& logits) {
  const Eigen::Index bits = logits.cols() / 2;
  return (logits.rightCols(bits).array() > logits.leftCols(bits).array()).cast<double>().matrix();
}

MatrixXd predict_bits(const DeepSupervisedNet& net, const MatrixXd& inputs) {
  return decide_bits(forward(net, inputs).main_logits);
}

std::string serialize_checkpoint(const DeepSupervisedNet& net) {
  nlohmann::json header;
  header["num_bits"] = net.num_bits;
  header["mu"] = net.mu;
  header["weight_decay"] = net.weight_decay;
  header["seed"] = net.seed;
  header["head_seed"] = net.head_seed;
  header["backbone"] = nlohmann::json::array();
  for (const auto& l : net.backbone) header["backbone"].push_back(layer_header(l));
  header["output_head"] = layer_header(net.output_head);
  header["aux_head"] = layer_header(net.aux_head);
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += text;
  auto put = [&out](const DenseLayer& l) {
    append_doubles(out, l.weights.data(), l.weights.size());
    append_doubles(out, l.bias.data(), l.bias.size());
  };
  for (const auto& l : net.backbone) put(l);
  put(net.output_head);
  put(net.aux_head);
  return out;
}

DeepSupervisedNet deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw SizeError("not a checkpoint");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  std::size_t offset = sizeof(kMagic) + sizeof(len);
  if (offset + len > bytes.size()) throw SizeError("checkpoint truncated");
  const nlohmann::json header = nlohmann::json::parse(bytes.substr(offset, len));
  offset += len;

  DeepSupervisedNet net;
  net.num_bits = header.at("num_bits");
  net.mu = header.at("mu");
  net.weight_decay = header.at("weight_decay");
  net.seed = header.at("seed");
  net.head_seed = header.at("head_seed");
  for (const auto& h : header.at("backbone")) net.backbone.push_back(read_layer(h, bytes, offset));
  net.output_head = read_layer(header.at("output_head"), bytes, offset);
  net.aux_head = read_layer(header.at("aux_head"), bytes, offset);
  if (offset != bytes.size()) throw SizeError("trailing bytes in checkpoint");
  return net;
}

void save_checkpoint(const DeepSupervisedNet& net, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(net);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

DeepSupervisedNet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

bool identical(const DeepSupervisedNet& a, const DeepSupervisedNet& b) {
  if (a.backbone.size() != b.backbone.size() || a.num_bits != b.num_bits || a.mu != b.mu)
    return false;
  for (std::size_t i = 0; i < a.backbone.size(); ++i)
    if (!same_layer(a.backbone[i], b.backbone[i])) return false;
  return same_layer(a.output_head, b.output_head) && same_layer(a.aux_head, b.aux_head);
}

}  // namespace ncdsfl::nn
