#include "attmil/model.hpp"

#include "attmil/errors.hpp"

#include <algorithm>
#include <cmath>

namespace attmil {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::sic: return "sic";
    case Method::mil_max: return "mil_max";
    case Method::mil_max_sic: return "mil_max_sic";
    case Method::mil_att_sic: return "mil_att_sic";
  }
  return "?";
}

std::string_view to_string(Pooling p) { return p == Pooling::max ? "max" : "attention"; }

Method parse_method(std::string_view s) {
  for (Method m : kAblationOrder) {
    if (to_string(m) == s) return m;
  }
  throw ArgumentError("unknown method '" + std::string(s) + "' (expected sic|mil_max|mil_max_sic|mil_att_sic)");
}

Pooling parse_pooling(std::string_view s) {
  if (s == "max") return Pooling::max;
  if (s == "attention") return Pooling::attention;
  throw ArgumentError("unknown pooling '" + std::string(s) + "' (expected max|attention)");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.instance_shape = {4, 8, 8};
  c.embed_dim = 32;
  c.attention_hidden = 16;
  c.conv_channels = {8, 8, 8, 8, 8};
  return c;
}

ModelConfig ModelConfig::for_method(ModelConfig base, Method m) {
  switch (m) {
    case Method::sic:
      base.use_mil_branch = false;
      base.use_sic_branch = true;
      base.pooling = Pooling::max;
      break;
    case Method::mil_max:
      base.use_mil_branch = true;
      base.use_sic_branch = false;
      base.pooling = Pooling::max;
      break;
    case Method::mil_max_sic:
      base.use_mil_branch = true;
      base.use_sic_branch = true;
      base.pooling = Pooling::max;
      break;
    case Method::mil_att_sic:
      base.use_mil_branch = true;
      base.use_sic_branch = true;
      base.pooling = Pooling::attention;
      break;
  }
  return base;
}

Method ModelConfig::method() const {
  if (!use_mil_branch) return Method::sic;
  if (pooling == Pooling::attention) return Method::mil_att_sic;
  return use_sic_branch ? Method::mil_max_sic : Method::mil_max;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (instance_shape.channels < 1 || instance_shape.height < 1 || instance_shape.width < 1) {
    fail("instance_shape extents must be positive");
  }
  if (instance_shape.height < kPoolWindow || instance_shape.width < kPoolWindow) {
    fail("instance height and width must be >= " + std::to_string(kPoolWindow));
  }
  if (embed_dim < 1) fail("embed_dim must be positive");
  if (attention_hidden < 1) fail("attention_hidden must be positive");
  for (Index c : conv_channels) {
    if (c < 1) fail("conv_channels entries must be positive");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must lie in [0,1)");
  if (!(beta > 0.0 && beta < 1.0)) fail("beta must lie in (0,1)");
  if (!use_mil_branch && !use_sic_branch) fail("at least one of the MIL and SIC branches must be enabled");
}

Index ModelConfig::flattened_dim() const {
  const Index ph = (instance_shape.height - kPoolWindow) / kPoolWindow + 1;
  const Index pw = (instance_shape.width - kPoolWindow) / kPoolWindow + 1;
  return conv_channels.back() * ph * pw;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {
      {"num_classes", cfg.num_classes},
      {"instance_shape", {cfg.instance_shape.channels, cfg.instance_shape.height, cfg.instance_shape.width}},
      {"embed_dim", cfg.embed_dim},
      {"attention_hidden", cfg.attention_hidden},
      {"conv_channels", cfg.conv_channels},
      {"dropout_p", cfg.dropout_p},
      {"pooling", to_string(cfg.pooling)},
      {"use_sic_branch", cfg.use_sic_branch},
      {"use_mil_branch", cfg.use_mil_branch},
      {"beta", cfg.beta},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig cfg) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "num_classes") {
        cfg.num_classes = value.get<Index>();
      } else if (key == "instance_shape") {
        const auto v = value.get<std::vector<Index>>();
        if (v.size() != 3) throw ConfigError("model config: instance_shape needs 3 extents");
        cfg.instance_shape = {v[0], v[1], v[2]};
      } else if (key == "embed_dim") {
        cfg.embed_dim = value.get<Index>();
      } else if (key == "attention_hidden") {
        cfg.attention_hidden = value.get<Index>();
      } else if (key == "conv_channels") {
        const auto v = value.get<std::vector<Index>>();
        if (v.size() != 5) throw ConfigError("model config: conv_channels needs exactly 5 entries");
        std::copy(v.begin(), v.end(), cfg.conv_channels.begin());
      } else if (key == "dropout_p") {
        cfg.dropout_p = value.get<double>();
      } else if (key == "pooling") {
        cfg.pooling = parse_pooling(value.get<std::string>());
      } else if (key == "use_sic_branch") {
        cfg.use_sic_branch = value.get<bool>();
      } else if (key == "use_mil_branch") {
        cfg.use_mil_branch = value.get<bool>();
      } else if (key == "beta") {
        cfg.beta = value.get<double>();
      } else {
        throw ConfigError("model config: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

// Parameters -------------------------------------------------------------------

std::vector<std::pair<std::string, Shape>> ModelParams::layout(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> out;
  Index in = cfg.instance_shape.channels;
  for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
    const Index f = cfg.conv_channels[l];
    const std::string base = "theta.conv" + std::to_string(l + 1);
    out.emplace_back(base + ".kernel", Shape{f, in, ModelConfig::kKernel, ModelConfig::kKernel});
    out.emplace_back(base + ".bias", Shape{f});
    in = f;
  }
  const Index m = cfg.embed_dim, k = cfg.num_classes, l = cfg.attention_hidden;
  out.emplace_back("theta.fc.weight", Shape{m, cfg.flattened_dim()});
  out.emplace_back("theta.fc.bias", Shape{m});
  out.emplace_back("psi.weight", Shape{k, m});
  out.emplace_back("psi.bias", Shape{k});
  out.emplace_back("phi.weight", Shape{k, m});
  out.emplace_back("phi.bias", Shape{k});
  out.emplace_back("attention.V", Shape{l, m});
  out.emplace_back("attention.w", Shape{l});
  return out;
}

ModelParams ModelParams::initialize(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  for (auto& [name, shape] : layout(cfg)) {
    Tensor t(shape);
    const bool is_bias = name.ends_with(".bias");
    if (!is_bias) {
      // attention.w is a vector of fan-in L; everything else has fan-in in the trailing axes.
      const Index fan_in = shape.size() == 1 ? shape[0] : t.numel() / shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    }
    p.add(name, std::move(t));
  }
  return p;
}

std::size_t ModelParams::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw LookupError("no parameter named '" + std::string(name) + "'");
}

const Tensor& ModelParams::at(std::string_view name) const { return entries_[index_of(name)].value; }
Tensor& ModelParams::at(std::string_view name) { return entries_[index_of(name)].value; }

void ModelParams::check_against(const ModelConfig& cfg) const {
  const auto expected = layout(cfg);
  if (expected.size() != entries_.size()) {
    throw ConfigError("parameter count " + std::to_string(entries_.size()) + " does not match config (" +
                      std::to_string(expected.size()) + ")");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].first != entries_[i].name || expected[i].second != entries_[i].value.shape()) {
      throw ConfigError("parameter '" + entries_[i].name + "' " + shape_string(entries_[i].value.shape()) +
                        " does not match config ('" + expected[i].first + "' " +
                        shape_string(expected[i].second) + ")");
    }
  }
}

bool ModelParams::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(), [](const Entry& e) { return e.value.all_finite(); });
}

ParamBinding::ParamBinding(const ModelParams& params, bool trainable) {
  names_.reserve(params.size());
  leaves_.reserve(params.size());
  for (const auto& e : params.entries()) {
    names_.push_back(e.name);
    leaves_.push_back(trainable ? Var::parameter(e.value) : Var::constant(e.value));
  }
}

ParamBinding::ParamBinding(const ModelParams& layout_source, std::span<const Var> leaves)
    : leaves_(leaves.begin(), leaves.end()) {
  if (leaves.size() != layout_source.size()) throw DimensionError("binding: leaf count mismatch");
  for (const auto& e : layout_source.entries()) names_.push_back(e.name);
}

const Var& ParamBinding::operator[](std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return leaves_[i];
  }
  throw LookupError("no parameter named '" + std::string(name) + "'");
}

std::vector<Tensor> ParamBinding::gradients() const {
  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (const Var& v : leaves_) out.push_back(v.grad());
  return out;
}

// Forward pieces -----------------------------------------------------------------

Var embed_batch(const Var& instances, const ParamBinding& params, const ModelConfig& cfg, bool training,
                Rng& rng) {
  const auto& s = instances.shape();
  const InstanceShape& is = cfg.instance_shape;
  if (s.size() != 4 || s[1] != is.channels || s[2] != is.height || s[3] != is.width) {
    throw DimensionError("embed: instances " + shape_string(s) + " do not match instance shape " + is.str());
  }
  if (s[0] < 1) throw ArgumentError("embed: empty bag");
  const Index n = s[0];
  Var h = relu(conv2d(instances, params["theta.conv1.kernel"], params["theta.conv1.bias"], 1,
                      ModelConfig::kPadding));
  h = dropout(h, cfg.dropout_p, training, rng);
  for (int l = 2; l <= 5; ++l) {
    const std::string base = "theta.conv" + std::to_string(l);
    h = relu(conv2d(h, params[base + ".kernel"], params[base + ".bias"], 1, ModelConfig::kPadding));
  }
  h = maxpool2d(h, ModelConfig::kPoolWindow, ModelConfig::kPoolWindow);
  h = reshape(h, {n, cfg.flattened_dim()});
  return linear(h, params["theta.fc.weight"], params["theta.fc.bias"]);
}

Var sic_head(const Var& embeddings, const ParamBinding& params) {
  return linear(embeddings, params["psi.weight"], params["psi.bias"]);
}

Var pool_max(const Var& embeddings) {
  if (embeddings.value().rank() != 2) throw DimensionError("pool_max: expected [N x M]");
  return max_over_rows(embeddings);
}

Var attention_weights(const Var& embeddings, const Var& V, const Var& w) {
  if (embeddings.value().rank() != 2) throw DimensionError("attention_weights: expected [N x M]");
  const Index n = embeddings.shape()[0];
  const Index l = V.shape()[0];
  if (w.value().rank() != 1 || w.shape()[0] != l) {
    throw DimensionError("attention_weights: w " + shape_string(w.shape()) + " does not match V " +
                         shape_string(V.shape()));
  }
  Var hidden = tanh(linear(embeddings, V));
  Var scores = reshape(matmul(hidden, reshape(w, {l, 1})), {n});
  return softmax(scores);
}

Var pool_attention(const Var& embeddings, const Var& alpha) {
  if (embeddings.value().rank() != 2) throw DimensionError("pool_attention: expected [N x M]");
  const Index n = embeddings.shape()[0];
  if (alpha.value().rank() != 1 || alpha.shape()[0] != n) {
    throw DimensionError("pool_attention: alpha " + shape_string(alpha.shape()) + " does not match " +
                         shape_string(embeddings.shape()));
  }
  return reshape(matmul(reshape(alpha, {1, n}), embeddings), {embeddings.shape()[1]});
}

BagGraph bag_graph(const Tensor& instances, const ParamBinding& params, const ModelConfig& cfg, bool training,
                   Rng& rng) {
  if (instances.rank() != 4 || instances.dim(0) < 1) throw ArgumentError("bag_forward: empty bag");
  BagGraph g;
  g.embeddings = embed_batch(Var::constant(instances), params, cfg, training, rng);
  if (cfg.use_mil_branch) {
    Var z;
    if (cfg.pooling == Pooling::attention) {
      g.attention = attention_weights(g.embeddings, params["attention.V"], params["attention.w"]);
      z = pool_attention(g.embeddings, *g.attention);
    } else {
      z = pool_max(g.embeddings);
    }
    g.logits = dense(z, params["phi.weight"], params["phi.bias"]);
  }
  if (cfg.use_sic_branch) g.sic_logits = sic_head(g.embeddings, params);
  return g;
}

// Value-level entry points ----------------------------------------------------------

namespace {

Tensor as_tensor(const Eigen::MatrixXd& m) { return Tensor::from_matrix(m); }

Eigen::MatrixXd as_matrix(const Tensor& t) { return t.matrix(); }

Eigen::VectorXd row_softmax_mean(const Eigen::MatrixXd& logits) {
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    Eigen::VectorXd e = (logits.row(r).transpose().array() - logits.row(r).maxCoeff()).exp().matrix();
    mean += e / e.sum();
  }
  return mean / static_cast<double>(logits.rows());
}

}  // namespace

Eigen::VectorXd embed(const Tensor& instance, const ModelParams& params, const ModelConfig& cfg, bool training,
                      Rng& rng) {
  if (instance.shape() != cfg.instance_shape.shape()) {
    throw DimensionError("embed: instance " + shape_string(instance.shape()) + " does not match " +
                         cfg.instance_shape.str());
  }
  const ParamBinding binding(params, false);
  Shape batched{1};
  batched.insert(batched.end(), instance.shape().begin(), instance.shape().end());
  Var h = embed_batch(Var::constant(instance.reshaped(batched)), binding, cfg, training, rng);
  return h.value().data();
}

Eigen::VectorXd sic_forward(const Eigen::VectorXd& embedding, const ModelParams& params) {
  const Tensor& w = params.at("psi.weight");
  if (embedding.size() != w.dim(1)) {
    throw DimensionError("sic_forward: embedding of length " + std::to_string(embedding.size()) +
                         " does not match psi " + shape_string(w.shape()));
  }
  return w.matrix() * embedding + params.at("psi.bias").data();
}

Eigen::VectorXd pool_max(const Eigen::MatrixXd& embeddings) {
  if (embeddings.rows() < 1) throw ArgumentError("pool_max: empty bag");
  return pool_max(Var::constant(as_tensor(embeddings))).value().data();
}

Eigen::VectorXd attention_weights(const Eigen::MatrixXd& embeddings, const Eigen::MatrixXd& V,
                                  const Eigen::VectorXd& w) {
  if (embeddings.rows() < 1) throw ArgumentError("attention_weights: empty bag");
  return attention_weights(Var::constant(as_tensor(embeddings)), Var::constant(as_tensor(V)),
                           Var::constant(Tensor::from_vector(w)))
      .value()
      .data();
}

Eigen::VectorXd pool_attention(const Eigen::MatrixXd& embeddings, const Eigen::VectorXd& alpha) {
  if (embeddings.rows() != alpha.size()) {
    throw DimensionError("pool_attention: " + std::to_string(alpha.size()) + " weights for " +
                         std::to_string(embeddings.rows()) + " instances");
  }
  if (std::abs(alpha.sum() - 1.0) > 1e-9) throw ArgumentError("pool_attention: weights do not sum to 1");
  return pool_attention(Var::constant(as_tensor(embeddings)), Var::constant(Tensor::from_vector(alpha)))
      .value()
      .data();
}

BagOutput bag_forward(const Bag& bag, const ModelParams& params, const ModelConfig& cfg, bool training,
                      Rng& rng) {
  if (bag.size() < 1) throw ArgumentError("bag_forward: empty bag '" + bag.id + "'");
  if (bag.instance_shape() != cfg.instance_shape) {
    throw DimensionError("bag '" + bag.id + "' has instance shape " + bag.instance_shape().str() +
                         " but the model expects " + cfg.instance_shape.str());
  }
  const ParamBinding binding(params, false);
  const BagGraph g = bag_graph(bag.instances, binding, cfg, training, rng);
  const Index n = bag.size();

  BagOutput out;
  out.embeddings = as_matrix(g.embeddings.value());
  if (g.sic_logits) out.sic_logits = as_matrix(g.sic_logits->value());
  out.attention = g.attention ? g.attention->value().data()
                              : Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  if (g.logits) {
    out.logits = g.logits->value().data();
    out.probabilities = (out.logits.array() - out.logits.maxCoeff()).exp().matrix();
    out.probabilities /= out.probabilities.sum();
    out.probabilities.maxCoeff(&out.predicted);
  } else {
    // Instance-head baseline: bag scores are the mean instance probabilities.
    out.probabilities = row_softmax_mean(*out.sic_logits);
    out.logits = out.probabilities.array().log().matrix();
    out.predicted = sic_majority_vote(*out.sic_logits);
  }
  return out;
}

BagOutput bag_forward(const Bag& bag, const ModelParams& params, const ModelConfig& cfg) {
  Rng unused(0);
  return bag_forward(bag, params, cfg, false, unused);
}

// Losses -------------------------------------------------------------------------

Var loss_sic(const Var& sic_logits, Index bag_label) { return mean_cross_entropy(sic_logits, bag_label); }

Var loss_mil(const Var& logits, Index bag_label) { return cross_entropy(logits, bag_label); }

double sic_weight(double beta, int epoch) {
  if (epoch < 1) throw ArgumentError("epoch index must be >= 1, got " + std::to_string(epoch));
  return std::pow(beta, epoch);
}

Var loss_combined(const Var& l_mil, const Var& l_sic, double beta, int epoch) {
  const double w = sic_weight(beta, epoch);
  return add(scale(l_mil, 1.0 - w), scale(l_sic, w));
}

double loss_combined(double l_mil, double l_sic, double beta, int epoch) {
  const double w = sic_weight(beta, epoch);
  return (1.0 - w) * l_mil + w * l_sic;
}

Index sic_majority_vote(const Eigen::MatrixXd& sic_logits) {
  if (sic_logits.rows() < 1) throw ArgumentError("sic_majority_vote: empty bag");
  const Index k = sic_logits.cols();
  std::vector<Index> votes(static_cast<std::size_t>(k), 0);
  for (Index r = 0; r < sic_logits.rows(); ++r) {
    Index best = 0;
    sic_logits.row(r).maxCoeff(&best);
    ++votes[static_cast<std::size_t>(best)];
  }
  const Eigen::VectorXd mean_prob = row_softmax_mean(sic_logits);
  Index winner = 0;
  for (Index c = 1; c < k; ++c) {
    const auto vc = votes[static_cast<std::size_t>(c)];
    const auto vw = votes[static_cast<std::size_t>(winner)];
    if (vc > vw || (vc == vw && mean_prob[c] > mean_prob[winner])) winner = c;
  }
  return winner;
}

// Gradient checks ------------------------------------------------------------------

std::vector<GradcheckCase> model_gradcheck_cases(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.instance_shape = {2, 8, 8};
  cfg.embed_dim = 16;
  cfg.attention_hidden = 4;
  cfg.conv_channels = {3, 3, 3, 3, 3};
  cfg.pooling = Pooling::attention;
  cfg.use_sic_branch = true;

  Rng rng(seed);
  Rng init_rng = rng.split(1);
  ModelParams params = ModelParams::initialize(cfg, init_rng);
  // Non-zero biases so no relu input sits exactly on the kink.
  for (auto& e : params.entries()) {
    if (e.name.ends_with(".bias")) {
      for (Index i = 0; i < e.value.numel(); ++i) e.value[i] = rng.uniform(-0.1, 0.1);
    }
  }
  Tensor instances({3, 2, 8, 8});
  for (Index i = 0; i < instances.numel(); ++i) instances[i] = rng.normal();
  std::vector<Tensor> values;
  for (const auto& e : params.entries()) values.push_back(e.value);

  const Index label = 1;
  auto end_to_end = [cfg, params, instances, label](std::span<const Var> leaves) {
    const ParamBinding binding(params, leaves);
    Rng none(0);
    const BagGraph g = bag_graph(instances, binding, cfg, false, none);
    return loss_combined(loss_mil(*g.logits, label), loss_sic(*g.sic_logits, label), cfg.beta, 1);
  };
  auto embed_sum = [cfg, params, instances](std::span<const Var> leaves) {
    const ParamBinding binding(params, leaves);
    Rng none(0);
    return sum(embed_batch(Var::constant(instances), binding, cfg, false, none));
  };

  std::vector<GradcheckCase> cases;
  cases.push_back({"embed", [embed_sum, values] { return gradcheck(embed_sum, values); }});
  cases.push_back({"mil_attention_sic_end_to_end", [end_to_end, values] { return gradcheck(end_to_end, values); }});
  return cases;
}

}  // namespace attmil
