#pragma once

#include "attmil/autodiff.hpp"
#include "attmil/bag.hpp"
#include "attmil/gradcheck.hpp"
#include "attmil/rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace attmil {

enum class Pooling { max, attention };

/// The four ablation arms.
enum class Method { sic, mil_max, mil_max_sic, mil_att_sic };

inline constexpr std::array<Method, 4> kAblationOrder{Method::sic, Method::mil_max, Method::mil_max_sic,
                                                      Method::mil_att_sic};

std::string_view to_string(Method m);
std::string_view to_string(Pooling p);
/// Accepts "sic", "mil_max", "mil_max_sic", "mil_att_sic"; throws ArgumentError otherwise.
Method parse_method(std::string_view s);
Pooling parse_pooling(std::string_view s);

/// Architecture of the embedding network, heads and pooling.
///
/// Defaults are the full-size network for 256x14x14 instances. `desk()` is a
/// proportionally shrunken network for 4x8x8 synthetic instances.
struct ModelConfig {
  Index num_classes = 5;
  InstanceShape instance_shape{256, 14, 14};
  Index embed_dim = 512;
  Index attention_hidden = 128;
  std::array<Index, 5> conv_channels{256, 128, 64, 64, 32};
  double dropout_p = 0.1;
  Pooling pooling = Pooling::attention;
  bool use_sic_branch = true;
  /// False only for the SIC baseline, which trains and predicts from the
  /// per-instance head alone (majority vote).
  bool use_mil_branch = true;
  double beta = 0.5;

  static constexpr Index kKernel = 3;
  static constexpr Index kPadding = 1;
  static constexpr Index kPoolWindow = 2;

  static ModelConfig desk();
  /// Copy of `base` with pooling/branch flags set for `m`.
  static ModelConfig for_method(ModelConfig base, Method m);
  /// Inverse of `for_method` on the flag fields.
  Method method() const;

  /// Throws ConfigError on any invariant violation.
  void validate() const;
  /// Input width of the embedding dense layer.
  Index flattened_dim() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep `base` values; unknown keys are a ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Every learnable tensor, addressed by name. Names carry the role prefix:
/// `theta.*` (embedding), `psi.*` (instance head), `phi.*` (bag head),
/// `attention.V`, `attention.w`.
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  ModelParams() = default;

  /// Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases.
  static ModelParams initialize(const ModelConfig& cfg, Rng& rng);
  /// Names and shapes, in canonical order, of the parameters `cfg` requires.
  static std::vector<std::pair<std::string, Shape>> layout(const ModelConfig& cfg);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  std::size_t index_of(std::string_view name) const;

  void add(std::string name, Tensor value) { entries_.push_back({std::move(name), std::move(value)}); }
  /// Throws ConfigError unless names and shapes match `layout(cfg)` exactly.
  void check_against(const ModelConfig& cfg) const;
  bool all_finite() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  std::vector<Entry> entries_;
};

/// Graph leaves for one forward pass, parallel to `ModelParams::entries()`.
class ParamBinding {
 public:
  ParamBinding(const ModelParams& params, bool trainable);
  /// Binds externally created leaves (used by gradient checking).
  ParamBinding(const ModelParams& layout_source, std::span<const Var> leaves);

  const Var& operator[](std::string_view name) const;
  const std::vector<Var>& leaves() const noexcept { return leaves_; }
  /// Current gradients, in parameter order.
  std::vector<Tensor> gradients() const;

 private:
  std::vector<std::string> names_;
  std::vector<Var> leaves_;
};

/// Differentiable outputs of one bag.
struct BagGraph {
  Var embeddings;                 // [N, M]
  std::optional<Var> attention;   // [N], attention pooling only
  std::optional<Var> logits;      // [K], when the MIL branch is on
  std::optional<Var> sic_logits;  // [N, K], when the SIC branch is on
};

struct BagOutput {
  Eigen::VectorXd logits;          // K
  Eigen::VectorXd probabilities;   // K
  Eigen::VectorXd attention;       // N; uniform 1/N unless attention pooling
  Eigen::MatrixXd embeddings;      // N x M
  std::optional<Eigen::MatrixXd> sic_logits;  // N x K
  Index predicted = 0;

  friend bool operator==(const BagOutput&, const BagOutput&) = default;
};

// Network pieces on graph values --------------------------------------------

/// conv1 -> relu -> dropout -> conv2..conv5 (relu) -> maxpool 2x2 -> flatten -> dense.
/// `instances` is [N, C, H, W]; result is [N, M].
Var embed_batch(const Var& instances, const ParamBinding& params, const ModelConfig& cfg, bool training,
                Rng& rng);
/// Instance head: [N, M] -> [N, K].
Var sic_head(const Var& embeddings, const ParamBinding& params);
Var pool_max(const Var& embeddings);
/// softmax_k( w^T tanh(V h_k) ).
Var attention_weights(const Var& embeddings, const Var& V, const Var& w);
/// sum_k alpha_k h_k.
Var pool_attention(const Var& embeddings, const Var& alpha);

BagGraph bag_graph(const Tensor& instances, const ParamBinding& params, const ModelConfig& cfg, bool training,
                   Rng& rng);

// Value-level entry points ----------------------------------------------------

Eigen::VectorXd embed(const Tensor& instance, const ModelParams& params, const ModelConfig& cfg, bool training,
                      Rng& rng);
Eigen::VectorXd sic_forward(const Eigen::VectorXd& embedding, const ModelParams& params);
Eigen::VectorXd pool_max(const Eigen::MatrixXd& embeddings);
Eigen::VectorXd attention_weights(const Eigen::MatrixXd& embeddings, const Eigen::MatrixXd& V,
                                  const Eigen::VectorXd& w);
/// Requires alpha to sum to 1 within 1e-9.
Eigen::VectorXd pool_attention(const Eigen::MatrixXd& embeddings, const Eigen::VectorXd& alpha);

BagOutput bag_forward(const Bag& bag, const ModelParams& params, const ModelConfig& cfg, bool training, Rng& rng);
/// Inference-mode forward (no dropout, no randomness).
BagOutput bag_forward(const Bag& bag, const ModelParams& params, const ModelConfig& cfg);

// Losses ----------------------------------------------------------------------

Var loss_sic(const Var& sic_logits, Index bag_label);
Var loss_mil(const Var& logits, Index bag_label);
/// Weight on the instance loss at epoch E (E >= 1): beta^E.
double sic_weight(double beta, int epoch);
Var loss_combined(const Var& l_mil, const Var& l_sic, double beta, int epoch);
double loss_combined(double l_mil, double l_sic, double beta, int epoch);

/// Per-instance argmax, then the modal class. Ties: higher mean softmax
/// probability, then lower class index.
Index sic_majority_vote(const Eigen::MatrixXd& sic_logits);

/// End-to-end gradient check on a tiny attention+SIC network, dropout off.
std::vector<GradcheckCase> model_gradcheck_cases(std::uint64_t seed = 11);

}  // namespace attmil
