#pragma once

#include "attmil/data.hpp"
#include "attmil/metrics.hpp"
#include "attmil/model.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <span>
#include <vector>

namespace attmil {

struct AmsGradConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coupled L2: added to the gradient as weight_decay * param.
  double weight_decay = 1e-5;

  friend bool operator==(const AmsGradConfig&, const AmsGradConfig&) = default;
};

/// Moment buffers parallel to `ModelParams::entries()`.
struct OptimState {
  AmsGradConfig hp;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::vector<Tensor> v_max;
  std::int64_t t = 0;

  static OptimState for_params(const ModelParams& params, AmsGradConfig hp = {});
};

/// One AMSGrad update:
///   g = grad + wd * p;  m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2;  v_max = max(v_max, v)
///   p -= lr * (m / (1 - b1^t)) / (sqrt(v_max / (1 - b2^t)) + eps)
/// Entries with `trainable[i] == false` are left untouched (their moments too).
/// Throws TrainingError naming the parameter on a non-finite gradient.
void amsgrad_step(ModelParams& params, std::span<const Tensor> grads, OptimState& state,
                  const std::vector<bool>& trainable = {});

/// Which parameters the objective of `cfg` can reach.
std::vector<bool> trainable_mask(const ModelParams& params, const ModelConfig& cfg);

struct TrainConfig {
  int max_epochs = 150;
  double early_stop_threshold = 0.005;
  int early_stop_patience = 5;
  std::uint64_t seed = 0;
  Index folds = 3;
  Index runs = 5;
  AmsGradConfig optimizer;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Epoch means. A loss the configuration does not compute is NaN.
struct EpochStats {
  int epoch = 0;
  double mean_mil_loss = 0.0;
  double mean_sic_loss = 0.0;
  double mean_combined_loss = 0.0;
  double sic_weight = 0.0;

  /// Loss watched by early stopping: the MIL loss, or the instance loss for
  /// the SIC-only baseline.
  double monitored() const;
};

/// One pass over `bags` in an order shuffled from (rng seed, epoch), one
/// optimiser step per bag.
EpochStats train_epoch(const ModelConfig& cfg, ModelParams& params, const Dataset& ds, std::span<const Index> bags,
                       int epoch, OptimState& optim, const Rng& rng);

/// True iff the last `patience` entries are all strictly below `threshold`.
bool should_stop(std::span<const double> history, double threshold, int patience);

using EpochCallback = std::function<void(const EpochStats&)>;

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> history;
  bool early_stopped = false;
};

/// Initialises from `seed` and trains until `max_epochs` or early stopping.
TrainResult train_model(const ModelConfig& cfg, const TrainConfig& tc, const Dataset& ds,
                        std::span<const Index> bags, std::uint64_t seed, const EpochCallback& on_epoch = {});

/// Inference-mode evaluation. Attention hit rate is filled in when the
/// dataset carries landmark annotations.
EvalReport evaluate_model(const ModelConfig& cfg, const ModelParams& params, const Dataset& ds,
                          std::span<const Index> bags);
EvalReport evaluate_model(const ModelConfig& cfg, const ModelParams& params, const Dataset& ds);

struct FoldResult {
  Index fold = 0;
  ModelParams params;
  std::vector<EpochStats> history;
  bool early_stopped = false;
  std::vector<Index> validation_bags;
  EvalReport report;
};

using FoldEpochCallback = std::function<void(Index fold, const EpochStats&)>;

/// Patient-wise k-fold: split with `tc.seed`, train one model per fold on the
/// remaining folds, evaluate on the held-out fold.
std::vector<FoldResult> run_cv(const Dataset& ds, const ModelConfig& cfg, const TrainConfig& tc,
                               const FoldEpochCallback& on_epoch = {});

struct AblationJob {
  Method method;
  Index run;
};

struct AblationResult {
  /// One entry per method in ablation order; each run holds the fold-averaged report.
  std::vector<MethodRuns> methods;
  std::vector<AblationRow> rows;
};

using AblationProgress = std::function<void(const AblationJob&, const EvalReport&)>;

/// Trains every method in ablation order for `runs` runs. Run r uses seed
/// `tc.seed + r` for both the fold split and initialisation, so all methods
/// of one run see the same folds. Jobs are isolated and may run on up to
/// `threads` threads; results do not depend on the thread count.
AblationResult run_ablation(const Dataset& ds, const ModelConfig& base, const TrainConfig& tc, Index runs,
                            unsigned threads = 1, const AblationProgress& progress = {});

}  // namespace attmil
