#include "attmil/optim.hpp"

#include "attmil/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <atomic>
#include <mutex>
#include <numeric>
#include <thread>

namespace attmil {

OptimState OptimState::for_params(const ModelParams& params, AmsGradConfig hp) {
  OptimState s;
  s.hp = hp;
  for (const auto& e : params.entries()) {
    s.m.emplace_back(e.value.shape());
    s.v.emplace_back(e.value.shape());
    s.v_max.emplace_back(e.value.shape());
  }
  return s;
}

void amsgrad_step(ModelParams& params, std::span<const Tensor> grads, OptimState& state,
                  const std::vector<bool>& trainable) {
  auto& entries = params.entries();
  if (grads.size() != entries.size() || state.m.size() != entries.size()) {
    throw DimensionError("amsgrad_step: " + std::to_string(grads.size()) + " gradients and " +
                         std::to_string(state.m.size()) + " moment buffers for " + std::to_string(entries.size()) +
                         " parameters");
  }
  const std::int64_t step = state.t + 1;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    if (grads[i].shape() != entries[i].value.shape()) {
      throw DimensionError("amsgrad_step: gradient " + shape_string(grads[i].shape()) + " for parameter '" +
                           entries[i].name + "' " + shape_string(entries[i].value.shape()));
    }
    if (!grads[i].all_finite()) {
      throw TrainingError(entries[i].name, step,
                          "non-finite gradient for '" + entries[i].name + "' at step " + std::to_string(step));
    }
  }

  const AmsGradConfig& hp = state.hp;
  const double bias1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double bias2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    auto p = entries[i].value.data().array();
    const Eigen::ArrayXd g = grads[i].data().array() + hp.weight_decay * p;
    auto m = state.m[i].data().array();
    auto v = state.v[i].data().array();
    auto vmax = state.v_max[i].data().array();
    m = hp.beta1 * m + (1.0 - hp.beta1) * g;
    v = hp.beta2 * v + (1.0 - hp.beta2) * g.square();
    vmax = vmax.max(v);
    p -= hp.learning_rate * (m / bias1) / ((vmax / bias2).sqrt() + hp.eps);
  }
  state.t = step;
}

std::vector<bool> trainable_mask(const ModelParams& params, const ModelConfig& cfg) {
  std::vector<bool> mask;
  for (const auto& e : params.entries()) {
    const std::string& n = e.name;
    bool on = n.starts_with("theta.");
    if (n.starts_with("psi.")) on = cfg.use_sic_branch;
    if (n.starts_with("phi.")) on = cfg.use_mil_branch;
    if (n.starts_with("attention.")) on = cfg.use_mil_branch && cfg.pooling == Pooling::attention;
    mask.push_back(on);
  }
  return mask;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (early_stop_patience < 1) fail("early_stop_patience must be >= 1");
  if (!(early_stop_threshold > 0.0)) fail("early_stop_threshold must be positive");
  if (folds < 1) fail("folds must be >= 1");
  if (runs < 1) fail("runs must be >= 1");
  if (!(optimizer.learning_rate >= 0.0)) fail("learning_rate must be non-negative");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) fail("beta1 must lie in [0,1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) fail("beta2 must lie in [0,1)");
  if (!(optimizer.eps > 0.0)) fail("eps must be positive");
  if (!(optimizer.weight_decay >= 0.0)) fail("weight_decay must be non-negative");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {
      {"max_epochs", cfg.max_epochs},
      {"early_stop_threshold", cfg.early_stop_threshold},
      {"early_stop_patience", cfg.early_stop_patience},
      {"seed", cfg.seed},
      {"folds", cfg.folds},
      {"runs", cfg.runs},
      {"learning_rate", cfg.optimizer.learning_rate},
      {"beta1", cfg.optimizer.beta1},
      {"beta2", cfg.optimizer.beta2},
      {"eps", cfg.optimizer.eps},
      {"weight_decay", cfg.optimizer.weight_decay},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig cfg) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "max_epochs") cfg.max_epochs = value.get<int>();
      else if (key == "early_stop_threshold") cfg.early_stop_threshold = value.get<double>();
      else if (key == "early_stop_patience") cfg.early_stop_patience = value.get<int>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "folds") cfg.folds = value.get<Index>();
      else if (key == "runs") cfg.runs = value.get<Index>();
      else if (key == "learning_rate") cfg.optimizer.learning_rate = value.get<double>();
      else if (key == "beta1") cfg.optimizer.beta1 = value.get<double>();
      else if (key == "beta2") cfg.optimizer.beta2 = value.get<double>();
      else if (key == "eps") cfg.optimizer.eps = value.get<double>();
      else if (key == "weight_decay") cfg.optimizer.weight_decay = value.get<double>();
      else throw ConfigError("train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return cfg;
}

double EpochStats::monitored() const { return std::isnan(mean_mil_loss) ? mean_sic_loss : mean_mil_loss; }

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

enum Stream : std::uint64_t { kInitStream = 1, kEpochStream = 1000, kFoldStream = 100 };

}  // namespace

EpochStats train_epoch(const ModelConfig& cfg, ModelParams& params, const Dataset& ds, std::span<const Index> bags,
                       int epoch, OptimState& optim, const Rng& rng) {
  if (bags.empty()) throw ArgumentError("train_epoch: empty training split");
  Rng epoch_rng = rng.split(kEpochStream + static_cast<std::uint64_t>(epoch));
  std::vector<Index> order(bags.begin(), bags.end());
  epoch_rng.shuffle(std::span<Index>(order));

  const bool both = cfg.use_mil_branch && cfg.use_sic_branch;
  const double w = both ? sic_weight(cfg.beta, epoch) : (cfg.use_mil_branch ? 0.0 : 1.0);
  const std::vector<bool> mask = trainable_mask(params, cfg);

  double mil_sum = 0.0, sic_sum = 0.0, combined_sum = 0.0;
  for (Index idx : order) {
    const Bag& bag = ds.bags.at(static_cast<std::size_t>(idx));
    const ParamBinding binding(params, true);
    const BagGraph g = bag_graph(bag.instances, binding, cfg, true, epoch_rng);

    Var loss;
    if (both) {
      Var l_mil = loss_mil(*g.logits, bag.label);
      Var l_sic = loss_sic(*g.sic_logits, bag.label);
      loss = loss_combined(l_mil, l_sic, cfg.beta, epoch);
      mil_sum += l_mil.item();
      sic_sum += l_sic.item();
    } else if (cfg.use_mil_branch) {
      loss = loss_mil(*g.logits, bag.label);
      mil_sum += loss.item();
    } else {
      loss = loss_sic(*g.sic_logits, bag.label);
      sic_sum += loss.item();
    }
    combined_sum += loss.item();
    backward(loss);
    amsgrad_step(params, binding.gradients(), optim, mask);
  }
  const double n = static_cast<double>(order.size());
  EpochStats s;
  s.epoch = epoch;
  s.mean_mil_loss = cfg.use_mil_branch ? mil_sum / n : kNaN;
  s.mean_sic_loss = cfg.use_sic_branch ? sic_sum / n : kNaN;
  s.mean_combined_loss = combined_sum / n;
  s.sic_weight = w;
  return s;
}

bool should_stop(std::span<const double> history, double threshold, int patience) {
  if (patience < 1 || history.size() < static_cast<std::size_t>(patience)) return false;
  return std::all_of(history.end() - patience, history.end(), [threshold](double x) { return x < threshold; });
}

TrainResult train_model(const ModelConfig& cfg, const TrainConfig& tc, const Dataset& ds,
                        std::span<const Index> bags, std::uint64_t seed, const EpochCallback& on_epoch) {
  cfg.validate();
  tc.validate();
  if (ds.instance_shape != cfg.instance_shape) {
    throw ConfigError("dataset instance shape " + ds.instance_shape.str() + " does not match model instance shape " +
                      cfg.instance_shape.str());
  }
  if (ds.num_classes != cfg.num_classes) {
    throw ConfigError("dataset has " + std::to_string(ds.num_classes) + " classes, model expects " +
                      std::to_string(cfg.num_classes));
  }
  const Rng rng(seed);
  Rng init = rng.split(kInitStream);
  TrainResult result;
  result.params = ModelParams::initialize(cfg, init);
  OptimState optim = OptimState::for_params(result.params, tc.optimizer);
  std::vector<double> monitored;
  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    EpochStats s = train_epoch(cfg, result.params, ds, bags, epoch, optim, rng);
    result.history.push_back(s);
    monitored.push_back(s.monitored());
    if (on_epoch) on_epoch(s);
    if (should_stop(monitored, tc.early_stop_threshold, tc.early_stop_patience)) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

EvalReport evaluate_model(const ModelConfig& cfg, const ModelParams& params, const Dataset& ds,
                          std::span<const Index> bags) {
  if (bags.empty()) throw ArgumentError("evaluate_model: no bags");
  std::vector<Index> labels, preds;
  Eigen::MatrixXd probs(static_cast<Index>(bags.size()), cfg.num_classes);
  std::vector<AttentionRecord> records;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const auto b = static_cast<std::size_t>(bags[i]);
    const Bag& bag = ds.bags.at(b);
    const BagOutput out = bag_forward(bag, params, cfg);
    labels.push_back(bag.label);
    preds.push_back(out.predicted);
    probs.row(static_cast<Index>(i)) = out.probabilities.transpose();
    if (ds.landmarks) records.push_back({out.attention, (*ds.landmarks)[b], bag.label, out.predicted});
  }
  return make_report(labels, preds, probs, cfg.num_classes, records);
}

EvalReport evaluate_model(const ModelConfig& cfg, const ModelParams& params, const Dataset& ds) {
  std::vector<Index> all(ds.bags.size());
  std::iota(all.begin(), all.end(), Index{0});
  return evaluate_model(cfg, params, ds, all);
}

std::vector<FoldResult> run_cv(const Dataset& ds, const ModelConfig& cfg, const TrainConfig& tc,
                               const FoldEpochCallback& on_epoch) {
  tc.validate();
  const FoldAssignment split = split_patientwise(ds, tc.folds, tc.seed);
  const Rng root(tc.seed);
  std::vector<FoldResult> out;
  for (Index f = 0; f < tc.folds; ++f) {
    FoldResult fr;
    fr.fold = f;
    fr.validation_bags = split.validation_bags(f);
    const std::vector<Index> train = split.training_bags(f);
    const std::uint64_t fold_seed = root.split(kFoldStream + static_cast<std::uint64_t>(f)).seed();
    EpochCallback cb;
    if (on_epoch) cb = [&on_epoch, f](const EpochStats& s) { on_epoch(f, s); };
    TrainResult tr = train_model(cfg, tc, ds, train, fold_seed, cb);
    fr.params = std::move(tr.params);
    fr.history = std::move(tr.history);
    fr.early_stopped = tr.early_stopped;
    fr.report = evaluate_model(cfg, fr.params, ds, fr.validation_bags);
    out.push_back(std::move(fr));
  }
  return out;
}

AblationResult run_ablation(const Dataset& ds, const ModelConfig& base, const TrainConfig& tc, Index runs,
                            unsigned threads, const AblationProgress& progress) {
  if (runs < 1) throw ConfigError("ablation needs at least one run");
  std::vector<AblationJob> jobs;
  for (Method m : kAblationOrder) {
    for (Index r = 0; r < runs; ++r) jobs.push_back({m, r});
  }
  std::vector<EvalReport> reports(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        TrainConfig run_tc = tc;
        run_tc.seed = tc.seed + static_cast<std::uint64_t>(jobs[i].run);
        const ModelConfig cfg = ModelConfig::for_method(base, jobs[i].method);
        const std::vector<FoldResult> folds = run_cv(ds, cfg, run_tc);
        std::vector<EvalReport> fold_reports;
        for (const FoldResult& f : folds) fold_reports.push_back(f.report);
        reports[i] = average_reports(fold_reports);
        if (progress) {
          std::lock_guard lock(progress_mutex);
          progress(jobs[i], reports[i]);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AblationResult out;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const std::string name(to_string(jobs[i].method));
    if (out.methods.empty() || out.methods.back().method != name) out.methods.push_back({name, {}});
    out.methods.back().runs.push_back(reports[i]);
  }
  out.rows = ablation_report(out.methods);
  return out;
}

}  // namespace attmil
