#include "attmil/cli.hpp"

#include "attmil/binio.hpp"
#include "attmil/checkpoint.hpp"
#include "attmil/errors.hpp"
#include "attmil/gradcheck.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

namespace attmil {

namespace fs = std::filesystem;
using nlohmann::json;

// RunConfig ----------------------------------------------------------------------

void RunConfig::validate() const {
  model.validate();
  train.validate();
  try {
    generator.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (patients_per_class < 1) throw ConfigError("generator config: patients_per_class must be >= 1");
  if (bags_per_patient < 1) throw ConfigError("generator config: bags_per_patient must be >= 1");
}

json to_json(const RunConfig& cfg) {
  json gen = to_json(cfg.generator);
  gen["patients_per_class"] = cfg.patients_per_class;
  gen["bags_per_patient"] = cfg.bags_per_patient;
  return {
      {"model", to_json(cfg.model)},
      {"train", to_json(cfg.train)},
      {"generator", gen},
      {"paths",
       {{"dataset", cfg.paths.dataset}, {"output_dir", cfg.paths.output_dir}, {"checkpoint", cfg.paths.checkpoint}}},
  };
}

RunConfig run_config_from_json(const json& j, RunConfig cfg) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "model") {
        cfg.model = model_config_from_json(value, cfg.model);
      } else if (key == "train") {
        cfg.train = train_config_from_json(value, cfg.train);
      } else if (key == "generator") {
        if (!value.is_object()) throw ConfigError("generator config must be a JSON object");
        json rest = value;
        if (rest.contains("patients_per_class")) {
          cfg.patients_per_class = rest["patients_per_class"].get<Index>();
          rest.erase("patients_per_class");
        }
        if (rest.contains("bags_per_patient")) {
          cfg.bags_per_patient = rest["bags_per_patient"].get<Index>();
          rest.erase("bags_per_patient");
        }
        cfg.generator = generator_config_from_json(rest, cfg.generator);
      } else if (key == "paths") {
        if (!value.is_object()) throw ConfigError("paths must be a JSON object");
        for (const auto& [pk, pv] : value.items()) {
          if (pk == "dataset") cfg.paths.dataset = pv.get<std::string>();
          else if (pk == "output_dir") cfg.paths.output_dir = pv.get<std::string>();
          else if (pk == "checkpoint") cfg.paths.checkpoint = pv.get<std::string>();
          else throw ConfigError("paths: unknown key '" + pk + "'");
        }
      } else {
        throw ConfigError("run config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = binio::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config '" + path + "': " + e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[digest[i] >> 4];
    hex += kHex[digest[i] & 0xf];
  }
  return hex;
}

namespace {

// Run directory with a manifest of every file written through it.
class RunDir {
 public:
  explicit RunDir(std::string root) : root_(std::move(root)) { fs::create_directories(root_); }

  const std::string& root() const { return root_; }

  void write(const std::string& relative, std::string_view contents) {
    const fs::path p = fs::path(root_) / relative;
    fs::create_directories(p.parent_path());
    binio::write_file(p.string(), contents);
    artifacts_[relative] = {{"bytes", contents.size()}, {"sha256", sha256_hex(contents)}};
  }

  void write_json(const std::string& relative, const json& j) { write(relative, j.dump(2) + "\n"); }

  void finish(const std::string& command, const RunConfig& cfg, const json& inputs = json::object()) {
    json manifest = {
        {"command", command},
        {"seed", cfg.train.seed},
        {"generator_seed", cfg.generator.seed},
        {"config", to_json(cfg)},
        {"inputs", inputs},
        {"artifacts", artifacts_},
    };
    binio::write_file((fs::path(root_) / "manifest.json").string(), manifest.dump(2) + "\n");
  }

 private:
  std::string root_;
  json artifacts_ = json::object();
};

json file_digest(const std::string& path) {
  const std::string bytes = binio::read_file(path);
  return {{"path", path}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}};
}

std::string number(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

std::string epoch_csv(const std::vector<EpochStats>& history) {
  std::string s = "epoch,mil_loss,sic_loss,combined_loss,sic_weight\n";
  for (const auto& e : history) {
    s += std::to_string(e.epoch) + ',' + number(e.mean_mil_loss) + ',' + number(e.mean_sic_loss) + ',' +
         number(e.mean_combined_loss) + ',' + number(e.sic_weight) + '\n';
  }
  return s;
}

std::string fixed(double x, int precision = 3) {
  if (!std::isfinite(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, x);
  return buf;
}

unsigned ablation_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ATTMIL_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v < 1) throw ConfigError("ATTMIL_THREADS must be a positive integer");
      n = static_cast<unsigned>(v);
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("ATTMIL_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return n;
}

void check_compatible(const ModelConfig& cfg, const Dataset& ds) {
  if (cfg.instance_shape != ds.instance_shape) {
    throw ConfigError("model expects instance shape " + cfg.instance_shape.str() + " but dataset has " +
                      ds.instance_shape.str());
  }
  if (cfg.num_classes != ds.num_classes) {
    throw ConfigError("model expects " + std::to_string(cfg.num_classes) + " classes but dataset has " +
                      std::to_string(ds.num_classes));
  }
}

// Shared flag overrides. Flags win over the config file.
struct Common {
  std::string config_path;
  std::optional<std::string> data, out, checkpoint;
  std::optional<std::uint64_t> seed;

  RunConfig load() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (data) cfg.paths.dataset = *data;
    if (out) cfg.paths.output_dir = *out;
    if (checkpoint) cfg.paths.checkpoint = *checkpoint;
    return cfg;
  }
};

void add_config(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run config");
}

// Commands ------------------------------------------------------------------------

struct GenerateOpts {
  Common common;
  std::optional<Index> patients_per_class, bags_per_patient;
};

int cmd_generate(const GenerateOpts& o, std::ostream& out) {
  RunConfig cfg = o.common.load();
  if (o.common.seed) cfg.generator.seed = *o.common.seed;
  if (o.patients_per_class) cfg.patients_per_class = *o.patients_per_class;
  if (o.bags_per_patient) cfg.bags_per_patient = *o.bags_per_patient;
  cfg.validate();

  const Dataset ds = generate_dataset(cfg.generator, cfg.patients_per_class, cfg.bags_per_patient);
  RunDir dir(cfg.paths.output_dir);
  cfg.paths.dataset = (fs::path(dir.root()) / "dataset.milb").string();
  dir.write("dataset.milb", encode_bagfile(ds));
  dir.write_json("config.json", to_json(cfg));
  dir.finish("generate", cfg);

  Index instances = 0;
  for (const Bag& b : ds.bags) instances += b.size();
  out << "classes " << ds.num_classes << ", patients " << ds.num_classes * cfg.patients_per_class << ", bags " << ds.bags.size()
      << ", instances " << instances << "\n";
  out << "wrote " << cfg.paths.dataset << "\n";
  return kExitOk;
}

struct TrainOpts {
  Common common;
  std::optional<std::string> method;
  std::optional<Index> folds;
  std::optional<int> max_epochs;
};

void apply_train_overrides(RunConfig& cfg, const Common& c, std::optional<Index> folds,
                           std::optional<int> max_epochs) {
  if (c.seed) cfg.train.seed = *c.seed;
  if (folds) cfg.train.folds = *folds;
  if (max_epochs) cfg.train.max_epochs = *max_epochs;
}

int cmd_train(const TrainOpts& o, std::ostream& out) {
  RunConfig cfg = o.common.load();
  apply_train_overrides(cfg, o.common, o.folds, o.max_epochs);
  const Method method = parse_method(o.method.value_or("mil_att_sic"));
  cfg.model = ModelConfig::for_method(cfg.model, method);
  cfg.validate();

  const Dataset ds = read_bagfile(cfg.paths.dataset);
  check_compatible(cfg.model, ds);
  RunDir dir(cfg.paths.output_dir);
  dir.write_json("config.json", to_json(cfg));

  const std::vector<FoldResult> folds = run_cv(ds, cfg.model, cfg.train);
  json fold_reports = json::array();
  std::vector<EvalReport> reports;
  for (const FoldResult& f : folds) {
    const std::string sub = "fold" + std::to_string(f.fold) + "/";
    dir.write(sub + "checkpoint.amil", encode_checkpoint({cfg.model, f.params}));
    dir.write(sub + "epochs.csv", epoch_csv(f.history));
    json report = to_json(f.report);
    report["fold"] = f.fold;
    report["epochs"] = f.history.size();
    report["early_stopped"] = f.early_stopped;
    dir.write_json(sub + "report.json", report);
    fold_reports.push_back(report);
    reports.push_back(f.report);
    out << "fold " << f.fold << ": epochs " << f.history.size() << (f.early_stopped ? " (early stop)" : "")
        << ", accuracy " << fixed(f.report.accuracy) << ", f1_macro " << fixed(f.report.f1_macro) << ", auroc "
        << fixed(f.report.auroc_mean) << "\n";
  }
  const EvalReport mean = average_reports(reports);
  dir.write_json("report.json", {{"method", to_string(method)}, {"mean", to_json(mean)}, {"folds", fold_reports}});
  dir.finish("train", cfg, {{"dataset", file_digest(cfg.paths.dataset)}});
  out << to_string(method) << " mean accuracy " << fixed(mean.accuracy) << ", f1_weighted "
      << fixed(mean.f1_weighted) << ", auroc " << fixed(mean.auroc_mean) << "\n";
  return kExitOk;
}

int cmd_evaluate(const Common& o, std::ostream& out) {
  RunConfig cfg = o.load();
  if (cfg.paths.checkpoint.empty()) throw ConfigError("evaluate: no checkpoint given (--checkpoint)");
  const Checkpoint ckpt = read_checkpoint(cfg.paths.checkpoint);
  cfg.model = ckpt.config;
  cfg.validate();
  const Dataset ds = read_bagfile(cfg.paths.dataset);
  check_compatible(ckpt.config, ds);

  const EvalReport report = evaluate_model(ckpt.config, ckpt.params, ds);
  RunDir dir(cfg.paths.output_dir);
  dir.write_json("config.json", to_json(cfg));
  dir.write_json("report.json", to_json(report));
  dir.finish("evaluate", cfg,
             {{"dataset", file_digest(cfg.paths.dataset)}, {"checkpoint", file_digest(cfg.paths.checkpoint)}});
  out << "bags " << report.bag_count << ", accuracy " << fixed(report.accuracy) << ", f1_macro "
      << fixed(report.f1_macro) << ", f1_weighted " << fixed(report.f1_weighted) << ", auroc "
      << fixed(report.auroc_mean) << ", auprc " << fixed(report.auprc_mean);
  if (report.attention_hit_rate) out << ", attention_hit " << fixed(*report.attention_hit_rate);
  out << "\n";
  return kExitOk;
}

struct AttendOpts {
  Common common;
  std::string bag_id;
  Index top = 8;
};

int cmd_attend(const AttendOpts& o, std::ostream& out) {
  RunConfig cfg = o.common.load();
  if (cfg.paths.checkpoint.empty()) throw ConfigError("attend: no checkpoint given (--checkpoint)");
  if (o.top < 1) throw ConfigError("attend: --top must be >= 1");
  const Checkpoint ckpt = read_checkpoint(cfg.paths.checkpoint);
  cfg.model = ckpt.config;
  const Dataset ds = read_bagfile(cfg.paths.dataset);
  check_compatible(ckpt.config, ds);

  const Index b = ds.find_index(o.bag_id);
  const Bag& bag = ds.bags[static_cast<std::size_t>(b)];
  const BagOutput result = bag_forward(bag, ckpt.params, ckpt.config);

  std::vector<Index> order(static_cast<std::size_t>(bag.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index c) { return result.attention[a] > result.attention[c]; });
  const Index shown = std::min(o.top, bag.size());
  json ranking = json::array();
  for (Index r = 0; r < shown; ++r) {
    const Index i = order[static_cast<std::size_t>(r)];
    json entry = {{"rank", r + 1}, {"instance", i}, {"score", result.attention[i]}};
    if (ds.landmarks) entry["landmark"] = (*ds.landmarks)[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)] != 0;
    ranking.push_back(entry);
  }
  const json doc = {
      {"bag_id", bag.id},
      {"patient_id", bag.patient_id},
      {"label", bag.label},
      {"predicted", result.predicted},
      {"pooling", to_string(ckpt.config.pooling)},
      {"bag_size", bag.size()},
      {"attention_sum", result.attention.sum()},
      {"top", ranking},
  };
  out << doc.dump(2) << "\n";
  if (!o.common.out) return kExitOk;
  RunDir dir(cfg.paths.output_dir);
  dir.write_json("attention_" + bag.id + ".json", doc);
  dir.finish("attend", cfg,
             {{"dataset", file_digest(cfg.paths.dataset)}, {"checkpoint", file_digest(cfg.paths.checkpoint)}});
  return kExitOk;
}

struct AblationOpts {
  Common common;
  std::optional<Index> runs, folds;
  std::optional<int> max_epochs;
};

int cmd_ablation(const AblationOpts& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = o.common.load();
  apply_train_overrides(cfg, o.common, o.folds, o.max_epochs);
  if (o.runs) cfg.train.runs = *o.runs;
  cfg.validate();
  const unsigned threads = ablation_threads();

  const Dataset ds = read_bagfile(cfg.paths.dataset);
  check_compatible(cfg.model, ds);
  RunDir dir(cfg.paths.output_dir);
  dir.write_json("config.json", to_json(cfg));

  const auto start = std::chrono::steady_clock::now();
  const AblationResult result =
      run_ablation(ds, cfg.model, cfg.train, cfg.train.runs, threads, [&](const AblationJob& job, const EvalReport& r) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        err << "[" << fixed(secs, 0) << "s] " << to_string(job.method) << " run " << job.run << ": accuracy "
            << fixed(r.accuracy) << "\n";
      });

  json runs = json::object();
  for (const MethodRuns& m : result.methods) {
    json list = json::array();
    for (const EvalReport& r : m.runs) list.push_back(to_json(r));
    runs[m.method] = list;
  }
  dir.write("ablation.csv", ablation_csv(result.rows));
  const std::string table = ablation_table(result.rows);
  dir.write("ablation.txt", table);
  dir.write_json("runs.json", runs);
  dir.finish("ablation", cfg, {{"dataset", file_digest(cfg.paths.dataset)}});
  out << table;
  return kExitOk;
}

struct GradcheckOpts {
  double tolerance = 1e-4;
  std::string inject_fault;
};

int cmd_gradcheck(const GradcheckOpts& o, std::ostream& out) {
  if (!o.inject_fault.empty() && o.inject_fault != "tanh") {
    throw ConfigError("gradcheck: unknown fault '" + o.inject_fault + "' (only 'tanh' is available)");
  }
  const auto start = std::chrono::steady_clock::now();
  std::vector<GradcheckCase> cases = tensorcore_gradcheck_cases(7, o.inject_fault == "tanh");
  for (auto& c : model_gradcheck_cases()) cases.push_back(std::move(c));
  const std::vector<GradcheckOutcome> outcomes = run_gradcheck_cases(cases, o.tolerance);

  bool ok = true;
  char line[160];
  for (const auto& r : outcomes) {
    std::snprintf(line, sizeof line, "%-30s max_rel_error %.3e  %s\n", r.name.c_str(), r.result.max_rel_error,
                  r.passed ? "PASS" : "FAIL");
    out << line;
    ok = ok && r.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out << (ok ? "all " + std::to_string(outcomes.size()) + " checks passed" : std::string("gradient check FAILED"))
      << " (tolerance " << o.tolerance << ", " << fixed(secs, 2) << " s)\n";
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-based multiple instance learning on bags of instance tensors", "attmil"};
  app.require_subcommand(1);

  const std::vector<std::string> method_names{"sic", "mil_max", "mil_max_sic", "mil_att_sic"};

  GenerateOpts gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic landmark-bag dataset");
  add_config(generate, gen.common);
  generate->add_option("--out", gen.common.out, "Output directory (dataset.milb is written there)");
  generate->add_option("--seed", gen.common.seed, "Generator seed");
  generate->add_option("--patients-per-class", gen.patients_per_class);
  generate->add_option("--bags-per-patient", gen.bags_per_patient);

  TrainOpts tr;
  auto* train = app.add_subcommand("train", "Cross-validated training of one method");
  add_config(train, tr.common);
  train->add_option("--data", tr.common.data, "Bag container file");
  train->add_option("--out", tr.common.out, "Run directory");
  train->add_option("--method", tr.method, "sic | mil_max | mil_max_sic | mil_att_sic")
      ->check(CLI::IsMember(method_names));
  train->add_option("--seed", tr.common.seed, "Training seed");
  train->add_option("--folds", tr.folds);
  train->add_option("--max-epochs", tr.max_epochs);

  Common ev;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset");
  add_config(evaluate, ev);
  evaluate->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  evaluate->add_option("--data", ev.data, "Bag container file");
  evaluate->add_option("--out", ev.out, "Run directory");

  AttendOpts at;
  auto* attend = app.add_subcommand("attend", "Rank the instances of one bag by attention");
  add_config(attend, at.common);
  attend->add_option("--checkpoint", at.common.checkpoint, "Checkpoint file");
  attend->add_option("--data", at.common.data, "Bag container file");
  attend->add_option("--bag-id", at.bag_id, "Bag identifier")->required();
  attend->add_option("--top", at.top, "Number of instances to list")->capture_default_str();
  attend->add_option("--out", at.common.out, "Also write the ranking into this run directory");

  AblationOpts ab;
  auto* ablation = app.add_subcommand("ablation", "Train all four methods over several runs");
  add_config(ablation, ab.common);
  ablation->add_option("--data", ab.common.data, "Bag container file");
  ablation->add_option("--out", ab.common.out, "Run directory");
  ablation->add_option("--runs", ab.runs, "Runs per method");
  ablation->add_option("--seed", ab.common.seed, "Base seed; run r uses seed + r");
  ablation->add_option("--folds", ab.folds);
  ablation->add_option("--max-epochs", ab.max_epochs);

  GradcheckOpts gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--tolerance", gc.tolerance)->capture_default_str();
  gradcheck->add_option("--inject-fault", gc.inject_fault)->group("");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    for (auto* sub : app.get_subcommands()) err << sub->help();
    if (app.get_subcommands().empty()) err << app.help();
    return kExitUsage;
  }

  try {
    if (generate->parsed()) return cmd_generate(gen, out);
    if (train->parsed()) return cmd_train(tr, out);
    if (evaluate->parsed()) return cmd_evaluate(ev, out);
    if (attend->parsed()) return cmd_attend(at, out);
    if (ablation->parsed()) return cmd_ablation(ab, out, err);
    if (gradcheck->parsed()) return cmd_gradcheck(gc, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace attmil
