#include "cast/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "cast/checkpoint.hpp"
#include "cast/errors.hpp"

namespace cast {

DataOptions DataConfig::options(const ModelConfig& model) const {
  DataOptions o;
  o.vocab_size = model.vocab_size;
  o.modulus = modulus;
  return o;
}

void ExperimentConfig::validate() const {
  model.validate();
  const DataOptions opts = data.options(model);
  opts.validate();
  train.validate();
  // BOS, distractors, HARM, payload, SEP.
  const int longest = std::max(3 + opts.max_distractors + opts.payload_length,
                               2 + opts.copy_length);
  if (model.max_seq_len < longest) {
    throw ConfigError("model.max_seq_len " + std::to_string(model.max_seq_len) +
                      " is shorter than the longest prompt (" + std::to_string(longest) + ")");
  }
  if (data.utility_tasks.empty()) {
    throw ConfigError("data.utility_tasks must list at least one task");
  }
  if (std::find(data.utility_tasks.begin(), data.utility_tasks.end(), data.primary_task) ==
      data.utility_tasks.end()) {
    throw ConfigError("data.primary_task must be one of data.utility_tasks");
  }
  for (int n : {data.calibration_utility, data.calibration_safety, data.eval_utility,
                data.eval_safety, data.alignment_size}) {
    if (n < 1) {
      throw ConfigError("data set sizes must be positive");
    }
  }
  if (!(pretrain.lr > 0.0) || pretrain.batch_size < 1 || pretrain.max_steps < 1 ||
      pretrain.eval_every < 1 || pretrain.eval_size < 1) {
    throw ConfigError("pretrain lr, batch_size, max_steps, eval_every and eval_size must be positive");
  }
  if (!(pretrain.safety_fraction >= 0.0 && pretrain.prefixed_fraction >= 0.0 &&
        pretrain.adversarial_fraction >= 0.0 &&
        pretrain.safety_fraction + pretrain.prefixed_fraction + pretrain.adversarial_fraction <
            1.0)) {
    throw ConfigError(
        "pretrain safety, adversarial and prefixed fractions must be non-negative with a sum "
        "below 1");
  }
  if (!(pretrain.adversarial_refusal >= 0.0 && pretrain.adversarial_refusal <= 1.0)) {
    throw ConfigError("pretrain.adversarial_refusal must lie in [0, 1]");
  }
  if (pretrain.adversarial_fraction > 0.0 && data.options(model).payload_length < 1) {
    throw ConfigError("adversarial pretraining needs a nonempty payload");
  }
  if (!(pretrain.head_dropout >= 0.0 && pretrain.head_dropout < 1.0)) {
    throw ConfigError("pretrain.head_dropout must lie in [0, 1)");
  }
  if (diagnosis.buckets < 1 || diagnosis.buckets > model.head_count()) {
    throw ConfigError("diagnosis.buckets must lie in [1, " + std::to_string(model.head_count()) +
                      "]");
  }
  if (seeds.empty()) {
    throw ConfigError("seeds must be nonempty");
  }
  if (!(epsilon > 0.0)) {
    throw ConfigError("metrics.epsilon must be positive");
  }
  if (arms.empty()) {
    throw ConfigError("arms must be nonempty");
  }
  std::set<std::string> names;
  for (const auto& arm : arms) {
    if (arm.name.empty() || !names.insert(arm.name).second) {
      throw ConfigError("arm names must be nonempty and unique ('" + arm.name + "')");
    }
    if (arm.strategy.kind == SelectionKind::bucket_index &&
        (arm.strategy.bucket < 1 || arm.strategy.bucket > diagnosis.buckets)) {
      throw ConfigError("arm '" + arm.name + "' names bucket " +
                        std::to_string(arm.strategy.bucket) + " of " +
                        std::to_string(diagnosis.buckets));
    }
    if (arm.strategy.kind == SelectionKind::random_k || arm.strategy.kind == SelectionKind::top_k ||
        arm.strategy.kind == SelectionKind::bottom_k) {
      if (!(arm.strategy.fraction > 0.0 && arm.strategy.fraction <= 1.0)) {
        throw ConfigError("arm '" + arm.name + "' needs k in (0, 1]");
      }
    }
  }
}

std::vector<ArmConfig> default_arms(int buckets) {
  std::vector<ArmConfig> arms;
  auto add = [&arms](std::string name, SelectionKind kind, double k, int bucket, bool pcgrad) {
    ArmConfig a;
    a.name = std::move(name);
    a.strategy.kind = kind;
    a.strategy.fraction = k;
    a.strategy.bucket = bucket;
    a.pcgrad = pcgrad;
    arms.push_back(std::move(a));
  };
  add("full", SelectionKind::full, 1.0, 1, false);
  add("full_pcgrad", SelectionKind::full, 1.0, 1, true);
  add("random_25", SelectionKind::random_k, 0.25, 1, false);
  for (int b = 1; b <= buckets; ++b) {
    add("bucket_" + std::to_string(b), SelectionKind::bucket_index, 0.25, b, false);
  }
  add("bucket_1_pcgrad", SelectionKind::bucket_index, 0.25, 1, true);
  add("bucket_" + std::to_string(buckets) + "_pcgrad", SelectionKind::bucket_index, 0.25, buckets,
      true);
  add("top_25", SelectionKind::top_k, 0.25, 1, false);
  add("bottom_25", SelectionKind::bottom_k, 0.25, 1, false);
  add("top_50", SelectionKind::top_k, 0.5, 1, false);
  add("bottom_50", SelectionKind::bottom_k, 0.5, 1, false);
  return arms;
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig cfg;
  cfg.arms = default_arms(cfg.diagnosis.buckets);
  return cfg;
}

namespace {

void check_keys(const YAML::Node& node, const std::string& section,
                std::initializer_list<const char*> allowed) {
  if (!node.IsMap()) {
    throw ConfigError("config section '" + section + "' must be a mapping");
  }
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&key](const char* a) { return key == a; }) == allowed.end()) {
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) +
                        "'");
    }
  }
}

template <class T>
void read(const YAML::Node& node, const char* key, T& out) {
  if (const YAML::Node v = node[key]) {
    out = v.as<T>();
  }
}

ArmConfig parse_arm(const YAML::Node& n) {
  check_keys(n, "arms[]", {"name", "strategy", "k", "bucket", "pcgrad", "score"});
  ArmConfig a;
  read(n, "name", a.name);
  if (const YAML::Node s = n["strategy"]) {
    a.strategy.kind = parse_selection_kind(s.as<std::string>());
  }
  read(n, "k", a.strategy.fraction);
  read(n, "bucket", a.strategy.bucket);
  read(n, "pcgrad", a.pcgrad);
  if (const YAML::Node s = n["score"]) {
    a.score = parse_score_kind(s.as<std::string>());
  }
  return a;
}

ExperimentConfig parse_yaml(const YAML::Node& root) {
  ExperimentConfig cfg;
  if (root.IsNull()) {
    cfg.arms = default_arms(cfg.diagnosis.buckets);
    return cfg;
  }
  check_keys(root, "",
             {"model", "data", "pretrain", "diagnosis", "train", "seeds", "arms", "metrics",
              "output_dir"});
  if (const YAML::Node m = root["model"]) {
    check_keys(m, "model",
               {"n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len", "init_seed"});
    read(m, "n_layers", cfg.model.n_layers);
    read(m, "n_heads", cfg.model.n_heads);
    read(m, "d_model", cfg.model.d_model);
    read(m, "vocab_size", cfg.model.vocab_size);
    read(m, "max_seq_len", cfg.model.max_seq_len);
    read(m, "init_seed", cfg.model.init_seed);
  }
  if (const YAML::Node d = root["data"]) {
    check_keys(d, "data",
               {"modulus", "utility_tasks", "primary_task", "calibration_utility",
                "calibration_safety", "eval_utility", "eval_safety", "alignment_size",
                "proportions", "calibration_seed", "eval_seed", "alignment_seed"});
    read(d, "modulus", cfg.data.modulus);
    if (const YAML::Node t = d["utility_tasks"]) {
      cfg.data.utility_tasks.clear();
      for (const auto& name : t) {
        cfg.data.utility_tasks.push_back(parse_task_kind(name.as<std::string>()));
      }
    }
    if (const YAML::Node p = d["primary_task"]) {
      cfg.data.primary_task = parse_task_kind(p.as<std::string>());
    }
    read(d, "calibration_utility", cfg.data.calibration_utility);
    read(d, "calibration_safety", cfg.data.calibration_safety);
    read(d, "eval_utility", cfg.data.eval_utility);
    read(d, "eval_safety", cfg.data.eval_safety);
    read(d, "alignment_size", cfg.data.alignment_size);
    if (const YAML::Node p = d["proportions"]) {
      check_keys(p, "data.proportions",
                 {"vanilla_harmful", "adversarial_harmful", "vanilla_benign",
                  "adversarial_benign"});
      read(p, "vanilla_harmful", cfg.data.proportions[0]);
      read(p, "adversarial_harmful", cfg.data.proportions[1]);
      read(p, "vanilla_benign", cfg.data.proportions[2]);
      read(p, "adversarial_benign", cfg.data.proportions[3]);
    }
    read(d, "calibration_seed", cfg.data.calibration_seed);
    read(d, "eval_seed", cfg.data.eval_seed);
    read(d, "alignment_seed", cfg.data.alignment_seed);
  }
  if (const YAML::Node p = root["pretrain"]) {
    check_keys(p, "pretrain",
               {"lr", "batch_size", "max_steps", "eval_every", "eval_size", "target_accuracy",
                "safety_fraction", "adversarial_fraction", "adversarial_refusal", "prefixed_fraction",
                "head_dropout", "seed"});
    read(p, "lr", cfg.pretrain.lr);
    read(p, "batch_size", cfg.pretrain.batch_size);
    read(p, "max_steps", cfg.pretrain.max_steps);
    read(p, "eval_every", cfg.pretrain.eval_every);
    read(p, "eval_size", cfg.pretrain.eval_size);
    read(p, "target_accuracy", cfg.pretrain.target_accuracy);
    read(p, "safety_fraction", cfg.pretrain.safety_fraction);
    read(p, "adversarial_fraction", cfg.pretrain.adversarial_fraction);
    read(p, "adversarial_refusal", cfg.pretrain.adversarial_refusal);
    read(p, "prefixed_fraction", cfg.pretrain.prefixed_fraction);
    read(p, "head_dropout", cfg.pretrain.head_dropout);
    read(p, "seed", cfg.pretrain.seed);
  }
  if (const YAML::Node d = root["diagnosis"]) {
    check_keys(d, "diagnosis", {"buckets", "score"});
    read(d, "buckets", cfg.diagnosis.buckets);
    if (const YAML::Node s = d["score"]) {
      cfg.diagnosis.score = parse_score_kind(s.as<std::string>());
    }
  }
  if (const YAML::Node t = root["train"]) {
    check_keys(t, "train",
               {"lr", "epochs", "batch_size", "grad_accum", "optimizer", "adam_beta1",
                "adam_beta2", "adam_eps", "adapter_rank", "alpha", "reference_batch_size"});
    read(t, "lr", cfg.train.lr);
    read(t, "epochs", cfg.train.epochs);
    read(t, "batch_size", cfg.train.batch_size);
    read(t, "grad_accum", cfg.train.grad_accum);
    if (const YAML::Node o = t["optimizer"]) {
      cfg.train.optimizer = parse_optimizer_kind(o.as<std::string>());
    }
    read(t, "adam_beta1", cfg.train.adam_beta1);
    read(t, "adam_beta2", cfg.train.adam_beta2);
    read(t, "adam_eps", cfg.train.adam_eps);
    read(t, "adapter_rank", cfg.train.adapter_rank);
    read(t, "alpha", cfg.train.alpha);
    read(t, "reference_batch_size", cfg.train.reference_batch_size);
  }
  if (const YAML::Node s = root["seeds"]) {
    cfg.seeds = s.as<std::vector<unsigned>>();
  }
  if (const YAML::Node a = root["arms"]) {
    for (const auto& arm : a) {
      cfg.arms.push_back(parse_arm(arm));
    }
  } else {
    cfg.arms = default_arms(cfg.diagnosis.buckets);
  }
  if (const YAML::Node m = root["metrics"]) {
    check_keys(m, "metrics", {"epsilon"});
    read(m, "epsilon", cfg.epsilon);
  }
  read(root, "output_dir", cfg.output_dir);
  return cfg;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  try {
    cfg = parse_yaml(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config file " + path.string());
  }
  std::ostringstream text;
  text << in.rdbuf();
  return parse_experiment_config(text.str());
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const TaskKind t : cfg.data.utility_tasks) {
    tasks.push_back(to_string(t));
  }
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : cfg.arms) {
    arms.push_back({{"name", a.name},
                    {"strategy", to_string(a.strategy.kind)},
                    {"k", a.strategy.fraction},
                    {"bucket", a.strategy.bucket},
                    {"pcgrad", a.pcgrad},
                    {"score", to_string(a.score)}});
  }
  const auto& d = cfg.data;
  const auto& p = cfg.pretrain;
  nlohmann::json train = to_json(cfg.train);
  train.erase("seed");
  train.erase("pcgrad");
  return {{"model", config_to_json(cfg.model)},
          {"data",
           {{"modulus", d.modulus},
            {"utility_tasks", tasks},
            {"primary_task", to_string(d.primary_task)},
            {"calibration_utility", d.calibration_utility},
            {"calibration_safety", d.calibration_safety},
            {"eval_utility", d.eval_utility},
            {"eval_safety", d.eval_safety},
            {"alignment_size", d.alignment_size},
            {"proportions",
             {{"vanilla_harmful", d.proportions[0]},
              {"adversarial_harmful", d.proportions[1]},
              {"vanilla_benign", d.proportions[2]},
              {"adversarial_benign", d.proportions[3]}}},
            {"calibration_seed", d.calibration_seed},
            {"eval_seed", d.eval_seed},
            {"alignment_seed", d.alignment_seed}}},
          {"pretrain",
           {{"lr", p.lr},
            {"batch_size", p.batch_size},
            {"max_steps", p.max_steps},
            {"eval_every", p.eval_every},
            {"eval_size", p.eval_size},
            {"target_accuracy", p.target_accuracy},
            {"safety_fraction", p.safety_fraction},
            {"adversarial_fraction", p.adversarial_fraction},
            {"adversarial_refusal", p.adversarial_refusal},
            {"prefixed_fraction", p.prefixed_fraction},
            {"head_dropout", p.head_dropout},
            {"seed", p.seed}}},
          {"diagnosis",
           {{"buckets", cfg.diagnosis.buckets}, {"score", to_string(cfg.diagnosis.score)}}},
          {"train", train},
          {"seeds", cfg.seeds},
          {"arms", arms},
          {"metrics", {{"epsilon", cfg.epsilon}}}};
}

Datasets make_datasets(const ExperimentConfig& cfg) {
  const DataOptions opts = cfg.data.options(cfg.model);
  const auto& d = cfg.data;
  Datasets out;
  out.calibration_utility = gen_utility(d.primary_task, d.calibration_utility, d.calibration_seed,
                                        opts);
  out.calibration_safety = gen_safety(d.calibration_safety, d.calibration_seed, false, opts);
  for (const TaskKind t : d.utility_tasks) {
    out.eval_utility.push_back(gen_utility(t, d.eval_utility, d.eval_seed, opts));
  }
  out.eval_safety.push_back(gen_safety(d.eval_safety, d.eval_seed, false, opts));
  out.eval_safety.push_back(gen_safety(d.eval_safety, d.eval_seed, true, opts));
  out.alignment = gen_alignment(d.alignment_size, d.proportions, d.alignment_seed, opts);
  return out;
}

EvalReport evaluate(const TransformerModel& model, const Datasets& data,
                    const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, double>> utility;
  for (const auto& set : data.eval_utility) {
    utility.emplace_back(to_string(set.kind), evaluate_utility(model, set));
  }
  std::vector<std::pair<std::string, double>> safety;
  for (const auto& set : data.eval_safety) {
    safety.emplace_back(to_string(set.adversarial ? Category::adversarial_harmful
                                                  : Category::vanilla_harmful),
                        evaluate_refusal(model, set));
  }
  return make_eval_report(std::move(utility), std::move(safety),
                          to_string(cfg.data.primary_task));
}

PretrainResult pretrain(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.model.validate();
  const DataOptions opts = cfg.data.options(cfg.model);
  const auto& p = cfg.pretrain;
  PretrainResult result{init_model(cfg.model), 0, 0.0, false, {}};
  TransformerModel& model = result.model;
  const auto params = model.parameters();
  Optimizer optimizer(OptimizerKind::adam, p.lr, model.parameter_count());
  // Held out from the training stream by seed.
  const UtilitySet probe = gen_utility(cfg.data.primary_task, p.eval_size, p.seed + 1, opts);

  std::mt19937_64 master(p.seed);
  const auto n_safe = static_cast<int>(std::lround(p.batch_size * p.safety_fraction));
  const auto n_prefixed = static_cast<int>(std::lround(p.batch_size * p.prefixed_fraction));
  const auto n_adv = static_cast<int>(std::lround(p.batch_size * p.adversarial_fraction));
  const int n_util = p.batch_size - n_safe - n_prefixed - n_adv;
  std::bernoulli_distribution refuse_adv(p.adversarial_refusal);
  const auto n_tasks = static_cast<int>(cfg.data.utility_tasks.size());
  std::vector<double> grad(model.parameter_count());
  for (int step = 1; step <= p.max_steps; ++step) {
    std::vector<Example> batch;
    for (int t = 0; t < n_tasks; ++t) {
      const int count = n_util / n_tasks + (t < n_util % n_tasks ? 1 : 0);
      if (count > 0) {
        const auto seed = static_cast<unsigned>(master());
        const auto ex = examples_of(gen_utility(cfg.data.utility_tasks[static_cast<std::size_t>(t)],
                                                count, seed, opts));
        batch.insert(batch.end(), ex.begin(), ex.end());
      }
    }
    if (n_safe > 0) {
      const auto seed = static_cast<unsigned>(master());
      const auto ex = examples_of(gen_safety(n_safe, seed, false, opts));
      batch.insert(batch.end(), ex.begin(), ex.end());
    }
    if (n_adv > 0) {
      const auto seed = static_cast<unsigned>(master());
      auto ex = examples_of(gen_safety(n_adv, seed, true, opts));
      for (Example& e : ex) {
        if (!refuse_adv(master)) {
          // Jailbroken completion: echo the first payload token.
          const auto harm = std::find(e.prompt.begin(), e.prompt.end(), vocab::kHarm);
          e.target = *(harm + 1);
        }
      }
      batch.insert(batch.end(), ex.begin(), ex.end());
    }
    if (n_prefixed > 0) {
      const auto seed = static_cast<unsigned>(master());
      const auto ex = examples_of(gen_alignment(n_prefixed, {0.0, 0.0, 0.0, 1.0}, seed, opts));
      batch.insert(batch.end(), ex.begin(), ex.end());
    }
    HeadMask dropped;
    if (p.head_dropout > 0.0) {
      std::bernoulli_distribution drop(p.head_dropout);
      for (const HeadId h : all_heads(cfg.model)) {
        if (drop(master)) {
          dropped.add(h);
        }
      }
    }
    model.zero_grads();
    ad::Tape tape;
    LossResult r = answer_loss(tape, model, batch, dropped);
    if (!std::isfinite(r.loss.item())) {
      throw NumericError("pretraining loss is not finite at step " + std::to_string(step));
    }
    tape.backward(r.loss);
    std::size_t k = 0;
    for (const ad::Parameter* prm : params) {
      std::copy(prm->grad.begin(), prm->grad.end(), grad.begin() + static_cast<std::ptrdiff_t>(k));
      k += prm->size();
    }
    const auto delta = optimizer.step(grad);
    k = 0;
    for (ad::Parameter* prm : params) {
      for (double& v : prm->value) {
        v += delta[k++];
      }
    }
    result.steps = step;
    if (step % p.eval_every == 0 || step == p.max_steps) {
      result.accuracy = evaluate_utility(model, probe);
      result.curve.emplace_back(step, result.accuracy);
      if (log != nullptr) {
        *log << "pretrain step " << step << " loss " << r.loss.item() << " acc "
             << result.accuracy << '\n';
      }
      if (result.accuracy >= p.target_accuracy) {
        result.reached = true;
        break;
      }
    }
  }
  model.zero_grads();
  return result;
}

ConflictMap diagnose(const TransformerModel& model, const Datasets& data) {
  return build_conflict_map(model, data.calibration_utility, data.calibration_safety);
}

ArmRun run_arm(const TransformerModel& base, const EvalReport& base_report,
               const ConflictMap& map, const ArmConfig& arm, unsigned seed,
               const ExperimentConfig& cfg, const Datasets& data) {
  ArmRun run;
  run.arm = arm.name;
  run.seed = seed;
  try {
    const Bucketing bucketing = bucketize(map, cfg.diagnosis.buckets, arm.score);
    SelectionStrategy strategy = arm.strategy;
    strategy.seed = seed;
    run.heads = select_trainable(bucketing, strategy);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    tc.pcgrad = arm.pcgrad;
    const std::string before = frozen_parameter_hash(base, run.heads);
    TrainResult trained =
        train_pcgrad(base, data.alignment, data.calibration_utility, run.heads, tc);
    run.frozen_intact = frozen_parameter_hash(trained.model, run.heads) == before;
    run.history = std::move(trained.history);
    run.report = evaluate(trained.model, data, cfg);
    run.costs = cost_ratios(base_report, run.report, cfg.epsilon);
    run.checksum = model_checksum(trained.model);
    if (!run.frozen_intact) {
      run.error = "parameters outside the trainable heads changed";
    }
  } catch (const Error& e) {
    run.error = e.what();
  }
  return run;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) {
    s += x;
  }
  return s / static_cast<double>(v.size());
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

double refusal_of(const EvalReport& r, Category c) {
  for (const auto& [name, v] : r.safety) {
    if (name == to_string(c)) {
      return v;
    }
  }
  return 0.0;
}

struct ArmSummary {
  std::vector<double> acc_gen, utility, safety, ucr, task_cr;
};

// Bucket arms (plain SFT) for one score variant, indexed by bucket - 1.
std::vector<const ArmConfig*> bucket_arms(const ExperimentConfig& cfg, ScoreKind score) {
  std::vector<const ArmConfig*> out(static_cast<std::size_t>(cfg.diagnosis.buckets), nullptr);
  for (const auto& a : cfg.arms) {
    if (a.strategy.kind == SelectionKind::bucket_index && !a.pcgrad && a.score == score) {
      auto& slot = out[static_cast<std::size_t>(a.strategy.bucket - 1)];
      if (slot == nullptr) {
        slot = &a;
      }
    }
  }
  return out;
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const Datasets data = make_datasets(cfg);

  PretrainResult pre = pretrain(cfg, log);
  if (!pre.reached) {
    throw Error("pretraining stopped after " + std::to_string(pre.steps) +
                " steps at held-out accuracy " + fmt(pre.accuracy) + " (target " +
                fmt(cfg.pretrain.target_accuracy) + ")");
  }
  ExperimentOutcome out{{}, {}, std::move(pre.model), {}, {}, 0, 0.0};
  const EvalReport base_report = evaluate(out.base, data, cfg);
  if (log != nullptr) {
    *log << "base: acc_gen " << base_report.primary << " utility " << base_report.mean_utility
         << " safety " << base_report.mean_safety << '\n';
  }
  out.map = diagnose(out.base, data);

  for (const unsigned seed : cfg.seeds) {
    for (const auto& arm : cfg.arms) {
      ArmRun run = run_arm(out.base, base_report, out.map, arm, seed, cfg, data);
      if (log != nullptr) {
        *log << "seed " << seed << " arm " << arm.name << ": ";
        if (run.error.empty()) {
          *log << "acc_gen " << run.report.primary << " utility " << run.report.mean_utility
               << " safety " << run.report.mean_safety << " ucr " << run.costs.ucr << '\n';
        } else {
          *log << "FAILED " << run.error << '\n';
        }
      }
      if (!run.error.empty()) {
        ++out.failures;
      }
      out.runs.push_back(std::move(run));
    }
  }

  nlohmann::json report;
  report["config"] = to_json(cfg);
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [step, acc] : pre.curve) {
    curve.push_back({step, acc});
  }
  report["pretrain"] = {{"steps", pre.steps}, {"accuracy", pre.accuracy}, {"curve", curve}};
  report["base"] = {{"checksum", model_checksum(out.base)}, {"eval", to_json(base_report)}};
  report["conflict_map"] =
      conflict_map_json(out.map, bucketize(out.map, cfg.diagnosis.buckets, cfg.diagnosis.score));

  std::map<std::string, ArmSummary> summaries;
  nlohmann::json runs = nlohmann::json::array();
  nlohmann::json failures = nlohmann::json::array();
  std::ostringstream csv;
  csv << "arm,seed,heads,trainable_parameters,acc_gen,mean_utility,mean_safety,"
         "ref_vanilla,ref_adversarial,ucr,task_cr,final_loss,frozen_intact,error\n";
  for (const auto& run : out.runs) {
    nlohmann::json heads = nlohmann::json::array();
    std::string head_list;
    for (const HeadId h : run.heads) {
      heads.push_back(to_string(h));
      head_list += (head_list.empty() ? "" : " ") + to_string(h);
    }
    nlohmann::json j = {{"arm", run.arm}, {"seed", run.seed}, {"heads", heads}};
    const double final_loss =
        run.history.step_losses.empty() ? 0.0 : run.history.step_losses.back();
    if (run.error.empty()) {
      j["eval"] = to_json(run.report);
      j["costs"] = to_json(run.costs);
      j["checksum"] = run.checksum;
      j["trainable_parameters"] = run.history.trainable_parameters;
      j["final_loss"] = final_loss;
      j["frozen_intact"] = run.frozen_intact;
      auto& s = summaries[run.arm];
      s.acc_gen.push_back(run.report.primary);
      s.utility.push_back(run.report.mean_utility);
      s.safety.push_back(run.report.mean_safety);
      s.ucr.push_back(run.costs.ucr);
      s.task_cr.push_back(run.costs.task_cr);
    } else {
      j["error"] = run.error;
      failures.push_back({{"arm", run.arm}, {"seed", run.seed}, {"error", run.error}});
    }
    runs.push_back(std::move(j));
    csv << run.arm << ',' << run.seed << ',' << head_list << ','
        << run.history.trainable_parameters << ',' << fmt(run.report.primary) << ','
        << fmt(run.report.mean_utility) << ',' << fmt(run.report.mean_safety) << ','
        << fmt(refusal_of(run.report, Category::vanilla_harmful)) << ','
        << fmt(refusal_of(run.report, Category::adversarial_harmful)) << ','
        << fmt(run.costs.ucr) << ',' << fmt(run.costs.task_cr) << ',' << fmt(final_loss) << ','
        << (run.frozen_intact ? 1 : 0) << ',' << '"' << run.error << '"' << '\n';
  }
  report["runs"] = std::move(runs);
  report["failures"] = std::move(failures);
  out.arms_csv = csv.str();

  nlohmann::json arms = nlohmann::json::array();
  for (const auto& arm : cfg.arms) {
    const auto it = summaries.find(arm.name);
    if (it == summaries.end()) {
      arms.push_back({{"arm", arm.name}, {"completed_seeds", 0}});
      continue;
    }
    const ArmSummary& s = it->second;
    arms.push_back({{"arm", arm.name},
                    {"completed_seeds", s.acc_gen.size()},
                    {"median_acc_gen", median(s.acc_gen)},
                    {"median_mean_safety", median(s.safety)},
                    {"mean_acc_gen", mean(s.acc_gen)},
                    {"mean_utility", mean(s.utility)},
                    {"mean_safety", mean(s.safety)},
                    {"mean_ucr", mean(s.ucr)},
                    {"mean_task_cr", mean(s.task_cr)}});
  }
  report["arms"] = std::move(arms);

  // Correlations use seed-mean costs; per-seed values are reported alongside.
  nlohmann::json validity = nlohmann::json::object();
  for (const ScoreKind score : {ScoreKind::unified, ScoreKind::o_only, ScoreKind::s_only}) {
    const auto arms_for = bucket_arms(cfg, score);
    bool complete = true;
    for (const auto* a : arms_for) {
      complete = complete && a != nullptr && summaries.count(a->name) != 0 &&
                 summaries.at(a->name).ucr.size() == cfg.seeds.size();
    }
    if (!complete) {
      continue;
    }
    const Bucketing bucketing = bucketize(out.map, cfg.diagnosis.buckets, score);
    std::vector<CostRatios> mean_costs;
    for (const auto* a : arms_for) {
      const ArmSummary& s = summaries.at(a->name);
      mean_costs.push_back({mean(s.ucr), mean(s.task_cr), cfg.epsilon});
    }
    const CorrelationReport corr = bucket_validity(out.map, bucketing, mean_costs);
    nlohmann::json entry = to_json(corr);
    nlohmann::json per_seed = nlohmann::json::array();
    std::vector<double> rhos;
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      std::vector<CostRatios> costs;
      for (const auto* a : arms_for) {
        const ArmSummary& s = summaries.at(a->name);
        costs.push_back({s.ucr[si], s.task_cr[si], cfg.epsilon});
      }
      const CorrelationReport c = bucket_validity(out.map, bucketing, costs);
      per_seed.push_back({{"seed", cfg.seeds[si]},
                          {"ucr", c.ucr},
                          {"spearman_ucr", optional_json(c.spearman_ucr)},
                          {"pearson_ucr", optional_json(c.pearson_ucr)}});
      if (c.spearman_ucr) {
        rhos.push_back(*c.spearman_ucr);
      }
    }
    entry["per_seed"] = std::move(per_seed);
    entry["median_seed_spearman_ucr"] =
        rhos.empty() ? nlohmann::json(nullptr) : nlohmann::json(median(rhos));
    validity[to_string(score)] = std::move(entry);
  }
  report["bucket_validity"] = std::move(validity);

  // Risky Zone vs Safe Zone under the configured score.
  const auto zone_arms = bucket_arms(cfg, cfg.diagnosis.score);
  nlohmann::json zones = nlohmann::json::object();
  for (const auto& [label, arm] :
       {std::pair{"risky", zone_arms.front()}, std::pair{"safe", zone_arms.back()}}) {
    if (arm != nullptr && summaries.count(arm->name) != 0) {
      const ArmSummary& s = summaries.at(arm->name);
      zones[label] = {{"arm", arm->name},
                      {"median_acc_gen", median(s.acc_gen)},
                      {"median_mean_safety", median(s.safety)},
                      {"median_ucr", median(s.ucr)}};
    }
  }
  report["zones"] = std::move(zones);

  out.report = std::move(report);
  out.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

std::string dump_report(const nlohmann::json& report) {
  return report.dump(2) + "\n";
}

void write_experiment_outputs(const ExperimentOutcome& outcome, const ExperimentConfig& cfg,
                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&dir](const std::string& name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    f << text;
    if (!f) {
      throw Error("cannot write " + (dir / name).string());
    }
  };
  write("report.json", dump_report(outcome.report));
  write("arms.csv", outcome.arms_csv);
  const Bucketing bucketing = bucketize(outcome.map, cfg.diagnosis.buckets, cfg.diagnosis.score);
  write("conflict_map.csv", conflict_map_csv(outcome.map, bucketing));
  write("conflict_map.json", conflict_map_json(outcome.map, bucketing).dump(2) + "\n");
  nlohmann::json histories = nlohmann::json::array();
  for (const auto& run : outcome.runs) {
    histories.push_back(
        {{"arm", run.arm}, {"seed", run.seed}, {"history", to_json(run.history, true)}});
  }
  write("histories.json", histories.dump(2) + "\n");
  save_checkpoint(dir / "base.ckpt", outcome.base, {{"role", "base"}});
}

}  // namespace cast
