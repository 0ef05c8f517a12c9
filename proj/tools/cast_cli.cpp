// cast: pretrain, diagnose, align and evaluate toy transformers.
//
// Exit codes: 0 success, 1 experiment or training failure, 2 usage or config
// error, 3 integrity error (stale map or checkpoint/config mismatch).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cast/alignment.hpp"
#include "cast/checkpoint.hpp"
#include "cast/diagnosis.hpp"
#include "cast/errors.hpp"
#include "cast/experiment.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIntegrity = 3;

struct Options {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string map;
  std::optional<unsigned> seed;
  std::string score;
  std::string strategy = "bucket";
  double k = 0.25;
  int bucket = 1;
  bool pcgrad = false;
  bool verbose = false;
};

cast::ExperimentConfig load_config(const Options& o) {
  if (!fs::exists(o.config)) {
    throw cast::ConfigError("config file not found: " + o.config);
  }
  cast::ExperimentConfig cfg = cast::load_experiment_config(o.config);
  if (!o.score.empty()) {
    cfg.diagnosis.score = cast::parse_score_kind(o.score);
  }
  return cfg;
}

fs::path out_dir(const Options& o, const cast::ExperimentConfig& cfg) {
  return o.out.empty() ? fs::path(cfg.output_dir) : fs::path(o.out);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) {
    throw cast::Error("cannot write " + path.string());
  }
}

cast::TransformerModel load_matching_checkpoint(const fs::path& path,
                                                const cast::ExperimentConfig& cfg) {
  cast::TransformerModel model = cast::load_checkpoint(path);
  if (!(model.config == cfg.model)) {
    throw cast::IntegrityError("checkpoint " + path.string() +
                               " was built with a different model config than the config file");
  }
  return model;
}

int cmd_pretrain(const Options& o) {
  cast::ExperimentConfig cfg = load_config(o);
  if (o.seed) {
    cfg.pretrain.seed = *o.seed;
  }
  const fs::path dir = out_dir(o, cfg);
  const cast::PretrainResult r = cast::pretrain(cfg, o.verbose ? &std::cerr : nullptr);
  const cast::Datasets data = cast::make_datasets(cfg);
  const cast::EvalReport report = cast::evaluate(r.model, data, cfg);
  fs::create_directories(dir);
  cast::save_checkpoint(dir / "base.ckpt", r.model,
                        {{"role", "base"}, {"pretrain_steps", r.steps}, {"accuracy", r.accuracy}});
  write_text(dir / "base_eval.json", cast::to_json(report).dump(2) + "\n");
  std::cout << "wrote " << (dir / "base.ckpt").string() << " after " << r.steps
            << " steps, held-out accuracy " << r.accuracy << '\n';
  if (!r.reached) {
    std::cerr << "error: accuracy " << r.accuracy << " below target "
              << cfg.pretrain.target_accuracy << " after " << r.steps << " steps\n";
    return kExitFailure;
  }
  return 0;
}

int cmd_diagnose(const Options& o) {
  const cast::ExperimentConfig cfg = load_config(o);
  const fs::path dir = out_dir(o, cfg);
  const fs::path ckpt = o.checkpoint.empty() ? dir / "base.ckpt" : fs::path(o.checkpoint);
  const cast::TransformerModel model = load_matching_checkpoint(ckpt, cfg);
  const cast::Datasets data = cast::make_datasets(cfg);
  const cast::ConflictMap map = cast::diagnose(model, data);
  const cast::Bucketing b = cast::bucketize(map, cfg.diagnosis.buckets, cfg.diagnosis.score);
  const std::string suffix =
      cfg.diagnosis.score == cast::ScoreKind::unified ? "" : "_" + cast::to_string(b.score);
  write_text(dir / ("conflict_map" + suffix + ".csv"), cast::conflict_map_csv(map, b));
  write_text(dir / ("conflict_map" + suffix + ".json"),
             cast::conflict_map_json(map, b).dump(2) + "\n");
  std::cout << "wrote " << (dir / ("conflict_map" + suffix + ".csv")).string() << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  const cast::ExperimentConfig cfg = load_config(o);
  const fs::path dir = out_dir(o, cfg);
  const fs::path ckpt = o.checkpoint.empty() ? dir / "base.ckpt" : fs::path(o.checkpoint);
  const fs::path map_path = o.map.empty() ? dir / "conflict_map.json" : fs::path(o.map);
  const cast::TransformerModel model = load_matching_checkpoint(ckpt, cfg);
  std::ifstream in(map_path);
  if (!in) {
    throw cast::InputError("cannot read conflict map " + map_path.string());
  }
  nlohmann::json map_json;
  try {
    in >> map_json;
  } catch (const nlohmann::json::exception& e) {
    throw cast::InputError("conflict map " + map_path.string() + ": " + e.what());
  }
  const cast::ConflictMap map = cast::conflict_map_from_json(map_json);
  const std::string checksum = cast::model_checksum(model);
  if (map.provenance.model_checksum != checksum) {
    throw cast::IntegrityError("conflict map " + map_path.string() +
                               " was computed for a different checkpoint");
  }

  cast::ArmConfig arm;
  arm.name = o.strategy;
  arm.strategy.kind = cast::parse_selection_kind(o.strategy);
  arm.strategy.fraction = o.k;
  arm.strategy.bucket = o.bucket;
  arm.pcgrad = o.pcgrad;
  arm.score = cfg.diagnosis.score;
  const unsigned seed = o.seed.value_or(cfg.seeds.front());

  const cast::Datasets data = cast::make_datasets(cfg);
  const cast::Bucketing b = cast::bucketize(map, cfg.diagnosis.buckets, arm.score);
  cast::SelectionStrategy strategy = arm.strategy;
  strategy.seed = seed;
  const auto heads = cast::select_trainable(b, strategy);
  cast::TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.pcgrad = arm.pcgrad;
  const cast::SnapshotSets snaps{&data.eval_utility.front(), &data.eval_safety.front()};
  cast::TrainResult r =
      cast::train_pcgrad(model, data.alignment, data.calibration_utility, heads, tc, snaps);

  nlohmann::json head_names = nlohmann::json::array();
  for (const auto h : heads) {
    head_names.push_back(cast::to_string(h));
  }
  const nlohmann::json meta = {{"role", "aligned"},
                               {"base_checksum", checksum},
                               {"strategy", cast::to_string(strategy.kind)},
                               {"heads", head_names},
                               {"pcgrad", tc.pcgrad},
                               {"seed", seed}};
  fs::create_directories(dir);
  cast::save_checkpoint(dir / "aligned.ckpt", r.model, meta);
  nlohmann::json history = cast::to_json(r.history, true);
  history["config"] = cast::to_json(tc);
  history["heads"] = head_names;
  write_text(dir / "history.json", history.dump(2) + "\n");
  std::cout << "wrote " << (dir / "aligned.ckpt").string() << " (" << heads.size()
            << " heads, " << r.history.step_losses.size() << " steps)\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const cast::ExperimentConfig cfg = load_config(o);
  const fs::path ckpt =
      o.checkpoint.empty() ? out_dir(o, cfg) / "base.ckpt" : fs::path(o.checkpoint);
  const cast::TransformerModel model = load_matching_checkpoint(ckpt, cfg);
  const cast::Datasets data = cast::make_datasets(cfg);
  const std::string text = cast::to_json(cast::evaluate(model, data, cfg)).dump(2) + "\n";
  if (!o.out.empty()) {
    write_text(fs::path(o.out) / "eval.json", text);
  }
  std::cout << text;
  return 0;
}

int cmd_experiment(const Options& o) {
  cast::ExperimentConfig cfg = load_config(o);
  const fs::path dir = out_dir(o, cfg);
  const cast::ExperimentOutcome outcome =
      cast::run_experiment(cfg, o.verbose ? &std::cerr : nullptr);
  cast::write_experiment_outputs(outcome, cfg, dir);
  std::cout << "wrote " << (dir / "report.json").string() << " (" << outcome.runs.size()
            << " runs, " << outcome.failures << " failed, " << outcome.wall_clock_seconds
            << " s)\n";
  return outcome.failures > 0 ? kExitFailure : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head-level conflict diagnosis and budget-matched alignment"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "YAML experiment config")->required();
    sub->add_option("--out", o.out, "Output directory (default: config output_dir)");
    sub->add_flag("-v,--verbose", o.verbose, "Progress on stderr");
  };

  CLI::App* pre = app.add_subcommand("pretrain", "Train the base model on the utility tasks");
  add_common(pre);
  pre->add_option("--seed", o.seed, "Pretraining data seed");

  CLI::App* diag = app.add_subcommand("diagnose", "Write the per-head conflict map");
  add_common(diag);
  diag->add_option("--checkpoint", o.checkpoint, "Base checkpoint (default: OUT/base.ckpt)");
  diag->add_option("--score", o.score, "Bucketing score")
      ->check(CLI::IsMember({"unified", "o_only", "s_only"}));

  CLI::App* train = app.add_subcommand("train", "Align a checkpoint on a head subset");
  add_common(train);
  train->add_option("--checkpoint", o.checkpoint, "Base checkpoint (default: OUT/base.ckpt)");
  train->add_option("--map", o.map, "Conflict map JSON (default: OUT/conflict_map.json)");
  train->add_option("--strategy", o.strategy, "Head selection")
      ->check(CLI::IsMember({"full", "random", "bucket", "top", "bottom"}));
  train->add_option("--k", o.k, "Head fraction for random/top/bottom");
  train->add_option("--bucket", o.bucket, "1-based bucket index");
  train->add_flag("--pcgrad", o.pcgrad, "Project against the utility reference gradient");
  train->add_option("--seed", o.seed, "Training seed (default: first configured seed)");
  train->add_option("--score", o.score, "Bucketing score")
      ->check(CLI::IsMember({"unified", "o_only", "s_only"}));

  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out sets");
  add_common(ev);
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint (default: OUT/base.ckpt)");

  CLI::App* exp = app.add_subcommand("experiment", "Run the full multi-seed experiment");
  add_common(exp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (pre->parsed()) {
      return cmd_pretrain(o);
    }
    if (diag->parsed()) {
      return cmd_diagnose(o);
    }
    if (train->parsed()) {
      return cmd_train(o);
    }
    if (ev->parsed()) {
      return cmd_eval(o);
    }
    return cmd_experiment(o);
  } catch (const cast::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << '\n';
    return kExitIntegrity;
  } catch (const cast::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const cast::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
