#pragma once

// End-to-end pipeline: pretrain a base model, diagnose its heads, run every
// alignment arm for every seed and correlate bucket scores with realized costs.

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cast/alignment.hpp"
#include "cast/diagnosis.hpp"
#include "cast/metrics.hpp"
#include "cast/model.hpp"
#include "cast/synthdata.hpp"

namespace cast {

struct DataConfig {
  int modulus = 16;
  std::vector<TaskKind> utility_tasks = {TaskKind::modular_add, TaskKind::copy};
  TaskKind primary_task = TaskKind::modular_add;
  int calibration_utility = 256;
  int calibration_safety = 256;
  int eval_utility = 512;
  int eval_safety = 256;
  int alignment_size = 256;
  // vanilla-harmful, adversarial-harmful, vanilla-benign, adversarial-benign
  std::array<double, 4> proportions = {0.25, 0.25, 0.25, 0.25};
  unsigned calibration_seed = 1001;
  unsigned eval_seed = 2002;
  unsigned alignment_seed = 3003;

  DataOptions options(const ModelConfig& model) const;
};

struct PretrainConfig {
  double lr = 1e-3;
  int batch_size = 32;
  int max_steps = 6000;
  int eval_every = 250;
  int eval_size = 256;
  double target_accuracy = 0.9;
  // Share of each batch drawn from vanilla harmful prompts with a refusal target.
  double safety_fraction = 0.0;
  // Share drawn from adversarial harmful prompts, refused with probability
  // adversarial_refusal and otherwise answered with the first payload token.
  double adversarial_fraction = 0.0;
  double adversarial_refusal = 0.5;
  // Share drawn from benign modular-add prompts behind a distractor prefix.
  double prefixed_fraction = 0.0;
  // Per-step probability of ablating each head, drawn independently.
  double head_dropout = 0.0;
  unsigned seed = 7;
};

struct DiagnosisConfig {
  int buckets = 4;
  ScoreKind score = ScoreKind::unified;
};

struct ArmConfig {
  std::string name;
  SelectionStrategy strategy;  // strategy.seed is replaced by the run seed
  bool pcgrad = false;
  ScoreKind score = ScoreKind::unified;  // ordering used for bucket/top/bottom
};

struct ExperimentConfig {
  ModelConfig model;
  DataConfig data;
  PretrainConfig pretrain;
  DiagnosisConfig diagnosis;
  TrainConfig train;
  std::vector<unsigned> seeds = {21, 42, 84};
  std::vector<ArmConfig> arms;
  double epsilon = kDefaultCostEpsilon;
  std::string output_dir = "cast_out";

  // Throws ConfigError.
  void validate() const;
};

// Built-in arm list: full, random 25%, every bucket, PCGrad on full and the
// extreme buckets, and a top/bottom 25%/50% sweep.
std::vector<ArmConfig> default_arms(int buckets);
ExperimentConfig default_experiment_config();

// YAML. Missing keys keep their defaults. Throws ConfigError.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

struct Datasets {
  UtilitySet calibration_utility;
  SafetySet calibration_safety;
  std::vector<UtilitySet> eval_utility;  // one per utility task
  std::vector<SafetySet> eval_safety;    // vanilla, adversarial
  AlignmentSet alignment;
};

Datasets make_datasets(const ExperimentConfig& cfg);

// Acc_gen per task, Ref_safe per split; the primary task is the configured one.
EvalReport evaluate(const TransformerModel& model, const Datasets& data,
                    const ExperimentConfig& cfg);

struct PretrainResult {
  TransformerModel model;
  int steps = 0;
  double accuracy = 0.0;  // held-out primary-task accuracy at the last check
  bool reached = false;
  std::vector<std::pair<int, double>> curve;  // (step, accuracy)
};

PretrainResult pretrain(const ExperimentConfig& cfg, std::ostream* log = nullptr);

ConflictMap diagnose(const TransformerModel& model, const Datasets& data);

struct ArmRun {
  std::string arm;
  unsigned seed = 0;
  std::vector<HeadId> heads;
  TrainHistory history;
  EvalReport report;
  CostRatios costs;
  bool frozen_intact = false;
  std::string checksum;
  std::string error;  // nonempty when the arm failed
};

ArmRun run_arm(const TransformerModel& base, const EvalReport& base_report,
               const ConflictMap& map, const ArmConfig& arm, unsigned seed,
               const ExperimentConfig& cfg, const Datasets& data);

struct ExperimentOutcome {
  nlohmann::json report;  // deterministic; no timings
  std::string arms_csv;
  TransformerModel base;
  ConflictMap map;
  std::vector<ArmRun> runs;
  int failures = 0;
  double wall_clock_seconds = 0.0;
};

// Throws on pretraining failure; arm failures are recorded and counted.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);
// report.json, arms.csv, base.ckpt, conflict_map.{csv,json}, histories.json.
void write_experiment_outputs(const ExperimentOutcome& outcome, const ExperimentConfig& cfg,
                              const std::filesystem::path& dir);

std::string dump_report(const nlohmann::json& report);

}  // namespace cast
