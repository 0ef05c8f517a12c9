#pragma once

// Budget-matched safety alignment: head selection, low-rank adapters on the
// selected query slices, and SFT / PCGrad training loops that leave every
// other parameter untouched.

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cast/diagnosis.hpp"
#include "cast/model.hpp"
#include "cast/synthdata.hpp"

namespace cast {

enum class SelectionKind { full, random_k, top_k, bottom_k, bucket_index };

std::string to_string(SelectionKind kind);
SelectionKind parse_selection_kind(std::string_view name);

struct SelectionStrategy {
  SelectionKind kind = SelectionKind::full;
  double fraction = 0.25;  // random_k, top_k, bottom_k
  int bucket = 1;          // bucket_index, 1-based
  unsigned seed = 42;      // random_k
};

// Number of heads a fractional strategy selects out of n: ceil(k * n).
std::size_t budget_count(double fraction, std::size_t n);

// Selected heads in (layer, head) order.
std::vector<HeadId> select_trainable(const Bucketing& bucketing, const SelectionStrategy& strategy);

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct TrainConfig {
  double lr = 1e-4;
  int epochs = 1;
  int batch_size = 4;
  int grad_accum = 2;
  unsigned seed = 42;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool pcgrad = false;
  // 0 trains the query slices directly. Ranks above d_head are clamped.
  int adapter_rank = 32;
  // 0 means alpha = effective rank, so the adapter scale is 1.
  double alpha = 0.0;
  // Utility-reference microbatch size for PCGrad; 0 means batch_size.
  int reference_batch_size = 0;

  // Throws ConfigError.
  void validate() const;
  int effective_rank(const ModelConfig& cfg) const;
  double effective_alpha(const ModelConfig& cfg) const;
};

nlohmann::json to_json(const TrainConfig& cfg);

// SGD or bias-corrected Adam over a flat parameter vector; step() returns the update.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::size_t n, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8);
  Optimizer(const TrainConfig& cfg, std::size_t n);

  std::vector<double> step(std::span<const double> g);

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

struct AdapterState {
  std::vector<HeadAdapter> adapters;  // one per head, (layer, head) order
};

// A ~ N(0, 1/d_model) from `seed`, B = 0, scale alpha / r. Throws ConfigError
// unless 0 < rank <= d_head.
AdapterState attach_adapters(const TransformerModel& model, const std::vector<HeadId>& heads,
                             int rank, double alpha, unsigned seed);
// Adds scale * A * B into each adapted head's query columns.
void merge_adapters(TransformerModel& model, const AdapterState& state);

struct EpochSnapshot {
  int epoch = 0;
  double acc_gen = 0.0;
  double ref_safe = 0.0;
};

struct TrainHistory {
  std::vector<double> step_losses;  // one per optimizer step, alignment objective
  std::vector<double> reference_losses;  // PCGrad only
  // PCGrad only: dot(applied update direction, utility reference gradient).
  std::vector<double> reference_dots;
  std::vector<EpochSnapshot> epochs;
  std::size_t trainable_parameters = 0;
  double wall_clock_seconds = 0.0;
};

// Deterministic fields only unless include_timing is set.
nlohmann::json to_json(const TrainHistory& h, bool include_timing = false);

// Held-out sets evaluated after every epoch; either pointer may be null.
struct SnapshotSets {
  const UtilitySet* utility = nullptr;
  const SafetySet* safety = nullptr;
};

struct TrainResult {
  TransformerModel model;
  TrainHistory history;
};

TrainResult train_sft(const TransformerModel& model, const AlignmentSet& data,
                      const std::vector<HeadId>& trainable, const TrainConfig& cfg,
                      const SnapshotSets& snapshots = {});

struct PcgradProjection {
  std::vector<double> a;  // g_a projected off g_b when they conflict
  std::vector<double> b;  // g_b projected off the original g_a
  bool conflict = false;
};

PcgradProjection pcgrad_project(const std::vector<double>& g_a, const std::vector<double>& g_b);
std::vector<double> pcgrad_combine(const std::vector<double>& g_a,
                                   const std::vector<double>& g_b);

// With cfg.pcgrad unset this is train_sft.
TrainResult train_pcgrad(const TransformerModel& model, const AlignmentSet& data,
                         const UtilitySet& util_ref, const std::vector<HeadId>& trainable,
                         const TrainConfig& cfg, const SnapshotSets& snapshots = {});

// SHA-256 over every parameter byte outside the given heads' query slices.
std::string frozen_parameter_hash(const TransformerModel& model,
                                  const std::vector<HeadId>& trainable);

}  // namespace cast
