#pragma once

// Pre-alignment head-level conflict diagnosis.
//
// For every attention head h the diagnosis combines
//   o(h) = (1 - cos(g_safe(h), g_util(h))) / 2            optimization conflict
//   s(h) = exp(rank(h_gen(h)) - rank(h_safe(h)))          functional sensitivity
//   c(h) = o(h) * s(h)                                    conflict score
// where g_* are gradients w.r.t. the head's query columns and h_gen / h_safe
// are the absolute accuracy / refusal shifts when the head is ablated.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cast/model.hpp"
#include "cast/synthdata.hpp"

namespace cast {

struct HeadGradient {
  HeadId head;
  std::vector<double> vector;  // length d_model * d_head
};

// Summed (not averaged) gradient of the answer-position cross-entropy w.r.t.
// each head's theta_h. The model is read only.
std::vector<HeadGradient> compute_head_gradients(const TransformerModel& model,
                                                 std::span<const Example> examples,
                                                 std::size_t batch_size = 64);
std::vector<HeadGradient> compute_head_gradients(const TransformerModel& model,
                                                 const UtilitySet& data);
std::vector<HeadGradient> compute_head_gradients(const TransformerModel& model,
                                                 const SafetySet& data);

inline constexpr double kDegenerateNorm = 1e-12;
inline constexpr double kDegenerateConflict = 0.5;

// nullopt when either gradient norm is below kDegenerateNorm.
std::optional<double> optimization_conflict(const HeadGradient& g_safe,
                                            const HeadGradient& g_util);

struct Baseline {
  double acc_gen = 0.0;
  double ref_safe = 0.0;
};

Baseline compute_baseline(const TransformerModel& model, const UtilitySet& util,
                          const SafetySet& safe);

struct Sensitivity {
  double h_gen = 0.0;
  double h_safe = 0.0;
};

Sensitivity ablation_sensitivity(const TransformerModel& model, HeadId h, const UtilitySet& util,
                                 const SafetySet& safe, const Baseline& baseline);

// Tie-averaged ascending ranks scaled by 1/(N-1). Requires N >= 2.
std::vector<double> percentile_rank(std::span<const double> values);
double functional_sensitivity(double rank_gen, double rank_safe);
double conflict_score(double o, double s);

struct ConflictRecord {
  HeadId head;
  double o = 0.0;
  double h_gen = 0.0;
  double h_safe = 0.0;
  double rank_gen = 0.0;
  double rank_safe = 0.0;
  double s = 1.0;
  double c = 0.0;
  bool degenerate_gradient = false;
};

struct MapProvenance {
  std::string model_checksum;
  std::string util_task;
  unsigned util_seed = 0;
  std::size_t util_size = 0;
  unsigned safe_seed = 0;
  std::size_t safe_size = 0;
  Baseline baseline;
};

struct ConflictMap {
  ModelConfig config;
  std::vector<ConflictRecord> records;  // (layer, head) order
  MapProvenance provenance;

  const ConflictRecord& at(HeadId h) const;
};

ConflictMap build_conflict_map(const TransformerModel& model, const UtilitySet& util,
                               const SafetySet& safe);

enum class ScoreKind { unified, o_only, s_only };

std::string to_string(ScoreKind kind);
ScoreKind parse_score_kind(const std::string& name);
double score_of(const ConflictRecord& r, ScoreKind kind);

struct Bucketing {
  ScoreKind score = ScoreKind::unified;
  std::vector<HeadId> order;                 // descending score, ties by (layer, head)
  std::vector<std::vector<HeadId>> buckets;  // buckets[0] = Risky Zone, back() = Safe Zone

  // 1-based bucket index of `h`.
  int bucket_of(HeadId h) const;
};

Bucketing bucketize(const ConflictMap& map, int m, ScoreKind score = ScoreKind::unified);

// Header: layer,head,o,h_gen,h_safe,rank_gen,rank_safe,s,c,rank,bucket. The c
// column carries the bucketing's score variant; rank is the 1-based position in
// the descending order.
std::string conflict_map_csv(const ConflictMap& map, const Bucketing& bucketing);
nlohmann::json conflict_map_json(const ConflictMap& map, const Bucketing& bucketing);
ConflictMap conflict_map_from_json(const nlohmann::json& j);

}  // namespace cast
