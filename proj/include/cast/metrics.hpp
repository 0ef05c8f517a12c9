#pragma once

// Trade-off metrics: cost ratios between a base and an aligned model, and the
// correlation statistics relating bucket conflict scores to realized costs.

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace cast {

struct ConflictMap;
struct Bucketing;

struct EvalReport {
  std::vector<std::pair<std::string, double>> utility;  // per-task accuracy
  double mean_utility = 0.0;                           // U
  std::string primary_task;
  double primary = 0.0;                                // M
  std::vector<std::pair<std::string, double>> safety;  // per-split refusal
  double mean_safety = 0.0;                            // S
};

// Fills the means from the listed components. `primary_task` must name a utility entry.
EvalReport make_eval_report(std::vector<std::pair<std::string, double>> utility,
                            std::vector<std::pair<std::string, double>> safety,
                            const std::string& primary_task);

inline constexpr double kDefaultCostEpsilon = 1e-6;

struct CostRatios {
  double ucr = 0.0;
  double task_cr = 0.0;
  double epsilon = kDefaultCostEpsilon;
};

// ucr = max(0, (U_b - U_a) / ((S_a - S_b) + eps)); task_cr likewise with M.
CostRatios cost_ratios(const EvalReport& base, const EvalReport& aligned,
                       double eps = kDefaultCostEpsilon);

// nullopt signals an undefined correlation (a zero-variance input).
std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys);
std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys);

struct CorrelationReport {
  std::vector<double> mean_scores;  // x: mean score per bucket
  std::vector<double> ucr;          // y
  std::vector<double> task_cr;
  std::optional<double> pearson_ucr, spearman_ucr;
  std::optional<double> pearson_task, spearman_task;
};

CorrelationReport bucket_validity(std::span<const double> bucket_mean_scores,
                                  std::span<const CostRatios> per_bucket);
// Bucket means are taken under the bucketing's score variant.
CorrelationReport bucket_validity(const ConflictMap& map, const Bucketing& bucketing,
                                  std::span<const CostRatios> per_bucket);

nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const CostRatios& c);
nlohmann::json to_json(const CorrelationReport& c);

}  // namespace cast
