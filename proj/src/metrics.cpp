#include "cast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cast/diagnosis.hpp"
#include "cast/errors.hpp"
#include "cast/ranking.hpp"

namespace cast {

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) {
      ++j;
    }
    const double avg = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) {
      ranks[idx[k]] = avg;
    }
    i = j + 1;
  }
  return ranks;
}

EvalReport make_eval_report(std::vector<std::pair<std::string, double>> utility,
                            std::vector<std::pair<std::string, double>> safety,
                            const std::string& primary_task) {
  if (utility.empty() || safety.empty()) {
    throw ConfigError("eval report needs at least one utility task and one safety split");
  }
  EvalReport r;
  r.utility = std::move(utility);
  r.safety = std::move(safety);
  r.primary_task = primary_task;
  double u = 0.0;
  bool found = false;
  for (const auto& [name, acc] : r.utility) {
    u += acc;
    if (name == primary_task) {
      r.primary = acc;
      found = true;
    }
  }
  if (!found) {
    throw ConfigError("primary task '" + primary_task + "' is not among the utility tasks");
  }
  r.mean_utility = u / static_cast<double>(r.utility.size());
  double s = 0.0;
  for (const auto& [name, ref] : r.safety) {
    s += ref;
  }
  r.mean_safety = s / static_cast<double>(r.safety.size());
  return r;
}

CostRatios cost_ratios(const EvalReport& base, const EvalReport& aligned, double eps) {
  if (!(eps > 0.0)) {
    throw InputError("cost_ratios: epsilon must be positive");
  }
  const double safety_gain = (aligned.mean_safety - base.mean_safety) + eps;
  CostRatios c;
  c.epsilon = eps;
  c.ucr = std::max(0.0, (base.mean_utility - aligned.mean_utility) / safety_gain);
  c.task_cr = std::max(0.0, (base.primary - aligned.primary) / safety_gain);
  return c;
}

std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw InputError("pearson: need two equal-length samples of size >= 2");
  }
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    return std::nullopt;
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw InputError("spearman: need two equal-length samples of size >= 2");
  }
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

CorrelationReport bucket_validity(std::span<const double> bucket_mean_scores,
                                  std::span<const CostRatios> per_bucket) {
  if (bucket_mean_scores.size() != per_bucket.size()) {
    throw InputError("bucket_validity: " + std::to_string(per_bucket.size()) +
                     " cost ratios for " + std::to_string(bucket_mean_scores.size()) +
                     " buckets");
  }
  CorrelationReport r;
  r.mean_scores.assign(bucket_mean_scores.begin(), bucket_mean_scores.end());
  for (const auto& c : per_bucket) {
    r.ucr.push_back(c.ucr);
    r.task_cr.push_back(c.task_cr);
  }
  r.pearson_ucr = pearson(r.mean_scores, r.ucr);
  r.spearman_ucr = spearman(r.mean_scores, r.ucr);
  r.pearson_task = pearson(r.mean_scores, r.task_cr);
  r.spearman_task = spearman(r.mean_scores, r.task_cr);
  return r;
}

CorrelationReport bucket_validity(const ConflictMap& map, const Bucketing& bucketing,
                                  std::span<const CostRatios> per_bucket) {
  std::vector<double> means;
  for (const auto& bucket : bucketing.buckets) {
    double total = 0.0;
    for (const HeadId h : bucket) {
      total += score_of(map.at(h), bucketing.score);
    }
    means.push_back(total / static_cast<double>(bucket.size()));
  }
  return bucket_validity(means, per_bucket);
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json utility = nlohmann::json::object();
  for (const auto& [k, v] : r.utility) {
    utility[k] = v;
  }
  nlohmann::json safety = nlohmann::json::object();
  for (const auto& [k, v] : r.safety) {
    safety[k] = v;
  }
  return {{"utility", utility},          {"mean_utility", r.mean_utility},
          {"primary_task", r.primary_task}, {"primary", r.primary},
          {"safety", safety},            {"mean_safety", r.mean_safety}};
}

nlohmann::json to_json(const CostRatios& c) {
  return {{"ucr", c.ucr}, {"task_cr", c.task_cr}, {"epsilon", c.epsilon}};
}

nlohmann::json to_json(const CorrelationReport& c) {
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t i = 0; i < c.mean_scores.size(); ++i) {
    pairs.push_back({{"bucket", i + 1},
                     {"mean_score", c.mean_scores[i]},
                     {"ucr", c.ucr[i]},
                     {"task_cr", c.task_cr[i]}});
  }
  return {{"pairs", pairs},
          {"pearson_ucr", optional_json(c.pearson_ucr)},
          {"spearman_ucr", optional_json(c.spearman_ucr)},
          {"pearson_task_cr", optional_json(c.pearson_task)},
          {"spearman_task_cr", optional_json(c.spearman_task)}};
}

}  // namespace cast
