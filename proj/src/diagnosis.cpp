#include "cast/diagnosis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cast/checkpoint.hpp"
#include "cast/errors.hpp"
#include "cast/ranking.hpp"

namespace cast {

std::vector<HeadGradient> compute_head_gradients(const TransformerModel& model,
                                                 std::span<const Example> examples,
                                                 std::size_t batch_size) {
  if (examples.empty()) {
    throw InputError("compute_head_gradients: empty calibration set");
  }
  const ModelConfig& cfg = model.config;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  std::vector<std::vector<double>> wq_grads(static_cast<std::size_t>(cfg.n_layers),
                                            std::vector<double>(d * d, 0.0));
  for (std::size_t start = 0, batch_no = 0; start < examples.size();
       start += batch_size, ++batch_no) {
    const std::size_t count = std::min(batch_size, examples.size() - start);
    ad::Tape tape;
    LossResult r = answer_loss(tape, model, examples.subspan(start, count));
    if (!std::isfinite(r.loss.item())) {
      throw NumericError("compute_head_gradients: non-finite loss in batch " +
                         std::to_string(batch_no));
    }
    // Scale the batch mean back to a sum over its examples.
    tape.backward(ad::op_scale(r.loss, static_cast<double>(count)));
    for (std::size_t l = 0; l < wq_grads.size(); ++l) {
      const auto g = r.forward.query_weights[l].grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        wq_grads[l][i] += g[i];
      }
    }
  }
  std::vector<HeadGradient> out;
  for (const HeadId h : all_heads(cfg)) {
    out.push_back({h, head_slice_of(wq_grads[static_cast<std::size_t>(h.layer)], cfg, h)
                          .to_vector()});
  }
  return out;
}

std::vector<HeadGradient> compute_head_gradients(const TransformerModel& model,
                                                 const UtilitySet& data) {
  const auto ex = examples_of(data);
  return compute_head_gradients(model, ex);
}

std::vector<HeadGradient> compute_head_gradients(const TransformerModel& model,
                                                 const SafetySet& data) {
  const auto ex = examples_of(data);
  return compute_head_gradients(model, ex);
}

std::optional<double> optimization_conflict(const HeadGradient& g_safe,
                                            const HeadGradient& g_util) {
  if (g_safe.head != g_util.head) {
    throw InputError("optimization_conflict: gradients belong to heads " + to_string(g_safe.head) +
                     " and " + to_string(g_util.head));
  }
  if (g_safe.vector.size() != g_util.vector.size()) {
    throw InputError("optimization_conflict: gradient lengths differ");
  }
  double dot = 0.0;
  double nn_safe = 0.0;
  double nn_util = 0.0;
  for (std::size_t i = 0; i < g_safe.vector.size(); ++i) {
    dot += g_safe.vector[i] * g_util.vector[i];
    nn_safe += g_safe.vector[i] * g_safe.vector[i];
    nn_util += g_util.vector[i] * g_util.vector[i];
  }
  const double norm_safe = std::sqrt(nn_safe);
  const double norm_util = std::sqrt(nn_util);
  if (norm_safe < kDegenerateNorm || norm_util < kDegenerateNorm) {
    return std::nullopt;
  }
  const double cosine = dot / (norm_safe * norm_util);
  return std::clamp((1.0 - cosine) / 2.0, 0.0, 1.0);
}

Baseline compute_baseline(const TransformerModel& model, const UtilitySet& util,
                          const SafetySet& safe) {
  return {evaluate_utility(model, util), evaluate_refusal(model, safe)};
}

Sensitivity ablation_sensitivity(const TransformerModel& model, HeadId h, const UtilitySet& util,
                                 const SafetySet& safe, const Baseline& baseline) {
  check_head(model.config, h);
  const HeadMask mask{h};
  return {std::abs(evaluate_utility(model, util, mask) - baseline.acc_gen),
          std::abs(evaluate_refusal(model, safe, mask) - baseline.ref_safe)};
}

std::vector<double> percentile_rank(std::span<const double> values) {
  if (values.size() < 2) {
    throw InputError("percentile_rank: need at least 2 values, got " +
                     std::to_string(values.size()));
  }
  auto ranks = average_ranks(values);
  const double denom = static_cast<double>(values.size() - 1);
  for (double& r : ranks) {
    r /= denom;
  }
  return ranks;
}

double functional_sensitivity(double rank_gen, double rank_safe) {
  if (!(rank_gen >= 0.0 && rank_gen <= 1.0 && rank_safe >= 0.0 && rank_safe <= 1.0)) {
    throw InputError("functional_sensitivity: ranks must lie in [0, 1]");
  }
  return std::exp(rank_gen - rank_safe);
}

double conflict_score(double o, double s) {
  if (!(o >= 0.0 && o <= 1.0) || !(s > 0.0)) {
    throw InputError("conflict_score: requires o in [0, 1] and s > 0");
  }
  return o * s;
}

const ConflictRecord& ConflictMap::at(HeadId h) const {
  for (const auto& r : records) {
    if (r.head == h) {
      return r;
    }
  }
  throw InputError("conflict map has no record for " + to_string(h));
}

ConflictMap build_conflict_map(const TransformerModel& model, const UtilitySet& util,
                               const SafetySet& safe) {
  if (util.samples.empty() || safe.samples.empty()) {
    throw InputError("build_conflict_map: calibration sets must be nonempty");
  }
  ConflictMap map;
  map.config = model.config;
  map.provenance = {model_checksum(model), to_string(util.kind), util.seed,
                    util.samples.size(),   safe.seed,           safe.samples.size(),
                    compute_baseline(model, util, safe)};

  const auto g_util = compute_head_gradients(model, util);
  const auto g_safe = compute_head_gradients(model, safe);
  const auto heads = all_heads(model.config);
  std::vector<double> h_gen(heads.size());
  std::vector<double> h_safe(heads.size());
  map.records.resize(heads.size());
  for (std::size_t i = 0; i < heads.size(); ++i) {
    ConflictRecord& r = map.records[i];
    r.head = heads[i];
    try {
      const auto o = optimization_conflict(g_safe[i], g_util[i]);
      r.degenerate_gradient = !o.has_value();
      r.o = o.value_or(kDegenerateConflict);
      const Sensitivity sens =
          ablation_sensitivity(model, heads[i], util, safe, map.provenance.baseline);
      r.h_gen = sens.h_gen;
      r.h_safe = sens.h_safe;
    } catch (const Error& e) {
      throw NumericError("diagnosis of head " + to_string(heads[i]) + ": " + e.what());
    }
    h_gen[i] = r.h_gen;
    h_safe[i] = r.h_safe;
  }
  const auto rank_gen = percentile_rank(h_gen);
  const auto rank_safe = percentile_rank(h_safe);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    ConflictRecord& r = map.records[i];
    r.rank_gen = rank_gen[i];
    r.rank_safe = rank_safe[i];
    r.s = functional_sensitivity(r.rank_gen, r.rank_safe);
    r.c = conflict_score(r.o, r.s);
  }
  return map;
}

std::string to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::unified:
      return "unified";
    case ScoreKind::o_only:
      return "o_only";
    case ScoreKind::s_only:
      return "s_only";
  }
  return "unknown";
}

ScoreKind parse_score_kind(const std::string& name) {
  if (name == "unified") {
    return ScoreKind::unified;
  }
  if (name == "o_only") {
    return ScoreKind::o_only;
  }
  if (name == "s_only") {
    return ScoreKind::s_only;
  }
  throw ConfigError("unknown score variant '" + name + "' (expected unified, o_only, s_only)");
}

double score_of(const ConflictRecord& r, ScoreKind kind) {
  switch (kind) {
    case ScoreKind::o_only:
      return r.o;
    case ScoreKind::s_only:
      return r.s;
    case ScoreKind::unified:
      break;
  }
  return r.c;
}

int Bucketing::bucket_of(HeadId h) const {
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    if (std::find(buckets[b].begin(), buckets[b].end(), h) != buckets[b].end()) {
      return static_cast<int>(b) + 1;
    }
  }
  throw InputError("head " + to_string(h) + " is not in any bucket");
}

Bucketing bucketize(const ConflictMap& map, int m, ScoreKind score) {
  const int n = static_cast<int>(map.records.size());
  if (m < 1 || m > n) {
    throw InputError("bucketize: bucket count " + std::to_string(m) + " outside [1, " +
                     std::to_string(n) + "]");
  }
  std::vector<const ConflictRecord*> sorted;
  for (const auto& r : map.records) {
    sorted.push_back(&r);
  }
  std::stable_sort(sorted.begin(), sorted.end(),
                   [score](const ConflictRecord* a, const ConflictRecord* b) {
                     const double sa = score_of(*a, score);
                     const double sb = score_of(*b, score);
                     if (sa != sb) {
                       return sa > sb;
                     }
                     return a->head < b->head;
                   });
  Bucketing out;
  out.score = score;
  for (const auto* r : sorted) {
    out.order.push_back(r->head);
  }
  const int base = n / m;
  const int extra = n % m;
  std::size_t pos = 0;
  for (int b = 0; b < m; ++b) {
    const auto size = static_cast<std::size_t>(base + (b < extra ? 1 : 0));
    out.buckets.emplace_back(out.order.begin() + static_cast<std::ptrdiff_t>(pos),
                             out.order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return out;
}

namespace {

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::string conflict_map_csv(const ConflictMap& map, const Bucketing& bucketing) {
  std::ostringstream os;
  os << "layer,head,o,h_gen,h_safe,rank_gen,rank_safe,s,c,rank,bucket\n";
  for (const auto& r : map.records) {
    const auto it = std::find(bucketing.order.begin(), bucketing.order.end(), r.head);
    const auto rank = static_cast<int>(it - bucketing.order.begin()) + 1;
    os << r.head.layer << ',' << r.head.head << ',' << fmt9(r.o) << ',' << fmt9(r.h_gen) << ','
       << fmt9(r.h_safe) << ',' << fmt9(r.rank_gen) << ',' << fmt9(r.rank_safe) << ','
       << fmt9(r.s) << ',' << fmt9(score_of(r, bucketing.score)) << ',' << rank << ','
       << bucketing.bucket_of(r.head) << '\n';
  }
  return os.str();
}

nlohmann::json conflict_map_json(const ConflictMap& map, const Bucketing& bucketing) {
  nlohmann::json j;
  j["config"] = config_to_json(map.config);
  const auto& p = map.provenance;
  j["provenance"] = {{"model_checksum", p.model_checksum},
                     {"util_task", p.util_task},
                     {"util_seed", p.util_seed},
                     {"util_size", p.util_size},
                     {"safe_seed", p.safe_seed},
                     {"safe_size", p.safe_size},
                     {"baseline_acc_gen", p.baseline.acc_gen},
                     {"baseline_ref_safe", p.baseline.ref_safe}};
  j["score"] = to_string(bucketing.score);
  j["records"] = nlohmann::json::array();
  for (const auto& r : map.records) {
    j["records"].push_back({{"layer", r.head.layer},
                            {"head", r.head.head},
                            {"o", r.o},
                            {"h_gen", r.h_gen},
                            {"h_safe", r.h_safe},
                            {"rank_gen", r.rank_gen},
                            {"rank_safe", r.rank_safe},
                            {"s", r.s},
                            {"c", r.c},
                            {"degenerate_gradient", r.degenerate_gradient},
                            {"bucket", bucketing.bucket_of(r.head)}});
  }
  j["buckets"] = nlohmann::json::array();
  for (const auto& b : bucketing.buckets) {
    nlohmann::json heads = nlohmann::json::array();
    for (const HeadId h : b) {
      heads.push_back({h.layer, h.head});
    }
    j["buckets"].push_back(std::move(heads));
  }
  return j;
}

ConflictMap conflict_map_from_json(const nlohmann::json& j) {
  ConflictMap map;
  try {
    map.config = config_from_json(j.at("config"));
    const auto& p = j.at("provenance");
    map.provenance.model_checksum = p.at("model_checksum").get<std::string>();
    map.provenance.util_task = p.at("util_task").get<std::string>();
    map.provenance.util_seed = p.at("util_seed").get<unsigned>();
    map.provenance.util_size = p.at("util_size").get<std::size_t>();
    map.provenance.safe_seed = p.at("safe_seed").get<unsigned>();
    map.provenance.safe_size = p.at("safe_size").get<std::size_t>();
    map.provenance.baseline = {p.at("baseline_acc_gen").get<double>(),
                               p.at("baseline_ref_safe").get<double>()};
    for (const auto& r : j.at("records")) {
      ConflictRecord rec;
      rec.head = {r.at("layer").get<int>(), r.at("head").get<int>()};
      rec.o = r.at("o").get<double>();
      rec.h_gen = r.at("h_gen").get<double>();
      rec.h_safe = r.at("h_safe").get<double>();
      rec.rank_gen = r.at("rank_gen").get<double>();
      rec.rank_safe = r.at("rank_safe").get<double>();
      rec.s = r.at("s").get<double>();
      rec.c = r.at("c").get<double>();
      rec.degenerate_gradient = r.value("degenerate_gradient", false);
      map.records.push_back(rec);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("conflict map json: ") + e.what());
  }
  if (map.records.size() != static_cast<std::size_t>(map.config.head_count())) {
    throw InputError("conflict map json: expected " + std::to_string(map.config.head_count()) +
                     " records, found " + std::to_string(map.records.size()));
  }
  return map;
}

}  // namespace cast
