// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cast/alignment.hpp"
#include "cast/diagnosis.hpp"
#include "cast/experiment.hpp"
#include "cast/metrics.hpp"
#include "cast/ranking.hpp"

using namespace cast;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += ok ? 0 : 1;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Relative error is only meaningful where |g| dominates the ~1e-11 roundoff of
// a 1e-5 central difference. The conditioned sample uses |g| >= 1e-4; the
// unconditioned one floors the denominator at 1e-4.
void gradient_correctness() {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 8;
  std::mt19937_64 rng(20240611);
  cfg.init_seed = static_cast<unsigned>(rng());
  TransformerModel model = init_model(cfg);

  std::vector<Example> batch;
  for (int i = 0; i < 8; ++i) {
    Example e;
    e.prompt = {vocab::kBos};
    const int len = 2 + static_cast<int>(rng() % 5);
    for (int j = 0; j < len; ++j) {
      e.prompt.push_back(static_cast<int>(rng() % 16));
    }
    e.target = static_cast<int>(rng() % 16);
    batch.push_back(e);
  }
  auto loss = [&](ad::Tape& t) { return answer_loss(t, model, batch).loss; };
  const auto params = model.parameters();

  // Analytic gradient once to choose the sample.
  model.zero_grads();
  {
    ad::Tape t;
    t.backward(loss(t));
  }
  std::vector<ad::GradientProbe> large, any;
  while (large.size() < 24 || any.size() < 24) {
    ad::Parameter* p = params[rng() % params.size()];
    const std::size_t i = rng() % p->size();
    if (any.size() < 24) {
      any.push_back({p, i});
    }
    if (large.size() < 24 && std::abs(p->grad[i]) >= 1e-4) {
      large.push_back({p, i});
    }
  }
  const double rel = ad::finite_difference_check(loss, params, 1e-5, large);

  model.zero_grads();
  {
    ad::Tape t;
    t.backward(loss(t));
  }
  double floored = 0.0;
  for (const auto& probe : any) {
    double& slot = probe.param->value[probe.index];
    const double orig = slot;
    slot = orig + 1e-5;
    ad::Tape t1;
    const double hi = loss(t1).item();
    slot = orig - 1e-5;
    ad::Tape t2;
    const double lo = loss(t2).item();
    slot = orig;
    const double g = probe.param->grad[probe.index];
    floored = std::max(floored, std::abs((hi - lo) / 2e-5 - g) / std::max(std::abs(g), 1e-4));
  }
  const double secs = seconds_since(t0);
  report(1, rel <= 1e-6 && floored <= 1e-6 && secs < 10.0,
         "max rel err " + fmt("%.2e", rel) + " on 24 entries with |g| >= 1e-4, " +
             fmt("%.2e", floored) + " on 24 unconditioned entries (denominator >= 1e-4), " +
             fmt("%.2f", secs) + " s");
}

void formula_edge_cases() {
  const HeadGradient g{HeadId{0, 0}, {0.3, -1.2, 2.5, 0.7}};
  HeadGradient neg = g, perp{HeadId{0, 0}, {1.2, 0.3, 0.0, 0.0}}, scaled = g;
  for (double& v : neg.vector) {
    v = -v;
  }
  for (double& v : scaled.vector) {
    v *= 37.5;
  }
  const HeadGradient other{HeadId{0, 0}, {-0.4, 0.9, 1.1, -2.0}};
  HeadGradient other_scaled = other;
  for (double& v : other_scaled.vector) {
    v *= 1e-3;
  }
  struct Case {
    const char* name;
    double got, want;
  };
  const Case cases[] = {
      {"O(g,g)", *optimization_conflict(g, g), 0.0},
      {"O(g,-g)", *optimization_conflict(g, neg), 1.0},
      {"O(g,g_perp)", *optimization_conflict(g, perp), 0.5},
      {"S(0.5,0.5)", functional_sensitivity(0.5, 0.5), 1.0},
      {"S(1,0)", functional_sensitivity(1.0, 0.0), std::exp(1.0)},
      {"S(0,1)", functional_sensitivity(0.0, 1.0), std::exp(-1.0)},
      {"C(0,s)", conflict_score(0.0, 1.7), 0.0},
      {"O scale", *optimization_conflict(scaled, other_scaled), *optimization_conflict(g, other)},
  };
  double worst = 0.0;
  std::string worst_name = "none";
  for (const auto& c : cases) {
    const double err = std::abs(c.got - c.want);
    if (err > worst) {
      worst = err;
      worst_name = c.name;
    }
  }
  report(2, worst <= 1e-12, "max abs err " + fmt("%.1e", worst) + " (" + worst_name + ")");
}

EvalReport paper_report(double gen, double mmlu, double safe) {
  // Only the averages enter the ratios; a second task pins the mean to `gen`.
  return make_eval_report({{"mmlu", mmlu}, {"rest", 2.0 * gen - mmlu}}, {{"safe", safe}}, "mmlu");
}

void paper_metrics() {
  const EvalReport base = paper_report(66.10, 59.38, 67.22);
  const CostRatios risky = cost_ratios(base, paper_report(56.02, 48.52, 91.79));
  const std::vector<double> mean_c = {1.27, 0.88, 0.67, 0.47};
  const std::vector<CostRatios> ucr = {{0.41, 0.44}, {0.37, 0.29}, {0.27, 0.25}, {0.19, 0.14}};
  const auto rho = bucket_validity(mean_c, ucr).spearman_ucr;
  const bool ok = std::abs(risky.ucr - 0.410) <= 0.005 && std::abs(risky.task_cr - 0.442) <= 0.005 &&
                  rho && *rho == 1.0;
  report(3, ok,
         "UCR " + fmt("%.4f", risky.ucr) + ", MMLU-CR " + fmt("%.4f", risky.task_cr) +
             ", Spearman " + (rho ? fmt("%.6f", *rho) : std::string("undefined")));
}

void rank_oracles() {
  std::mt19937_64 rng(4);
  double rank_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 49;
    std::vector<double> v(n);
    const auto levels = 1 + rng() % n;  // few levels force ties
    for (double& x : v) {
      x = static_cast<double>(rng() % levels) * 0.25;
    }
    const auto got = percentile_rank(v);
    for (std::size_t i = 0; i < n; ++i) {
      double smaller = 0.0, equal = 0.0;
      for (double x : v) {
        smaller += x < v[i] ? 1.0 : 0.0;
        equal += x == v[i] ? 1.0 : 0.0;
      }
      const double want = (smaller + (equal - 1.0) / 2.0) / static_cast<double>(n - 1);
      rank_err = std::max(rank_err, std::abs(got[i] - want));
    }
  }
  double rho_err = 0.0;
  std::size_t perms = 0;
  for (std::size_t n = 2; n <= 6; ++n) {
    std::vector<double> x(n);
    std::iota(x.begin(), x.end(), 1.0);
    std::vector<double> y = x;
    do {
      double d2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        d2 += (x[i] - y[i]) * (x[i] - y[i]);
      }
      const double nn = static_cast<double>(n);
      const double want = 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
      rho_err = std::max(rho_err, std::abs(*spearman(x, y) - want));
      ++perms;
    } while (std::next_permutation(y.begin(), y.end()));
  }
  report(4, rank_err <= 1e-12 && rho_err <= 1e-12,
         "percentile rank max err " + fmt("%.1e", rank_err) + " over 1000 arrays; spearman max err " +
             fmt("%.1e", rho_err) + " over " + std::to_string(perms) + " permutations");
}

void pcgrad_properties() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + rng() % 63;
    std::vector<double> a(d), b(d);
    for (std::size_t i = 0; i < d; ++i) {
      a[i] = n(rng);
      b[i] = n(rng);
    }
    const auto p = pcgrad_project(a, b);
    worst = std::min({worst, std::inner_product(p.a.begin(), p.a.end(), b.begin(), 0.0),
                      std::inner_product(p.b.begin(), p.b.end(), a.begin(), 0.0)});
  }
  const auto hand = pcgrad_project({1.0, 0.0}, {-1.0, 1.0});
  const bool exact = hand.a == std::vector<double>{0.5, 0.5};
  report(5, worst >= -1e-12 && exact,
         "min post-projection dot " + fmt("%.2e", worst) + "; (1,0)/(-1,1) -> (" +
             fmt("%g", hand.a[0]) + "," + fmt("%g", hand.a[1]) + ")");
}

// Every selection kind, with and without adapters and PCGrad, on a small model.
bool freezing_sweep(std::string& detail) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 12;
  const auto model = init_model(cfg);
  DataOptions opts;
  opts.vocab_size = 24;
  opts.modulus = 8;
  const auto data = gen_alignment(32, {0.25, 0.25, 0.25, 0.25}, 1, opts);
  const auto util = gen_utility(TaskKind::modular_add, 32, 2, opts);
  ConflictMap map;
  map.config = cfg;
  double c = 1.0;
  for (auto h : all_heads(cfg)) {
    map.records.push_back({h, 0.5, 0, 0, 0, 0, 1, c, false});
    c /= 2.0;
  }
  const auto b = bucketize(map, 2);
  int checked = 0;
  for (auto kind : {SelectionKind::full, SelectionKind::random_k, SelectionKind::top_k,
                    SelectionKind::bottom_k, SelectionKind::bucket_index}) {
    for (int rank : {0, 4}) {
      for (bool pc : {false, true}) {
        SelectionStrategy s;
        s.kind = kind;
        s.bucket = 2;
        s.fraction = 0.5;
        const auto heads = select_trainable(b, s);
        TrainConfig tc;
        tc.lr = 1e-2;
        tc.adapter_rank = rank;
        tc.pcgrad = pc;
        const auto r = train_pcgrad(model, data, util, heads, tc);
        if (frozen_parameter_hash(r.model, heads) != frozen_parameter_hash(model, heads)) {
          detail = "hash changed for " + to_string(kind);
          return false;
        }
        ++checked;
      }
    }
  }
  detail = std::to_string(checked) + " small-model arms";
  return true;
}

void desk_experiment() {
  const ExperimentConfig cfg = load_experiment_config(CAST_SOURCE_DIR "/configs/default.yaml");
  const auto t0 = Clock::now();
  const ExperimentOutcome out = run_experiment(cfg);
  const double secs = seconds_since(t0);

  std::string sweep;
  const bool sweep_ok = freezing_sweep(sweep);
  int intact = 0;
  for (const auto& r : out.runs) {
    intact += r.error.empty() && r.frozen_intact ? 1 : 0;
  }
  report(6, sweep_ok && intact == static_cast<int>(out.runs.size()),
         sweep + "; " + std::to_string(intact) + "/" + std::to_string(out.runs.size()) +
             " experiment runs with unchanged frozen hash");

  auto per_seed = [&](const std::string& arm, auto field) {
    std::vector<double> v;
    for (const auto& r : out.runs) {
      if (r.arm == arm && r.error.empty()) {
        v.push_back(field(r));
      }
    }
    return v;
  };
  const std::string risky = "bucket_1";
  const std::string safe = "bucket_" + std::to_string(cfg.diagnosis.buckets);
  auto acc = [](const ArmRun& r) { return r.report.primary; };
  auto ref = [](const ArmRun& r) { return r.report.mean_safety; };
  const auto acc_r = per_seed(risky, acc), acc_s = per_seed(safe, acc);
  const auto ref_r = per_seed(risky, ref), ref_s = per_seed(safe, ref);
  const bool complete = acc_r.size() == cfg.seeds.size() && acc_s.size() == cfg.seeds.size();
  const double m_acc_r = complete ? median(acc_r) : NAN, m_acc_s = complete ? median(acc_s) : NAN;
  const double m_ref_r = complete ? median(ref_r) : NAN, m_ref_s = complete ? median(ref_s) : NAN;
  const auto& rho_json = out.report["bucket_validity"]["unified"]["spearman_ucr"];
  const bool rho_defined = rho_json.is_number();
  const double rho = rho_defined ? rho_json.get<double>() : NAN;

  const bool a = complete && m_acc_s >= m_acc_r;
  const bool b = complete && m_ref_r >= 0.8 && m_ref_s >= 0.8;
  const bool c = rho_defined && rho >= 0.5;
  const bool timely = secs < 15.0 * 60.0;
  report(7, a && b && c && timely,
         std::string("(a) ") + (a ? "ok" : "no") + " Acc_gen B4 " + fmt("%.4f", m_acc_s) +
             " vs B1 " + fmt("%.4f", m_acc_r) + "; (b) " + (b ? "ok" : "no") + " Ref_safe B1 " +
             fmt("%.4f", m_ref_r) + " B4 " + fmt("%.4f", m_ref_s) + "; (c) " + (c ? "ok" : "no") +
             " Spearman " + (rho_defined ? fmt("%.4f", rho) : std::string("undefined")) + "; " +
             fmt("%.0f", secs) + " s");

  const ExperimentOutcome again = run_experiment(cfg);
  const std::string first = dump_report(out.report);
  const bool same = first == dump_report(again.report) && out.arms_csv == again.arms_csv;
  report(8, same,
         std::string(same ? "identical" : "different") + " reports across two runs of the default config (" +
             std::to_string(first.size()) + " bytes)");
}

}  // namespace

int main() {
  gradient_correctness();
  formula_edge_cases();
  paper_metrics();
  rank_oracles();
  pcgrad_properties();
  desk_experiment();
  return failures == 0 ? 0 : 1;
}
