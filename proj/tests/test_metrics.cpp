#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "cast/diagnosis.hpp"
#include "cast/errors.hpp"
#include "cast/metrics.hpp"
#include "cast/ranking.hpp"
#include "doctest.h"

using namespace cast;

namespace {

EvalReport report(double u, double m, double s) {
  return make_eval_report({{"modular_add", m}, {"other", 2 * u - m}}, {{"vanilla", s}},
                          "modular_add");
}

double closed_form_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  }
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST_CASE("eval report means are arithmetic averages") {
  const auto r = make_eval_report({{"a", 0.2}, {"b", 0.6}}, {{"x", 1.0}, {"y", 0.5}}, "b");
  CHECK(r.mean_utility == doctest::Approx(0.4));
  CHECK(r.primary == 0.6);
  CHECK(r.mean_safety == doctest::Approx(0.75));
  CHECK_THROWS_AS(make_eval_report({{"a", 0.2}}, {{"x", 1.0}}, "c"), ConfigError);
  CHECK_THROWS_AS(make_eval_report({}, {{"x", 1.0}}, "a"), ConfigError);
}

TEST_CASE("cost ratios reproduce the Llama risky-zone row") {
  const auto base = report(66.10, 59.38, 67.22);
  const auto risky = report(56.02, 48.52, 91.79);
  const auto c = cost_ratios(base, risky);
  CHECK(std::abs(c.ucr - 0.410) <= 0.005);
  CHECK(std::abs(c.task_cr - 0.442) <= 0.005);
  // (66.10 - 56.02) / (91.79 - 67.22)
  CHECK(c.ucr == doctest::Approx(10.08 / 24.57).epsilon(1e-6));
}

TEST_CASE("cost ratio of the Llama full-SFT row") {
  const auto c = cost_ratios(report(66.10, 59.38, 67.22), report(36.78, 30.0, 90.61));
  CHECK(c.ucr == doctest::Approx(1.2535).epsilon(1e-4));
}

TEST_CASE("cost ratios clip at zero") {
  const auto base = report(0.5, 0.5, 0.5);
  const auto better = report(0.6, 0.7, 0.9);
  const auto c = cost_ratios(base, better);
  CHECK(c.ucr == 0.0);
  CHECK(c.task_cr == 0.0);
  CHECK_THROWS_AS(cost_ratios(base, better, 0.0), InputError);
}

TEST_CASE("pearson closed-form cases") {
  const std::vector<double> x = {1, 2, 3};
  CHECK(pearson(x, std::vector<double>{2, 4, 6}).value() == doctest::Approx(1.0));
  CHECK(pearson(x, std::vector<double>{6, 4, 2}).value() == doctest::Approx(-1.0));
  // cov = 8/3 * ..., r = 8 / sqrt(2 * 32.667) by hand.
  CHECK(pearson(x, std::vector<double>{1, 4, 9}).value() == doctest::Approx(0.98974).epsilon(1e-4));
  CHECK_FALSE(pearson(x, std::vector<double>{5, 5, 5}).has_value());
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 2}), InputError);
}

TEST_CASE("spearman closed-form cases") {
  const std::vector<double> x = {1, 2, 3};
  CHECK(spearman(x, std::vector<double>{1, 8, 27}).value() == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{3, 2, 1}).value() == doctest::Approx(-1.0));
  CHECK(spearman(std::vector<double>{1, 1, 2}, std::vector<double>{3, 3, 5}).value() ==
        doctest::Approx(1.0));
}

TEST_CASE("spearman matches 1 - 6 sum d^2 / (n (n^2 - 1)) over every permutation") {
  for (std::size_t n = 2; n <= 6; ++n) {
    std::vector<double> x(n);
    std::iota(x.begin(), x.end(), 1.0);
    std::vector<double> y = x;
    do {
      CHECK(std::abs(spearman(x, y).value() - closed_form_spearman(x, y)) < 1e-12);
    } while (std::next_permutation(y.begin(), y.end()));
  }
}

TEST_CASE("correlations are invariant under positive affine maps") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::vector<double> x(12), y(12), ya(12);
  for (std::size_t i = 0; i < 12; ++i) {
    x[i] = n(rng);
    y[i] = n(rng);
    ya[i] = 3.0 * y[i] - 7.0;
  }
  CHECK(pearson(x, ya).value() == doctest::Approx(pearson(x, y).value()).epsilon(1e-12));
  CHECK(spearman(x, ya).value() == doctest::Approx(spearman(x, y).value()).epsilon(1e-12));
}

TEST_CASE("bucket validity on the Llama unified block is perfectly monotone") {
  const std::vector<double> c = {1.27, 0.88, 0.67, 0.47};
  const std::vector<CostRatios> printed = {{0.41, 0.44}, {0.37, 0.29}, {0.27, 0.25}, {0.19, 0.14}};
  const auto r = bucket_validity(c, printed);
  CHECK(r.spearman_ucr.value() == 1.0);
  CHECK(r.spearman_task.value() == 1.0);
  CHECK(r.pearson_ucr.value() > 0.9);

  // The same block recomputed from its per-bucket averages.
  const auto base = report(66.10, 59.38, 67.22);
  const std::vector<CostRatios> derived = {
      cost_ratios(base, report(56.02, 48.52, 91.79)), cost_ratios(base, report(57.27, 52.40, 91.29)),
      cost_ratios(base, report(58.71, 52.52, 94.79)), cost_ratios(base, report(61.34, 55.73, 92.62))};
  CHECK(bucket_validity(c, derived).spearman_ucr.value() == 1.0);
}

TEST_CASE("flat costs surface an undefined correlation") {
  const std::vector<double> c = {4, 3, 2, 1};
  const std::vector<CostRatios> flat(4, CostRatios{0.2, 0.2});
  const auto r = bucket_validity(c, flat);
  CHECK_FALSE(r.pearson_ucr.has_value());
  CHECK_FALSE(r.spearman_ucr.has_value());
  CHECK(to_json(r)["spearman_ucr"].is_null());
  CHECK_THROWS_AS(bucket_validity(c, std::vector<CostRatios>(3)), InputError);
}

TEST_CASE("bucket validity averages the bucketing's score") {
  ConflictMap map;
  map.config.n_layers = 2;
  map.config.n_heads = 2;
  map.config.d_model = 16;
  const std::vector<double> cs = {0.9, 0.7, 0.3, 0.1};
  for (std::size_t i = 0; i < 4; ++i) {
    ConflictRecord r;
    r.head = all_heads(map.config)[i];
    r.c = cs[i];
    map.records.push_back(r);
  }
  const auto b = bucketize(map, 2);
  const std::vector<CostRatios> costs = {{0.5, 0.5}, {0.1, 0.1}};
  const auto r = bucket_validity(map, b, costs);
  REQUIRE(r.mean_scores.size() == 2);
  CHECK(r.mean_scores[0] == doctest::Approx(0.8));
  CHECK(r.mean_scores[1] == doctest::Approx(0.2));
}
