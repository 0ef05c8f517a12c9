#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "cast/diagnosis.hpp"
#include "cast/errors.hpp"
#include "doctest.h"

using namespace cast;

namespace {

HeadGradient grad(std::vector<double> v) { return {HeadId{0, 0}, std::move(v)}; }

// Percentile rank by counting: (smaller + (equal - 1) / 2) / (N - 1).
std::vector<double> rank_oracle(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double smaller = 0, equal = 0;
    for (double x : v) {
      smaller += x < v[i];
      equal += x == v[i];
    }
    out[i] = (smaller + (equal - 1) / 2) / static_cast<double>(v.size() - 1);
  }
  return out;
}

ConflictMap synthetic_map(int layers, int heads, const std::vector<double>& c) {
  ConflictMap map;
  map.config.n_layers = layers;
  map.config.n_heads = heads;
  map.config.d_model = 8 * heads;
  std::size_t i = 0;
  for (auto h : all_heads(map.config)) {
    ConflictRecord r;
    r.head = h;
    r.c = c.at(i);
    r.o = 1.0 - c.at(i) / 10.0;
    r.s = static_cast<double>(i % 3) + 1.0;
    map.records.push_back(r);
    ++i;
  }
  return map;
}

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 24;
  c.max_seq_len = 8;
  c.init_seed = 9;
  return c;
}

DataOptions tiny_data() {
  DataOptions o;
  o.vocab_size = 24;
  o.modulus = 8;
  return o;
}

}  // namespace

TEST_CASE("optimization conflict edge cases") {
  const auto g = grad({1.0, -2.0, 3.0});
  CHECK(optimization_conflict(g, g).value() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(optimization_conflict(g, grad({-1.0, 2.0, -3.0})).value() ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(optimization_conflict(g, grad({2.0, 1.0, 0.0})).value() ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK_FALSE(optimization_conflict(g, grad({0.0, 0.0, 0.0})).has_value());
  CHECK_THROWS_AS(optimization_conflict(g, grad({1.0})), InputError);
}

TEST_CASE("optimization conflict is invariant to positive scaling") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<double> a(50), b(50);
  for (std::size_t i = 0; i < 50; ++i) {
    a[i] = n(rng);
    b[i] = n(rng);
  }
  const double base = optimization_conflict(grad(a), grad(b)).value();
  for (double k : {1e-6, 0.3, 7.0, 1e6}) {
    auto bs = b;
    for (double& x : bs) {
      x *= k;
    }
    CHECK(std::abs(optimization_conflict(grad(a), grad(bs)).value() - base) < 1e-12);
  }
}

TEST_CASE("functional sensitivity and conflict score") {
  CHECK(functional_sensitivity(0.5, 0.5) == 1.0);
  CHECK(std::abs(functional_sensitivity(1.0, 0.0) - std::exp(1.0)) < 1e-12);
  CHECK(std::abs(functional_sensitivity(0.0, 1.0) - 1.0 / std::exp(1.0)) < 1e-12);
  CHECK(conflict_score(0.0, 2.5) == 0.0);
  CHECK(conflict_score(0.5, 2.0) == 1.0);
  CHECK_THROWS_AS(functional_sensitivity(1.5, 0.0), InputError);
  CHECK_THROWS_AS(conflict_score(1.5, 1.0), InputError);
  CHECK_THROWS_AS(conflict_score(0.5, 0.0), InputError);
}

TEST_CASE("percentile rank matches the counting oracle") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 30;
    std::vector<double> v(n);
    for (double& x : v) {
      x = static_cast<double>(rng() % 6);
    }
    const auto got = percentile_rank(v);
    const auto expect = rank_oracle(v);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(got[i] - expect[i]) < 1e-12);
    }
  }
  const std::vector<double> flat = {2.0, 2.0, 2.0};
  for (double r : percentile_rank(flat)) {
    CHECK(r == 0.5);
  }
  const std::vector<double> one = {1.0};
  CHECK_THROWS_AS(percentile_rank(one), InputError);
}

TEST_CASE("bucketize sorts descending with (layer, head) tie break") {
  const auto map = synthetic_map(2, 2, {0.3, 0.9, 0.3, 0.1});
  const auto b = bucketize(map, 2);
  REQUIRE(b.order.size() == 4);
  CHECK(b.order[0] == HeadId{0, 1});
  CHECK(b.order[1] == HeadId{0, 0});
  CHECK(b.order[2] == HeadId{1, 0});
  CHECK(b.order[3] == HeadId{1, 1});
  CHECK(b.buckets[0] == std::vector<HeadId>{{0, 1}, {0, 0}});
  CHECK(b.bucket_of(HeadId{1, 1}) == 2);
}

TEST_CASE("uneven bucketing gives the first N mod M buckets one extra head") {
  std::vector<double> c(10);
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i] = static_cast<double>(i);
  }
  const auto b = bucketize(synthetic_map(5, 2, c), 4);
  REQUIRE(b.buckets.size() == 4);
  CHECK(b.buckets[0].size() == 3);
  CHECK(b.buckets[1].size() == 3);
  CHECK(b.buckets[2].size() == 2);
  CHECK(b.buckets[3].size() == 2);
  CHECK(b.buckets[0][0] == HeadId{4, 1});
  CHECK(b.buckets[3].back() == HeadId{0, 0});
  CHECK_THROWS_AS(bucketize(synthetic_map(5, 2, c), 0), InputError);
  CHECK_THROWS_AS(bucketize(synthetic_map(5, 2, c), 11), InputError);
}

TEST_CASE("score variants order by o, s or c") {
  const auto map = synthetic_map(2, 2, {0.3, 0.9, 0.2, 0.1});
  const auto by_o = bucketize(map, 4, ScoreKind::o_only);
  CHECK(by_o.order.front() == HeadId{1, 1});  // smallest c, largest o
  const auto by_s = bucketize(map, 4, ScoreKind::s_only);
  CHECK(by_s.order.front() == HeadId{1, 0});  // s = 3
  CHECK(parse_score_kind("o_only") == ScoreKind::o_only);
  CHECK_THROWS_AS(parse_score_kind("gradient"), ConfigError);
}

TEST_CASE("conflict map csv and json round trip") {
  auto map = synthetic_map(2, 2, {0.3, 0.9, 0.2, 0.1});
  map.provenance.model_checksum = "abc";
  const auto b = bucketize(map, 2);
  const std::string csv = conflict_map_csv(map, b);
  CHECK(csv.rfind("layer,head,o,h_gen,h_safe,rank_gen,rank_safe,s,c,rank,bucket\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  const auto j = conflict_map_json(map, b);
  const auto back = conflict_map_from_json(j);
  CHECK(back.provenance.model_checksum == "abc");
  REQUIRE(back.records.size() == 4);
  CHECK(back.records[1].c == map.records[1].c);
  CHECK(conflict_map_json(back, bucketize(back, 2)) == j);

  auto broken = j;
  broken["records"].erase(0);
  CHECK_THROWS_AS(conflict_map_from_json(broken), InputError);
}

TEST_CASE("head gradients match central differences of the summed loss") {
  auto model = init_model(tiny());
  // Larger weights keep the query gradients well above finite-difference noise.
  for (auto* p : model.parameters()) {
    for (double& v : p->value) {
      v *= 10.0;
    }
  }
  const auto data = gen_utility(TaskKind::modular_add, 10, 4, tiny_data());
  const auto examples = examples_of(data);
  const auto grads = compute_head_gradients(model, examples, 4);
  REQUIRE(grads.size() == 4);

  auto summed_loss = [&]() {
    ad::Tape t;
    return answer_loss(t, std::as_const(model), examples).loss.item() *
           static_cast<double>(examples.size());
  };
  for (const auto& g : grads) {
    auto slice = head_param_slice(model, g.head);
    REQUIRE(g.vector.size() == slice.size());
    for (std::size_t i : {std::size_t{0}, std::size_t{5}, slice.size() - 1}) {
      const double orig = slice[i];
      slice[i] = orig + 1e-6;
      const double hi = summed_loss();
      slice[i] = orig - 1e-6;
      const double lo = summed_loss();
      slice[i] = orig;
      const double numeric = (hi - lo) / 2e-6;
      CHECK(std::abs(numeric) > 1e-4);
      CHECK(std::abs(g.vector[i] - numeric) <= 1e-6 * std::abs(numeric));
    }
  }
}

TEST_CASE("ablation sensitivity equals the masked accuracy shift") {
  const auto model = init_model(tiny());
  const auto util = gen_utility(TaskKind::modular_add, 64, 5, tiny_data());
  const auto safe = gen_safety(64, 6, false, tiny_data());
  const Baseline base = compute_baseline(model, util, safe);
  for (auto h : all_heads(model.config)) {
    const Sensitivity s = ablation_sensitivity(model, h, util, safe, base);
    CHECK(s.h_gen == std::abs(base.acc_gen - evaluate_utility(model, util, HeadMask{h})));
    CHECK(s.h_safe == std::abs(base.ref_safe - evaluate_refusal(model, safe, HeadMask{h})));
  }
}

TEST_CASE("conflict map assembles o, ranks, s and c consistently") {
  const auto model = init_model(tiny());
  const auto util = gen_utility(TaskKind::modular_add, 32, 5, tiny_data());
  const auto safe = gen_safety(32, 6, false, tiny_data());
  const auto map = build_conflict_map(model, util, safe);
  REQUIRE(map.records.size() == 4);
  std::vector<double> hg, hs;
  for (const auto& r : map.records) {
    hg.push_back(r.h_gen);
    hs.push_back(r.h_safe);
  }
  const auto rg = rank_oracle(hg);
  const auto rs = rank_oracle(hs);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& r = map.records[i];
    CHECK(r.o >= 0.0);
    CHECK(r.o <= 1.0);
    CHECK(r.rank_gen == doctest::Approx(rg[i]));
    CHECK(r.rank_safe == doctest::Approx(rs[i]));
    CHECK(r.s == doctest::Approx(std::exp(rg[i] - rs[i])));
    CHECK(r.c == doctest::Approx(r.o * r.s));
  }
  CHECK(map.at(HeadId{1, 1}).head == HeadId{1, 1});
  CHECK_THROWS_AS(map.at(HeadId{2, 0}), InputError);
}
