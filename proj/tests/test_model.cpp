#include <cmath>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "cast/errors.hpp"
#include "cast/model.hpp"
#include "cast/synthdata.hpp"
#include "doctest.h"

using namespace cast;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.vocab_size = 16;
  c.max_seq_len = 8;
  c.init_seed = 5;
  return c;
}

TokenBatch sample_batch() {
  const std::vector<std::vector<int>> seqs = {{1, 5, 9, 2}, {1, 7, 3, 8}};
  return make_batch(seqs);
}

std::vector<double> logits_of(const TransformerModel& m, const TokenBatch& b,
                              const HeadMask& mask = {}) {
  ad::Tape t;
  auto r = forward(t, m, b, mask);
  return {r.logits.values().begin(), r.logits.values().end()};
}

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat as_mat(const ad::Parameter& p, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Mat>(p.value.data(), rows, cols);
}

Mat layernorm(const Mat& x, const ad::Parameter& g, const ad::Parameter& b) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      out(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * g.value[c] + b.value[c];
    }
  }
  return out;
}

// Residual stream with every attention block removed.
Mat attention_free_logits(const TransformerModel& m, const TokenBatch& b) {
  const int d = m.config.d_model;
  Mat x(static_cast<Eigen::Index>(b.ids.size()), d);
  for (std::size_t i = 0; i < b.ids.size(); ++i) {
    for (int c = 0; c < d; ++c) {
      x(i, c) = m.token_embedding.value[b.ids[i] * d + c] +
                m.position_embedding.value[(i % b.seq) * d + c];
    }
  }
  for (const auto& w : m.layers) {
    Mat up = layernorm(x, w.ln2_gain, w.ln2_bias) * as_mat(w.w1, d, 4 * d);
    for (Eigen::Index r = 0; r < up.rows(); ++r) {
      for (Eigen::Index c = 0; c < up.cols(); ++c) {
        const double v = up(r, c) + w.b1.value[c];
        up(r, c) = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
      }
    }
    Mat down = up * as_mat(w.w2, 4 * d, d);
    for (Eigen::Index r = 0; r < down.rows(); ++r) {
      for (int c = 0; c < d; ++c) {
        down(r, c) += w.b2.value[c];
      }
    }
    x += down;
  }
  return layernorm(x, m.final_gain, m.final_bias) *
         as_mat(m.unembedding, d, m.config.vocab_size);
}

}  // namespace

TEST_CASE("init is deterministic per seed") {
  const auto a = init_model(small_config());
  const auto b = init_model(small_config());
  auto c_cfg = small_config();
  c_cfg.init_seed = 6;
  const auto c = init_model(c_cfg);
  CHECK(a.layers[0].wq.value == b.layers[0].wq.value);
  CHECK(a.unembedding.value == b.unembedding.value);
  CHECK(a.layers[0].wq.value != c.layers[0].wq.value);
}

TEST_CASE("init draws normal(0, 0.02) weights and unit layernorm gains") {
  ModelConfig cfg;
  const auto m = init_model(cfg);
  double sum = 0.0, sq = 0.0;
  for (double v : m.layers[1].w1.value) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(m.layers[1].w1.size());
  CHECK(std::abs(sum / n) < 0.002);
  CHECK(std::sqrt(sq / n) == doctest::Approx(0.02).epsilon(0.05));
  for (double g : m.layers[0].ln1_gain.value) {
    CHECK(g == 1.0);
  }
  for (double b : m.final_bias.value) {
    CHECK(b == 0.0);
  }
}

TEST_CASE("parameter count is a closed-form function of the config") {
  for (const auto& cfg : {small_config(), ModelConfig{}}) {
    const std::size_t d = cfg.d_model, v = cfg.vocab_size, s = cfg.max_seq_len;
    const std::size_t per_layer = 4 * d * d + 4 * d + d * 4 * d + 4 * d + 4 * d * d + d;
    const std::size_t expect = v * d + s * d + cfg.n_layers * per_layer + 2 * d + d * v;
    CHECK(expected_parameter_count(cfg) == expect);
    CHECK(init_model(cfg).parameter_count() == expect);
  }
}

TEST_CASE("default desk config has 16 heads") {
  ModelConfig cfg;
  CHECK(cfg.head_count() == 16);
  CHECK(all_heads(cfg).size() == 16);
}

TEST_CASE("d_model not divisible by n_heads is a config error") {
  auto cfg = small_config();
  cfg.d_model = 15;
  CHECK_THROWS_AS(init_model(cfg), ConfigError);
}

TEST_CASE("empty mask reproduces the mask-free forward bit for bit") {
  const auto m = init_model(small_config());
  const auto b = sample_batch();
  ad::Tape t;
  auto plain = forward_logits(t, m, b);
  const std::vector<double> expect(plain.values().begin(), plain.values().end());
  CHECK(logits_of(m, b, HeadMask{}) == expect);
}

TEST_CASE("masking every head equals the attention-free network") {
  const auto m = init_model(small_config());
  const auto b = sample_batch();
  HeadMask all;
  for (auto h : all_heads(m.config)) {
    all.add(h);
  }
  const auto got = logits_of(m, b, all);
  const Mat expect = attention_free_logits(m, b);
  REQUIRE(got.size() == static_cast<std::size_t>(expect.size()));
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    worst = std::max(worst, std::abs(got[i] - expect.data()[i]));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("masking one head changes the logits and no parameter") {
  const auto m = init_model(small_config());
  const auto before = m.layers[1].wq.value;
  const auto b = sample_batch();
  const auto plain = logits_of(m, b);
  const auto masked = logits_of(m, b, HeadMask{HeadId{1, 0}});
  double diff = 0.0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    diff = std::max(diff, std::abs(plain[i] - masked[i]));
  }
  CHECK(diff > 1e-9);
  CHECK(m.layers[1].wq.value == before);
}

TEST_CASE("over-length sequence is an input error") {
  const auto m = init_model(small_config());
  const std::vector<std::vector<int>> seqs = {std::vector<int>(9, 1)};
  ad::Tape t;
  CHECK_THROWS_AS(forward(t, m, make_batch(seqs)), InputError);
}

TEST_CASE("head slices partition each layer's query matrix") {
  ModelConfig cfg;
  auto m = init_model(cfg);
  CHECK(head_param_slice(m, HeadId{0, 0}).size() == 1024);
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::set<std::size_t> seen;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto s = head_param_slice(m, HeadId{l, h});
      for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(seen.insert(s.flat_index(i)).second);
      }
    }
    CHECK(seen.size() == m.layers[l].wq.size());
  }
  CHECK_THROWS_AS(head_param_slice(m, HeadId{4, 0}), InputError);
  CHECK_THROWS_AS(head_param_slice(m, HeadId{0, -1}), InputError);
}

TEST_CASE("writing through a head slice shows up in W_q") {
  auto m = init_model(small_config());
  auto s = head_param_slice(m, HeadId{1, 1});
  s[3] = 42.0;
  CHECK(m.layers[1].wq.value[s.flat_index(3)] == 42.0);
  // d_head 8, d_model 16: element 3 of head 1 sits at row 0, column 8 + 3.
  CHECK(s.flat_index(3) == 11);
}

TEST_CASE("untrained model is near chance on a 64-token vocabulary") {
  ModelConfig cfg;
  const auto m = init_model(cfg);
  DataOptions opts;
  opts.modulus = 59;
  const UtilitySet data = gen_utility(TaskKind::modular_add, 2000, 9, opts);
  const double acc = evaluate_utility(m, data);
  CHECK(acc < 0.06);
}

TEST_CASE("refusal evaluation counts REFUSE predictions") {
  ModelConfig cfg = small_config();
  auto m = init_model(cfg);
  // Constant final representation: logits are the column sums of the unembedding.
  for (double& g : m.final_gain.value) {
    g = 0.0;
  }
  for (double& b : m.final_bias.value) {
    b = 1.0;
  }
  for (double& u : m.unembedding.value) {
    u = 0.0;
  }
  DataOptions opts;
  opts.vocab_size = cfg.vocab_size;
  opts.modulus = 8;
  const SafetySet harmful = gen_safety(50, 3, false, opts);
  for (int r = 0; r < cfg.d_model; ++r) {
    m.unembedding.value[r * cfg.vocab_size + vocab::kRefuse] = 1.0;
  }
  CHECK(evaluate_refusal(m, harmful) == 1.0);
  for (int r = 0; r < cfg.d_model; ++r) {
    m.unembedding.value[r * cfg.vocab_size + vocab::kRefuse] = -1.0;
  }
  CHECK(evaluate_refusal(m, harmful) == 0.0);
  CHECK_THROWS_AS(evaluate_refusal(m, SafetySet{}), InputError);
  CHECK_THROWS_AS(evaluate_utility(m, UtilitySet{}), InputError);
}
