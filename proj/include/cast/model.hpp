#pragma once

// Pre-layernorm decoder-only transformer with head-addressable query weights.

#include <compare>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cast/autodiff.hpp"

namespace cast {

struct UtilitySet;
struct SafetySet;
struct Example;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int vocab_size = 64;
  int max_seq_len = 16;
  unsigned init_seed = 21;

  int d_head() const { return d_model / n_heads; }
  int head_count() const { return n_layers * n_heads; }
  // Throws ConfigError.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
  int layer = 0;
  int head = 0;

  auto operator<=>(const HeadId&) const = default;
};

std::string to_string(HeadId h);
// All heads in (layer, head) order.
std::vector<HeadId> all_heads(const ModelConfig& cfg);
void check_head(const ModelConfig& cfg, HeadId h);

// Heads whose attention output is zeroed before the output projection.
class HeadMask {
 public:
  HeadMask() = default;
  HeadMask(std::initializer_list<HeadId> heads) : heads_(heads) {}
  explicit HeadMask(std::span<const HeadId> heads) : heads_(heads.begin(), heads.end()) {}

  void add(HeadId h) { heads_.insert(h); }
  bool contains(HeadId h) const { return heads_.count(h) != 0; }
  bool empty() const { return heads_.empty(); }
  const std::set<HeadId>& heads() const { return heads_; }

 private:
  std::set<HeadId> heads_;
};

struct LayerWeights {
  ad::Parameter ln1_gain, ln1_bias;
  ad::Parameter wq, wk, wv, wo;  // [d_model x d_model], no biases
  ad::Parameter ln2_gain, ln2_bias;
  ad::Parameter w1, b1;  // [d_model x 4 d_model], [4 d_model]
  ad::Parameter w2, b2;  // [4 d_model x d_model], [d_model]
};

struct TransformerModel {
  ModelConfig config;
  ad::Parameter token_embedding;     // [vocab x d_model]
  ad::Parameter position_embedding;  // [max_seq_len x d_model]
  std::vector<LayerWeights> layers;
  ad::Parameter final_gain, final_bias;
  ad::Parameter unembedding;  // [d_model x vocab]

  // Stable order used for checkpoints and hashing.
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grads();
};

TransformerModel init_model(const ModelConfig& config);
std::size_t expected_parameter_count(const ModelConfig& config);

// Strided view of theta_h: the d_head columns of a layer's W_q owned by one
// head, enumerated row-major (row r, column c -> index r * d_head + c).
template <class T>
class BasicHeadSlice {
 public:
  BasicHeadSlice(T* wq, std::size_t d_model, std::size_t d_head, std::size_t head)
      : wq_(wq), d_model_(d_model), d_head_(d_head), col0_(head * d_head) {}

  std::size_t size() const { return d_model_ * d_head_; }
  // Index into the layer's flat W_q buffer.
  std::size_t flat_index(std::size_t i) const {
    return (i / d_head_) * d_model_ + col0_ + i % d_head_;
  }
  T& operator[](std::size_t i) const { return wq_[flat_index(i)]; }
  std::vector<double> to_vector() const {
    std::vector<double> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = (*this)[i];
    }
    return out;
  }

 private:
  T* wq_;
  std::size_t d_model_;
  std::size_t d_head_;
  std::size_t col0_;
};

using HeadSlice = BasicHeadSlice<double>;
using ConstHeadSlice = BasicHeadSlice<const double>;

HeadSlice head_param_slice(TransformerModel& model, HeadId h);
ConstHeadSlice head_param_slice(const TransformerModel& model, HeadId h);
// Same layout over an arbitrary [d_model x d_model] buffer, e.g. a W_q gradient.
ConstHeadSlice head_slice_of(std::span<const double> wq, const ModelConfig& cfg, HeadId h);

// Low-rank update on one head's query columns: W_q[:, head] += scale * down * up.
struct HeadAdapter {
  HeadId head;
  ad::Parameter down;  // [d_model x r]
  ad::Parameter up;    // [r x d_head]
  double scale = 1.0;
};

// Right-padded token matrix.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;              // batch * seq
  std::vector<std::size_t> lengths;  // unpadded length per row
};

TokenBatch make_batch(std::span<const std::vector<int>> sequences);

struct ForwardResult {
  ad::DiffArray logits;                      // [batch x seq x vocab]
  std::vector<ad::DiffArray> query_weights;  // bound W_q leaf per layer
};

// Binding a const model keeps gradients on the tape; binding a mutable model
// accumulates them into the model's Parameter::grad buffers.
ForwardResult forward(ad::Tape& tape, const TransformerModel& model, const TokenBatch& batch,
                      const HeadMask& mask = {}, std::span<HeadAdapter> adapters = {});
ForwardResult forward(ad::Tape& tape, TransformerModel& model, const TokenBatch& batch,
                      const HeadMask& mask = {}, std::span<HeadAdapter> adapters = {});

// Forward with no mask argument at all; must match forward(..., HeadMask{}) bit for bit.
ad::DiffArray forward_logits(ad::Tape& tape, const TransformerModel& model,
                             const TokenBatch& batch);

struct LossResult {
  ad::DiffArray loss;  // mean cross-entropy at each example's last prompt position
  ForwardResult forward;
};

LossResult answer_loss(ad::Tape& tape, const TransformerModel& model,
                       std::span<const Example> examples, const HeadMask& mask = {},
                       std::span<HeadAdapter> adapters = {});
// Accumulates into the model's Parameter::grad buffers on backward.
LossResult answer_loss(ad::Tape& tape, TransformerModel& model, std::span<const Example> examples,
                       const HeadMask& mask = {}, std::span<HeadAdapter> adapters = {});

// Greedy next-token prediction after each prompt's last token.
std::vector<int> predict_next(const TransformerModel& model,
                              std::span<const std::vector<int>> prompts, const HeadMask& mask = {},
                              std::span<HeadAdapter> adapters = {}, std::size_t batch_size = 256);

double evaluate_utility(const TransformerModel& model, const UtilitySet& data,
                        const HeadMask& mask = {});
double evaluate_refusal(const TransformerModel& model, const SafetySet& data,
                        const HeadMask& mask = {});

}  // namespace cast
