#include "cast/model.hpp"

#include <algorithm>
#include <random>

#include "cast/errors.hpp"
#include "cast/synthdata.hpp"

namespace cast {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || vocab_size < 1 || max_seq_len < 1) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

std::string to_string(HeadId h) {
  return "L" + std::to_string(h.layer) + "H" + std::to_string(h.head);
}

std::vector<HeadId> all_heads(const ModelConfig& cfg) {
  std::vector<HeadId> out;
  out.reserve(static_cast<std::size_t>(cfg.head_count()));
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      out.push_back({l, h});
    }
  }
  return out;
}

void check_head(const ModelConfig& cfg, HeadId h) {
  if (h.layer < 0 || h.layer >= cfg.n_layers || h.head < 0 || h.head >= cfg.n_heads) {
    throw InputError("head " + to_string(h) + " outside a model with " +
                     std::to_string(cfg.n_layers) + " layers x " + std::to_string(cfg.n_heads) +
                     " heads");
  }
}

std::vector<ad::Parameter*> TransformerModel::parameters() {
  std::vector<ad::Parameter*> out{&token_embedding, &position_embedding};
  for (auto& l : layers) {
    for (ad::Parameter* p : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gain,
                             &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2}) {
      out.push_back(p);
    }
  }
  out.push_back(&final_gain);
  out.push_back(&final_bias);
  out.push_back(&unembedding);
  return out;
}

std::vector<const ad::Parameter*> TransformerModel::parameters() const {
  auto mutable_list = const_cast<TransformerModel*>(this)->parameters();
  return {mutable_list.begin(), mutable_list.end()};
}

std::size_t TransformerModel::parameter_count() const {
  std::size_t n = 0;
  for (const ad::Parameter* p : parameters()) {
    n += p->size();
  }
  return n;
}

void TransformerModel::zero_grads() {
  for (ad::Parameter* p : parameters()) {
    p->zero_grad();
  }
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  const std::size_t per_layer = 4 * d + 4 * d * d + 2 * (d * 4 * d) + 4 * d + d;
  return v * d + static_cast<std::size_t>(c.max_seq_len) * d +
         static_cast<std::size_t>(c.n_layers) * per_layer + 2 * d + d * v;
}

TransformerModel init_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = static_cast<std::size_t>(config.d_model);
  const std::size_t v = static_cast<std::size_t>(config.vocab_size);
  std::mt19937_64 rng(config.init_seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto gaussian = [&](std::string name, ad::Shape shape) {
    ad::Parameter p(std::move(name), std::move(shape));
    for (double& x : p.value) {
      x = normal(rng);
    }
    return p;
  };
  auto constant = [](std::string name, std::size_t n, double value) {
    ad::Parameter p(std::move(name), {n});
    std::fill(p.value.begin(), p.value.end(), value);
    return p;
  };

  TransformerModel m;
  m.config = config;
  m.token_embedding = gaussian("token_embedding", {v, d});
  m.position_embedding =
      gaussian("position_embedding", {static_cast<std::size_t>(config.max_seq_len), d});
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerWeights w;
    w.ln1_gain = constant(pre + "ln1.gain", d, 1.0);
    w.ln1_bias = constant(pre + "ln1.bias", d, 0.0);
    w.wq = gaussian(pre + "attn.wq", {d, d});
    w.wk = gaussian(pre + "attn.wk", {d, d});
    w.wv = gaussian(pre + "attn.wv", {d, d});
    w.wo = gaussian(pre + "attn.wo", {d, d});
    w.ln2_gain = constant(pre + "ln2.gain", d, 1.0);
    w.ln2_bias = constant(pre + "ln2.bias", d, 0.0);
    w.w1 = gaussian(pre + "mlp.w1", {d, 4 * d});
    w.b1 = constant(pre + "mlp.b1", 4 * d, 0.0);
    w.w2 = gaussian(pre + "mlp.w2", {4 * d, d});
    w.b2 = constant(pre + "mlp.b2", d, 0.0);
    m.layers.push_back(std::move(w));
  }
  m.final_gain = constant("final.gain", d, 1.0);
  m.final_bias = constant("final.bias", d, 0.0);
  m.unembedding = gaussian("unembedding", {d, v});
  return m;
}

HeadSlice head_param_slice(TransformerModel& model, HeadId h) {
  check_head(model.config, h);
  const auto d = static_cast<std::size_t>(model.config.d_model);
  const auto dh = static_cast<std::size_t>(model.config.d_head());
  return {model.layers[static_cast<std::size_t>(h.layer)].wq.value.data(), d, dh,
          static_cast<std::size_t>(h.head)};
}

ConstHeadSlice head_param_slice(const TransformerModel& model, HeadId h) {
  check_head(model.config, h);
  const auto d = static_cast<std::size_t>(model.config.d_model);
  const auto dh = static_cast<std::size_t>(model.config.d_head());
  return {model.layers[static_cast<std::size_t>(h.layer)].wq.value.data(), d, dh,
          static_cast<std::size_t>(h.head)};
}

ConstHeadSlice head_slice_of(std::span<const double> wq, const ModelConfig& cfg, HeadId h) {
  check_head(cfg, h);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  if (wq.size() != d * d) {
    throw DimensionError("head_slice_of: buffer of " + std::to_string(wq.size()) +
                         " elements is not d_model x d_model");
  }
  return {wq.data(), d, static_cast<std::size_t>(cfg.d_head()), static_cast<std::size_t>(h.head)};
}

TokenBatch make_batch(std::span<const std::vector<int>> sequences) {
  if (sequences.empty()) {
    throw InputError("make_batch: no sequences");
  }
  TokenBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) {
    if (s.empty()) {
      throw InputError("make_batch: empty sequence");
    }
    b.seq = std::max(b.seq, s.size());
  }
  b.ids.assign(b.batch * b.seq, vocab::kPad);
  for (std::size_t i = 0; i < b.batch; ++i) {
    std::copy(sequences[i].begin(), sequences[i].end(), b.ids.begin() + i * b.seq);
    b.lengths.push_back(sequences[i].size());
  }
  return b;
}

namespace {

template <class Model>
ForwardResult forward_impl(ad::Tape& tape, Model& model, const TokenBatch& batch,
                           const HeadMask* mask, std::span<HeadAdapter> adapters) {
  const ModelConfig& cfg = model.config;
  if (batch.seq > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw InputError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (batch.ids.size() != batch.batch * batch.seq || batch.ids.empty()) {
    throw InputError("forward: malformed token batch");
  }
  for (int id : batch.ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw InputError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
  }
  for (const HeadAdapter& a : adapters) {
    check_head(cfg, a.head);
  }

  std::vector<int> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i % batch.seq);
  }

  ForwardResult result;
  ad::DiffArray x = ad::op_add(ad::op_embed_lookup(tape.bind(model.token_embedding), batch.ids),
                               ad::op_embed_lookup(tape.bind(model.position_embedding), positions));
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  std::vector<unsigned char> keep;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& w = model.layers[l];
    ad::DiffArray h = ad::op_layernorm(x, tape.bind(w.ln1_gain), tape.bind(w.ln1_bias));

    ad::DiffArray wq = tape.bind(w.wq);
    result.query_weights.push_back(wq);
    for (HeadAdapter& a : adapters) {
      if (static_cast<std::size_t>(a.head.layer) != l) {
        continue;
      }
      ad::DiffArray delta =
          ad::op_scale(ad::op_matmul(tape.bind(a.down), tape.bind(a.up)), a.scale);
      wq = ad::op_add_into_columns(wq, delta, static_cast<std::size_t>(a.head.head) * dh);
    }

    ad::DiffArray q = ad::op_matmul(h, wq);
    ad::DiffArray k = ad::op_matmul(h, tape.bind(w.wk));
    ad::DiffArray v = ad::op_matmul(h, tape.bind(w.wv));
    std::span<const unsigned char> keep_span;
    if (mask != nullptr && !mask->empty()) {
      keep.assign(static_cast<std::size_t>(cfg.n_heads), 1);
      for (const HeadId& head : mask->heads()) {
        check_head(cfg, head);
        if (static_cast<std::size_t>(head.layer) == l) {
          keep[static_cast<std::size_t>(head.head)] = 0;
        }
      }
      keep_span = keep;
    }
    ad::DiffArray attn = ad::op_causal_attention(q, k, v, batch.batch, batch.seq,
                                                 static_cast<std::size_t>(cfg.n_heads), keep_span);
    x = ad::op_add(x, ad::op_matmul(attn, tape.bind(w.wo)));

    ad::DiffArray h2 = ad::op_layernorm(x, tape.bind(w.ln2_gain), tape.bind(w.ln2_bias));
    ad::DiffArray up = ad::op_gelu(ad::op_add_bias(ad::op_matmul(h2, tape.bind(w.w1)),
                                                   tape.bind(w.b1)));
    x = ad::op_add(x, ad::op_add_bias(ad::op_matmul(up, tape.bind(w.w2)), tape.bind(w.b2)));
  }
  x = ad::op_layernorm(x, tape.bind(model.final_gain), tape.bind(model.final_bias));
  ad::DiffArray logits = ad::op_matmul(x, tape.bind(model.unembedding));
  result.logits = ad::op_reshape(
      logits, {batch.batch, batch.seq, static_cast<std::size_t>(cfg.vocab_size)});
  return result;
}

}  // namespace

ForwardResult forward(ad::Tape& tape, const TransformerModel& model, const TokenBatch& batch,
                      const HeadMask& mask, std::span<HeadAdapter> adapters) {
  return forward_impl(tape, model, batch, &mask, adapters);
}

ForwardResult forward(ad::Tape& tape, TransformerModel& model, const TokenBatch& batch,
                      const HeadMask& mask, std::span<HeadAdapter> adapters) {
  return forward_impl(tape, model, batch, &mask, adapters);
}

ad::DiffArray forward_logits(ad::Tape& tape, const TransformerModel& model,
                             const TokenBatch& batch) {
  return forward_impl(tape, model, batch, nullptr, {}).logits;
}

namespace {

template <class Model>
LossResult answer_loss_impl(ad::Tape& tape, Model& model, std::span<const Example> examples,
                            const HeadMask& mask, std::span<HeadAdapter> adapters) {
  if (examples.empty()) {
    throw InputError("answer_loss: empty example batch");
  }
  std::vector<std::vector<int>> prompts;
  prompts.reserve(examples.size());
  for (const Example& e : examples) {
    prompts.push_back(e.prompt);
  }
  const TokenBatch batch = make_batch(prompts);
  LossResult r;
  r.forward = forward(tape, model, batch, mask, adapters);
  std::vector<int> targets(batch.ids.size(), vocab::kPad);
  std::vector<unsigned char> active(batch.ids.size(), 0);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const std::size_t row = b * batch.seq + batch.lengths[b] - 1;
    targets[row] = examples[b].target;
    active[row] = 1;
  }
  r.loss = ad::op_cross_entropy(r.forward.logits, targets, active);
  return r;
}

}  // namespace

LossResult answer_loss(ad::Tape& tape, const TransformerModel& model,
                       std::span<const Example> examples, const HeadMask& mask,
                       std::span<HeadAdapter> adapters) {
  return answer_loss_impl(tape, model, examples, mask, adapters);
}

LossResult answer_loss(ad::Tape& tape, TransformerModel& model, std::span<const Example> examples,
                       const HeadMask& mask, std::span<HeadAdapter> adapters) {
  return answer_loss_impl(tape, model, examples, mask, adapters);
}

std::vector<int> predict_next(const TransformerModel& model,
                              std::span<const std::vector<int>> prompts, const HeadMask& mask,
                              std::span<HeadAdapter> adapters, std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(prompts.size());
  const auto vocab_size = static_cast<std::size_t>(model.config.vocab_size);
  for (std::size_t start = 0; start < prompts.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, prompts.size() - start);
    const TokenBatch batch = make_batch(prompts.subspan(start, count));
    ad::Tape tape;
    const auto logits = forward(tape, model, batch, mask, adapters).logits.values();
    for (std::size_t b = 0; b < count; ++b) {
      const double* row = logits.data() + (b * batch.seq + batch.lengths[b] - 1) * vocab_size;
      out.push_back(static_cast<int>(std::max_element(row, row + vocab_size) - row));
    }
  }
  return out;
}

double evaluate_utility(const TransformerModel& model, const UtilitySet& data,
                        const HeadMask& mask) {
  if (data.samples.empty()) {
    throw InputError("evaluate_utility: empty dataset");
  }
  std::vector<std::vector<int>> prompts;
  prompts.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    // Only the prefix up to the graded position matters under causal attention.
    prompts.emplace_back(s.prompt.begin(),
                         s.prompt.begin() + static_cast<std::ptrdiff_t>(s.answer_position + 1));
  }
  const auto predicted = predict_next(model, prompts, mask);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    correct += predicted[i] == data.samples[i].answer ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

double evaluate_refusal(const TransformerModel& model, const SafetySet& data,
                        const HeadMask& mask) {
  if (data.samples.empty()) {
    throw InputError("evaluate_refusal: empty dataset");
  }
  std::vector<std::vector<int>> prompts;
  prompts.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    prompts.push_back(s.prompt);
  }
  const auto predicted = predict_next(model, prompts, mask);
  const auto refusals = std::count(predicted.begin(), predicted.end(), vocab::kRefuse);
  return static_cast<double>(refusals) / static_cast<double>(predicted.size());
}

}  // namespace cast
