#include "cast/alignment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "cast/checkpoint.hpp"
#include "cast/errors.hpp"

namespace cast {

std::string to_string(SelectionKind kind) {
  switch (kind) {
    case SelectionKind::full:
      return "full";
    case SelectionKind::random_k:
      return "random_k";
    case SelectionKind::top_k:
      return "top_k";
    case SelectionKind::bottom_k:
      return "bottom_k";
    case SelectionKind::bucket_index:
      return "bucket_index";
  }
  return "unknown";
}

SelectionKind parse_selection_kind(std::string_view name) {
  if (name == "full") {
    return SelectionKind::full;
  }
  if (name == "random" || name == "random_k") {
    return SelectionKind::random_k;
  }
  if (name == "top" || name == "top_k") {
    return SelectionKind::top_k;
  }
  if (name == "bottom" || name == "bottom_k") {
    return SelectionKind::bottom_k;
  }
  if (name == "bucket" || name == "bucket_index") {
    return SelectionKind::bucket_index;
  }
  throw ConfigError("unknown selection strategy '" + std::string(name) +
                    "' (expected full, random, bucket, top, bottom)");
}

std::size_t budget_count(double fraction, std::size_t n) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InputError("selection fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  // The epsilon keeps exact products such as 0.25 * 16 from rounding up.
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(count, 1, n);
}

std::vector<HeadId> select_trainable(const Bucketing& bucketing,
                                     const SelectionStrategy& strategy) {
  const auto& order = bucketing.order;
  if (order.empty()) {
    throw InputError("select_trainable: empty bucketing");
  }
  std::vector<HeadId> out;
  switch (strategy.kind) {
    case SelectionKind::full:
      out = order;
      break;
    case SelectionKind::bucket_index: {
      const int m = static_cast<int>(bucketing.buckets.size());
      if (strategy.bucket < 1 || strategy.bucket > m) {
        throw InputError("bucket index " + std::to_string(strategy.bucket) + " outside [1, " +
                         std::to_string(m) + "]");
      }
      out = bucketing.buckets[static_cast<std::size_t>(strategy.bucket - 1)];
      break;
    }
    case SelectionKind::top_k: {
      const auto n = budget_count(strategy.fraction, order.size());
      out.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
      break;
    }
    case SelectionKind::bottom_k: {
      const auto n = budget_count(strategy.fraction, order.size());
      out.assign(order.end() - static_cast<std::ptrdiff_t>(n), order.end());
      break;
    }
    case SelectionKind::random_k: {
      const auto n = budget_count(strategy.fraction, order.size());
      std::vector<HeadId> pool = order;
      std::sort(pool.begin(), pool.end());
      std::mt19937_64 rng(strategy.seed);
      // Partial Fisher-Yates with an explicit draw so results do not depend on
      // the standard library's shuffle implementation.
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
        std::swap(pool[i], pool[j]);
      }
      out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
      break;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") {
    return OptimizerKind::sgd;
  }
  if (name == "adam") {
    return OptimizerKind::adam;
  }
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected sgd, adam)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ConfigError("train: lr must be positive");
  }
  if (epochs < 1 || batch_size < 1 || grad_accum < 1) {
    throw ConfigError("train: epochs, batch_size and grad_accum must be positive");
  }
  if (adapter_rank < 0 || alpha < 0.0 || reference_batch_size < 0) {
    throw ConfigError("train: adapter_rank, alpha and reference_batch_size must be non-negative");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
      !(adam_eps > 0.0)) {
    throw ConfigError("train: adam betas must lie in [0, 1) and eps must be positive");
  }
}

int TrainConfig::effective_rank(const ModelConfig& cfg) const {
  return std::min(adapter_rank, cfg.d_head());
}

double TrainConfig::effective_alpha(const ModelConfig& cfg) const {
  return alpha > 0.0 ? alpha : static_cast<double>(effective_rank(cfg));
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"lr", cfg.lr},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"grad_accum", cfg.grad_accum},
          {"seed", cfg.seed},
          {"optimizer", to_string(cfg.optimizer)},
          {"adam_beta1", cfg.adam_beta1},
          {"adam_beta2", cfg.adam_beta2},
          {"adam_eps", cfg.adam_eps},
          {"pcgrad", cfg.pcgrad},
          {"adapter_rank", cfg.adapter_rank},
          {"alpha", cfg.alpha},
          {"reference_batch_size", cfg.reference_batch_size}};
}

Optimizer::Optimizer(OptimizerKind kind, double lr, std::size_t n, double beta1, double beta2,
                     double eps)
    : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

Optimizer::Optimizer(const TrainConfig& cfg, std::size_t n)
    : Optimizer(cfg.optimizer, cfg.lr, n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {}

std::vector<double> Optimizer::step(std::span<const double> g) {
  if (g.size() != m_.size()) {
    throw InputError("optimizer: gradient length " + std::to_string(g.size()) + ", expected " +
                     std::to_string(m_.size()));
  }
  std::vector<double> delta(g.size());
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      delta[i] = -lr_ * g[i];
    }
    return delta;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < g.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
    delta[i] = -lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
  return delta;
}

AdapterState attach_adapters(const TransformerModel& model, const std::vector<HeadId>& heads,
                             int rank, double alpha, unsigned seed) {
  const ModelConfig& cfg = model.config;
  if (rank < 1 || rank > cfg.d_head()) {
    throw ConfigError("adapter rank " + std::to_string(rank) + " outside [1, " +
                      std::to_string(cfg.d_head()) + "]");
  }
  if (!(alpha > 0.0)) {
    throw ConfigError("adapter alpha must be positive");
  }
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto r = static_cast<std::size_t>(rank);
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  std::vector<HeadId> sorted = heads;
  std::sort(sorted.begin(), sorted.end());
  std::seed_seq seq{seed, 0x6164u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  AdapterState state;
  for (const HeadId h : sorted) {
    check_head(cfg, h);
    HeadAdapter a;
    a.head = h;
    a.down = ad::Parameter("adapter." + to_string(h) + ".A", {d, r});
    a.up = ad::Parameter("adapter." + to_string(h) + ".B", {r, dh});
    for (double& v : a.down.value) {
      v = normal(rng);
    }
    a.scale = alpha / static_cast<double>(rank);
    state.adapters.push_back(std::move(a));
  }
  return state;
}

void merge_adapters(TransformerModel& model, const AdapterState& state) {
  const auto d = static_cast<std::size_t>(model.config.d_model);
  const auto dh = static_cast<std::size_t>(model.config.d_head());
  for (const HeadAdapter& a : state.adapters) {
    const std::size_t r = a.down.shape[1];
    auto& wq = model.layers[static_cast<std::size_t>(a.head.layer)].wq.value;
    const std::size_t col0 = static_cast<std::size_t>(a.head.head) * dh;
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < dh; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < r; ++k) {
          acc += a.down.value[i * r + k] * a.up.value[k * dh + j];
        }
        wq[i * d + col0 + j] += a.scale * acc;
      }
    }
  }
}

nlohmann::json to_json(const TrainHistory& h, bool include_timing) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"acc_gen", e.acc_gen}, {"ref_safe", e.ref_safe}});
  }
  nlohmann::json j = {{"step_losses", h.step_losses},
                      {"epochs", epochs},
                      {"trainable_parameters", h.trainable_parameters}};
  if (!h.reference_losses.empty()) {
    j["reference_losses"] = h.reference_losses;
    j["reference_dots"] = h.reference_dots;
  }
  if (include_timing) {
    j["wall_clock_seconds"] = h.wall_clock_seconds;
  }
  return j;
}

PcgradProjection pcgrad_project(const std::vector<double>& g_a, const std::vector<double>& g_b) {
  if (g_a.size() != g_b.size()) {
    throw InputError("pcgrad: gradient lengths differ (" + std::to_string(g_a.size()) + " vs " +
                     std::to_string(g_b.size()) + ")");
  }
  PcgradProjection p{g_a, g_b, false};
  const double dot = std::inner_product(g_a.begin(), g_a.end(), g_b.begin(), 0.0);
  if (!(dot < 0.0)) {
    return p;
  }
  p.conflict = true;
  const double nb = std::inner_product(g_b.begin(), g_b.end(), g_b.begin(), 0.0);
  const double na = std::inner_product(g_a.begin(), g_a.end(), g_a.begin(), 0.0);
  // dot < 0 implies both norms are nonzero.
  for (std::size_t i = 0; i < g_a.size(); ++i) {
    p.a[i] = g_a[i] - (dot / nb) * g_b[i];
    p.b[i] = g_b[i] - (dot / na) * g_a[i];
  }
  return p;
}

std::vector<double> pcgrad_combine(const std::vector<double>& g_a,
                                   const std::vector<double>& g_b) {
  PcgradProjection p = pcgrad_project(g_a, g_b);
  for (std::size_t i = 0; i < p.a.size(); ++i) {
    p.a[i] += p.b[i];
  }
  return std::move(p.a);
}

namespace {

// Flat view over whatever is being trained: either the selected heads' W_q
// columns or the adapters attached to them.
class TrainableSet {
 public:
  TrainableSet(TransformerModel& model, const std::vector<HeadId>& heads, const TrainConfig& cfg)
      : model_(model), heads_(heads) {
    std::sort(heads_.begin(), heads_.end());
    heads_.erase(std::unique(heads_.begin(), heads_.end()), heads_.end());
    for (const HeadId h : heads_) {
      check_head(model.config, h);
    }
    const int rank = cfg.effective_rank(model.config);
    if (rank > 0) {
      adapters_ = attach_adapters(model, heads_, rank, cfg.effective_alpha(model.config), cfg.seed);
      for (auto& a : adapters_.adapters) {
        for (double& v : a.down.value) {
          slots_.push_back(&v);
        }
        for (double& v : a.up.value) {
          slots_.push_back(&v);
        }
      }
    } else {
      for (const HeadId h : heads_) {
        const HeadSlice slice = head_param_slice(model, h);
        for (std::size_t i = 0; i < slice.size(); ++i) {
          slots_.push_back(&slice[i]);
        }
      }
    }
  }

  bool uses_adapters() const { return !adapters_.adapters.empty(); }
  std::size_t size() const { return slots_.size(); }
  std::span<HeadAdapter> adapters() { return adapters_.adapters; }

  void zero_adapter_grads() {
    for (auto& a : adapters_.adapters) {
      a.down.zero_grad();
      a.up.zero_grad();
    }
  }

  // Adds the trainable part of the latest backward pass into `out`.
  void accumulate_grad(const ForwardResult& fwd, std::vector<double>& out) const {
    std::size_t k = 0;
    if (uses_adapters()) {
      for (const auto& a : adapters_.adapters) {
        for (double g : a.down.grad) {
          out[k++] += g;
        }
        for (double g : a.up.grad) {
          out[k++] += g;
        }
      }
      return;
    }
    for (const HeadId h : heads_) {
      const auto g = head_slice_of(fwd.query_weights[static_cast<std::size_t>(h.layer)].grad(),
                                   model_.config, h);
      for (std::size_t i = 0; i < g.size(); ++i) {
        out[k++] += g[i];
      }
    }
  }

  void apply(const std::vector<double>& delta) {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      *slots_[i] += delta[i];
    }
  }

  void finish() {
    if (uses_adapters()) {
      merge_adapters(model_, adapters_);
    }
  }

 private:
  TransformerModel& model_;
  std::vector<HeadId> heads_;
  AdapterState adapters_;
  std::vector<double*> slots_;
};

// Mean loss over one microbatch; its gradient is added into `grad`.
double microbatch_gradient(const TransformerModel& model, TrainableSet& trainable,
                           std::span<const Example> batch, std::vector<double>& grad,
                           std::size_t step) {
  ad::Tape tape;
  trainable.zero_adapter_grads();
  LossResult r = answer_loss(tape, model, batch, {}, trainable.adapters());
  const double loss = r.loss.item();
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite training loss at step " + std::to_string(step));
  }
  tape.backward(r.loss);
  trainable.accumulate_grad(r.forward, grad);
  return loss;
}

// Each epoch visits the data in a fresh seeded order.
std::vector<std::size_t> epoch_order(std::size_t n, unsigned seed, unsigned stream, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{seed, stream, static_cast<unsigned>(epoch)};
  std::mt19937_64 rng(seq);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// Endless reshuffled stream of utility reference microbatches.
class ReferenceStream {
 public:
  ReferenceStream(const UtilitySet& data, std::size_t batch, unsigned seed)
      : examples_(examples_of(data)), batch_(batch), seed_(seed) {
    reshuffle();
  }

  std::vector<Example> next() {
    std::vector<Example> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        reshuffle();
      }
      out.push_back(examples_[order_[pos_++]]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_ = epoch_order(examples_.size(), seed_, 0x7265u, pass_++);
    pos_ = 0;
  }

  std::vector<Example> examples_;
  std::size_t batch_;
  unsigned seed_;
  int pass_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

TrainResult run_training(const TransformerModel& base, const AlignmentSet& data,
                         const UtilitySet* util_ref, const std::vector<HeadId>& heads,
                         const TrainConfig& cfg, const SnapshotSets& snapshots) {
  cfg.validate();
  if (heads.empty()) {
    throw InputError("training needs a nonempty trainable head set");
  }
  if (data.samples.empty()) {
    throw InputError("training needs a nonempty alignment set");
  }
  if (util_ref != nullptr && util_ref->samples.empty()) {
    throw InputError("PCGrad needs a nonempty utility reference set");
  }
  const auto start = std::chrono::steady_clock::now();

  TrainResult result{base, {}};
  TransformerModel& model = result.model;
  TrainableSet trainable(model, heads, cfg);
  Optimizer optimizer(cfg, trainable.size());
  TrainHistory& history = result.history;
  history.trainable_parameters = trainable.size();

  const auto examples = examples_of(data);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto micro_per_step = static_cast<std::size_t>(cfg.grad_accum);
  std::optional<ReferenceStream> reference;
  if (util_ref != nullptr) {
    const auto ref_bs = static_cast<std::size_t>(
        cfg.reference_batch_size > 0 ? cfg.reference_batch_size : cfg.batch_size);
    reference.emplace(*util_ref, ref_bs, cfg.seed);
  }

  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(examples.size(), cfg.seed, 0x616cu, epoch);
    std::vector<std::vector<Example>> micro;
    for (std::size_t i = 0; i < order.size(); i += bs) {
      std::vector<Example> mb;
      for (std::size_t j = i; j < std::min(i + bs, order.size()); ++j) {
        mb.push_back(examples[order[j]]);
      }
      micro.push_back(std::move(mb));
    }
    for (std::size_t first = 0; first < micro.size(); first += micro_per_step) {
      const std::size_t count = std::min(micro_per_step, micro.size() - first);
      std::vector<double> g_align(trainable.size(), 0.0);
      std::vector<double> g_ref;
      double loss = 0.0;
      double ref_loss = 0.0;
      for (std::size_t m = first; m < first + count; ++m) {
        loss += microbatch_gradient(model, trainable, micro[m], g_align, step);
      }
      if (reference) {
        g_ref.assign(trainable.size(), 0.0);
        for (std::size_t m = 0; m < count; ++m) {
          const auto ref_batch = reference->next();
          ref_loss += microbatch_gradient(model, trainable, ref_batch, g_ref, step);
        }
      }
      const double inv = 1.0 / static_cast<double>(count);
      for (double& g : g_align) {
        g *= inv;
      }
      std::vector<double> applied;
      if (reference) {
        for (double& g : g_ref) {
          g *= inv;
        }
        applied = pcgrad_combine(g_align, g_ref);
        history.reference_losses.push_back(ref_loss * inv);
        history.reference_dots.push_back(
            std::inner_product(applied.begin(), applied.end(), g_ref.begin(), 0.0));
      } else {
        applied = std::move(g_align);
      }
      trainable.apply(optimizer.step(applied));
      history.step_losses.push_back(loss * inv);
      ++step;
    }
    if (snapshots.utility != nullptr || snapshots.safety != nullptr) {
      // Snapshots see the merged weights without disturbing the adapters.
      TransformerModel probe = model;
      if (trainable.uses_adapters()) {
        AdapterState tmp;
        for (const auto& a : trainable.adapters()) {
          tmp.adapters.push_back(a);
        }
        merge_adapters(probe, tmp);
      }
      EpochSnapshot snap{epoch + 1, 0.0, 0.0};
      if (snapshots.utility != nullptr) {
        snap.acc_gen = evaluate_utility(probe, *snapshots.utility);
      }
      if (snapshots.safety != nullptr) {
        snap.ref_safe = evaluate_refusal(probe, *snapshots.safety);
      }
      history.epochs.push_back(snap);
    }
  }
  trainable.finish();
  history.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace

TrainResult train_sft(const TransformerModel& model, const AlignmentSet& data,
                      const std::vector<HeadId>& trainable, const TrainConfig& cfg,
                      const SnapshotSets& snapshots) {
  return run_training(model, data, nullptr, trainable, cfg, snapshots);
}

TrainResult train_pcgrad(const TransformerModel& model, const AlignmentSet& data,
                         const UtilitySet& util_ref, const std::vector<HeadId>& trainable,
                         const TrainConfig& cfg, const SnapshotSets& snapshots) {
  if (!cfg.pcgrad) {
    return train_sft(model, data, trainable, cfg, snapshots);
  }
  return run_training(model, data, &util_ref, trainable, cfg, snapshots);
}

std::string frozen_parameter_hash(const TransformerModel& model,
                                  const std::vector<HeadId>& trainable) {
  const ModelConfig& cfg = model.config;
  std::vector<std::vector<unsigned char>> trainable_cols(
      static_cast<std::size_t>(cfg.n_layers),
      std::vector<unsigned char>(static_cast<std::size_t>(cfg.d_model), 0));
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  for (const HeadId h : trainable) {
    check_head(cfg, h);
    auto& cols = trainable_cols[static_cast<std::size_t>(h.layer)];
    std::fill_n(cols.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(h.head) * dh),
                dh, 1);
  }
  std::vector<double> frozen;
  for (const ad::Parameter* p : model.parameters()) {
    const ad::Parameter* wq_of_layer = nullptr;
    std::size_t layer = 0;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      if (p == &model.layers[l].wq) {
        wq_of_layer = p;
        layer = l;
      }
    }
    if (wq_of_layer == nullptr) {
      frozen.insert(frozen.end(), p->value.begin(), p->value.end());
      continue;
    }
    const auto d = static_cast<std::size_t>(cfg.d_model);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      if (trainable_cols[layer][i % d] == 0) {
        frozen.push_back(p->value[i]);
      }
    }
  }
  return sha256_hex(frozen.data(), frozen.size() * sizeof(double));
}

}  // namespace cast
