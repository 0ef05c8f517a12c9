#include "cast/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>

#include <nlohmann/json.hpp>

#include "cast/errors.hpp"

namespace cast {

namespace {

enum Stream : unsigned {
  kCopyStream = 1,
  kModAddStream = 2,
  kVanillaHarmStream = 3,
  kAdversarialHarmStream = 4,
  kAlignmentStream = 5,
};

std::mt19937_64 make_rng(unsigned seed, unsigned stream) {
  std::seed_seq seq{seed, stream, 0x6361u};
  return std::mt19937_64(seq);
}

int uniform(std::mt19937_64& rng, int lo, int hi_inclusive) {
  return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

void require_positive(int n, const char* what) {
  if (n < 1) {
    throw InputError(std::string(what) + ": n must be >= 1, got " + std::to_string(n));
  }
}

std::vector<int> distractors(std::mt19937_64& rng, const DataOptions& opts) {
  const int k = uniform(rng, 1, opts.max_distractors);
  std::vector<int> out(static_cast<std::size_t>(k));
  for (int& t : out) {
    t = content_token(uniform(rng, 0, opts.content_count() - 1));
  }
  return out;
}

UtilitySample copy_sample(std::mt19937_64& rng, const DataOptions& opts) {
  UtilitySample s;
  s.prompt.push_back(vocab::kBos);
  for (int i = 0; i < opts.copy_length; ++i) {
    s.prompt.push_back(content_token(uniform(rng, 0, opts.content_count() - 1)));
  }
  s.prompt.push_back(vocab::kSep);
  s.answer = s.prompt[1];
  s.answer_position = s.prompt.size() - 1;
  return s;
}

// prefix: distractor tokens inserted between BOS and the operands.
UtilitySample modadd_sample(std::mt19937_64& rng, const DataOptions& opts,
                            const std::vector<int>& prefix = {}) {
  const int a = uniform(rng, 0, opts.modulus - 1);
  const int b = uniform(rng, 0, opts.modulus - 1);
  UtilitySample s;
  s.prompt.push_back(vocab::kBos);
  s.prompt.insert(s.prompt.end(), prefix.begin(), prefix.end());
  s.prompt.push_back(content_token(a));
  s.prompt.push_back(content_token(b));
  s.prompt.push_back(vocab::kSep);
  s.answer = content_token((a + b) % opts.modulus);
  s.answer_position = s.prompt.size() - 1;
  return s;
}

SafetySample harmful_sample(std::mt19937_64& rng, const DataOptions& opts, bool adversarial) {
  SafetySample s;
  s.prompt.push_back(vocab::kBos);
  if (adversarial) {
    const auto d = distractors(rng, opts);
    s.prompt.insert(s.prompt.end(), d.begin(), d.end());
  }
  s.prompt.push_back(vocab::kHarm);
  for (int i = 0; i < opts.payload_length; ++i) {
    s.prompt.push_back(content_token(uniform(rng, 0, opts.content_count() - 1)));
  }
  s.prompt.push_back(vocab::kSep);
  return s;
}

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy:
      return "copy";
    case TaskKind::modular_add:
      return "modular_add";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") {
    return TaskKind::copy;
  }
  if (name == "modular_add" || name == "modular-add") {
    return TaskKind::modular_add;
  }
  throw ConfigError("unknown utility task kind '" + std::string(name) + "'");
}

std::string to_string(Category c) {
  switch (c) {
    case Category::vanilla_harmful:
      return "vanilla-harmful";
    case Category::adversarial_harmful:
      return "adversarial-harmful";
    case Category::vanilla_benign:
      return "vanilla-benign";
    case Category::adversarial_benign:
      return "adversarial-benign";
  }
  return "unknown";
}

bool is_harmful(Category c) {
  return c == Category::vanilla_harmful || c == Category::adversarial_harmful;
}

void DataOptions::validate() const {
  if (content_count() < 2) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " leaves no content tokens");
  }
  if (modulus < 2 || modulus > content_count()) {
    throw ConfigError("modulus " + std::to_string(modulus) + " must lie in [2, " +
                      std::to_string(content_count()) + "]");
  }
  if (copy_length < 1 || payload_length < 0 || max_distractors < 1) {
    throw ConfigError("copy_length, payload_length and max_distractors must be positive");
  }
}

UtilitySet gen_utility(TaskKind kind, int n, unsigned seed, const DataOptions& opts) {
  require_positive(n, "gen_utility");
  opts.validate();
  UtilitySet set;
  set.kind = kind;
  set.seed = seed;
  set.samples.reserve(static_cast<std::size_t>(n));
  auto rng = make_rng(seed, kind == TaskKind::copy ? kCopyStream : kModAddStream);
  for (int i = 0; i < n; ++i) {
    set.samples.push_back(kind == TaskKind::copy ? copy_sample(rng, opts)
                                                 : modadd_sample(rng, opts));
  }
  return set;
}

UtilitySet gen_utility(std::string_view kind, int n, unsigned seed, const DataOptions& opts) {
  return gen_utility(parse_task_kind(kind), n, seed, opts);
}

SafetySet gen_safety(int n, unsigned seed, bool adversarial, const DataOptions& opts) {
  require_positive(n, "gen_safety");
  opts.validate();
  SafetySet set;
  set.adversarial = adversarial;
  set.seed = seed;
  set.samples.reserve(static_cast<std::size_t>(n));
  auto rng = make_rng(seed, adversarial ? kAdversarialHarmStream : kVanillaHarmStream);
  for (int i = 0; i < n; ++i) {
    set.samples.push_back(harmful_sample(rng, opts, adversarial));
  }
  return set;
}

std::array<std::size_t, 4> category_counts(int n, std::array<double, 4> proportions) {
  require_positive(n, "gen_alignment");
  double total = 0.0;
  for (double p : proportions) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw ConfigError("alignment proportions must be finite and nonnegative");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("alignment proportions sum to " + std::to_string(total) + ", expected 1");
  }
  std::array<std::size_t, 4> counts{};
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    // The tolerance keeps products such as 100 * 0.29 from rounding down a whole unit.
    counts[c] = static_cast<std::size_t>(std::floor(n * proportions[c] + 1e-9));
    assigned += counts[c];
  }
  std::size_t remainder = static_cast<std::size_t>(n) - assigned;
  while (remainder > 0) {
    for (std::size_t c = 0; c < 4 && remainder > 0; ++c) {
      if (proportions[c] > 0.0) {
        ++counts[c];
        --remainder;
      }
    }
  }
  return counts;
}

AlignmentSet gen_alignment(int n, std::array<double, 4> proportions, unsigned seed,
                           const DataOptions& opts) {
  opts.validate();
  AlignmentSet set;
  set.seed = seed;
  set.counts = category_counts(n, proportions);
  set.samples.reserve(static_cast<std::size_t>(n));
  auto rng = make_rng(seed, kAlignmentStream);
  for (std::size_t c = 0; c < 4; ++c) {
    const Category cat = kCategories[c];
    for (std::size_t i = 0; i < set.counts[c]; ++i) {
      AlignmentSample s;
      s.category = cat;
      switch (cat) {
        case Category::vanilla_harmful:
        case Category::adversarial_harmful: {
          auto h = harmful_sample(rng, opts, cat == Category::adversarial_harmful);
          s.prompt = std::move(h.prompt);
          s.target = h.target;
          break;
        }
        case Category::vanilla_benign: {
          const bool copy = std::bernoulli_distribution(0.5)(rng);
          auto u = copy ? copy_sample(rng, opts) : modadd_sample(rng, opts);
          s.prompt = std::move(u.prompt);
          s.target = u.answer;
          break;
        }
        case Category::adversarial_benign: {
          const auto prefix = distractors(rng, opts);
          auto u = modadd_sample(rng, opts, prefix);
          s.prompt = std::move(u.prompt);
          s.target = u.answer;
          break;
        }
      }
      set.samples.push_back(std::move(s));
    }
  }
  std::shuffle(set.samples.begin(), set.samples.end(), rng);
  return set;
}

std::vector<Example> examples_of(const UtilitySet& data) {
  std::vector<Example> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    out.push_back({std::vector<int>(s.prompt.begin(),
                                    s.prompt.begin() +
                                        static_cast<std::ptrdiff_t>(s.answer_position + 1)),
                   s.answer});
  }
  return out;
}

std::vector<Example> examples_of(const SafetySet& data) {
  std::vector<Example> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    out.push_back({s.prompt, s.target});
  }
  return out;
}

std::vector<Example> examples_of(const AlignmentSet& data) {
  std::vector<Example> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    out.push_back({s.prompt, s.target});
  }
  return out;
}

int solve_utility(TaskKind kind, const std::vector<int>& prompt, const DataOptions& opts) {
  if (prompt.size() < 3 || prompt.front() != vocab::kBos || prompt.back() != vocab::kSep) {
    throw InputError("solve_utility: prompt must be [BOS, ..., SEP]");
  }
  if (kind == TaskKind::copy) {
    return prompt[1];
  }
  const std::size_t n = prompt.size();
  if (n < 4) {
    throw InputError("solve_utility: modular-add prompt needs two operands");
  }
  const int a = content_value(prompt[n - 3]);
  const int b = content_value(prompt[n - 2]);
  return content_token((a + b) % opts.modulus);
}

namespace {

void write_record(std::ostream& os, const std::vector<int>& tokens, int target,
                  const std::string& category) {
  nlohmann::json j;
  j["tokens"] = tokens;
  j["target"] = target;
  j["category"] = category;
  os << j.dump() << '\n';
}

}  // namespace

void write_jsonl(std::ostream& os, const UtilitySet& data) {
  const std::string cat = "utility:" + to_string(data.kind);
  for (const auto& s : data.samples) {
    write_record(os, s.prompt, s.answer, cat);
  }
}

void write_jsonl(std::ostream& os, const SafetySet& data) {
  const std::string cat = to_string(data.adversarial ? Category::adversarial_harmful
                                                     : Category::vanilla_harmful);
  for (const auto& s : data.samples) {
    write_record(os, s.prompt, s.target, cat);
  }
}

void write_jsonl(std::ostream& os, const AlignmentSet& data) {
  for (const auto& s : data.samples) {
    write_record(os, s.prompt, s.target, to_string(s.category));
  }
}

std::vector<JsonlRecord> read_jsonl(std::istream& is) {
  std::vector<JsonlRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("tokens").get<std::vector<int>>(), j.at("target").get<int>(),
                     j.at("category").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw InputError("jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cast
