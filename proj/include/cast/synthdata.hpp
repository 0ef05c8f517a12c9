#pragma once

// Seeded generators for the calibration, alignment and evaluation corpora.
//
// Token ids 0..4 are reserved (PAD, BOS, SEP, HARM, REFUSE). Every other id is
// a content token carrying the value id - 5, so task arithmetic happens on
// values and is mapped onto tokens with content_token().

#include <array>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace cast {

namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kSep = 2;
inline constexpr int kHarm = 3;
inline constexpr int kRefuse = 4;
inline constexpr int kFirstContent = 5;
}  // namespace vocab

inline int content_token(int value) { return vocab::kFirstContent + value; }
inline int content_value(int token) { return token - vocab::kFirstContent; }

// A prompt and the token expected right after its last position.
struct Example {
  std::vector<int> prompt;
  int target = 0;
};

enum class TaskKind { copy, modular_add };

std::string to_string(TaskKind kind);
// Throws ConfigError for unknown names.
TaskKind parse_task_kind(std::string_view name);

struct DataOptions {
  int vocab_size = 64;
  int modulus = 16;        // modular-add base
  int copy_length = 4;     // x1..xL in copy prompts
  int payload_length = 3;  // content tokens after HARM
  int max_distractors = 3; // adversarial wrapping uses 1..max_distractors tokens

  int content_count() const { return vocab_size - vocab::kFirstContent; }
  void validate() const;
};

struct UtilitySample {
  std::vector<int> prompt;
  int answer = 0;
  // Index of the prompt token whose next-token prediction is graded.
  std::size_t answer_position = 0;
};

struct UtilitySet {
  TaskKind kind = TaskKind::modular_add;
  unsigned seed = 0;
  std::vector<UtilitySample> samples;
};

struct SafetySample {
  std::vector<int> prompt;
  int target = vocab::kRefuse;
};

struct SafetySet {
  bool adversarial = false;
  unsigned seed = 0;
  std::vector<SafetySample> samples;
};

enum class Category { vanilla_harmful, adversarial_harmful, vanilla_benign, adversarial_benign };
inline constexpr std::array<Category, 4> kCategories = {
    Category::vanilla_harmful, Category::adversarial_harmful, Category::vanilla_benign,
    Category::adversarial_benign};

std::string to_string(Category c);
bool is_harmful(Category c);

struct AlignmentSample {
  std::vector<int> prompt;
  int target = 0;
  Category category = Category::vanilla_harmful;
};

struct AlignmentSet {
  unsigned seed = 0;
  std::array<std::size_t, 4> counts{};
  std::vector<AlignmentSample> samples;
};

UtilitySet gen_utility(TaskKind kind, int n, unsigned seed, const DataOptions& opts = {});
UtilitySet gen_utility(std::string_view kind, int n, unsigned seed, const DataOptions& opts = {});
SafetySet gen_safety(int n, unsigned seed, bool adversarial, const DataOptions& opts = {});
AlignmentSet gen_alignment(int n, std::array<double, 4> proportions, unsigned seed,
                           const DataOptions& opts = {});

// floor(n * p) per category; the remainder goes one at a time to categories
// with p > 0, in category order.
std::array<std::size_t, 4> category_counts(int n, std::array<double, 4> proportions);

std::vector<Example> examples_of(const UtilitySet& data);
std::vector<Example> examples_of(const SafetySet& data);
std::vector<Example> examples_of(const AlignmentSet& data);

// Re-derives a utility answer from its prompt (the last two content tokens
// before SEP for modular-add, the first content token after BOS for copy).
int solve_utility(TaskKind kind, const std::vector<int>& prompt, const DataOptions& opts = {});

// JSON Lines, one {"tokens", "target", "category"} object per sample.
struct JsonlRecord {
  std::vector<int> tokens;
  int target = 0;
  std::string category;
};

void write_jsonl(std::ostream& os, const UtilitySet& data);
void write_jsonl(std::ostream& os, const SafetySet& data);
void write_jsonl(std::ostream& os, const AlignmentSet& data);
std::vector<JsonlRecord> read_jsonl(std::istream& is);

}  // namespace cast
