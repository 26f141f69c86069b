#pragma once

// Synthetic chain-arithmetic benchmark.
//
// A problem is a left-to-right chain such as "7+5*3-4", meaning ((7+5)*3)-4.
// Running values stay in [0, 99]; operands are single digits. The reference
// chain of thought spends one "## Step k:" line per operation.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dlab {

enum class Split { train, eval };
std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct Operation {
  char op = '+';  // one of + - *
  int operand = 0;
};

struct ArithmeticChain {
  int start = 0;
  std::vector<Operation> ops;
};

// Parses "7+5*3-4". DataError on malformed input.
ArithmeticChain parse_chain(std::string_view expression);
int apply(int lhs, Operation op);
// Left-to-right value.
int evaluate_chain(const ArithmeticChain& chain);

struct Problem {
  std::string id;
  std::string prompt;  // the chain expression
  std::string answer;
  int difficulty = 1;  // number of operations
  Split split = Split::train;

  ArithmeticChain chain() const { return parse_chain(prompt); }
};

struct DifficultyRange {
  int min = 1;
  int max = 3;
};

// Deterministic in (seed, split, index). Train and eval draw from disjoint
// halves of the chain space (partitioned by a content hash), so no chain
// appears in both splits. ConfigError on an empty range or count == 0.
std::vector<Problem> generate_problems(std::uint64_t seed, std::size_t count, DifficultyRange range, Split split);

enum class AnswerStyle { boxed, final_answer_is };
std::string_view to_string(AnswerStyle style);
AnswerStyle parse_answer_style(std::string_view text);

struct PromptTemplate {
  AnswerStyle style = AnswerStyle::final_answer_is;
  std::string system_text;

  // Full instruction text (the MATH / GSM8K system prompts).
  static PromptTemplate reference(AnswerStyle style);
  // Short system text used for model training and sampling at desk scale.
  static PromptTemplate compact(AnswerStyle style);
};

// Step-by-step solution ending in the style's final-answer sentence.
std::string reference_cot(const Problem& problem, AnswerStyle style);

// Last boxed payload or the text after the last "The final answer is"
// marker, normalized. Absent when the marker is missing.
std::optional<std::string> extract_answer(std::string_view completion, AnswerStyle style);

// Integer comparison after canonicalization; exact string match otherwise.
bool check(const Problem& problem, const std::optional<std::string>& answer);
bool answers_equal(std::string_view a, std::string_view b);
// "042" -> "42"; non-integers are returned trimmed.
std::string canonical_answer(std::string_view answer);

inline constexpr std::string_view kSystemMarker = "[S]";
inline constexpr std::string_view kUserMarker = "[U]";
inline constexpr std::string_view kAssistantMarker = "[A]";

struct ChatPrompt {
  std::string text;               // system, user, assistant marker
  std::size_t assistant_offset;   // bytes before the assistant turn
};

ChatPrompt render_chat(const Problem& problem, const PromptTemplate& tmpl);

// A full training example: text plus the byte offset where the assistant's
// output (or, for plain text, the solution) begins.
struct TrainingText {
  std::string text;
  std::size_t assistant_offset;
};
TrainingText render_chat_example(const Problem& problem, const PromptTemplate& tmpl);
// No chat template: expression, newline, solution.
TrainingText render_plain_example(const Problem& problem, AnswerStyle style);

// JSONL: {"id","prompt","answer","difficulty","split"} per line.
std::string problem_to_json_line(const Problem& problem);
Problem problem_from_json_line(std::string_view line);
void write_problems(const std::filesystem::path& path, const std::vector<Problem>& problems);
std::vector<Problem> read_problems(const std::filesystem::path& path);

}  // namespace dlab
