#include "dlab/tasks.hpp"

#include <charconv>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/rng.hpp"

namespace dlab {

namespace {

constexpr int kMaxValue = 99;
constexpr std::string_view kFinalMarker = "The final answer is";
constexpr std::string_view kBoxedMarker = "\\boxed{";

constexpr std::string_view kMathSystemPrompt =
    "Solve the following math problem efficiently and clearly:\n\n"
    "- For simple problems (2 steps or fewer):\n"
    "Provide a concise solution with minimal explanation.\n\n"
    "- For complex problems (3 steps or more):\n"
    "Use this step-by-step format:\n\n"
    "## Step 1: [Concise description]\n"
    "[Brief explanation and calculations]\n\n"
    "## Step 2: [Concise description]\n"
    "[Brief explanation and calculations]\n\n"
    "...\n\n"
    "Regardless of the approach, always conclude with:\n\n"
    "Therefore, the final answer is: $\\boxed{answer}$. I hope it is correct.\n\n"
    "Where [answer] is just the final number or expression that solves the problem.";

constexpr std::string_view kGsmSystemPrompt =
    "\n\nGiven the following problem, reason and give a final answer to the problem.\n"
    "Your response should end with \"The final answer is [answer]\" where [answer] is the response to the "
    "problem.\nProblem:";

std::string_view trim(std::string_view s) {
  const auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return s;
}

std::optional<long long> parse_integer(std::string_view s) {
  s = trim(s);
  bool negative = false;
  if (!s.empty() && (s.front() == '+' || s.front() == '-')) {
    negative = s.front() == '-';
    s.remove_prefix(1);
  }
  while (s.size() > 1 && s.front() == '0') s.remove_prefix(1);
  if (s.empty() || s.size() > 18) return std::nullopt;
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return negative ? -v : v;
}

// Chain content hash; even -> train, odd -> eval.
bool chain_in_split(const ArithmeticChain& chain, Split split) {
  std::uint64_t h = splitmix64(static_cast<std::uint64_t>(chain.start) + 0x51ed27ULL);
  for (const auto& op : chain.ops) {
    h = splitmix64(h ^ (static_cast<std::uint64_t>(op.op) << 8) ^ static_cast<std::uint64_t>(op.operand));
  }
  const bool eval_bucket = (h >> 17) % 2 == 1;
  return eval_bucket == (split == Split::eval);
}

std::string chain_expression(const ArithmeticChain& chain) {
  std::string s = std::to_string(chain.start);
  for (const auto& op : chain.ops) {
    s.push_back(op.op);
    s += std::to_string(op.operand);
  }
  return s;
}

ArithmeticChain draw_chain(Rng& rng, int steps) {
  ArithmeticChain chain;
  chain.start = 1 + static_cast<int>(rng.below(9));
  int value = chain.start;
  for (int s = 0; s < steps; ++s) {
    std::vector<Operation> feasible;
    for (int b = 1; b <= 9; ++b) {
      if (value + b <= kMaxValue) feasible.push_back({'+', b});
      if (value - b >= 0) feasible.push_back({'-', b});
      if (b >= 2 && value * b <= kMaxValue) feasible.push_back({'*', b});
    }
    // Pick the operator first so '*' is not starved when few products fit.
    std::vector<char> ops;
    for (char c : {'+', '-', '*'}) {
      for (const auto& f : feasible) {
        if (f.op == c) {
          ops.push_back(c);
          break;
        }
      }
    }
    const char op = ops[rng.below(ops.size())];
    std::vector<Operation> choices;
    for (const auto& f : feasible) {
      if (f.op == op) choices.push_back(f);
    }
    const Operation chosen = choices[rng.below(choices.size())];
    chain.ops.push_back(chosen);
    value = apply(value, chosen);
  }
  return chain;
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::train ? "train" : "eval"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "eval") return Split::eval;
  throw DataError("unknown split '" + std::string(text) + "'");
}

std::string_view to_string(AnswerStyle style) { return style == AnswerStyle::boxed ? "boxed" : "final_answer_is"; }

AnswerStyle parse_answer_style(std::string_view text) {
  if (text == "boxed") return AnswerStyle::boxed;
  if (text == "final_answer_is") return AnswerStyle::final_answer_is;
  throw ConfigError("unknown answer style '" + std::string(text) + "'");
}

ArithmeticChain parse_chain(std::string_view expression) {
  ArithmeticChain chain;
  std::size_t i = 0;
  const auto read_number = [&]() -> int {
    const std::size_t begin = i;
    while (i < expression.size() && expression[i] >= '0' && expression[i] <= '9') ++i;
    if (i == begin || i - begin > 6) {
      throw DataError("malformed arithmetic chain '" + std::string(expression) + "'");
    }
    int v = 0;
    std::from_chars(expression.data() + begin, expression.data() + i, v);
    return v;
  };
  chain.start = read_number();
  while (i < expression.size()) {
    const char op = expression[i++];
    if (op != '+' && op != '-' && op != '*') {
      throw DataError("malformed arithmetic chain '" + std::string(expression) + "'");
    }
    chain.ops.push_back({op, read_number()});
  }
  return chain;
}

int apply(int lhs, Operation op) {
  switch (op.op) {
    case '+':
      return lhs + op.operand;
    case '-':
      return lhs - op.operand;
    case '*':
      return lhs * op.operand;
    default:
      throw DataError(std::string("unknown operator '") + op.op + "'");
  }
}

int evaluate_chain(const ArithmeticChain& chain) {
  int v = chain.start;
  for (const auto& op : chain.ops) v = apply(v, op);
  return v;
}

std::vector<Problem> generate_problems(std::uint64_t seed, std::size_t count, DifficultyRange range, Split split) {
  if (count == 0) throw ConfigError("problem count must be positive");
  if (range.min < 1 || range.max < range.min) {
    throw ConfigError("empty difficulty range [" + std::to_string(range.min) + ", " + std::to_string(range.max) + "]");
  }
  const auto span = static_cast<std::uint64_t>(range.max - range.min + 1);
  std::vector<Problem> problems;
  problems.reserve(count);
  for (std::size_t index = 0; index < count; ++index) {
    Rng rng(hash_key({seed, split == Split::train ? 0x7472ULL : 0x6576ULL, index}));
    const int steps = range.min + static_cast<int>(rng.below(span));
    ArithmeticChain chain = draw_chain(rng, steps);
    while (!chain_in_split(chain, split)) chain = draw_chain(rng, steps);
    Problem p;
    char id[32];
    std::snprintf(id, sizeof(id), "%s-%06zu", split == Split::train ? "train" : "eval", index);
    p.id = id;
    p.prompt = chain_expression(chain);
    p.answer = std::to_string(evaluate_chain(chain));
    p.difficulty = steps;
    p.split = split;
    problems.push_back(std::move(p));
  }
  return problems;
}

PromptTemplate PromptTemplate::reference(AnswerStyle style) {
  return {style, std::string(style == AnswerStyle::boxed ? kMathSystemPrompt : kGsmSystemPrompt)};
}

PromptTemplate PromptTemplate::compact(AnswerStyle style) {
  return {style, style == AnswerStyle::boxed ? "Box it." : "Solve."};
}

std::string reference_cot(const Problem& problem, AnswerStyle style) {
  const ArithmeticChain chain = problem.chain();
  std::string out;
  int value = chain.start;
  for (std::size_t k = 0; k < chain.ops.size(); ++k) {
    const int next = apply(value, chain.ops[k]);
    out += "## Step " + std::to_string(k + 1) + ": " + std::to_string(value) + chain.ops[k].op +
           std::to_string(chain.ops[k].operand) + "=" + std::to_string(next) + "\n";
    value = next;
  }
  if (style == AnswerStyle::boxed) {
    out += "Therefore, the final answer is: $\\boxed{" + std::to_string(value) + "}$. I hope it is correct.";
  } else {
    out += std::string(kFinalMarker) + " " + std::to_string(value);
  }
  return out;
}

std::optional<std::string> extract_answer(std::string_view completion, AnswerStyle style) {
  std::string_view payload;
  if (style == AnswerStyle::boxed) {
    const auto pos = completion.rfind(kBoxedMarker);
    if (pos == std::string_view::npos) return std::nullopt;
    const std::size_t begin = pos + kBoxedMarker.size();
    int depth = 1;
    std::size_t end = begin;
    for (; end < completion.size(); ++end) {
      if (completion[end] == '{') ++depth;
      if (completion[end] == '}' && --depth == 0) break;
    }
    if (depth != 0) return std::nullopt;
    payload = completion.substr(begin, end - begin);
  } else {
    const auto pos = completion.rfind(kFinalMarker);
    if (pos == std::string_view::npos) return std::nullopt;
    payload = completion.substr(pos + kFinalMarker.size());
    const auto eol = payload.find('\n');
    if (eol != std::string_view::npos) payload = payload.substr(0, eol);
    payload = trim(payload);
    if (!payload.empty() && payload.front() == ':') payload.remove_prefix(1);
  }
  payload = trim(payload);
  if (!payload.empty() && payload.front() == '$') payload.remove_prefix(1);
  while (!payload.empty() && (payload.back() == '.' || payload.back() == '$')) payload.remove_suffix(1);
  payload = trim(payload);
  return std::string(payload);
}

std::string canonical_answer(std::string_view answer) {
  if (const auto v = parse_integer(answer)) return std::to_string(*v);
  return std::string(trim(answer));
}

bool answers_equal(std::string_view a, std::string_view b) {
  const auto ia = parse_integer(a);
  const auto ib = parse_integer(b);
  if (ia && ib) return *ia == *ib;
  return trim(a) == trim(b);
}

bool check(const Problem& problem, const std::optional<std::string>& answer) {
  return answer.has_value() && answers_equal(*answer, problem.answer);
}

ChatPrompt render_chat(const Problem& problem, const PromptTemplate& tmpl) {
  ChatPrompt out;
  out.text.reserve(tmpl.system_text.size() + problem.prompt.size() + 16);
  out.text += kSystemMarker;
  out.text += tmpl.system_text;
  out.text += '\n';
  out.text += kUserMarker;
  out.text += problem.prompt;
  out.text += '\n';
  out.assistant_offset = out.text.size();
  out.text += kAssistantMarker;
  return out;
}

TrainingText render_chat_example(const Problem& problem, const PromptTemplate& tmpl) {
  ChatPrompt prompt = render_chat(problem, tmpl);
  TrainingText out{std::move(prompt.text), 0};
  out.assistant_offset = out.text.size();
  out.text += reference_cot(problem, tmpl.style);
  return out;
}

TrainingText render_plain_example(const Problem& problem, AnswerStyle style) {
  TrainingText out{problem.prompt + "\n", 0};
  out.assistant_offset = out.text.size();
  out.text += reference_cot(problem, style);
  return out;
}

std::string problem_to_json_line(const Problem& problem) {
  nlohmann::ordered_json j;
  j["id"] = problem.id;
  j["prompt"] = problem.prompt;
  j["answer"] = problem.answer;
  j["difficulty"] = problem.difficulty;
  j["split"] = std::string(to_string(problem.split));
  return j.dump();
}

Problem problem_from_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  Problem p;
  p.id = j.at("id").get<std::string>();
  p.prompt = j.at("prompt").get<std::string>();
  p.answer = j.at("answer").get<std::string>();
  p.difficulty = j.at("difficulty").get<int>();
  p.split = parse_split(j.at("split").get<std::string>());
  parse_chain(p.prompt);
  return p;
}

void write_problems(const std::filesystem::path& path, const std::vector<Problem>& problems) {
  std::vector<std::string> lines;
  lines.reserve(problems.size());
  for (const auto& p : problems) lines.push_back(problem_to_json_line(p));
  write_lines(path, lines);
}

std::vector<Problem> read_problems(const std::filesystem::path& path) {
  return read_jsonl<Problem>(path, [](std::string_view line) { return problem_from_json_line(line); });
}

}  // namespace dlab
