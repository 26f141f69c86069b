#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dlab {

// Character-level tokenizer: id 0 is end-of-text, id 1 is '\n', ids 2..96
// are printable ASCII 0x20..0x7e in order.
class Tokenizer {
 public:
  static constexpr int kEos = 0;
  static constexpr int kVocabSize = 97;

  static int vocab_size() { return kVocabSize; }
  // DataError on characters outside the vocabulary.
  static std::vector<int> encode(std::string_view text);
  static std::string decode(const std::vector<int>& ids);
  static int token_of(char c);
  static char char_of(int id);
};

}  // namespace dlab
