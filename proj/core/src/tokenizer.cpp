#include "dlab/tokenizer.hpp"

#include "dlab/error.hpp"

namespace dlab {

int Tokenizer::token_of(char c) {
  if (c == '\n') return 1;
  const auto u = static_cast<unsigned char>(c);
  if (u >= 0x20 && u <= 0x7e) return 2 + (u - 0x20);
  throw DataError("character code " + std::to_string(static_cast<int>(u)) + " is outside the tokenizer vocabulary");
}

char Tokenizer::char_of(int id) {
  if (id == 1) return '\n';
  if (id >= 2 && id < kVocabSize) return static_cast<char>(0x20 + (id - 2));
  throw DataError("token id " + std::to_string(id) + " has no character");
}

std::vector<int> Tokenizer::encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(token_of(c));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == kEos) break;
    out.push_back(char_of(id));
  }
  return out;
}

}  // namespace dlab
