#include "retrikt/vocab.hpp"

#include "retrikt/data.hpp"

#include <fstream>
#include <stdexcept>

namespace retrikt {

Vocabulary::Vocabulary() {
  for (const char* t : {"<eos>", "<pad>", "<unk>", "|", "label:", "text:", "keywords:", ","}) add(t);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) {
    for (const auto& t : tokenize(w)) {
      if (!v.contains(t)) v.add(t);
    }
  }
  return v;
}

void Vocabulary::add(const std::string& token) {
  if (token.empty() || token.find_first_of(" \t\n") != std::string::npos) {
    throw std::invalid_argument("vocabulary token must be non-empty without whitespace");
  }
  if (contains(token)) throw std::invalid_argument("duplicate vocabulary token '" + token + "'");
  index_[token] = size();
  tokens_.push_back(token);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const { return encode_tokens(tokenize(text)); }

std::vector<int> Vocabulary::encode_tokens(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode_tokens(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const { return detokenize(decode_tokens(ids)); }

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    if (lineno < 8) {
      if (line != v.token(lineno)) throw std::runtime_error(path.string() + ": reserved token mismatch");
    } else {
      v.add(line);
    }
    ++lineno;
  }
  return v;
}

}  // namespace retrikt
