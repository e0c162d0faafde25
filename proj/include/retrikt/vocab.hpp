#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace retrikt {

// Word-level vocabulary. Ids 0..7 are reserved for the tokens below.
class Vocabulary {
 public:
  static constexpr int kEos = 0;
  static constexpr int kPad = 1;
  static constexpr int kUnk = 2;
  static constexpr int kSeparator = 3;  // "|"
  static constexpr int kLabelTag = 4;   // "label:"
  static constexpr int kTextTag = 5;    // "text:"
  static constexpr int kKeywordsTag = 6;
  static constexpr int kComma = 7;

  Vocabulary();
  // Reserved tokens followed by the distinct tokens of `words` in first-seen order.
  static Vocabulary build(const std::vector<std::string>& words);

  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  void add(const std::string& token);

  std::vector<int> encode(const std::string& text) const;
  std::vector<int> encode_tokens(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode_tokens(const std::vector<int>& ids) const;
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace retrikt
