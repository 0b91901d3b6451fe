#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vipa {

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Fixed word list; id == position. Id 0 is always "<unk>".
class Vocabulary {
 public:
  static constexpr std::string_view kUnknown = "<unk>";

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> words);

  /// Words of the synthetic scene grammar.
  static Vocabulary scene_grammar();
  /// One token per line; line number is the id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return words_.size(); }
  std::size_t id(std::string_view word) const;
  const std::string& word(std::size_t id) const;
  bool contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

  /// Lowercases and splits on whitespace; unknown words map to <unk>.
  /// With `drop_articles`, "a", "an" and "the" are removed.
  std::vector<std::size_t> tokenize(std::string_view text, bool drop_articles = false) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool is_article(std::string_view word);

}  // namespace vipa
