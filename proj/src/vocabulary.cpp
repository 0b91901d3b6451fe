#include "vipa/vocabulary.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace vipa {

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> words) {
  if (words.empty() || words.front() != kUnknown) words.insert(words.begin(), std::string(kUnknown));
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i].empty()) throw VocabularyError("empty vocabulary entry at line " + std::to_string(i + 1));
    if (!index_.emplace(words[i], i).second) throw VocabularyError("duplicate vocabulary entry: " + words[i]);
  }
  words_ = std::move(words);
}

Vocabulary Vocabulary::scene_grammar() {
  return Vocabulary({std::string(kUnknown), "the", "a", "small", "large", "red", "green", "blue", "yellow", "circle",
                     "square", "triangle", "on", "left", "right", "top", "bottom"});
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw VocabularyError("cannot open vocabulary file " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  if (words.empty() || words.front() != kUnknown) {
    throw VocabularyError("vocabulary file must start with " + std::string(kUnknown));
  }
  return Vocabulary(std::move(words));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw VocabularyError("cannot write vocabulary file " + path.string());
  for (const auto& w : words_) f << w << '\n';
}

std::size_t Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? 0 : it->second;
}

const std::string& Vocabulary::word(std::size_t id) const {
  if (id >= words_.size()) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[id];
}

bool is_article(std::string_view word) { return word == "a" || word == "an" || word == "the"; }

std::vector<std::size_t> Vocabulary::tokenize(std::string_view text, bool drop_articles) const {
  std::string lowered(text);
  std::ranges::transform(lowered, lowered.begin(), [](unsigned char c) { return std::tolower(c); });
  std::istringstream in(lowered);
  std::vector<std::size_t> ids;
  std::string w;
  while (in >> w) {
    if (drop_articles && is_article(w)) continue;
    ids.push_back(id(w));
  }
  return ids;
}

}  // namespace vipa
