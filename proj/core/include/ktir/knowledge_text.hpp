#pragma once

// Caption -> keywords -> triplets -> knowledge sentence, and token encoding
// for the text encoders.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ktir/kg.hpp"

namespace ktir {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kFirstTokenId = 4;

// Token <-> id mapping plus the noun lexicon and plural exceptions used for
// keyword extraction.
class Vocabulary {
 public:
  Vocabulary();

  // Returns the id of token, assigning the next free id if it is new.
  int add_token(std::string_view token);
  // kUnkId for unknown tokens.
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  // Number of ids, reserved ones included.
  std::size_t size() const { return tokens_.size(); }

  void add_noun(std::string noun);
  bool is_noun(const std::string& word) const { return nouns_.contains(word); }
  const std::set<std::string>& noun_lexicon() const { return nouns_; }
  // Adds every graph object to the noun lexicon.
  void add_graph_objects(const KnowledgeGraph& graph);

  void add_plural_exception(std::string plural, std::string singular);
  const std::string* plural_exception(const std::string& word) const;

  // Vocabulary whose lexicon holds the built-in remote-sensing noun list and
  // plural exception table.
  static Vocabulary with_default_lexicon();

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::set<std::string> nouns_;
  std::unordered_map<std::string, std::string> plural_exceptions_;
};

// One token per line; the first line is id 4.
void save_vocabulary_tokens(const std::filesystem::path& path, const Vocabulary& vocab);
void load_vocabulary_tokens(const std::filesystem::path& path, Vocabulary& vocab);
// One noun per line.
void load_noun_lexicon(const std::filesystem::path& path, Vocabulary& vocab);
// "plural<TAB>singular" per line.
void load_plural_exceptions(const std::filesystem::path& path, Vocabulary& vocab);

// Lower-cased runs of ASCII letters and digits.
std::vector<std::string> tokenize(std::string_view text);

std::string singularize(std::string_view word, const Vocabulary& vocab);

// Nouns of the caption in singular form, first-occurrence order, unique.
std::vector<std::string> extract_keywords(std::string_view caption, const Vocabulary& vocab);

std::vector<Triplet> retrieve_triplets(std::span<const std::string> keywords,
                                       const KnowledgeGraph& graph);

enum class SelectionKind { Random, RelevanceToCaption, DiversityAmongTriplets };

std::string_view selection_name(SelectionKind kind);
std::optional<SelectionKind> parse_selection(std::string_view text);

struct SelectionStrategy {
  SelectionKind kind = SelectionKind::Random;
  std::uint64_t seed = 0;
};

// Jaccard overlap of the token sets of two strings; 0 when both are empty.
double token_jaccard(std::string_view a, std::string_view b);

// Picks at most m candidates. Fewer than m candidates are returned as is.
// Random: seeded shuffle, first m. RelevanceToCaption: the m candidates
// least similar to the caption. DiversityAmongTriplets: a seeded random
// first pick followed by the m-1 candidates least similar to it. Ties keep
// candidate order. stream separates independent draws under one seed (for
// example caption index and epoch). Throws InvalidArgument when m == 0.
std::vector<Triplet> select_triplets(std::span<const Triplet> candidates, std::size_t m,
                                     const SelectionStrategy& strategy,
                                     std::string_view caption, std::uint64_t stream = 0);

// Relation -> template pairs used to verbalize triplets, in table order.
const std::vector<std::pair<std::string, std::string>>& relation_templates();
// Template for a relation; unknown relations fall back to the relation name
// with underscores replaced by spaces.
std::string relation_template(std::string_view relation);

std::string triplet_to_sentence(const Triplet& t);
// Per-triplet sentences joined by ". " and terminated with "."; "" if empty.
std::string build_knowledge_sentence(std::span<const Triplet> triplets);

// [CLS] ids... [SEP] followed by [PAD] up to max_len. Longer inputs are cut
// so that the last id is [SEP]. Throws InvalidArgument when max_len < 2.
std::vector<int> encode_tokens(std::string_view text, const Vocabulary& vocab,
                               std::size_t max_len);

struct TextSample {
  std::string caption;
  std::vector<std::string> keywords;
  std::vector<Triplet> triplets;
  std::string knowledge_sentence;
  std::vector<int> caption_ids;
  std::vector<int> knowledge_ids;
};

// Runs keyword extraction, retrieval, selection and verbalization for one
// caption. graph == nullptr yields an empty knowledge sentence.
TextSample build_text_sample(std::string_view caption, const Vocabulary& vocab,
                             const KnowledgeGraph* graph, std::size_t m,
                             const SelectionStrategy& strategy, std::uint64_t stream,
                             std::size_t max_len);

}  // namespace ktir
