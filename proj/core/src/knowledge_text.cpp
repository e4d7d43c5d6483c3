#include "ktir/knowledge_text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>

#include "ktir/errors.hpp"
#include "ktir/random.hpp"

namespace ktir {
namespace {

const char* const kReservedTokens[] = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};

// Nouns that show up in remote-sensing captions. Graph objects are added on
// top of this list at load time.
const char* const kDefaultNouns[] = {
    "airplane", "airport",   "apron",     "area",       "avenue",     "bank",
    "baseball", "basketball", "bay",      "beach",      "boat",       "bridge",
    "building", "bus",       "car",       "center",     "church",     "circle",
    "city",     "cloud",     "coast",     "container",  "corner",     "court",
    "crop",     "curve",     "dam",       "desert",     "dock",       "dune",
    "factory",  "farm",      "farmland",  "fence",      "ferry",      "field",
    "flower",   "football",  "forest",    "freeway",    "garden",     "golf",
    "grass",    "grassland", "greenhouse", "ground",    "harbor",     "highway",
    "hill",     "house",     "industry",  "intersection", "island",   "lake",
    "land",     "lane",      "lawn",      "lot",        "marsh",      "meadow",
    "mountain", "ocean",     "overpass",  "park",       "parking",    "path",
    "pavement", "pier",      "plane",     "plant",      "playground", "plaza",
    "pond",     "pool",      "port",      "railway",    "reef",       "residence",
    "resort",   "river",     "road",      "rock",       "roof",       "runway",
    "sand",     "school",    "sea",       "shadow",     "ship",       "shore",
    "shrub",    "sidewalk",  "soil",      "square",     "stadium",    "station",
    "stone",    "storage",   "street",    "swimming",   "tank",       "tennis",
    "terminal", "terrace",   "track",     "trail",      "train",      "tree",
    "truck",    "valley",    "vegetation", "vehicle",   "village",    "viaduct",
    "wall",     "water",     "wave",      "wetland",    "yacht",      "yard"};

const std::pair<const char*, const char*> kDefaultPluralExceptions[] = {
    {"grass", "grass"},   {"glass", "glass"},       {"species", "species"},
    {"series", "series"}, {"people", "person"},     {"men", "man"},
    {"women", "woman"},   {"children", "child"},    {"leaves", "leaf"},
    {"shelves", "shelf"}, {"buses", "bus"},         {"geese", "goose"},
    {"mice", "mouse"},    {"feet", "foot"},         {"teeth", "tooth"},
    {"wolves", "wolf"},   {"knives", "knife"},      {"lives", "life"},
    {"terraces", "terrace"}, {"bus", "bus"},        {"canvas", "canvas"},
    {"gas", "gas"},       {"lens", "lens"},         {"cactus", "cactus"},
    {"campus", "campus"}, {"status", "status"},     {"cross", "cross"}};

// Relation templates, fifteen ConceptNet relations then the RSKG ones.
const std::vector<std::pair<std::string, std::string>> kTemplates = {
    {"UsedFor", "is used for"},
    {"ReceivesAction", "receives action"},
    {"HasA", "has a"},
    {"Causes", "causes"},
    {"HasProperty", "has a property"},
    {"CreatedBy", "is created by"},
    {"DefinedAs", "is defined as"},
    {"AtLocation", "is at location of"},
    {"HasSubEvent", "has"},
    {"MadeUpOf", "is made of"},
    {"HasPrerequisite", "has prerequisite to"},
    {"Desires", "desires"},
    {"NotDesires", "not desires"},
    {"IsA", "is a"},
    {"CapableOf", "is capable of"},
    {"shape", "shape is"},
    {"color", "color is"},
    {"width", "width is"},
    {"distribution", "distribution is"},
    {"height", "height is"},
    {"next_to", "next to"},
    {"stop_at", "stop at"},
    {"pass_through", "pass through"},
    {"intersect_at", "intersect at"},
    {"marked_on", "is marked on"},
    {"connected_to", "is connected to"},
    {"is_component_of", "is component of"},
    {"is_part_of", "is part of"},
    {"is_member_of", "is member of"},
};

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() > suffix.size() && s.ends_with(suffix);
}

std::vector<std::string> sorted_unique_tokens(std::string_view text) {
  auto toks = tokenize(text);
  std::sort(toks.begin(), toks.end());
  toks.erase(std::unique(toks.begin(), toks.end()), toks.end());
  return toks;
}

double jaccard_sorted(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Indices of candidates sorted by ascending score, stable on ties.
std::vector<std::size_t> rank_ascending(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

}  // namespace

// ---- Vocabulary ------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) {
    ids_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.emplace_back(t);
  }
}

int Vocabulary::add_token(std::string_view token) {
  if (token.empty()) throw InvalidArgument("empty token");
  const auto it = ids_.find(std::string(token));
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

int Vocabulary::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return ids_.contains(std::string(token));
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InvalidArgument("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::add_noun(std::string noun) {
  if (!noun.empty()) nouns_.insert(std::move(noun));
}

void Vocabulary::add_graph_objects(const KnowledgeGraph& graph) {
  for (const auto& o : graph.objects()) nouns_.insert(o);
}

void Vocabulary::add_plural_exception(std::string plural, std::string singular) {
  plural_exceptions_[std::move(plural)] = std::move(singular);
}

const std::string* Vocabulary::plural_exception(const std::string& word) const {
  const auto it = plural_exceptions_.find(word);
  return it == plural_exceptions_.end() ? nullptr : &it->second;
}

Vocabulary Vocabulary::with_default_lexicon() {
  Vocabulary v;
  for (const char* n : kDefaultNouns) v.add_noun(n);
  for (const auto& [p, s] : kDefaultPluralExceptions) v.add_plural_exception(p, s);
  return v;
}

void save_vocabulary_tokens(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t id = kFirstTokenId; id < vocab.size(); ++id) {
    out << vocab.token(static_cast<int>(id)) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void load_vocabulary_tokens(const std::filesystem::path& path, Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const int expected = static_cast<int>(line_no) + kFirstTokenId;
    if (line.empty() || vocab.add_token(line) != expected) {
      throw MalformedLine(line_no + 1, "vocabulary token '" + line + "' is empty or repeated");
    }
    ++line_no;
  }
}

void load_noun_lexicon(const std::filesystem::path& path, Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open noun lexicon " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    auto toks = tokenize(line);
    if (line.empty() || line[0] == '#' || toks.empty()) continue;
    std::string noun = toks[0];
    for (std::size_t i = 1; i < toks.size(); ++i) noun += " " + toks[i];
    vocab.add_noun(std::move(noun));
  }
}

void load_plural_exceptions(const std::filesystem::path& path, Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plural exceptions " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw MalformedLine(line_no, "expected plural<TAB>singular");
    vocab.add_plural_exception(line.substr(0, tab), line.substr(tab + 1));
  }
}

// ---- text processing -------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string singularize(std::string_view word, const Vocabulary& vocab) {
  const std::string w(word);
  if (const auto* s = vocab.plural_exception(w)) return *s;
  if (ends_with(w, "ies")) return w.substr(0, w.size() - 3) + "y";
  if (ends_with(w, "sses")) return w.substr(0, w.size() - 2);
  if (ends_with(w, "es")) {
    std::string stem = w.substr(0, w.size() - 2);
    if (vocab.is_noun(stem)) return stem;
  }
  if (ends_with(w, "s")) {
    std::string stem = w.substr(0, w.size() - 1);
    if (vocab.is_noun(stem)) return stem;
  }
  return w;
}

std::vector<std::string> extract_keywords(std::string_view caption, const Vocabulary& vocab) {
  std::vector<std::string> keywords;
  for (const auto& tok : tokenize(caption)) {
    auto s = singularize(tok, vocab);
    if (vocab.is_noun(s) && std::find(keywords.begin(), keywords.end(), s) == keywords.end()) {
      keywords.push_back(std::move(s));
    }
  }
  return keywords;
}

std::vector<Triplet> retrieve_triplets(std::span<const std::string> keywords,
                                       const KnowledgeGraph& graph) {
  return one_step_neighbors(graph, keywords);
}

// ---- selection -------------------------------------------------------------

std::string_view selection_name(SelectionKind kind) {
  switch (kind) {
    case SelectionKind::Random:
      return "random";
    case SelectionKind::RelevanceToCaption:
      return "relevance";
    case SelectionKind::DiversityAmongTriplets:
      return "diversity";
  }
  return "random";
}

std::optional<SelectionKind> parse_selection(std::string_view text) {
  if (text == "random") return SelectionKind::Random;
  if (text == "relevance") return SelectionKind::RelevanceToCaption;
  if (text == "diversity") return SelectionKind::DiversityAmongTriplets;
  return std::nullopt;
}

double token_jaccard(std::string_view a, std::string_view b) {
  return jaccard_sorted(sorted_unique_tokens(a), sorted_unique_tokens(b));
}

std::vector<Triplet> select_triplets(std::span<const Triplet> candidates, std::size_t m,
                                     const SelectionStrategy& strategy,
                                     std::string_view caption, std::uint64_t stream) {
  if (m == 0) throw InvalidArgument("select_triplets: m must be at least 1");
  if (candidates.size() <= m) return {candidates.begin(), candidates.end()};

  std::vector<Triplet> out;
  out.reserve(m);
  switch (strategy.kind) {
    case SelectionKind::Random: {
      std::vector<std::size_t> order(candidates.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(mix_seed(strategy.seed, stream, 1));
      rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t i = 0; i < m; ++i) out.push_back(candidates[order[i]]);
      break;
    }
    case SelectionKind::RelevanceToCaption: {
      const auto cap = sorted_unique_tokens(caption);
      std::vector<double> sim;
      sim.reserve(candidates.size());
      for (const auto& t : candidates) {
        sim.push_back(jaccard_sorted(cap, sorted_unique_tokens(triplet_to_sentence(t))));
      }
      const auto order = rank_ascending(sim);
      for (std::size_t i = 0; i < m; ++i) out.push_back(candidates[order[i]]);
      break;
    }
    case SelectionKind::DiversityAmongTriplets: {
      Rng rng(mix_seed(strategy.seed, stream, 2));
      const auto first = static_cast<std::size_t>(rng.index(candidates.size()));
      const auto anchor = sorted_unique_tokens(triplet_to_sentence(candidates[first]));
      std::vector<std::size_t> rest;
      std::vector<double> sim;
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (i == first) continue;
        rest.push_back(i);
        sim.push_back(jaccard_sorted(anchor, sorted_unique_tokens(triplet_to_sentence(candidates[i]))));
      }
      out.push_back(candidates[first]);
      const auto order = rank_ascending(sim);
      for (std::size_t i = 0; i + 1 < m; ++i) out.push_back(candidates[rest[order[i]]]);
      break;
    }
  }
  return out;
}

// ---- verbalization ---------------------------------------------------------

const std::vector<std::pair<std::string, std::string>>& relation_templates() {
  return kTemplates;
}

std::string relation_template(std::string_view relation) {
  for (const auto& [rel, tmpl] : kTemplates) {
    if (rel == relation) return tmpl;
  }
  std::string fallback(relation);
  std::replace(fallback.begin(), fallback.end(), '_', ' ');
  return fallback;
}

std::string triplet_to_sentence(const Triplet& t) {
  return t.head + " " + relation_template(t.relation) + " " + t.tail;
}

std::string build_knowledge_sentence(std::span<const Triplet> triplets) {
  std::string out;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    if (i) out += ". ";
    out += triplet_to_sentence(triplets[i]);
  }
  if (!out.empty()) out += ".";
  return out;
}

std::vector<int> encode_tokens(std::string_view text, const Vocabulary& vocab,
                               std::size_t max_len) {
  if (max_len < 2) throw InvalidArgument("encode_tokens: max_len must be at least 2");
  std::vector<int> ids;
  ids.reserve(max_len);
  ids.push_back(kClsId);
  for (const auto& tok : tokenize(text)) {
    if (ids.size() + 1 >= max_len) break;
    ids.push_back(vocab.id(tok));
  }
  ids.push_back(kSepId);
  ids.resize(max_len, kPadId);
  return ids;
}

TextSample build_text_sample(std::string_view caption, const Vocabulary& vocab,
                             const KnowledgeGraph* graph, std::size_t m,
                             const SelectionStrategy& strategy, std::uint64_t stream,
                             std::size_t max_len) {
  TextSample sample;
  sample.caption = std::string(caption);
  sample.keywords = extract_keywords(caption, vocab);
  if (graph != nullptr) {
    const auto candidates = retrieve_triplets(sample.keywords, *graph);
    sample.triplets = select_triplets(candidates, m, strategy, caption, stream);
  }
  sample.knowledge_sentence = build_knowledge_sentence(sample.triplets);
  sample.caption_ids = encode_tokens(sample.caption, vocab, max_len);
  sample.knowledge_ids = encode_tokens(sample.knowledge_sentence, vocab, max_len);
  return sample;
}

}  // namespace ktir
