#pragma once

// Knowledge graphs as one-step-neighbourhood triplet stores.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ktir {

enum class Source { RSKG, ConceptNet };

std::string_view source_name(Source source);
// Accepts "rskg" / "conceptnet" in any letter case.
std::optional<Source> parse_source(std::string_view text);

struct Triplet {
  std::string head;
  std::string relation;
  std::string tail;
  Source source = Source::RSKG;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

class KnowledgeGraph {
 public:
  // Appends t unless the same (head, relation, tail, source) is already
  // present. Returns whether the triplet was added. Throws InvalidArgument
  // on an empty head, tail or relation.
  bool add(Triplet t);

  const std::vector<Triplet>& triplets() const { return triplets_; }
  const std::set<std::string>& objects() const { return objects_; }
  const std::set<std::string>& relations() const { return relations_; }
  bool has_object(const std::string& object) const { return objects_.contains(object); }
  bool empty() const { return triplets_.empty(); }

  // Indices (ascending) of the triplets in which object is head or tail.
  std::span<const std::size_t> incident(const std::string& object) const;

 private:
  std::vector<Triplet> triplets_;
  std::set<std::string> objects_;
  std::set<std::string> relations_;
  std::unordered_map<std::string, std::vector<std::size_t>> index_;
  std::set<std::string> keys_;
};

struct LoadOptions {
  // Rows whose relation is outside this set are skipped (or rejected when
  // strict_relations is set). Unset keeps every relation.
  std::optional<std::set<std::string>> allowed_relations;
  bool strict_relations = false;
};

// The fifteen ConceptNet relations kept for retrieval.
const std::set<std::string>& default_conceptnet_relations();

// Lower-cases a concept, maps underscores to spaces, strips ConceptNet URI
// framing ("/c/en/boat/n" -> "boat") and applies the English whitelist
// (ASCII letters, digits, spaces). Returns nullopt for rejected concepts.
std::optional<std::string> normalize_concept(std::string_view raw);

// TSV: head<TAB>relation<TAB>tail[<TAB>source], '#' comments, blank lines
// ignored. Throws MalformedLine for rows without 3 or 4 fields and
// UnknownRelation for filtered relations when strict_relations is set.
KnowledgeGraph parse_graph(std::istream& in, Source source, const LoadOptions& options = {});
KnowledgeGraph load_graph(const std::filesystem::path& path, Source source,
                          const LoadOptions& options = {});

void write_graph(std::ostream& out, const KnowledgeGraph& graph);
void save_graph(const std::filesystem::path& path, const KnowledgeGraph& graph);

// Every triplet whose head or tail is one of the keywords, in graph order,
// without duplicates.
std::vector<Triplet> one_step_neighbors(const KnowledgeGraph& graph,
                                        std::span<const std::string> keywords);

// All RSKG triplets plus the ConceptNet triplets that touch an RSKG object.
KnowledgeGraph combine_sources(const KnowledgeGraph& rskg, const KnowledgeGraph& conceptnet);

struct GraphStats {
  std::size_t n_objects = 0;
  std::size_t n_relations = 0;
  std::size_t n_triplets = 0;

  friend bool operator==(const GraphStats&, const GraphStats&) = default;
};

GraphStats graph_stats(const KnowledgeGraph& graph);

}  // namespace ktir
