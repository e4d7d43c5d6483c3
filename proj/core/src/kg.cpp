#include "ktir/kg.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "ktir/errors.hpp"

namespace ktir {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    fields.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

std::string normalize_relation(std::string_view raw) {
  auto r = trim(raw);
  if (r.starts_with("/r/")) r.remove_prefix(3);
  return std::string(r);
}

std::string triplet_key(const Triplet& t) {
  std::string key = t.head;
  key += '\t';
  key += t.relation;
  key += '\t';
  key += t.tail;
  key += '\t';
  key += source_name(t.source);
  return key;
}

}  // namespace

std::string_view source_name(Source source) {
  return source == Source::RSKG ? "RSKG" : "ConceptNet";
}

std::optional<Source> parse_source(std::string_view text) {
  std::string lower(trim(text));
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "rskg") return Source::RSKG;
  if (lower == "conceptnet") return Source::ConceptNet;
  return std::nullopt;
}

const std::set<std::string>& default_conceptnet_relations() {
  static const std::set<std::string> relations = {
      "UsedFor",   "ReceivesAction", "HasA",        "Causes",          "HasProperty",
      "CreatedBy", "DefinedAs",      "AtLocation",  "HasSubEvent",     "MadeUpOf",
      "HasPrerequisite", "Desires",  "NotDesires",  "IsA",             "CapableOf"};
  return relations;
}

std::optional<std::string> normalize_concept(std::string_view raw) {
  auto s = trim(raw);
  if (s.starts_with("/c/")) {
    s.remove_prefix(3);
    const auto slash = s.find('/');
    if (slash == std::string_view::npos) return std::nullopt;
    if (s.substr(0, slash) != "en") return std::nullopt;
    s.remove_prefix(slash + 1);
    s = s.substr(0, s.find('/'));
  }
  std::string out;
  out.reserve(s.size());
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80) return std::nullopt;
    if (c == '_' || c == ' ') {
      if (!out.empty() && out.back() != ' ') out.push_back(' ');
      continue;
    }
    if (!std::isalnum(c)) return std::nullopt;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  if (out.empty()) return std::nullopt;
  return out;
}

bool KnowledgeGraph::add(Triplet t) {
  if (t.head.empty() || t.tail.empty() || t.relation.empty()) {
    throw InvalidArgument("triplet with an empty field");
  }
  if (!keys_.insert(triplet_key(t)).second) return false;
  const std::size_t idx = triplets_.size();
  objects_.insert(t.head);
  objects_.insert(t.tail);
  relations_.insert(t.relation);
  index_[t.head].push_back(idx);
  if (t.tail != t.head) index_[t.tail].push_back(idx);
  triplets_.push_back(std::move(t));
  return true;
}

std::span<const std::size_t> KnowledgeGraph::incident(const std::string& object) const {
  const auto it = index_.find(object);
  if (it == index_.end()) return {};
  return it->second;
}

KnowledgeGraph parse_graph(std::istream& in, Source source, const LoadOptions& options) {
  KnowledgeGraph graph;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || trim(line).front() == '#') continue;

    const auto fields = split_tabs(line);
    if (fields.size() != 3 && fields.size() != 4) {
      throw MalformedLine(line_no, "expected 3 or 4 tab-separated fields, got " +
                                       std::to_string(fields.size()));
    }
    Source row_source = source;
    if (fields.size() == 4) {
      const auto parsed = parse_source(fields[3]);
      if (!parsed) throw MalformedLine(line_no, "unknown source '" + std::string(fields[3]) + "'");
      row_source = *parsed;
    }
    std::string relation = normalize_relation(fields[1]);
    if (relation.empty()) throw MalformedLine(line_no, "empty relation");
    if (options.allowed_relations && !options.allowed_relations->contains(relation)) {
      if (options.strict_relations) {
        throw UnknownRelation("line " + std::to_string(line_no) + ": relation '" + relation +
                              "' is not allowed");
      }
      continue;
    }
    auto head = normalize_concept(fields[0]);
    auto tail = normalize_concept(fields[2]);
    if (!head || !tail) continue;
    graph.add({std::move(*head), std::move(relation), std::move(*tail), row_source});
  }
  return graph;
}

KnowledgeGraph load_graph(const std::filesystem::path& path, Source source,
                          const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open knowledge graph " + path.string());
  return parse_graph(in, source, options);
}

void write_graph(std::ostream& out, const KnowledgeGraph& graph) {
  for (const auto& t : graph.triplets()) {
    out << t.head << '\t' << t.relation << '\t' << t.tail << '\t' << source_name(t.source)
        << '\n';
  }
}

void save_graph(const std::filesystem::path& path, const KnowledgeGraph& graph) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  write_graph(out, graph);
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<Triplet> one_step_neighbors(const KnowledgeGraph& graph,
                                        std::span<const std::string> keywords) {
  std::vector<std::size_t> hits;
  for (const auto& k : keywords) {
    const auto idx = graph.incident(k);
    hits.insert(hits.end(), idx.begin(), idx.end());
  }
  std::sort(hits.begin(), hits.end());
  hits.erase(std::unique(hits.begin(), hits.end()), hits.end());
  std::vector<Triplet> out;
  out.reserve(hits.size());
  for (auto i : hits) out.push_back(graph.triplets()[i]);
  return out;
}

KnowledgeGraph combine_sources(const KnowledgeGraph& rskg, const KnowledgeGraph& conceptnet) {
  KnowledgeGraph combined;
  for (const auto& t : rskg.triplets()) combined.add(t);
  for (const auto& t : conceptnet.triplets()) {
    if (rskg.has_object(t.head) || rskg.has_object(t.tail)) combined.add(t);
  }
  return combined;
}

GraphStats graph_stats(const KnowledgeGraph& graph) {
  return {graph.objects().size(), graph.relations().size(), graph.triplets().size()};
}

}  // namespace ktir
