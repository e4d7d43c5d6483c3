#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "ktir/errors.hpp"
#include "ktir/knowledge_text.hpp"
#include "ktir/random.hpp"

#ifndef KTIR_DATA_DIR
#define KTIR_DATA_DIR "data"
#endif

namespace ktir {
namespace {

using Strings = std::vector<std::string>;

const Vocabulary& lexicon() {
  static const Vocabulary v = Vocabulary::with_default_lexicon();
  return v;
}

std::vector<Triplet> numbered(std::size_t n) {
  std::vector<Triplet> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"h" + std::to_string(i), "next_to", "t" + std::to_string(i), Source::RSKG});
  }
  return out;
}

TEST(Keywords, PaperCaptions) {
  EXPECT_EQ(extract_keywords("There is a lake", lexicon()), Strings{"lake"});
  EXPECT_EQ(extract_keywords("There are many boats", lexicon()), Strings{"boat"});
  EXPECT_EQ(extract_keywords("Many boats near the sandy beaches", lexicon()),
            (Strings{"boat", "beach"}));
}

TEST(Keywords, DeduplicatedInFirstOccurrenceOrder) {
  EXPECT_EQ(extract_keywords("Trees, a LAKE and more trees near the lake.", lexicon()),
            (Strings{"tree", "lake"}));
  EXPECT_TRUE(extract_keywords("nothing to see", lexicon()).empty());
}

TEST(Keywords, GraphObjectsJoinTheLexicon) {
  Vocabulary v;
  KnowledgeGraph g;
  g.add({"solar panel", "AtLocation", "roof", Source::RSKG});
  v.add_graph_objects(g);
  EXPECT_TRUE(v.is_noun("roof"));
  EXPECT_TRUE(v.is_noun("solar panel"));
}

TEST(Singularize, Rules) {
  EXPECT_EQ(singularize("beaches", lexicon()), "beach");
  EXPECT_EQ(singularize("grass", lexicon()), "grass");
  EXPECT_FALSE(lexicon().is_noun("gras"));
  EXPECT_EQ(singularize("water", lexicon()), "water");
  EXPECT_EQ(singularize("factories", lexicon()), "factory");
  EXPECT_EQ(singularize("classes", lexicon()), "class");
  EXPECT_EQ(singularize("boats", lexicon()), "boat");
  EXPECT_EQ(singularize("houses", lexicon()), "house");
  EXPECT_EQ(singularize("buses", lexicon()), "bus");
  EXPECT_EQ(singularize("is", lexicon()), "is");
}

TEST(Singularize, KeywordsAreFixedPoints) {
  const Strings captions{"many boats and ships near the piers", "grass and trees around houses",
                         "two tennis courts beside buildings", "factories along the rivers"};
  for (const auto& c : captions) {
    for (const auto& k : extract_keywords(c, lexicon())) EXPECT_EQ(singularize(k, lexicon()), k);
  }
}

TEST(Select, FewerCandidatesThanMKeptAsIs) {
  const auto c = numbered(3);
  for (auto kind : {SelectionKind::Random, SelectionKind::RelevanceToCaption,
                    SelectionKind::DiversityAmongTriplets}) {
    EXPECT_EQ(select_triplets(c, 5, {kind, 7}, "caption"), c);
  }
}

TEST(Select, ExactlyMFromLargerPool) {
  const auto c = numbered(12);
  for (auto kind : {SelectionKind::Random, SelectionKind::RelevanceToCaption,
                    SelectionKind::DiversityAmongTriplets}) {
    const auto s = select_triplets(c, 5, {kind, 7}, "h1 near t2");
    ASSERT_EQ(s.size(), 5u);
    std::set<std::string> heads;
    for (const auto& t : s) {
      EXPECT_NE(std::find(c.begin(), c.end(), t), c.end());
      heads.insert(t.head);
    }
    EXPECT_EQ(heads.size(), 5u);
  }
}

TEST(Select, SeededDeterminism) {
  const auto c = numbered(20);
  const SelectionStrategy s{SelectionKind::Random, 42};
  EXPECT_EQ(select_triplets(c, 5, s, "x", 3), select_triplets(c, 5, s, "x", 3));
  EXPECT_NE(select_triplets(c, 5, s, "x", 3), select_triplets(c, 5, s, "x", 4));
  const SelectionStrategy d{SelectionKind::DiversityAmongTriplets, 42};
  EXPECT_EQ(select_triplets(c, 5, d, "x", 3), select_triplets(c, 5, d, "x", 3));
}

TEST(Select, ZeroMThrows) {
  const auto c = numbered(3);
  EXPECT_THROW(select_triplets(c, 0, {}, "x"), InvalidArgument);
}

TEST(Select, RelevancePicksMostDistant) {
  const std::vector<Triplet> c{{"lake", "HasA", "water", Source::RSKG},
                               {"boat", "stop_at", "lake", Source::RSKG},
                               {"road", "next_to", "house", Source::RSKG},
                               {"tree", "next_to", "lake", Source::RSKG}};
  const auto s = select_triplets(c, 2, {SelectionKind::RelevanceToCaption, 0}, "a lake with water");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].head, "road");
  EXPECT_EQ(s[1].head, "boat");
}

TEST(Select, DiversityAvoidsFirstPick) {
  const std::vector<Triplet> c{{"lake", "HasA", "water", Source::RSKG},
                               {"lake", "HasA", "water", Source::ConceptNet},
                               {"road", "next_to", "house", Source::RSKG}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = select_triplets(c, 2, {SelectionKind::DiversityAmongTriplets, seed}, "", seed);
    ASSERT_EQ(s.size(), 2u);
    if (s[0].head == "lake") EXPECT_EQ(s[1].head, "road");
  }
}

TEST(Jaccard, Values) {
  EXPECT_DOUBLE_EQ(token_jaccard("", ""), 0.0);
  EXPECT_DOUBLE_EQ(token_jaccard("a b", "a b"), 1.0);
  EXPECT_DOUBLE_EQ(token_jaccard("a b", "b c"), 1.0 / 3.0);
}

TEST(Sentences, Templates) {
  EXPECT_EQ(triplet_to_sentence({"boat", "AtLocation", "water", Source::ConceptNet}),
            "boat is at location of water");
  EXPECT_EQ(triplet_to_sentence({"road", "UsedFor", "driving", Source::ConceptNet}),
            "road is used for driving");
  EXPECT_EQ(triplet_to_sentence({"building", "color", "white", Source::RSKG}),
            "building color is white");
  EXPECT_EQ(triplet_to_sentence({"a", "pass_through", "b", Source::RSKG}), "a pass through b");
  EXPECT_EQ(triplet_to_sentence({"a", "lies_on", "b", Source::RSKG}), "a lies on b");
}

TEST(Sentences, TwentyNineDistinctTemplates) {
  std::set<std::string> infixes;
  for (const auto& [relation, tmpl] : relation_templates()) {
    infixes.insert(relation_template(relation));
    EXPECT_EQ(relation_template(relation), tmpl);
  }
  EXPECT_EQ(relation_templates().size(), 29u);
  EXPECT_EQ(infixes.size(), 29u);
}

TEST(Sentences, KnowledgeSentence) {
  EXPECT_EQ(build_knowledge_sentence({}), "");
  const std::vector<Triplet> one{{"boat", "AtLocation", "water", Source::ConceptNet}};
  EXPECT_EQ(build_knowledge_sentence(one), "boat is at location of water.");
  const std::vector<Triplet> two{{"boat", "AtLocation", "water", Source::ConceptNet},
                                 {"lake", "HasA", "water", Source::ConceptNet}};
  EXPECT_EQ(build_knowledge_sentence(two), "boat is at location of water. lake has a water.");
}

TEST(Tokens, Encoding) {
  Vocabulary v;
  for (const char* t : {"a", "b", "c"}) v.add_token(t);
  const int lake = v.add_token("lake");
  EXPECT_EQ(lake, 7);
  EXPECT_EQ(encode_tokens("", v, 4), (std::vector<int>{kClsId, kSepId, kPadId, kPadId}));
  EXPECT_EQ(encode_tokens("lake", v, 4), (std::vector<int>{kClsId, 7, kSepId, kPadId}));
  EXPECT_EQ(encode_tokens("Lake, river!", v, 5),
            (std::vector<int>{kClsId, 7, kUnkId, kSepId, kPadId}));
  EXPECT_THROW(encode_tokens("lake", v, 1), InvalidArgument);
}

TEST(Tokens, TruncationKeepsOneClsAndSep) {
  Vocabulary v;
  std::string text;
  for (int i = 0; i < 50; ++i) text += "w" + std::to_string(i) + " ";
  for (const auto& t : tokenize(text)) v.add_token(t);
  for (std::size_t len : {2u, 3u, 10u, 32u, 60u}) {
    const auto ids = encode_tokens(text, v, len);
    ASSERT_EQ(ids.size(), len);
    EXPECT_EQ(std::count(ids.begin(), ids.end(), kClsId), 1);
    EXPECT_EQ(std::count(ids.begin(), ids.end(), kSepId), 1);
  }
  EXPECT_EQ(encode_tokens(text, v, 32).back(), kSepId);
}

TEST(Vocab, BijectionAndFileRoundTrip) {
  Vocabulary v;
  EXPECT_EQ(v.size(), static_cast<std::size_t>(kFirstTokenId));
  const int a = v.add_token("alpha");
  EXPECT_EQ(v.add_token("alpha"), a);
  v.add_token("beta");
  EXPECT_EQ(v.token(v.id("beta")), "beta");
  EXPECT_EQ(v.id("gamma"), kUnkId);
  const auto path = std::filesystem::temp_directory_path() / "ktir_vocab_test.txt";
  save_vocabulary_tokens(path, v);
  Vocabulary back;
  load_vocabulary_tokens(path, back);
  EXPECT_EQ(back.size(), v.size());
  EXPECT_EQ(back.id("beta"), v.id("beta"));
  std::filesystem::remove(path);
}

TEST(Sample, LakeCaptionPullsLakeTriplets) {
  const auto graph =
      load_graph(std::filesystem::path(KTIR_DATA_DIR) / "fixtures" / "rskg_fixture.tsv", Source::RSKG);
  Vocabulary v = Vocabulary::with_default_lexicon();
  v.add_graph_objects(graph);
  const auto s = build_text_sample("There is a lake", v, &graph, 5, {}, 0, 32);
  EXPECT_EQ(s.keywords, Strings{"lake"});
  ASSERT_FALSE(s.triplets.empty());
  EXPECT_LE(s.triplets.size(), 5u);
  for (const auto& t : s.triplets) EXPECT_TRUE(t.head == "lake" || t.tail == "lake");
  EXPECT_EQ(s.knowledge_sentence, build_knowledge_sentence(s.triplets));
  EXPECT_EQ(s.caption_ids.size(), 32u);
  EXPECT_EQ(s.knowledge_ids.size(), 32u);
  EXPECT_EQ(build_text_sample("There is a lake", v, nullptr, 5, {}, 0, 32).knowledge_sentence, "");
}

}  // namespace
}  // namespace ktir
