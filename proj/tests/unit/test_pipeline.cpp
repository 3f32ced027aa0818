#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "nprompt/pipeline.hpp"
#include "support/golden.hpp"

using namespace nprompt;

namespace {

KeywordTaxonomy bundled() { return load_taxonomy(std::string(NPROMPT_DATA_DIR) + "/taxonomy.csv"); }

}  // namespace

TEST(ExtractPrefix, CutsAtFirstComma) {
  EXPECT_EQ(extract_prefix("a boy on a horse, by greg rutkowski, 4k"), "a boy on a horse");
  EXPECT_EQ(extract_prefix("A tropical beach with palm trees"), "A tropical beach with palm trees");
  EXPECT_EQ(extract_prefix(",leading comma"), "");
  EXPECT_EQ(extract_prefix(""), "");
}

TEST(OverlapFilter, HandComputedJaccard) {
  auto r = overlap_filter("a b", "a b, c d e");
  EXPECT_DOUBLE_EQ(r.overlap, 0.4);
  EXPECT_TRUE(r.kept);
  r = overlap_filter("a b c", "a b c");
  EXPECT_DOUBLE_EQ(r.overlap, 1.0);
  EXPECT_FALSE(r.kept);
  r = overlap_filter("", "");
  EXPECT_EQ(r.overlap, 0.0);
  EXPECT_TRUE(r.kept);
}

TEST(OverlapFilter, ThresholdIsInclusive) {
  auto r = overlap_filter("a b c", "a b c, d e");
  EXPECT_EQ(r.overlap, 0.6);
  EXPECT_TRUE(r.kept);
  EXPECT_FALSE(overlap_filter("a b c", "a b c, d e", 0.59).kept);
}

TEST(OverlapFilter, AcceptsCustomSimilarity) {
  auto r = overlap_filter("x", "y", 0.6, [](std::string_view, std::string_view) { return 0.9; });
  EXPECT_FALSE(r.kept);
}

TEST(PrefixGolden, TwentyHandComputedCases) {
  const auto cases = golden::load_prefix_cases(golden::fixture("prefix_golden.tsv"));
  ASSERT_EQ(cases.size(), 20u);
  int boundary = 0;
  for (const auto& c : cases) {
    SCOPED_TRACE(c.prompt);
    EXPECT_EQ(extract_prefix(c.prompt), c.prefix);
    auto r = overlap_filter(c.prefix, c.prompt);
    EXPECT_EQ(r.overlap, c.overlap());
    EXPECT_EQ(r.kept, c.kept);
    EXPECT_EQ(prepare_record(c.prompt).kept, c.record_kept);
    boundary += r.overlap == 0.6 ? 1 : 0;
  }
  EXPECT_GE(boundary, 1);
}

TEST(Corpus, ReadSkipsBlankLinesAndWritesRecords) {
  std::istringstream in("a, b\n\n  \nc d\r\n");
  auto lines = read_corpus(in);
  EXPECT_EQ(lines, (std::vector<std::string>{"a, b", "c d"}));
  std::ostringstream out;
  write_corpus_records(out, {prepare_record("a b, c d e")});
  EXPECT_EQ(out.str(), "a b, c d e\ta b\t0.400000\ttrue\n");
}

TEST(Taxonomy, BundledFileHasSixColumnsOf37) {
  auto tax = bundled();
  for (Category c : kCategories) EXPECT_EQ(tax.keywords(c).size(), 37u) << category_name(c);
  EXPECT_TRUE(tax.contains(Category::booster, "Trending on ArtStation"));
  EXPECT_FALSE(tax.contains(Category::style, "trending on artstation"));
  // The booster column lists one keyword twice.
  EXPECT_EQ(tax.unique_keywords(Category::booster).size(), 36u);
}

TEST(Taxonomy, MissingColumnIsNamed) {
  std::istringstream in("Style,Artist,Format,Boosters,Perspective\na,b,c,d,e\n");
  try {
    parse_taxonomy(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("Vibes"), std::string::npos);
  }
  std::istringstream empty("");
  EXPECT_THROW(parse_taxonomy(empty), ParseError);
  EXPECT_THROW(load_taxonomy("/nonexistent/taxonomy.csv"), ParseError);
}

TEST(Taxonomy, ParsesQuotedCellsAndAnyColumnOrder) {
  std::istringstream in("vibe,perspective,style,artist,format,booster\n\"calm, quiet\",wide,a,b,c,\"say \"\"hi\"\"\"\n");
  auto tax = parse_taxonomy(in);
  EXPECT_EQ(tax.keywords(Category::vibe), (std::vector<std::string>{"calm, quiet"}));
  EXPECT_EQ(tax.keywords(Category::booster), (std::vector<std::string>{"say \"hi\""}));
}

TEST(BuildClauses, AutoModeGivesSixClausesOfFive) {
  auto tax = bundled();
  ClauseSelection sel;
  sel.seed = 42;
  auto spec = build_clauses(tax, sel);
  ASSERT_EQ(spec.clauses.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& cl = spec.clauses[i];
    EXPECT_EQ(cl.label, category_name(kCategories[i]));
    EXPECT_EQ(cl.predicates.size(), 5u);
    EXPECT_EQ(cl.min_satisfied, 1);
    EXPECT_EQ(cl.max_satisfied, kUnbounded);
    std::set<std::string> distinct;
    for (const auto& p : cl.predicates) {
      EXPECT_TRUE(tax.contains(kCategories[i], p.phrase));
      distinct.insert(p.phrase);
    }
    EXPECT_EQ(distinct.size(), 5u);
  }
  EXPECT_EQ(to_string(build_clauses(tax, sel)), to_string(spec));
  sel.seed = 43;
  EXPECT_NE(to_string(build_clauses(tax, sel)), to_string(spec));
}

TEST(BuildClauses, ExplicitKeywordsAndNegatives) {
  auto tax = bundled();
  ClauseSelection sel;
  sel[Category::booster] = CategorySelection::of({"trending on artstation"});
  sel[Category::artist] = CategorySelection::of({});
  sel.negative_phrases = {"blurry"};
  auto spec = build_clauses(tax, sel);
  ASSERT_EQ(spec.clauses.size(), 6u);
  const auto& booster = spec.clauses[2];
  EXPECT_EQ(booster.label, "booster");
  ASSERT_EQ(booster.predicates.size(), 1u);
  EXPECT_EQ(booster.predicates[0].phrase, "trending on artstation");
  const auto& neg = spec.clauses.back();
  EXPECT_EQ(neg.label, "negative");
  ASSERT_EQ(neg.predicates.size(), 1u);
  EXPECT_EQ(neg.predicates[0].polarity, Polarity::negated);
  EXPECT_EQ(neg.predicates[0].phrase, "blurry");
}

TEST(BuildClauses, RejectsKeywordsOutsideTheCatalogUnlessCustom) {
  auto tax = bundled();
  ClauseSelection sel;
  sel[Category::style] = CategorySelection::of({"glitter"});
  EXPECT_THROW(build_clauses(tax, sel), ValidationError);
  sel[Category::style] = CategorySelection::of({"glitter"}, true);
  EXPECT_EQ(build_clauses(tax, sel).clauses[0].predicates[0].phrase, "glitter");
  sel.negative_phrases = {" "};
  EXPECT_THROW(build_clauses(tax, sel), ValidationError);
}

TEST(SampleKeywords, DistinctAndSeeded) {
  std::vector<std::string> pool{"a", "b", "c", "d", "e", "f"};
  auto x = sample_keywords(pool, 4, 9);
  EXPECT_EQ(x, sample_keywords(pool, 4, 9));
  EXPECT_EQ(std::set<std::string>(x.begin(), x.end()).size(), 4u);
  EXPECT_EQ(sample_keywords(pool, 10, 1).size(), 6u);
}
