#include <gtest/gtest.h>

#include <regex>

#include "test_support.hpp"
#include "xlb/regex.hpp"

namespace xlb {
namespace {

TEST(Regex, AnchoredFullMatch) {
  Regex r("/u/[0-9]+");
  EXPECT_TRUE(r.full_match("/u/42"));
  EXPECT_FALSE(r.full_match("/u/x"));
  EXPECT_FALSE(r.full_match("/u/42/"));
  EXPECT_FALSE(r.full_match("x/u/42"));
}

TEST(Regex, Operators) {
  EXPECT_TRUE(Regex("a|b").full_match("b"));
  EXPECT_TRUE(Regex("(ab)*c").full_match("ababc"));
  EXPECT_TRUE(Regex("(ab)*c").full_match("c"));
  EXPECT_FALSE(Regex("(ab)+c").full_match("c"));
  EXPECT_TRUE(Regex("colou?r").full_match("color"));
  EXPECT_TRUE(Regex("[^/]+").full_match("abc"));
  EXPECT_FALSE(Regex("[^/]+").full_match("a/c"));
  EXPECT_TRUE(Regex("\\d\\w\\s\\.").full_match("7_ ."));
  EXPECT_TRUE(Regex("").full_match(""));
  EXPECT_TRUE(Regex("a()b").full_match("ab"));
  EXPECT_TRUE(Regex("(a*)*").full_match("aaa"));
  EXPECT_TRUE(Regex("[a-c-]").full_match("-"));
}

TEST(Regex, RejectsOutsideSubset) {
  for (const char* bad : {"a{2}", "^a", "a$", "(a", "a)", "[a", "*a", "a\\q", "[]", "[z-a]"}) {
    EXPECT_TRUE(Regex::check(bad).has_value()) << bad;
  }
}

TEST(Regex, LinearOnPathologicalInput) {
  Regex r("(a*)*b");
  std::string input(20000, 'a');
  EXPECT_FALSE(r.full_match(input));
}

TEST(RegexProperty, AgreesWithEcmaScriptOnSubset) {
  testing::Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    std::string pattern = testing::random_regex(rng);
    std::string text = testing::coin(rng) ? testing::random_path(rng) : testing::header_values()[testing::below(rng, 6)];
    EXPECT_EQ(Regex(pattern).full_match(text), std::regex_match(text, std::regex(pattern)))
        << pattern << " vs " << text;
  }
}

}  // namespace
}  // namespace xlb
