#pragma once

#include <bitset>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xlb {

class RegexError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Route-matching regex subset: literals, escapes (\. \d \w \s and escaped
// metacharacters), '.', bracket classes with ranges and '^' negation,
// postfix '*' '+' '?', alternation '|' and grouping '(...)'. Matching is
// always anchored at both ends and runs as a Thompson NFA simulation, so it
// is linear in the input and never backtracks.
class Regex {
 public:
  static constexpr std::size_t kMaxPatternLength = 1024;

  explicit Regex(std::string_view pattern);

  bool full_match(std::string_view text) const;
  const std::string& pattern() const { return pattern_; }

  static std::optional<std::string> check(std::string_view pattern);

  struct State {
    enum class Kind : std::uint8_t { Chars, Split, Epsilon, Match };
    Kind kind = Kind::Epsilon;
    std::bitset<256> chars;
    int out = -1;
    int out2 = -1;
  };

 private:
  std::string pattern_;
  std::vector<State> states_;
  int start_ = 0;
};

// Compiled-pattern cache shared by data-path readers.
std::shared_ptr<const Regex> cached_regex(std::string_view pattern);

}  // namespace xlb
