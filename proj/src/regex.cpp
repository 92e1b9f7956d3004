#include "xlb/regex.hpp"

#include <bitset>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

namespace xlb {

namespace {

using State = Regex::State;

struct Fragment {
  int start;
  // (state index, 0 for out / 1 for out2) slots still to be patched
  std::vector<std::pair<int, int>> dangling;
};

State of(State::Kind kind) {
  State s;
  s.kind = kind;
  return s;
}

bool is_meta(char c) {
  switch (c) {
    case '(': case ')': case '[': case ']': case '.': case '*': case '+':
    case '?': case '|': case '\\': case '^': case '$': case '{': case '}':
      return true;
    default:
      return false;
  }
}

std::bitset<256> class_escape(char c, bool& ok) {
  std::bitset<256> set;
  ok = true;
  auto range = [&](unsigned char lo, unsigned char hi) {
    for (unsigned v = lo; v <= hi; ++v) set.set(v);
  };
  switch (c) {
    case 'd': range('0', '9'); break;
    case 'w': range('0', '9'); range('a', 'z'); range('A', 'Z'); set.set('_'); break;
    case 's': set.set(' '); set.set('\t'); set.set('\r'); set.set('\n'); set.set('\f'); set.set('\v'); break;
    default:
      if (is_meta(c) || c == '-' || c == '/') {
        set.set(static_cast<unsigned char>(c));
      } else {
        ok = false;
      }
  }
  return set;
}

class Compiler {
 public:
  Compiler(std::string_view pattern, std::vector<State>& states) : p_(pattern), states_(states) {}

  int compile() {
    Fragment f = parse_alt();
    if (pos_ != p_.size()) fail("unexpected ')'");
    int match = add(of(State::Kind::Match));
    patch(f, match);
    return f.start;
  }

 private:
  [[noreturn]] void fail(const std::string& what) {
    throw RegexError("regex: " + what + " at offset " + std::to_string(pos_));
  }

  int add(State s) {
    states_.push_back(s);
    return static_cast<int>(states_.size() - 1);
  }

  void patch(const Fragment& f, int target) {
    for (auto [idx, which] : f.dangling) {
      (which == 0 ? states_[idx].out : states_[idx].out2) = target;
    }
  }

  bool at_end() const { return pos_ >= p_.size(); }
  char peek() const { return p_[pos_]; }

  Fragment parse_alt() {
    Fragment left = parse_concat();
    while (!at_end() && peek() == '|') {
      ++pos_;
      Fragment right = parse_concat();
      State split;
      split.kind = State::Kind::Split;
      split.out = left.start;
      split.out2 = right.start;
      int s = add(split);
      Fragment merged{s, std::move(left.dangling)};
      merged.dangling.insert(merged.dangling.end(), right.dangling.begin(), right.dangling.end());
      left = std::move(merged);
    }
    return left;
  }

  Fragment parse_concat() {
    std::optional<Fragment> acc;
    while (!at_end() && peek() != '|' && peek() != ')') {
      Fragment next = parse_repeat();
      if (!acc) {
        acc = std::move(next);
      } else {
        patch(*acc, next.start);
        acc->dangling = std::move(next.dangling);
      }
    }
    if (!acc) {
      int e = add(of(State::Kind::Epsilon));
      return Fragment{e, {{e, 0}}};
    }
    return std::move(*acc);
  }

  Fragment parse_repeat() {
    Fragment f = parse_atom();
    while (!at_end() && (peek() == '*' || peek() == '+' || peek() == '?')) {
      char op = p_[pos_++];
      State split;
      split.kind = State::Kind::Split;
      split.out = f.start;
      int s = add(split);
      if (op == '*') {
        patch(f, s);
        f = Fragment{s, {{s, 1}}};
      } else if (op == '+') {
        patch(f, s);
        f = Fragment{f.start, {{s, 1}}};
      } else {
        f.dangling.emplace_back(s, 1);
        f.start = s;
      }
    }
    return f;
  }

  Fragment chars(const std::bitset<256>& set) {
    State st;
      st.kind = State::Kind::Chars;
    st.chars = set;
    int s = add(st);
    return Fragment{s, {{s, 0}}};
  }

  Fragment parse_atom() {
    char c = p_[pos_];
    switch (c) {
      case '(': {
        ++pos_;
        Fragment inner = parse_alt();
        if (at_end() || peek() != ')') fail("missing ')'");
        ++pos_;
        return inner;
      }
      case '[':
        return parse_class();
      case '.': {
        ++pos_;
        std::bitset<256> all;
        all.set();
        all.reset('\n');
        return chars(all);
      }
      case '\\': {
        ++pos_;
        if (at_end()) fail("dangling escape");
        bool ok = false;
        auto set = class_escape(p_[pos_], ok);
        if (!ok) fail(std::string("unsupported escape \\") + p_[pos_]);
        ++pos_;
        return chars(set);
      }
      case '*': case '+': case '?':
        fail("quantifier without operand");
      case '^': case '$': case '{': case '}': case ']':
        fail(std::string("unsupported metacharacter '") + c + "'");
      default: {
        ++pos_;
        std::bitset<256> set;
        set.set(static_cast<unsigned char>(c));
        return chars(set);
      }
    }
  }

  unsigned char class_char(bool& escaped_set, std::bitset<256>& set) {
    escaped_set = false;
    char c = p_[pos_++];
    if (c != '\\') return static_cast<unsigned char>(c);
    if (at_end()) fail("dangling escape in class");
    char e = p_[pos_++];
    bool ok = false;
    set = class_escape(e, ok);
    if (!ok) fail(std::string("unsupported escape \\") + e);
    if (set.count() > 1) {
      escaped_set = true;
      return 0;
    }
    return static_cast<unsigned char>(e);
  }

  Fragment parse_class() {
    ++pos_;  // '['
    bool negate = false;
    if (!at_end() && peek() == '^') {
      negate = true;
      ++pos_;
    }
    std::bitset<256> set;
    bool any = false;
    while (true) {
      if (at_end()) fail("missing ']'");
      if (peek() == ']') {
        ++pos_;
        break;
      }
      bool multi = false;
      std::bitset<256> esc;
      unsigned char lo = class_char(multi, esc);
      if (multi) {
        set |= esc;
        any = true;
        continue;
      }
      if (pos_ + 1 < p_.size() && peek() == '-' && p_[pos_ + 1] != ']') {
        ++pos_;
        unsigned char hi = class_char(multi, esc);
        if (multi) fail("class escape as range bound");
        if (hi < lo) fail("inverted range");
        for (unsigned v = lo; v <= hi; ++v) set.set(v);
      } else {
        set.set(lo);
      }
      any = true;
    }
    if (!any) fail("empty class");
    if (negate) set.flip();
    return chars(set);
  }

  std::string_view p_;
  std::vector<State>& states_;
  std::size_t pos_ = 0;
};

}  // namespace

Regex::Regex(std::string_view pattern) : pattern_(pattern) {
  if (pattern.size() > kMaxPatternLength) throw RegexError("regex: pattern too long");
  Compiler c(pattern, states_);
  start_ = c.compile();
}

std::optional<std::string> Regex::check(std::string_view pattern) {
  try {
    Regex r(pattern);
  } catch (const RegexError& e) {
    return std::string(e.what());
  }
  return std::nullopt;
}

bool Regex::full_match(std::string_view text) const {
  const std::size_t n = states_.size();
  std::vector<int> current, next;
  std::vector<std::uint32_t> mark(n, 0);
  std::uint32_t generation = 1;
  current.reserve(n);
  next.reserve(n);

  std::vector<int> stack;
  auto add = [&](std::vector<int>& list, int s) {
    stack.push_back(s);
    while (!stack.empty()) {
      int i = stack.back();
      stack.pop_back();
      if (i < 0 || mark[i] == generation) continue;
      mark[i] = generation;
      const State& st = states_[i];
      if (st.kind == State::Kind::Split) {
        stack.push_back(st.out2);
        stack.push_back(st.out);
      } else if (st.kind == State::Kind::Epsilon) {
        stack.push_back(st.out);
      } else {
        list.push_back(i);
      }
    }
  };

  add(current, start_);
  for (char ch : text) {
    ++generation;
    next.clear();
    auto c = static_cast<unsigned char>(ch);
    for (int i : current) {
      const State& st = states_[i];
      if (st.kind == State::Kind::Chars && st.chars.test(c)) add(next, st.out);
    }
    current.swap(next);
    if (current.empty()) return false;
  }
  for (int i : current) {
    if (states_[i].kind == State::Kind::Match) return true;
  }
  return false;
}

std::shared_ptr<const Regex> cached_regex(std::string_view pattern) {
  static std::shared_mutex mu;
  static std::unordered_map<std::string, std::shared_ptr<const Regex>> cache;
  {
    std::shared_lock lock(mu);
    if (auto it = cache.find(std::string(pattern)); it != cache.end()) return it->second;
  }
  auto compiled = std::make_shared<const Regex>(pattern);
  std::unique_lock lock(mu);
  if (cache.size() > 4096) cache.clear();
  return cache.emplace(std::string(pattern), std::move(compiled)).first->second;
}

}  // namespace xlb
