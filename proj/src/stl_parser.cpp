#include <cctype>
#include <charconv>
#include <cstdlib>
#include <limits>
#include <string>

#include "tdmat/error.hpp"
#include "tdmat/stl.hpp"

namespace tdmat::stl {

namespace {

enum class Tok { ident, number, lparen, rparen, lbracket, rbracket, comma, less, minus, end };

struct Token {
  Tok kind;
  std::string_view text;
  std::size_t pos;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) { advance(); }

  const Token& peek() const { return current_; }

  Token take() {
    Token t = current_;
    advance();
    return t;
  }

 private:
  void advance() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    const std::size_t start = pos_;
    if (pos_ >= src_.size()) {
      current_ = {Tok::end, {}, start};
      return;
    }
    const char c = src_[pos_];
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      while (pos_ < src_.size() &&
             (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) {
        ++pos_;
      }
      current_ = {Tok::ident, src_.substr(start, pos_ - start), start};
      return;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      while (pos_ < src_.size()) {
        const char d = src_[pos_];
        const bool exp_sign = (d == '+' || d == '-') && pos_ > start &&
                              (src_[pos_ - 1] == 'e' || src_[pos_ - 1] == 'E');
        if (std::isdigit(static_cast<unsigned char>(d)) || d == '.' || d == 'e' || d == 'E' ||
            exp_sign) {
          ++pos_;
        } else {
          break;
        }
      }
      current_ = {Tok::number, src_.substr(start, pos_ - start), start};
      return;
    }
    ++pos_;
    Tok kind;
    switch (c) {
      case '(': kind = Tok::lparen; break;
      case ')': kind = Tok::rparen; break;
      case '[': kind = Tok::lbracket; break;
      case ']': kind = Tok::rbracket; break;
      case ',': kind = Tok::comma; break;
      case '<': kind = Tok::less; break;
      case '-': kind = Tok::minus; break;
      default: throw ParseError(std::string("unexpected character '") + c + "'", start);
    }
    current_ = {kind, src_.substr(start, 1), start};
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  Token current_{Tok::end, {}, 0};
};

class Parser {
 public:
  Parser(std::string_view text, const PredicateRegistry& registry)
      : lex_(text), registry_(registry) {}

  Spec parse() {
    Spec s = disjunction();
    if (lex_.peek().kind != Tok::end) fail("unexpected trailing input", lex_.peek());
    return s;
  }

 private:
  [[noreturn]] static void fail(const std::string& what, const Token& at) {
    throw ParseError(what, at.pos);
  }

  bool at_keyword(std::string_view word) const {
    return lex_.peek().kind == Tok::ident && lex_.peek().text == word;
  }

  Token expect(Tok kind, const char* what) {
    if (lex_.peek().kind != kind) fail(std::string("expected ") + what, lex_.peek());
    return lex_.take();
  }

  Spec disjunction() {
    Spec acc = conjunction();
    while (at_keyword("or")) {
      lex_.take();
      acc = either(acc, conjunction());
    }
    return acc;
  }

  Spec conjunction() {
    Spec acc = unary();
    while (at_keyword("and")) {
      lex_.take();
      acc = both(acc, unary());
    }
    return acc;
  }

  Spec unary() {
    const Token& t = lex_.peek();
    if (t.kind == Tok::ident && t.text == "not") {
      lex_.take();
      return negate(unary());
    }
    if (t.kind == Tok::ident && t.text == "F") {
      const Token f = lex_.take();
      if (lex_.peek().kind != Tok::lbracket) fail("expected '[' after F", lex_.peek());
      lex_.take();
      const int lo = bound();
      expect(Tok::comma, "','");
      const int hi = bound();
      expect(Tok::rbracket, "']'");
      if (hi < lo) fail("inverted window [" + std::to_string(lo) + "," + std::to_string(hi) + "]", f);
      return eventually(lo, hi, unary());
    }
    return primary();
  }

  int bound() {
    const Token t = lex_.peek();
    if (t.kind == Tok::minus) fail("negative window bound", t);
    if (t.kind != Tok::number) fail("expected integer window bound", t);
    lex_.take();
    int value = 0;
    const auto* first = t.text.data();
    const auto* last = first + t.text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) fail("window bound must be a non-negative integer", t);
    return value;
  }

  double number() {
    bool negative = false;
    if (lex_.peek().kind == Tok::minus) {
      lex_.take();
      negative = true;
    }
    const Token t = expect(Tok::number, "number");
    const std::string text(t.text);
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (end != text.c_str() + text.size()) fail("malformed number '" + text + "'", t);
    return negative ? -v : v;
  }

  Spec primary() {
    const Token t = lex_.peek();
    if (t.kind == Tok::lparen) {
      lex_.take();
      Spec inner = disjunction();
      expect(Tok::rparen, "')'");
      return inner;
    }
    if (t.kind != Tok::ident) fail("expected formula", t);
    lex_.take();
    if (t.text == "true") return make_true();
    if (t.text == "and" || t.text == "or" || t.text == "not") fail("unexpected keyword", t);
    if (t.text == "dist" && lex_.peek().kind == Tok::lparen) {
      lex_.take();
      const Token a = expect(Tok::ident, "entity name");
      expect(Tok::comma, "','");
      const Token b = expect(Tok::ident, "entity name");
      expect(Tok::rparen, "')'");
      expect(Tok::less, "'<'");
      return make_distance(std::string(a.text), std::string(b.text), number());
    }
    auto predicate = registry_.find(t.text);
    if (!predicate) fail("unknown atom '" + std::string(t.text) + "'", t);
    return make_predicate(std::move(predicate));
  }

  Lexer lex_;
  const PredicateRegistry& registry_;
};

}  // namespace

Spec parse_spec(std::string_view text, const PredicateRegistry& registry) {
  return Parser(text, registry).parse();
}

}  // namespace tdmat::stl
