#include "tpt/data.hpp"

#include "tpt/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

namespace tpt {

namespace {

// ---------------------------------------------------------------------------
// Exact rationals for the answer oracle.

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Rational make(std::int64_t n, std::int64_t d) {
    if (d == 0) throw std::domain_error("division by zero");
    if (d < 0) {
      n = -n;
      d = -d;
    }
    const std::int64_t g = std::gcd(n, d);
    return {n / g, d / g};
  }
};

Rational operator+(Rational a, Rational b) { return Rational::make(a.num * b.den + b.num * a.den, a.den * b.den); }
Rational operator-(Rational a, Rational b) { return Rational::make(a.num * b.den - b.num * a.den, a.den * b.den); }
Rational operator*(Rational a, Rational b) { return Rational::make(a.num * b.num, a.den * b.den); }
Rational operator/(Rational a, Rational b) { return Rational::make(a.num * b.den, a.den * b.num); }
bool operator<(Rational a, Rational b) { return a.num * b.den < b.num * a.den; }

std::string to_answer(Rational r) {
  if (r.den == 1) return std::to_string(r.num);
  return std::to_string(r.num) + "/" + std::to_string(r.den);
}

// Recursive descent over + - * / with parentheses and unary minus.
class ExpressionParser {
 public:
  explicit ExpressionParser(std::string_view text) : text_(text) {}

  std::optional<Rational> parse_all() {
    try {
      const Rational value = expression();
      skip_spaces();
      if (pos_ != text_.size()) return std::nullopt;
      return value;
    } catch (const std::domain_error&) {
      return std::nullopt;
    }
  }

 private:
  Rational expression() {
    Rational value = term();
    for (;;) {
      if (accept('+')) {
        value = value + term();
      } else if (accept('-')) {
        value = value - term();
      } else {
        return value;
      }
    }
  }

  Rational term() {
    Rational value = factor();
    for (;;) {
      if (accept('*')) {
        value = value * factor();
      } else if (accept('/')) {
        value = value / factor();
      } else {
        return value;
      }
    }
  }

  Rational factor() {
    if (accept('-')) return Rational{} - factor();
    if (accept('(')) {
      const Rational value = expression();
      if (!accept(')')) throw std::domain_error("unbalanced parenthesis");
      return value;
    }
    skip_spaces();
    std::int64_t n = 0;
    std::size_t digits = 0;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      n = n * 10 + (text_[pos_++] - '0');
      if (++digits > 12) throw std::domain_error("number too long");
    }
    if (digits == 0) throw std::domain_error("expected a number");
    return {n, 1};
  }

  void skip_spaces() {
    while (pos_ < text_.size() && text_[pos_] == ' ') ++pos_;
  }

  bool accept(char c) {
    skip_spaces();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

std::optional<Rational> parse_expression(std::string_view text) { return ExpressionParser(text).parse_all(); }

bool strip_prefix(std::string_view& s, std::string_view prefix) {
  if (!s.starts_with(prefix)) return false;
  s.remove_prefix(prefix.size());
  return true;
}

bool strip_suffix(std::string_view& s, std::string_view suffix) {
  if (!s.ends_with(suffix)) return false;
  s.remove_suffix(suffix.size());
  return true;
}

// ---------------------------------------------------------------------------
// Question templates.

Index uniform_int(CounterRng& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

Sample make_add_sub(CounterRng& rng) {
  const Index a = uniform_int(rng, 0, 99);
  const Index b = uniform_int(rng, 0, 99);
  const bool plus = rng.below(2) == 0;
  return {"Calculate " + std::to_string(a) + (plus ? " + " : " - ") + std::to_string(b) + ".",
          std::to_string(plus ? a + b : a - b), "add_sub"};
}

Sample make_multiply(CounterRng& rng) {
  const Index a = uniform_int(rng, 0, 99);
  const Index b = uniform_int(rng, 0, 9);
  return {"Calculate " + std::to_string(a) + " * " + std::to_string(b) + ".", std::to_string(a * b), "multiply"};
}

Sample make_compare(CounterRng& rng) {
  const Index a = uniform_int(rng, 0, 99);
  Index b = uniform_int(rng, 0, 98);
  if (b >= a) ++b;
  const bool bigger = rng.below(2) == 0;
  return {std::string("Which is ") + (bigger ? "bigger: " : "smaller: ") + std::to_string(a) + " or " +
              std::to_string(b) + "?",
          std::to_string(bigger ? std::max(a, b) : std::min(a, b)), "compare"};
}

Sample make_nested_fraction(CounterRng& rng) {
  Index v[4];
  for (Index& x : v) x = uniform_int(rng, 1, 9);
  const Rational answer = Rational::make(v[0] * v[3], v[1] * v[2]);
  return {"Calculate (" + std::to_string(v[0]) + "/" + std::to_string(v[1]) + ")/(" + std::to_string(v[2]) + "/" +
              std::to_string(v[3]) + ").",
          to_answer(answer), "nested_fraction"};
}

using Generator = Sample (*)(CounterRng&);

Generator generator_for(std::string_view module) {
  if (module == "add_sub") return make_add_sub;
  if (module == "multiply") return make_multiply;
  if (module == "compare") return make_compare;
  if (module == "nested_fraction") return make_nested_fraction;
  std::string known;
  for (std::string_view m : kModules) known += (known.empty() ? "" : ", ") + std::string(m);
  throw ConfigError("unknown module '" + std::string(module) + "' (known: " + known + ")");
}

Sample checked_sample(Generator generate, CounterRng& rng) {
  Sample s = generate(rng);
  const auto expected = evaluate_question(s.question);
  if (!expected || *expected != s.answer) {
    throw ContractError("generated answer '" + s.answer + "' disagrees with evaluator for: " + s.question);
  }
  return s;
}

}  // namespace

std::optional<std::string> evaluate_question(std::string_view question) {
  std::string_view body = question;
  if (strip_prefix(body, "Calculate ") && strip_suffix(body, ".")) {
    const auto value = parse_expression(body);
    if (!value) return std::nullopt;
    return to_answer(*value);
  }
  body = question;
  bool bigger = false;
  if (strip_prefix(body, "Which is bigger: ")) {
    bigger = true;
  } else if (!strip_prefix(body, "Which is smaller: ")) {
    return std::nullopt;
  }
  if (!strip_suffix(body, "?")) return std::nullopt;
  const std::size_t split = body.find(" or ");
  if (split == std::string_view::npos) return std::nullopt;
  const auto lhs = parse_expression(body.substr(0, split));
  const auto rhs = parse_expression(body.substr(split + 4));
  if (!lhs || !rhs) return std::nullopt;
  const bool lhs_wins = bigger ? *rhs < *lhs : *lhs < *rhs;
  return to_answer(lhs_wins ? *lhs : *rhs);
}

std::vector<Sample> generate_dataset(std::string_view module, std::size_t n, std::uint64_t seed) {
  const Generator generate = generator_for(module);
  if (n == 0) throw ConfigError("generate_dataset: n must be positive");
  const CounterRng base = CounterRng(seed).split(module);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng = base.split(i);
    out.push_back(checked_sample(generate, rng));
  }
  return out;
}

DatasetSplit generate_split(std::string_view module, std::size_t n_train, std::size_t n_held_out,
                            std::uint64_t seed) {
  const Generator generate = generator_for(module);
  if (n_train == 0 || n_held_out == 0) throw ConfigError("generate_split: set sizes must be positive");
  const CounterRng base = CounterRng(seed).split(module);

  DatasetSplit split;
  std::unordered_set<std::string> held_out_questions;
  CounterRng held_rng = base.split("held_out");
  const std::size_t max_attempts = 1000 * (n_train + n_held_out);
  std::size_t attempts = 0;
  while (split.held_out.size() < n_held_out) {
    if (++attempts > max_attempts) throw ConfigError("generate_split: question space too small for held-out size");
    Sample s = checked_sample(generate, held_rng);
    if (held_out_questions.insert(s.question).second) split.held_out.push_back(std::move(s));
  }
  CounterRng train_rng = base.split("train");
  attempts = 0;
  while (split.train.size() < n_train) {
    if (++attempts > max_attempts) throw ConfigError("generate_split: held-out set covers the question space");
    Sample s = checked_sample(generate, train_rng);
    if (!held_out_questions.contains(s.question)) split.train.push_back(std::move(s));
  }
  return split;
}

// ---------------------------------------------------------------------------

Vocabulary Vocabulary::from_symbols(std::vector<std::string> symbols) {
  if (symbols.size() < 3 || symbols[0] != "<pad>" || symbols[1] != "<sos>" || symbols[2] != "<eos>") {
    throw VocabularyError("vocabulary must start with <pad>, <sos>, <eos>");
  }
  Vocabulary v;
  v.ids_.fill(-1);
  for (std::size_t i = 3; i < symbols.size(); ++i) {
    if (symbols[i].size() != 1) throw VocabularyError("vocabulary symbol '" + symbols[i] + "' is not one character");
    TokenId& slot = v.ids_[static_cast<unsigned char>(symbols[i][0])];
    if (slot >= 0) throw VocabularyError("duplicate vocabulary symbol '" + symbols[i] + "'");
    slot = static_cast<TokenId>(i);
  }
  v.symbols_ = std::move(symbols);
  return v;
}

Vocabulary Vocabulary::build(std::span<const Sample> samples) {
  std::set<unsigned char> chars;
  for (const Sample& s : samples) {
    chars.insert(s.question.begin(), s.question.end());
    chars.insert(s.answer.begin(), s.answer.end());
  }
  std::vector<std::string> symbols{"<pad>", "<sos>", "<eos>"};
  for (unsigned char c : chars) symbols.emplace_back(1, static_cast<char>(c));
  return from_symbols(std::move(symbols));
}

const std::string& Vocabulary::symbol(TokenId id) const {
  if (id < 0 || id >= size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
  return symbols_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size() + 1);
  std::string unknown;
  for (char c : text) {
    const TokenId id = ids_[static_cast<unsigned char>(c)];
    if (id < 0) {
      if (unknown.find(c) == std::string::npos) unknown += c;
      continue;
    }
    ids.push_back(id);
  }
  if (!unknown.empty()) throw VocabularyError("characters not in vocabulary: '" + unknown + "'");
  ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kEos) break;
    const std::string& s = symbol(id);
    if (id == kPad || id == kSos) continue;
    out += s;
  }
  return out;
}

// ---------------------------------------------------------------------------

EncodedCorpus::EncodedCorpus(std::span<const Sample> samples, const Vocabulary& vocab, const SequenceLimits& limits) {
  src_.reserve(samples.size());
  tgt_out_.reserve(samples.size());
  for (const Sample& s : samples) {
    if (s.answer.empty()) throw LengthError("empty answer for sample: " + s.question);
    std::vector<TokenId> src{Vocabulary::kSos};
    const auto q = vocab.encode(s.question);
    src.insert(src.end(), q.begin(), q.end());
    std::vector<TokenId> tgt = vocab.encode(s.answer);
    if (static_cast<Index>(src.size()) > limits.max_src_len) {
      throw LengthError("question longer than " + std::to_string(limits.max_src_len - 2) + " characters: " +
                        s.question);
    }
    if (static_cast<Index>(tgt.size()) > limits.max_tgt_len) {
      throw LengthError("answer longer than " + std::to_string(limits.max_tgt_len - 1) + " characters: " +
                        s.question + " -> " + s.answer);
    }
    src_width_ = std::max(src_width_, static_cast<Index>(src.size()));
    tgt_width_ = std::max(tgt_width_, static_cast<Index>(tgt.size()));
    src_.push_back(std::move(src));
    tgt_out_.push_back(std::move(tgt));
  }
}

Batch EncodedCorpus::batch(std::span<const std::size_t> indices) const {
  const auto rows = static_cast<Index>(indices.size());
  if (rows == 0) throw ContractError("empty batch");
  Batch b;
  b.src = TokenMatrix::Constant(rows, src_width_, Vocabulary::kPad);
  b.tgt_in = TokenMatrix::Constant(rows, tgt_width_, Vocabulary::kPad);
  b.tgt_out = TokenMatrix::Constant(rows, tgt_width_, Vocabulary::kPad);
  b.src_mask = Mask::Constant(rows, src_width_, false);
  b.tgt_loss_mask = Mask::Constant(rows, tgt_width_, false);
  for (Index r = 0; r < rows; ++r) {
    const auto& src = src_.at(indices[static_cast<std::size_t>(r)]);
    const auto& tgt = tgt_out_.at(indices[static_cast<std::size_t>(r)]);
    const auto src_len = static_cast<Index>(src.size());
    const auto tgt_len = static_cast<Index>(tgt.size());
    for (Index t = 0; t < src_len; ++t) {
      b.src(r, t) = src[static_cast<std::size_t>(t)];
      b.src_mask(r, t) = true;
    }
    b.tgt_in(r, 0) = Vocabulary::kSos;
    for (Index t = 0; t < tgt_len; ++t) {
      b.tgt_out(r, t) = tgt[static_cast<std::size_t>(t)];
      b.tgt_loss_mask(r, t) = true;
      if (t + 1 < tgt_len) b.tgt_in(r, t + 1) = tgt[static_cast<std::size_t>(t)];
    }
    b.src_lengths.push_back(src_len);
    b.tgt_lengths.push_back(tgt_len);
  }
  return b;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, CounterRng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates with our own draws so the order does not depend on the
  // standard library's distribution implementations.
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<Batch> make_batches(std::span<const Sample> samples, const Vocabulary& vocab, Index batch_size,
                                const BatchOptions& options) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  const EncodedCorpus corpus(samples, vocab, options.limits);
  std::vector<std::size_t> order;
  if (options.shuffle_seed) {
    order = shuffled_indices(corpus.size(), CounterRng(*options.shuffle_seed).split("batches"));
  } else {
    order.resize(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  std::vector<Batch> batches;
  const auto step = static_cast<std::size_t>(batch_size);
  for (std::size_t begin = 0; begin < order.size(); begin += step) {
    const std::size_t count = std::min(step, order.size() - begin);
    batches.push_back(corpus.batch(std::span(order).subspan(begin, count)));
  }
  return batches;
}

// ---------------------------------------------------------------------------

std::vector<Sample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset", path.string());
  std::vector<Sample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!record.is_object()) throw ParseError("record is not an object", line_no);
    Sample s;
    for (auto [field, target] : {std::pair{"question", &s.question}, std::pair{"answer", &s.answer},
                                 std::pair{"module", &s.module}}) {
      const auto it = record.find(field);
      if (it == record.end()) throw ParseError(std::string("missing field \"") + field + "\"", line_no);
      if (!it->is_string()) throw ParseError(std::string("field \"") + field + "\" is not a string", line_no);
      *target = it->get<std::string>();
    }
    samples.push_back(std::move(s));
  }
  if (in.bad()) throw IoError("read failed", path.string());
  return samples;
}

void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing", path.string());
  for (const Sample& s : samples) {
    const nlohmann::ordered_json record = {{"question", s.question}, {"answer", s.answer}, {"module", s.module}};
    out << record.dump() << '\n';
  }
  out.flush();
  if (!out) throw IoError("write failed", path.string());
}

}  // namespace tpt
