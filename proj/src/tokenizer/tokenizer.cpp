#include "bicap/tokenizer.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "bicap/errors.hpp"

namespace bicap {

namespace {

constexpr std::string_view kHeader = "bpe-vocab";
constexpr std::string_view kVersion = "v1";

const icu::Normalizer2& nfd() {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFDInstance(status);
  if (U_FAILURE(status) || n == nullptr) throw ConfigError("ICU NFD normalizer unavailable");
  return *n;
}

bool is_mark(UChar32 c) {
  const auto t = u_charType(c);
  return t == U_NON_SPACING_MARK || t == U_ENCLOSING_MARK || t == U_COMBINING_SPACING_MARK;
}

icu::UnicodeString strip_marks(const icu::UnicodeString& in) {
  UErrorCode status = U_ZERO_ERROR;
  icu::UnicodeString decomposed = nfd().normalize(in, status);
  if (U_FAILURE(status)) throw ConfigError("ICU normalization failed");
  icu::UnicodeString out;
  for (int32_t i = 0; i < decomposed.length();) {
    const UChar32 c = decomposed.char32At(i);
    i += U16_LENGTH(c);
    if (!is_mark(c)) out.append(c);
  }
  return out;
}

std::string pair_key(std::string_view left, std::string_view right) {
  std::string k;
  k.reserve(left.size() + right.size() + 1);
  k.append(left).push_back(' ');
  k.append(right);
  return k;
}

std::vector<std::string> split_words(const std::string& normalized) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start < normalized.size()) {
    std::size_t end = normalized.find(' ', start);
    if (end == std::string::npos) end = normalized.size();
    if (end > start) words.push_back(normalized.substr(start, end - start));
    start = end + 1;
  }
  return words;
}

std::vector<std::string> word_symbols(std::string_view word) {
  std::vector<std::string> symbols{std::string(kWordMarker)};
  for (auto& c : utf8_chars(word)) symbols.push_back(std::move(c));
  return symbols;
}

// Replaces every non-overlapping occurrence of (left, right), scanning left to right.
template <class Sym>
bool merge_pair(std::vector<Sym>& symbols, const Sym& left, const Sym& right, const Sym& merged) {
  bool changed = false;
  std::size_t w = 0;
  for (std::size_t r = 0; r < symbols.size(); ++r) {
    if (r + 1 < symbols.size() && symbols[r] == left && symbols[r + 1] == right) {
      symbols[w++] = merged;
      ++r;
      changed = true;
    } else {
      symbols[w++] = symbols[r];
    }
  }
  symbols.resize(w);
  return changed;
}

}  // namespace

const std::vector<std::string>& reserved_token_names() {
  static const std::vector<std::string> names{"[PAD]", "[SOS]", "[EOS]", "[UNK]", "[MASK]"};
  return names;
}

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  const auto* s = reinterpret_cast<const uint8_t*>(text.data());
  const auto n = static_cast<int32_t>(text.size());
  for (int32_t i = 0; i < n;) {
    const int32_t begin = i;
    UChar32 c;
    U8_NEXT(s, i, n, c);
    out.emplace_back(text.substr(static_cast<std::size_t>(begin), static_cast<std::size_t>(i - begin)));
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  icu::UnicodeString s =
      icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s = strip_marks(s);
  s.toLower(icu::Locale::getRoot());
  s = strip_marks(s);

  icu::UnicodeString collapsed;
  bool pending_space = false;
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    i += U16_LENGTH(c);
    if (u_isUWhiteSpace(c) || c == 0x2581) {
      pending_space = collapsed.length() > 0;
      continue;
    }
    if (pending_space) collapsed.append(static_cast<UChar>(' '));
    pending_space = false;
    collapsed.append(c);
  }
  std::string out;
  collapsed.toUTF8String(out);
  return out;
}

CharClass char_class(char32_t c) {
  const auto cp = static_cast<UChar32>(c);
  if (u_hasBinaryProperty(cp, UCHAR_ALPHABETIC)) return CharClass::letter;
  const auto t = u_charType(cp);
  if (t == U_DECIMAL_DIGIT_NUMBER || t == U_OTHER_NUMBER || t == U_LETTER_NUMBER) return CharClass::digit;
  return CharClass::punct;
}

bool mixes_classes(std::string_view token) {
  const auto* s = reinterpret_cast<const uint8_t*>(token.data());
  const auto n = static_cast<int32_t>(token.size());
  std::optional<CharClass> seen;
  for (int32_t i = 0; i < n;) {
    const int32_t begin = i;
    UChar32 c;
    U8_NEXT(s, i, n, c);
    if (token.substr(static_cast<std::size_t>(begin), static_cast<std::size_t>(i - begin)) == kWordMarker) {
      continue;
    }
    const CharClass k = c < 0 ? CharClass::punct : char_class(static_cast<char32_t>(c));
    if (seen && *seen != k) return true;
    seen = k;
  }
  return false;
}

// ---------------------------------------------------------------------------

void Vocabulary::add_token(const std::string& token) {
  ids_.emplace(token, static_cast<std::int64_t>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::from_merges(std::vector<std::string> alphabet, std::vector<Merge> merges) {
  Vocabulary v;
  std::sort(alphabet.begin(), alphabet.end());
  if (std::adjacent_find(alphabet.begin(), alphabet.end()) != alphabet.end()) {
    throw SchemaError("vocabulary: duplicate alphabet symbol");
  }
  if (!std::binary_search(alphabet.begin(), alphabet.end(), std::string(kWordMarker))) {
    throw SchemaError("vocabulary: alphabet lacks the word marker");
  }
  for (const auto& name : reserved_token_names()) v.add_token(name);
  for (const auto& a : alphabet) {
    if (utf8_chars(a).size() != 1) throw SchemaError("vocabulary: alphabet entry is not one character: " + a);
    if (v.ids_.count(a)) throw SchemaError("vocabulary: alphabet entry collides with a reserved token");
    v.add_token(a);
  }
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto& [left, right] = merges[r];
    if (!v.ids_.count(left) || !v.ids_.count(right) || left.rfind('[', 0) == 0) {
      throw SchemaError("vocabulary: merge " + std::to_string(r) + " uses an unknown symbol");
    }
    const std::string merged = left + right;
    if (v.ids_.count(merged)) throw SchemaError("vocabulary: merge " + std::to_string(r) + " repeats a token");
    v.merge_rank_.emplace(pair_key(left, right), r);
    v.add_token(merged);
  }
  v.alphabet_ = std::move(alphabet);
  v.merges_ = std::move(merges);
  return v;
}

Vocabulary Vocabulary::train(const std::vector<std::string>& corpus, std::size_t vocab_size) {
  std::map<std::string, std::int64_t> word_counts;
  for (const auto& text : corpus) {
    for (auto& w : split_words(normalize_text(text))) ++word_counts[w];
  }
  if (word_counts.empty()) throw TrainingError("train_bpe: corpus has no words");

  std::set<std::string> alphabet_set{std::string(kWordMarker)};
  for (const auto& [w, _] : word_counts) {
    for (auto& c : utf8_chars(w)) alphabet_set.insert(std::move(c));
  }
  std::vector<std::string> alphabet(alphabet_set.begin(), alphabet_set.end());
  const std::size_t base = alphabet.size() + static_cast<std::size_t>(token_ids::num_reserved);
  if (vocab_size < base) {
    throw ParameterError("train_bpe: vocab_size " + std::to_string(vocab_size) + " is below alphabet + reserved = " +
                         std::to_string(base));
  }

  // Integer symbols for the merge loop.
  std::vector<std::string> names(alphabet);
  std::unordered_map<std::string, int> sym;
  for (std::size_t i = 0; i < names.size(); ++i) sym.emplace(names[i], static_cast<int>(i));
  std::vector<std::vector<int>> words;
  std::vector<std::int64_t> counts;
  for (const auto& [w, n] : word_counts) {
    std::vector<int> s;
    for (const auto& c : word_symbols(w)) s.push_back(sym.at(c));
    words.push_back(std::move(s));
    counts.push_back(n);
  }

  std::vector<Merge> merges;
  std::size_t size = base;
  while (size < vocab_size) {
    std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
    for (std::size_t wi = 0; wi < words.size(); ++wi) {
      const auto& s = words[wi];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        pair_counts[(static_cast<std::uint64_t>(s[i]) << 32) | static_cast<std::uint32_t>(s[i + 1])] += counts[wi];
      }
    }
    std::int64_t best_count = 0;
    int best_l = -1, best_r = -1;
    for (const auto& [key, n] : pair_counts) {
      if (n < best_count || n < 2) continue;
      const int l = static_cast<int>(key >> 32), r = static_cast<int>(key & 0xffffffffu);
      if (n == best_count) {
        const auto cand = std::tie(names[l], names[r]);
        const auto cur = std::tie(names[best_l], names[best_r]);
        if (!(cand < cur)) continue;
      }
      const std::string merged = names[l] + names[r];
      if (mixes_classes(merged) || sym.count(merged)) continue;
      best_count = n;
      best_l = l;
      best_r = r;
    }
    if (best_l < 0) break;
    const std::string merged = names[best_l] + names[best_r];
    const int id = static_cast<int>(names.size());
    names.push_back(merged);
    sym.emplace(merged, id);
    merges.emplace_back(names[best_l], names[best_r]);
    for (auto& s : words) merge_pair(s, best_l, best_r, id);
    ++size;
  }
  return from_merges(std::move(alphabet), std::move(merges));
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " outside [0, " + std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<std::int64_t> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> Vocabulary::segment_word(std::string_view word) const {
  std::vector<std::string> symbols = word_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = merges_.size();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == merges_.size()) break;
    const auto& [left, right] = merges_[best_rank];
    merge_pair(symbols, left, right, left + right);
  }
  return symbols;
}

std::vector<std::int64_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::int64_t> ids{token_ids::sos};
  for (const auto& w : split_words(normalize_text(text))) {
    for (const auto& s : segment_word(w)) {
      auto it = ids_.find(s);
      ids.push_back(it == ids_.end() || it->second < token_ids::num_reserved ? token_ids::unk : it->second);
    }
  }
  ids.push_back(token_ids::eos);
  return ids;
}

std::string Vocabulary::decode(std::span<const std::int64_t> ids) const {
  std::string out;
  for (std::int64_t id : ids) {
    const std::string& t = token(id);
    if (id < token_ids::num_reserved) continue;
    if (t.rfind(kWordMarker, 0) == 0) {
      out.push_back(' ');
      out.append(t, kWordMarker.size(), std::string::npos);
    } else {
      out.append(t);
    }
  }
  if (!out.empty() && out.front() == ' ') out.erase(0, 1);
  return out;
}

// ---------------------------------------------------------------------------

void Vocabulary::write(std::ostream& out) const {
  out << kHeader << ' ' << kVersion << ' ' << tokens_.size() << '\n';
  out << "marker " << kWordMarker << '\n';
  out << "reserved " << reserved_token_names().size() << '\n';
  for (const auto& r : reserved_token_names()) out << r << '\n';
  out << "alphabet " << alphabet_.size() << '\n';
  for (const auto& a : alphabet_) out << a << '\n';
  out << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IngestError("cannot open vocabulary file for writing: " + path);
  write(f);
  if (!f) throw IngestError("failed writing vocabulary file: " + path);
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw SchemaError(std::string("vocabulary file truncated before ") + what);
    return line;
  };
  auto counted_section = [&](const std::string& name) {
    std::istringstream ss(next(name.c_str()));
    std::string key;
    std::size_t n = 0;
    if (!(ss >> key >> n) || key != name) throw SchemaError("vocabulary file: expected '" + name + " <count>'");
    return n;
  };

  std::istringstream header(next("header"));
  std::string magic, version;
  std::size_t declared = 0;
  if (!(header >> magic >> version >> declared) || magic != kHeader) {
    throw SchemaError("vocabulary file: bad header");
  }
  if (version != kVersion) throw SchemaError("vocabulary file: unsupported version " + version);
  if (next("marker") != "marker " + std::string(kWordMarker)) throw SchemaError("vocabulary file: bad marker line");

  const std::size_t reserved = counted_section("reserved");
  if (reserved != reserved_token_names().size()) throw SchemaError("vocabulary file: wrong reserved count");
  for (const auto& name : reserved_token_names()) {
    if (next("reserved tokens") != name) throw SchemaError("vocabulary file: reserved token mismatch at " + name);
  }
  const std::size_t k = counted_section("alphabet");
  std::vector<std::string> alphabet;
  for (std::size_t i = 0; i < k; ++i) alphabet.push_back(next("alphabet"));
  const std::size_t m = counted_section("merges");
  std::vector<Merge> merges;
  for (std::size_t i = 0; i < m; ++i) {
    const std::string& l = next("merges");
    const auto sp = l.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == l.size() || l.find(' ', sp + 1) != std::string::npos) {
      throw SchemaError("vocabulary file: malformed merge line " + std::to_string(i));
    }
    merges.emplace_back(l.substr(0, sp), l.substr(sp + 1));
  }
  Vocabulary v = from_merges(std::move(alphabet), std::move(merges));
  if (v.size() != declared) {
    throw SchemaError("vocabulary file: header declares " + std::to_string(declared) + " tokens, content has " +
                      std::to_string(v.size()));
  }
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestError("cannot open vocabulary file: " + path);
  return read(f);
}

}  // namespace bicap
