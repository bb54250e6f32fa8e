#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace bicap {

namespace token_ids {
inline constexpr std::int64_t pad = 0;
inline constexpr std::int64_t sos = 1;
inline constexpr std::int64_t eos = 2;
inline constexpr std::int64_t unk = 3;
inline constexpr std::int64_t mask = 4;
inline constexpr std::int64_t num_reserved = 5;
}  // namespace token_ids

// Prefixed to every word as its own symbol (U+2581).
inline constexpr std::string_view kWordMarker = "\xE2\x96\x81";

// Lowercase, canonical decomposition with combining marks removed,
// whitespace runs collapsed to one space, trimmed.
std::string normalize_text(std::string_view text);

enum class CharClass { letter, digit, punct };
CharClass char_class(char32_t c);

// True when the characters of a token (word marker excluded) fall into
// more than one CharClass.
bool mixes_classes(std::string_view token);

// Splits valid UTF-8 into one string per code point.
std::vector<std::string> utf8_chars(std::string_view text);

/// Byte-pair-encoding vocabulary.
///
/// Ids: the five reserved tokens, then the sorted base alphabet (word marker
/// included), then one id per learned merge in merge order.
class Vocabulary {
 public:
  using Merge = std::pair<std::string, std::string>;

  static Vocabulary train(const std::vector<std::string>& corpus, std::size_t vocab_size);
  // Rebuilds from an alphabet and a merge list by replay.
  static Vocabulary from_merges(std::vector<std::string> alphabet, std::vector<Merge> merges);

  static Vocabulary read(std::istream& in);
  static Vocabulary load(const std::string& path);
  void write(std::ostream& out) const;
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int64_t id) const;
  std::optional<std::int64_t> find(std::string_view token) const;
  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<Merge>& merges() const { return merges_; }

  // Symbols of one normalized word (marker included) after merging.
  std::vector<std::string> segment_word(std::string_view word) const;
  // [SOS] + ids + [EOS].
  std::vector<std::int64_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int64_t> ids) const;

  bool operator==(const Vocabulary& other) const {
    return alphabet_ == other.alphabet_ && merges_ == other.merges_;
  }

 private:
  void add_token(const std::string& token);

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> ids_;
  std::unordered_map<std::string, std::size_t> merge_rank_;  // key: left + ' ' + right
};

const std::vector<std::string>& reserved_token_names();

}  // namespace bicap
