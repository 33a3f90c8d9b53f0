#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fwl/backbone.hpp"

namespace fwl {

inline constexpr TokenId kUnkId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kBosToken = "<bos>";

class Vocabulary {
 public:
  Vocabulary();  // just the two special tokens

  // Specials first, then tokens by descending count (ties lexicographic).
  // Tokens seen fewer than min_count times map to <unk>.
  static Vocabulary build(const std::vector<std::vector<std::string>>& documents,
                          std::size_t min_count = 1, std::size_t max_size = 0);
  // Tokens in id order; the first two must be the special tokens.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);
  // One token per line; the first two lines must be the special tokens.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId id(std::string_view token) const;  // <unk> when absent
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void add(std::string token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

enum class TokenizerKind { character, word };

TokenizerKind parse_tokenizer_kind(std::string_view name);
std::string_view to_string(TokenizerKind kind);

struct Tokenizer {
  TokenizerKind kind = TokenizerKind::word;
  Vocabulary vocab;

  // Characters are UTF-8 code points; words are whitespace-separated.
  std::vector<std::string> split(std::string_view text) const;
  // Document tokens prefixed with <bos>.
  std::vector<TokenId> encode_document(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;
};

Tokenizer build_tokenizer(TokenizerKind kind, const std::vector<std::string>& documents,
                          std::size_t min_count = 1, std::size_t max_size = 0);

// Documents are separated by one or more blank lines; surrounding whitespace
// is trimmed and empty documents are dropped.
std::vector<std::string> split_documents(std::string_view text);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

struct Corpus {
  std::vector<std::vector<TokenId>> documents;
  std::size_t token_count() const;  // predicted tokens (excludes each <bos>)
};

Corpus encode_corpus(const Tokenizer& tokenizer, const std::vector<std::string>& documents);

// Synthetic documents that introduce a few rare names, drawn per document
// from a pool of invented names, and keep reusing them. Each document gives
// every one of its people a distinct place; fact sentences restate that
// place, mention sentences pair the name with a random verb, and the rest
// are fillers. Only the document itself reveals who is present and where.
struct EntityCorpusConfig {
  std::uint64_t seed = 0;
  std::size_t documents = 100;
  std::size_t sentences_per_document = 150;
  std::size_t name_pool = 40;
  std::size_t people = 12;  // per document, at most the number of places
  double fact_rate = 0.12;
  double mention_rate = 0.6;
};

// The invented names, independent of any seed.
std::vector<std::string> entity_name_pool(std::size_t size);

std::vector<std::string> generate_entity_documents(const EntityCorpusConfig& config);

}  // namespace fwl
