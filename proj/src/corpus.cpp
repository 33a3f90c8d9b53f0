#include "fwl/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "fwl/numerics.hpp"

namespace fwl {

Vocabulary::Vocabulary() {
  add(std::string(kUnkToken));
  add(std::string(kBosToken));
}

void Vocabulary::add(std::string token) {
  if (index_.count(token)) throw InputError("vocabulary: duplicate token '" + token + "'");
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& documents,
                             std::size_t min_count, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : documents)
    for (const auto& t : doc) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [tok, n] : sorted) {
    if (n < min_count || v.contains(tok)) continue;
    if (max_size && v.size() >= max_size) break;
    v.add(tok);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  try {
    return from_tokens(lines);
  } catch (const InputError& e) {
    throw InputError("vocabulary file " + path.string() + ": " + e.what());
  }
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < 2 || tokens[0] != kUnkToken || tokens[1] != kBosToken)
    throw InputError("vocabulary must start with <unk> and <bos>");
  Vocabulary v;
  for (std::size_t i = 2; i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) {
    if (t.find('\n') != std::string::npos)
      throw InputError("vocabulary: token containing a newline cannot be saved");
    out << t << '\n';
  }
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) > 0;
}

TokenizerKind parse_tokenizer_kind(std::string_view name) {
  if (name == "char" || name == "character") return TokenizerKind::character;
  if (name == "word") return TokenizerKind::word;
  throw ConfigError("tokenizer must be 'char' or 'word', got '" + std::string(name) + "'");
}

std::string_view to_string(TokenizerKind kind) {
  return kind == TokenizerKind::character ? "char" : "word";
}

namespace {

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // invalid lead byte: keep it as a single unit
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::vector<std::string> Tokenizer::split(std::string_view text) const {
  std::vector<std::string> out;
  if (kind == TokenizerKind::character) {
    for (std::size_t i = 0; i < text.size();) {
      const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(text[i])), text.size() - i);
      out.emplace_back(text.substr(i, n));
      i += n;
    }
    return out;
  }
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

std::vector<TokenId> Tokenizer::encode_document(std::string_view text) const {
  std::vector<TokenId> ids{kBosId};
  for (const auto& t : split(text)) ids.push_back(vocab.id(t));
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kBosId) continue;
    if (kind == TokenizerKind::word && !out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

Tokenizer build_tokenizer(TokenizerKind kind, const std::vector<std::string>& documents,
                          std::size_t min_count, std::size_t max_size) {
  Tokenizer tok;
  tok.kind = kind;
  std::vector<std::vector<std::string>> pieces;
  pieces.reserve(documents.size());
  for (const auto& d : documents) pieces.push_back(tok.split(d));
  tok.vocab = Vocabulary::build(pieces, min_count, max_size);
  return tok;
}

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::istringstream in{std::string(text)};
  auto flush = [&] {
    const auto b = current.find_first_not_of(" \t\r\n");
    if (b != std::string::npos) {
      const auto e = current.find_last_not_of(" \t\r\n");
      docs.push_back(current.substr(b, e - b + 1));
    }
    current.clear();
  };
  for (std::string line; std::getline(in, line);) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      flush();
      continue;
    }
    current += line;
    current += '\n';
  }
  flush();
  return docs;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::size_t Corpus::token_count() const {
  std::size_t n = 0;
  for (const auto& d : documents) n += d.empty() ? 0 : d.size() - 1;
  return n;
}

Corpus encode_corpus(const Tokenizer& tokenizer, const std::vector<std::string>& documents) {
  Corpus c;
  c.documents.reserve(documents.size());
  for (const auto& d : documents) c.documents.push_back(tokenizer.encode_document(d));
  return c;
}

namespace {

constexpr std::string_view kSyllables[] = {"ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "zi", "ba",
                                           "do", "fe", "gu", "ha", "jo", "ki", "ma", "nu", "pe", "ri"};
constexpr std::string_view kPlaces[] = {"paris", "rome",  "oslo",  "lima",   "cairo", "delhi",
                                        "tokyo", "quito", "perth", "dakar", "riga",  "hanoi"};
constexpr std::string_view kVerbs[] = {"sang",  "ran",   "slept", "cooked", "danced", "wrote",
                                       "swam", "laughed", "read", "knitted", "painted", "hiked"};
const std::vector<std::vector<std::string_view>> kFillers = {
    {"the", "day", "was", "calm", "."},
    {"it", "rained", "in", "the", "morning", "."},
    {"a", "bird", "sang", "."},
    {"the", "market", "was", "busy", "."},
    {"we", "ate", "bread", "and", "cheese", "."},
};

}  // namespace

std::vector<std::string> entity_name_pool(std::size_t size) {
  constexpr std::size_t n = std::size(kSyllables);
  if (size > n * n * n) throw ConfigError("entity corpus: name pool too large");
  std::vector<std::size_t> order(n * n * n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(0x6e616d6573);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t k = order[i];
    out.push_back(std::string(kSyllables[k / (n * n)]) + std::string(kSyllables[(k / n) % n]) +
                  std::string(kSyllables[k % n]));
  }
  return out;
}

std::vector<std::string> generate_entity_documents(const EntityCorpusConfig& c) {
  const std::size_t max_people = std::size(kPlaces);
  if (c.people == 0 || c.people > max_people)
    throw ConfigError("entity corpus: people must be in [1, " + std::to_string(max_people) + "]");
  if (c.name_pool < c.people) throw ConfigError("entity corpus: name_pool must be at least people");
  if (c.fact_rate < 0 || c.mention_rate < 0 || c.fact_rate + c.mention_rate > 1)
    throw ConfigError("entity corpus: fact_rate + mention_rate must lie in [0, 1]");
  const std::vector<std::string> pool = entity_name_pool(c.name_pool);
  Rng rng(c.seed);
  std::vector<std::string> docs;
  docs.reserve(c.documents);
  for (std::size_t d = 0; d < c.documents; ++d) {
    std::vector<std::size_t> names(pool.size()), places(max_people);
    std::iota(names.begin(), names.end(), std::size_t{0});
    std::iota(places.begin(), places.end(), std::size_t{0});
    for (std::size_t i = 0; i < c.people; ++i) {
      std::swap(names[i], names[i + rng.below(names.size() - i)]);
      std::swap(places[i], places[i + rng.below(places.size() - i)]);
    }
    std::string text;
    auto emit = [&](std::string_view w) {
      if (!text.empty()) text += ' ';
      text += w;
    };
    for (std::size_t s = 0; s < c.sentences_per_document; ++s) {
      const double r = rng.uniform();
      if (r < c.fact_rate) {
        const std::size_t who = rng.below(c.people);
        emit(pool[names[who]]);
        emit(kPlaces[places[who]]);
        emit(".");
      } else if (r < c.fact_rate + c.mention_rate) {
        emit(pool[names[rng.below(c.people)]]);
        emit(kVerbs[rng.below(std::size(kVerbs))]);
        emit(".");
      } else {
        for (auto w : kFillers[rng.below(kFillers.size())]) emit(w);
      }
    }
    docs.push_back(std::move(text));
  }
  return docs;
}

}  // namespace fwl
