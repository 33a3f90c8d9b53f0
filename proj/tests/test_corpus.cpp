#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "fwl/corpus.hpp"

namespace fwl {
namespace {

Corpus ingest(std::string_view text, TokenizerKind kind, Tokenizer* tok_out = nullptr) {
  const auto docs = split_documents(text);
  const Tokenizer tok = build_tokenizer(kind, docs);
  if (tok_out) *tok_out = tok;
  return encode_corpus(tok, docs);
}

TEST(Corpus, TwoCharacterDocumentsShareVocabulary) {
  Tokenizer tok;
  const Corpus c = ingest("ab\n\nba", TokenizerKind::character, &tok);
  ASSERT_EQ(c.documents.size(), 2u);
  EXPECT_EQ(tok.vocab.size(), 4u);
  EXPECT_EQ(c.documents[0], (std::vector<TokenId>{kBosId, tok.vocab.id("a"), tok.vocab.id("b")}));
  EXPECT_EQ(c.documents[1], (std::vector<TokenId>{kBosId, tok.vocab.id("b"), tok.vocab.id("a")}));
  EXPECT_EQ(c.token_count(), 4u);
}

TEST(Corpus, IngestIsDeterministic) {
  const std::string text = "the cat sat\n\n\nthe dog ran\nfast\n\n";
  const Corpus a = ingest(text, TokenizerKind::word);
  const Corpus b = ingest(text, TokenizerKind::word);
  EXPECT_EQ(a.documents, b.documents);
}

TEST(Corpus, CharacterModeRoundTrips) {
  const std::string text = "naïve café, 東京!\nline two";
  Tokenizer tok;
  tok = build_tokenizer(TokenizerKind::character, {text});
  const auto ids = tok.encode_document(text);
  EXPECT_EQ(tok.decode(ids), text);
  EXPECT_EQ(tok.split("東京").size(), 2u);
}

TEST(Corpus, WordModeMapsUnseenWordsToUnknown) {
  const Tokenizer tok = build_tokenizer(TokenizerKind::word, {"a b b c c c"});
  EXPECT_EQ(tok.vocab.id("c"), 2u);  // most frequent first
  EXPECT_EQ(tok.vocab.id("b"), 3u);
  EXPECT_EQ(tok.vocab.id("zzz"), kUnkId);
  const auto ids = tok.encode_document("a zzz");
  EXPECT_EQ(ids, (std::vector<TokenId>{kBosId, tok.vocab.id("a"), kUnkId}));
}

TEST(Corpus, MinCountDropsRareTokens) {
  const Tokenizer tok = build_tokenizer(TokenizerKind::word, {"a b b"}, 2);
  EXPECT_TRUE(tok.vocab.contains("b"));
  EXPECT_FALSE(tok.vocab.contains("a"));
}

TEST(Corpus, VocabularyFileRoundTripKeepsOrder) {
  const Tokenizer tok = build_tokenizer(TokenizerKind::word, {"x y y z z z"});
  const auto path = std::filesystem::temp_directory_path() / "fwl_vocab_test.txt";
  tok.vocab.save(path);
  const Vocabulary back = Vocabulary::load(path);
  EXPECT_EQ(back.tokens(), tok.vocab.tokens());
  std::filesystem::remove(path);
}

TEST(Corpus, VocabularyWithoutSpecialsIsRejected) {
  EXPECT_THROW(Vocabulary::from_tokens({"a", "b"}), InputError);
  EXPECT_THROW(Vocabulary::from_tokens({"<unk>", "<bos>", "a", "a"}), InputError);
}

TEST(Corpus, SplitDocumentsTrimsAndDropsBlankRuns) {
  const auto docs = split_documents("\n\n  one\ntwo  \n \n\t\nthree\n\n\n");
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0], "one\ntwo");
  EXPECT_EQ(docs[1], "three");
  EXPECT_TRUE(split_documents(" \n\n").empty());
}

TEST(Corpus, MissingFileIsIoError) {
  EXPECT_THROW(read_text_file("/nonexistent/fwl/corpus.txt"), IoError);
}

TEST(Corpus, BadTokenizerNameIsConfigError) {
  EXPECT_THROW(parse_tokenizer_kind("bpe"), ConfigError);
  EXPECT_EQ(parse_tokenizer_kind("character"), TokenizerKind::character);
}

TEST(EntityCorpus, SeededAndReproducible) {
  EntityCorpusConfig c;
  c.documents = 5;
  c.seed = 3;
  EXPECT_EQ(generate_entity_documents(c), generate_entity_documents(c));
  auto other = c;
  other.seed = 4;
  EXPECT_NE(generate_entity_documents(c), generate_entity_documents(other));
}

TEST(EntityCorpus, EachDocumentGivesItsPeopleDistinctFixedPlaces) {
  EntityCorpusConfig c;
  c.documents = 20;
  c.seed = 9;
  const auto pool = entity_name_pool(c.name_pool);
  const std::set<std::string> names(pool.begin(), pool.end());
  const std::set<std::string> places = {"paris", "rome", "oslo", "lima", "cairo", "delhi",
                                        "tokyo", "quito", "perth", "dakar", "riga", "hanoi"};
  std::set<std::string> seen_names;
  for (const auto& doc : generate_entity_documents(c)) {
    Tokenizer words;
    words.kind = TokenizerKind::word;
    const auto w = words.split(doc);
    std::map<std::string, std::string> place_of, owner_of;
    std::set<std::string> cast;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      if (!names.count(w[i])) continue;
      cast.insert(w[i]);
      if (!places.count(w[i + 1])) continue;
      EXPECT_EQ(place_of.emplace(w[i], w[i + 1]).first->second, w[i + 1]) << w[i];
      EXPECT_EQ(owner_of.emplace(w[i + 1], w[i]).first->second, w[i]) << w[i + 1];
    }
    EXPECT_LE(cast.size(), c.people);
    seen_names.insert(cast.begin(), cast.end());
  }
  EXPECT_GT(seen_names.size(), c.people);
}

TEST(EntityCorpus, NamePoolIsFixedAndDistinct) {
  const auto a = entity_name_pool(50);
  EXPECT_EQ(a, entity_name_pool(50));
  EXPECT_EQ(std::set<std::string>(a.begin(), a.end()).size(), 50u);
  EXPECT_THROW(entity_name_pool(9000), ConfigError);
}

TEST(EntityCorpus, InvalidConfigIsRejected) {
  EntityCorpusConfig c;
  c.people = 0;
  EXPECT_THROW(generate_entity_documents(c), ConfigError);
  c.people = 13;
  EXPECT_THROW(generate_entity_documents(c), ConfigError);
  c.people = 4;
  c.fact_rate = 0.8;
  c.mention_rate = 0.3;
  EXPECT_THROW(generate_entity_documents(c), ConfigError);
  c.fact_rate = 0.2;
  c.name_pool = 3;
  EXPECT_THROW(generate_entity_documents(c), ConfigError);
}

}  // namespace
}  // namespace fwl
