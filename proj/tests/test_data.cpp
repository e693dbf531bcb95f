#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "klctl/data.hpp"

using namespace klctl;

namespace {

struct Fixture {
  SyntheticGrammar grammar = default_grammar();
  Vocabulary vocab = build_vocabulary(grammar);
};

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("klctl_test_data_" + name)).string();
}

}  // namespace

TEST(Vocabulary, ReservedIdsAreFixed) {
  const Vocabulary v({"red", "blue"});
  EXPECT_EQ(v.id("<pad>"), kPad);
  EXPECT_EQ(v.id("<unk>"), kUnk);
  EXPECT_EQ(v.id("<cls>"), kCls);
  EXPECT_EQ(v.id("<bos>"), kBos);
  EXPECT_EQ(v.id("<eos>"), kEos);
  EXPECT_EQ(v.id("red"), 5);
  EXPECT_EQ(v.id("unseen"), kUnk);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.decode(v.encode({"blue", "red"})), "blue red");
  EXPECT_THROW(v.token(7), InputError);
  const Vocabulary round = Vocabulary::from_id_order(v.tokens());
  EXPECT_EQ(round.tokens(), v.tokens());
}

TEST(DeriveOrderLabels, Examples) {
  const Vocabulary v({"the", "red", "soft", "shirt", "nice"});
  const auto kw = v.encode({"red", "nice", "soft"});
  EXPECT_EQ(derive_order_labels(kw, v.encode(split_words("the red soft shirt"))), (std::vector<int>{1, 0, 2}));
  EXPECT_EQ(derive_order_labels(kw, v.encode({"the", "shirt"})), (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(derive_order_labels(kw, v.encode({"red", "nice", "soft"})), (std::vector<int>{1, 2, 3}));
  // Repeated keywords rank by first occurrence.
  EXPECT_EQ(derive_order_labels(kw, v.encode({"soft", "red", "soft"})), (std::vector<int>{2, 0, 1}));
  const std::vector<int> dup = {v.id("red"), v.id("red")};
  EXPECT_THROW(derive_order_labels(dup, kw), InputError);
}

TEST(ValidOrderLabels, Contiguity) {
  EXPECT_TRUE(valid_order_labels(std::vector<int>{0, 2, 1, 0}));
  EXPECT_TRUE(valid_order_labels(std::vector<int>{0, 0}));
  EXPECT_FALSE(valid_order_labels(std::vector<int>{1, 3}));
  EXPECT_FALSE(valid_order_labels(std::vector<int>{1, 1}));
  EXPECT_FALSE(valid_order_labels(std::vector<int>{-1, 1}));
}

TEST(Grammar, ValidAndDisjoint) {
  const Fixture f;
  EXPECT_NO_THROW(f.grammar.validate());
  SyntheticGrammar bad = f.grammar;
  bad.items.push_back("red");
  EXPECT_THROW(bad.validate(), InputError);
}

TEST(GenerateCorpus, DeterministicUnderSeed) {
  const Fixture f;
  const auto a = generate_corpus(f.grammar, f.vocab, 100, 7);
  const auto b = generate_corpus(f.grammar, f.vocab, 100, 7);
  const auto c = generate_corpus(f.grammar, f.vocab, 100, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(generate_corpus(f.grammar, f.vocab, 1, 7).size(), 1u);
}

TEST(GenerateCorpus, ExamplesSatisfyOrderInvariant) {
  const Fixture f;
  const auto corpus = generate_corpus(f.grammar, f.vocab, 500, 3);
  std::size_t with_distractor = 0;
  for (const auto& ex : corpus) {
    ASSERT_EQ(derive_order_labels(ex.spec.keywords, ex.text), ex.spec.orders);
    ASSERT_TRUE(valid_order_labels(ex.spec.orders));
    ASSERT_LE(ex.text.size(), 100u);
    std::size_t present = 0;
    for (std::size_t i = 0; i < ex.spec.size(); ++i) {
      const bool occurs = std::find(ex.text.begin(), ex.text.end(), ex.spec.keywords[i]) != ex.text.end();
      EXPECT_EQ(occurs, ex.spec.orders[i] > 0);
      present += occurs;
    }
    EXPECT_GE(present, 2u);
    EXPECT_LE(present, 3u);
    with_distractor += present < ex.spec.size();
    for (int t : ex.text) EXPECT_GT(t, kEos);
  }
  EXPECT_EQ(with_distractor, corpus.size());
}

TEST(GenerateCorpus, RejectsBadOptions) {
  const Fixture f;
  CorpusOptions o;
  o.min_keywords = 0;
  EXPECT_THROW(generate_corpus(f.grammar, f.vocab, 5, 1, o), InputError);
  o = CorpusOptions{};
  o.max_keywords = 20;
  EXPECT_THROW(generate_corpus(f.grammar, f.vocab, 5, 1, o), InputError);
}

TEST(Batching, PaddingContract) {
  std::vector<TrainingExample> ex(2);
  ex[0].text = {5, 6, 7};
  ex[0].spec = {{5}, {1}};
  ex[1].text = {8, 9, 10, 11, 12};
  ex[1].spec = {{8, 13}, {1, 0}};
  const Batch b = make_batch(ex, 100);
  EXPECT_EQ(b.text_len, 5u);
  EXPECT_EQ(b.keyword_len, 2u);
  EXPECT_EQ(std::count(b.token_mask.begin(), b.token_mask.begin() + 5, 1), 3);
  EXPECT_EQ(std::count(b.token_mask.begin() + 5, b.token_mask.end(), 1), 5);
  EXPECT_EQ(b.tokens[3], kPad);
  EXPECT_EQ(unbatch(b), ex);

  const Batch one = make_batch(std::span(ex).first(1), 100);
  EXPECT_EQ(one.size, 1u);
  EXPECT_EQ(std::count(one.token_mask.begin(), one.token_mask.end(), 1), 3);

  EXPECT_THROW(make_batch(ex, 4), InputError);
  EXPECT_THROW(make_batch(std::span<const TrainingExample>{}, 100), InputError);
}

TEST(Batching, BatchifyRoundTrip) {
  const Fixture f;
  const auto corpus = generate_corpus(f.grammar, f.vocab, 37, 11);
  const auto batches = batchify(corpus, 8, 100);
  ASSERT_EQ(batches.size(), 5u);
  std::vector<TrainingExample> back;
  for (const auto& b : batches)
    for (auto& ex : unbatch(b)) back.push_back(std::move(ex));
  EXPECT_EQ(back, corpus);
  EXPECT_THROW(batchify(corpus, 0, 100), InputError);
}

TEST(SplitCorpus, SizesAndPartition) {
  const Fixture f;
  const auto corpus = generate_corpus(f.grammar, f.vocab, 1000, 5);
  const auto s = split_corpus(corpus, {0.8, 0.1, 0.1});
  EXPECT_EQ(s.train.size(), 800u);
  EXPECT_EQ(s.validation.size(), 100u);
  EXPECT_EQ(s.test.size(), 100u);
  std::vector<TrainingExample> joined = s.train;
  joined.insert(joined.end(), s.validation.begin(), s.validation.end());
  joined.insert(joined.end(), s.test.begin(), s.test.end());
  EXPECT_EQ(joined, corpus);

  const auto all = split_corpus(corpus, {1.0, 0.0, 0.0});
  EXPECT_EQ(all.train.size(), 1000u);
  EXPECT_TRUE(all.validation.empty() && all.test.empty());

  EXPECT_THROW(split_corpus(corpus, {0.5, 0.1, 0.1}), InputError);
  EXPECT_THROW(split_corpus(corpus, {1.2, -0.1, -0.1}), InputError);
  EXPECT_THROW(split_corpus(corpus, {0.0, 0.5, 0.5}), InputError);
}

TEST(Formats, ExampleRoundTrip) {
  const Fixture f;
  for (const auto& ex : generate_corpus(f.grammar, f.vocab, 50, 2)) {
    const std::string line = format_example(ex, f.vocab);
    EXPECT_EQ(parse_example(line, f.vocab), ex);
    EXPECT_EQ(parse_spec(line, f.vocab), ex.spec);
  }
}

TEST(Formats, SpecParsingErrors) {
  const Fixture f;
  EXPECT_EQ(parse_spec("red:1 silk:0", f.vocab).orders, (std::vector<int>{1, 0}));
  EXPECT_THROW(parse_spec("red", f.vocab), InputError);
  EXPECT_THROW(parse_spec("red:x", f.vocab), InputError);
  EXPECT_THROW(parse_spec("zzz:1", f.vocab), InputError);
  EXPECT_THROW(parse_spec("<eos>:1", f.vocab), InputError);
  EXPECT_THROW(parse_spec("red:1 silk:3", f.vocab), InputError);
  EXPECT_THROW(parse_spec("red:1 red:2", f.vocab), InputError);
  EXPECT_THROW(parse_spec("", f.vocab), InputError);
  EXPECT_THROW(parse_example("red:1", f.vocab), InputError);
}

TEST(Formats, FileRoundTripAndLineNumbers) {
  const Fixture f;
  const auto corpus = generate_corpus(f.grammar, f.vocab, 20, 4);
  const std::string path = temp_path("corpus.tsv");
  write_corpus(path, corpus, f.vocab);
  EXPECT_EQ(read_corpus(path, f.vocab), corpus);
  EXPECT_EQ(read_specs(path, f.vocab).size(), corpus.size());

  const std::string bad = temp_path("bad_specs.txt");
  {
    std::ofstream out(bad);
    out << "red:1\n\nsilk:2\n";
  }
  try {
    read_specs(bad, f.vocab);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_lines(temp_path("missing_file")), LoadError);
  std::filesystem::remove(path);
  std::filesystem::remove(bad);
}
