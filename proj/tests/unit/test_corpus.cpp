#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "common.hpp"
#include "seqchat/corpus.hpp"

using namespace seqchat;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sep(std::initializer_list<std::string> fields) {
  std::string out;
  for (const auto& f : fields) out += (out.empty() ? "" : " +++$+++ ") + f;
  return out + "\n";
}

}  // namespace

TEST_CASE("clean_text examples") {
  CHECK(clean_text("How are you?") == "how are you ?");
  CHECK(clean_text("I am fine.") == "i am fine .");
  CHECK(clean_text("Wait!!! What?!") == "wait ! what ? !");
  CHECK(clean_text("  spaced\tout \r\n words ") == "spaced out words");
  CHECK(clean_text("Don\xE2\x80\x99t go, Bob") == "don't go , bob");
  CHECK(clean_text("It's 5 o'clock -- <b>now</b>") == "it's o'clock bnowb");
  CHECK(clean_text("caf\xC3\xA9") == "caf");
  CHECK(clean_text("") == "");
  CHECK(clean_text("12345 ###") == "");
  CHECK(clean_text("....") == ".");
}

TEST_CASE("clean_text is idempotent and emits only the kept alphabet") {
  std::mt19937_64 rng(77);
  const std::string alphabet = "aZ .,?!'\t\n-#9\xE2\x80\x99\xC3\xA9";
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    const auto n = rng() % 40;
    for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
    const auto once = clean_text(s);
    CHECK(clean_text(once) == once);
    for (char c : once) {
      const bool ok = (c >= 'a' && c <= 'z') || c == ' ' || c == '.' || c == ',' || c == '?' || c == '!' || c == '\'';
      CHECK(ok);
    }
    CHECK(once.find("  ") == std::string::npos);
    if (!once.empty()) {
      CHECK(once.front() != ' ');
      CHECK(once.back() != ' ');
    }
  }
}

TEST_CASE("tokenize splits on whitespace") {
  CHECK(tokenize("i am fine .") == std::vector<std::string>{"i", "am", "fine", "."});
  CHECK(tokenize("").empty());
  CHECK(tokenize("  a  b ") == std::vector<std::string>{"a", "b"});
}

TEST_CASE("parse_corpus handles four- and five-field lines") {
  std::stringstream lines;
  lines << sep({"L1", "u0", "m0", "BIANCA", "They do not!"});
  lines << sep({"L2", "u1", "m0", "Hi there"});
  lines << sep({"L3", "u0", "m0", "BIANCA", "A +++$+++ inside"});
  lines << "L4 +++$+++ u0\n";
  lines << sep({"L5", "u0", "m0", "X", "bad \xFF byte"});
  lines << sep({"L1", "u0", "m0", "X", "duplicate id"});
  lines << "\n";
  std::stringstream convs;
  convs << sep({"u0", "u1", "m0", "['L1', 'L2']"});
  convs << sep({"u0", "u1", "m0", "['L2', 'L404']"});
  convs << sep({"u0", "u1", "m0", "['L3']"});
  const auto c = parse_corpus(lines, convs);
  REQUIRE(c.utterances.size() == 3);
  CHECK(c.utterances[0].text == "They do not!");
  CHECK(c.utterances[1].text == "Hi there");
  CHECK(c.utterances[2].text == "A +++$+++ inside");
  CHECK(c.skipped_lines == 3);
  CHECK(c.malformed_conversations == 1);
  REQUIRE(c.conversations.size() == 2);
  CHECK(c.conversations[0] == std::vector<std::string>{"L1", "L2"});
}

TEST_CASE("extract_pairs pairs adjacent turns and merges same-speaker runs") {
  std::vector<RawUtterance> u = {
      {"L1", "a", "m", "Hello."}, {"L2", "b", "m", "Hi!"}, {"L3", "b", "m", "Who are you?"}, {"L4", "a", "m", "Me."}};
  const auto pairs = extract_pairs({{"L1", "L2", "L3", "L4"}}, u);
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].question == "hello .");
  CHECK(pairs[0].answer == "who are you ?");
  CHECK(pairs[1].question == "who are you ?");
  CHECK(pairs[1].answer == "me .");
}

TEST_CASE("filter_pairs keeps both sides within bounds") {
  std::vector<DialogPair> in = {{"a b", "c d"}, {"a", "b c"}, {"a b c d e f", "b c"}, {"a b", "c d e f g"}};
  const auto out = filter_pairs(in, 2, 5);
  REQUIRE(out.size() == 2);
  CHECK(out[1].answer == "c d e f g");
  CHECK_THROWS_AS(filter_pairs(in, 6, 5), InvalidRange);
}

TEST_CASE("build_vocab orders by frequency then first occurrence") {
  std::vector<DialogPair> pairs = {{"b a", "c a"}, {"c d", "a e"}};
  const auto v = build_vocab(pairs, 3);
  CHECK(v.words() == std::vector<std::string>{"<PAD>", "<GO>", "<EOS>", "<UNK>", "a", "c", "b"});
  CHECK(v.id_of("d") == kUnk);
  CHECK(v.id_of("a") == 4);
  CHECK_FALSE(v.contains("e"));
  CHECK_THROWS_AS(v.word_of(7), IndexOutOfVocab);
}

TEST_CASE("vocabulary caps at keep_n plus the specials") {
  std::vector<DialogPair> pairs;
  for (int i = 0; i < 7000; ++i) {
    std::string w = "w";
    for (int k = i; k > 0; k /= 26) w.push_back(static_cast<char>('a' + k % 26));
    pairs.push_back({w + " x", "y " + w});
  }
  CHECK(build_vocab(pairs).size() == 6286);
}

TEST_CASE("encoding a pair into the smallest fitting bucket") {
  const std::vector<DialogPair> pairs = {{clean_text("How are you?"), clean_text("I am fine.")}};
  const auto vocab = build_vocab(pairs);
  const auto enc = encode_pair(pairs[0], vocab, default_buckets());
  REQUIRE(enc);
  CHECK(enc->bucket_index == 0);
  const int pad = kPad, go = kGo, eos = kEos;
  const int how = vocab.id_of("how"), are = vocab.id_of("are"), you = vocab.id_of("you"), q = vocab.id_of("?");
  const int i = vocab.id_of("i"), am = vocab.id_of("am"), fine = vocab.id_of("fine"), dot = vocab.id_of(".");
  CHECK(enc->src_ids == std::vector<int>{pad, q, you, are, how});
  CHECK(enc->tgt_ids == std::vector<int>{go, i, am, fine, dot, eos, pad, pad, pad, pad});
}

TEST_CASE("choose_bucket") {
  const auto b = default_buckets();
  CHECK(choose_bucket(5, 8, b) == 0u);
  CHECK(choose_bucket(5, 9, b) == 1u);
  CHECK(choose_bucket(6, std::nullopt, b) == 1u);
  CHECK(choose_bucket(40, 48, b) == 3u);
  CHECK_FALSE(choose_bucket(41, std::nullopt, b));
  CHECK_FALSE(choose_bucket(3, 49, b));
  Vocab v;
  CHECK_FALSE(encode_pair({"a b c d e f g h i j k l m n o p q r s t u v w x y z a b c d e f g h i j k l m n o", "x y"},
                          v, b));
}

TEST_CASE("encode_source without reversal and with unknown words") {
  Vocab v({"<PAD>", "<GO>", "<EOS>", "<UNK>", "hi"});
  const std::vector<std::string> toks = {"hi", "stranger"};
  CHECK(encode_source(toks, v, 4, false) == std::vector<int>{0, 0, 4, 3});
  CHECK(encode_source(toks, v, 4, true) == std::vector<int>{0, 0, 3, 4});
  CHECK_THROWS(encode_source(toks, v, 1, true));
}

TEST_CASE("bucket parsing and validation") {
  CHECK(format_buckets(parse_buckets("5,10;10,15;20,25;40,50")) == "5,10;10,15;20,25;40,50");
  CHECK_THROWS_AS(parse_buckets("5"), std::invalid_argument);
  CHECK_THROWS_AS(parse_buckets(""), std::invalid_argument);
  CHECK_THROWS_AS(parse_buckets("10,15;5,10"), std::invalid_argument);
  CHECK_THROWS_AS(parse_buckets("5,2"), std::invalid_argument);
}

TEST_CASE("vocab file validation") {
  std::stringstream bad("<GO>\n<PAD>\n<EOS>\n<UNK>\n");
  CHECK_THROWS_AS(read_vocab(bad), FormatError);
  std::stringstream dup("<PAD>\n<GO>\n<EOS>\n<UNK>\nx\nx\n");
  CHECK_THROWS_AS(read_vocab(dup), FormatError);
  std::stringstream ok("<PAD>\n<GO>\n<EOS>\n<UNK>\nx\n");
  CHECK(read_vocab(ok).size() == 5);
}

TEST_CASE("batching is seeded, grouped by bucket and keeps partial batches") {
  std::vector<TokenizedPair> data;
  for (int i = 0; i < 23; ++i) data.push_back({{i, 0}, {1, 2, 0}, i % 3 == 0 ? 1 : 0});
  const auto a = batch_dataset(data, 4, 9);
  const auto b = batch_dataset(data, 4, 9);
  const auto c = batch_dataset(data, 4, 10);
  std::multiset<int> seen;
  std::size_t total = 0;
  for (const auto& batch : a) {
    CHECK(batch.pairs.size() <= 4);
    for (const auto& p : batch.pairs) {
      CHECK(p.bucket_index == batch.bucket_index);
      seen.insert(p.src_ids[0]);
    }
    total += batch.pairs.size();
  }
  CHECK(total == 23);
  CHECK(seen.size() == 23);
  CHECK(std::set<int>(seen.begin(), seen.end()).size() == 23);
  // 15 + 8 pairs: 4 + 2 batches.
  CHECK(a.size() == 6);
  auto order = [](const std::vector<Batch>& bs) {
    std::vector<int> ids;
    for (const auto& batch : bs)
      for (const auto& p : batch.pairs) ids.push_back(p.src_ids[0]);
    return ids;
  };
  CHECK(order(a) == order(b));
  CHECK(order(a) != order(c));
  CHECK_THROWS_AS(batch_dataset({}, 4, 1), EmptyDataset);
}

TEST_CASE("dataset file round trip and validation") {
  Dataset d;
  d.vocab_size = 10;
  d.buckets = {{2, 4}};
  d.pairs = {{{0, 5}, {1, 6, 2, 0}, 0}, {{4, 9}, {1, 2, 0, 0}, 0}};
  std::stringstream ss;
  write_dataset(ss, d);
  CHECK(ss.str() == "seqchat-dataset v1 10 2,4\n0 5 | 1 6 2 0\n4 9 | 1 2 0 0\n");
  const auto back = read_dataset(ss);
  CHECK(back.vocab_size == 10);
  CHECK(back.pairs.size() == 2);
  CHECK(back.pairs[1].src_ids == std::vector<int>{4, 9});
  std::stringstream out_of_vocab("seqchat-dataset v1 10 2,4\n0 10 | 1 6 2 0\n");
  CHECK_THROWS_AS(read_dataset(out_of_vocab), FormatError);
  std::stringstream wrong_len("seqchat-dataset v1 10 2,4\n0 1 2 | 1 6 2 0\n");
  CHECK_THROWS_AS(read_dataset(wrong_len), FormatError);
  std::stringstream bad_header("seqchat-dataset v2 10 2,4\n");
  CHECK_THROWS_AS(read_dataset(bad_header), FormatError);
}

TEST_CASE("fixture preprocessing matches the golden files") {
  const auto dir = testing_support::data_dir() / "fixture";
  std::ifstream lines(dir / "movie_lines.txt", std::ios::binary), convs(dir / "movie_conversations.txt", std::ios::binary);
  REQUIRE(lines);
  REQUIRE(convs);
  const auto r = preprocess(lines, convs, PreprocessOptions{});
  std::ostringstream ds, vs;
  write_dataset(ds, r.dataset);
  write_vocab(vs, r.vocab);
  CHECK(ds.str() == slurp(dir / "golden_dataset.txt"));
  CHECK(vs.str() == slurp(dir / "golden_vocab.txt"));
  CHECK(r.stats.skipped_lines == 2);
  CHECK(r.stats.malformed_conversations == 1);
  CHECK(r.stats.encoded_pairs == r.dataset.pairs.size());
  CHECK(r.stats.vocab_size == r.vocab.size());
}
