#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace seqchat {

// ---- special tokens ------------------------------------------------------------

inline constexpr int kPad = 0;
inline constexpr int kGo = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumSpecials = 4;

inline constexpr std::string_view kDefaultSeparator = "+++$+++";

struct InvalidRange : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct EmptyDataset : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- domain types ----------------------------------------------------------------

struct RawUtterance {
  std::string line_id;
  std::string character_id;
  std::string movie_id;
  std::string text;

  bool operator==(const RawUtterance&) const = default;
};

struct DialogPair {
  std::string question;
  std::string answer;

  bool operator==(const DialogPair&) const = default;
};

struct ParsedCorpus {
  std::vector<RawUtterance> utterances;
  std::vector<std::vector<std::string>> conversations;
  std::size_t skipped_lines = 0;            // unparseable or badly encoded utterance lines
  std::size_t malformed_conversations = 0;  // dropped for referencing unknown line ids
};

class Vocab {
 public:
  // Only the four specials.
  Vocab();
  // `words` must start with the four special tokens in id order.
  explicit Vocab(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  // UNK for unknown words.
  int id_of(std::string_view word) const;
  bool contains(std::string_view word) const;
  // Throws IndexOutOfVocab.
  const std::string& word_of(int id) const;

  bool operator==(const Vocab& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

std::string_view special_token_name(int id);

struct Bucket {
  std::size_t src_cap = 0;
  std::size_t tgt_cap = 0;

  bool operator==(const Bucket&) const = default;
};

std::vector<Bucket> default_buckets();
// "5,10;10,15" -> buckets; validates caps and ascending src_cap order.
std::vector<Bucket> parse_buckets(std::string_view text);
std::string format_buckets(std::span<const Bucket> buckets);
void validate_buckets(std::span<const Bucket> buckets);

struct TokenizedPair {
  std::vector<int> src_ids;
  std::vector<int> tgt_ids;
  int bucket_index = 0;

  bool operator==(const TokenizedPair&) const = default;
};

struct Batch {
  int bucket_index = 0;
  std::vector<TokenizedPair> pairs;
};

// ---- operations ------------------------------------------------------------------

// One utterance per line: line_id SEP character_id SEP movie_id [SEP name] SEP text.
// Conversation lines end with a field listing line ids, e.g. "['L1', 'L2']".
// Lines that are not valid UTF-8 or have too few fields are skipped and counted.
ParsedCorpus parse_corpus(std::istream& lines, std::istream& conversations,
                          std::string_view separator = kDefaultSeparator);

// Collapses consecutive utterances by one character to the last of the run,
// then emits every adjacent pair. Texts are cleaned.
std::vector<DialogPair> extract_pairs(const std::vector<std::vector<std::string>>& conversations,
                                      const std::vector<RawUtterance>& utterances);

std::string clean_text(std::string_view raw);

std::vector<std::string> tokenize(std::string_view cleaned);

std::vector<DialogPair> filter_pairs(const std::vector<DialogPair>& pairs, std::size_t min_len = 2,
                                     std::size_t max_len = 5);

// Most frequent `keep_n` words, ties broken by first occurrence.
Vocab build_vocab(const std::vector<DialogPair>& pairs, std::size_t keep_n = 6282);

// Index of the smallest bucket that fits, or nullopt. Without a target length
// only the source is checked.
std::optional<std::size_t> choose_bucket(std::size_t src_tokens, std::optional<std::size_t> tgt_tokens,
                                         std::span<const Bucket> buckets);

// Left-padded source ids, content reversed when `reverse_source`.
std::vector<int> encode_source(std::span<const std::string> tokens, const Vocab& vocab,
                               std::size_t src_cap, bool reverse_source);

// nullopt means the pair fits no bucket and is discarded.
std::optional<TokenizedPair> encode_pair(const DialogPair& pair, const Vocab& vocab,
                                         std::span<const Bucket> buckets, bool reverse_source = true);

// Groups by bucket, shuffles deterministically, keeps the final partial batch.
std::vector<Batch> batch_dataset(const std::vector<TokenizedPair>& tokenized, std::size_t batch_size,
                                 std::uint64_t shuffle_seed);

// In-place Fisher-Yates with a portable index draw.
template <class It, class Rng>
void deterministic_shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(first[i - 1], first[j]);
  }
}

// ---- files -----------------------------------------------------------------------

struct Dataset {
  std::size_t vocab_size = 0;
  std::vector<Bucket> buckets;
  std::vector<TokenizedPair> pairs;
};

void write_dataset(std::ostream& out, const Dataset& dataset);
Dataset read_dataset(std::istream& in);

void write_vocab(std::ostream& out, const Vocab& vocab);
Vocab read_vocab(std::istream& in);

// ---- whole pipeline ----------------------------------------------------------------

struct PreprocessOptions {
  std::string separator{kDefaultSeparator};
  std::size_t min_len = 2;
  std::size_t max_len = 5;
  std::size_t keep_n = 6282;
  std::vector<Bucket> buckets = default_buckets();
  bool reverse_source = true;
};

struct CorpusStats {
  std::size_t raw_utterances = 0;
  std::size_t skipped_lines = 0;
  std::size_t conversations = 0;
  std::size_t malformed_conversations = 0;
  std::size_t pairs = 0;
  std::size_t filtered_pairs = 0;
  std::size_t discarded_by_bucket = 0;
  std::size_t encoded_pairs = 0;
  std::size_t vocab_size = 0;
};

struct PreprocessResult {
  Vocab vocab;
  Dataset dataset;
  std::vector<DialogPair> filtered;  // cleaned pairs that passed the length filter
  CorpusStats stats;
};

PreprocessResult preprocess(std::istream& lines, std::istream& conversations,
                            const PreprocessOptions& options);

}  // namespace seqchat
