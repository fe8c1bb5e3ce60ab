#include "seqchat/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "seqchat/tensor.hpp"

namespace seqchat {

namespace {

constexpr std::string_view kSpecialNames[kNumSpecials] = {"<PAD>", "<GO>", "<EOS>", "<UNK>"};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(s.substr(pos));
      break;
    }
    out.push_back(s.substr(pos, next - pos));
    pos = next + sep.size();
  }
  return out;
}

// Length of the UTF-8 sequence starting at s[i], or 0 if invalid.
std::size_t utf8_sequence_length(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  std::uint32_t cp = 0;
  if (b0 < 0x80) return 1;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  // Overlong forms, surrogates, out of range.
  if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
      (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
    return 0;
  }
  return len;
}

bool valid_utf8(std::string_view s) {
  for (std::size_t i = 0; i < s.size();) {
    const auto n = utf8_sequence_length(s, i);
    if (n == 0) return false;
    i += n;
  }
  return true;
}

// Quoted ids ("['L1', 'L2']") or, failing that, whitespace/comma separated ids.
std::vector<std::string> parse_id_list(std::string_view field) {
  std::vector<std::string> ids;
  std::size_t pos = 0;
  bool quoted = false;
  while (pos < field.size()) {
    const auto open = field.find_first_of("'\"", pos);
    if (open == std::string_view::npos) break;
    const auto close = field.find(field[open], open + 1);
    if (close == std::string_view::npos) break;
    quoted = true;
    auto id = trim(field.substr(open + 1, close - open - 1));
    if (!id.empty()) ids.emplace_back(id);
    pos = close + 1;
  }
  if (quoted) return ids;
  std::string cur;
  for (char c : field) {
    if (c == '[' || c == ']' || c == ',' || c == ' ' || c == '\t') {
      if (!cur.empty()) ids.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) ids.push_back(std::move(cur));
  return ids;
}

bool is_kept_punct(char c) { return c == '.' || c == ',' || c == '?' || c == '!' || c == '\''; }
bool is_spaced_punct(char c) { return c == '.' || c == ',' || c == '?' || c == '!'; }

}  // namespace

// ---- Vocab -------------------------------------------------------------------------

Vocab::Vocab() : Vocab(std::vector<std::string>(std::begin(kSpecialNames), std::end(kSpecialNames))) {}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < kNumSpecials) throw FormatError("vocabulary is missing special tokens");
  for (int i = 0; i < kNumSpecials; ++i) {
    if (words_[static_cast<std::size_t>(i)] != kSpecialNames[i]) {
      throw FormatError("vocabulary entry " + std::to_string(i) + " must be " +
                        std::string(kSpecialNames[i]));
    }
  }
  ids_.reserve(words_.size());
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!ids_.emplace(words_[i], static_cast<int>(i)).second) {
      throw FormatError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

int Vocab::id_of(std::string_view word) const {
  const auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view word) const { return ids_.contains(std::string(word)); }

const std::string& Vocab::word_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw IndexOutOfVocab("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::string_view special_token_name(int id) {
  if (id < 0 || id >= kNumSpecials) throw IndexOutOfVocab("not a special token id");
  return kSpecialNames[id];
}

// ---- buckets -----------------------------------------------------------------------

std::vector<Bucket> default_buckets() { return {{5, 10}, {10, 15}, {20, 25}, {40, 50}}; }

void validate_buckets(std::span<const Bucket> buckets) {
  if (buckets.empty()) throw std::invalid_argument("bucket list is empty");
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (buckets[i].src_cap < 1 || buckets[i].tgt_cap < 3) {
      throw std::invalid_argument("bucket (" + std::to_string(buckets[i].src_cap) + "," +
                                  std::to_string(buckets[i].tgt_cap) +
                                  ") needs src_cap >= 1 and tgt_cap >= 3");
    }
    if (i > 0 && buckets[i].src_cap < buckets[i - 1].src_cap) {
      throw std::invalid_argument("buckets must be sorted by src_cap");
    }
  }
}

std::vector<Bucket> parse_buckets(std::string_view text) {
  std::vector<Bucket> out;
  for (auto part : split(text, ";")) {
    part = trim(part);
    if (part.empty()) continue;
    const auto comma = part.find(',');
    if (comma == std::string_view::npos) throw std::invalid_argument("bad bucket '" + std::string(part) + "'");
    auto parse_num = [&](std::string_view s) {
      s = trim(s);
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size()) {
        throw std::invalid_argument("bad bucket '" + std::string(part) + "'");
      }
      return v;
    };
    out.push_back({parse_num(part.substr(0, comma)), parse_num(part.substr(comma + 1))});
  }
  validate_buckets(out);
  return out;
}

std::string format_buckets(std::span<const Bucket> buckets) {
  std::string out;
  for (const auto& b : buckets) {
    if (!out.empty()) out += ';';
    out += std::to_string(b.src_cap) + "," + std::to_string(b.tgt_cap);
  }
  return out;
}

// ---- parsing -----------------------------------------------------------------------

ParsedCorpus parse_corpus(std::istream& lines, std::istream& conversations, std::string_view separator) {
  if (separator.empty()) throw std::invalid_argument("field separator must not be empty");
  ParsedCorpus out;
  std::unordered_set<std::string> known;
  std::string line;
  while (std::getline(lines, line)) {
    const std::string_view view = trim(line);
    if (view.empty()) continue;
    if (!valid_utf8(view)) {
      ++out.skipped_lines;
      continue;
    }
    auto fields = split(view, separator);
    if (fields.size() < 4) {
      ++out.skipped_lines;
      continue;
    }
    RawUtterance u;
    u.line_id = trim(fields[0]);
    u.character_id = trim(fields[1]);
    u.movie_id = trim(fields[2]);
    // Four fields: text is the fourth. Five or more (the distributed corpus
    // carries a character name): text is everything after the fourth separator.
    if (fields.size() == 4) {
      u.text = trim(fields[3]);
    } else {
      const auto* text_begin = fields[4].data();
      u.text = trim(view.substr(static_cast<std::size_t>(text_begin - view.data())));
    }
    if (u.line_id.empty() || !known.insert(u.line_id).second) {
      ++out.skipped_lines;
      continue;
    }
    out.utterances.push_back(std::move(u));
  }

  while (std::getline(conversations, line)) {
    const std::string_view view = trim(line);
    if (view.empty()) continue;
    auto fields = split(view, separator);
    auto ids = parse_id_list(fields.back());
    const bool complete = !ids.empty() && std::all_of(ids.begin(), ids.end(), [&](const std::string& id) {
      return known.contains(id);
    });
    if (!complete) {
      ++out.malformed_conversations;
      continue;
    }
    out.conversations.push_back(std::move(ids));
  }
  return out;
}

std::vector<DialogPair> extract_pairs(const std::vector<std::vector<std::string>>& conversations,
                                      const std::vector<RawUtterance>& utterances) {
  std::unordered_map<std::string_view, const RawUtterance*> by_id;
  by_id.reserve(utterances.size());
  for (const auto& u : utterances) by_id.emplace(u.line_id, &u);

  std::vector<DialogPair> out;
  for (const auto& conv : conversations) {
    std::vector<const RawUtterance*> turns;
    for (const auto& id : conv) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) continue;
      if (!turns.empty() && turns.back()->character_id == it->second->character_id) {
        turns.back() = it->second;
      } else {
        turns.push_back(it->second);
      }
    }
    for (std::size_t i = 0; i + 1 < turns.size(); ++i) {
      out.push_back({clean_text(turns[i]->text), clean_text(turns[i + 1]->text)});
    }
  }
  return out;
}

// ---- cleaning ----------------------------------------------------------------------

std::string clean_text(std::string_view raw) {
  // Lowercase, keep letters/kept punctuation, whitespace becomes space.
  std::string kept;
  kept.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size();) {
    const auto c = static_cast<unsigned char>(raw[i]);
    if (c >= 0x80) {
      auto n = utf8_sequence_length(raw, i);
      // U+2018 / U+2019 quotation marks read as apostrophes.
      if (n == 3 && c == 0xE2 && static_cast<unsigned char>(raw[i + 1]) == 0x80 &&
          (static_cast<unsigned char>(raw[i + 2]) == 0x98 || static_cast<unsigned char>(raw[i + 2]) == 0x99)) {
        kept.push_back('\'');
      }
      i += n == 0 ? 1 : n;
      continue;
    }
    if (c >= 'A' && c <= 'Z') {
      kept.push_back(static_cast<char>(c - 'A' + 'a'));
    } else if ((c >= 'a' && c <= 'z') || is_kept_punct(static_cast<char>(c))) {
      kept.push_back(static_cast<char>(c));
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
      kept.push_back(' ');
    }
    ++i;
  }

  std::string collapsed;
  collapsed.reserve(kept.size());
  for (char c : kept) {
    if (is_kept_punct(c) && !collapsed.empty() && collapsed.back() == c) continue;
    collapsed.push_back(c);
  }

  std::string spaced;
  spaced.reserve(collapsed.size() * 2);
  for (char c : collapsed) {
    if (is_spaced_punct(c)) {
      spaced.push_back(' ');
      spaced.push_back(c);
      spaced.push_back(' ');
    } else {
      spaced.push_back(c);
    }
  }

  std::string out;
  out.reserve(spaced.size());
  for (char c : spaced) {
    if (c == ' ' && (out.empty() || out.back() == ' ')) continue;
    out.push_back(c);
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::vector<std::string> tokenize(std::string_view cleaned) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < cleaned.size()) {
    const auto start = cleaned.find_first_not_of(" \t\r\n", pos);
    if (start == std::string_view::npos) break;
    auto end = cleaned.find_first_of(" \t\r\n", start);
    if (end == std::string_view::npos) end = cleaned.size();
    out.emplace_back(cleaned.substr(start, end - start));
    pos = end;
  }
  return out;
}

std::vector<DialogPair> filter_pairs(const std::vector<DialogPair>& pairs, std::size_t min_len,
                                     std::size_t max_len) {
  if (min_len > max_len) {
    throw InvalidRange("filter_pairs: min_len " + std::to_string(min_len) + " > max_len " +
                       std::to_string(max_len));
  }
  std::vector<DialogPair> out;
  for (const auto& p : pairs) {
    const auto q = tokenize(p.question).size();
    const auto a = tokenize(p.answer).size();
    if (q >= min_len && q <= max_len && a >= min_len && a <= max_len) out.push_back(p);
  }
  return out;
}

Vocab build_vocab(const std::vector<DialogPair>& pairs, std::size_t keep_n) {
  struct Entry {
    std::string word;
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, std::size_t> index;
  std::size_t position = 0;
  auto count = [&](const std::string& text) {
    for (auto& tok : tokenize(text)) {
      auto [it, inserted] = index.emplace(tok, entries.size());
      if (inserted) entries.push_back({std::move(tok), 0, position});
      ++entries[it->second].count;
      ++position;
    }
  };
  for (const auto& p : pairs) {
    count(p.question);
    count(p.answer);
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.first < b.first;
  });
  std::vector<std::string> words(std::begin(kSpecialNames), std::end(kSpecialNames));
  for (std::size_t i = 0; i < entries.size() && i < keep_n; ++i) words.push_back(entries[i].word);
  return Vocab(std::move(words));
}

// ---- encoding ----------------------------------------------------------------------

std::optional<std::size_t> choose_bucket(std::size_t src_tokens, std::optional<std::size_t> tgt_tokens,
                                         std::span<const Bucket> buckets) {
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (src_tokens > buckets[i].src_cap) continue;
    if (tgt_tokens && *tgt_tokens + 2 > buckets[i].tgt_cap) continue;
    return i;
  }
  return std::nullopt;
}

std::vector<int> encode_source(std::span<const std::string> tokens, const Vocab& vocab, std::size_t src_cap,
                               bool reverse_source) {
  if (tokens.size() > src_cap) throw std::invalid_argument("encode_source: source longer than bucket");
  std::vector<int> ids(src_cap - tokens.size(), kPad);
  if (reverse_source) {
    for (auto it = tokens.rbegin(); it != tokens.rend(); ++it) ids.push_back(vocab.id_of(*it));
  } else {
    for (const auto& tok : tokens) ids.push_back(vocab.id_of(tok));
  }
  return ids;
}

std::optional<TokenizedPair> encode_pair(const DialogPair& pair, const Vocab& vocab,
                                         std::span<const Bucket> buckets, bool reverse_source) {
  const auto src = tokenize(pair.question);
  const auto tgt = tokenize(pair.answer);
  const auto bucket = choose_bucket(src.size(), tgt.size(), buckets);
  if (!bucket) return std::nullopt;
  const auto& b = buckets[*bucket];
  TokenizedPair out;
  out.bucket_index = static_cast<int>(*bucket);
  out.src_ids = encode_source(src, vocab, b.src_cap, reverse_source);
  out.tgt_ids.reserve(b.tgt_cap);
  out.tgt_ids.push_back(kGo);
  for (const auto& tok : tgt) out.tgt_ids.push_back(vocab.id_of(tok));
  out.tgt_ids.push_back(kEos);
  out.tgt_ids.resize(b.tgt_cap, kPad);
  return out;
}

std::vector<Batch> batch_dataset(const std::vector<TokenizedPair>& tokenized, std::size_t batch_size,
                                 std::uint64_t shuffle_seed) {
  if (tokenized.empty()) throw EmptyDataset("batch_dataset: no pairs");
  if (batch_size == 0) throw std::invalid_argument("batch_dataset: batch_size must be >= 1");
  std::mt19937_64 rng(shuffle_seed);

  int max_bucket = 0;
  for (const auto& p : tokenized) max_bucket = std::max(max_bucket, p.bucket_index);
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(max_bucket) + 1);
  for (std::size_t i = 0; i < tokenized.size(); ++i) {
    groups[static_cast<std::size_t>(tokenized[i].bucket_index)].push_back(i);
  }

  std::vector<Batch> batches;
  for (std::size_t b = 0; b < groups.size(); ++b) {
    auto& group = groups[b];
    deterministic_shuffle(group.begin(), group.end(), rng);
    for (std::size_t start = 0; start < group.size(); start += batch_size) {
      Batch batch;
      batch.bucket_index = static_cast<int>(b);
      const auto end = std::min(group.size(), start + batch_size);
      for (std::size_t k = start; k < end; ++k) batch.pairs.push_back(tokenized[group[k]]);
      batches.push_back(std::move(batch));
    }
  }
  deterministic_shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

// ---- files -------------------------------------------------------------------------

namespace {

constexpr std::string_view kDatasetMagic = "seqchat-dataset";
constexpr std::string_view kDatasetVersion = "v1";

std::vector<int> parse_ids(std::string_view text, std::size_t line_no) {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) {
    int v = 0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || p != tok.data() + tok.size() || v < 0) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": bad id '" + tok + "'");
    }
    ids.push_back(v);
  }
  return ids;
}

}  // namespace

void write_dataset(std::ostream& out, const Dataset& dataset) {
  out << kDatasetMagic << ' ' << kDatasetVersion << ' ' << dataset.vocab_size << ' '
      << format_buckets(dataset.buckets) << '\n';
  for (const auto& p : dataset.pairs) {
    for (std::size_t i = 0; i < p.src_ids.size(); ++i) out << (i ? " " : "") << p.src_ids[i];
    out << " |";
    for (int id : p.tgt_ids) out << ' ' << id;
    out << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset: empty file");
  const auto head = tokenize(line);
  if (head.size() != 4 || head[0] != kDatasetMagic) throw FormatError("dataset: bad header '" + line + "'");
  if (head[1] != kDatasetVersion) throw FormatError("dataset: unsupported version " + head[1]);
  Dataset ds;
  {
    const auto [p, ec] = std::from_chars(head[2].data(), head[2].data() + head[2].size(), ds.vocab_size);
    if (ec != std::errc{} || p != head[2].data() + head[2].size() || ds.vocab_size < kNumSpecials) {
      throw FormatError("dataset: bad vocabulary size '" + head[2] + "'");
    }
  }
  try {
    ds.buckets = parse_buckets(head[3]);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto bar = line.find('|');
    if (bar == std::string::npos) throw FormatError("dataset line " + std::to_string(line_no) + ": missing '|'");
    TokenizedPair p;
    p.src_ids = parse_ids(std::string_view(line).substr(0, bar), line_no);
    p.tgt_ids = parse_ids(std::string_view(line).substr(bar + 1), line_no);
    const auto it = std::find_if(ds.buckets.begin(), ds.buckets.end(), [&](const Bucket& b) {
      return b.src_cap == p.src_ids.size() && b.tgt_cap == p.tgt_ids.size();
    });
    if (it == ds.buckets.end()) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": lengths match no bucket");
    }
    for (int id : p.src_ids) {
      if (static_cast<std::size_t>(id) >= ds.vocab_size) {
        throw FormatError("dataset line " + std::to_string(line_no) + ": id outside vocabulary");
      }
    }
    for (int id : p.tgt_ids) {
      if (static_cast<std::size_t>(id) >= ds.vocab_size) {
        throw FormatError("dataset line " + std::to_string(line_no) + ": id outside vocabulary");
      }
    }
    p.bucket_index = static_cast<int>(it - ds.buckets.begin());
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

void write_vocab(std::ostream& out, const Vocab& vocab) {
  for (const auto& w : vocab.words()) out << w << '\n';
}

Vocab read_vocab(std::istream& in) {
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  return Vocab(std::move(words));
}

// ---- pipeline ----------------------------------------------------------------------

PreprocessResult preprocess(std::istream& lines, std::istream& conversations, const PreprocessOptions& options) {
  validate_buckets(options.buckets);
  PreprocessResult out;
  auto parsed = parse_corpus(lines, conversations, options.separator);
  out.stats.raw_utterances = parsed.utterances.size();
  out.stats.skipped_lines = parsed.skipped_lines;
  out.stats.conversations = parsed.conversations.size();
  out.stats.malformed_conversations = parsed.malformed_conversations;

  const auto pairs = extract_pairs(parsed.conversations, parsed.utterances);
  out.stats.pairs = pairs.size();
  out.filtered = filter_pairs(pairs, options.min_len, options.max_len);
  out.stats.filtered_pairs = out.filtered.size();

  out.vocab = build_vocab(out.filtered, options.keep_n);
  out.stats.vocab_size = out.vocab.size();

  out.dataset.vocab_size = out.vocab.size();
  out.dataset.buckets = options.buckets;
  for (const auto& p : out.filtered) {
    if (auto enc = encode_pair(p, out.vocab, options.buckets, options.reverse_source)) {
      out.dataset.pairs.push_back(std::move(*enc));
    } else {
      ++out.stats.discarded_by_bucket;
    }
  }
  out.stats.encoded_pairs = out.dataset.pairs.size();
  return out;
}

}  // namespace seqchat
