#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "seqchat/config.hpp"
#include "seqchat/corpus.hpp"
#include "seqchat/tensor.hpp"

namespace testing_support {

inline std::filesystem::path data_dir() { return SEQCHAT_TEST_DATA; }

inline seqchat::ModelConfig tiny_config(std::size_t vocab, std::size_t embed, std::size_t rnn) {
  seqchat::ModelConfig c;
  c.vocab_size = vocab;
  c.embedding_size = embed;
  c.rnn_size = rnn;
  c.batch_size = 4;
  c.keep_probability = 1.0;
  return c;
}

template <class T>
seqchat::Matrix<T> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  seqchat::Matrix<T> m(r, c);
  for (auto& v : m.data()) v = static_cast<T>(u(rng));
  return m;
}

// The specials followed by w4, w5, ... up to n words.
inline seqchat::Vocab numbered_vocab(std::size_t n) {
  std::vector<std::string> words;
  for (int i = 0; i < seqchat::kNumSpecials; ++i) words.emplace_back(seqchat::special_token_name(i));
  for (std::size_t i = words.size(); i < n; ++i) words.push_back("w" + std::to_string(i));
  return seqchat::Vocab(words);
}

// Left-padded random source of `len` slots with `tokens` real words.
inline std::vector<int> random_source(std::size_t len, std::size_t tokens, std::size_t vocab, std::mt19937_64& rng) {
  std::vector<int> src(len - tokens, seqchat::kPad);
  for (std::size_t i = 0; i < tokens; ++i) {
    src.push_back(seqchat::kNumSpecials + static_cast<int>(rng() % (vocab - seqchat::kNumSpecials)));
  }
  return src;
}

}  // namespace testing_support
