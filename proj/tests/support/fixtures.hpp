#pragma once

#include <fstream>
#include <stdexcept>
#include <vector>

#include "common.hpp"
#include "seqchat/checkpoint.hpp"
#include "seqchat/corpus.hpp"
#include "seqchat/train.hpp"

namespace testing_support {

inline seqchat::PreprocessResult fixture_corpus() {
  std::ifstream lines(data_dir() / "fixture" / "movie_lines.txt", std::ios::binary);
  std::ifstream convs(data_dir() / "fixture" / "movie_conversations.txt", std::ios::binary);
  if (!lines || !convs) throw std::runtime_error("fixture corpus missing under " + data_dir().string());
  return seqchat::preprocess(lines, convs, seqchat::PreprocessOptions{});
}

// Overfits the first `pairs` fixture pairs; small enough to train in seconds.
inline seqchat::Checkpoint fixture_checkpoint(std::size_t pairs = 32, std::size_t epochs = 100) {
  auto corpus = fixture_corpus();
  auto& all = corpus.dataset.pairs;
  std::vector<seqchat::TokenizedPair> data(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(pairs, all.size())));
  seqchat::ModelConfig c;
  c.vocab_size = corpus.vocab.size();
  c.embedding_size = 32;
  c.rnn_size = 64;
  c.batch_size = 8;
  c.epochs = epochs;
  c.learning_rate = 0.005;
  c.min_learning_rate = 0.005;
  c.learning_rate_decay = 1.0;
  c.keep_probability = 1.0;
  seqchat::TrainOptions o;
  o.seed = 3;
  o.holdout = 0;
  auto result = seqchat::train(data, c, o);
  seqchat::Checkpoint cp;
  cp.config = c;
  cp.vocab = corpus.vocab;
  cp.params = std::move(result.params);
  cp.adam = std::move(result.adam);
  cp.epoch = epochs;
  return cp;
}

}  // namespace testing_support
