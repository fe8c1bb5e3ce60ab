#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "seqchat/corpus.hpp"

namespace seqchat {

struct ModelConfig {
  std::size_t vocab_size = 6286;
  std::size_t embedding_size = 1024;
  std::size_t rnn_size = 1024;
  std::size_t num_layers = 1;
  double keep_probability = 0.7;
  std::size_t batch_size = 32;
  double learning_rate = 0.001;
  double min_learning_rate = 0.0001;
  double learning_rate_decay = 0.9;
  std::size_t epochs = 50;
  std::size_t beam_width = 1;
  std::vector<Bucket> buckets = default_buckets();
  bool reverse_source = true;

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Hyperparameter columns of the three reference configurations.
ModelConfig preset(std::string_view name);
std::vector<std::string> preset_names();

// Applies one key=value setting; throws std::invalid_argument for unknown keys
// or unparseable values.
void apply_setting(ModelConfig& config, std::string_view key, std::string_view value);
bool is_model_key(std::string_view key);

// Flat "key=value" lines, '#' comments allowed.
std::map<std::string, std::string> read_key_values(std::istream& in);
void write_config(std::ostream& out, const ModelConfig& config);

}  // namespace seqchat
