#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>

#include "seqchat/config.hpp"
#include "seqchat/corpus.hpp"
#include "seqchat/model.hpp"
#include "seqchat/train.hpp"

namespace seqchat {

struct CorruptCheckpoint : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Vocab vocab;
  Seq2SeqParams<float> params;
  std::optional<AdamState<float>> adam;
  std::size_t epoch = 0;
};

// Layout: "SQC1\n", text header (version, epoch, config key=value lines,
// "vocab N" + N words, optional "adam_t=..."), "tensors N", then N tensor
// blocks, then "end\n".
void write_checkpoint(std::ostream& out, const Checkpoint& cp);
Checkpoint read_checkpoint(std::istream& in);

// Written to a sibling temp file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& cp);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace seqchat
