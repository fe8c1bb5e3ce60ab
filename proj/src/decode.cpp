#include "seqchat/decode.hpp"

namespace seqchat {

std::string postprocess_reply(std::span<const int> token_ids, const Vocab& vocab) {
  std::string out;
  for (int id : token_ids) {
    if (id == kEos) break;
    if (id == kPad || id == kGo) continue;
    const std::string& word = vocab.word_of(id);
    const bool attach = word.size() == 1 && (word[0] == '.' || word[0] == ',' || word[0] == '?' || word[0] == '!');
    if (!out.empty() && !attach) out.push_back(' ');
    out += word;
  }
  return out;
}

}  // namespace seqchat
