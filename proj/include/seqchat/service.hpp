#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "seqchat/checkpoint.hpp"
#include "seqchat/decode.hpp"

namespace seqchat {

inline constexpr std::string_view kFallbackReply = "Sorry, I dint understand your context";
inline constexpr std::size_t kMaxRequestChars = 2000;

struct BadRequest : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ModelNotLoaded : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BindError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ReplyRequest {
  std::string text;
  std::optional<std::string> session_id;
};

struct ReplyResponse {
  std::string reply;
  bool fallback_used = false;
  double latency_ms = 0.0;
};

// A loaded checkpoint plus inference settings. Shared read-only by every
// request.
struct ChatModel {
  Checkpoint checkpoint;
  DecodeConfig decode;
  // Inputs with more than this fraction of out-of-vocabulary tokens get the
  // fallback reply.
  double max_unk_ratio = 0.5;

  // beam_width comes from the checkpoint config unless overridden; max_steps is
  // the largest bucket's target capacity.
  static ChatModel from_checkpoint(Checkpoint cp, std::optional<std::size_t> beam_override = std::nullopt);
};

// clean -> tokenize -> smallest source-fitting bucket -> beam search ->
// postprocess. Falls back to kFallbackReply when no bucket fits, more than
// max_unk_ratio of tokens are unknown, or the decoded reply is empty.
// Throws BadRequest for empty or oversize text, ModelNotLoaded for a null model.
ReplyResponse handle_reply(const ReplyRequest& request, const ChatModel* model);

// Number of Unicode code points (invalid bytes count as one each).
std::size_t utf8_length(std::string_view text);

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint;
  std::optional<std::size_t> beam_width;
  std::size_t max_in_flight = 4;
  std::optional<std::filesystem::path> transcript;
  // Directory holding the browser client (index.html, script, stylesheet).
  std::optional<std::filesystem::path> web_root;
};

// "host:port" -> (host, port). Throws std::invalid_argument.
std::pair<std::string, int> parse_bind_address(std::string_view address);

class ChatService {
 public:
  ChatService(std::shared_ptr<const ChatModel> model, ServeOptions options);
  ~ChatService();
  ChatService(const ChatService&) = delete;
  ChatService& operator=(const ChatService&) = delete;

  // Binds the listening socket; port 0 picks a free port. Returns the port.
  int bind();
  // Serves until stop() is called.
  void run();
  // Safe from any thread, including before run() has started.
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Loads the checkpoint, binds, and serves until SIGINT/SIGTERM.
void serve(const ServeOptions& options, std::ostream& log);

}  // namespace seqchat
