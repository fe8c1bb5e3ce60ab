#include "seqchat/service.hpp"

#include <csignal>
#include <sys/socket.h>
#include <pthread.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <semaphore>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace seqchat {

using nlohmann::json;

namespace {

constexpr const char* kBuiltinIndex = R"(<!doctype html>
<html lang="en"><head><meta charset="utf-8"><title>seqchat</title></head>
<body><p>The chat client bundle is not installed. Start the server with
<code>--web-root</code> pointing at the built client, or talk to
<code>POST /api/reply</code> directly.</p></body></html>
)";

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
  return os.str();
}

std::string dump(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

ReplyResponse fallback(std::chrono::steady_clock::time_point start) {
  ReplyResponse r;
  r.reply = std::string(kFallbackReply);
  r.fallback_used = true;
  r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (char c : text) n += (static_cast<unsigned char>(c) & 0xC0) != 0x80 ? 1 : 0;
  return n;
}

ChatModel ChatModel::from_checkpoint(Checkpoint cp, std::optional<std::size_t> beam_override) {
  ChatModel m;
  m.decode.beam_width = beam_override.value_or(cp.config.beam_width);
  if (m.decode.beam_width < 1) throw std::invalid_argument("beam width must be >= 1");
  std::size_t max_tgt = 0;
  for (const auto& b : cp.config.buckets) max_tgt = std::max(max_tgt, b.tgt_cap);
  m.decode.max_steps = max_tgt;
  m.checkpoint = std::move(cp);
  return m;
}

ReplyResponse handle_reply(const ReplyRequest& request, const ChatModel* model) {
  if (request.text.find_first_not_of(" \t\r\n") == std::string::npos) throw BadRequest("text must not be empty");
  if (utf8_length(request.text) > kMaxRequestChars) {
    throw BadRequest("text exceeds " + std::to_string(kMaxRequestChars) + " characters");
  }
  if (model == nullptr) throw ModelNotLoaded("no model is loaded");

  const auto start = std::chrono::steady_clock::now();
  const auto& cp = model->checkpoint;
  const auto tokens = tokenize(clean_text(request.text));
  if (tokens.empty()) return fallback(start);
  const auto bucket = choose_bucket(tokens.size(), std::nullopt, cp.config.buckets);
  if (!bucket) return fallback(start);
  std::size_t unknown = 0;
  for (const auto& t : tokens) unknown += cp.vocab.contains(t) ? 0 : 1;
  if (static_cast<double>(unknown) > model->max_unk_ratio * static_cast<double>(tokens.size())) {
    return fallback(start);
  }

  const auto src = encode_source(tokens, cp.vocab, cp.config.buckets[*bucket].src_cap, cp.config.reverse_source);
  const auto result = beam_search(cp.params, src, model->decode);
  const auto reply = postprocess_reply(result.best, cp.vocab);
  if (reply.empty()) return fallback(start);

  ReplyResponse r;
  r.reply = reply;
  r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::pair<std::string, int> parse_bind_address(std::string_view address) {
  const auto colon = address.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw std::invalid_argument("bind address must look like host:port, got '" + std::string(address) + "'");
  }
  const std::string host(address.substr(0, colon));
  const std::string port_text(address.substr(colon + 1));
  std::size_t used = 0;
  int port = -1;
  try {
    port = std::stoi(port_text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != port_text.size() || port < 0 || port > 65535) {
    throw std::invalid_argument("bad port in bind address '" + std::string(address) + "'");
  }
  return {host, port};
}

// ---- HTTP service ------------------------------------------------------------------

struct ChatService::Impl {
  std::shared_ptr<const ChatModel> model;
  ServeOptions options;
  httplib::Server server;
  std::counting_semaphore<> in_flight;
  std::mutex transcript_mutex;
  std::ofstream transcript;
  // stop() may arrive before run() has started listening.
  std::mutex lifecycle_mutex;
  bool started = false;
  bool stop_requested = false;

  Impl(std::shared_ptr<const ChatModel> m, ServeOptions o)
      : model(std::move(m)), options(std::move(o)), in_flight(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, options.max_in_flight))) {
    if (options.transcript) {
      transcript.open(*options.transcript, std::ios::app);
      if (!transcript) throw std::runtime_error("cannot open transcript log " + options.transcript->string());
    }
    // Large enough that an oversize body reaches the handler and gets a 400.
    server.set_payload_max_length(8u << 20);
    // httplib defaults to SO_REUSEPORT, which lets a second server share an
    // occupied port instead of failing to bind.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    });
    install_routes();
  }

  void log_exchange(const ReplyRequest& req, const ReplyResponse& resp) {
    if (!transcript.is_open()) return;
    json line = {{"timestamp", iso_timestamp()},
                 {"session_id", req.session_id ? json(*req.session_id) : json(nullptr)},
                 {"text", req.text},
                 {"reply", resp.reply},
                 {"fallback_used", resp.fallback_used}};
    std::lock_guard lock(transcript_mutex);
    transcript << dump(line) << '\n';
    transcript.flush();
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(dump(json{{"error", message}}), "application/json");
  }

  void install_routes() {
    server.Post("/api/reply", [this](const httplib::Request& req, httplib::Response& res) {
      ReplyRequest request;
      try {
        const auto body = json::parse(req.body);
        if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
          return send_error(res, 400, "body must be a JSON object with a string 'text'");
        }
        request.text = body["text"].get<std::string>();
        if (body.contains("session_id") && !body["session_id"].is_null()) {
          if (!body["session_id"].is_string()) return send_error(res, 400, "'session_id' must be a string");
          request.session_id = body["session_id"].get<std::string>();
        }
      } catch (const json::exception& e) {
        return send_error(res, 400, std::string("invalid JSON: ") + e.what());
      }
      try {
        in_flight.acquire();
        struct Release {
          std::counting_semaphore<>& s;
          ~Release() { s.release(); }
        } release{in_flight};
        const auto response = handle_reply(request, model.get());
        log_exchange(request, response);
        res.set_content(dump(json{{"reply", response.reply},
                                  {"fallback_used", response.fallback_used},
                                  {"latency_ms", response.latency_ms}}),
                        "application/json");
      } catch (const BadRequest& e) {
        send_error(res, 400, e.what());
      } catch (const ModelNotLoaded& e) {
        send_error(res, 503, e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });

    server.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
      if (!model) return send_error(res, 503, "no model is loaded");
      json body = {{"status", "ok"},
                   {"vocab_size", model->checkpoint.vocab.size()},
                   {"checkpoint", options.checkpoint.string()},
                   {"beam_width", model->decode.beam_width}};
      res.set_content(dump(body), "application/json");
    });

    bool mounted = false;
    if (options.web_root && std::filesystem::is_directory(*options.web_root)) {
      mounted = server.set_mount_point("/", options.web_root->string());
    }
    if (!mounted) {
      server.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(kBuiltinIndex, "text/html; charset=utf-8");
      });
    }
  }
};

ChatService::ChatService(std::shared_ptr<const ChatModel> model, ServeOptions options)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(options))) {}

ChatService::~ChatService() { stop(); }

int ChatService::bind() {
  const auto& o = impl_->options;
  int port = o.port;
  if (port == 0) {
    port = impl_->server.bind_to_any_port(o.host);
    if (port < 0) throw BindError("cannot bind " + o.host + ":0");
  } else if (!impl_->server.bind_to_port(o.host, port)) {
    throw BindError("cannot bind " + o.host + ":" + std::to_string(port));
  }
  return port;
}

void ChatService::run() {
  {
    std::lock_guard lock(impl_->lifecycle_mutex);
    if (impl_->stop_requested) return;
    impl_->started = true;
  }
  impl_->server.listen_after_bind();
}

void ChatService::stop() {
  if (!impl_) return;
  bool started = false;
  {
    std::lock_guard lock(impl_->lifecycle_mutex);
    impl_->stop_requested = true;
    started = impl_->started;
  }
  if (started) {
    impl_->server.wait_until_ready();
    impl_->server.stop();
  }
}

void serve(const ServeOptions& options, std::ostream& log) {
  auto cp = load_checkpoint(options.checkpoint);
  auto model = std::make_shared<const ChatModel>(ChatModel::from_checkpoint(std::move(cp), options.beam_width));

  // Route SIGINT/SIGTERM to a dedicated waiter thread; worker threads inherit
  // the blocked mask.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  sigset_t previous;
  pthread_sigmask(SIG_BLOCK, &signals, &previous);

  ChatService service(model, options);
  const int port = service.bind();
  log << "serving " << options.checkpoint.string() << " on http://" << options.host << ":" << port
      << " (vocab " << model->checkpoint.vocab.size() << ", beam " << model->decode.beam_width << ")" << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    service.stop();
  });
  service.run();
  // Wake the waiter if the server stopped on its own.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  pthread_sigmask(SIG_SETMASK, &previous, nullptr);
  log << "server stopped" << std::endl;
}

}  // namespace seqchat
