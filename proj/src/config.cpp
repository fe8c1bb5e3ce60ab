#include "seqchat/config.hpp"

#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace seqchat {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw std::invalid_argument("config key '" + std::string(key) + "': expected an integer, got '" +
                                std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  // from_chars for double is not available on every toolchain we build on.
  std::string s(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || !std::isfinite(out)) {
    throw std::invalid_argument("config key '" + std::string(key) + "': expected a number, got '" + s + "'");
  }
  return out;
}

bool parse_flag(std::string_view key, std::string_view v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + std::string(key) + "': expected a boolean, got '" +
                              std::string(v) + "'");
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("invalid model config: ") + what);
  };
  require(vocab_size >= static_cast<std::size_t>(kNumSpecials), "vocab_size must include the 4 special tokens");
  require(embedding_size >= 1, "embedding_size must be >= 1");
  require(rnn_size >= 1, "rnn_size must be >= 1");
  require(num_layers == 1, "only num_layers = 1 is implemented");
  require(keep_probability > 0.0 && keep_probability <= 1.0, "keep_probability must be in (0, 1]");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate > 0.0, "learning_rate must be > 0");
  require(min_learning_rate > 0.0 && min_learning_rate <= learning_rate,
          "min_learning_rate must be in (0, learning_rate]");
  require(learning_rate_decay > 0.0 && learning_rate_decay <= 1.0, "learning_rate_decay must be in (0, 1]");
  require(beam_width >= 1, "beam_width must be >= 1");
  validate_buckets(buckets);
}

ModelConfig preset(std::string_view name) {
  ModelConfig c;
  c.learning_rate = 0.001;
  c.min_learning_rate = 0.0001;
  c.learning_rate_decay = 0.9;
  if (name == "config1") {
    c.batch_size = 128;
    c.embedding_size = 128;
    c.rnn_size = 128;
    c.epochs = 500;
    c.keep_probability = 0.75;
  } else if (name == "config2") {
    c.batch_size = 512;
    c.embedding_size = 512;
    c.rnn_size = 512;
    c.epochs = 100;
    c.keep_probability = 0.75;
  } else if (name == "config3") {
    c.batch_size = 32;
    c.embedding_size = 1024;
    c.rnn_size = 1024;
    c.epochs = 50;
    c.keep_probability = 0.7;
  } else {
    throw std::invalid_argument("unknown preset '" + std::string(name) + "' (expected config1, config2 or config3)");
  }
  return c;
}

std::vector<std::string> preset_names() { return {"config1", "config2", "config3"}; }

bool is_model_key(std::string_view key) {
  static constexpr std::string_view keys[] = {
      "vocab_size",        "embedding_size",      "rnn_size", "num_layers", "keep_probability",
      "batch_size",        "learning_rate",       "min_learning_rate",      "learning_rate_decay",
      "epochs",            "beam_width",          "buckets",  "reverse_source"};
  for (auto k : keys) {
    if (k == key) return true;
  }
  return false;
}

void apply_setting(ModelConfig& c, std::string_view key, std::string_view raw) {
  const auto v = trim(raw);
  if (key == "vocab_size") c.vocab_size = parse_size(key, v);
  else if (key == "embedding_size") c.embedding_size = parse_size(key, v);
  else if (key == "rnn_size") c.rnn_size = parse_size(key, v);
  else if (key == "num_layers") c.num_layers = parse_size(key, v);
  else if (key == "keep_probability") c.keep_probability = parse_real(key, v);
  else if (key == "batch_size") c.batch_size = parse_size(key, v);
  else if (key == "learning_rate") c.learning_rate = parse_real(key, v);
  else if (key == "min_learning_rate") c.min_learning_rate = parse_real(key, v);
  else if (key == "learning_rate_decay") c.learning_rate_decay = parse_real(key, v);
  else if (key == "epochs") c.epochs = parse_size(key, v);
  else if (key == "beam_width") c.beam_width = parse_size(key, v);
  else if (key == "buckets") c.buckets = parse_buckets(v);
  else if (key == "reverse_source") c.reverse_source = parse_flag(key, v);
  else throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
}

std::map<std::string, std::string> read_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const auto key = trim(view.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
    out[std::string(key)] = std::string(trim(view.substr(eq + 1)));
  }
  return out;
}

void write_config(std::ostream& out, const ModelConfig& c) {
  out << "vocab_size=" << c.vocab_size << '\n'
      << "embedding_size=" << c.embedding_size << '\n'
      << "rnn_size=" << c.rnn_size << '\n'
      << "num_layers=" << c.num_layers << '\n'
      << "keep_probability=" << format_real(c.keep_probability) << '\n'
      << "batch_size=" << c.batch_size << '\n'
      << "learning_rate=" << format_real(c.learning_rate) << '\n'
      << "min_learning_rate=" << format_real(c.min_learning_rate) << '\n'
      << "learning_rate_decay=" << format_real(c.learning_rate_decay) << '\n'
      << "epochs=" << c.epochs << '\n'
      << "beam_width=" << c.beam_width << '\n'
      << "buckets=" << format_buckets(c.buckets) << '\n'
      << "reverse_source=" << (c.reverse_source ? "true" : "false") << '\n';
}

}  // namespace seqchat
