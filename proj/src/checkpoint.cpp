#include "seqchat/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace seqchat {

namespace {

constexpr std::string_view kMagic = "SQC1";

std::string next_line(std::istream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) throw CorruptCheckpoint(std::string("checkpoint truncated before ") + what);
  return line;
}

std::string value_after(const std::string& line, std::string_view key) {
  if (line.size() < key.size() + 1 || line.compare(0, key.size(), key) != 0 || line[key.size()] != '=') {
    throw CorruptCheckpoint("checkpoint: expected '" + std::string(key) + "=...', got '" + line + "'");
  }
  return line.substr(key.size() + 1);
}

std::int64_t parse_int(const std::string& text, const char* what) {
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || p != text.data() + text.size()) {
    throw CorruptCheckpoint(std::string("checkpoint: bad ") + what + " '" + text + "'");
  }
  return v;
}

std::size_t parse_count(const std::string& line, std::string_view word) {
  if (line.compare(0, word.size() + 1, std::string(word) + " ") != 0) {
    throw CorruptCheckpoint("checkpoint: expected '" + std::string(word) + " N', got '" + line + "'");
  }
  const auto v = parse_int(line.substr(word.size() + 1), word.data());
  if (v < 0) throw CorruptCheckpoint("checkpoint: negative count");
  return static_cast<std::size_t>(v);
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& cp) {
  out << kMagic << '\n';
  out << "version=" << kCheckpointVersion << '\n';
  out << "epoch=" << cp.epoch << '\n';
  std::ostringstream cfg;
  write_config(cfg, cp.config);
  std::istringstream lines(cfg.str());
  std::size_t n_cfg = 0;
  for (std::string l; std::getline(lines, l);) ++n_cfg;
  out << "config " << n_cfg << '\n' << cfg.str();
  out << "vocab " << cp.vocab.size() << '\n';
  write_vocab(out, cp.vocab);
  out << "adam_t=" << (cp.adam ? cp.adam->t : -1) << '\n';

  std::size_t count = 0;
  cp.params.visit([&](const std::string&, const Matrix<float>&) { ++count; });
  if (cp.adam) count *= 3;
  out << "tensors " << count << '\n';
  cp.params.visit([&](const std::string& name, const Matrix<float>& m) { write_tensor(out, name, m); });
  if (cp.adam) {
    cp.params.visit([&](const std::string& name, const Matrix<float>& p) {
      const auto m = cp.adam->m.find(name);
      const auto v = cp.adam->v.find(name);
      write_tensor(out, "adam.m." + name, m == cp.adam->m.end() ? Matrix<float>(p.rows(), p.cols()) : m->second);
      write_tensor(out, "adam.v." + name, v == cp.adam->v.end() ? Matrix<float>(p.rows(), p.cols()) : v->second);
    });
  }
  out << "end\n";
}

Checkpoint read_checkpoint(std::istream& in) {
  if (next_line(in, "magic") != kMagic) throw CorruptCheckpoint("checkpoint: bad magic (not an SQC1 file)");
  const auto version = parse_int(value_after(next_line(in, "version"), "version"), "version");
  if (version != kCheckpointVersion) {
    throw CorruptCheckpoint("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint cp;
  const auto epoch = parse_int(value_after(next_line(in, "epoch"), "epoch"), "epoch");
  if (epoch < 0) throw CorruptCheckpoint("checkpoint: negative epoch");
  cp.epoch = static_cast<std::size_t>(epoch);

  const auto n_cfg = parse_count(next_line(in, "config"), "config");
  for (std::size_t i = 0; i < n_cfg; ++i) {
    const auto line = next_line(in, "config entries");
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptCheckpoint("checkpoint: bad config line '" + line + "'");
    try {
      apply_setting(cp.config, line.substr(0, eq), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw CorruptCheckpoint(std::string("checkpoint: ") + e.what());
    }
  }
  try {
    cp.config.validate();
  } catch (const std::invalid_argument& e) {
    throw CorruptCheckpoint(std::string("checkpoint: ") + e.what());
  }

  const auto n_vocab = parse_count(next_line(in, "vocab"), "vocab");
  std::vector<std::string> words;
  words.reserve(n_vocab);
  for (std::size_t i = 0; i < n_vocab; ++i) words.push_back(next_line(in, "vocabulary words"));
  try {
    cp.vocab = Vocab(std::move(words));
  } catch (const std::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint: ") + e.what());
  }
  if (cp.vocab.size() != cp.config.vocab_size) {
    throw CorruptCheckpoint("checkpoint: vocabulary has " + std::to_string(cp.vocab.size()) +
                            " words but config says " + std::to_string(cp.config.vocab_size));
  }

  const auto adam_t = parse_int(value_after(next_line(in, "adam_t"), "adam_t"), "adam_t");
  const auto n_tensors = parse_count(next_line(in, "tensors"), "tensors");

  std::map<std::string, Matrix<float>> tensors;
  for (std::size_t i = 0; i < n_tensors; ++i) {
    NamedTensor t;
    try {
      t = read_tensor(in);
    } catch (const std::runtime_error& e) {
      throw CorruptCheckpoint(std::string("checkpoint: ") + e.what());
    }
    if (!tensors.emplace(t.name, std::move(t.value)).second) {
      throw CorruptCheckpoint("checkpoint: duplicate tensor '" + t.name + "'");
    }
  }
  if (next_line(in, "end marker") != "end") throw CorruptCheckpoint("checkpoint: missing end marker");

  // Shapes come from the stored config.
  const auto expected = zero_params<float>(cp.config);
  cp.params = expected;
  auto take = [&](const std::string& name, Matrix<float>& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CorruptCheckpoint("checkpoint: missing tensor '" + name + "'");
    if (!it->second.same_shape(dst)) {
      throw CorruptCheckpoint("checkpoint: tensor '" + name + "' has shape " +
                              shape_string(it->second.rows(), it->second.cols()) + ", expected " +
                              shape_string(dst.rows(), dst.cols()));
    }
    dst = std::move(it->second);
    tensors.erase(it);
  };
  cp.params.visit([&](const std::string& name, Matrix<float>& m) { take(name, m); });
  if (adam_t >= 0) {
    AdamState<float> st;
    st.t = adam_t;
    expected.visit([&](const std::string& name, const Matrix<float>& shape) {
      Matrix<float> m = shape, v = shape;
      take("adam.m." + name, m);
      take("adam.v." + name, v);
      st.m.emplace(name, std::move(m));
      st.v.emplace(name, std::move(v));
    });
    cp.adam = std::move(st);
  }
  if (!tensors.empty()) throw CorruptCheckpoint("checkpoint: unexpected tensor '" + tensors.begin()->first + "'");
  return cp;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& cp) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    write_checkpoint(out, cp);
    out.flush();
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptCheckpoint("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace seqchat
