#include "seqchat/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "seqchat/checkpoint.hpp"
#include "seqchat/service.hpp"
#include "seqchat/train.hpp"

namespace seqchat {

namespace fs = std::filesystem;

namespace {

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << contents;
  if (!out.flush()) throw IoError("failed writing " + path.string());
}

Checkpoint load_or_io_error(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return load_checkpoint(path);
}

// Model settings shared by train (preset -> config file -> flags).
struct ModelFlags {
  std::string preset = "config3";
  std::optional<std::string> config_file;
  std::optional<std::size_t> epochs, batch_size, embedding_size, rnn_size, beam;
  std::optional<double> keep_prob;
  std::optional<std::string> buckets;
  std::optional<bool> reverse_source;

  void add_to(CLI::App& app) {
    app.add_option("--preset", preset, "Hyperparameter preset: config1, config2 or config3")->capture_default_str();
    app.add_option("--config", config_file, "key=value file overriding the preset");
    app.add_option("--epochs", epochs, "Training epochs");
    app.add_option("--batch-size", batch_size, "Batch size");
    app.add_option("--embedding-size", embedding_size, "Embedding size");
    app.add_option("--rnn-size", rnn_size, "LSTM hidden size");
    app.add_option("--keep-prob", keep_prob, "Dropout keep probability");
    app.add_option("--beam", beam, "Beam width stored in the checkpoint");
    app.add_option("--buckets", buckets, "Bucket list, e.g. \"5,10;10,15;20,25;40,50\"");
    app.add_option("--reverse-source", reverse_source, "Whether the dataset sources are reversed (true/false)");
  }

  ModelConfig resolve() const {
    ModelConfig c = seqchat::preset(preset);
    if (config_file) {
      auto in = open_in(*config_file);
      for (const auto& [k, v] : read_key_values(in)) apply_setting(c, k, v);
    }
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (embedding_size) c.embedding_size = *embedding_size;
    if (rnn_size) c.rnn_size = *rnn_size;
    if (keep_prob) c.keep_probability = *keep_prob;
    if (beam) c.beam_width = *beam;
    if (buckets) c.buckets = parse_buckets(*buckets);
    if (reverse_source) c.reverse_source = *reverse_source;
    return c;
  }
};

// ---- preprocess --------------------------------------------------------------------

struct PreprocessArgs {
  fs::path lines, conversations, out = "data";
  std::size_t min_len = 2, max_len = 5, keep_n = 6282;
  std::string buckets = format_buckets(default_buckets());
  bool reverse_source = true;
  std::string separator{kDefaultSeparator};
};

int cmd_preprocess(const PreprocessArgs& a, std::ostream& out, std::ostream& err) {
  auto lines = open_in(a.lines, std::ios::binary);
  auto convs = open_in(a.conversations, std::ios::binary);
  PreprocessOptions o;
  o.separator = a.separator;
  o.min_len = a.min_len;
  o.max_len = a.max_len;
  o.keep_n = a.keep_n;
  o.buckets = parse_buckets(a.buckets);
  o.reverse_source = a.reverse_source;
  const auto r = preprocess(lines, convs, o);

  fs::create_directories(a.out);
  std::ostringstream dataset, vocab;
  write_dataset(dataset, r.dataset);
  write_vocab(vocab, r.vocab);
  write_file(a.out / "dataset.txt", dataset.str());
  write_file(a.out / "vocab.txt", vocab.str());

  const auto& s = r.stats;
  if (s.skipped_lines) err << "warning: skipped " << s.skipped_lines << " unreadable utterance lines\n";
  if (s.malformed_conversations) {
    err << "warning: dropped " << s.malformed_conversations << " conversations referencing unknown lines\n";
  }
  out << "raw utterances:      " << s.raw_utterances << '\n'
      << "conversations:       " << s.conversations << '\n'
      << "pairs:               " << s.pairs << '\n'
      << "filtered pairs:      " << s.filtered_pairs << '\n'
      << "discarded by bucket: " << s.discarded_by_bucket << '\n'
      << "encoded pairs:       " << s.encoded_pairs << '\n'
      << "vocab size:          " << s.vocab_size << '\n'
      << "wrote " << (a.out / "dataset.txt").string() << " and " << (a.out / "vocab.txt").string() << '\n';
  return kExitOk;
}

// ---- train -------------------------------------------------------------------------

struct TrainArgs {
  fs::path dataset, vocab, out = "run";
  std::uint64_t seed = 1;
  std::optional<std::size_t> holdout;
  ModelFlags model;
};

std::string format_row(const EpochReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << (r.epoch + 1) << ' ' << r.train_loss << ' ';
  if (std::isnan(r.validation_loss)) os << "nan";
  else os << r.validation_loss;
  os << ' ' << std::setprecision(8) << r.learning_rate << ' ' << std::setprecision(3) << r.seconds;
  return os.str();
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  auto din = open_in(a.dataset, std::ios::binary);
  const auto dataset = read_dataset(din);
  auto vin = open_in(a.vocab, std::ios::binary);
  const auto vocab = read_vocab(vin);
  if (vocab.size() != dataset.vocab_size) {
    throw VocabMismatch("vocab file has " + std::to_string(vocab.size()) + " words but the dataset expects " +
                        std::to_string(dataset.vocab_size));
  }

  ModelConfig config = a.model.resolve();
  config.vocab_size = dataset.vocab_size;
  if (a.model.buckets && config.buckets != dataset.buckets) {
    throw std::invalid_argument("--buckets differs from the dataset's buckets (" + format_buckets(dataset.buckets) +
                                ")");
  }
  config.buckets = dataset.buckets;
  config.validate();

  fs::create_directories(a.out);
  std::ofstream report(a.out / "report.txt", std::ios::trunc);
  if (!report) throw IoError("cannot write " + (a.out / "report.txt").string());
  report << "epoch train_loss validation_loss learning_rate seconds\n";

  TrainOptions o;
  o.seed = a.seed;
  o.holdout = a.holdout;
  o.checkpoint_dir = a.out;
  o.vocab = vocab;
  o.on_epoch = [&](const EpochReport& r) {
    const auto row = format_row(r);
    report << row << '\n' << std::flush;
    out << "epoch " << row << '\n' << std::flush;
  };
  out << "training " << dataset.pairs.size() << " pairs, vocab " << config.vocab_size << ", embed "
      << config.embedding_size << ", rnn " << config.rnn_size << ", batch " << config.batch_size << ", epochs "
      << config.epochs << ", seed " << a.seed << '\n';
  const auto result = train(dataset.pairs, config, o);
  if (!result.report.epochs.empty()) {
    out << "final loss " << std::fixed << std::setprecision(6) << result.report.epochs.back().train_loss << '\n';
  }
  out << "checkpoints in " << a.out.string() << '\n';
  return kExitOk;
}

// ---- eval --------------------------------------------------------------------------

struct EvalArgs {
  fs::path dataset, checkpoint;
  std::size_t batch_size = 64;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto cp = load_or_io_error(a.checkpoint);
  auto din = open_in(a.dataset, std::ios::binary);
  const auto dataset = read_dataset(din);
  if (dataset.vocab_size != cp.config.vocab_size) {
    throw VocabMismatch("dataset vocab size " + std::to_string(dataset.vocab_size) + " does not match checkpoint " +
                        std::to_string(cp.config.vocab_size));
  }
  const auto r = evaluate(cp.params, dataset.pairs, a.batch_size);
  out << std::fixed << std::setprecision(6) << "pairs " << dataset.pairs.size() << '\n'
      << "tokens " << r.tokens << '\n'
      << "loss " << r.mean_loss << '\n'
      << "perplexity " << r.perplexity << '\n'
      << "token_accuracy " << r.token_accuracy << '\n';
  return kExitOk;
}

// ---- chat --------------------------------------------------------------------------

struct ChatArgs {
  fs::path checkpoint;
  std::optional<std::size_t> beam;
};

int cmd_chat(const ChatArgs& a, std::ostream& out, std::istream& in) {
  const auto model = ChatModel::from_checkpoint(load_or_io_error(a.checkpoint), a.beam);
  std::string line;
  while (true) {
    out << "Human: " << std::flush;
    if (!std::getline(in, line)) break;
    if (line == "/quit") break;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out << "Bot: " << handle_reply(ReplyRequest{line, std::nullopt}, &model).reply << '\n';
    } catch (const BadRequest& e) {
      out << "Bot: (" << e.what() << ")\n";
    }
  }
  out << '\n';
  return kExitOk;
}

// ---- serve -------------------------------------------------------------------------

struct ServeArgs {
  fs::path checkpoint;
  std::string bind = "127.0.0.1:8080";
  std::optional<std::size_t> beam;
  std::size_t max_in_flight = 4;
  std::optional<fs::path> transcript, web_root;
};

int cmd_serve(const ServeArgs& a, std::ostream& out) {
  ServeOptions o;
  std::tie(o.host, o.port) = parse_bind_address(a.bind);
  if (!fs::exists(a.checkpoint)) throw IoError("checkpoint not found: " + a.checkpoint.string());
  o.checkpoint = a.checkpoint;
  o.beam_width = a.beam;
  o.max_in_flight = a.max_in_flight;
  o.transcript = a.transcript;
  o.web_root = a.web_root;
  serve(o, out);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, std::istream& in) {
  CLI::App app{"seqchat: sequence-to-sequence chatbot with attention", "seqchat"};
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* pre_cmd = app.add_subcommand("preprocess", "Turn the movie-dialog corpus into dataset and vocab files");
  pre_cmd->add_option("--lines", pre.lines, "movie_lines.txt")->required();
  pre_cmd->add_option("--conversations", pre.conversations, "movie_conversations.txt")->required();
  pre_cmd->add_option("--out", pre.out, "Output directory")->capture_default_str();
  pre_cmd->add_option("--min-len", pre.min_len, "Minimum tokens per side")->capture_default_str();
  pre_cmd->add_option("--max-len", pre.max_len, "Maximum tokens per side")->capture_default_str();
  pre_cmd->add_option("--keep-n", pre.keep_n, "Number of corpus words kept in the vocabulary")->capture_default_str();
  pre_cmd->add_option("--buckets", pre.buckets, "Bucket list")->capture_default_str();
  pre_cmd->add_option("--reverse-source", pre.reverse_source, "Reverse source tokens (true/false)")
      ->capture_default_str();
  pre_cmd->add_option("--separator", pre.separator, "Field separator")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a preprocessed dataset");
  train_cmd->add_option("--dataset", tr.dataset, "dataset.txt")->required();
  train_cmd->add_option("--vocab", tr.vocab, "vocab.txt")->required();
  train_cmd->add_option("--out", tr.out, "Run directory for checkpoints and report.txt")->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Random seed")->capture_default_str();
  train_cmd->add_option("--holdout", tr.holdout, "Validation pairs held out (default: batch size)");
  tr.model.add_to(*train_cmd);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Teacher-forced perplexity and token accuracy");
  eval_cmd->add_option("--dataset", ev.dataset, "dataset.txt")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--batch-size", ev.batch_size, "Evaluation batch size")->capture_default_str();

  ChatArgs ch;
  auto* chat_cmd = app.add_subcommand("chat", "Talk to a model in the terminal (/quit to exit)");
  chat_cmd->add_option("--checkpoint", ch.checkpoint, "Checkpoint file")->required();
  chat_cmd->add_option("--beam", ch.beam, "Beam width (default: from checkpoint)");

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP chat service");
  serve_cmd->add_option("--checkpoint", sv.checkpoint, "Checkpoint file")->required();
  serve_cmd->add_option("--bind", sv.bind, "host:port")->capture_default_str();
  serve_cmd->add_option("--beam", sv.beam, "Beam width (default: from checkpoint)");
  serve_cmd->add_option("--max-in-flight", sv.max_in_flight, "Concurrent decodes")->capture_default_str();
  serve_cmd->add_option("--transcript", sv.transcript, "Append a JSON-lines transcript here");
  serve_cmd->add_option("--web-root", sv.web_root, "Directory with the browser client");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*pre_cmd) return cmd_preprocess(pre, out, err);
    if (*train_cmd) return cmd_train(tr, out);
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*chat_cmd) return cmd_chat(ch, out, in);
    if (*serve_cmd) return cmd_serve(sv, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CorruptCheckpoint& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const BindError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const VocabMismatch& e) {
    err << "error: vocabulary mismatch: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const Diverged& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace seqchat
