#include "seqchat/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include "seqchat/checkpoint.hpp"

namespace seqchat {

double lr_schedule(std::size_t epoch, const ModelConfig& config) {
  const double decayed = config.learning_rate * std::pow(config.learning_rate_decay, static_cast<double>(epoch));
  return std::max(config.min_learning_rate, decayed);
}

namespace {

// Mixes the run seed with a purpose tag so each stream is independent.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double validation_loss(const Seq2SeqParams<float>& params, const std::vector<TokenizedPair>& pairs,
                       std::size_t batch_size) {
  if (pairs.empty()) return std::numeric_limits<double>::quiet_NaN();
  return evaluate(params, pairs, batch_size).mean_loss;
}

void write_checkpoint_file(const std::filesystem::path& path, const ModelConfig& config, const Vocab& vocab,
                           const Seq2SeqParams<float>& params, const AdamState<float>& adam, std::size_t epoch) {
  Checkpoint cp;
  cp.config = config;
  cp.vocab = vocab;
  cp.params = params;
  cp.adam = adam;
  cp.epoch = epoch;
  save_checkpoint(path, cp);
}

}  // namespace

TrainResult train(const std::vector<TokenizedPair>& dataset, const ModelConfig& config, const TrainOptions& options) {
  config.validate();
  return train_from(init_params<float>(config, derive_seed(options.seed, 0)), AdamState<float>{}, 0, dataset,
                    config, options);
}

TrainResult train_from(Seq2SeqParams<float> params, AdamState<float> adam, std::size_t first_epoch,
                       const std::vector<TokenizedPair>& dataset, const ModelConfig& config,
                       const TrainOptions& options) {
  config.validate();
  if (dataset.empty()) throw EmptyDataset("train: dataset is empty");
  for (const auto& p : dataset) {
    for (int id : p.src_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) throw IndexOutOfVocab("train: source id outside vocabulary");
    }
    for (int id : p.tgt_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) throw IndexOutOfVocab("train: target id outside vocabulary");
    }
  }

  TrainResult result;
  result.params = std::move(params);
  result.adam = std::move(adam);

  // Hold out a seeded sample for validation.
  std::vector<TokenizedPair> shuffled = dataset;
  std::mt19937_64 split_rng(derive_seed(options.seed, 1));
  deterministic_shuffle(shuffled.begin(), shuffled.end(), split_rng);
  const std::size_t holdout = std::min(options.holdout.value_or(config.batch_size), shuffled.size() - 1);
  result.validation_pairs.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(holdout));
  result.train_pairs.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(holdout), shuffled.end());

  std::mt19937_64 dropout_rng(derive_seed(options.seed, 2));
  Dropout dropout{config.keep_probability, &dropout_rng};

  const auto& dir = options.checkpoint_dir;
  if (dir) {
    if (options.vocab.size() != config.vocab_size) {
      throw std::invalid_argument("train: checkpoint vocabulary has " + std::to_string(options.vocab.size()) +
                                  " words but vocab_size is " + std::to_string(config.vocab_size));
    }
    std::filesystem::create_directories(*dir);
  }
  auto save = [&](const char* file, std::size_t epoch) {
    if (dir) write_checkpoint_file(*dir / file, config, options.vocab, result.params, result.adam, epoch);
  };

  if (config.epochs == 0) {
    save("last.sqc", first_epoch);
    save("best.sqc", first_epoch);
    return result;
  }

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const std::size_t epoch = first_epoch + e;
    const auto start = std::chrono::steady_clock::now();
    EpochReport row;
    row.epoch = epoch;
    row.learning_rate = lr_schedule(epoch, config);

    const auto batches = batch_dataset(result.train_pairs, config.batch_size, derive_seed(options.seed, 100 + epoch));
    double loss_sum = 0.0;
    std::size_t loss_weight = 0;
    for (const auto& batch : batches) {
      Tape<float> tape;
      const auto vars = bind(tape, result.params);
      const auto fwd = forward_teacher_forced(tape, vars, batch.pairs, dropout);
      const double loss = tape.value(fwd.loss)[0];
      if (!std::isfinite(loss)) {
        throw Diverged("training diverged at epoch " + std::to_string(epoch) + ": loss is " + std::to_string(loss));
      }
      auto grads = backward(tape, fwd.loss);
      const double norm = clip_global_norm(grads, options.clip_norm);
      if (!std::isfinite(norm)) {
        throw Diverged("training diverged at epoch " + std::to_string(epoch) + ": gradient norm is not finite");
      }
      adam_update(result.params, grads, result.adam, row.learning_rate);
      std::size_t tokens = 0;
      for (auto m : fwd.target_mask) tokens += m ? 0 : 1;
      loss_sum += loss * static_cast<double>(tokens);
      loss_weight += tokens;
    }
    row.train_loss = loss_weight ? loss_sum / static_cast<double>(loss_weight) : 0.0;
    row.validation_loss = validation_loss(result.params, result.validation_pairs, config.batch_size);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.report.epochs.push_back(row);

    save("last.sqc", epoch + 1);
    const double tracked = std::isnan(row.validation_loss) ? row.train_loss : row.validation_loss;
    if (tracked < best) {
      best = tracked;
      save("best.sqc", epoch + 1);
    }
    if (options.on_epoch) options.on_epoch(row);
  }
  return result;
}

// ---- gradient check ----------------------------------------------------------------

namespace {

std::vector<TokenizedPair> random_pairs(const ModelConfig& c, const GradCheckOptions& o, std::mt19937_64& rng) {
  auto draw_word = [&] { return kNumSpecials + static_cast<int>(rng() % (c.vocab_size - kNumSpecials)); };
  std::vector<TokenizedPair> pairs;
  for (std::size_t b = 0; b < o.batch; ++b) {
    TokenizedPair p;
    // First example fills the source; the rest carry random amounts of padding.
    const std::size_t src_tokens = b == 0 ? o.src_len : 1 + rng() % o.src_len;
    p.src_ids.assign(o.src_len - src_tokens, kPad);
    for (std::size_t i = 0; i < src_tokens; ++i) p.src_ids.push_back(draw_word());
    p.tgt_ids.push_back(kGo);
    if (!o.degenerate) {
      const std::size_t room = o.tgt_len - 2;
      const std::size_t tgt_tokens = room == 0 ? 0 : 1 + (rng() % room);
      for (std::size_t i = 0; i < tgt_tokens; ++i) p.tgt_ids.push_back(draw_word());
      p.tgt_ids.push_back(kEos);
    }
    p.tgt_ids.resize(o.tgt_len, kPad);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

double loss_of(const Seq2SeqParams<double>& params, const std::vector<TokenizedPair>& pairs) {
  Tape<double> tape;
  const auto vars = bind(tape, params);
  Dropout none;
  const auto fwd = forward_teacher_forced(tape, vars, pairs, none);
  return tape.value(fwd.loss)[0];
}

}  // namespace

GradCheckResult grad_check(const ModelConfig& config_small, std::uint64_t seed, const GradCheckOptions& options) {
  config_small.validate();
  if (options.tgt_len < 2 || options.src_len < 1 || options.batch < 1) {
    throw std::invalid_argument("grad_check: need src_len >= 1, tgt_len >= 2, batch >= 1");
  }
  auto params = init_params<double>(config_small, seed);
  // Non-zero biases so their gradients are exercised away from the init point.
  std::mt19937_64 rng(derive_seed(seed, 7));
  params.visit([&](const std::string& name, Matrix<double>& m) {
    if (name.ends_with(".b") || name == "output.b") {
      for (double& v : m.data()) v += (static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5) * 0.2;
    }
  });
  const auto pairs = random_pairs(config_small, options, rng);

  Gradients<double> analytic;
  {
    Tape<double> tape;
    tape.inject_fault(options.fault);
    const auto vars = bind(tape, params);
    Dropout none;
    const auto fwd = forward_teacher_forced(tape, vars, pairs, none);
    analytic = backward(tape, fwd.loss);
  }

  GradCheckResult result;
  const double eps = options.epsilon;
  // Iterate by name so the perturbed tensor is the live one inside `params`.
  std::vector<std::pair<std::string, Matrix<double>*>> targets;
  params.visit([&](const std::string& name, Matrix<double>& m) { targets.emplace_back(name, &m); });
  for (auto& [name, tensor] : targets) {
    const auto& g = analytic.at(name);
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double orig = (*tensor)[i];
      (*tensor)[i] = orig + eps;
      const double up = loss_of(params, pairs);
      (*tensor)[i] = orig - eps;
      const double down = loss_of(params, pairs);
      (*tensor)[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = g[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.entries;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace seqchat
