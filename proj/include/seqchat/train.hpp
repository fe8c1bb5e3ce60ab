#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqchat/config.hpp"
#include "seqchat/corpus.hpp"
#include "seqchat/model.hpp"
#include "seqchat/tape.hpp"

namespace seqchat {

struct Diverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- Adam --------------------------------------------------------------------------

template <class T>
struct AdamState {
  std::map<std::string, Matrix<T>> m;
  std::map<std::string, Matrix<T>> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam step over every tensor of `params` (anything with a
// visit(name, Matrix&) member). Missing moment tensors start at zero.
template <class T, class Params>
void adam_update(Params& params, const Gradients<T>& grads, AdamState<T>& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_update: learning rate must be > 0");
  // Validate everything first so a failure leaves params and state untouched.
  params.visit([&](const std::string& name, const Matrix<T>& p) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw ShapeMismatch("adam_update: no gradient for '" + name + "'");
    require_same_shape(p, it->second, "adam_update");
  });
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  params.visit([&](const std::string& name, Matrix<T>& p) {
    const auto& g = grads.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m = Matrix<T>(p.rows(), p.cols());
    if (v.empty()) v = Matrix<T>(p.rows(), p.cols());
    require_same_shape(p, m, "adam_update (first moment)");
    require_same_shape(p, v, "adam_update (second moment)");
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const double m_hat = static_cast<double>(m[i]) / c1;
      const double v_hat = static_cast<double>(v[i]) / c2;
      p[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  });
}

// Scales all gradients so their joint L2 norm is at most max_norm. Returns the
// norm before clipping.
template <class T>
double clip_global_norm(Gradients<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (T x : g.data()) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T k = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads) {
      for (T& x : g.data()) x *= k;
    }
  }
  return norm;
}

// lr = max(min_learning_rate, learning_rate * decay^epoch)
double lr_schedule(std::size_t epoch, const ModelConfig& config);

// ---- training ----------------------------------------------------------------------

struct EpochReport {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;  // NaN when nothing is held out
  double learning_rate = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochReport> epochs;
};

struct TrainOptions {
  std::uint64_t seed = 1;
  // Pairs held out for validation; defaults to batch_size.
  std::optional<std::size_t> holdout;
  double clip_norm = 5.0;
  // When set, "last.sqc" is written every epoch and "best.sqc" at each new
  // best validation (or training, without a holdout) loss.
  std::optional<std::filesystem::path> checkpoint_dir;
  Vocab vocab;  // stored in checkpoints
  std::function<void(const EpochReport&)> on_epoch;
};

struct TrainResult {
  Seq2SeqParams<float> params;
  AdamState<float> adam;
  TrainReport report;
  std::vector<TokenizedPair> train_pairs;
  std::vector<TokenizedPair> validation_pairs;
};

// Shuffled holdout split followed by per-epoch seeded batching, teacher-forced
// forward/backward, clipping and Adam. Throws Diverged on a non-finite loss
// (the last good checkpoint stays on disk).
TrainResult train(const std::vector<TokenizedPair>& dataset, const ModelConfig& config, const TrainOptions& options);

// Continues from existing parameters/optimizer state for `config.epochs` more
// epochs, numbering them from `first_epoch`.
TrainResult train_from(Seq2SeqParams<float> params, AdamState<float> adam, std::size_t first_epoch,
                       const std::vector<TokenizedPair>& dataset, const ModelConfig& config,
                       const TrainOptions& options);

// ---- evaluation --------------------------------------------------------------------

struct EvalResult {
  double mean_loss = 0.0;
  double perplexity = 0.0;
  double token_accuracy = 0.0;  // argmax == target over non-PAD targets
  std::size_t tokens = 0;
};

// Teacher-forced, no dropout.
template <class T>
EvalResult evaluate(const Seq2SeqParams<T>& params, const std::vector<TokenizedPair>& pairs,
                    std::size_t batch_size = 64) {
  if (pairs.empty()) throw EmptyDataset("evaluate: no pairs");
  double loss_sum = 0.0;
  std::size_t tokens = 0, correct = 0;
  const auto batches = batch_dataset(pairs, batch_size, 0);
  for (const auto& batch : batches) {
    Tape<T> tape;
    auto vars = bind(tape, params);
    Dropout none;
    auto fwd = forward_teacher_forced(tape, vars, batch.pairs, none);
    std::size_t n = 0;
    std::size_t row = 0;
    for (Var step : fwd.logits) {
      const auto& lv = tape.value(step);
      for (std::size_t r = 0; r < lv.rows(); ++r, ++row) {
        if (fwd.target_mask[row]) continue;
        ++n;
        auto lr = lv.row(r);
        const auto arg = static_cast<int>(std::max_element(lr.begin(), lr.end()) - lr.begin());
        correct += arg == fwd.targets[row] ? 1 : 0;
      }
    }
    loss_sum += static_cast<double>(tape.value(fwd.loss)[0]) * static_cast<double>(n);
    tokens += n;
  }
  EvalResult r;
  r.tokens = tokens;
  r.mean_loss = tokens ? loss_sum / static_cast<double>(tokens) : 0.0;
  r.perplexity = std::exp(r.mean_loss);
  r.token_accuracy = tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
  return r;
}

// ---- gradient check ----------------------------------------------------------------

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  std::size_t batch = 2;
  std::size_t src_len = 3;
  std::size_t tgt_len = 4;
  // Every target after GO is PAD: the loss is identically zero.
  bool degenerate = false;
  Tape<double>::Fault fault = Tape<double>::Fault::none;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t entries = 0;
};

// Compares tape gradients against central differences for every parameter
// entry of a model built from `config_small` in 64-bit precision.
GradCheckResult grad_check(const ModelConfig& config_small, std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace seqchat
