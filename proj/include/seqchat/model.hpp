#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "seqchat/config.hpp"
#include "seqchat/corpus.hpp"
#include "seqchat/tape.hpp"
#include "seqchat/tensor.hpp"

namespace seqchat {

// Energy assigned to padded source positions before the attention softmax.
inline constexpr double kMaskedEnergy = -1e9;

// Fused gate weights, gate order [forget, input, output, candidate].
template <class T>
struct LstmParams {
  Matrix<T> W;  // (4H x input)
  Matrix<T> U;  // (4H x H)
  Matrix<T> b;  // (1 x 4H)
};

template <class T>
struct Seq2SeqParams {
  Matrix<T> embedding;  // (V x E)
  LstmParams<T> enc_fwd;
  LstmParams<T> enc_bwd;
  LstmParams<T> dec;    // input is [embedding ; context]
  Matrix<T> attn_W;     // (H x H), applied to the previous decoder state
  Matrix<T> attn_U;     // (H x 2H), applied to encoder states
  Matrix<T> attn_v;     // (1 x H)
  Matrix<T> bridge;     // (H x 2H)
  Matrix<T> out_W;      // (V x H)
  Matrix<T> out_b;      // (1 x V)

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
    return n;
  }

  template <class U>
  Seq2SeqParams<U> cast() const {
    Seq2SeqParams<U> out;
    auto src = tensors();
    std::size_t i = 0;
    out.visit([&](const std::string&, Matrix<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  std::vector<const Matrix<T>*> tensors() const {
    std::vector<const Matrix<T>*> out;
    visit([&](const std::string&, const Matrix<T>& m) { out.push_back(&m); });
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f(std::string("embedding"), s.embedding);
    f(std::string("encoder.fwd.W"), s.enc_fwd.W);
    f(std::string("encoder.fwd.U"), s.enc_fwd.U);
    f(std::string("encoder.fwd.b"), s.enc_fwd.b);
    f(std::string("encoder.bwd.W"), s.enc_bwd.W);
    f(std::string("encoder.bwd.U"), s.enc_bwd.U);
    f(std::string("encoder.bwd.b"), s.enc_bwd.b);
    f(std::string("decoder.W"), s.dec.W);
    f(std::string("decoder.U"), s.dec.U);
    f(std::string("decoder.b"), s.dec.b);
    f(std::string("attention.W"), s.attn_W);
    f(std::string("attention.U"), s.attn_U);
    f(std::string("attention.v"), s.attn_v);
    f(std::string("bridge"), s.bridge);
    f(std::string("output.W"), s.out_W);
    f(std::string("output.b"), s.out_b);
  }
};

template <class T>
LstmParams<T> init_lstm(std::size_t input, std::size_t hidden, std::uint64_t seed) {
  LstmParams<T> p;
  p.W = xavier_init<T>(4 * hidden, input, seed);
  p.U = xavier_init<T>(4 * hidden, hidden, seed + 1);
  p.b = Matrix<T>(1, 4 * hidden);
  for (std::size_t j = 0; j < hidden; ++j) p.b[j] = T{1};  // forget gate
  return p;
}

// Correctly shaped, all-zero parameters.
template <class T>
Seq2SeqParams<T> zero_params(const ModelConfig& c) {
  c.validate();
  const std::size_t V = c.vocab_size, E = c.embedding_size, H = c.rnn_size;
  auto lstm = [H](std::size_t input) {
    return LstmParams<T>{Matrix<T>(4 * H, input), Matrix<T>(4 * H, H), Matrix<T>(1, 4 * H)};
  };
  Seq2SeqParams<T> p;
  p.embedding = Matrix<T>(V, E);
  p.enc_fwd = lstm(E);
  p.enc_bwd = lstm(E);
  p.dec = lstm(E + 2 * H);
  p.attn_W = Matrix<T>(H, H);
  p.attn_U = Matrix<T>(H, 2 * H);
  p.attn_v = Matrix<T>(1, H);
  p.bridge = Matrix<T>(H, 2 * H);
  p.out_W = Matrix<T>(V, H);
  p.out_b = Matrix<T>(1, V);
  return p;
}

template <class T>
Seq2SeqParams<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  const std::size_t V = c.vocab_size, E = c.embedding_size, H = c.rnn_size;
  // Distinct, well-separated stream per tensor.
  auto stream = [seed](std::uint64_t k) { return seed * 0x9E3779B97F4A7C15ULL + k * 1000003ULL; };
  Seq2SeqParams<T> p;
  p.embedding = uniform_init<T>(V, E, 1.0, stream(1));
  p.enc_fwd = init_lstm<T>(E, H, stream(2));
  p.enc_bwd = init_lstm<T>(E, H, stream(4));
  p.dec = init_lstm<T>(E + 2 * H, H, stream(6));
  p.attn_W = xavier_init<T>(H, H, stream(8));
  p.attn_U = xavier_init<T>(H, 2 * H, stream(9));
  p.attn_v = xavier_init<T>(1, H, stream(10));
  p.bridge = xavier_init<T>(H, 2 * H, stream(11));
  p.out_W = xavier_init<T>(V, H, stream(12));
  p.out_b = Matrix<T>(1, V);
  return p;
}

// ---- tape bindings -------------------------------------------------------------

struct LstmVars {
  Var W, U, b;
};

struct ParamVars {
  Var embedding;
  LstmVars enc_fwd, enc_bwd, dec;
  Var attn_W, attn_U, attn_v;
  Var bridge;
  Var out_W, out_b;
};

template <class T>
ParamVars bind(Tape<T>& tape, const Seq2SeqParams<T>& p) {
  std::vector<Var> vars;
  p.visit([&](const std::string& name, const Matrix<T>& m) { vars.push_back(tape.parameter(m, name)); });
  std::size_t i = 0;
  ParamVars v;
  v.embedding = vars[i++];
  v.enc_fwd = {vars[i], vars[i + 1], vars[i + 2]};
  i += 3;
  v.enc_bwd = {vars[i], vars[i + 1], vars[i + 2]};
  i += 3;
  v.dec = {vars[i], vars[i + 1], vars[i + 2]};
  i += 3;
  v.attn_W = vars[i++];
  v.attn_U = vars[i++];
  v.attn_v = vars[i++];
  v.bridge = vars[i++];
  v.out_W = vars[i++];
  v.out_b = vars[i++];
  return v;
}

// Inverted dropout: kept units are scaled by 1/keep during training so
// inference uses the weights unchanged. Inactive without an rng.
struct Dropout {
  double keep = 1.0;
  std::mt19937_64* rng = nullptr;
  bool active() const { return rng != nullptr && keep < 1.0; }
};

template <class T>
Var apply_dropout(Tape<T>& tape, Var x, Dropout& d) {
  if (!d.active()) return x;
  const auto& xv = tape.value(x);
  Matrix<T> mask(xv.rows(), xv.cols());
  const T kept = static_cast<T>(1.0 / d.keep);
  for (auto& m : mask.data()) {
    const double u = static_cast<double>((*d.rng)() >> 11) * 0x1.0p-53;
    m = u < d.keep ? kept : T{0};
  }
  return tape.hadamard(x, tape.constant(std::move(mask)));
}

// ---- cells ---------------------------------------------------------------------

template <class T>
Var embed_lookup(Tape<T>& tape, Var embedding, std::span<const int> ids) {
  return tape.gather_rows(embedding, ids);
}

// Plain recurrence h_t = tanh(W h_prev + U x_t), rows are batch entries.
template <class T>
Var rnn_step(Tape<T>& tape, Var x, Var h_prev, Var W, Var U) {
  return tape.tanh(tape.add(tape.matmul_nt(h_prev, W), tape.matmul_nt(x, U)));
}

struct LstmStep {
  Var h, c;
  Var forget, input, output, candidate;
};

template <class T>
LstmStep lstm_step(Tape<T>& tape, Var x, Var h_prev, Var c_prev, const LstmVars& p) {
  const auto& U = tape.value(p.U);
  if (U.rows() % 4 != 0 || U.cols() * 4 != U.rows()) {
    throw ShapeMismatch("lstm_step: recurrent weight must be (4H x H)");
  }
  const std::size_t H = U.cols();
  Var z = tape.add_row(tape.add(tape.matmul_nt(x, p.W), tape.matmul_nt(h_prev, p.U)), p.b);
  LstmStep s;
  s.forget = tape.sigmoid(tape.slice_cols(z, 0, H));
  s.input = tape.sigmoid(tape.slice_cols(z, H, H));
  s.output = tape.sigmoid(tape.slice_cols(z, 2 * H, H));
  s.candidate = tape.tanh(tape.slice_cols(z, 3 * H, H));
  s.c = tape.add(tape.hadamard(s.forget, c_prev), tape.hadamard(s.input, s.candidate));
  s.h = tape.hadamard(s.output, tape.tanh(s.c));
  return s;
}

// ---- encoder -------------------------------------------------------------------

// Source ids for a batch, one row per example, all rows the same length.
using SourceBatch = std::vector<std::vector<int>>;

struct EncoderOutput {
  std::vector<Var> states;  // per source position: (B x 2H) = [fwd ; bwd]
  std::vector<Var> keys;    // per source position: states[j] * attn_U^T, (B x H)
  Var s0;                   // initial decoder state tanh(B * h_final), (B x H)
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> pad_mask;  // (B x S) row-major, 1 at PAD positions
};

namespace detail {

// Runs one direction. PAD positions carry the previous state through
// unchanged, so padding never influences any encoder state.
template <class T>
std::vector<Var> run_direction(Tape<T>& tape, const ParamVars& p, const LstmVars& cell,
                               const SourceBatch& src, bool reverse) {
  const std::size_t B = src.size(), S = src.front().size();
  const std::size_t H = tape.value(cell.U).cols();
  Var h = tape.constant(Matrix<T>(B, H));
  Var c = tape.constant(Matrix<T>(B, H));
  std::vector<Var> out(S);
  std::vector<int> ids(B);
  for (std::size_t step = 0; step < S; ++step) {
    const std::size_t j = reverse ? S - 1 - step : step;
    Matrix<T> keep(B, 1), hold(B, 1);
    std::size_t live = 0;
    for (std::size_t b = 0; b < B; ++b) {
      ids[b] = src[b][j];
      const bool pad = ids[b] == kPad;
      keep[b] = pad ? T{0} : T{1};
      hold[b] = pad ? T{1} : T{0};
      live += pad ? 0 : 1;
    }
    if (live > 0) {
      Var x = embed_lookup(tape, p.embedding, ids);
      auto next = lstm_step(tape, x, h, c, cell);
      if (live == B) {
        h = next.h;
        c = next.c;
      } else {
        Var keep_v = tape.constant(keep), hold_v = tape.constant(hold);
        h = tape.add(tape.scale_rows(next.h, keep_v), tape.scale_rows(h, hold_v));
        c = tape.add(tape.scale_rows(next.c, keep_v), tape.scale_rows(c, hold_v));
      }
    }
    out[j] = h;
  }
  return out;
}

}  // namespace detail

template <class T>
EncoderOutput encode_bidirectional(Tape<T>& tape, const ParamVars& p, const SourceBatch& src, Dropout& dropout) {
  if (src.empty() || src.front().empty()) throw ShapeMismatch("encode_bidirectional: empty source batch");
  for (const auto& row : src) {
    if (row.size() != src.front().size()) throw ShapeMismatch("encode_bidirectional: ragged source batch");
  }
  EncoderOutput enc;
  enc.batch = src.size();
  enc.length = src.front().size();
  enc.pad_mask.resize(enc.batch * enc.length);
  for (std::size_t b = 0; b < enc.batch; ++b) {
    for (std::size_t j = 0; j < enc.length; ++j) enc.pad_mask[b * enc.length + j] = src[b][j] == kPad;
  }
  const auto fwd = detail::run_direction(tape, p, p.enc_fwd, src, false);
  const auto bwd = detail::run_direction(tape, p, p.enc_bwd, src, true);
  enc.states.resize(enc.length);
  enc.keys.resize(enc.length);
  for (std::size_t j = 0; j < enc.length; ++j) {
    enc.states[j] = apply_dropout(tape, tape.concat_cols({fwd[j], bwd[j]}), dropout);
    enc.keys[j] = tape.matmul_nt(enc.states[j], p.attn_U);
  }
  Var final_state = tape.concat_cols({fwd.back(), bwd.front()});
  enc.s0 = tape.tanh(tape.matmul_nt(final_state, p.bridge));
  return enc;
}

// Encoder states of a single-example batch as one (S x 2H) matrix.
template <class T>
Matrix<T> encoder_matrix(const Tape<T>& tape, const EncoderOutput& enc) {
  if (enc.batch != 1) throw ShapeMismatch("encoder_matrix: batch must be 1");
  const std::size_t width = tape.value(enc.states.front()).cols();
  Matrix<T> out(enc.length, width);
  for (std::size_t j = 0; j < enc.length; ++j) {
    const auto row = tape.value(enc.states[j]).row(0);
    std::copy(row.begin(), row.end(), out.row(j).begin());
  }
  return out;
}

// ---- attention -----------------------------------------------------------------

// e_j = v^T tanh(W s_prev + U h_j), masked positions set to kMaskedEnergy. (B x S)
template <class T>
Var attention_energies(Tape<T>& tape, const ParamVars& p, Var s_prev, const EncoderOutput& enc) {
  Var query = tape.matmul_nt(s_prev, p.attn_W);
  std::vector<Var> columns(enc.length);
  for (std::size_t j = 0; j < enc.length; ++j) {
    columns[j] = tape.matmul_nt(tape.tanh(tape.add(query, enc.keys[j])), p.attn_v);
  }
  Var e = tape.concat_cols(columns);
  return tape.masked_fill(e, enc.pad_mask, static_cast<T>(kMaskedEnergy));
}

struct AttentionResult {
  Var context;  // (B x 2H)
  Var alpha;    // (B x S)
};

template <class T>
AttentionResult attention_context(Tape<T>& tape, const ParamVars& p, Var s_prev, const EncoderOutput& enc) {
  AttentionResult r;
  r.alpha = tape.softmax_rows(attention_energies(tape, p, s_prev, enc));
  Var acc{};
  for (std::size_t j = 0; j < enc.length; ++j) {
    Var term = tape.scale_rows(enc.states[j], tape.slice_cols(r.alpha, j, 1));
    acc = acc.valid() ? tape.add(acc, term) : term;
  }
  r.context = acc;
  return r;
}

// ---- decoder -------------------------------------------------------------------

struct DecoderStep {
  Var s, c;
  Var logits;  // (B x V)
  Var alpha;   // (B x S)
};

template <class T>
DecoderStep decoder_step(Tape<T>& tape, const ParamVars& p, std::span<const int> y_prev, Var s_prev,
                         Var c_prev, const EncoderOutput& enc, Dropout& dropout) {
  Var emb = embed_lookup(tape, p.embedding, y_prev);
  auto att = attention_context(tape, p, s_prev, enc);
  Var input = tape.concat_cols({emb, att.context});
  auto cell = lstm_step(tape, input, s_prev, c_prev, p.dec);
  DecoderStep out;
  out.s = cell.h;
  out.c = cell.c;
  out.alpha = att.alpha;
  Var dropped = apply_dropout(tape, cell.h, dropout);
  out.logits = tape.add_row(tape.matmul_nt(dropped, p.out_W), p.out_b);
  return out;
}

struct ForwardResult {
  Var loss;                 // (1 x 1) mean masked cross-entropy
  std::vector<Var> logits;  // per target step t = 1..T-1: (B x V)
  std::vector<int> targets;             // step-major
  std::vector<std::uint8_t> target_mask;  // step-major, 1 at PAD targets
};

// Teacher forcing: the decoder reads target token t and predicts token t+1.
template <class T>
ForwardResult forward_teacher_forced(Tape<T>& tape, const ParamVars& p, std::span<const TokenizedPair> batch,
                                     Dropout& dropout) {
  if (batch.empty()) throw ShapeMismatch("forward_teacher_forced: empty batch");
  const std::size_t B = batch.size();
  const std::size_t T_len = batch.front().tgt_ids.size();
  SourceBatch src;
  src.reserve(B);
  for (const auto& pair : batch) {
    if (pair.tgt_ids.size() != T_len || pair.src_ids.size() != batch.front().src_ids.size()) {
      throw ShapeMismatch("forward_teacher_forced: batch mixes buckets");
    }
    src.push_back(pair.src_ids);
  }
  if (T_len < 2) throw ShapeMismatch("forward_teacher_forced: target needs at least 2 tokens");

  auto enc = encode_bidirectional(tape, p, src, dropout);
  const std::size_t H = tape.value(p.dec.U).cols();
  Var s = enc.s0;
  Var c = tape.constant(Matrix<T>(B, H));
  ForwardResult out;
  std::vector<int> y(B);
  for (std::size_t t = 0; t + 1 < T_len; ++t) {
    for (std::size_t b = 0; b < B; ++b) y[b] = batch[b].tgt_ids[t];
    auto step = decoder_step(tape, p, y, s, c, enc, dropout);
    s = step.s;
    c = step.c;
    out.logits.push_back(step.logits);
    for (std::size_t b = 0; b < B; ++b) {
      const int next = batch[b].tgt_ids[t + 1];
      out.targets.push_back(next);
      out.target_mask.push_back(next == kPad ? 1 : 0);
    }
  }
  Var all = tape.concat_rows(out.logits);
  out.loss = tape.cross_entropy(all, out.targets, out.target_mask);
  return out;
}

}  // namespace seqchat
