#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "seqchat/corpus.hpp"
#include "seqchat/model.hpp"

namespace seqchat {

struct DecodeConfig {
  std::size_t beam_width = 1;
  std::size_t max_steps = 50;
  // Final ranking divides the summed log-probability by length^exponent.
  double length_exponent = 0.0;
};

struct BeamHypothesis {
  std::vector<int> tokens;  // ends with EOS when finished
  double log_prob = 0.0;
  double score = 0.0;       // log_prob after length normalization
  bool finished = false;
};

struct BeamResult {
  std::vector<int> best;  // without the terminal EOS
  double best_score = 0.0;
  std::vector<BeamHypothesis> ranked;  // every retained hypothesis, best first
};

namespace detail {

// Single-example decoding session over one tape: the source is encoded once
// and each call to step() extends one hypothesis.
template <class T>
class DecodeSession {
 public:
  DecodeSession(const Seq2SeqParams<T>& params, std::span<const int> src_ids) {
    if (src_ids.empty()) throw ShapeMismatch("decode: empty source");
    vars_ = bind(tape_, params);
    Dropout none;
    enc_ = encode_bidirectional(tape_, vars_, SourceBatch{std::vector<int>(src_ids.begin(), src_ids.end())}, none);
    H_ = params.dec.U.cols();
    vocab_ = params.out_W.rows();
  }

  struct State {
    Var s, c;
  };

  State initial() { return {enc_.s0, tape_.constant(Matrix<T>(1, H_))}; }

  // Log-probabilities of the next token; PAD and GO are never emitted.
  std::vector<double> step(State& st, int prev) {
    Dropout none;
    const int ids[1] = {prev};
    auto out = decoder_step(tape_, vars_, ids, st.s, st.c, enc_, none);
    st = {out.s, out.c};
    const auto lp = log_softmax_rows(tape_.value(out.logits));
    std::vector<double> result(vocab_);
    for (std::size_t k = 0; k < vocab_; ++k) result[k] = static_cast<double>(lp[k]);
    result[kPad] = -std::numeric_limits<double>::infinity();
    result[kGo] = -std::numeric_limits<double>::infinity();
    return result;
  }

  std::size_t vocab() const { return vocab_; }

 private:
  Tape<T> tape_;
  ParamVars vars_;
  EncoderOutput enc_;
  std::size_t H_ = 0;
  std::size_t vocab_ = 0;
};

inline double normalized(double log_prob, std::size_t length, double exponent) {
  if (exponent == 0.0 || length == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), exponent);
}

}  // namespace detail

// Argmax at every step, lowest id on ties. Stops at EOS (not returned) or after
// max_steps tokens.
template <class T>
std::vector<int> greedy_decode(const Seq2SeqParams<T>& params, std::span<const int> src_ids,
                               std::size_t max_steps) {
  detail::DecodeSession<T> session(params, src_ids);
  auto state = session.initial();
  std::vector<int> out;
  int prev = kGo;
  for (std::size_t t = 0; t < max_steps; ++t) {
    const auto lp = session.step(state, prev);
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    if (best == kEos) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

// Left-to-right beam search over joint log-probability.
//
// Each step expands every live hypothesis by every token and keeps the
// beam_width best candidates; candidates ending in EOS retire to the finished
// pool. Candidate order: higher cumulative log-prob, then better-ranked parent,
// then higher token log-prob, then lower token id. The result is the best of
// the finished pool plus, when max_steps runs out, the surviving live
// hypotheses.
template <class T>
BeamResult beam_search(const Seq2SeqParams<T>& params, std::span<const int> src_ids, const DecodeConfig& config) {
  if (config.beam_width < 1) throw std::invalid_argument("beam_search: beam_width must be >= 1");
  if (config.max_steps < 1) throw std::invalid_argument("beam_search: max_steps must be >= 1");
  detail::DecodeSession<T> session(params, src_ids);
  using State = typename detail::DecodeSession<T>::State;

  struct Live {
    BeamHypothesis hyp;
    State state;
  };
  struct Candidate {
    double log_prob;
    std::size_t parent;
    double token_lp;
    int token;
  };

  std::vector<Live> live;
  live.push_back({BeamHypothesis{}, session.initial()});
  std::vector<BeamHypothesis> finished;

  for (std::size_t t = 0; t < config.max_steps && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    std::vector<State> next_states(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) {
      next_states[h] = live[h].state;
      const int prev = live[h].hyp.tokens.empty() ? kGo : live[h].hyp.tokens.back();
      const auto lp = session.step(next_states[h], prev);
      for (std::size_t k = 0; k < lp.size(); ++k) {
        if (!std::isfinite(lp[k])) continue;
        cands.push_back({live[h].hyp.log_prob + lp[k], h, lp[k], static_cast<int>(k)});
      }
    }
    const std::size_t keep = std::min(config.beam_width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        if (a.token_lp != b.token_lp) return a.token_lp > b.token_lp;
                        return a.token < b.token;
                      });
    std::vector<Live> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& cand = cands[i];
      BeamHypothesis hyp = live[cand.parent].hyp;
      hyp.tokens.push_back(cand.token);
      hyp.log_prob = cand.log_prob;
      hyp.score = detail::normalized(hyp.log_prob, hyp.tokens.size(), config.length_exponent);
      if (cand.token == kEos) {
        hyp.finished = true;
        finished.push_back(std::move(hyp));
      } else {
        next.push_back({std::move(hyp), next_states[cand.parent]});
      }
    }
    live = std::move(next);
  }

  BeamResult result;
  result.ranked = std::move(finished);
  for (auto& l : live) result.ranked.push_back(std::move(l.hyp));
  // Stable: earlier-retired (and, among live ones, better-ranked) entries win ties.
  std::stable_sort(result.ranked.begin(), result.ranked.end(),
                   [](const BeamHypothesis& a, const BeamHypothesis& b) { return a.score > b.score; });
  if (!result.ranked.empty()) {
    const auto& best = result.ranked.front();
    result.best = best.tokens;
    if (best.finished) result.best.pop_back();
    result.best_score = best.score;
  }
  return result;
}

// Drops PAD/GO/EOS, joins with spaces, and attaches . , ? ! to the preceding word.
std::string postprocess_reply(std::span<const int> token_ids, const Vocab& vocab);

}  // namespace seqchat
