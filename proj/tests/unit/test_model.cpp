#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "common.hpp"
#include "oracles.hpp"
#include "seqchat/model.hpp"
#include "seqchat/train.hpp"

using namespace seqchat;
using testing_support::random_matrix;
using testing_support::random_source;
using testing_support::tiny_config;

namespace {

Seq2SeqParams<double> random_model(std::size_t V, std::size_t E, std::size_t H, std::uint64_t seed) {
  auto p = init_params<double>(tiny_config(V, E, H), seed);
  // Non-zero biases and a livelier attention so nothing is trivially uniform.
  std::mt19937_64 rng(seed ^ 0xABCDEF);
  p.visit([&](const std::string& name, Matrix<double>& m) {
    if (name.ends_with(".b") || name == "attention.v") {
      for (auto& v : m.data()) v += std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
  });
  return p;
}

void check_vec(const Matrix<double>& m, std::size_t row, const oracle::Vec& v, double tol = 1e-10) {
  REQUIRE(m.cols() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(m(row, i) == doctest::Approx(v[i]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_CASE("parameters: names, shapes and initialisation") {
  const auto c = tiny_config(12, 4, 3);
  const auto p = init_params<float>(c, 1);
  std::set<std::string> names;
  p.visit([&](const std::string& n, const Matrix<float>&) { names.insert(n); });
  CHECK(names.size() == 16);
  const std::size_t V = 12, E = 4, H = 3;
  const std::size_t lstm_in = [&](std::size_t in) { return 4 * H * in + 4 * H * H + 4 * H; }(E);
  const std::size_t dec = 4 * H * (E + 2 * H) + 4 * H * H + 4 * H;
  CHECK(p.parameter_count() == V * E + 2 * lstm_in + dec + H * H + H * 2 * H + H + H * 2 * H + V * H + V);
  for (std::size_t j = 0; j < 4 * H; ++j) {
    CHECK(p.dec.b[j] == (j < H ? 1.0f : 0.0f));
    CHECK(p.enc_fwd.b[j] == (j < H ? 1.0f : 0.0f));
  }
  CHECK(p.enc_fwd.W.rows() == 4 * H);
  CHECK(p.dec.W.cols() == E + 2 * H);
  const auto same = init_params<float>(c, 1);
  const auto other = init_params<float>(c, 2);
  CHECK(same.embedding == p.embedding);
  CHECK_FALSE(other.embedding == p.embedding);
  CHECK_FALSE(p.enc_fwd.W == p.enc_bwd.W);
}

TEST_CASE("embed_lookup") {
  std::mt19937_64 rng(1);
  auto E = random_matrix<double>(6, 3, rng);
  Tape<double> t;
  Var e = t.parameter(E, "E");
  const int ids[] = {0, 5, 5};
  Var rows = embed_lookup(t, e, ids);
  const auto& v = t.value(rows);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(v(0, c) == E(0, c));
    CHECK(v(1, c) == E(5, c));
    CHECK(v(1, c) == v(2, c));
  }
  const int k[] = {2};
  Tape<double> t2;
  auto g = backward(t2, t2.sum(embed_lookup(t2, t2.parameter(E, "E"), k)));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(g.at("E")(r, c) == (r == 2 ? 1.0 : 0.0));
  const int bad[] = {6};
  CHECK_THROWS_AS(embed_lookup(t, e, bad), IndexOutOfVocab);
}

TEST_CASE("rnn_step") {
  std::mt19937_64 rng(2);
  Tape<double> t;
  auto x = random_matrix<double>(1, 3, rng, 0.01);
  auto h = random_matrix<double>(1, 3, rng);
  Matrix<double> zero(3, 3);
  Var vx = t.constant(x), vh = t.constant(h);
  CHECK(t.value(rnn_step(t, vx, vh, t.constant(zero), t.constant(zero))) == Matrix<double>(1, 3));
  const auto lin = t.value(rnn_step(t, vx, t.constant(Matrix<double>(1, 3)), t.constant(zero),
                                    t.constant(Matrix<double>::identity(3))));
  for (std::size_t i = 0; i < 3; ++i) CHECK(lin[i] == doctest::Approx(std::tanh(x[i])).epsilon(1e-12));

  auto W = random_matrix<double>(3, 3, rng), U = random_matrix<double>(3, 3, rng);
  const auto got = t.value(rnn_step(t, vx, vh, t.constant(W), t.constant(U)));
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0;
    for (std::size_t k = 0; k < 3; ++k) z += W(i, k) * h[k] + U(i, k) * x[k];
    CHECK(got[i] == doctest::Approx(std::tanh(z)).epsilon(1e-12));
    CHECK(std::abs(got[i]) < 1.0);
  }
}

TEST_CASE("lstm_step against the scalar oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t in = 1 + rng() % 4, H = 1 + rng() % 4;
    LstmParams<double> p{random_matrix<double>(4 * H, in, rng), random_matrix<double>(4 * H, H, rng),
                         random_matrix<double>(1, 4 * H, rng)};
    auto x = random_matrix<double>(1, in, rng, 2.0), h = random_matrix<double>(1, H, rng),
         c = random_matrix<double>(1, H, rng, 3.0);
    Tape<double> t;
    LstmVars v{t.parameter(p.W, "W"), t.parameter(p.U, "U"), t.parameter(p.b, "b")};
    auto s = lstm_step(t, t.constant(x), t.constant(h), t.constant(c), v);
    const auto ref = oracle::lstm(p, oracle::row_of(x, 0), oracle::row_of(h, 0), oracle::row_of(c, 0));
    check_vec(t.value(s.h), 0, ref.h);
    check_vec(t.value(s.c), 0, ref.c);
    check_vec(t.value(s.forget), 0, ref.f);
    check_vec(t.value(s.candidate), 0, ref.g);
    for (std::size_t j = 0; j < H; ++j) {
      for (Var gate : {s.forget, s.input, s.output}) {
        CHECK(t.value(gate)[j] > 0.0);
        CHECK(t.value(gate)[j] < 1.0);
      }
      CHECK(std::abs(t.value(s.h)[j]) < 1.0);
    }
  }
}

TEST_CASE("lstm_step edge cases") {
  const std::size_t H = 3, in = 2;
  Tape<double> t;
  LstmParams<double> zero{Matrix<double>(4 * H, in), Matrix<double>(4 * H, H), Matrix<double>(1, 4 * H)};
  LstmVars zv{t.constant(zero.W), t.constant(zero.U), t.constant(zero.b)};
  Matrix<double> x{{0.7, -0.2}};
  auto s = lstm_step(t, t.constant(x), t.constant(Matrix<double>(1, H)), t.constant(Matrix<double>(1, H)), zv);
  CHECK(t.value(s.c) == Matrix<double>(1, H));
  CHECK(t.value(s.h) == Matrix<double>(1, H));

  // Forget gate pinned open and input gate shut: the cell state passes through.
  std::mt19937_64 rng(4);
  LstmParams<double> mem{random_matrix<double>(4 * H, in, rng, 0.1), random_matrix<double>(4 * H, H, rng, 0.1),
                         Matrix<double>(1, 4 * H)};
  for (std::size_t j = 0; j < H; ++j) {
    mem.b[j] = 50.0;
    mem.b[H + j] = -50.0;
  }
  Matrix<double> c_prev{{0.3, -1.7, 2.5}};
  LstmVars mv{t.constant(mem.W), t.constant(mem.U), t.constant(mem.b)};
  auto m = lstm_step(t, t.constant(x), t.constant(random_matrix<double>(1, H, rng)), t.constant(c_prev), mv);
  for (std::size_t j = 0; j < H; ++j) CHECK(t.value(m.c)[j] == doctest::Approx(c_prev[j]).epsilon(1e-12));

  LstmParams<double> bad{Matrix<double>(4 * H, in), Matrix<double>(4 * H, H + 1), Matrix<double>(1, 4 * H)};
  LstmVars bv{t.constant(bad.W), t.constant(bad.U), t.constant(bad.b)};
  CHECK_THROWS_AS(lstm_step(t, t.constant(x), t.constant(Matrix<double>(1, H)), t.constant(Matrix<double>(1, H)), bv),
                  ShapeMismatch);
}

TEST_CASE("bidirectional encoder against the scalar oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_model(9, 3, 2 + rng() % 3, 100 + trial);
    const std::size_t S = 1 + rng() % 5;
    const auto src = random_source(S, 1 + rng() % S, 9, rng);
    Tape<double> t;
    auto vars = bind(t, p);
    Dropout none;
    auto enc = encode_bidirectional(t, vars, SourceBatch{src}, none);
    const auto ref = oracle::encode(p, src);
    const auto H = encoder_matrix(t, enc);
    for (std::size_t j = 0; j < S; ++j) check_vec(H, j, ref.states[j]);
    check_vec(t.value(enc.s0), 0, ref.s0);
  }
}

TEST_CASE("single-position source") {
  const auto p = random_model(7, 3, 2, 8);
  Tape<double> t;
  auto vars = bind(t, p);
  Dropout none;
  auto enc = encode_bidirectional(t, vars, SourceBatch{{5}}, none);
  const auto H = encoder_matrix(t, enc);
  REQUIRE(H.rows() == 1);
  const auto x = oracle::row_of(p.embedding, 5);
  const oracle::Vec z(2, 0.0);
  check_vec(H, 0, oracle::concat(oracle::lstm(p.enc_fwd, x, z, z).h, oracle::lstm(p.enc_bwd, x, z, z).h));
}

TEST_CASE("tied directions on a palindrome mirror each other") {
  auto p = random_model(8, 3, 3, 9);
  p.enc_bwd = p.enc_fwd;
  const std::vector<int> src = {4, 6, 7, 6, 4};
  Tape<double> t;
  auto vars = bind(t, p);
  Dropout none;
  const auto H = encoder_matrix(t, encode_bidirectional(t, vars, SourceBatch{src}, none));
  const std::size_t h = 3;
  for (std::size_t j = 0; j < src.size(); ++j)
    for (std::size_t d = 0; d < h; ++d) {
      CHECK(H(j, d) == doctest::Approx(H(src.size() - 1 - j, h + d)).epsilon(1e-12));
    }
}

TEST_CASE("padding never changes the decoder's output") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_model(10, 4, 3, 200 + trial);
    const auto src = random_source(5, 2, 10, rng);
    auto logits = [&](const Seq2SeqParams<double>& params) {
      Tape<double> t;
      auto vars = bind(t, params);
      Dropout none;
      auto enc = encode_bidirectional(t, vars, SourceBatch{src}, none);
      const int go[] = {kGo};
      auto step = decoder_step(t, vars, go, enc.s0, t.constant(Matrix<double>(1, 3)), enc, none);
      return t.value(step.logits);
    };
    const auto before = logits(p);
    for (auto& v : p.embedding.row(kPad)) v += std::uniform_real_distribution<double>(-5, 5)(rng);
    const auto after = logits(p);
    for (std::size_t k = 0; k < before.size(); ++k) CHECK(std::abs(before[k] - after[k]) <= 1e-6);
  }
}

TEST_CASE("attention energies and context") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const auto p = random_model(9, 3, 1 + rng() % 4, 300 + trial);
    const std::size_t S = 1 + rng() % 6;
    const auto src = random_source(S, 1 + rng() % S, 9, rng);
    const std::size_t Hn = p.attn_v.cols();
    auto s_prev = random_matrix<double>(1, Hn, rng);
    Tape<double> t;
    auto vars = bind(t, p);
    Dropout none;
    auto enc = encode_bidirectional(t, vars, SourceBatch{src}, none);
    auto att = attention_context(t, vars, t.constant(s_prev), enc);
    const auto ref = oracle::attend(p, oracle::row_of(s_prev, 0), oracle::encode(p, src));
    check_vec(t.value(att.alpha), 0, ref.alpha);
    check_vec(t.value(att.context), 0, ref.context);
    for (std::size_t j = 0; j < S; ++j) {
      if (src[j] == kPad) CHECK(t.value(att.alpha)[j] == 0.0);
    }
  }
}

TEST_CASE("attention special cases") {
  auto p = random_model(9, 3, 2, 12);
  const std::vector<int> src = {4, 5, 6, 7};
  std::mt19937_64 rng(13);
  auto s_prev = random_matrix<double>(1, 2, rng);

  SUBCASE("zero scoring vector gives zero energies") {
    p.attn_v = Matrix<double>(1, 2);
    Tape<double> t;
    auto vars = bind(t, p);
    Dropout none;
    auto enc = encode_bidirectional(t, vars, SourceBatch{src}, none);
    CHECK(t.value(attention_energies(t, vars, t.constant(s_prev), enc)) == Matrix<double>(1, 4));
  }
  SUBCASE("equal energies give the row mean") {
    p.attn_U = Matrix<double>(2, 4);
    Tape<double> t;
    auto vars = bind(t, p);
    Dropout none;
    auto enc = encode_bidirectional(t, vars, SourceBatch{src}, none);
    auto att = attention_context(t, vars, t.constant(Matrix<double>(1, 2)), enc);
    const auto H = encoder_matrix(t, enc);
    for (std::size_t j = 0; j < 4; ++j) CHECK(t.value(att.alpha)[j] == doctest::Approx(0.25));
    for (std::size_t d = 0; d < 4; ++d) {
      const double mean = (H(0, d) + H(1, d) + H(2, d) + H(3, d)) / 4;
      CHECK(t.value(att.context)[d] == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("a single real position takes all the weight") {
    Tape<double> t;
    auto vars = bind(t, p);
    Dropout none;
    auto enc = encode_bidirectional(t, vars, SourceBatch{{0, 0, 0, 6}}, none);
    auto att = attention_context(t, vars, t.constant(s_prev), enc);
    const auto H = encoder_matrix(t, enc);
    CHECK(t.value(att.alpha)[3] == 1.0);
    for (std::size_t d = 0; d < 4; ++d) CHECK(t.value(att.context)[d] == doctest::Approx(H(3, d)).epsilon(1e-12));
  }
}

TEST_CASE("decoder step shapes and dropout determinism") {
  const auto cfg = tiny_config(11, 3, 4);
  const auto p = init_params<float>(cfg, 14);
  auto run = [&](std::uint64_t seed, double keep) {
    std::mt19937_64 rng(seed);
    Dropout d{keep, &rng};
    Tape<float> t;
    auto vars = bind(t, p);
    auto enc = encode_bidirectional(t, vars, SourceBatch{{0, 5, 6}, {7, 8, 9}}, d);
    const int prev[] = {kGo, 4};
    auto step = decoder_step(t, vars, prev, enc.s0, t.constant(Matrix<float>(2, 4)), enc, d);
    CHECK(t.value(step.logits).rows() == 2);
    CHECK(t.value(step.logits).cols() == 11);
    return t.value(step.logits);
  };
  CHECK(run(1, 0.6) == run(1, 0.6));
  CHECK_FALSE(run(1, 0.6) == run(2, 0.6));
  CHECK(run(1, 1.0) == run(2, 1.0));
}

TEST_CASE("inverted dropout keeps the expected activation") {
  std::mt19937_64 rng(15);
  Dropout d{0.7, &rng};
  Tape<double> t;
  Matrix<double> ones(200, 50);
  ones.fill(1.0);
  const auto out = t.value(apply_dropout(t, t.constant(ones), d));
  double mean = 0;
  std::size_t zeros = 0;
  for (double v : out.data()) {
    mean += v;
    zeros += v == 0.0;
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.7)));
  }
  mean /= static_cast<double>(out.size());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.03));
  CHECK(static_cast<double>(zeros) / static_cast<double>(out.size()) == doctest::Approx(0.3).epsilon(0.1));
}

TEST_CASE("teacher-forced loss against the scalar oracle") {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_model(10, 3, 3, 400 + trial);
    std::vector<TokenizedPair> batch;
    for (int b = 0; b < 3; ++b) {
      TokenizedPair pair;
      pair.src_ids = random_source(4, 1 + rng() % 4, 10, rng);
      const std::size_t n = rng() % 4;
      pair.tgt_ids = {kGo};
      for (std::size_t i = 0; i < n; ++i) pair.tgt_ids.push_back(4 + static_cast<int>(rng() % 6));
      pair.tgt_ids.push_back(kEos);
      pair.tgt_ids.resize(6, kPad);
      batch.push_back(pair);
    }
    Tape<double> t;
    auto vars = bind(t, p);
    Dropout none;
    const auto fwd = forward_teacher_forced(t, vars, batch, none);
    double total = 0;
    std::size_t tokens = 0;
    for (const auto& pair : batch) {
      const auto r = oracle::teacher_forced(p, pair);
      total += r.total;
      tokens += r.tokens;
    }
    CHECK(t.value(fwd.loss)[0] == doctest::Approx(total / static_cast<double>(tokens)).epsilon(1e-10));
    CHECK(fwd.logits.size() == 5);
  }
}

TEST_CASE("two-step case: only the EOS prediction counts") {
  const auto p = random_model(8, 3, 2, 17);
  TokenizedPair pair{{0, 5, 6}, {kGo, kEos, kPad, kPad}, 0};
  Tape<double> t;
  auto vars = bind(t, p);
  Dropout none;
  const std::vector<TokenizedPair> batch{pair};
  const auto fwd = forward_teacher_forced(t, vars, batch, none);
  const auto enc = oracle::encode(p, pair.src_ids);
  oracle::DecoderState st{enc.s0, oracle::Vec(2, 0.0)};
  const auto lp = oracle::decoder_log_probs(p, enc, st, kGo);
  CHECK(t.value(fwd.loss)[0] == doctest::Approx(-lp[kEos]).epsilon(1e-12));
  CHECK(fwd.target_mask == std::vector<std::uint8_t>{0, 1, 1});
}

TEST_CASE("mean over a batch of identical pairs equals the single-pair loss") {
  const auto p = init_params<float>(tiny_config(9, 4, 4), 18);
  TokenizedPair pair{{0, 4, 5}, {kGo, 6, 7, kEos, kPad}, 0};
  auto loss = [&](std::size_t copies) {
    Tape<float> t;
    auto vars = bind(t, p);
    Dropout none;
    const std::vector<TokenizedPair> batch(copies, pair);
    return t.value(forward_teacher_forced(t, vars, batch, none).loss)[0];
  };
  CHECK(loss(5) == doctest::Approx(loss(1)).epsilon(1e-6));
}

TEST_CASE("untrained loss is close to ln V") {
  const std::size_t V = 200;
  const auto p = init_params<float>(tiny_config(V, 16, 16), 19);
  std::mt19937_64 rng(20);
  std::vector<TokenizedPair> batch;
  for (int b = 0; b < 16; ++b) {
    TokenizedPair pair{random_source(5, 4, V, rng), {kGo}, 0};
    for (int i = 0; i < 4; ++i) pair.tgt_ids.push_back(4 + static_cast<int>(rng() % (V - 4)));
    pair.tgt_ids.push_back(kEos);
    pair.tgt_ids.resize(10, kPad);
    batch.push_back(pair);
  }
  Tape<float> t;
  auto vars = bind(t, p);
  Dropout none;
  const double loss = t.value(forward_teacher_forced(t, vars, batch, none).loss)[0];
  CHECK(std::abs(loss - std::log(double(V))) <= 0.2 * std::log(double(V)));
}

TEST_CASE("batches mixing buckets are rejected") {
  const auto p = init_params<float>(tiny_config(9, 2, 2), 21);
  std::vector<TokenizedPair> batch{{{4, 5}, {1, 2, 0}, 0}, {{4, 5, 6}, {1, 2, 0}, 1}};
  Tape<float> t;
  auto vars = bind(t, p);
  Dropout none;
  CHECK_THROWS_AS(forward_teacher_forced(t, vars, batch, none), ShapeMismatch);
}

TEST_CASE("end-to-end gradient check") {
  const auto cfg = tiny_config(12, 4, 4);
  const auto r = grad_check(cfg, 7);
  INFO("worst: " << r.worst_parameter);
  CHECK(r.max_relative_error <= 1e-4);
  CHECK(r.entries > 500);

  GradCheckOptions faulty;
  faulty.fault = Tape<double>::Fault::sigmoid_grad;
  CHECK(grad_check(cfg, 7, faulty).max_relative_error > 1e-2);

  GradCheckOptions degenerate;
  degenerate.degenerate = true;
  const auto d = grad_check(cfg, 7, degenerate);
  CHECK(std::isfinite(d.max_relative_error));
  CHECK(d.max_relative_error <= 1e-4);
}
