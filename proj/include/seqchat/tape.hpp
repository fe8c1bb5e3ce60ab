#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqchat/tensor.hpp"

namespace seqchat {

struct TapeReplayError : std::logic_error {
  using std::logic_error::logic_error;
};

template <class T>
using Gradients = std::map<std::string, Matrix<T>>;

// Handle to a node recorded on a Tape.
struct Var {
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

// Reverse-mode recorder. Nodes are appended in evaluation order, so the node
// list is already topologically sorted; backward walks it once in reverse.
//
// Parameter leaves reference caller-owned matrices, which must outlive the tape.
// A tape is single-owner and single-use: backward() may run once.
template <class T>
class Tape {
 public:
  // Deliberate gradient corruption, used only to prove the gradient checker
  // can detect a broken rule.
  enum class Fault { none, sigmoid_grad };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void inject_fault(Fault f) { fault_ = f; }

  Var constant(Matrix<T> v) { return push(std::move(v), false, nullptr); }

  Var parameter(const Matrix<T>& v, std::string name) {
    Node n;
    n.external = &v;
    n.needs_grad = true;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    Var out{nodes_.size() - 1};
    params_.push_back(out);
    return out;
  }

  const Matrix<T>& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  // Empty matrix when no gradient reached the node.
  const Matrix<T>& grad(Var v) const { return node(v).grad; }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  // ---- recorded primitives ---------------------------------------------------

  Var matmul(Var a, Var b) {
    auto out = seqchat::matmul(value(a), value(b));
    return push(std::move(out), any_grad(a, b), [this, a, b](std::size_t self) {
      const auto& g = nodes_[self].grad;
      if (needs(a)) accumulate(a, seqchat::matmul_nt(g, value(b)));
      if (needs(b)) accumulate(b, seqchat::matmul_tn(value(a), g));
    });
  }

  // a * b^T, with b stored (out x in) as weight matrices are.
  Var matmul_nt(Var a, Var b) {
    auto out = seqchat::matmul_nt(value(a), value(b));
    return push(std::move(out), any_grad(a, b), [this, a, b](std::size_t self) {
      const auto& g = nodes_[self].grad;
      if (needs(a)) accumulate(a, seqchat::matmul(g, value(b)));
      if (needs(b)) accumulate(b, seqchat::matmul_tn(g, value(a)));
    });
  }

  Var add(Var a, Var b) {
    auto out = seqchat::add(value(a), value(b));
    return push(std::move(out), any_grad(a, b), [this, a, b](std::size_t self) {
      const auto& g = nodes_[self].grad;
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    auto out = seqchat::sub(value(a), value(b));
    return push(std::move(out), any_grad(a, b), [this, a, b](std::size_t self) {
      const auto& g = nodes_[self].grad;
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, seqchat::scale(g, T{-1}));
    });
  }

  Var hadamard(Var a, Var b) {
    auto out = seqchat::hadamard(value(a), value(b));
    return push(std::move(out), any_grad(a, b), [this, a, b](std::size_t self) {
      const auto& g = nodes_[self].grad;
      if (needs(a)) accumulate(a, seqchat::hadamard(g, value(b)));
      if (needs(b)) accumulate(b, seqchat::hadamard(g, value(a)));
    });
  }

  Var tanh(Var a) {
    auto out = seqchat::tanh(value(a));
    return push(std::move(out), needs(a), [this, a](std::size_t self) {
      const auto& y = nodes_[self].value;
      const auto& g = nodes_[self].grad;
      accumulate(a, zip(g, y, "tanh'", [](T gi, T yi) { return gi * (T{1} - yi * yi); }));
    });
  }

  Var sigmoid(Var a) {
    auto out = seqchat::sigmoid(value(a));
    return push(std::move(out), needs(a), [this, a](std::size_t self) {
      const auto& y = nodes_[self].value;
      const auto& g = nodes_[self].grad;
      const T k = fault_ == Fault::sigmoid_grad ? T{1.5} : T{1};
      accumulate(a, zip(g, y, "sigmoid'", [k](T gi, T yi) { return k * gi * yi * (T{1} - yi); }));
    });
  }

  Var scale(Var a, T s) {
    auto out = seqchat::scale(value(a), s);
    return push(std::move(out), needs(a), [this, a, s](std::size_t self) {
      accumulate(a, seqchat::scale(nodes_[self].grad, s));
    });
  }

  Var add_const(Var a, T c) {
    auto out = seqchat::add_const(value(a), c);
    return push(std::move(out), needs(a),
                [this, a](std::size_t self) { accumulate(a, nodes_[self].grad); });
  }

  // x (n x m) plus a (1 x m) row broadcast over every row.
  Var add_row(Var x, Var bias) {
    const auto& xv = value(x);
    const auto& bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
      throw ShapeMismatch("add_row: " + shape_string(xv.rows(), xv.cols()) + " + " +
                          shape_string(bv.rows(), bv.cols()));
    }
    Matrix<T> out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
    }
    return push(std::move(out), any_grad(x, bias), [this, x, bias](std::size_t self) {
      const auto& g = nodes_[self].grad;
      if (needs(x)) accumulate(x, g);
      if (needs(bias)) {
        Matrix<T> gb(1, g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto row = g.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
        }
        accumulate(bias, gb);
      }
    });
  }

  // x (n x m) with row r multiplied by col(r, 0).
  Var scale_rows(Var x, Var col) {
    const auto& xv = value(x);
    const auto& cv = value(col);
    if (cv.cols() != 1 || cv.rows() != xv.rows()) {
      throw ShapeMismatch("scale_rows: " + shape_string(xv.rows(), xv.cols()) + " by " +
                          shape_string(cv.rows(), cv.cols()));
    }
    Matrix<T> out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (T& v : out.row(r)) v *= cv[r];
    }
    return push(std::move(out), any_grad(x, col), [this, x, col](std::size_t self) {
      const auto& g = nodes_[self].grad;
      const auto& xv = value(x);
      const auto& cv = value(col);
      if (needs(x)) {
        Matrix<T> gx = g;
        for (std::size_t r = 0; r < gx.rows(); ++r) {
          for (T& v : gx.row(r)) v *= cv[r];
        }
        accumulate(x, gx);
      }
      if (needs(col)) {
        Matrix<T> gc(cv.rows(), 1);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row(r);
          auto xr = xv.row(r);
          T acc{0};
          for (std::size_t c = 0; c < gr.size(); ++c) acc += gr[c] * xr[c];
          gc[r] = acc;
        }
        accumulate(col, gc);
      }
    });
  }

  Var softmax_rows(Var a) {
    auto out = seqchat::softmax_rows(value(a));
    return push(std::move(out), needs(a), [this, a](std::size_t self) {
      const auto& y = nodes_[self].value;
      const auto& g = nodes_[self].grad;
      Matrix<T> gx(y.rows(), y.cols());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto yr = y.row(r);
        auto gr = g.row(r);
        T dot{0};
        for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
        auto out_row = gx.row(r);
        for (std::size_t c = 0; c < yr.size(); ++c) out_row[c] = yr[c] * (gr[c] - dot);
      }
      accumulate(a, gx);
    });
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    bool grad = false;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
      cols += value(p).cols();
      grad = grad || needs(p);
    }
    Matrix<T> out(rows, cols);
    std::size_t offset = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + offset);
      }
      offset += pv.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return push(std::move(out), grad, [this, inputs](std::size_t self) {
      const auto& g = nodes_[self].grad;
      std::size_t offset = 0;
      for (Var p : inputs) {
        const std::size_t pc = value(p).cols();
        if (needs(p)) {
          Matrix<T> gp(g.rows(), pc);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            auto src = g.row(r).subspan(offset, pc);
            std::copy(src.begin(), src.end(), gp.row(r).begin());
          }
          accumulate(p, gp);
        }
        offset += pc;
      }
    });
  }

  Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    bool grad = false;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw ShapeMismatch("concat_rows: column counts differ");
      rows += value(p).rows();
      grad = grad || needs(p);
    }
    Matrix<T> out(rows, cols);
    auto dst = out.data().begin();
    for (Var p : parts) dst = std::copy(value(p).data().begin(), value(p).data().end(), dst);
    std::vector<Var> inputs(parts.begin(), parts.end());
    return push(std::move(out), grad, [this, inputs](std::size_t self) {
      const auto& g = nodes_[self].grad;
      std::size_t offset = 0;
      for (Var p : inputs) {
        const auto& pv = value(p);
        if (needs(p)) {
          Matrix<T> gp(pv.rows(), pv.cols());
          auto src = g.data().subspan(offset, pv.size());
          std::copy(src.begin(), src.end(), gp.data().begin());
          accumulate(p, gp);
        }
        offset += pv.size();
      }
    });
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const auto& av = value(a);
    if (begin + count > av.cols()) throw ShapeMismatch("slice_cols: range outside matrix");
    Matrix<T> out(av.rows(), count);
    for (std::size_t r = 0; r < av.rows(); ++r) {
      auto src = av.row(r).subspan(begin, count);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return push(std::move(out), needs(a), [this, a, begin, count](std::size_t self) {
      const auto& g = nodes_[self].grad;
      const auto& av = value(a);
      Matrix<T> ga(av.rows(), av.cols());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        std::copy(g.row(r).begin(), g.row(r).end(), ga.row(r).begin() + begin);
      }
      (void)count;
      accumulate(a, ga);
    });
  }

  // Row r of the result is table row ids[r]; the gradient scatters back.
  Var gather_rows(Var table, std::span<const int> ids) {
    const auto& tv = value(table);
    Matrix<T> out(ids.size(), tv.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
        throw IndexOutOfVocab("lookup id " + std::to_string(ids[r]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
      }
      auto src = tv.row(static_cast<std::size_t>(ids[r]));
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return push(std::move(out), needs(table), [this, table, idx](std::size_t self) {
      const auto& g = nodes_[self].grad;
      Matrix<T>& gt = grad_slot(table);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        auto dst = gt.row(static_cast<std::size_t>(idx[r]));
        auto src = g.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
    });
  }

  // Entries with mask[i] != 0 are replaced by fill and pass no gradient.
  Var masked_fill(Var a, std::span<const std::uint8_t> mask, T fill) {
    const auto& av = value(a);
    if (mask.size() != av.size()) throw ShapeMismatch("masked_fill: mask size differs");
    Matrix<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (mask[i]) out[i] = fill;
    }
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    return push(std::move(out), needs(a), [this, a, m](std::size_t self) {
      Matrix<T> ga = nodes_[self].grad;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (m[i]) ga[i] = T{0};
      }
      accumulate(a, ga);
    });
  }

  Var sum(Var a) {
    T total{0};
    for (T v : value(a).data()) total += v;
    Matrix<T> out(1, 1, total);
    return push(std::move(out), needs(a), [this, a](std::size_t self) {
      const T g = nodes_[self].grad[0];
      const auto& av = value(a);
      accumulate(a, Matrix<T>(av.rows(), av.cols(), g));
    });
  }

  // Mean masked negative log-likelihood as a (1 x 1) node. mask[r] != 0 skips
  // row r; if every row is skipped the loss is 0 and no gradient flows.
  Var cross_entropy(Var logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
    const auto& lv = value(logits);
    const T loss = seqchat::cross_entropy(lv, targets, mask);
    std::size_t count = 0;
    for (auto m : mask) count += m ? 0 : 1;
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    return push(Matrix<T>(1, 1, loss), needs(logits) && count > 0,
                [this, logits, tgt, msk, count](std::size_t self) {
                  const T g = nodes_[self].grad[0];
                  const auto probs = seqchat::softmax_rows(value(logits));
                  Matrix<T> gl(probs.rows(), probs.cols());
                  const T w = g / static_cast<T>(count);
                  for (std::size_t r = 0; r < probs.rows(); ++r) {
                    if (msk[r]) continue;
                    auto pr = probs.row(r);
                    auto out = gl.row(r);
                    for (std::size_t c = 0; c < pr.size(); ++c) out[c] = w * pr[c];
                    out[static_cast<std::size_t>(tgt[r])] -= w;
                  }
                  accumulate(logits, gl);
                });
  }

  // Runs reverse accumulation from a (1 x 1) node.
  void backward(Var loss) {
    if (backward_done_) throw TapeReplayError("backward already ran on this tape");
    if (!loss.valid() || loss.id >= nodes_.size()) throw TapeReplayError("loss node not on tape");
    const auto& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) throw TapeReplayError("loss node is not a scalar");
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad = Matrix<T>(1, 1, T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(id);
    }
  }

  // Gradient of every parameter leaf keyed by name; zero when untouched.
  Gradients<T> parameter_gradients() const {
    Gradients<T> out;
    for (Var p : params_) {
      const Node& n = nodes_[p.id];
      const auto& v = *n.external;
      Matrix<T> g = n.grad.empty() ? Matrix<T>(v.rows(), v.cols()) : n.grad;
      auto [it, inserted] = out.emplace(n.name, std::move(g));
      if (!inserted) {
        for (std::size_t i = 0; i < it->second.size(); ++i) it->second[i] += n.grad.empty() ? T{0} : n.grad[i];
      }
    }
    return out;
  }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* external = nullptr;
    Matrix<T> grad;
    bool needs_grad = false;
    std::string name;
    std::function<void(std::size_t)> backward;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw TapeReplayError("variable not on this tape");
    return nodes_[v.id];
  }

  bool needs(Var v) const { return node(v).needs_grad; }
  bool any_grad(Var a, Var b) const { return needs(a) || needs(b); }

  Var push(Matrix<T> v, bool needs_grad, std::function<void(std::size_t)> bw) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Matrix<T>& grad_slot(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) {
      const auto& val = n.external ? *n.external : n.value;
      n.grad = Matrix<T>(val.rows(), val.cols());
    }
    return n.grad;
  }

  void accumulate(Var v, const Matrix<T>& g) {
    if (!nodes_[v.id].needs_grad) return;
    Matrix<T>& slot = grad_slot(v);
    require_same_shape(slot, g, "gradient accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  std::vector<Node> nodes_;
  std::vector<Var> params_;
  Fault fault_ = Fault::none;
  bool backward_done_ = false;
};

// Reverse pass from `loss`, returning gradients for every parameter leaf.
template <class T>
Gradients<T> backward(Tape<T>& tape, Var loss) {
  tape.backward(loss);
  return tape.parameter_gradients();
}

}  // namespace seqchat
