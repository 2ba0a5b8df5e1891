#include "shiftlab/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace shiftlab::ad {

const Matrix& Var::value() const { return tape->value(id); }
const Matrix& Var::grad() const { return tape->grad(id); }

double Var::scalar() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::logic_error("Var::scalar on non-scalar node");
  }
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Matrix value, bool requires_grad, BackwardFn backward) {
  nodes_.push_back(
      Node{std::move(value), {}, requires_grad, false,
           requires_grad ? std::move(backward) : BackwardFn{}});
  return Var{this, nodes_.size() - 1};
}

const Matrix& Tape::grad(std::size_t id) const {
  const auto& n = nodes_[id];
  if (!n.has_grad) {
    zero_ = Matrix::Zero(n.value.rows(), n.value.cols());
    return zero_;
  }
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::logic_error("Tape::backward: root must be scalar");
  }
  backward(root, Matrix::Ones(1, 1));
}

void Tape::backward(Var root, const Matrix& seed) {
  if (root.tape != this) throw std::logic_error("Tape::backward: foreign node");
  for (auto& n : nodes_) {
    n.has_grad = false;
  }
  accumulate(root.id, seed);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, i);
  }
}

namespace {

bool rg(Var v) { return v.tape->requires_grad(v.id); }

void check_same(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": mixed tapes");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var add(Var a, Var b) {
  check_same(a, b, "add");
  auto* t = a.tape;
  return t->record(a.value() + b.value(), rg(a) || rg(b),
                   [a, b](Tape& t, std::size_t self) {
                     const Matrix& g = t.grad(self);
                     t.accumulate(a.id, g);
                     t.accumulate(b.id, g);
                   });
}

Var sub(Var a, Var b) {
  check_same(a, b, "sub");
  auto* t = a.tape;
  return t->record(a.value() - b.value(), rg(a) || rg(b),
                   [a, b](Tape& t, std::size_t self) {
                     const Matrix& g = t.grad(self);
                     t.accumulate(a.id, g);
                     t.accumulate(b.id, -g);
                   });
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  auto* t = a.tape;
  return t->record(a.value().cwiseProduct(b.value()), rg(a) || rg(b),
                   [a, b](Tape& t, std::size_t self) {
                     const Matrix& g = t.grad(self);
                     if (rg(a)) t.accumulate(a.id, g.cwiseProduct(b.value()));
                     if (rg(b)) t.accumulate(b.id, g.cwiseProduct(a.value()));
                   });
}

Var mul(Var a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    throw std::invalid_argument("mul(const): shape mismatch");
  }
  auto* t = a.tape;
  return t->record(a.value().cwiseProduct(c), rg(a),
                   [a, c](Tape& t, std::size_t self) {
                     t.accumulate(a.id, t.grad(self).cwiseProduct(c));
                   });
}

Var scale(Var a, double s) {
  auto* t = a.tape;
  return t->record(a.value() * s, rg(a), [a, s](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.grad(self) * s);
  });
}

Var add_scalar(Var a, double s) {
  auto* t = a.tape;
  return t->record(a.value().array() + s, rg(a),
                   [a](Tape& t, std::size_t self) { t.accumulate(a.id, t.grad(self)); });
}

Var neg(Var a) { return scale(a, -1.0); }

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: row must be 1 x cols");
  }
  auto* t = a.tape;
  Matrix v = a.value().rowwise() + row.value().row(0);
  return t->record(std::move(v), rg(a) || rg(row),
                   [a, row](Tape& t, std::size_t self) {
                     const Matrix& g = t.grad(self);
                     t.accumulate(a.id, g);
                     if (rg(row)) t.accumulate(row.id, g.colwise().sum());
                   });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  auto* t = a.tape;
  return t->record(a.value() * b.value(), rg(a) || rg(b),
                   [a, b](Tape& t, std::size_t self) {
                     const Matrix& g = t.grad(self);
                     if (rg(a)) t.accumulate(a.id, g * b.value().transpose());
                     if (rg(b)) t.accumulate(b.id, a.value().transpose() * g);
                   });
}

Var hcat(Var a, Var b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("hcat: row mismatch");
  auto* t = a.tape;
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const auto ac = a.cols();
  const auto bc = b.cols();
  return t->record(std::move(v), rg(a) || rg(b),
                   [a, b, ac, bc](Tape& t, std::size_t self) {
                     const Matrix& g = t.grad(self);
                     if (rg(a)) t.accumulate(a.id, g.leftCols(ac));
                     if (rg(b)) t.accumulate(b.id, g.rightCols(bc));
                   });
}

Var cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::invalid_argument("cols: range out of bounds");
  }
  auto* t = a.tape;
  return t->record(a.value().middleCols(start, count), rg(a),
                   [a, start, count](Tape& t, std::size_t self) {
                     Matrix g = Matrix::Zero(a.rows(), a.cols());
                     g.middleCols(start, count) = t.grad(self);
                     t.accumulate(a.id, g);
                   });
}

Var tanh(Var a) {
  auto* t = a.tape;
  Matrix v = a.value().array().tanh();
  return t->record(v, rg(a), [a, v](Tape& t, std::size_t self) {
    t.accumulate(a.id, (t.grad(self).array() * (1.0 - v.array().square())).matrix());
  });
}

Var relu(Var a) {
  auto* t = a.tape;
  Matrix v = a.value().cwiseMax(0.0);
  return t->record(v, rg(a), [a](Tape& t, std::size_t self) {
    Matrix mask = (a.value().array() > 0.0).cast<double>();
    t.accumulate(a.id, t.grad(self).cwiseProduct(mask));
  });
}

Var sigmoid(Var a) {
  auto* t = a.tape;
  Matrix v = (1.0 + (-a.value().array()).exp()).inverse();
  return t->record(v, rg(a), [a, v](Tape& t, std::size_t self) {
    t.accumulate(a.id, (t.grad(self).array() * v.array() * (1.0 - v.array())).matrix());
  });
}

Var exp(Var a) {
  auto* t = a.tape;
  Matrix v = a.value().array().exp();
  return t->record(v, rg(a), [a, v](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.grad(self).cwiseProduct(v));
  });
}

Var log(Var a) {
  auto* t = a.tape;
  return t->record(a.value().array().log(), rg(a), [a](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.grad(self).cwiseQuotient(a.value()));
  });
}

Var square(Var a) {
  auto* t = a.tape;
  return t->record(a.value().array().square(), rg(a), [a](Tape& t, std::size_t self) {
    t.accumulate(a.id, 2.0 * t.grad(self).cwiseProduct(a.value()));
  });
}

Var sum(Var a) {
  auto* t = a.tape;
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return t->record(std::move(v), rg(a), [a](Tape& t, std::size_t self) {
    t.accumulate(a.id, Matrix::Constant(a.rows(), a.cols(), t.grad(self)(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(Var a) {
  auto* t = a.tape;
  return t->record(a.value().rowwise().sum(), rg(a), [a](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.grad(self).replicate(1, a.cols()));
  });
}

Var weighted_sum(Var a, const Vector& w) {
  if (a.cols() != 1 || a.rows() != w.size()) {
    throw std::invalid_argument("weighted_sum: expects an n x 1 column and n weights");
  }
  auto* t = a.tape;
  Matrix v(1, 1);
  v(0, 0) = a.value().col(0).dot(w);
  return t->record(std::move(v), rg(a), [a, w](Tape& t, std::size_t self) {
    t.accumulate(a.id, (w * t.grad(self)(0, 0)).eval());
  });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Vector cross_entropy_rows(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy: label count mismatch");
  }
  Vector out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw std::out_of_range("cross_entropy: label out of range");
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out(i) = lse - logits(i, y);
  }
  return out;
}

Var softmax(Var logits) {
  auto* t = logits.tape;
  Matrix p = softmax_rows(logits.value());
  return t->record(p, rg(logits), [logits, p](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Vector dot = (g.cwiseProduct(p)).rowwise().sum();
    Matrix gi = p.cwiseProduct(g.colwise() - dot);
    t.accumulate(logits.id, gi);
  });
}

Var log_softmax(Var logits) {
  auto* t = logits.tape;
  Matrix p = softmax_rows(logits.value());
  Matrix v = p.array().log();
  return t->record(std::move(v), rg(logits), [logits, p](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Vector gs = g.rowwise().sum();
    Matrix gi = g - (p.array().colwise() * gs.array()).matrix();
    t.accumulate(logits.id, gi);
  });
}

Var pick(Var a, std::span<const int> index) {
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) {
    throw std::invalid_argument("pick: index count mismatch");
  }
  std::vector<int> idx(index.begin(), index.end());
  Matrix v(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int c = idx[static_cast<std::size_t>(i)];
    if (c < 0 || c >= a.cols()) throw std::out_of_range("pick: index out of range");
    v(i, 0) = a.value()(i, c);
  }
  auto* t = a.tape;
  return t->record(std::move(v), rg(a), [a, idx](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix ga = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) ga(i, idx[static_cast<std::size_t>(i)]) = g(i, 0);
    t.accumulate(a.id, ga);
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Vector loss = cross_entropy_rows(logits.value(), labels);
  std::vector<int> y(labels.begin(), labels.end());
  auto* t = logits.tape;
  return t->record(Matrix(loss), rg(logits), [logits, y](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix p = softmax_rows(logits.value());
    for (Eigen::Index i = 0; i < p.rows(); ++i) p(i, y[static_cast<std::size_t>(i)]) -= 1.0;
    t.accumulate(logits.id, (p.array().colwise() * g.col(0).array()).matrix());
  });
}

Var bce_with_logits(Var logits, const Matrix& targets, const Matrix& weight) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols() ||
      weight.rows() != logits.rows() || weight.cols() != logits.cols()) {
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  }
  const Matrix& z = logits.value();
  // log(1 + e^{-|z|}) + max(z, 0) - z * t
  Matrix v = ((-z.array().abs()).exp().log1p() + z.array().max(0.0) - z.array() * targets.array()) *
             weight.array();
  auto* t = logits.tape;
  return t->record(std::move(v), rg(logits),
                   [logits, targets, weight](Tape& t, std::size_t self) {
                     Matrix s = (1.0 + (-logits.value().array()).exp()).inverse();
                     Matrix gi = ((s - targets).array() * weight.array() *
                                  t.grad(self).array()).matrix();
                     t.accumulate(logits.id, gi);
                   });
}

}  // namespace shiftlab::ad
