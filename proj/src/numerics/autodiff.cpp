#include "pdraft/numerics/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace pdraft {

Var Tape::constant(Tensor2D value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor2D value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::external(const Tensor2D& value, bool requires_grad) {
  Node n;
  n.external = &value;
  n.requires_grad = recording_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor2D Tape::grad_or_zero(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) {
    const Tensor2D& val = value(v.id);
    return Tensor2D::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

Tensor2D& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Tensor2D& val = value(id);
    n.grad = Tensor2D::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

Var Tape::push(Tensor2D value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (const Var& in : inputs) {
      if (nodes_[in.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw IntegrityError("backward: loss recorded on another tape");
  const Tensor2D& lv = value(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw DimensionError("backward: loss must be 1x1, got " + shape_string(lv.rows(), lv.cols()));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id].requires_grad) return;
  grad_slot(loss.id)(0, 0) = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(*this, i);
  }
}

namespace {

Tape& common_tape(Var a, Var b) {
  if (a.tape != b.tape) throw IntegrityError("operands recorded on different tapes");
  return *a.tape;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const Tensor2D& av = a.value();
  const Tensor2D& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: " + shape_string(av.rows(), av.cols()) + " x " +
                         shape_string(bv.rows(), bv.cols()));
  }
  Tensor2D out = av * bv;
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(a, g * b.value().transpose());
    tp.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const Tensor2D& av = a.value();
  const Tensor2D& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: " + shape_string(av.rows(), av.cols()) + " x (" +
                         shape_string(bv.rows(), bv.cols()) + ")^T");
  }
  Tensor2D out = av * bv.transpose();
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(a, g * b.value());
    tp.accumulate(b, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor2D out = a.value() + b.value();
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor2D out = a.value() - b.value();
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = common_tape(a, row);
  const Tensor2D& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != a.cols()) {
    throw DimensionError("add_row: row " + shape_string(rv.rows(), rv.cols()) + " for matrix " +
                         shape_string(a.rows(), a.cols()));
  }
  Tensor2D out = a.value().rowwise() + rv.row(0);
  return t.push(std::move(out), {a, row}, [a, row](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(a, g);
    tp.accumulate(row, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Tensor2D out = a.value() * s;
  return a.tape->push(std::move(out), {a}, [a, s](Tape& tp, std::size_t self) {
    tp.accumulate(a, tp.grad(self) * s);
  });
}

Var mul_scalar(Var a, Var s) {
  Tape& t = common_tape(a, s);
  const Tensor2D& sv = s.value();
  if (sv.rows() != 1 || sv.cols() != 1) {
    throw DimensionError("mul_scalar: scalar must be 1x1, got " + shape_string(sv.rows(), sv.cols()));
  }
  Tensor2D out = a.value() * sv(0, 0);
  return t.push(std::move(out), {a, s}, [a, s](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(a, g * s.value()(0, 0));
    Tensor2D ds(1, 1);
    ds(0, 0) = g.cwiseProduct(a.value()).sum();
    tp.accumulate(s, ds);
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "hadamard");
  Tensor2D out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(a, g.cwiseProduct(b.value()));
    tp.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var hadamard_const(Var a, const Tensor2D& m) {
  require_same_shape(a.value(), m, "hadamard_const");
  Tensor2D out = a.value().cwiseProduct(m);
  auto saved = std::make_shared<Tensor2D>(m);
  return a.tape->push(std::move(out), {a}, [a, saved](Tape& tp, std::size_t self) {
    tp.accumulate(a, tp.grad(self).cwiseProduct(*saved));
  });
}

Var silu(Var a) {
  const Tensor2D& x = a.value();
  Tensor2D sig = (1.0 + (-x.array()).exp()).inverse().matrix();
  Tensor2D out = x.cwiseProduct(sig);
  auto saved = std::make_shared<Tensor2D>(std::move(sig));
  return a.tape->push(std::move(out), {a}, [a, saved](Tape& tp, std::size_t self) {
    const Tensor2D& s = *saved;
    const Tensor2D& xv = a.value();
    Tensor2D d = (s.array() * (1.0 + xv.array() * (1.0 - s.array()))).matrix();
    tp.accumulate(a, tp.grad(self).cwiseProduct(d));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = common_tape(x, gain);
  common_tape(x, bias);
  const Tensor2D& xv = x.value();
  const Eigen::Index n = xv.rows();
  const Eigen::Index c = xv.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(c));
  }
  auto xhat = std::make_shared<Tensor2D>(n, c);
  auto inv_std = std::make_shared<ColVector<double>>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = xv.row(i).mean();
    const double var = (xv.row(i).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(i) = is;
    xhat->row(i) = (xv.row(i).array() - mean) * is;
  }
  Tensor2D out = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() +
                 bias.value().row(0).array();
  return t.push(std::move(out), {x, gain, bias},
                [x, gain, bias, xhat, inv_std](Tape& tp, std::size_t self) {
                  const Tensor2D& g = tp.grad(self);
                  const Tensor2D& xh = *xhat;
                  if (tp.requires_grad(gain.id)) tp.accumulate(gain, g.cwiseProduct(xh).colwise().sum());
                  if (tp.requires_grad(bias.id)) tp.accumulate(bias, g.colwise().sum());
                  if (!tp.requires_grad(x.id)) return;
                  Tensor2D dxhat = g.array().rowwise() * gain.value().row(0).array();
                  const double inv_c = 1.0 / static_cast<double>(xh.cols());
                  Tensor2D dx(xh.rows(), xh.cols());
                  for (Eigen::Index i = 0; i < xh.rows(); ++i) {
                    const double m1 = dxhat.row(i).sum() * inv_c;
                    const double m2 = dxhat.row(i).dot(xh.row(i)) * inv_c;
                    dx.row(i) = (dxhat.row(i).array() - m1 - xh.row(i).array() * m2) * (*inv_std)(i);
                  }
                  tp.accumulate(x, dx);
                });
}

Tensor2D softmax_masked_values(const Tensor2D& logits, const BitMatrix& mask) {
  if (mask.rows() != static_cast<std::size_t>(logits.rows()) ||
      mask.cols() != static_cast<std::size_t>(logits.cols())) {
    throw DimensionError("softmax_masked: mask " + shape_string(mask.rows(), mask.cols()) +
                         " for logits " + shape_string(logits.rows(), logits.cols()));
  }
  Tensor2D out = Tensor2D::Zero(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (mask.test(i, j)) {
        any = true;
        mx = std::max(mx, logits(i, j));
      }
    }
    if (!any) throw DegenerateRowError("softmax_masked: row " + std::to_string(i) + " fully masked");
    double total = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (mask.test(i, j)) {
        const double e = std::exp(logits(i, j) - mx);
        out(i, j) = e;
        total += e;
      }
    }
    out.row(i) /= total;
  }
  return out;
}

Var softmax_masked(Var logits, const BitMatrix& mask) {
  Tensor2D out = softmax_masked_values(logits.value(), mask);
  return logits.tape->push(std::move(out), {logits}, [logits](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    const Tensor2D& p = tp.value(self);
    ColVector<double> dots = g.cwiseProduct(p).rowwise().sum();
    Tensor2D d = p.cwiseProduct(g.colwise() - dots);
    tp.accumulate(logits, d);
  });
}

Var gather_rows(Var table, std::span<const int> rows) {
  const Tensor2D& tv = table.value();
  Tensor2D out(static_cast<Eigen::Index>(rows.size()), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tv.rows()) {
      throw RangeError("gather_rows: index " + std::to_string(rows[i]) + " outside [0, " +
                       std::to_string(tv.rows()) + ")");
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
  }
  auto idx = std::make_shared<std::vector<int>>(rows.begin(), rows.end());
  return table.tape->push(std::move(out), {table}, [table, idx](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    Tensor2D& dst = tp.grad_slot(table.id);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      dst.row((*idx)[i]) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var vstack(Var top, Var bottom) {
  Tape& t = common_tape(top, bottom);
  const Tensor2D& a = top.value();
  const Tensor2D& b = bottom.value();
  if (a.cols() != b.cols() && a.rows() != 0 && b.rows() != 0) {
    throw DimensionError("vstack: " + shape_string(a.rows(), a.cols()) + " over " +
                         shape_string(b.rows(), b.cols()));
  }
  Tensor2D out(a.rows() + b.rows(), a.rows() != 0 ? a.cols() : b.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  const Eigen::Index na = a.rows();
  return t.push(std::move(out), {top, bottom}, [top, bottom, na](Tape& tp, std::size_t self) {
    const Tensor2D& g = tp.grad(self);
    tp.accumulate(top, g.topRows(na));
    tp.accumulate(bottom, g.bottomRows(g.rows() - na));
  });
}

Var sum(Var a) {
  Tensor2D out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), {a}, [a](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)(0, 0);
    tp.accumulate(a, Tensor2D::Constant(a.rows(), a.cols(), g));
  });
}

void rope_in_place(Tensor2D& x, std::span<const int> positions, double base, int direction) {
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) {
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(x.rows()) + " rows");
  }
  if (x.cols() % 2 != 0) throw DimensionError("rope: width must be even");
  const Eigen::Index half = x.cols() / 2;
  for (Eigen::Index j = 0; j < half; ++j) {
    const double theta =
        std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(x.cols()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double angle = direction * positions[static_cast<std::size_t>(i)] * theta;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      const double a = x(i, 2 * j);
      const double b = x(i, 2 * j + 1);
      x(i, 2 * j) = c * a - s * b;
      x(i, 2 * j + 1) = s * a + c * b;
    }
  }
}

Var rope(Var x, std::span<const int> positions, double base) {
  Tensor2D out = x.value();
  rope_in_place(out, positions, base, 1);
  auto pos = std::make_shared<std::vector<int>>(positions.begin(), positions.end());
  return x.tape->push(std::move(out), {x}, [x, pos, base](Tape& tp, std::size_t self) {
    Tensor2D g = tp.grad(self);
    rope_in_place(g, *pos, base, -1);
    tp.accumulate(x, g);
  });
}

Var cross_entropy(Var logits, std::span<const int> labels, std::span<const double> weights,
                  double denom) {
  const Tensor2D& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.rows() || weights.size() != labels.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels, " +
                         std::to_string(weights.size()) + " weights for " +
                         std::to_string(z.rows()) + " rows");
  }
  if (!(denom > 0.0)) throw DomainError("cross_entropy: denominator must be positive");
  auto probs = std::make_shared<Tensor2D>(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    probs->row(i) = (z.row(i).array() - mx).exp();
    const double se = probs->row(i).sum();
    probs->row(i) /= se;
    const double w = weights[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) {
      throw RangeError("cross_entropy: label " + std::to_string(y) + " outside vocabulary");
    }
    total += w * (std::log(se) + mx - z(i, y));
  }
  Tensor2D out(1, 1);
  out(0, 0) = total / denom;
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  auto wts = std::make_shared<std::vector<double>>(weights.begin(), weights.end());
  return logits.tape->push(std::move(out), {logits},
                           [logits, probs, lab, wts, denom](Tape& tp, std::size_t self) {
                             const double g = tp.grad(self)(0, 0);
                             Tensor2D d = Tensor2D::Zero(probs->rows(), probs->cols());
                             for (Eigen::Index i = 0; i < d.rows(); ++i) {
                               const double w = (*wts)[static_cast<std::size_t>(i)];
                               if (w == 0.0) continue;
                               const double f = g * w / denom;
                               d.row(i) = probs->row(i) * f;
                               d(i, (*lab)[static_cast<std::size_t>(i)]) -= f;
                             }
                             tp.accumulate(logits, d);
                           });
}

}  // namespace pdraft
