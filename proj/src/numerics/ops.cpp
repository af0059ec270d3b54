// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/numerics/ops.h"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "nmtforge/errors.h"

namespace nmtforge {
namespace {

Graph& same_graph(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw StateError("op on an empty Var");
  if (&a.graph() != &b.graph()) throw StateError("op mixes Vars of different graphs");
  return a.graph();
}

std::string dims(const Tensor& t) { return shape_string({t.rows(), t.cols()}); }

// Broadcast geometry of a binary elementwise op.
struct Broadcast {
  int64_t rows = 0;
  int64_t cols = 0;

  static int64_t index(const Tensor& t, int64_t r, int64_t c) {
    return (t.rows() == 1 ? 0 : r) * t.cols() + (t.cols() == 1 ? 0 : c);
  }
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  auto dim = [&](int64_t x, int64_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast " + dims(a) + " with " + dims(b));
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

// Accumulates an output-shaped gradient into a possibly broadcast input.
void accumulate_reduced(Tensor& target, const Tensor& g, const Broadcast& bc) {
  if (target.rows() == bc.rows && target.cols() == bc.cols) {
    target.matrix() += g.matrix();
    return;
  }
  if (target.rows() == 1 && target.cols() == bc.cols) {
    target.matrix() += g.matrix().colwise().sum();
    return;
  }
  if (target.cols() == 1 && target.rows() == bc.rows) {
    target.matrix() += g.matrix().rowwise().sum();
    return;
  }
  target[0] += g.matrix().sum();
}

template <typename F>
Tensor elementwise(const Tensor& a, const Tensor& b, const Broadcast& bc, F f) {
  Tensor out({bc.rows, bc.cols});
  if (a.rows() == bc.rows && a.cols() == bc.cols && b.rows() == bc.rows && b.cols() == bc.cols) {
    for (int64_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  for (int64_t r = 0; r < bc.rows; ++r) {
    for (int64_t c = 0; c < bc.cols; ++c) {
      out(r, c) = f(a[Broadcast::index(a, r, c)], b[Broadcast::index(b, r, c)]);
    }
  }
  return out;
}

Var add_or_sub(Var a, Var b, Real sign, const char* op) {
  Graph& g = same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, op);
  Tensor out = elementwise(av, bv, bc, [sign](Real x, Real y) { return x + sign * y; });
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, bc, sign](Graph& g, int self) {
                    const Tensor& d = g.grad(self);
                    if (g.requires_grad(ia)) accumulate_reduced(g.grad(ia), d, bc);
                    if (g.requires_grad(ib)) {
                      if (sign > 0) {
                        accumulate_reduced(g.grad(ib), d, bc);
                      } else {
                        Tensor neg = d;
                        neg.matrix() *= -1.0;
                        accumulate_reduced(g.grad(ib), neg, bc);
                      }
                    }
                  },
                  op);
}

void check_segments(std::span<const int64_t> offsets, int64_t rows, const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows) {
    throw ShapeError(std::string(op) + ": segment offsets must run from 0 to " + std::to_string(rows));
  }
  for (size_t s = 1; s < offsets.size(); ++s) {
    if (offsets[s] < offsets[s - 1]) throw ShapeError(std::string(op) + ": offsets not monotone");
  }
}

void check_targets(std::span<const int> targets, const Tensor& t, const char* op) {
  if (static_cast<int64_t>(targets.size()) != t.rows()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(t.rows()) + " rows");
  }
  for (int y : targets) {
    if (y < 0 || y >= t.cols()) throw ShapeError(std::string(op) + ": target out of range");
  }
}

// Row-wise numerically stable softmax of a matrix.
RowMatrix row_softmax(const ConstMatrixMap& x) {
  RowMatrix p = x.colwise() - x.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) throw ShapeError("matmul: " + dims(av) + " x " + dims(bv));
  Tensor out({av.rows(), bv.cols()});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib](Graph& g, int self) {
                    const Tensor& d = g.grad(self);
                    if (g.requires_grad(ia)) g.grad(ia).matrix().noalias() += d.matrix() * g.value(ib).matrix().transpose();
                    if (g.requires_grad(ib)) g.grad(ib).matrix().noalias() += g.value(ia).matrix().transpose() * d.matrix();
                  },
                  "matmul");
}

Var add(Var a, Var b) { return add_or_sub(a, b, 1.0, "add"); }
Var sub(Var a, Var b) { return add_or_sub(a, b, -1.0, "sub"); }

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, "mul");
  Tensor out = elementwise(av, bv, bc, [](Real x, Real y) { return x * y; });
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib},
                  [ia, ib, bc](Graph& g, int self) {
                    const Tensor& d = g.grad(self);
                    const Tensor& av = g.value(ia);
                    const Tensor& bv = g.value(ib);
                    if (g.requires_grad(ia)) {
                      accumulate_reduced(g.grad(ia), elementwise(d, bv, bc, [](Real x, Real y) { return x * y; }), bc);
                    }
                    if (g.requires_grad(ib)) {
                      accumulate_reduced(g.grad(ib), elementwise(d, av, bc, [](Real x, Real y) { return x * y; }), bc);
                    }
                  },
                  "mul");
}

Var scale(Var a, Real factor) { return affine(a, factor, 0.0); }

Var affine(Var a, Real factor, Real shift) {
  Graph& g = a.graph();
  Tensor out = a.value();
  out.matrix().array() = out.matrix().array() * factor + shift;
  const int ia = a.id();
  return g.record(std::move(out), {ia},
                  [ia, factor](Graph& g, int self) { g.grad(ia).matrix() += factor * g.grad(self).matrix(); },
                  "affine");
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  if (axis != 0 && axis != 1) throw ShapeError("concat axis must be 0 or 1");
  Graph& g = parts[0].graph();
  std::vector<int> ids;
  std::vector<int64_t> extents;
  int64_t total = 0;
  const int64_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  for (Var p : parts) {
    same_graph(parts[0], p);
    const Tensor& t = p.value();
    if ((axis == 0 ? t.cols() : t.rows()) != fixed) throw ShapeError("concat: mismatched " + dims(t));
    ids.push_back(p.id());
    extents.push_back(axis == 0 ? t.rows() : t.cols());
    total += extents.back();
  }
  Tensor out = axis == 0 ? Tensor({total, fixed}) : Tensor({fixed, total});
  int64_t at = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    const Tensor& t = parts[i].value();
    if (axis == 0) {
      out.matrix().middleRows(at, extents[i]) = t.matrix();
    } else {
      out.matrix().middleCols(at, extents[i]) = t.matrix();
    }
    at += extents[i];
  }
  return g.record(std::move(out), ids,
                  [ids, extents, axis](Graph& g, int self) {
                    const Tensor& d = g.grad(self);
                    int64_t at = 0;
                    for (size_t i = 0; i < ids.size(); ++i) {
                      if (g.requires_grad(ids[i])) {
                        if (axis == 0) {
                          g.grad(ids[i]).matrix() += d.matrix().middleRows(at, extents[i]);
                        } else {
                          g.grad(ids[i]).matrix() += d.matrix().middleCols(at, extents[i]);
                        }
                      }
                      at += extents[i];
                    }
                  },
                  "concat");
}

Var slice(Var a, int axis, int64_t begin, int64_t end) {
  const Tensor& av = a.value();
  const int64_t extent = axis == 0 ? av.rows() : av.cols();
  if ((axis != 0 && axis != 1) || begin < 0 || end > extent || begin > end) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + dims(av));
  }
  Tensor out = axis == 0 ? Tensor({end - begin, av.cols()}) : Tensor({av.rows(), end - begin});
  if (axis == 0) {
    out.matrix() = av.matrix().middleRows(begin, end - begin);
  } else {
    out.matrix() = av.matrix().middleCols(begin, end - begin);
  }
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia, axis, begin, end](Graph& g, int self) {
                            const Tensor& d = g.grad(self);
                            if (axis == 0) {
                              g.grad(ia).matrix().middleRows(begin, end - begin) += d.matrix();
                            } else {
                              g.grad(ia).matrix().middleCols(begin, end - begin) += d.matrix();
                            }
                          },
                          "slice");
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out({av.cols(), av.rows()});
  out.matrix() = av.matrix().transpose();
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph& g, int self) { g.grad(ia).matrix() += g.grad(self).matrix().transpose(); },
                          "transpose");
}

Var gather_rows(Var a, std::span<const int64_t> rows) {
  const Tensor& av = a.value();
  const int64_t n = static_cast<int64_t>(rows.size());
  Tensor out({n, av.cols()});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = rows[static_cast<size_t>(i)];
    if (r < 0 || r >= av.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(i).begin());
  }
  const int ia = a.id();
  std::vector<int64_t> idx(rows.begin(), rows.end());
  return a.graph().record(std::move(out), {ia},
                          [ia, idx = std::move(idx)](Graph& g, int self) {
                            const Tensor& d = g.grad(self);
                            Tensor& ga = g.grad(ia);
                            for (size_t i = 0; i < idx.size(); ++i) {
                              ga.matrix().row(idx[i]) += d.matrix().row(static_cast<int64_t>(i));
                            }
                          },
                          "gather_rows");
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  std::vector<int64_t> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= table.rows()) {
      throw VocabError("embedding id " + std::to_string(id) + " outside table of " +
                       std::to_string(table.rows()));
    }
    rows.push_back(id);
  }
  return gather_rows(table, rows);
}

Var sigmoid(Var a) {
  Tensor out = a.value();
  out.matrix().array() = 1.0 / (1.0 + (-out.matrix().array()).exp());
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph& g, int self) {
                            const auto y = g.value(self).matrix().array();
                            g.grad(ia).matrix().array() += g.grad(self).matrix().array() * y * (1.0 - y);
                          },
                          "sigmoid");
}

Var tanh(Var a) {
  Tensor out = a.value();
  out.matrix().array() = out.matrix().array().tanh();
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph& g, int self) {
                            const auto y = g.value(self).matrix().array();
                            g.grad(ia).matrix().array() += g.grad(self).matrix().array() * (1.0 - y * y);
                          },
                          "tanh");
}

Var relu(Var a) {
  Tensor out = a.value();
  out.matrix() = out.matrix().cwiseMax(0.0);
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph& g, int self) {
                            const auto x = g.value(ia).matrix().array();
                            g.grad(ia).matrix().array() += (x > 0.0).select(g.grad(self).matrix().array(), 0.0);
                          },
                          "relu");
}

Var softmax(Var a) {
  Tensor out({a.rows(), a.cols()});
  out.matrix() = row_softmax(a.value().matrix());
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph& g, int self) {
                            const auto y = g.value(self).matrix().array();
                            const auto d = g.grad(self).matrix().array();
                            const Eigen::ArrayXd dot = (d * y).rowwise().sum();
                            g.grad(ia).matrix().array() += y * (d.colwise() - dot);
                          },
                          "softmax");
}

Var log_softmax(Var a) {
  const auto x = a.value().matrix();
  const Eigen::VectorXd mx = x.rowwise().maxCoeff();
  RowMatrix shifted = x.colwise() - mx;
  const Eigen::ArrayXd lse = shifted.array().exp().rowwise().sum().log();
  Tensor out({a.rows(), a.cols()});
  out.matrix().array() = shifted.array().colwise() - lse;
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph& g, int self) {
                            const auto y = g.value(self).matrix().array();
                            const auto d = g.grad(self).matrix().array();
                            const Eigen::ArrayXd total = d.rowwise().sum();
                            g.grad(ia).matrix().array() += d - y.exp().colwise() * total;
                          },
                          "log_softmax");
}

Var layer_norm(Var x, Var gain, Var bias, Real eps) {
  Graph& g = same_graph(x, gain);
  same_graph(x, bias);
  const Tensor& xv = x.value();
  const int64_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  auto normalized = std::make_shared<Tensor>(Shape{n, d});
  auto inv_std = std::make_shared<std::vector<Real>>(static_cast<size_t>(n));
  Tensor out({n, d});
  const Eigen::RowVectorXd gv = gain.value().matrix().reshaped<Eigen::RowMajor>().transpose();
  const Eigen::RowVectorXd bv = bias.value().matrix().reshaped<Eigen::RowMajor>().transpose();
  for (int64_t r = 0; r < n; ++r) {
    const auto row = xv.matrix().row(r);
    const Real mu = row.mean();
    const Real var = (row.array() - mu).square().mean();
    const Real is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    normalized->matrix().row(r) = (row.array() - mu) * is;
    out.matrix().row(r) = normalized->matrix().row(r).cwiseProduct(gv) + bv;
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.record(std::move(out), {ix, ig, ib},
                  [ix, ig, ib, normalized, inv_std](Graph& g, int self) {
                    const auto d = g.grad(self).matrix();
                    const auto xh = normalized->matrix();
                    if (g.requires_grad(ig)) {
                      Tensor& gg = g.grad(ig);
                      const Eigen::RowVectorXd dg = d.cwiseProduct(xh).colwise().sum();
                      for (int64_t c = 0; c < gg.size(); ++c) gg[c] += dg(c);
                    }
                    if (g.requires_grad(ib)) {
                      Tensor& gb = g.grad(ib);
                      const Eigen::RowVectorXd db = d.colwise().sum();
                      for (int64_t c = 0; c < gb.size(); ++c) gb[c] += db(c);
                    }
                    if (g.requires_grad(ix)) {
                      const Eigen::RowVectorXd gv = g.value(ig).matrix().reshaped<Eigen::RowMajor>().transpose();
                      Tensor& gx = g.grad(ix);
                      const int64_t n = xh.rows();
                      const Real cols = static_cast<Real>(xh.cols());
                      for (int64_t r = 0; r < n; ++r) {
                        const Eigen::RowVectorXd dxh = d.row(r).cwiseProduct(gv);
                        const Real m1 = dxh.sum() / cols;
                        const Real m2 = dxh.dot(xh.row(r)) / cols;
                        gx.matrix().row(r).array() +=
                            (*inv_std)[static_cast<size_t>(r)] * (dxh.array() - m1 - xh.row(r).array() * m2);
                      }
                    }
                  },
                  "layer_norm");
}

Var sum(Var a) {
  Tensor out = Tensor::scalar(a.value().matrix().sum());
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph& g, int self) { g.grad(ia).matrix().array() += g.grad(self)[0]; }, "sum");
}

Var mean(Var a) {
  const Real n = static_cast<Real>(a.value().size());
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var cross_entropy(Var probs, std::span<const int> targets) {
  const Tensor& p = probs.value();
  check_targets(targets, p, "cross_entropy");
  const int64_t n = p.rows();
  Real loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const Real pr = p(r, targets[static_cast<size_t>(r)]);
    if (!(pr > 0.0)) throw NumericError("cross_entropy: zero probability on target");
    loss -= std::log(pr);
  }
  loss /= static_cast<Real>(n);
  const int ip = probs.id();
  std::vector<int> ys(targets.begin(), targets.end());
  return probs.graph().record(Tensor::scalar(loss), {ip},
                              [ip, ys = std::move(ys)](Graph& g, int self) {
                                const Tensor& p = g.value(ip);
                                Tensor& gp = g.grad(ip);
                                const Real d = g.grad(self)[0] / static_cast<Real>(ys.size());
                                for (size_t r = 0; r < ys.size(); ++r) {
                                  const auto rr = static_cast<int64_t>(r);
                                  gp(rr, ys[r]) -= d / p(rr, ys[r]);
                                }
                              },
                              "cross_entropy");
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets, Real smoothing) {
  const Tensor& z = logits.value();
  check_targets(targets, z, "softmax_cross_entropy");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ShapeError("label smoothing must be in [0, 1)");
  const int64_t n = z.rows(), v = z.cols();
  if (n == 0) throw ShapeError("softmax_cross_entropy over zero rows");
  auto probs = std::make_shared<RowMatrix>(row_softmax(z.matrix()));
  Real loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const auto row = z.matrix().row(r);
    const Real mx = row.maxCoeff();
    const Real lse = mx + std::log((row.array() - mx).exp().sum());
    const Real nll = lse - row(targets[static_cast<size_t>(r)]);
    const Real uniform = lse - row.mean();
    loss += (1.0 - smoothing) * nll + smoothing * uniform;
  }
  loss /= static_cast<Real>(n);
  const int iz = logits.id();
  std::vector<int> ys(targets.begin(), targets.end());
  return logits.graph().record(
      Tensor::scalar(loss), {iz},
      [iz, ys = std::move(ys), probs, smoothing, v](Graph& g, int self) {
        const Real d = g.grad(self)[0] / static_cast<Real>(ys.size());
        Tensor& gz = g.grad(iz);
        auto gm = gz.matrix();
        gm.noalias() += d * (*probs);
        gm.array() -= d * smoothing / static_cast<Real>(v);
        for (size_t r = 0; r < ys.size(); ++r) gm(static_cast<int64_t>(r), ys[r]) -= d * (1.0 - smoothing);
      },
      "softmax_cross_entropy");
}

Var token_log_probs(Var logits, std::span<const int> targets) {
  const Tensor& z = logits.value();
  check_targets(targets, z, "token_log_probs");
  const int64_t n = z.rows();
  auto probs = std::make_shared<RowMatrix>(row_softmax(z.matrix()));
  Tensor out({n, 1});
  for (int64_t r = 0; r < n; ++r) {
    const auto row = z.matrix().row(r);
    const Real mx = row.maxCoeff();
    const Real lse = mx + std::log((row.array() - mx).exp().sum());
    out[r] = row(targets[static_cast<size_t>(r)]) - lse;
  }
  const int iz = logits.id();
  std::vector<int> ys(targets.begin(), targets.end());
  return logits.graph().record(std::move(out), {iz},
                               [iz, ys = std::move(ys), probs](Graph& g, int self) {
                                 const Tensor& d = g.grad(self);
                                 auto gm = g.grad(iz).matrix();
                                 for (size_t r = 0; r < ys.size(); ++r) {
                                   const auto rr = static_cast<int64_t>(r);
                                   gm.row(rr) -= d[rr] * probs->row(rr);
                                   gm(rr, ys[r]) += d[rr];
                                 }
                               },
                               "token_log_probs");
}

Var segment_sum(Var a, std::span<const int64_t> offsets) {
  const Tensor& av = a.value();
  check_segments(offsets, av.rows(), "segment_sum");
  const int64_t segs = static_cast<int64_t>(offsets.size()) - 1;
  Tensor out({segs, av.cols()});
  for (int64_t s = 0; s < segs; ++s) {
    const int64_t b = offsets[static_cast<size_t>(s)], e = offsets[static_cast<size_t>(s + 1)];
    out.matrix().row(s) = av.matrix().middleRows(b, e - b).colwise().sum();
  }
  const int ia = a.id();
  std::vector<int64_t> off(offsets.begin(), offsets.end());
  return a.graph().record(std::move(out), {ia},
                          [ia, off = std::move(off)](Graph& g, int self) {
                            const Tensor& d = g.grad(self);
                            auto ga = g.grad(ia).matrix();
                            for (size_t s = 0; s + 1 < off.size(); ++s) {
                              ga.middleRows(off[s], off[s + 1] - off[s]).rowwise() +=
                                  d.matrix().row(static_cast<int64_t>(s));
                            }
                          },
                          "segment_sum");
}

Var cumulative_mean(Var x, std::span<const int64_t> offsets) {
  const Tensor& xv = x.value();
  std::vector<int64_t> off(offsets.begin(), offsets.end());
  if (off.empty()) off = {0, xv.rows()};
  check_segments(off, xv.rows(), "cumulative_mean");
  Tensor out({xv.rows(), xv.cols()});
  for (size_t s = 0; s + 1 < off.size(); ++s) {
    Eigen::RowVectorXd running = Eigen::RowVectorXd::Zero(xv.cols());
    for (int64_t r = off[s]; r < off[s + 1]; ++r) {
      running += xv.matrix().row(r);
      out.matrix().row(r) = running / static_cast<Real>(r - off[s] + 1);
    }
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix},
                          [ix, off = std::move(off)](Graph& g, int self) {
                            const Tensor& d = g.grad(self);
                            auto gx = g.grad(ix).matrix();
                            for (size_t s = 0; s + 1 < off.size(); ++s) {
                              Eigen::RowVectorXd tail = Eigen::RowVectorXd::Zero(d.cols());
                              for (int64_t r = off[s + 1] - 1; r >= off[s]; --r) {
                                tail += d.matrix().row(r) / static_cast<Real>(r - off[s] + 1);
                                gx.row(r) += tail;
                              }
                            }
                          },
                          "cumulative_mean");
}

AttentionLayout AttentionLayout::self(std::span<const int64_t> offsets) {
  AttentionLayout layout;
  layout.q.assign(offsets.begin(), offsets.end());
  layout.k = layout.q;
  return layout;
}

Var attention(Var q, Var k, Var v, const AttentionLayout& layout, int heads, bool causal,
              std::vector<Tensor>* weights) {
  Graph& g = same_graph(q, k);
  same_graph(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const int64_t dk = qv.cols();
  if (kv.cols() != dk) throw ShapeError("attention: query/key widths differ");
  if (kv.rows() != vv.rows()) throw ShapeError("attention: key/value row counts differ");
  if (heads < 1 || dk % heads != 0 || vv.cols() % heads != 0) {
    throw ShapeError("attention: widths must divide into " + std::to_string(heads) + " heads");
  }
  check_segments(layout.q, qv.rows(), "attention(q)");
  if (layout.k_end.empty()) {
    if (layout.q.size() != layout.k.size()) throw ShapeError("attention: layout segment counts differ");
    check_segments(layout.k, kv.rows(), "attention(k)");
  } else {
    if (layout.k.size() != layout.segments() || layout.k_end.size() != layout.segments()) {
      throw ShapeError("attention: key ranges need one begin and end per segment");
    }
    for (size_t s = 0; s < layout.segments(); ++s) {
      if (layout.k[s] < 0 || layout.k[s] > layout.k_end[s] || layout.k_end[s] > kv.rows()) {
        throw ShapeError("attention: key range out of bounds");
      }
    }
  }
  const int64_t hq = dk / heads, hv = vv.cols() / heads;
  const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(hq));
  const size_t segs = layout.segments();

  // probs[s * heads + h] holds the attention matrix of segment s, head h.
  auto probs = std::make_shared<std::vector<RowMatrix>>(segs * static_cast<size_t>(heads));
  Tensor out({qv.rows(), vv.cols()});
  for (size_t s = 0; s < segs; ++s) {
    const int64_t q0 = layout.q[s], nq = layout.q[s + 1] - q0;
    const int64_t k0 = layout.key_begin(s), nk = layout.key_end(s) - k0;
    if (nq == 0) continue;
    if (nk == 0) throw ShapeError("attention: segment with queries but no keys");
    for (int h = 0; h < heads; ++h) {
      RowMatrix scores = qv.matrix().block(q0, h * hq, nq, hq) * kv.matrix().block(k0, h * hq, nk, hq).transpose();
      scores *= inv_sqrt;
      if (causal) {
        for (int64_t i = 0; i < nq; ++i) {
          const int64_t last = i + (nk - nq);
          if (last < 0) throw ShapeError("attention: causal query sees no key");
          for (int64_t j = last + 1; j < nk; ++j) scores(i, j) = -std::numeric_limits<Real>::infinity();
        }
      }
      RowMatrix p = scores.colwise() - scores.rowwise().maxCoeff();
      p = p.array().exp().matrix();
      p.array().colwise() /= p.rowwise().sum().array();
      out.matrix().block(q0, h * hv, nq, hv).noalias() = p * vv.matrix().block(k0, h * hv, nk, hv);
      if (weights) weights->push_back(Tensor::from_matrix(p));
      (*probs)[s * static_cast<size_t>(heads) + static_cast<size_t>(h)] = std::move(p);
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return g.record(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, layout, heads, hq, hv, inv_sqrt, probs](Graph& g, int self) {
        const Tensor& d = g.grad(self);
        const Tensor& qv = g.value(iq);
        const Tensor& kv = g.value(ik);
        const Tensor& vv = g.value(iv);
        const bool need_q = g.requires_grad(iq), need_k = g.requires_grad(ik), need_v = g.requires_grad(iv);
        for (size_t s = 0; s < layout.segments(); ++s) {
          const int64_t q0 = layout.q[s], nq = layout.q[s + 1] - q0;
          const int64_t k0 = layout.key_begin(s), nk = layout.key_end(s) - k0;
          if (nq == 0) continue;
          for (int h = 0; h < heads; ++h) {
            const RowMatrix& p = (*probs)[s * static_cast<size_t>(heads) + static_cast<size_t>(h)];
            const auto dout = d.matrix().block(q0, h * hv, nq, hv);
            if (need_v) g.grad(iv).matrix().block(k0, h * hv, nk, hv).noalias() += p.transpose() * dout;
            if (!need_q && !need_k) continue;
            RowMatrix dp = dout * vv.matrix().block(k0, h * hv, nk, hv).transpose();
            const Eigen::VectorXd dot = (dp.array() * p.array()).rowwise().sum();
            RowMatrix ds = (p.array() * (dp.colwise() - dot).array()).matrix() * inv_sqrt;
            if (need_q) g.grad(iq).matrix().block(q0, h * hq, nq, hq).noalias() += ds * kv.matrix().block(k0, h * hq, nk, hq);
            if (need_k) g.grad(ik).matrix().block(k0, h * hq, nk, hq).noalias() += ds.transpose() * qv.matrix().block(q0, h * hq, nq, hq);
          }
        }
      },
      "attention");
}

}  // namespace nmtforge
