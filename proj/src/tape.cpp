#include "c2f/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace c2f {

const Array& Var::value() const {
  if (!tape) throw TapeError("Var is not attached to a tape");
  return tape->value(*this);
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw TapeError("Var does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::constant(Array value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Array value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  parameters_.push_back(nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Array value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw TapeError("record: input is not on this tape");
    needs = needs || nodes_[in].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs});
  return Var{this, nodes_.size() - 1};
}

const Array& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.shape() != n.value.shape()) {
    if (!n.requires_grad) throw TapeError("grad requested for a node that does not require gradients");
    throw TapeError("grad requested before backward()");
  }
  return n.grad;
}

Array& Tape::grad_buffer(std::size_t id) { return nodes_[id].grad; }

void Tape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) throw TapeError("backward: loss is not on this tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw TapeError("backward: loss must be a scalar, got shape " +
                    shape_string(nodes_[loss.id].value.shape()));
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Array(n.value.shape());
    } else {
      n.grad = Array();
    }
  }
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (nodes_[i].requires_grad && nodes_[i].backward) nodes_[i].backward(*this, i);
  }
}

std::vector<Array> backward(Tape& tape, Var loss) {
  tape.backward(loss);
  std::vector<Array> grads;
  grads.reserve(tape.parameters().size());
  for (std::size_t id : tape.parameters()) grads.push_back(tape.grad(Var{&tape, id}));
  return grads;
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) throw TapeError("operands live on different tapes");
  return *a.tape;
}

void require_same_shape(const Array& a, const Array& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw TapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                    shape_string(b.shape()));
  }
}

// Accumulate into an input's gradient if it participates.
template <typename F>
void push(Tape& t, std::size_t id, F&& f) {
  if (t.requires_grad(id)) f(t.grad_buffer(id));
}

template <typename Unary, typename Deriv>
Var elementwise(Var a, Unary f, Deriv df) {
  Tape& t = *a.tape;
  const Array& x = a.value();
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id;
  return t.record(std::move(out), {ia}, [ia, df](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    const Array& xv = tp.value(Var{&tp, ia});
    const Array& yv = tp.value(Var{&tp, self});
    push(tp, ia, [&](Array& gx) {
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
  });
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    push(tp, ia, [&](Array& gx) { for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i]; });
    push(tp, ib, [&](Array& gx) { for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i]; });
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    const Array& av = tp.value(Var{&tp, ia});
    const Array& bv2 = tp.value(Var{&tp, ib});
    push(tp, ia, [&](Array& gx) { for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bv2[i]; });
    push(tp, ib, [&](Array& gx) { for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * av[i]; });
  });
}

Var scale(Var a, double s) {
  return elementwise(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var relu(Var a) {
  return elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(Var a) {
  return elementwise(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(Var a) {
  return elementwise(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var exp(Var a) {
  return elementwise(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a, double floor) {
  return elementwise(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : (floor > 0.0 ? 0.0 : 1.0 / x); });
}

Var conv3x3(Var x, Var w, Var b) {
  Tape& t = same_tape(x, w);
  same_tape(x, b);
  const Array& xv = x.value();
  const Array& wv = w.value();
  const Array& bv = b.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(0) != 3 || wv.dim(1) != 3 || wv.dim(2) != xv.dim(3) ||
      bv.size() != wv.dim(3)) {
    throw TapeError("conv3x3: incompatible shapes x" + shape_string(xv.shape()) + " w" +
                    shape_string(wv.shape()) + " b" + shape_string(bv.shape()));
  }
  const std::size_t n_img = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), ci = xv.dim(3), co = wv.dim(3);
  Array out({n_img, h, wd, co});
  const double* in = xv.data();
  const double* wt = wv.data();
  double* o = out.data();
  for (std::size_t n = 0; n < n_img; ++n) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < wd; ++xx) {
        double* op = o + ((n * h + y) * wd + xx) * co;
        for (std::size_t c = 0; c < co; ++c) op[c] = bv[c];
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
            const double* ip = in + ((n * h + sy) * wd + sx) * ci;
            const double* wk = wt + (ky * 3 + kx) * ci * co;
            for (std::size_t i = 0; i < ci; ++i) {
              const double v = ip[i];
              const double* wr = wk + i * co;
              for (std::size_t c = 0; c < co; ++c) op[c] += v * wr[c];
            }
          }
        }
      }
    }
  }
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return t.record(std::move(out), {ix, iw, ib}, [=](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    const double* in = tp.value(Var{&tp, ix}).data();
    const double* wt = tp.value(Var{&tp, iw}).data();
    const bool want_x = tp.requires_grad(ix), want_w = tp.requires_grad(iw);
    double* gx = want_x ? tp.grad_buffer(ix).data() : nullptr;
    double* gw = want_w ? tp.grad_buffer(iw).data() : nullptr;
    push(tp, ib, [&](Array& gb) {
      for (std::size_t p = 0; p < n_img * h * wd; ++p)
        for (std::size_t c = 0; c < co; ++c) gb[c] += g[p * co + c];
    });
    if (!want_x && !want_w) return;
    for (std::size_t n = 0; n < n_img; ++n) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < wd; ++xx) {
          const double* gp = g.data() + ((n * h + y) * wd + xx) * co;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
              const std::size_t ioff = ((n * h + sy) * wd + sx) * ci;
              const std::size_t koff = (ky * 3 + kx) * ci * co;
              for (std::size_t i = 0; i < ci; ++i) {
                const double* wr = wt + koff + i * co;
                if (gx) {
                  double acc = 0.0;
                  for (std::size_t c = 0; c < co; ++c) acc += gp[c] * wr[c];
                  gx[ioff + i] += acc;
                }
                if (gw) {
                  const double v = in[ioff + i];
                  double* gwr = gw + koff + i * co;
                  for (std::size_t c = 0; c < co; ++c) gwr[c] += v * gp[c];
                }
              }
            }
          }
        }
      }
    }
  });
}

Var conv1x1(Var x, Var w, Var b) {
  Tape& t = same_tape(x, w);
  same_tape(x, b);
  const Array& xv = x.value();
  const Array& wv = w.value();
  const Array& bv = b.value();
  if (xv.rank() < 1 || wv.rank() != 2 || wv.dim(1) != xv.last_dim() || bv.size() != wv.dim(0)) {
    throw TapeError("conv1x1: incompatible shapes x" + shape_string(xv.shape()) + " w" +
                    shape_string(wv.shape()) + " b" + shape_string(bv.shape()));
  }
  const std::size_t ci = wv.dim(1), co = wv.dim(0), pixels = xv.size() / ci;
  Shape out_shape = xv.shape();
  out_shape.back() = co;
  Array out(out_shape);
  for (std::size_t p = 0; p < pixels; ++p) {
    const double* xp = xv.data() + p * ci;
    for (std::size_t c = 0; c < co; ++c) {
      const double* wr = wv.data() + c * ci;
      double acc = bv[c];
      for (std::size_t i = 0; i < ci; ++i) acc += wr[i] * xp[i];
      out[p * co + c] = acc;
    }
  }
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return t.record(std::move(out), {ix, iw, ib}, [=](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    const Array& xv2 = tp.value(Var{&tp, ix});
    const Array& wv2 = tp.value(Var{&tp, iw});
    push(tp, ib, [&](Array& gb) {
      for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < co; ++c) gb[c] += g[p * co + c];
    });
    push(tp, iw, [&](Array& gw) {
      for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < co; ++c) {
          const double gv = g[p * co + c];
          for (std::size_t i = 0; i < ci; ++i) gw[c * ci + i] += gv * xv2[p * ci + i];
        }
    });
    push(tp, ix, [&](Array& gx) {
      for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < co; ++c) {
          const double gv = g[p * co + c];
          for (std::size_t i = 0; i < ci; ++i) gx[p * ci + i] += gv * wv2[c * ci + i];
        }
    });
  });
}

namespace {

void require_finite(const Array& a, const char* op) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i])) {
      throw TapeError(std::string(op) + ": non-finite input " + std::to_string(a[i]) + " at flat index " +
                      std::to_string(i));
    }
  }
}

}  // namespace

Var softmax(Var logits) {
  const Array& z = logits.value();
  require_finite(z, "softmax");
  const std::size_t k = z.last_dim();
  if (k == 0) throw TapeError("softmax: empty class axis");
  Array out(z.shape());
  for (std::size_t p = 0; p < z.size() / k; ++p) {
    const double* zp = z.data() + p * k;
    double* op = out.data() + p * k;
    const double m = *std::max_element(zp, zp + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += (op[c] = std::exp(zp[c] - m));
    for (std::size_t c = 0; c < k; ++c) op[c] /= s;
  }
  const std::size_t iz = logits.id;
  return logits.tape->record(std::move(out), {iz}, [iz, k](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    const Array& y = tp.value(Var{&tp, self});
    push(tp, iz, [&](Array& gz) {
      for (std::size_t p = 0; p < y.size() / k; ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) dot += g[p * k + c] * y[p * k + c];
        for (std::size_t c = 0; c < k; ++c) gz[p * k + c] += y[p * k + c] * (g[p * k + c] - dot);
      }
    });
  });
}

Var log_softmax(Var logits) {
  const Array& z = logits.value();
  require_finite(z, "log_softmax");
  const std::size_t k = z.last_dim();
  if (k == 0) throw TapeError("log_softmax: empty class axis");
  Array out(z.shape());
  for (std::size_t p = 0; p < z.size() / k; ++p) {
    const double* zp = z.data() + p * k;
    const double m = *std::max_element(zp, zp + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(zp[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < k; ++c) out[p * k + c] = zp[c] - lse;
  }
  const std::size_t iz = logits.id;
  return logits.tape->record(std::move(out), {iz}, [iz, k](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    const Array& y = tp.value(Var{&tp, self});
    push(tp, iz, [&](Array& gz) {
      for (std::size_t p = 0; p < y.size() / k; ++p) {
        double gs = 0.0;
        for (std::size_t c = 0; c < k; ++c) gs += g[p * k + c];
        for (std::size_t c = 0; c < k; ++c) gz[p * k + c] += g[p * k + c] - std::exp(y[p * k + c]) * gs;
      }
    });
  });
}

namespace {

void check_groups(const Array& a, std::span<const std::size_t> group, std::size_t count, const char* op) {
  if (group.size() != a.last_dim()) {
    throw TapeError(std::string(op) + ": group map has " + std::to_string(group.size()) +
                    " entries, channel axis has " + std::to_string(a.last_dim()));
  }
  std::vector<bool> hit(count, false);
  for (std::size_t g : group) {
    if (g >= count) throw TapeError(std::string(op) + ": group index out of range");
    hit[g] = true;
  }
  if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
    throw TapeError(std::string(op) + ": every output group needs at least one member");
  }
}

}  // namespace

Var group_sum(Var a, std::span<const std::size_t> group, std::size_t group_count) {
  const Array& x = a.value();
  check_groups(x, group, group_count, "group_sum");
  const std::size_t k = x.last_dim(), pixels = x.size() / k;
  Shape shape = x.shape();
  shape.back() = group_count;
  Array out(shape);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < k; ++c) out[p * group_count + group[c]] += x[p * k + c];
  const std::size_t ia = a.id;
  std::vector<std::size_t> map(group.begin(), group.end());
  return a.tape->record(std::move(out), {ia}, [ia, k, pixels, group_count, map](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    push(tp, ia, [&](Array& gx) {
      for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < k; ++c) gx[p * k + c] += g[p * group_count + map[c]];
    });
  });
}

Var group_logsumexp(Var a, std::span<const std::size_t> group, std::size_t group_count) {
  const Array& x = a.value();
  check_groups(x, group, group_count, "group_logsumexp");
  require_finite(x, "group_logsumexp");
  const std::size_t k = x.last_dim(), pixels = x.size() / k;
  Shape shape = x.shape();
  shape.back() = group_count;
  Array out(shape);
  std::vector<double> m(group_count), s(group_count);
  for (std::size_t p = 0; p < pixels; ++p) {
    std::fill(m.begin(), m.end(), -std::numeric_limits<double>::infinity());
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t c = 0; c < k; ++c) m[group[c]] = std::max(m[group[c]], x[p * k + c]);
    for (std::size_t c = 0; c < k; ++c) s[group[c]] += std::exp(x[p * k + c] - m[group[c]]);
    for (std::size_t g = 0; g < group_count; ++g) out[p * group_count + g] = m[g] + std::log(s[g]);
  }
  const std::size_t ia = a.id;
  std::vector<std::size_t> map(group.begin(), group.end());
  return a.tape->record(std::move(out), {ia}, [ia, k, pixels, group_count, map](Tape& tp, std::size_t self) {
    const Array& g = tp.grad_buffer(self);
    const Array& y = tp.value(Var{&tp, self});
    const Array& xv = tp.value(Var{&tp, ia});
    push(tp, ia, [&](Array& gx) {
      for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < k; ++c) {
          const std::size_t o = p * group_count + map[c];
          gx[p * k + c] += g[o] * std::exp(xv[p * k + c] - y[o]);
        }
    });
  });
}

Var sum(Var a) {
  const Array& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Array::scalar(s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    push(tp, ia, [&](Array& gx) { for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g; });
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw TapeError("mean of empty array");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var weighted_sum(Var a, const Array& weights, double coeff) {
  const Array& x = a.value();
  require_same_shape(x, weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (weights[i] != 0.0) s += weights[i] * x[i];
  }
  s *= coeff;
  const std::size_t ia = a.id;
  return a.tape->record(Array::scalar(s), {ia}, [ia, weights, coeff](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0] * coeff;
    push(tp, ia, [&](Array& gx) {
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * weights[i];
    });
  });
}

}  // namespace c2f
