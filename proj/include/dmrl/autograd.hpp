#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmrl/tensor.hpp"

namespace dmrl {

// Reverse-mode tape over Tensor<Scalar>. One tape per forward pass; ops are
// free functions that append nodes. A node's backward closure accumulates
// into the gradients of its parents.
struct Var {
  std::int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Tensor<Scalar> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad && grad_enabled_, {}, nullptr);
  }

  Var constant(Tensor<Scalar> value) { return push(std::move(value), false, {}, nullptr); }

  // Leafs a persistent parameter tensor, caching by address so that every
  // use within one pass shares a single node (gradients accumulate).
  Var param(Tensor<Scalar>& p) {
    auto it = param_vars_.find(&p);
    if (it != param_vars_.end()) return it->second;
    Var v = push(p, grad_enabled_, {}, nullptr);
    param_vars_.emplace(&p, v);
    return v;
  }

  bool has_param(const Tensor<Scalar>& p) const { return param_vars_.count(const_cast<Tensor<Scalar>*>(&p)) > 0; }

  // Gradient of a previously leafed parameter; zeros if it never received one.
  Tensor<Scalar> param_grad(Tensor<Scalar>& p) {
    auto it = param_vars_.find(&p);
    if (it == param_vars_.end()) return Tensor<Scalar>(p.shape());
    return grad(it->second);
  }

  Var push(Tensor<Scalar> value, bool requires_grad, std::vector<Var> parents, BackwardFn fn) {
    auto n = std::make_unique<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    if (requires_grad) {  // closures are dead weight on no-grad paths
      n->parents = std::move(parents);
      n->backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  // Nodes are heap-allocated, so references stay valid across later pushes.
  const Tensor<Scalar>& val(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)]->value; }

  Tensor<Scalar>& grad(Var v) {
    Node& n = *nodes_[static_cast<std::size_t>(v.idx)];
    if (n.grad.numel() != n.value.numel()) n.grad = Tensor<Scalar>(n.value.shape());
    return n.grad;
  }

  bool needs_grad(Var v) const {
    return v.valid() && nodes_[static_cast<std::size_t>(v.idx)]->requires_grad;
  }

  bool any_needs_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (needs_grad(v)) return true;
    return false;
  }

  // Scalar convenience for [1]-shaped results.
  Scalar scalar(Var v) const { return val(v)[0]; }

  void backward(Var root) {
    if (!needs_grad(root))
      throw ArgumentError("backward: root does not require gradients");
    if (val(root).numel() != 1)
      throw ArgumentError("backward: root must be a scalar");
    // Mark the subgraph reachable from the root.
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<std::int32_t> stack = {root.idx};
    reach[static_cast<std::size_t>(root.idx)] = 1;
    while (!stack.empty()) {
      std::int32_t i = stack.back();
      stack.pop_back();
      for (Var p : nodes_[static_cast<std::size_t>(i)]->parents) {
        if (!reach[static_cast<std::size_t>(p.idx)]) {
          reach[static_cast<std::size_t>(p.idx)] = 1;
          stack.push_back(p.idx);
        }
      }
    }
    grad(root).flat().setConstant(Scalar(1));
    for (std::int32_t i = root.idx; i >= 0; --i) {
      Node& n = *nodes_[static_cast<std::size_t>(i)];
      if (!reach[static_cast<std::size_t>(i)] || !n.requires_grad || !n.backward) continue;
      if (n.grad.numel() == 0) continue;  // no incoming gradient
      n.backward(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Count of cosine evaluations that hit a zero-norm vector (convention:
  // similarity 0, zero gradient). Surfaced in training logs.
  int zero_norm_cosines = 0;

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    std::vector<Var> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<Tensor<Scalar>*, Var> param_vars_;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  check_same_shape(t.val(a), t.val(b), "add");
  Tensor<S> y(t.val(a).shape());
  y.flat() = t.val(a).flat() + t.val(b).flat();
  bool rg = t.any_needs_grad({a, b});
  return t.push(std::move(y), rg, {a, b}, [a, b](Tape<S>& tp, Var out) {
    auto g = tp.grad(out).flat();
    if (tp.needs_grad(a)) tp.grad(a).flat() += g;
    if (tp.needs_grad(b)) tp.grad(b).flat() += g;
  });
}

// ca*a + cb*b with same shapes.
template <typename S>
Var axpby(Tape<S>& t, Var a, Var b, S ca, S cb) {
  check_same_shape(t.val(a), t.val(b), "axpby");
  Tensor<S> y(t.val(a).shape());
  y.flat() = ca * t.val(a).flat() + cb * t.val(b).flat();
  bool rg = t.any_needs_grad({a, b});
  return t.push(std::move(y), rg, {a, b}, [a, b, ca, cb](Tape<S>& tp, Var out) {
    auto g = tp.grad(out).flat();
    if (tp.needs_grad(a)) tp.grad(a).flat() += ca * g;
    if (tp.needs_grad(b)) tp.grad(b).flat() += cb * g;
  });
}

template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  check_same_shape(t.val(a), t.val(b), "mul");
  Tensor<S> y(t.val(a).shape());
  y.flat() = t.val(a).flat() * t.val(b).flat();
  bool rg = t.any_needs_grad({a, b});
  return t.push(std::move(y), rg, {a, b}, [a, b](Tape<S>& tp, Var out) {
    auto g = tp.grad(out).flat();
    if (tp.needs_grad(a)) tp.grad(a).flat() += g * tp.val(b).flat();
    if (tp.needs_grad(b)) tp.grad(b).flat() += g * tp.val(a).flat();
  });
}

template <typename S>
Var add_const(Tape<S>& t, Var a, S c) {
  Tensor<S> y(t.val(a).shape());
  y.flat() = t.val(a).flat() + c;
  return t.push(std::move(y), t.needs_grad(a), {a}, [a](Tape<S>& tp, Var out) {
    if (tp.needs_grad(a)) tp.grad(a).flat() += tp.grad(out).flat();
  });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S c) {
  Tensor<S> y(t.val(a).shape());
  y.flat() = t.val(a).flat() * c;
  return t.push(std::move(y), t.needs_grad(a), {a}, [a, c](Tape<S>& tp, Var out) {
    if (tp.needs_grad(a)) tp.grad(a).flat() += c * tp.grad(out).flat();
  });
}

template <typename S>
Var relu(Tape<S>& t, Var x) {
  Tensor<S> y(t.val(x).shape());
  y.flat() = t.val(x).flat().max(S(0));
  return t.push(std::move(y), t.needs_grad(x), {x}, [x](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    auto xv = tp.val(x).flat();
    tp.grad(x).flat() += (xv > S(0)).select(tp.grad(out).flat(), S(0));
  });
}

template <typename S>
Var leaky_relu(Tape<S>& t, Var x, S slope) {
  Tensor<S> y(t.val(x).shape());
  auto xv = t.val(x).flat();
  y.flat() = (xv > S(0)).select(xv, slope * xv);
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, slope](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    auto xv = tp.val(x).flat();
    auto g = tp.grad(out).flat();
    tp.grad(x).flat() += (xv > S(0)).select(g, slope * g);
  });
}

template <typename S>
Var sigmoid(Tape<S>& t, Var x) {
  Tensor<S> y(t.val(x).shape());
  y.flat() = S(1) / (S(1) + (-t.val(x).flat()).exp());
  return t.push(std::move(y), t.needs_grad(x), {x}, [x](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    auto yv = tp.val(out).flat();
    tp.grad(x).flat() += tp.grad(out).flat() * yv * (S(1) - yv);
  });
}

template <typename S>
Var reshape(Tape<S>& t, Var x, Shape shape) {
  Tensor<S> y = t.val(x).reshaped(shape);
  return t.push(std::move(y), t.needs_grad(x), {x}, [x](Tape<S>& tp, Var out) {
    if (tp.needs_grad(x)) tp.grad(x).flat() += tp.grad(out).flat();
  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

struct ConvGeom {
  Index n, cin, h, w;
  Index cout, kh, kw;
  Index stride, pad;
  Index ho, wo;
  Index k;  // cin*kh*kw
  Index m;  // ho*wo
};

template <typename S>
ConvGeom conv_geom(const Tensor<S>& x, const Tensor<S>& w, Index stride, Index pad) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv2d: kernel must be [O,C,kh,kw], got " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " kernel " +
                     shape_str(w.shape()));
  ConvGeom g;
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0)
    throw ShapeError("conv2d: kernel larger than padded input, input " + shape_str(x.shape()));
  g.k = g.cin * g.kh * g.kw;
  g.m = g.ho * g.wo;
  return g;
}

// Fills patches (k x m, column-major) for image n of x.
template <typename S>
void im2col(const Tensor<S>& x, const ConvGeom& g, Index n,
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& patches) {
  patches.resize(g.k, g.m);
  const S* img = x.data() + n * g.cin * g.h * g.w;
  Index r = 0;
  for (Index c = 0; c < g.cin; ++c) {
    const S* chan = img + c * g.h * g.w;
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx, ++r) {
        for (Index oy = 0; oy < g.ho; ++oy) {
          Index iy = oy * g.stride - g.pad + ky;
          S* dst = patches.data() + r;  // row r, walk columns
          if (iy < 0 || iy >= g.h) {
            for (Index ox = 0; ox < g.wo; ++ox) dst[(oy * g.wo + ox) * g.k] = S(0);
            continue;
          }
          const S* row = chan + iy * g.w;
          for (Index ox = 0; ox < g.wo; ++ox) {
            Index ix = ox * g.stride - g.pad + kx;
            dst[(oy * g.wo + ox) * g.k] = (ix >= 0 && ix < g.w) ? row[ix] : S(0);
          }
        }
      }
    }
  }
}

// Scatter-adds dpatches back into dx for image n.
template <typename S>
void col2im_acc(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& dpatches,
                const ConvGeom& g, Index n, Tensor<S>& dx) {
  S* img = dx.data() + n * g.cin * g.h * g.w;
  Index r = 0;
  for (Index c = 0; c < g.cin; ++c) {
    S* chan = img + c * g.h * g.w;
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx, ++r) {
        for (Index oy = 0; oy < g.ho; ++oy) {
          Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          S* row = chan + iy * g.w;
          const S* src = dpatches.data() + r;
          for (Index ox = 0; ox < g.wo; ++ox) {
            Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) row[ix] += src[(oy * g.wo + ox) * g.k];
          }
        }
      }
    }
  }
}

// bias may be an invalid Var for bias-free convolution.
template <typename S>
Var conv2d(Tape<S>& t, Var x, Var w, Var bias, Index stride, Index pad) {
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& wv = t.val(w);
  ConvGeom g = conv_geom(xv, wv, stride, pad);
  if (bias.valid() && t.val(bias).numel() != g.cout)
    throw ShapeError("conv2d: bias size mismatch");
  Tensor<S> y({g.n, g.cout, g.ho, g.wo});

  // Threads only pay off for sizeable per-image GEMMs.
  const int conv_workers = (g.cout * g.k * g.m >= 200000) ? -1 : 1;

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  auto wmat = wv.as_matrix(g.cout, g.k);
  const S* bptr = bias.valid() ? t.val(bias).data() : nullptr;
  parallel_for(g.n, [&](Index n) {
    Mat patches;
    im2col(xv, g, n, patches);
    Eigen::Map<typename Tensor<S>::MatrixRM> out(y.data() + n * g.cout * g.m, g.cout, g.m);
    out.noalias() = wmat * patches;
    if (bptr) {
      for (Index c = 0; c < g.cout; ++c) out.row(c).array() += bptr[c];
    }
  }, conv_workers);

  bool rg = t.any_needs_grad({x, w, bias.valid() ? bias : x});
  return t.push(std::move(y), rg, bias.valid() ? std::vector<Var>{x, w, bias} : std::vector<Var>{x, w},
                [x, w, bias, g](Tape<S>& tp, Var out) {
    const Tensor<S>& xv = tp.val(x);
    const Tensor<S>& wv = tp.val(w);
    const Tensor<S>& gy = tp.grad(out);
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
    auto wmat = wv.as_matrix(g.cout, g.k);
    const bool need_x = tp.needs_grad(x);
    const bool need_w = tp.needs_grad(w);
    const bool need_b = bias.valid() && tp.needs_grad(bias);

    const int conv_workers = (g.cout * g.k * g.m >= 200000) ? -1 : 1;

    // Per-image kernel-gradient slots merged in index order keeps the
    // result independent of the worker count.
    std::vector<Mat> dw_slots;
    if (need_w) dw_slots.assign(static_cast<std::size_t>(g.n), Mat());
    Tensor<S>* gx = need_x ? &tp.grad(x) : nullptr;

    parallel_for(g.n, [&](Index n) {
      Eigen::Map<const typename Tensor<S>::MatrixRM> gout(gy.data() + n * g.cout * g.m, g.cout, g.m);
      Mat patches;
      if (need_w) {
        im2col(xv, g, n, patches);
        dw_slots[static_cast<std::size_t>(n)].noalias() = gout * patches.transpose();
      }
      if (need_x) {
        Mat dpatches(g.k, g.m);
        dpatches.noalias() = wmat.transpose() * gout;
        col2im_acc(dpatches, g, n, *gx);
      }
    }, conv_workers);

    if (need_w) {
      auto dw = tp.grad(w).as_matrix(g.cout, g.k);
      for (auto& slot : dw_slots) dw += slot;
    }
    if (need_b) {
      Tensor<S>& db = tp.grad(bias);
      for (Index n = 0; n < g.n; ++n) {
        Eigen::Map<const typename Tensor<S>::MatrixRM> gout(gy.data() + n * g.cout * g.m, g.cout, g.m);
        for (Index c = 0; c < g.cout; ++c) db[c] += gout.row(c).sum();
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Running statistics live outside the tape and are updated in-place during
// training-mode forward passes.
template <typename S>
struct BnStats {
  Tensor<S>* running_mean = nullptr;
  Tensor<S>* running_var = nullptr;
};

// Batch normalization over [N,C,H,W]; gamma/beta may be invalid Vars for the
// parameter-free variant (SPADE). momentum follows the running = (1-mom)*running
// + mom*batch convention.
template <typename S>
Var batchnorm2d(Tape<S>& t, Var x, Var gamma, Var beta, BnStats<S> stats, bool training,
                S momentum = S(0.1), S eps = S(1e-5)) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw ShapeError("batchnorm2d: input must be [N,C,H,W]");
  const Index n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const Index plane = h * w;
  const Index cnt = n * plane;
  const bool affine = gamma.valid();

  Tensor<S> mean({c}), invstd({c}), xhat(xv.shape());
  if (training) {
    for (Index ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (Index ni = 0; ni < n; ++ni) {
        const S* p = xv.data() + (ni * c + ci) * plane;
        for (Index i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
      }
      double mu = acc / static_cast<double>(cnt);
      double vacc = 0.0;
      for (Index ni = 0; ni < n; ++ni) {
        const S* p = xv.data() + (ni * c + ci) * plane;
        for (Index i = 0; i < plane; ++i) {
          double d = static_cast<double>(p[i]) - mu;
          vacc += d * d;
        }
      }
      double var = vacc / static_cast<double>(cnt);
      mean[ci] = static_cast<S>(mu);
      invstd[ci] = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      if (stats.running_mean) {
        double unbiased = cnt > 1 ? vacc / static_cast<double>(cnt - 1) : var;
        (*stats.running_mean)[ci] =
            (S(1) - momentum) * (*stats.running_mean)[ci] + momentum * static_cast<S>(mu);
        (*stats.running_var)[ci] =
            (S(1) - momentum) * (*stats.running_var)[ci] + momentum * static_cast<S>(unbiased);
      }
    }
  } else {
    if (!stats.running_mean) throw ArgumentError("batchnorm2d: eval mode requires running stats");
    for (Index ci = 0; ci < c; ++ci) {
      mean[ci] = (*stats.running_mean)[ci];
      invstd[ci] = S(1) / std::sqrt((*stats.running_var)[ci] + eps);
    }
  }

  Tensor<S> y(xv.shape());
  const S* gptr = affine ? t.val(gamma).data() : nullptr;
  const S* bptr = affine ? t.val(beta).data() : nullptr;
  for (Index ni = 0; ni < n; ++ni) {
    for (Index ci = 0; ci < c; ++ci) {
      const S* p = xv.data() + (ni * c + ci) * plane;
      S* xh = xhat.data() + (ni * c + ci) * plane;
      S* yo = y.data() + (ni * c + ci) * plane;
      const S mu = mean[ci], is = invstd[ci];
      const S ga = affine ? gptr[ci] : S(1);
      const S be = affine ? bptr[ci] : S(0);
      for (Index i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mu) * is;
        yo[i] = ga * xh[i] + be;
      }
    }
  }

  bool rg = t.any_needs_grad({x, affine ? gamma : x});
  std::vector<Var> parents = affine ? std::vector<Var>{x, gamma, beta} : std::vector<Var>{x};
  auto xhat_p = std::make_shared<Tensor<S>>(std::move(xhat));
  auto invstd_p = std::make_shared<Tensor<S>>(std::move(invstd));
  return t.push(std::move(y), rg, std::move(parents),
                [x, gamma, beta, affine, training, xhat_p, invstd_p, n, c, plane](Tape<S>& tp, Var out) {
    const Tensor<S>& gy = tp.grad(out);
    const Index cnt = n * plane;
    const S* gptr = affine ? tp.val(gamma).data() : nullptr;
    for (Index ci = 0; ci < c; ++ci) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (Index ni = 0; ni < n; ++ni) {
        const S* g = gy.data() + (ni * c + ci) * plane;
        const S* xh = xhat_p->data() + (ni * c + ci) * plane;
        for (Index i = 0; i < plane; ++i) {
          sum_g += static_cast<double>(g[i]);
          sum_gx += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
        }
      }
      if (affine && tp.needs_grad(gamma)) tp.grad(gamma)[ci] += static_cast<S>(sum_gx);
      if (affine && tp.needs_grad(beta)) tp.grad(beta)[ci] += static_cast<S>(sum_g);
      if (tp.needs_grad(x)) {
        const S ga = affine ? gptr[ci] : S(1);
        const S is = (*invstd_p)[ci];
        Tensor<S>& gx = tp.grad(x);
        if (training) {
          const S k1 = ga * is / static_cast<S>(cnt);
          for (Index ni = 0; ni < n; ++ni) {
            const S* g = gy.data() + (ni * c + ci) * plane;
            const S* xh = xhat_p->data() + (ni * c + ci) * plane;
            S* dx = gx.data() + (ni * c + ci) * plane;
            for (Index i = 0; i < plane; ++i)
              dx[i] += k1 * (static_cast<S>(cnt) * g[i] - static_cast<S>(sum_g) -
                             xh[i] * static_cast<S>(sum_gx));
          }
        } else {
          const S k = ga * is;
          for (Index ni = 0; ni < n; ++ni) {
            const S* g = gy.data() + (ni * c + ci) * plane;
            S* dx = gx.data() + (ni * c + ci) * plane;
            for (Index i = 0; i < plane; ++i) dx[i] += k * g[i];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

template <typename S>
Var upsample_nearest2x(Tape<S>& t, Var x) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw ShapeError("upsample_nearest2x: input must be [N,C,H,W]");
  const Index n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<S> y({n, c, 2 * h, 2 * w});
  for (Index nc = 0; nc < n * c; ++nc) {
    const S* src = xv.data() + nc * h * w;
    S* dst = y.data() + nc * 4 * h * w;
    for (Index yy = 0; yy < 2 * h; ++yy) {
      const S* row = src + (yy / 2) * w;
      S* drow = dst + yy * 2 * w;
      for (Index xx = 0; xx < 2 * w; ++xx) drow[xx] = row[xx / 2];
    }
  }
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, n, c, h, w](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const Tensor<S>& gy = tp.grad(out);
    Tensor<S>& gx = tp.grad(x);
    for (Index nc = 0; nc < n * c; ++nc) {
      const S* g = gy.data() + nc * 4 * h * w;
      S* d = gx.data() + nc * h * w;
      for (Index yy = 0; yy < 2 * h; ++yy)
        for (Index xx = 0; xx < 2 * w; ++xx) d[(yy / 2) * w + xx / 2] += g[yy * 2 * w + xx];
    }
  });
}

// Nearest-neighbor resize to (ho, wo); used to bring the conditioning map to
// each decoder stage's resolution.
template <typename S>
Var resize_nearest(Tape<S>& t, Var x, Index ho, Index wo) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw ShapeError("resize_nearest: input must be [N,C,H,W]");
  const Index n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (ho == h && wo == w) return x;
  Tensor<S> y({n, c, ho, wo});
  std::vector<Index> ymap(static_cast<std::size_t>(ho)), xmap(static_cast<std::size_t>(wo));
  for (Index i = 0; i < ho; ++i) ymap[static_cast<std::size_t>(i)] = i * h / ho;
  for (Index i = 0; i < wo; ++i) xmap[static_cast<std::size_t>(i)] = i * w / wo;
  for (Index nc = 0; nc < n * c; ++nc) {
    const S* src = xv.data() + nc * h * w;
    S* dst = y.data() + nc * ho * wo;
    for (Index yy = 0; yy < ho; ++yy) {
      const S* row = src + ymap[static_cast<std::size_t>(yy)] * w;
      for (Index xx = 0; xx < wo; ++xx) dst[yy * wo + xx] = row[xmap[static_cast<std::size_t>(xx)]];
    }
  }
  auto maps = std::make_shared<std::pair<std::vector<Index>, std::vector<Index>>>(std::move(ymap),
                                                                                  std::move(xmap));
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, maps, n, c, h, w, ho, wo](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const Tensor<S>& gy = tp.grad(out);
    Tensor<S>& gx = tp.grad(x);
    for (Index nc = 0; nc < n * c; ++nc) {
      const S* g = gy.data() + nc * ho * wo;
      S* d = gx.data() + nc * h * w;
      for (Index yy = 0; yy < ho; ++yy)
        for (Index xx = 0; xx < wo; ++xx)
          d[maps->first[static_cast<std::size_t>(yy)] * w + maps->second[static_cast<std::size_t>(xx)]] +=
              g[yy * wo + xx];
    }
  });
}

template <typename S>
Var maxpool2d(Tape<S>& t, Var x, Index k, Index stride) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw ShapeError("maxpool2d: input must be [N,C,H,W]");
  const Index n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h < k || w < k) throw ShapeError("maxpool2d: window exceeds input " + shape_str(xv.shape()));
  const Index ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  Tensor<S> y({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n * c * ho * wo));
  Index o = 0;
  for (Index nc = 0; nc < n * c; ++nc) {
    const S* src = xv.data() + nc * h * w;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox, ++o) {
        Index best = (oy * stride) * w + ox * stride;
        S bv = src[best];
        for (Index ky = 0; ky < k; ++ky)
          for (Index kx = 0; kx < k; ++kx) {
            Index idx = (oy * stride + ky) * w + ox * stride + kx;
            if (src[idx] > bv) {
              bv = src[idx];
              best = idx;
            }
          }
        y[o] = bv;
        (*argmax)[static_cast<std::size_t>(o)] = nc * h * w + best;
      }
    }
  }
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, argmax](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const Tensor<S>& gy = tp.grad(out);
    Tensor<S>& gx = tp.grad(x);
    for (Index i = 0; i < gy.numel(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += gy[i];
  });
}

template <typename S>
Var global_avg_pool(Tape<S>& t, Var x) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw ShapeError("global_avg_pool: input must be [N,C,H,W]");
  const Index n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<S> y({n, c});
  for (Index nc = 0; nc < n * c; ++nc) {
    const S* p = xv.data() + nc * plane;
    double acc = 0;
    for (Index i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
    y[nc] = static_cast<S>(acc / static_cast<double>(plane));
  }
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, plane](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const Tensor<S>& gy = tp.grad(out);
    Tensor<S>& gx = tp.grad(x);
    for (Index nc = 0; nc < gy.numel(); ++nc) {
      S g = gy[nc] / static_cast<S>(plane);
      S* d = gx.data() + nc * plane;
      for (Index i = 0; i < plane; ++i) d[i] += g;
    }
  });
}

template <typename S>
Var concat_channels(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
      av.dim(3) != bv.dim(3))
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  const Index n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), plane = av.dim(2) * av.dim(3);
  Tensor<S> y({n, ca + cb, av.dim(2), av.dim(3)});
  for (Index ni = 0; ni < n; ++ni) {
    std::memcpy(y.data() + ni * (ca + cb) * plane, av.data() + ni * ca * plane,
                sizeof(S) * static_cast<std::size_t>(ca * plane));
    std::memcpy(y.data() + (ni * (ca + cb) + ca) * plane, bv.data() + ni * cb * plane,
                sizeof(S) * static_cast<std::size_t>(cb * plane));
  }
  bool rg = t.any_needs_grad({a, b});
  return t.push(std::move(y), rg, {a, b}, [a, b, n, ca, cb, plane](Tape<S>& tp, Var out) {
    const Tensor<S>& gy = tp.grad(out);
    for (Index ni = 0; ni < n; ++ni) {
      if (tp.needs_grad(a)) {
        S* d = tp.grad(a).data() + ni * ca * plane;
        const S* g = gy.data() + ni * (ca + cb) * plane;
        for (Index i = 0; i < ca * plane; ++i) d[i] += g[i];
      }
      if (tp.needs_grad(b)) {
        S* d = tp.grad(b).data() + ni * cb * plane;
        const S* g = gy.data() + (ni * (ca + cb) + ca) * plane;
        for (Index i = 0; i < cb * plane; ++i) d[i] += g[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Dense / softmax
// ---------------------------------------------------------------------------

template <typename S>
Var linear(Tape<S>& t, Var x, Var w, Var bias) {
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& wv = t.val(w);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
    throw ShapeError("linear: expected x [N,F], w [O,F]; got " + shape_str(xv.shape()) + ", " +
                     shape_str(wv.shape()));
  const Index n = xv.dim(0), f = xv.dim(1), o = wv.dim(0);
  Tensor<S> y({n, o});
  y.as_matrix(n, o).noalias() = xv.as_matrix(n, f) * wv.as_matrix(o, f).transpose();
  if (bias.valid()) {
    const Tensor<S>& bv = t.val(bias);
    if (bv.numel() != o) throw ShapeError("linear: bias size mismatch");
    auto ym = y.as_matrix(n, o);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < o; ++j) ym(i, j) += bv[j];
  }
  bool rg = t.any_needs_grad({x, w, bias.valid() ? bias : x});
  return t.push(std::move(y), rg, bias.valid() ? std::vector<Var>{x, w, bias} : std::vector<Var>{x, w},
                [x, w, bias, n, f, o](Tape<S>& tp, Var out) {
    auto g = tp.grad(out).as_matrix(n, o);
    if (tp.needs_grad(x)) tp.grad(x).as_matrix(n, f) += g * tp.val(w).as_matrix(o, f);
    if (tp.needs_grad(w)) tp.grad(w).as_matrix(o, f) += g.transpose() * tp.val(x).as_matrix(n, f);
    if (bias.valid() && tp.needs_grad(bias)) {
      Tensor<S>& db = tp.grad(bias);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < o; ++j) db[j] += g(i, j);
    }
  });
}

// Per-pixel softmax over the channel axis of [N,C,H,W].
template <typename S>
Var softmax_channels(Tape<S>& t, Var x) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 4) throw ShapeError("softmax_channels: input must be [N,C,H,W]");
  const Index n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<S> y(xv.shape());
  for (Index ni = 0; ni < n; ++ni) {
    const S* in = xv.data() + ni * c * plane;
    S* out = y.data() + ni * c * plane;
    for (Index p = 0; p < plane; ++p) {
      S mx = in[p];
      for (Index ci = 1; ci < c; ++ci) mx = std::max(mx, in[ci * plane + p]);
      S sum = S(0);
      for (Index ci = 0; ci < c; ++ci) {
        S e = std::exp(in[ci * plane + p] - mx);
        out[ci * plane + p] = e;
        sum += e;
      }
      for (Index ci = 0; ci < c; ++ci) out[ci * plane + p] /= sum;
    }
  }
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, n, c, plane](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const Tensor<S>& yv = tp.val(out);
    const Tensor<S>& gy = tp.grad(out);
    Tensor<S>& gx = tp.grad(x);
    for (Index ni = 0; ni < n; ++ni) {
      const S* yo = yv.data() + ni * c * plane;
      const S* g = gy.data() + ni * c * plane;
      S* d = gx.data() + ni * c * plane;
      for (Index p = 0; p < plane; ++p) {
        S dot = S(0);
        for (Index ci = 0; ci < c; ++ci) dot += g[ci * plane + p] * yo[ci * plane + p];
        for (Index ci = 0; ci < c; ++ci)
          d[ci * plane + p] += yo[ci * plane + p] * (g[ci * plane + p] - dot);
      }
    }
  });
}

// Softmax of a flat vector (expert routing rows).
template <typename S>
Var softmax_vec(Tape<S>& t, Var x) {
  const Tensor<S>& xv = t.val(x);
  const Index n = xv.numel();
  Tensor<S> y(xv.shape());
  S mx = xv[0];
  for (Index i = 1; i < n; ++i) mx = std::max(mx, xv[i]);
  S sum = S(0);
  for (Index i = 0; i < n; ++i) {
    y[i] = std::exp(xv[i] - mx);
    sum += y[i];
  }
  for (Index i = 0; i < n; ++i) y[i] /= sum;
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, n](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const Tensor<S>& yv = tp.val(out);
    const Tensor<S>& g = tp.grad(out);
    S dot = S(0);
    for (Index i = 0; i < n; ++i) dot += g[i] * yv[i];
    Tensor<S>& d = tp.grad(x);
    for (Index i = 0; i < n; ++i) d[i] += yv[i] * (g[i] - dot);
  });
}

template <typename S>
Var select_row(Tape<S>& t, Var m, Index row) {
  const Tensor<S>& mv = t.val(m);
  if (mv.rank() != 2) throw ShapeError("select_row: expected a matrix");
  if (row < 0 || row >= mv.dim(0))
    throw ArgumentError("select_row: row " + std::to_string(row) + " out of range");
  const Index cols = mv.dim(1);
  Tensor<S> y({cols});
  for (Index j = 0; j < cols; ++j) y[j] = mv.at2(row, j);
  return t.push(std::move(y), t.needs_grad(m), {m}, [m, row, cols](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(m)) return;
    const Tensor<S>& g = tp.grad(out);
    Tensor<S>& d = tp.grad(m);
    for (Index j = 0; j < cols; ++j) d.at2(row, j) += g[j];
  });
}

// Mixture of expert kernels: sum_k coeffs[k] * kernels[k].
template <typename S>
Var mix_kernels(Tape<S>& t, const std::vector<Var>& kernels, Var coeffs) {
  if (kernels.empty()) throw ArgumentError("mix_kernels: no kernels");
  const Index n = static_cast<Index>(kernels.size());
  if (t.val(coeffs).numel() != n) throw ShapeError("mix_kernels: coefficient count mismatch");
  const Shape shape = t.val(kernels[0]).shape();
  Tensor<S> y(shape);
  for (Index k = 0; k < n; ++k) {
    check_same_shape(t.val(kernels[static_cast<std::size_t>(k)]), y, "mix_kernels");
    y.flat() += t.val(coeffs)[k] * t.val(kernels[static_cast<std::size_t>(k)]).flat();
  }
  std::vector<Var> parents = kernels;
  parents.push_back(coeffs);
  bool rg = t.needs_grad(coeffs);
  for (Var k : kernels) rg = rg || t.needs_grad(k);
  return t.push(std::move(y), rg, std::move(parents), [kernels, coeffs, n](Tape<S>& tp, Var out) {
    const Tensor<S>& g = tp.grad(out);
    for (Index k = 0; k < n; ++k) {
      Var kv = kernels[static_cast<std::size_t>(k)];
      if (tp.needs_grad(kv)) tp.grad(kv).flat() += tp.val(coeffs)[k] * g.flat();
      if (tp.needs_grad(coeffs))
        tp.grad(coeffs)[k] +=
            static_cast<S>((tp.val(kv).flat().template cast<double>() * g.flat().template cast<double>()).sum());
    }
  });
}

// Rows of x permuted by idx (gather); used to pair subjects within a batch.
template <typename S>
Var gather_rows(Tape<S>& t, Var x, std::vector<Index> idx) {
  const Tensor<S>& xv = t.val(x);
  if (xv.rank() != 2) throw ShapeError("gather_rows: expected a matrix");
  const Index f = xv.dim(1);
  Tensor<S> y({static_cast<Index>(idx.size()), f});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= xv.dim(0)) throw ArgumentError("gather_rows: index out of range");
    std::memcpy(y.data() + static_cast<Index>(i) * f, xv.data() + idx[i] * f,
                sizeof(S) * static_cast<std::size_t>(f));
  }
  auto ip = std::make_shared<std::vector<Index>>(std::move(idx));
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, ip, f](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const Tensor<S>& g = tp.grad(out);
    Tensor<S>& d = tp.grad(x);
    for (std::size_t i = 0; i < ip->size(); ++i) {
      S* dst = d.data() + (*ip)[i] * f;
      const S* src = g.data() + static_cast<Index>(i) * f;
      for (Index j = 0; j < f; ++j) dst[j] += src[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

// Mean absolute difference over all elements; the L1 norm convention used by
// every reconstruction/consistency term (mean, not sum).
template <typename S>
Var mean_abs_diff(Tape<S>& t, Var a, Var b) {
  check_same_shape(t.val(a), t.val(b), "mean_abs_diff");
  const Index n = t.val(a).numel();
  double acc = 0;
  for (Index i = 0; i < n; ++i)
    acc += std::abs(static_cast<double>(t.val(a)[i]) - static_cast<double>(t.val(b)[i]));
  Tensor<S> y({1});
  y[0] = static_cast<S>(acc / static_cast<double>(n));
  bool rg = t.any_needs_grad({a, b});
  return t.push(std::move(y), rg, {a, b}, [a, b, n](Tape<S>& tp, Var out) {
    const S g = tp.grad(out)[0] / static_cast<S>(n);
    const Tensor<S>& av = tp.val(a);
    const Tensor<S>& bv = tp.val(b);
    for (Index i = 0; i < n; ++i) {
      S s = av[i] > bv[i] ? g : (av[i] < bv[i] ? -g : S(0));
      if (tp.needs_grad(a)) tp.grad(a)[i] += s;
      if (tp.needs_grad(b)) tp.grad(b)[i] -= s;
    }
  });
}

// Cosine similarity per row of two [N,F] matrices -> [N]. Zero-norm rows
// yield similarity 0 with zero gradient and bump the tape counter.
template <typename S>
Var row_cosine(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  check_same_shape(av, bv, "row_cosine");
  if (av.rank() != 2) throw ShapeError("row_cosine: expected [N,F] matrices");
  const Index n = av.dim(0), f = av.dim(1);
  Tensor<S> y({n});
  auto aux = std::make_shared<std::vector<std::array<double, 3>>>(static_cast<std::size_t>(n));
  constexpr double tiny = 1e-12;
  for (Index i = 0; i < n; ++i) {
    double dot = 0, na = 0, nb = 0;
    const S* ap = av.data() + i * f;
    const S* bp = bv.data() + i * f;
    for (Index j = 0; j < f; ++j) {
      dot += static_cast<double>(ap[j]) * static_cast<double>(bp[j]);
      na += static_cast<double>(ap[j]) * static_cast<double>(ap[j]);
      nb += static_cast<double>(bp[j]) * static_cast<double>(bp[j]);
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    (*aux)[static_cast<std::size_t>(i)] = {dot, na, nb};
    if (na < tiny || nb < tiny) {
      y[i] = S(0);
      ++t.zero_norm_cosines;
    } else {
      y[i] = static_cast<S>(dot / (na * nb));
    }
  }
  bool rg = t.any_needs_grad({a, b});
  return t.push(std::move(y), rg, {a, b}, [a, b, aux, n, f](Tape<S>& tp, Var out) {
    const Tensor<S>& g = tp.grad(out);
    const Tensor<S>& av = tp.val(a);
    const Tensor<S>& bv = tp.val(b);
    constexpr double tiny = 1e-12;
    for (Index i = 0; i < n; ++i) {
      const auto& [dot, na, nb] = (*aux)[static_cast<std::size_t>(i)];
      if (na < tiny || nb < tiny) continue;
      const double gi = static_cast<double>(g[i]);
      if (gi == 0.0) continue;
      const S* ap = av.data() + i * f;
      const S* bp = bv.data() + i * f;
      const double inv_ab = 1.0 / (na * nb);
      const double ca = dot / (na * na * na * nb);
      const double cb = dot / (na * nb * nb * nb);
      if (tp.needs_grad(a)) {
        S* da = tp.grad(a).data() + i * f;
        for (Index j = 0; j < f; ++j)
          da[j] += static_cast<S>(gi * (static_cast<double>(bp[j]) * inv_ab - static_cast<double>(ap[j]) * ca));
      }
      if (tp.needs_grad(b)) {
        S* db = tp.grad(b).data() + i * f;
        for (Index j = 0; j < f; ++j)
          db[j] += static_cast<S>(gi * (static_cast<double>(ap[j]) * inv_ab - static_cast<double>(bp[j]) * cb));
      }
    }
  });
}

template <typename S>
Var mean_vec(Tape<S>& t, Var x) {
  const Index n = t.val(x).numel();
  Tensor<S> y({1});
  double acc = 0;
  for (Index i = 0; i < n; ++i) acc += static_cast<double>(t.val(x)[i]);
  y[0] = static_cast<S>(acc / static_cast<double>(n));
  return t.push(std::move(y), t.needs_grad(x), {x}, [x, n](Tape<S>& tp, Var out) {
    if (!tp.needs_grad(x)) return;
    const S g = tp.grad(out)[0] / static_cast<S>(n);
    tp.grad(x).flat() += g;
  });
}

// Weighted sum of scalar Vars.
template <typename S>
Var wsum(Tape<S>& t, const std::vector<Var>& xs, const std::vector<S>& coeffs) {
  if (xs.size() != coeffs.size()) throw ArgumentError("wsum: size mismatch");
  Tensor<S> y({1});
  double acc = 0;
  bool rg = false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (t.val(xs[i]).numel() != 1) throw ShapeError("wsum: inputs must be scalars");
    acc += static_cast<double>(coeffs[i]) * static_cast<double>(t.val(xs[i])[0]);
    rg = rg || t.needs_grad(xs[i]);
  }
  y[0] = static_cast<S>(acc);
  return t.push(std::move(y), rg, xs, [xs, coeffs](Tape<S>& tp, Var out) {
    const S g = tp.grad(out)[0];
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (tp.needs_grad(xs[i])) tp.grad(xs[i])[0] += coeffs[i] * g;
  });
}

// Mean softmax cross-entropy of [N,K,H,W] logits against int labels [N,H,W].
template <typename S>
Var cross_entropy2d(Tape<S>& t, Var logits, const Tensor<std::int32_t>& labels) {
  const Tensor<S>& lv = t.val(logits);
  if (lv.rank() != 4) throw ShapeError("cross_entropy2d: logits must be [N,K,H,W]");
  if (labels.rank() != 3 || labels.dim(0) != lv.dim(0) || labels.dim(1) != lv.dim(2) ||
      labels.dim(2) != lv.dim(3))
    throw ShapeError("cross_entropy2d: label shape mismatch");
  const Index n = lv.dim(0), k = lv.dim(1), plane = lv.dim(2) * lv.dim(3);
  const Index cnt = n * plane;
  auto probs = std::make_shared<Tensor<S>>(lv.shape());
  double loss = 0;
  for (Index ni = 0; ni < n; ++ni) {
    const S* in = lv.data() + ni * k * plane;
    S* pr = probs->data() + ni * k * plane;
    const std::int32_t* lab = labels.data() + ni * plane;
    for (Index p = 0; p < plane; ++p) {
      S mx = in[p];
      for (Index ci = 1; ci < k; ++ci) mx = std::max(mx, in[ci * plane + p]);
      double sum = 0;
      for (Index ci = 0; ci < k; ++ci) {
        double e = std::exp(static_cast<double>(in[ci * plane + p] - mx));
        pr[ci * plane + p] = static_cast<S>(e);
        sum += e;
      }
      for (Index ci = 0; ci < k; ++ci) pr[ci * plane + p] = static_cast<S>(pr[ci * plane + p] / sum);
      const Index y = lab[p];
      if (y < 0 || y >= k) throw ArgumentError("cross_entropy2d: label out of range");
      loss -= std::log(std::max(static_cast<double>(pr[y * plane + p]), 1e-30));
    }
  }
  Tensor<S> out({1});
  out[0] = static_cast<S>(loss / static_cast<double>(cnt));
  auto labs = std::make_shared<Tensor<std::int32_t>>(labels);
  return t.push(std::move(out), t.needs_grad(logits), {logits},
                [logits, probs, labs, n, k, plane, cnt](Tape<S>& tp, Var o) {
    if (!tp.needs_grad(logits)) return;
    const S g = tp.grad(o)[0] / static_cast<S>(cnt);
    Tensor<S>& d = tp.grad(logits);
    for (Index ni = 0; ni < n; ++ni) {
      const S* pr = probs->data() + ni * k * plane;
      S* dx = d.data() + ni * k * plane;
      const std::int32_t* lab = labs->data() + ni * plane;
      for (Index p = 0; p < plane; ++p) {
        for (Index ci = 0; ci < k; ++ci) {
          S delta = (ci == lab[p]) ? S(1) : S(0);
          dx[ci * plane + p] += g * (pr[ci * plane + p] - delta);
        }
      }
    }
  });
}

}  // namespace dmrl
