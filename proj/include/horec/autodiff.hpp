#pragma once

// Reverse-mode automatic differentiation on Tensor<T>. The graph is a DAG of
// heap nodes; each op records a closure that scatters the node's gradient
// into its parents. Everything runs serially in a fixed order, so float
// results are bit-reproducible run to run.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "horec/core.hpp"
#include "horec/tensor.hpp"

namespace horec::ad {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void()> backward;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Tensor<T>(value.shape());
      grad_ready = true;
    }
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }
  static Var scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  bool defined() const { return node_ != nullptr; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }

  const Tensor<T>& grad() const {
    require(node_->grad_ready, "autodiff", "gradient not computed for this node");
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad_ready) node_->grad.fill(T(0));
  }

  T item() const {
    require(node_->value.numel() == 1, "autodiff", "item() needs a scalar");
    return node_->value[0];
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>*)> make_backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (auto& p : parents) {
    if (p.node()->requires_grad) n->requires_grad = true;
    n->parents.push_back(p.ptr());
  }
  if (n->requires_grad && make_backward) {
    Node<T>* raw = n.get();
    n->backward = [raw, fn = std::move(make_backward)]() { fn(raw); };
  }
  return Var<T>(std::move(n));
}

template <class T>
void accumulate(const std::shared_ptr<Node<T>>& p, const Tensor<T>& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  p->grad.flat() += g.flat();
}

}  // namespace detail

// Runs backpropagation from a scalar root. Reverse post-order guarantees a
// node's gradient is complete before its backward closure fires.
template <class T>
void backward(const Var<T>& root) {
  require(root.value().numel() == 1, "autodiff", "backward() needs a scalar root");
  require(root.requires_grad(), "autodiff",
          "backward() on a graph with no trainable inputs");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> done;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  done.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    bool descended = false;
    while (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !done.count(p)) {
        done.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended && next >= n->parents.size()) {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad_ready) n->backward();
  }
}

// ---- elementwise --------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(same_shape(a.value(), b.value()), "autodiff", "add: shape mismatch");
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat() + b.value().flat();
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>* n) {
    detail::accumulate(a.ptr(), n->grad);
    detail::accumulate(b.ptr(), n->grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(same_shape(a.value(), b.value()), "autodiff", "sub: shape mismatch");
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat() - b.value().flat();
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>* n) {
    detail::accumulate(a.ptr(), n->grad);
    if (b.node()->requires_grad) {
      Tensor<T> g(n->grad.shape());
      g.flat() = -n->grad.flat();
      detail::accumulate(b.ptr(), g);
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(same_shape(a.value(), b.value()), "autodiff", "mul: shape mismatch");
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat().cwiseProduct(b.value().flat());
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>* n) {
    if (a.node()->requires_grad) {
      Tensor<T> g(n->grad.shape());
      g.flat() = n->grad.flat().cwiseProduct(b.value().flat());
      detail::accumulate(a.ptr(), g);
    }
    if (b.node()->requires_grad) {
      Tensor<T> g(n->grad.shape());
      g.flat() = n->grad.flat().cwiseProduct(a.value().flat());
      detail::accumulate(b.ptr(), g);
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require(same_shape(a.value(), b.value()), "autodiff", "div: shape mismatch");
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat().cwiseQuotient(b.value().flat());
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>* n) {
    if (a.node()->requires_grad) {
      Tensor<T> g(n->grad.shape());
      g.flat() = n->grad.flat().cwiseQuotient(b.value().flat());
      detail::accumulate(a.ptr(), g);
    }
    if (b.node()->requires_grad) {
      Tensor<T> g(n->grad.shape());
      g.flat() = -n->grad.flat().cwiseProduct(a.value().flat()).cwiseQuotient(
          b.value().flat().cwiseProduct(b.value().flat()));
      detail::accumulate(b.ptr(), g);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat() * c;
  return detail::make_node<T>(std::move(out), {a}, [a, c](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    g.flat() = n->grad.flat() * c;
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> add_const(const Var<T>& a, T c) {
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat().array() + c;
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    detail::accumulate(a.ptr(), n->grad);
  });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat().cwiseMax(T(0));
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    const auto& x = a.value();
    for (std::int64_t i = 0; i < x.numel(); ++i)
      g[i] = x[i] > T(0) ? n->grad[i] : T(0);
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.value().shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-a.value()[i]));
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      T y = n->value[i];
      g[i] = n->grad[i] * y * (T(1) - y);
    }
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> tanh_op(const Var<T>& a) {
  Tensor<T> out(a.value().shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(a.value()[i]);
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      T y = n->value[i];
      g[i] = n->grad[i] * (T(1) - y * y);
    }
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  Tensor<T> out(a.value().shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    T x = a.value()[i];
    out[i] = x > T(30) ? x : std::log1p(std::exp(x));
  }
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      T x = a.value()[i];
      g[i] = n->grad[i] / (T(1) + std::exp(-x));
    }
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> abs_op(const Var<T>& a) {
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat().cwiseAbs();
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    const auto& x = a.value();
    for (std::int64_t i = 0; i < x.numel(); ++i)
      g[i] = x[i] > T(0) ? n->grad[i] : (x[i] < T(0) ? -n->grad[i] : T(0));
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat().cwiseProduct(a.value().flat());
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    g.flat() = T(2) * n->grad.flat().cwiseProduct(a.value().flat());
    detail::accumulate(a.ptr(), g);
  });
}

// Elementwise lower clamp; gradient passes only where x > floor.
template <class T>
Var<T> clamp_min(const Var<T>& a, T floor_v) {
  Tensor<T> out(a.value().shape());
  out.flat() = a.value().flat().cwiseMax(floor_v);
  return detail::make_node<T>(std::move(out), {a}, [a, floor_v](Node<T>* n) {
    Tensor<T> g(n->grad.shape());
    const auto& x = a.value();
    for (std::int64_t i = 0; i < x.numel(); ++i)
      g[i] = x[i] > floor_v ? n->grad[i] : T(0);
    detail::accumulate(a.ptr(), g);
  });
}

// ---- reductions ---------------------------------------------------------

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out({1});
  out[0] = a.value().flat().sum();
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g(a.value().shape());
    g.flat().setConstant(n->grad[0]);
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.value().numel()));
}

// Mean of x over positions where mask != 0. The caller guarantees a nonempty
// mask (checked).
template <class T>
Var<T> masked_mean(const Var<T>& a, const Tensor<std::uint8_t>& mask) {
  require(a.value().numel() == mask.numel(), "autodiff",
          "masked_mean: mask size mismatch");
  std::int64_t count = 0;
  T sum = T(0);
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i]) {
      sum += a.value()[i];
      ++count;
    }
  require(count > 0, "no-foreground", "no foreground");
  Tensor<T> out({1});
  out[0] = sum / static_cast<T>(count);
  return detail::make_node<T>(std::move(out), {a}, [a, mask, count](Node<T>* n) {
    Tensor<T> g(a.value().shape());
    T gv = n->grad[0] / static_cast<T>(count);
    for (std::int64_t i = 0; i < mask.numel(); ++i) g[i] = mask[i] ? gv : T(0);
    detail::accumulate(a.ptr(), g);
  });
}

// ---- shape ops ----------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return detail::make_node<T>(std::move(out), {a}, [a](Node<T>* n) {
    Tensor<T> g = n->grad.reshaped(a.value().shape());
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, std::int64_t start, std::int64_t len) {
  require(a.value().rank() == 2, "autodiff", "slice_rows needs rank-2 input");
  std::int64_t rows = a.value().dim(0), cols = a.value().dim(1);
  require(start >= 0 && start + len <= rows, "autodiff", "slice_rows out of range");
  Tensor<T> out({len, cols});
  std::memcpy(out.data(), a.value().data() + start * cols,
              sizeof(T) * static_cast<std::size_t>(len * cols));
  return detail::make_node<T>(std::move(out), {a}, [a, start, len, cols](Node<T>* n) {
    Tensor<T> g(a.value().shape());
    std::memcpy(g.data() + start * cols, n->grad.data(),
                sizeof(T) * static_cast<std::size_t>(len * cols));
    detail::accumulate(a.ptr(), g);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::int64_t start, std::int64_t len) {
  require(a.value().rank() == 2, "autodiff", "slice_cols needs rank-2 input");
  std::int64_t rows = a.value().dim(0), cols = a.value().dim(1);
  require(start >= 0 && start + len <= cols, "autodiff", "slice_cols out of range");
  Tensor<T> out({rows, len});
  for (std::int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, a.value().data() + r * cols + start,
                sizeof(T) * static_cast<std::size_t>(len));
  return detail::make_node<T>(
      std::move(out), {a}, [a, start, len, rows, cols](Node<T>* n) {
        Tensor<T> g(a.value().shape());
        for (std::int64_t r = 0; r < rows; ++r)
          std::memcpy(g.data() + r * cols + start, n->grad.data() + r * len,
                      sizeof(T) * static_cast<std::size_t>(len));
        detail::accumulate(a.ptr(), g);
      });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 &&
              a.value().dim(0) == b.value().dim(0),
          "autodiff", "concat_cols: incompatible shapes");
  std::int64_t rows = a.value().dim(0), ca = a.value().dim(1), cb = b.value().dim(1);
  Tensor<T> out({rows, ca + cb});
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * (ca + cb), a.value().data() + r * ca,
                sizeof(T) * static_cast<std::size_t>(ca));
    std::memcpy(out.data() + r * (ca + cb) + ca, b.value().data() + r * cb,
                sizeof(T) * static_cast<std::size_t>(cb));
  }
  return detail::make_node<T>(
      std::move(out), {a, b}, [a, b, rows, ca, cb](Node<T>* n) {
        if (a.node()->requires_grad) {
          Tensor<T> g(a.value().shape());
          for (std::int64_t r = 0; r < rows; ++r)
            std::memcpy(g.data() + r * ca, n->grad.data() + r * (ca + cb),
                        sizeof(T) * static_cast<std::size_t>(ca));
          detail::accumulate(a.ptr(), g);
        }
        if (b.node()->requires_grad) {
          Tensor<T> g(b.value().shape());
          for (std::int64_t r = 0; r < rows; ++r)
            std::memcpy(g.data() + r * cb, n->grad.data() + r * (ca + cb) + ca,
                        sizeof(T) * static_cast<std::size_t>(cb));
          detail::accumulate(b.ptr(), g);
        }
      });
}

// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() == 4 && b.value().rank() == 4 &&
              a.value().dim(0) == b.value().dim(0) &&
              a.value().dim(2) == b.value().dim(2) &&
              a.value().dim(3) == b.value().dim(3),
          "autodiff", "concat_channels: incompatible shapes");
  std::int64_t n = a.value().dim(0), ca = a.value().dim(1), cb = b.value().dim(1);
  std::int64_t hw = a.value().dim(2) * a.value().dim(3);
  Tensor<T> out({n, ca + cb, a.value().dim(2), a.value().dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * (ca + cb) * hw, a.value().data() + i * ca * hw,
                sizeof(T) * static_cast<std::size_t>(ca * hw));
    std::memcpy(out.data() + (i * (ca + cb) + ca) * hw,
                b.value().data() + i * cb * hw,
                sizeof(T) * static_cast<std::size_t>(cb * hw));
  }
  return detail::make_node<T>(
      std::move(out), {a, b}, [a, b, n, ca, cb, hw](Node<T>* node) {
        if (a.node()->requires_grad) {
          Tensor<T> g(a.value().shape());
          for (std::int64_t i = 0; i < n; ++i)
            std::memcpy(g.data() + i * ca * hw, node->grad.data() + i * (ca + cb) * hw,
                        sizeof(T) * static_cast<std::size_t>(ca * hw));
          detail::accumulate(a.ptr(), g);
        }
        if (b.node()->requires_grad) {
          Tensor<T> g(b.value().shape());
          for (std::int64_t i = 0; i < n; ++i)
            std::memcpy(g.data() + i * cb * hw,
                        node->grad.data() + (i * (ca + cb) + ca) * hw,
                        sizeof(T) * static_cast<std::size_t>(cb * hw));
          detail::accumulate(b.ptr(), g);
        }
      });
}

// y[r,c] = x[r,c] + row[c]
template <class T>
Var<T> add_row_broadcast(const Var<T>& x, const Var<T>& row) {
  require(x.value().rank() == 2, "autodiff", "add_row_broadcast needs rank-2 x");
  std::int64_t rows = x.value().dim(0), cols = x.value().dim(1);
  require(row.value().numel() == cols, "autodiff", "add_row_broadcast: bad row");
  Tensor<T> out(x.value().shape());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c)
      out[r * cols + c] = x.value()[r * cols + c] + row.value()[c];
  return detail::make_node<T>(
      std::move(out), {x, row}, [x, row, rows, cols](Node<T>* n) {
        if (x.node()->requires_grad) detail::accumulate(x.ptr(), n->grad);
        if (row.node()->requires_grad) {
          Tensor<T> g(row.value().shape());
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < cols; ++c) g[c] += n->grad[r * cols + c];
          detail::accumulate(row.ptr(), g);
        }
      });
}

// y = s * x with s a one-element graph variable.
template <class T>
Var<T> mul_scalar_var(const Var<T>& x, const Var<T>& s) {
  require(s.value().numel() == 1, "autodiff", "mul_scalar_var: s must be scalar");
  Tensor<T> out(x.value().shape());
  out.flat() = x.value().flat() * s.value()[0];
  return detail::make_node<T>(std::move(out), {x, s}, [x, s](Node<T>* n) {
    if (x.node()->requires_grad) {
      Tensor<T> g(x.value().shape());
      g.flat() = n->grad.flat() * s.value()[0];
      detail::accumulate(x.ptr(), g);
    }
    if (s.node()->requires_grad) {
      Tensor<T> g({1});
      g[0] = n->grad.flat().dot(x.value().flat());
      detail::accumulate(s.ptr(), g);
    }
  });
}

// ---- dense linear algebra ----------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 &&
              a.value().dim(1) == b.value().dim(0),
          "autodiff", "matmul: incompatible shapes");
  std::int64_t m = a.value().dim(0), k = a.value().dim(1), n2 = b.value().dim(1);
  Tensor<T> out({m, n2});
  out.mat() = a.value().mat() * b.value().mat();
  return detail::make_node<T>(std::move(out), {a, b}, [a, b](Node<T>* n) {
    if (a.node()->requires_grad) {
      Tensor<T> g(a.value().shape());
      g.mat() = n->grad.mat() * b.value().mat().transpose();
      detail::accumulate(a.ptr(), g);
    }
    if (b.node()->requires_grad) {
      Tensor<T> g(b.value().shape());
      g.mat() = a.value().mat().transpose() * n->grad.mat();
      detail::accumulate(b.ptr(), g);
    }
  });
}

// y = x W^T + bias, x [N,I], W [O,I], bias [O].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require(x.value().rank() == 2 && w.value().rank() == 2 &&
              x.value().dim(1) == w.value().dim(1),
          "autodiff", "linear: incompatible shapes");
  std::int64_t n_rows = x.value().dim(0), out_dim = w.value().dim(0);
  require(bias.value().numel() == out_dim, "autodiff", "linear: bad bias");
  Tensor<T> out({n_rows, out_dim});
  out.mat() = x.value().mat() * w.value().mat().transpose();
  out.mat().rowwise() += bias.value().flat().transpose();
  return detail::make_node<T>(std::move(out), {x, w, bias}, [x, w, bias](Node<T>* n) {
    if (x.node()->requires_grad) {
      Tensor<T> g(x.value().shape());
      g.mat() = n->grad.mat() * w.value().mat();
      detail::accumulate(x.ptr(), g);
    }
    if (w.node()->requires_grad) {
      Tensor<T> g(w.value().shape());
      g.mat() = n->grad.mat().transpose() * x.value().mat();
      detail::accumulate(w.ptr(), g);
    }
    if (bias.node()->requires_grad) {
      Tensor<T> g(bias.value().shape());
      g.flat() = n->grad.mat().colwise().sum().transpose();
      detail::accumulate(bias.ptr(), g);
    }
  });
}

// ---- image ops ----------------------------------------------------------

namespace detail {

// Unpacks one sample's receptive fields into a [C*kh*kw, oh*ow] column
// matrix (zero padding).
template <class T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W,
            std::int64_t kh, std::int64_t kw, std::int64_t stride,
            std::int64_t pad, std::int64_t oh, std::int64_t ow, T* col) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::int64_t oi = 0; oi < oh; ++oi) {
          std::int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= H) {
            std::fill(dst + oi * ow, dst + (oi + 1) * ow, T(0));
            continue;
          }
          const T* src_row = x + (c * H + ii) * W;
          for (std::int64_t oj = 0; oj < ow; ++oj) {
            std::int64_t jj = oj * stride - pad + kj;
            dst[oi * ow + oj] = (jj >= 0 && jj < W) ? src_row[jj] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W,
                std::int64_t kh, std::int64_t kw, std::int64_t stride,
                std::int64_t pad, std::int64_t oh, std::int64_t ow, T* x) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::int64_t oi = 0; oi < oh; ++oi) {
          std::int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= H) continue;
          T* dst_row = x + (c * H + ii) * W;
          for (std::int64_t oj = 0; oj < ow; ++oj) {
            std::int64_t jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < W) dst_row[jj] += src[oi * ow + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x [N,C,H,W], w [O,C,kh,kw], bias [O]. Column buffers are rebuilt in the
// backward pass instead of being cached; memory stays flat in N.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              std::int64_t stride, std::int64_t pad) {
  require(x.value().rank() == 4 && w.value().rank() == 4, "autodiff",
          "conv2d: rank-4 input and weight required");
  std::int64_t N = x.value().dim(0), C = x.value().dim(1);
  std::int64_t H = x.value().dim(2), W = x.value().dim(3);
  std::int64_t O = w.value().dim(0), kh = w.value().dim(2), kw = w.value().dim(3);
  require(w.value().dim(1) == C, "autodiff", "conv2d: channel mismatch");
  require(bias.value().numel() == O, "autodiff", "conv2d: bad bias");
  std::int64_t oh = (H + 2 * pad - kh) / stride + 1;
  std::int64_t ow = (W + 2 * pad - kw) / stride + 1;
  require(oh > 0 && ow > 0, "autodiff", "conv2d: empty output");

  std::int64_t ckk = C * kh * kw, ohw = oh * ow;
  Tensor<T> out({N, O, oh, ow});
  {
    std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
    typename Tensor<T>::ConstMatrixMap wm(w.value().data(), O, ckk);
    for (std::int64_t n = 0; n < N; ++n) {
      detail::im2col(x.value().data() + n * C * H * W, C, H, W, kh, kw, stride,
                     pad, oh, ow, col.data());
      typename Tensor<T>::ConstMatrixMap cm(col.data(), ckk, ohw);
      typename Tensor<T>::MatrixMap om(out.data() + n * O * ohw, O, ohw);
      om.noalias() = wm * cm;
      om.colwise() += bias.value().flat();
    }
  }

  auto dims = std::make_shared<std::array<std::int64_t, 11>>(
      std::array<std::int64_t, 11>{N, C, H, W, O, kh, kw, stride, pad, oh, ow});
  return detail::make_node<T>(
      std::move(out), {x, w, bias}, [x, w, bias, dims](Node<T>* nd) {
        auto [N, C, H, W, O, kh, kw, stride, pad, oh, ow] = *dims;
        std::int64_t ckk = C * kh * kw, ohw = oh * ow;
        std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
        Tensor<T> gw_acc, gx_acc;
        bool need_w = w.node()->requires_grad;
        bool need_x = x.node()->requires_grad;
        bool need_b = bias.node()->requires_grad;
        if (need_w) gw_acc = Tensor<T>(w.value().shape());
        if (need_x) gx_acc = Tensor<T>(x.value().shape());
        Tensor<T> gb_acc;
        if (need_b) gb_acc = Tensor<T>(bias.value().shape());
        typename Tensor<T>::ConstMatrixMap wm(w.value().data(), O, ckk);
        for (std::int64_t n = 0; n < N; ++n) {
          typename Tensor<T>::ConstMatrixMap gy(nd->grad.data() + n * O * ohw, O,
                                                ohw);
          if (need_b) gb_acc.flat() += gy.rowwise().sum();
          if (need_w) {
            detail::im2col(x.value().data() + n * C * H * W, C, H, W, kh, kw,
                           stride, pad, oh, ow, col.data());
            typename Tensor<T>::ConstMatrixMap cm(col.data(), ckk, ohw);
            typename Tensor<T>::MatrixMap gwm(gw_acc.data(), O, ckk);
            gwm.noalias() += gy * cm.transpose();
          }
          if (need_x) {
            typename Tensor<T>::MatrixMap cm(col.data(), ckk, ohw);
            cm.noalias() = wm.transpose() * gy;
            detail::col2im_add(col.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                               gx_acc.data() + n * C * H * W);
          }
        }
        if (need_x) detail::accumulate(x.ptr(), gx_acc);
        if (need_w) detail::accumulate(w.ptr(), gw_acc);
        if (need_b) detail::accumulate(bias.ptr(), gb_acc);
      });
}

template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
  require(x.value().rank() == 4, "autodiff", "upsample_nearest2 needs rank-4");
  std::int64_t N = x.value().dim(0), C = x.value().dim(1);
  std::int64_t H = x.value().dim(2), W = x.value().dim(3);
  Tensor<T> out({N, C, 2 * H, 2 * W});
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = x.value().data() + nc * H * W;
    T* dst = out.data() + nc * 4 * H * W;
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        T v = src[i * W + j];
        dst[(2 * i) * 2 * W + 2 * j] = v;
        dst[(2 * i) * 2 * W + 2 * j + 1] = v;
        dst[(2 * i + 1) * 2 * W + 2 * j] = v;
        dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
      }
  }
  return detail::make_node<T>(std::move(out), {x}, [x, N, C, H, W](Node<T>* n) {
    Tensor<T> g(x.value().shape());
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T* src = n->grad.data() + nc * 4 * H * W;
      T* dst = g.data() + nc * H * W;
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j)
          dst[i * W + j] = src[(2 * i) * 2 * W + 2 * j] +
                           src[(2 * i) * 2 * W + 2 * j + 1] +
                           src[(2 * i + 1) * 2 * W + 2 * j] +
                           src[(2 * i + 1) * 2 * W + 2 * j + 1];
    }
    detail::accumulate(x.ptr(), g);
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  require(x.value().rank() == 4, "autodiff", "global_avg_pool needs rank-4");
  std::int64_t N = x.value().dim(0), C = x.value().dim(1);
  std::int64_t HW = x.value().dim(2) * x.value().dim(3);
  Tensor<T> out({N, C});
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    typename Tensor<T>::ConstVectorMap v(x.value().data() + nc * HW, HW);
    out[nc] = v.sum() / static_cast<T>(HW);
  }
  return detail::make_node<T>(std::move(out), {x}, [x, N, C, HW](Node<T>* n) {
    Tensor<T> g(x.value().shape());
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      T gv = n->grad[nc] / static_cast<T>(HW);
      typename Tensor<T>::VectorMap v(g.data() + nc * HW, HW);
      v.setConstant(gv);
    }
    detail::accumulate(x.ptr(), g);
  });
}

// Normalizes each sample's channel groups to zero mean / unit variance, then
// applies per-channel affine. Statistics never cross the batch dimension, so
// per-row outputs match between batch sizes.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  std::int64_t groups, T eps = T(1e-5)) {
  require(x.value().rank() == 4, "autodiff", "group_norm needs rank-4");
  std::int64_t N = x.value().dim(0), C = x.value().dim(1);
  std::int64_t HW = x.value().dim(2) * x.value().dim(3);
  require(C % groups == 0, "autodiff", "group_norm: channels not divisible");
  require(gamma.value().numel() == C && beta.value().numel() == C, "autodiff",
          "group_norm: bad affine shapes");
  std::int64_t cg = C / groups, M = cg * HW;

  Tensor<T> out(x.value().shape());
  auto stats = std::make_shared<Tensor<T>>(Shape{N * groups, 2});  // mean, invstd
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t g = 0; g < groups; ++g) {
      const T* xs = x.value().data() + (n * C + g * cg) * HW;
      typename Tensor<T>::ConstVectorMap xv(xs, M);
      T mean = xv.sum() / static_cast<T>(M);
      T var = (xv.array() - mean).square().sum() / static_cast<T>(M);
      T invstd = T(1) / std::sqrt(var + eps);
      (*stats)[(n * groups + g) * 2] = mean;
      (*stats)[(n * groups + g) * 2 + 1] = invstd;
      for (std::int64_t c = 0; c < cg; ++c) {
        std::int64_t ch = g * cg + c;
        const T* src = xs + c * HW;
        T* dst = out.data() + (n * C + ch) * HW;
        T ga = gamma.value()[ch], be = beta.value()[ch];
        for (std::int64_t i = 0; i < HW; ++i)
          dst[i] = ga * (src[i] - mean) * invstd + be;
      }
    }
  }

  return detail::make_node<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, groups, stats, N, C, HW, cg, M](Node<T>* nd) {
        bool need_x = x.node()->requires_grad;
        bool need_g = gamma.node()->requires_grad;
        bool need_b = beta.node()->requires_grad;
        Tensor<T> gx, gg, gb;
        if (need_x) gx = Tensor<T>(x.value().shape());
        if (need_g) gg = Tensor<T>(gamma.value().shape());
        if (need_b) gb = Tensor<T>(beta.value().shape());
        std::vector<T> xhat(static_cast<std::size_t>(M));
        std::vector<T> dxh(static_cast<std::size_t>(M));
        for (std::int64_t n = 0; n < N; ++n) {
          for (std::int64_t g = 0; g < groups; ++g) {
            T mean = (*stats)[(n * groups + g) * 2];
            T invstd = (*stats)[(n * groups + g) * 2 + 1];
            const T* xs = x.value().data() + (n * C + g * cg) * HW;
            const T* gy = nd->grad.data() + (n * C + g * cg) * HW;
            T sum_dxh = T(0), sum_dxh_xh = T(0);
            for (std::int64_t c = 0; c < cg; ++c) {
              std::int64_t ch = g * cg + c;
              T ga = gamma.value()[ch];
              for (std::int64_t i = 0; i < HW; ++i) {
                std::int64_t k = c * HW + i;
                xhat[static_cast<std::size_t>(k)] = (xs[k] - mean) * invstd;
                dxh[static_cast<std::size_t>(k)] = gy[k] * ga;
                sum_dxh += dxh[static_cast<std::size_t>(k)];
                sum_dxh_xh += dxh[static_cast<std::size_t>(k)] *
                              xhat[static_cast<std::size_t>(k)];
              }
            }
            if (need_g || need_b) {
              for (std::int64_t c = 0; c < cg; ++c) {
                std::int64_t ch = g * cg + c;
                T sg = T(0), sb = T(0);
                for (std::int64_t i = 0; i < HW; ++i) {
                  std::int64_t k = c * HW + i;
                  sg += gy[k] * xhat[static_cast<std::size_t>(k)];
                  sb += gy[k];
                }
                if (need_g) gg[ch] += sg;
                if (need_b) gb[ch] += sb;
              }
            }
            if (need_x) {
              T inv_m = T(1) / static_cast<T>(M);
              T* gxp = gx.data() + (n * C + g * cg) * HW;
              for (std::int64_t k = 0; k < M; ++k)
                gxp[k] = invstd * (dxh[static_cast<std::size_t>(k)] -
                                   sum_dxh * inv_m -
                                   xhat[static_cast<std::size_t>(k)] *
                                       sum_dxh_xh * inv_m);
            }
          }
        }
        if (need_x) detail::accumulate(x.ptr(), gx);
        if (need_g) detail::accumulate(gamma.ptr(), gg);
        if (need_b) detail::accumulate(beta.ptr(), gb);
      });
}

}  // namespace horec::ad
