#pragma once

// Trainable-parameter bookkeeping and the small set of network blocks the
// model is assembled from. Parameters are persistent autodiff leaves owned by
// a ParamStore; modules hold pointers into the store.

#include <deque>
#include <string>
#include <vector>

#include "horec/autodiff.hpp"
#include "horec/container.hpp"
#include "horec/core.hpp"
#include "horec/tensor.hpp"

namespace horec::nn {

template <class T>
struct Parameter {
  std::string name;
  ad::Var<T> var;
  Tensor<T> m, v;  // Adam moments

  Tensor<T>& value() { return var.mutable_value(); }
  const Tensor<T>& value() const { return var.value(); }
};

template <class T>
class ParamStore {
 public:
  template <class InitFn>
  Parameter<T>& add(const std::string& name, Shape shape, InitFn&& init) {
    require(find(name) == nullptr, "params", "duplicate parameter '" + name + "'");
    Tensor<T> t(std::move(shape));
    init(t);
    params_.push_back(Parameter<T>{name, ad::Var<T>::leaf(std::move(t), true),
                                   Tensor<T>(t.shape()), Tensor<T>(t.shape())});
    auto& p = params_.back();
    p.m = Tensor<T>(p.value().shape());
    p.v = Tensor<T>(p.value().shape());
    return p;
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<Parameter<T>*> with_prefix(const std::string& prefix) {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) out.push_back(&p);
    return out;
  }

  std::int64_t count(const std::string& prefix = "") {
    std::int64_t n = 0;
    for (auto* p : with_prefix(prefix)) n += p->value().numel();
    return n;
  }

  // Order- and byte-exact digest of current values; used to assert frozen
  // modules stayed frozen across a training stage.
  std::uint64_t digest(const std::string& prefix = "") {
    std::uint64_t h = 1469598103934665603ull;
    for (auto* p : with_prefix(prefix)) {
      h = fnv1a64(p->name, h);
      h = fnv1a64(p->value().data(), sizeof(T) * p->value().numel(), h);
    }
    return h;
  }

  void zero_grads() {
    for (auto& p : params_) {
      p.var.node()->grad_ready = false;
    }
  }

  // Values are serialized as f32 regardless of T.
  void save_values(container::Writer& w, const std::string& entry_prefix = "param/") {
    for (auto& p : params_) w.add(entry_prefix + p.name, p.value().template cast<float>());
  }

  void load_values(const container::Archive& a,
                   const std::string& entry_prefix = "param/") {
    for (auto& p : params_) {
      auto t = a.f32(entry_prefix + p.name);
      require(t.shape() == p.value().shape(), "params",
              "parameter '" + p.name + "' has shape " + shape_str(t.shape()) +
                  " in file, expected " + shape_str(p.value().shape()));
      p.value() = t.template cast<T>();
    }
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::deque<Parameter<T>> params_;
};

// ---- initializers --------------------------------------------------------

template <class T>
auto init_zero() {
  return [](Tensor<T>& t) { t.fill(T(0)); };
}

template <class T>
auto init_const(double v) {
  return [v](Tensor<T>& t) { t.fill(static_cast<T>(v)); };
}

template <class T>
auto init_uniform(Rng& rng, double lo, double hi) {
  return [&rng, lo, hi](Tensor<T>& t) {
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<T>(rng.uniform(lo, hi));
  };
}

template <class T>
auto init_he_uniform(Rng& rng, std::int64_t fan_in) {
  double b = std::sqrt(6.0 / static_cast<double>(fan_in));
  return init_uniform<T>(rng, -b, b);
}

template <class T>
auto init_xavier_uniform(Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
  double b = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return init_uniform<T>(rng, -b, b);
}

// ---- blocks ---------------------------------------------------------------

template <class T>
struct Linear {
  Parameter<T>* w = nullptr;
  Parameter<T>* b = nullptr;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& prefix, std::int64_t in,
         std::int64_t out, Rng& rng, bool zero_out = false) {
    if (zero_out) {
      w = &ps.add(prefix + ".w", {out, in}, init_zero<T>());
      b = &ps.add(prefix + ".b", {out}, init_zero<T>());
    } else {
      w = &ps.add(prefix + ".w", {out, in}, init_he_uniform<T>(rng, in));
      b = &ps.add(prefix + ".b", {out}, init_zero<T>());
    }
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    return ad::linear(x, w->var, b->var);
  }
};

template <class T>
struct Conv2d {
  Parameter<T>* w = nullptr;
  Parameter<T>* b = nullptr;
  std::int64_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& prefix, std::int64_t in_ch,
         std::int64_t out_ch, std::int64_t k, std::int64_t stride_,
         std::int64_t pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    w = &ps.add(prefix + ".w", {out_ch, in_ch, k, k},
                init_he_uniform<T>(rng, in_ch * k * k));
    b = &ps.add(prefix + ".b", {out_ch}, init_zero<T>());
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    return ad::conv2d(x, w->var, b->var, stride, pad);
  }
};

template <class T>
struct GroupNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  std::int64_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore<T>& ps, const std::string& prefix, std::int64_t channels,
            std::int64_t groups_)
      : groups(groups_) {
    gamma = &ps.add(prefix + ".gamma", {channels}, init_const<T>(1.0));
    beta = &ps.add(prefix + ".beta", {channels}, init_zero<T>());
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    return ad::group_norm(x, gamma->var, beta->var, groups);
  }
};

// conv-norm-relu twice plus identity skip; channel count is preserved.
template <class T>
struct ResidualBlock {
  Conv2d<T> c1, c2;
  GroupNorm<T> n1, n2;

  ResidualBlock() = default;
  ResidualBlock(ParamStore<T>& ps, const std::string& prefix, std::int64_t ch,
                std::int64_t norm_groups, Rng& rng)
      : c1(ps, prefix + ".c1", ch, ch, 3, 1, 1, rng),
        c2(ps, prefix + ".c2", ch, ch, 3, 1, 1, rng),
        n1(ps, prefix + ".n1", ch, norm_groups),
        n2(ps, prefix + ".n2", ch, norm_groups) {}

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    auto h = ad::relu(n1(c1(x)));
    return ad::relu(ad::add(n2(c2(h)), x));
  }
};

// Single recurrent cell, gate order i,f,g,o; forget bias starts at one.
template <class T>
struct LSTMCell {
  Parameter<T>* w_ih = nullptr;
  Parameter<T>* w_hh = nullptr;
  Parameter<T>* b = nullptr;
  std::int64_t hidden = 0;

  LSTMCell() = default;
  LSTMCell(ParamStore<T>& ps, const std::string& prefix, std::int64_t input,
           std::int64_t hidden_, Rng& rng)
      : hidden(hidden_) {
    double k = 1.0 / std::sqrt(static_cast<double>(hidden));
    w_ih = &ps.add(prefix + ".w_ih", {4 * hidden, input}, init_uniform<T>(rng, -k, k));
    w_hh = &ps.add(prefix + ".w_hh", {4 * hidden, hidden}, init_uniform<T>(rng, -k, k));
    b = &ps.add(prefix + ".b", {4 * hidden}, [hidden_](Tensor<T>& t) {
      t.fill(T(0));
      for (std::int64_t i = hidden_; i < 2 * hidden_; ++i) t[i] = T(1);
    });
  }

  std::pair<ad::Var<T>, ad::Var<T>> operator()(const ad::Var<T>& x,
                                               const ad::Var<T>& h,
                                               const ad::Var<T>& c) const {
    auto gates = ad::add(ad::linear(x, w_ih->var, b->var), matmul_wt(h, w_hh->var));
    auto i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    auto f = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
    auto g = ad::tanh_op(ad::slice_cols(gates, 2 * hidden, hidden));
    auto o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
    auto c_new = ad::add(ad::mul(f, c), ad::mul(i, g));
    auto h_new = ad::mul(o, ad::tanh_op(c_new));
    return {h_new, c_new};
  }

  ad::Var<T> zero_state(std::int64_t batch) const {
    return ad::Var<T>::constant(Tensor<T>({batch, hidden}));
  }

 private:
  // h [N,H] times W^T with W [4H,H] as a differentiable product.
  static ad::Var<T> matmul_wt(const ad::Var<T>& h, const ad::Var<T>& w) {
    auto zero_bias = ad::Var<T>::constant(Tensor<T>({w.value().dim(0)}));
    return ad::linear(h, w, zero_bias);
  }
};

// ---- optimizer -------------------------------------------------------------

template <class T>
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;

  void step(const std::vector<Parameter<T>*>& params) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto* p : params) {
      if (!p->var.node()->grad_ready) continue;
      const Tensor<T>& g = p->var.node()->grad;
      Tensor<T>& val = p->value();
      for (std::int64_t i = 0; i < val.numel(); ++i) {
        double gi = static_cast<double>(g[i]);
        double mi = beta1 * static_cast<double>(p->m[i]) + (1.0 - beta1) * gi;
        double vi = beta2 * static_cast<double>(p->v[i]) + (1.0 - beta2) * gi * gi;
        p->m[i] = static_cast<T>(mi);
        p->v[i] = static_cast<T>(vi);
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        val[i] = static_cast<T>(static_cast<double>(val[i]) -
                                lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

}  // namespace horec::nn
