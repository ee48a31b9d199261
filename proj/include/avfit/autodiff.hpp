//
// Reverse-mode differentiation on a tape of coarse tensor primitives.
//
// A Tape records tensor-valued nodes in creation order (which is a valid
// topological order); backward() replays them in exact reverse order with a
// fixed serial accumulation order, so adjoints are bit-reproducible.
// Parameters live in a ParamStore and are bound to leaf nodes per forward
// pass; frozen groups report zero adjoints and are never updated.
//

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mathx.hpp"

namespace avfit::ad {

// ---------------------------------------------------------------------------
// Tensor: flat double storage plus a shape.
// ---------------------------------------------------------------------------

struct Tensor {
  std::vector<double> v;
  std::vector<int> shape;

  Tensor() = default;
  Tensor(std::vector<double> data, std::vector<int> shp) : v(std::move(data)), shape(std::move(shp)) {}

  static Tensor zeros(std::vector<int> shp) {
    int n = 1;
    for (int d : shp) n *= d;
    return Tensor(std::vector<double>(size_t(n), 0.0), std::move(shp));
  }
  static Tensor full(std::vector<int> shp, double x) {
    auto t = zeros(std::move(shp));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }
  static Tensor scalar(double x) { return Tensor({x}, {1}); }

  int numel() const { return int(v.size()); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int row_size() const { return rows() > 0 ? numel() / rows() : 0; }
};

using Adjoints = std::map<std::string, Tensor>;

struct tape_error : std::runtime_error {
  int node_id;
  tape_error(const std::string& msg, int id) : std::runtime_error(msg), node_id(id) {}
};

// Generic sparse row map: out[r] = sum_k w_rk * in[i_rk]. Rows of the
// subdivision map and other fixed linear operators use this form.
struct SparseMap {
  int rows = 0, cols = 0;
  std::vector<std::vector<std::pair<int, double>>> entries;  // per output row

  Tensor apply(const Tensor& x) const {
    int d = x.row_size();
    Tensor out = Tensor::zeros({rows, d});
    for (int r = 0; r < rows; r++)
      for (auto [i, w] : entries[r])
        for (int c = 0; c < d; c++) out.v[size_t(r) * d + c] += w * x.v[size_t(i) * d + c];
    return out;
  }
};

// ---------------------------------------------------------------------------
// Parameter store.
// ---------------------------------------------------------------------------

struct ParamGroup {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
  bool frozen = false;
  // Post-step projection box, per channel of the last axis (empty = none,
  // size 1 = uniform). Applied by the optimizer after each update.
  std::vector<std::pair<double, double>> clamp;

  int numel() const { return int(data.size()); }
};

class ParamStore {
 public:
  ParamGroup& add(const std::string& name, std::vector<int> shape, double init = 0.0) {
    int n = 1;
    for (int d : shape) n *= d;
    return add(name, std::move(shape), std::vector<double>(size_t(n), init));
  }
  ParamGroup& add(const std::string& name, std::vector<int> shape, std::vector<double> data) {
    if (index_.count(name)) throw std::runtime_error("parameter group already exists: " + name);
    int n = 1;
    for (int d : shape) n *= d;
    if (int(data.size()) != n) throw std::runtime_error("parameter data/shape mismatch: " + name);
    index_[name] = int(groups_.size());
    groups_.push_back({name, std::move(shape), std::move(data)});
    return groups_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  ParamGroup& operator[](const std::string& name) { return groups_[at(name)]; }
  const ParamGroup& operator[](const std::string& name) const { return groups_[at(name)]; }
  std::vector<ParamGroup>& groups() { return groups_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  void freeze(const std::string& name, bool on = true) { (*this)[name].frozen = on; }

 private:
  int at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("no such parameter group: " + name);
    return it->second;
  }
  std::vector<ParamGroup> groups_;
  std::unordered_map<std::string, int> index_;
};

inline void project_group(ParamGroup& g) {
  if (g.clamp.empty()) return;
  int ch = int(g.clamp.size());
  if (ch == 1) {
    auto [lo, hi] = g.clamp[0];
    for (auto& x : g.data) x = std::min(hi, std::max(lo, x));
  } else {
    if (g.shape.empty() || g.shape.back() != ch)
      throw std::runtime_error("per-channel clamp does not match last axis: " + g.name);
    for (size_t i = 0; i < g.data.size(); i++) {
      auto [lo, hi] = g.clamp[i % ch];
      g.data[i] = std::min(hi, std::max(lo, g.data[i]));
    }
  }
}

// ---------------------------------------------------------------------------
// Tape.
// ---------------------------------------------------------------------------

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  struct Node {
    const char* op = "";
    Tensor val;
    Tensor grad;  // lazily allocated during backward
    bool needs_grad = false;
    bool grad_live = false;
    std::function<void(Tape&)> back;  // null for leaves and pruned nodes
  };

  // --- node access -----------------------------------------------------

  const Tensor& val(Var x) const { return nodes_[x.id].val; }
  double scalar(Var x) const { return nodes_[x.id].val.v[0]; }
  int size() const { return int(nodes_.size()); }
  bool wants(int id) const { return nodes_[id].needs_grad; }

  std::vector<double>& grad_buf(int id) {
    auto& n = nodes_[id];
    if (!n.grad_live) {
      n.grad = Tensor::zeros(n.val.shape);
      n.grad_live = true;
    }
    return n.grad.v;
  }
  const Tensor& grad(Var x) const { return nodes_[x.id].grad; }

  // --- leaves ------------------------------------------------------------

  Var leaf(Tensor t, bool needs_grad) {
    return push("leaf", std::move(t), needs_grad, nullptr);
  }
  Var constant(Tensor t) { return leaf(std::move(t), false); }
  Var scalar_const(double x) { return constant(Tensor::scalar(x)); }

  struct Bound {
    std::unordered_map<std::string, Var> vars;
    Var operator()(const std::string& name) const {
      auto it = vars.find(name);
      if (it == vars.end()) throw std::runtime_error("unbound parameter group: " + name);
      return it->second;
    }
  };

  Bound bind(const ParamStore& store) {
    Bound b;
    for (auto& g : store.groups()) {
      Var v = leaf(Tensor(g.data, g.shape), !g.frozen);
      b.vars[g.name] = v;
      bound_.push_back({g.name, v.id, g.frozen});
    }
    return b;
  }

  // --- shape / copy ops ----------------------------------------------------

  Var detach(Var a) { return push("detach", nodes_[a.id].val, false, nullptr); }

  Var reshape(Var a, std::vector<int> shape) {
    Tensor t = nodes_[a.id].val;
    int n = 1;
    for (int d : shape) n *= d;
    if (n != t.numel()) throw std::runtime_error("reshape numel mismatch");
    t.shape = std::move(shape);
    bool ng = wants(a.id);
    Var out = push("reshape", std::move(t), ng, nullptr);
    if (ng) set_back(out, [out, a](Tape& t) {
      auto& go = t.nodes_[out.id].grad.v;
      auto& ga = t.grad_buf(a.id);
      for (size_t i = 0; i < go.size(); i++) ga[i] += go[i];
    });
    return out;
  }

  // --- elementwise binary ---------------------------------------------------

  Var add(Var a, Var b) {
    return binary("add", a, b, [](double x, double y) { return x + y; },
                  [](double, double, double g, double& gx, double& gy) { gx += g; gy += g; });
  }
  Var sub(Var a, Var b) {
    return binary("sub", a, b, [](double x, double y) { return x - y; },
                  [](double, double, double g, double& gx, double& gy) { gx += g; gy -= g; });
  }
  Var mul(Var a, Var b) {
    return binary("mul", a, b, [](double x, double y) { return x * y; },
                  [](double x, double y, double g, double& gx, double& gy) { gx += g * y; gy += g * x; });
  }
  Var div(Var a, Var b) {
    return binary("div", a, b, [](double x, double y) { return x / y; },
                  [](double x, double y, double g, double& gx, double& gy) {
                    gx += g / y;
                    gy -= g * x / (y * y);
                  });
  }

  Var adds(Var a, double s) {
    return unary("adds", a, [s](double x) { return x + s; }, [](double, double g) { return g; });
  }
  Var muls(Var a, double s) {
    return unary("muls", a, [s](double x) { return x * s; }, [s](double, double g) { return g * s; });
  }
  Var neg(Var a) { return muls(a, -1.0); }

  // --- elementwise unary -----------------------------------------------------

  Var vabs(Var a) {
    return unary("abs", a, [](double x) { return std::fabs(x); },
                 [](double x, double g) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
  }
  Var vsq(Var a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double g) { return 2.0 * x * g; });
  }
  Var vsqrt(Var a) {
    return unary("sqrt", a, [](double x) { return std::sqrt(x); },
                 [](double x, double g) { return x > 0 ? 0.5 * g / std::sqrt(x) : 0.0; });
  }
  Var vsigmoid(Var a) {
    return unary("sigmoid", a, [](double x) { return sigmoid(x); },
                 [](double x, double g) {
                   double s = sigmoid(x);
                   return g * s * (1.0 - s);
                 });
  }
  // Clamp passes zero gradient outside [lo, hi] and one-sided at the kinks.
  Var vclamp(Var a, double lo, double hi) {
    return unary("clamp", a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                 [lo, hi](double x, double g) { return (x > lo && x < hi) ? g : 0.0; });
  }
  Var vmax0(Var a) {
    return unary("max0", a, [](double x) { return x > 0 ? x : 0.0; },
                 [](double x, double g) { return x > 0 ? g : 0.0; });
  }

  // --- broadcast helpers -----------------------------------------------------

  Var add_rowvec(Var a, Var b) {  // [n,d] + [d]
    auto& ta = nodes_[a.id].val;
    auto& tb = nodes_[b.id].val;
    int n = ta.rows(), d = ta.row_size();
    if (tb.numel() != d) throw std::runtime_error("add_rowvec: size mismatch");
    Tensor out = ta;
    for (int i = 0; i < n; i++)
      for (int c = 0; c < d; c++) out.v[size_t(i) * d + c] += tb.v[c];
    bool ng = wants(a.id) || wants(b.id);
    Var o = push("add_rowvec", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, b, n, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      if (t.wants(a.id)) {
        auto& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < go.size(); i++) ga[i] += go[i];
      }
      if (t.wants(b.id)) {
        auto& gb = t.grad_buf(b.id);
        for (int i = 0; i < n; i++)
          for (int c = 0; c < d; c++) gb[c] += go[size_t(i) * d + c];
      }
    });
    return o;
  }

  Var mul_rowvec(Var a, Var b) {  // [n,d] * [d]
    auto& ta = nodes_[a.id].val;
    auto& tb = nodes_[b.id].val;
    int n = ta.rows(), d = ta.row_size();
    if (tb.numel() != d) throw std::runtime_error("mul_rowvec: size mismatch");
    Tensor out = ta;
    for (int i = 0; i < n; i++)
      for (int c = 0; c < d; c++) out.v[size_t(i) * d + c] *= tb.v[c];
    bool ng = wants(a.id) || wants(b.id);
    Var o = push("mul_rowvec", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, b, n, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& vb = t.nodes_[b.id].val.v;
      if (t.wants(a.id)) {
        auto& ga = t.grad_buf(a.id);
        for (int i = 0; i < n; i++)
          for (int c = 0; c < d; c++) ga[size_t(i) * d + c] += go[size_t(i) * d + c] * vb[c];
      }
      if (t.wants(b.id)) {
        auto& gb = t.grad_buf(b.id);
        for (int i = 0; i < n; i++)
          for (int c = 0; c < d; c++) gb[c] += go[size_t(i) * d + c] * va[size_t(i) * d + c];
      }
    });
    return o;
  }

  Var mul_colvec(Var a, Var b) {  // [n,d] * [n]
    auto& ta = nodes_[a.id].val;
    auto& tb = nodes_[b.id].val;
    int n = ta.rows(), d = ta.row_size();
    if (tb.numel() != n) throw std::runtime_error("mul_colvec: size mismatch");
    Tensor out = ta;
    for (int i = 0; i < n; i++)
      for (int c = 0; c < d; c++) out.v[size_t(i) * d + c] *= tb.v[i];
    bool ng = wants(a.id) || wants(b.id);
    Var o = push("mul_colvec", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, b, n, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& vb = t.nodes_[b.id].val.v;
      if (t.wants(a.id)) {
        auto& ga = t.grad_buf(a.id);
        for (int i = 0; i < n; i++)
          for (int c = 0; c < d; c++) ga[size_t(i) * d + c] += go[size_t(i) * d + c] * vb[i];
      }
      if (t.wants(b.id)) {
        auto& gb = t.grad_buf(b.id);
        for (int i = 0; i < n; i++) {
          double s = 0;
          for (int c = 0; c < d; c++) s += go[size_t(i) * d + c] * va[size_t(i) * d + c];
          gb[i] += s;
        }
      }
    });
    return o;
  }

  // --- linear algebra --------------------------------------------------------

  Var matmul(Var a, Var b) {  // [m,k] x [k,n]
    auto& ta = nodes_[a.id].val;
    auto& tb = nodes_[b.id].val;
    if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
      throw std::runtime_error("matmul: shape mismatch");
    int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; i++)
      for (int p = 0; p < k; p++) {
        double x = ta.v[size_t(i) * k + p];
        if (x == 0) continue;
        for (int j = 0; j < n; j++) out.v[size_t(i) * n + j] += x * tb.v[size_t(p) * n + j];
      }
    bool ng = wants(a.id) || wants(b.id);
    Var o = push("matmul", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, b, m, k, n](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& vb = t.nodes_[b.id].val.v;
      if (t.wants(a.id)) {
        auto& ga = t.grad_buf(a.id);
        for (int i = 0; i < m; i++)
          for (int p = 0; p < k; p++) {
            double s = 0;
            for (int j = 0; j < n; j++) s += go[size_t(i) * n + j] * vb[size_t(p) * n + j];
            ga[size_t(i) * k + p] += s;
          }
      }
      if (t.wants(b.id)) {
        auto& gb = t.grad_buf(b.id);
        for (int p = 0; p < k; p++)
          for (int i = 0; i < m; i++) {
            double x = va[size_t(i) * k + p];
            if (x == 0) continue;
            for (int j = 0; j < n; j++) gb[size_t(p) * n + j] += x * go[size_t(i) * n + j];
          }
      }
    });
    return o;
  }

  Var transpose(Var a) {
    auto& ta = nodes_[a.id].val;
    if (ta.shape.size() != 2) throw std::runtime_error("transpose: need 2-d");
    int m = ta.shape[0], n = ta.shape[1];
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; i++)
      for (int j = 0; j < n; j++) out.v[size_t(j) * m + i] = ta.v[size_t(i) * n + j];
    bool ng = wants(a.id);
    Var o = push("transpose", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, m, n](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& ga = t.grad_buf(a.id);
      for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++) ga[size_t(i) * n + j] += go[size_t(j) * m + i];
    });
    return o;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_rows: empty");
    int d = nodes_[parts[0].id].val.row_size();
    int rows = 0;
    bool ng = false;
    for (auto p : parts) {
      if (nodes_[p.id].val.row_size() != d) throw std::runtime_error("concat_rows: width mismatch");
      rows += nodes_[p.id].val.rows();
      ng = ng || wants(p.id);
    }
    Tensor out = Tensor::zeros({rows, d});
    int r = 0;
    std::vector<std::pair<int, int>> spans;  // (node, first row)
    for (auto p : parts) {
      auto& tv = nodes_[p.id].val;
      std::copy(tv.v.begin(), tv.v.end(), out.v.begin() + size_t(r) * d);
      spans.push_back({p.id, r});
      r += tv.rows();
    }
    Var o = push("concat_rows", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, spans, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      for (auto [pid, r0] : spans) {
        if (!t.wants(pid)) continue;
        auto& gp = t.grad_buf(pid);
        for (size_t i = 0; i < gp.size(); i++) gp[i] += go[size_t(r0) * d + i];
      }
    });
    return o;
  }

  // --- gather / scatter ------------------------------------------------------

  Var gather_rows(Var a, std::vector<int> idx) {
    auto& ta = nodes_[a.id].val;
    int d = ta.row_size();
    Tensor out = Tensor::zeros({int(idx.size()), d});
    for (size_t i = 0; i < idx.size(); i++)
      for (int c = 0; c < d; c++) out.v[i * d + c] = ta.v[size_t(idx[i]) * d + c];
    bool ng = wants(a.id);
    Var o = push("gather_rows", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, idx = std::move(idx), d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& ga = t.grad_buf(a.id);
      for (size_t i = 0; i < idx.size(); i++)
        for (int c = 0; c < d; c++) ga[size_t(idx[i]) * d + c] += go[i * d + c];
    });
    return o;
  }

  Var scatter_add_rows(Var a, std::vector<int> idx, int n) {
    auto& ta = nodes_[a.id].val;
    int d = ta.row_size();
    if (int(idx.size()) != ta.rows()) throw std::runtime_error("scatter_add_rows: index count");
    Tensor out = Tensor::zeros({n, d});
    for (size_t i = 0; i < idx.size(); i++)
      for (int c = 0; c < d; c++) out.v[size_t(idx[i]) * d + c] += ta.v[i * d + c];
    bool ng = wants(a.id);
    Var o = push("scatter_add_rows", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, idx = std::move(idx), d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& ga = t.grad_buf(a.id);
      for (size_t i = 0; i < idx.size(); i++)
        for (int c = 0; c < d; c++) ga[i * d + c] += go[size_t(idx[i]) * d + c];
    });
    return o;
  }

  Var col(Var a, int j) {
    auto& ta = nodes_[a.id].val;
    int n = ta.rows(), d = ta.row_size();
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; i++) out.v[i] = ta.v[size_t(i) * d + j];
    bool ng = wants(a.id);
    Var o = push("col", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, j, n, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& ga = t.grad_buf(a.id);
      for (int i = 0; i < n; i++) ga[size_t(i) * d + j] += go[i];
    });
    return o;
  }

  Var stack_cols(const std::vector<Var>& cols) {
    int n = nodes_[cols[0].id].val.numel();
    int k = int(cols.size());
    bool ng = false;
    for (auto c : cols) {
      if (nodes_[c.id].val.numel() != n) throw std::runtime_error("stack_cols: size mismatch");
      ng = ng || wants(c.id);
    }
    Tensor out = Tensor::zeros({n, k});
    for (int j = 0; j < k; j++) {
      auto& tv = nodes_[cols[j].id].val.v;
      for (int i = 0; i < n; i++) out.v[size_t(i) * k + j] = tv[i];
    }
    std::vector<int> ids;
    for (auto c : cols) ids.push_back(c.id);
    Var o = push("stack_cols", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, ids, n, k](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      for (int j = 0; j < k; j++) {
        if (!t.wants(ids[j])) continue;
        auto& gc = t.grad_buf(ids[j]);
        for (int i = 0; i < n; i++) gc[i] += go[size_t(i) * k + j];
      }
    });
    return o;
  }

  // --- reductions --------------------------------------------------------------

  Var sum(Var a) {
    auto& ta = nodes_[a.id].val;
    double s = 0;
    for (double x : ta.v) s += x;
    bool ng = wants(a.id);
    Var o = push("sum", Tensor::scalar(s), ng, nullptr);
    if (ng) set_back(o, [o, a](Tape& t) {
      double g = t.nodes_[o.id].grad.v[0];
      auto& ga = t.grad_buf(a.id);
      for (auto& x : ga) x += g;
    });
    return o;
  }

  Var mean(Var a) {
    int n = nodes_[a.id].val.numel();
    return muls(sum(a), 1.0 / double(n));
  }

  Var max_all(Var a) {  // subgradient to the first argmax
    auto& ta = nodes_[a.id].val;
    int arg = 0;
    for (int i = 1; i < ta.numel(); i++)
      if (ta.v[i] > ta.v[arg]) arg = i;
    bool ng = wants(a.id);
    Var o = push("max_all", Tensor::scalar(ta.v[arg]), ng, nullptr);
    if (ng) set_back(o, [o, a, arg](Tape& t) {
      t.grad_buf(a.id)[arg] += t.nodes_[o.id].grad.v[0];
    });
    return o;
  }

  // --- rowwise 3-vector ops ------------------------------------------------------

  Var cross_rows(Var a, Var b) {  // [n,3] x [n,3]
    auto& ta = nodes_[a.id].val;
    auto& tb = nodes_[b.id].val;
    int n = ta.rows();
    Tensor out = Tensor::zeros({n, 3});
    for (int i = 0; i < n; i++) {
      const double* x = &ta.v[size_t(i) * 3];
      const double* y = &tb.v[size_t(i) * 3];
      double* z = &out.v[size_t(i) * 3];
      z[0] = x[1] * y[2] - x[2] * y[1];
      z[1] = x[2] * y[0] - x[0] * y[2];
      z[2] = x[0] * y[1] - x[1] * y[0];
    }
    bool ng = wants(a.id) || wants(b.id);
    Var o = push("cross_rows", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, b, n](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& vb = t.nodes_[b.id].val.v;
      // c = a x b:  ga += b x gc,  gb += gc x a
      if (t.wants(a.id)) {
        auto& ga = t.grad_buf(a.id);
        for (int i = 0; i < n; i++) {
          const double* y = &vb[size_t(i) * 3];
          const double* g = &go[size_t(i) * 3];
          ga[size_t(i) * 3 + 0] += y[1] * g[2] - y[2] * g[1];
          ga[size_t(i) * 3 + 1] += y[2] * g[0] - y[0] * g[2];
          ga[size_t(i) * 3 + 2] += y[0] * g[1] - y[1] * g[0];
        }
      }
      if (t.wants(b.id)) {
        auto& gb = t.grad_buf(b.id);
        for (int i = 0; i < n; i++) {
          const double* x = &va[size_t(i) * 3];
          const double* g = &go[size_t(i) * 3];
          gb[size_t(i) * 3 + 0] += g[1] * x[2] - g[2] * x[1];
          gb[size_t(i) * 3 + 1] += g[2] * x[0] - g[0] * x[2];
          gb[size_t(i) * 3 + 2] += g[0] * x[1] - g[1] * x[0];
        }
      }
    });
    return o;
  }

  Var dot_rows(Var a, Var b) {  // -> [n]
    auto& ta = nodes_[a.id].val;
    auto& tb = nodes_[b.id].val;
    int n = ta.rows(), d = ta.row_size();
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; i++) {
      double s = 0;
      for (int c = 0; c < d; c++) s += ta.v[size_t(i) * d + c] * tb.v[size_t(i) * d + c];
      out.v[i] = s;
    }
    bool ng = wants(a.id) || wants(b.id);
    Var o = push("dot_rows", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, b, n, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& vb = t.nodes_[b.id].val.v;
      if (t.wants(a.id)) {
        auto& ga = t.grad_buf(a.id);
        for (int i = 0; i < n; i++)
          for (int c = 0; c < d; c++) ga[size_t(i) * d + c] += go[i] * vb[size_t(i) * d + c];
      }
      if (t.wants(b.id)) {
        auto& gb = t.grad_buf(b.id);
        for (int i = 0; i < n; i++)
          for (int c = 0; c < d; c++) gb[size_t(i) * d + c] += go[i] * va[size_t(i) * d + c];
      }
    });
    return o;
  }

  Var norm_rows(Var a) {  // -> [n]
    auto& ta = nodes_[a.id].val;
    int n = ta.rows(), d = ta.row_size();
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; i++) {
      double s = 0;
      for (int c = 0; c < d; c++) s += ta.v[size_t(i) * d + c] * ta.v[size_t(i) * d + c];
      out.v[i] = std::sqrt(s);
    }
    bool ng = wants(a.id);
    Var o = push("norm_rows", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, n, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& vo = t.nodes_[o.id].val.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& ga = t.grad_buf(a.id);
      for (int i = 0; i < n; i++) {
        double l = vo[i];
        if (l <= 1e-300) continue;
        double g = go[i] / l;
        for (int c = 0; c < d; c++) ga[size_t(i) * d + c] += g * va[size_t(i) * d + c];
      }
    });
    return o;
  }

  Var normalize_rows(Var a) {
    auto& ta = nodes_[a.id].val;
    int n = ta.rows(), d = ta.row_size();
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; i++) {
      double s = 0;
      for (int c = 0; c < d; c++) s += ta.v[size_t(i) * d + c] * ta.v[size_t(i) * d + c];
      double l = std::sqrt(s);
      if (l > 1e-300)
        for (int c = 0; c < d; c++) out.v[size_t(i) * d + c] = ta.v[size_t(i) * d + c] / l;
    }
    bool ng = wants(a.id);
    Var o = push("normalize", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, n, d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& vo = t.nodes_[o.id].val.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& ga = t.grad_buf(a.id);
      for (int i = 0; i < n; i++) {
        double s = 0;
        for (int c = 0; c < d; c++) s += va[size_t(i) * d + c] * va[size_t(i) * d + c];
        double l = std::sqrt(s);
        if (l <= 1e-300) continue;
        double dotg = 0;
        for (int c = 0; c < d; c++) dotg += vo[size_t(i) * d + c] * go[size_t(i) * d + c];
        for (int c = 0; c < d; c++)
          ga[size_t(i) * d + c] += (go[size_t(i) * d + c] - vo[size_t(i) * d + c] * dotg) / l;
      }
    });
    return o;
  }

  // --- rotations ---------------------------------------------------------------

  // Axis-angle [J,3] -> row-major rotations [J,9] via the Rodrigues form
  // R = I + A K + B K^2 with A = sin(th)/th, B = (1-cos(th))/th^2 expressed as
  // smooth functions of th^2 (series near zero).
  Var rodrigues(Var w) {
    auto& tw = nodes_[w.id].val;
    int J = tw.rows();
    Tensor out = Tensor::zeros({J, 9});
    for (int j = 0; j < J; j++) {
      Vec3 ww{tw.v[size_t(j) * 3], tw.v[size_t(j) * 3 + 1], tw.v[size_t(j) * 3 + 2]};
      Mat3 r = rotation_from_axis_angle(ww);
      for (int i = 0; i < 9; i++) out.v[size_t(j) * 9 + i] = r.m[i];
    }
    bool ng = wants(w.id);
    Var o = push("rodrigues", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, w, J](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& vw = t.nodes_[w.id].val.v;
      auto& gw = t.grad_buf(w.id);
      for (int j = 0; j < J; j++) {
        double x = vw[size_t(j) * 3], y = vw[size_t(j) * 3 + 1], z = vw[size_t(j) * 3 + 2];
        double tt = x * x + y * y + z * z;
        double th = std::sqrt(tt);
        double A, B, dA, dB;
        if (tt < 1e-12) {
          A = 1.0 - tt / 6.0 + tt * tt / 120.0;
          B = 0.5 - tt / 24.0 + tt * tt / 720.0;
          dA = -1.0 / 6.0 + tt / 60.0;
          dB = -1.0 / 24.0 + tt / 360.0;
        } else {
          A = std::sin(th) / th;
          B = (1.0 - std::cos(th)) / tt;
          dA = (th * std::cos(th) - std::sin(th)) / (2.0 * th * tt);
          dB = (th * std::sin(th) / 2.0 - (1.0 - std::cos(th))) / (tt * tt);
        }
        double K[9] = {0, -z, y, z, 0, -x, -y, x, 0};
        double K2[9];
        for (int r = 0; r < 3; r++)
          for (int c = 0; c < 3; c++) {
            double s = 0;
            for (int k = 0; k < 3; k++) s += K[r * 3 + k] * K[k * 3 + c];
            K2[r * 3 + c] = s;
          }
        const double* G = &go[size_t(j) * 9];
        double gA = 0, gB = 0;
        for (int i = 0; i < 9; i++) {
          gA += G[i] * K[i];
          gB += G[i] * K2[i];
        }
        // dL/dK = A G + B (G K^T + K^T G)
        double M[9];
        for (int r = 0; r < 3; r++)
          for (int c = 0; c < 3; c++) {
            double s = A * G[r * 3 + c];
            for (int k = 0; k < 3; k++)
              s += B * (G[r * 3 + k] * K[c * 3 + k] + K[k * 3 + r] * G[k * 3 + c]);
            M[r * 3 + c] = s;
          }
        double* gwj = &gw[size_t(j) * 3];
        gwj[0] += M[7] - M[5];  // (2,1) - (1,2)
        gwj[1] += M[2] - M[6];  // (0,2) - (2,0)
        gwj[2] += M[3] - M[1];  // (1,0) - (0,1)
        double gt = gA * dA + gB * dB;
        gwj[0] += gt * 2.0 * x;
        gwj[1] += gt * 2.0 * y;
        gwj[2] += gt * 2.0 * z;
      }
    });
    return o;
  }

  // --- fixed sparse linear map ----------------------------------------------------

  Var spmv(std::shared_ptr<const SparseMap> map, Var a) {
    auto& ta = nodes_[a.id].val;
    if (ta.rows() != map->cols) throw std::runtime_error("spmv: row count mismatch");
    Tensor out = map->apply(ta);
    bool ng = wants(a.id);
    Var o = push("spmv", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, map](Tape& t) {
      int d = t.nodes_[a.id].val.row_size();
      auto& go = t.nodes_[o.id].grad.v;
      auto& ga = t.grad_buf(a.id);
      for (int r = 0; r < map->rows; r++)
        for (auto [i, wgt] : map->entries[r])
          for (int c = 0; c < d; c++) ga[size_t(i) * d + c] += wgt * go[size_t(r) * d + c];
    });
    return o;
  }

  // --- texture sampling -------------------------------------------------------------

  // Bilinear sample of tex [H,W,C] at uv in [0,1]^2 (n samples); coordinates
  // outside the map clamp to the border (zero coordinate gradient there).
  Var bilinear_sample(Var tex, Var uv) {
    auto& tt = nodes_[tex.id].val;
    auto& tu = nodes_[uv.id].val;
    if (tt.shape.size() != 3) throw std::runtime_error("bilinear_sample: tex must be [H,W,C]");
    int H = tt.shape[0], W = tt.shape[1], C = tt.shape[2];
    int n = tu.rows();
    Tensor out = Tensor::zeros({n, C});
    for (int i = 0; i < n; i++) {
      double px = tu.v[size_t(i) * 2] * W - 0.5;
      double py = tu.v[size_t(i) * 2 + 1] * H - 0.5;
      px = std::min(double(W - 1), std::max(0.0, px));
      py = std::min(double(H - 1), std::max(0.0, py));
      int x0 = std::min(int(px), std::max(W - 2, 0));
      int y0 = std::min(int(py), std::max(H - 2, 0));
      int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      double fx = px - x0, fy = py - y0;
      for (int c = 0; c < C; c++) {
        double t00 = tt.v[(size_t(y0) * W + x0) * C + c], t01 = tt.v[(size_t(y0) * W + x1) * C + c];
        double t10 = tt.v[(size_t(y1) * W + x0) * C + c], t11 = tt.v[(size_t(y1) * W + x1) * C + c];
        out.v[size_t(i) * C + c] = (1 - fy) * ((1 - fx) * t00 + fx * t01) + fy * ((1 - fx) * t10 + fx * t11);
      }
    }
    bool ng = wants(tex.id) || wants(uv.id);
    Var o = push("bilinear_sample", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, tex, uv, H, W, C, n](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& tt = t.nodes_[tex.id].val.v;
      auto& tu = t.nodes_[uv.id].val.v;
      bool wt = t.wants(tex.id), wu = t.wants(uv.id);
      auto* gt = wt ? &t.grad_buf(tex.id) : nullptr;
      auto* gu = wu ? &t.grad_buf(uv.id) : nullptr;
      for (int i = 0; i < n; i++) {
        double rx = tu[size_t(i) * 2] * W - 0.5;
        double ry = tu[size_t(i) * 2 + 1] * H - 0.5;
        double px = std::min(double(W - 1), std::max(0.0, rx));
        double py = std::min(double(H - 1), std::max(0.0, ry));
        int x0 = std::min(int(px), std::max(W - 2, 0));
        int y0 = std::min(int(py), std::max(H - 2, 0));
        int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        double fx = px - x0, fy = py - y0;
        double dpx = 0, dpy = 0;
        for (int c = 0; c < C; c++) {
          double g = go[size_t(i) * C + c];
          if (g == 0) continue;
          double t00 = tt[(size_t(y0) * W + x0) * C + c], t01 = tt[(size_t(y0) * W + x1) * C + c];
          double t10 = tt[(size_t(y1) * W + x0) * C + c], t11 = tt[(size_t(y1) * W + x1) * C + c];
          if (wt) {
            (*gt)[(size_t(y0) * W + x0) * C + c] += g * (1 - fy) * (1 - fx);
            (*gt)[(size_t(y0) * W + x1) * C + c] += g * (1 - fy) * fx;
            (*gt)[(size_t(y1) * W + x0) * C + c] += g * fy * (1 - fx);
            (*gt)[(size_t(y1) * W + x1) * C + c] += g * fy * fx;
          }
          dpx += g * ((1 - fy) * (t01 - t00) + fy * (t11 - t10));
          dpy += g * ((1 - fx) * (t10 - t00) + fx * (t11 - t01));
        }
        if (wu) {
          if (rx > 0 && rx < W - 1) (*gu)[size_t(i) * 2] += dpx * W;
          if (ry > 0 && ry < H - 1) (*gu)[size_t(i) * 2 + 1] += dpy * H;
        }
      }
    });
    return o;
  }

  // --- image assembly ---------------------------------------------------------------

  // Scatter rows of x [m,d] into a fresh [n,d] tensor at unique row indices,
  // all other rows set to `fill`.
  Var assemble_rows(Var x, std::vector<int> idx, int n, double fill) {
    auto& tx = nodes_[x.id].val;
    int d = tx.row_size();
    if (int(idx.size()) != tx.rows()) throw std::runtime_error("assemble_rows: index count");
    Tensor out = Tensor::full({n, d}, fill);
    for (size_t i = 0; i < idx.size(); i++)
      for (int c = 0; c < d; c++) out.v[size_t(idx[i]) * d + c] = tx.v[i * d + c];
    bool ng = wants(x.id);
    Var o = push("assemble_rows", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, x, idx = std::move(idx), d](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < idx.size(); i++)
        for (int c = 0; c < d; c++) gx[i * d + c] += go[size_t(idx[i]) * d + c];
    });
    return o;
  }

  // --- pyramid downsampling ------------------------------------------------------------

  // Binomial 5-tap separable low-pass + decimate by 2 (reflected borders).
  Var pyr_down(Var img) {
    auto& ti = nodes_[img.id].val;
    if (ti.shape.size() != 3) throw std::runtime_error("pyr_down: need [H,W,C]");
    int H = ti.shape[0], W = ti.shape[1], C = ti.shape[2];
    int H2 = (H + 1) / 2, W2 = (W + 1) / 2;
    static const double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
    auto reflect = [](int i, int n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
      return std::max(0, std::min(n - 1, i));
    };
    Tensor out = Tensor::zeros({H2, W2, C});
    for (int oy = 0; oy < H2; oy++)
      for (int ox = 0; ox < W2; ox++)
        for (int c = 0; c < C; c++) {
          double s = 0;
          for (int i = 0; i < 5; i++)
            for (int j = 0; j < 5; j++) {
              int yy = reflect(2 * oy - 2 + i, H), xx = reflect(2 * ox - 2 + j, W);
              s += k[i] * k[j] * ti.v[(size_t(yy) * W + xx) * C + c];
            }
          out.v[(size_t(oy) * W2 + ox) * C + c] = s;
        }
    bool ng = wants(img.id);
    Var o = push("pyr_down", std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, img, H, W, C, H2, W2, reflect](Tape& t) {
      static const double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
      auto& go = t.nodes_[o.id].grad.v;
      auto& gi = t.grad_buf(img.id);
      for (int oy = 0; oy < H2; oy++)
        for (int ox = 0; ox < W2; ox++)
          for (int c = 0; c < C; c++) {
            double g = go[(size_t(oy) * W2 + ox) * C + c];
            if (g == 0) continue;
            for (int i = 0; i < 5; i++)
              for (int j = 0; j < 5; j++) {
                int yy = reflect(2 * oy - 2 + i, H), xx = reflect(2 * ox - 2 + j, W);
                gi[(size_t(yy) * W + xx) * C + c] += g * k[i] * k[j];
              }
          }
    });
    return o;
  }

  // --- backward -----------------------------------------------------------------------

  // Reverse sweep from a scalar loss. Nodes are visited in exact reverse
  // creation order; accumulation within each node is serial, so repeated
  // passes produce bit-identical adjoints.
  Adjoints backward(Var loss) {
    auto& ln = nodes_[loss.id];
    if (ln.val.numel() != 1) throw std::runtime_error("backward: loss must be scalar");
    for (auto& n : nodes_) {
      if (n.grad_live) {
        std::fill(n.grad.v.begin(), n.grad.v.end(), 0.0);
        n.grad_live = false;
      }
    }
    grad_buf(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; id--) {
      auto& n = nodes_[id];
      if (n.grad_live && n.back) n.back(*this);
    }
    Adjoints adj;
    for (auto& b : bound_) {
      auto& n = nodes_[b.id];
      if (b.frozen || !n.grad_live)
        adj[b.name] = Tensor::zeros(n.val.shape);
      else
        adj[b.name] = n.grad;
    }
    return adj;
  }

 private:
  struct BoundGroup {
    std::string name;
    int id;
    bool frozen;
  };

  Var push(const char* op, Tensor val, bool needs_grad, std::function<void(Tape&)> back) {
    for (double x : val.v)
      if (!std::isfinite(x))
        throw tape_error(std::string("non-finite value in op '") + op + "' at node " +
                             std::to_string(nodes_.size()),
                         int(nodes_.size()));
    Node n;
    n.op = op;
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  void set_back(Var v, std::function<void(Tape&)> fn) { nodes_[v.id].back = std::move(fn); }

  template <typename F, typename D>
  Var unary(const char* op, Var a, F fwd, D dfn) {
    auto& ta = nodes_[a.id].val;
    Tensor out = ta;
    for (auto& x : out.v) x = fwd(x);
    bool ng = wants(a.id);
    Var o = push(op, std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, dfn](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& ga = t.grad_buf(a.id);
      for (size_t i = 0; i < go.size(); i++) ga[i] += dfn(va[i], go[i]);
    });
    return o;
  }

  template <typename F, typename D>
  Var binary(const char* op, Var a, Var b, F fwd, D dfn) {
    auto& ta = nodes_[a.id].val;
    auto& tb = nodes_[b.id].val;
    if (ta.numel() != tb.numel()) throw std::runtime_error(std::string(op) + ": size mismatch");
    Tensor out = ta;
    for (size_t i = 0; i < out.v.size(); i++) out.v[i] = fwd(ta.v[i], tb.v[i]);
    bool ng = wants(a.id) || wants(b.id);
    Var o = push(op, std::move(out), ng, nullptr);
    if (ng) set_back(o, [o, a, b, dfn](Tape& t) {
      auto& go = t.nodes_[o.id].grad.v;
      auto& va = t.nodes_[a.id].val.v;
      auto& vb = t.nodes_[b.id].val.v;
      bool wa = t.wants(a.id), wb = t.wants(b.id);
      std::vector<double> dump(wa && wb ? 0 : 1, 0.0);
      auto& ga = wa ? t.grad_buf(a.id) : dump;
      auto& gb = wb ? t.grad_buf(b.id) : dump;
      double sink = 0;
      for (size_t i = 0; i < go.size(); i++) {
        double &gx = wa ? ga[i] : sink, &gy = wb ? gb[i] : sink;
        dfn(va[i], vb[i], go[i], gx, gy);
      }
    });
    return o;
  }

  std::vector<Node> nodes_;
  std::vector<BoundGroup> bound_;

  friend struct ForwardResult;
};

// ---------------------------------------------------------------------------
// forward / backward entry points.
// ---------------------------------------------------------------------------

using GraphBuilder = std::function<Var(Tape&, const Tape::Bound&)>;

struct ForwardResult {
  double value = 0;
  Var loss;
  std::unique_ptr<Tape> tape;
};

inline ForwardResult forward(const GraphBuilder& builder, const ParamStore& store) {
  ForwardResult r;
  r.tape = std::make_unique<Tape>();
  auto bound = r.tape->bind(store);
  r.loss = builder(*r.tape, bound);
  r.value = r.tape->scalar(r.loss);
  return r;
}

inline Adjoints backward(ForwardResult& f) { return f.tape->backward(f.loss); }

inline double eval_value(const GraphBuilder& builder, const ParamStore& store) {
  Tape t;
  auto bound = t.bind(store);
  return t.scalar(builder(t, bound));
}

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------

struct FdCoord {
  std::string group;
  int index = 0;
  double analytic = 0, numeric = 0, rel_err = 0;
  bool flagged = false;  // numeric derivative straddles a discontinuity
};

struct FdSpec {
  int samples = 100;
  uint64_t seed = 0;
  double flag_rel = 0.08;    // one-sided slope disagreement that marks a kink
  double flag_abs = 1e-7;
  double denom_floor = 1e-6;
};

struct FdReport {
  std::vector<FdCoord> coords;
  double max_rel = 0, p95_rel = 0;
  int checked = 0, flagged = 0;

  bool pass(double p95_tol, double max_tol) const { return p95_rel < p95_tol && max_rel < max_tol; }
};

inline FdReport finite_diff_check(const GraphBuilder& builder, ParamStore& store, const FdSpec& spec,
                                  double h = 1e-5) {
  // analytic gradients at the base point
  auto fwd = forward(builder, store);
  double f0 = fwd.value;
  auto adj = backward(fwd);
  fwd.tape.reset();

  // sample coordinates across unfrozen groups, proportional to size
  std::vector<std::pair<std::string, int>> coords;
  Rng rng(spec.seed);
  int total = 0;
  for (auto& g : store.groups())
    if (!g.frozen) total += g.numel();
  if (total == 0) return {};
  for (auto& g : store.groups()) {
    if (g.frozen) continue;
    int want = std::max(1, int(std::llround(double(spec.samples) * g.numel() / total)));
    want = std::min(want, g.numel());
    for (int s = 0; s < want; s++) coords.push_back({g.name, rng.uniform_int(g.numel())});
  }

  FdReport rep;
  for (auto& [gname, idx] : coords) {
    auto& g = store[gname];
    double saved = g.data[idx];
    g.data[idx] = saved + h;
    double fp = eval_value(builder, store);
    g.data[idx] = saved - h;
    double fm = eval_value(builder, store);
    g.data[idx] = saved;

    FdCoord c;
    c.group = gname;
    c.index = idx;
    c.analytic = adj[gname].v[idx];
    c.numeric = (fp - fm) / (2 * h);
    double gf = (fp - f0) / h, gb = (f0 - fm) / h;
    c.flagged = std::fabs(gf - gb) > spec.flag_rel * std::max(std::fabs(gf), std::fabs(gb)) + spec.flag_abs;
    double denom = std::max({std::fabs(c.analytic), std::fabs(c.numeric), spec.denom_floor});
    c.rel_err = std::fabs(c.analytic - c.numeric) / denom;
    rep.coords.push_back(c);
    if (c.flagged) {
      rep.flagged++;
    } else {
      rep.checked++;
      rep.max_rel = std::max(rep.max_rel, c.rel_err);
    }
  }
  std::vector<double> errs;
  for (auto& c : rep.coords)
    if (!c.flagged) errs.push_back(c.rel_err);
  if (!errs.empty()) {
    std::sort(errs.begin(), errs.end());
    rep.p95_rel = errs[size_t(std::ceil(0.95 * errs.size())) - 1];
  }
  return rep;
}

}  // namespace avfit::ad
