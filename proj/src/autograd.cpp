#include "gdream/autograd.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

#include "gdream/error.hpp"
#include "gdream/rng.hpp"

namespace gdream::ag {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

bool any_requires(const std::vector<Var>& inputs) {
  for (const auto& v : inputs) {
    if (v.requires_grad()) return true;
  }
  return false;
}

// Result node; records inputs and the backward rule only when needed.
Var make(Matrix value, const std::vector<Var>& inputs, std::function<void(Node&)> rule) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled && any_requires(inputs)) {
    node->requires_grad = true;
    for (const auto& v : inputs) node->inputs.push_back(v.node());
    node->backward = std::move(rule);
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " differ");
  }
}

void check_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* op) {
  if (m.rows() != rows || m.cols() != cols) throw ShapeError(std::string(op) + ": shape mismatch");
}

// Inputs are stored in call order; these fetch them inside a rule.
Node& in(Node& n, std::size_t k) { return *n.inputs[k]; }

}  // namespace

void Node::ensure_grad() {
  if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
}

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Matrix Var::grad() const {
  if (!node_ || node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward needs a scalar root");
  if (!root.requires_grad()) return;
  // Post-order DFS gives inputs before consumers; walk it in reverse.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  return make(a.value() * b.value(), {a, b}, [](Node& n) {
    Node& x = in(n, 0);
    Node& y = in(n, 1);
    if (x.requires_grad) x.accumulate(n.grad * y.value.transpose());
    if (y.requires_grad) y.accumulate(x.value.transpose() * n.grad);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) throw ShapeError("linear: shape mismatch");
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return make(std::move(out), {x, w, b}, [](Node& n) {
    Node& xi = in(n, 0);
    Node& wi = in(n, 1);
    Node& bi = in(n, 2);
    if (xi.requires_grad) xi.accumulate(n.grad * wi.value.transpose());
    if (wi.requires_grad) wi.accumulate(xi.value.transpose() * n.grad);
    if (bi.requires_grad) bi.accumulate(n.grad.colwise().sum());
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    in(n, 1).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    in(n, 1).accumulate(-n.grad);
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](Node& n) { in(n, 0).accumulate(n.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a, row}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var mul_const(const Var& a, const Matrix& mask) {
  check_shape(mask, a.rows(), a.cols(), "mul_const");
  return make(a.value().cwiseProduct(mask), {a}, [mask](Node& n) { in(n, 0).accumulate(n.grad.cwiseProduct(mask)); });
}

Var add_const(const Var& a, const Matrix& c) {
  check_shape(c, a.rows(), a.cols(), "add_const");
  return make(a.value() + c, {a}, [](Node& n) { in(n, 0).accumulate(n.grad); });
}

Var mask_rows(const Var& a, const std::vector<std::uint8_t>& mask) {
  if (static_cast<Eigen::Index>(mask.size()) != a.rows()) throw ShapeError("mask_rows: mask length mismatch");
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (!mask[r]) out.row(r).setZero();
  }
  return make(std::move(out), {a}, [mask](Node& n) {
    Matrix g = n.grad;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (!mask[r]) g.row(r).setZero();
    }
    in(n, 0).accumulate(g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index cols = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    throw ShapeError("layer_norm: parameter shape mismatch");
  }
  Matrix xhat(x.rows(), cols);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mean).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mean) * inv_std[r];
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& n) {
    Node& xi = in(n, 0);
    Node& gi = in(n, 1);
    Node& bi = in(n, 2);
    if (gi.requires_grad) gi.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (bi.requires_grad) bi.accumulate(n.grad.colwise().sum());
    if (!xi.requires_grad) return;
    const Matrix dxhat = n.grad.array().rowwise() * gi.value.row(0).array();
    Matrix dx(dxhat.rows(), dxhat.cols());
    for (Eigen::Index r = 0; r < dx.rows(); ++r) {
      const double m1 = dxhat.row(r).mean();
      const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(dx.cols());
      dx.row(r) = inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
    }
    xi.accumulate(dx);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;
}  // namespace

Var gelu(const Var& x) {
  const double c = kGeluC;
  const double k = kGeluK;
  const Matrix& v = x.value();
  const Matrix t = (c * (v.array() + k * v.array().cube())).tanh().matrix();
  Matrix out = (0.5 * v.array() * (1.0 + t.array())).matrix();
  return make(std::move(out), {x}, [t, c, k](Node& n) {
    const auto& v = in(n, 0).value.array();
    const auto d = 0.5 * (1.0 + t.array()) + 0.5 * v * (1.0 - t.array().square()) * c * (1.0 + 3.0 * k * v.square());
    in(n, 0).accumulate((n.grad.array() * d).matrix());
  });
}

Var silu(const Var& x) {
  const Matrix s = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
  Matrix out = x.value().cwiseProduct(s);
  return make(std::move(out), {x}, [s](Node& n) {
    const auto& v = in(n, 0).value.array();
    const auto d = s.array() + v * s.array() * (1.0 - s.array());
    in(n, 0).accumulate((n.grad.array() * d).matrix());
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index at = 0;
  std::vector<Eigen::Index> starts;
  for (const auto& p : parts) {
    starts.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make(std::move(out), parts, [starts](Node& n) {
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      Node& part = in(n, k);
      if (part.requires_grad) part.accumulate(n.grad.middleCols(starts[k], part.value.cols()));
    }
  });
}

Var dropout(const Var& x, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  Matrix mask(x.rows(), x.cols());
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index r = 0; r < mask.rows(); ++r) {
    for (Eigen::Index c = 0; c < mask.cols(); ++c) mask(r, c) = rng.uniform() < p ? 0.0 : keep;
  }
  return mul_const(x, mask);
}

Var weighted_squared_error(const Var& x, const Matrix& target, const Matrix& weight) {
  check_shape(target, x.rows(), x.cols(), "weighted_squared_error");
  check_shape(weight, x.rows(), x.cols(), "weighted_squared_error");
  const Matrix diff = x.value() - target;
  Matrix out(1, 1);
  out(0, 0) = (weight.array() * diff.array().square()).sum();
  return make(std::move(out), {x}, [diff, weight](Node& n) {
    in(n, 0).accumulate((2.0 * n.grad(0, 0)) * weight.cwiseProduct(diff));
  });
}

Var external(const Var& x, double value, Matrix gradient) {
  check_shape(gradient, x.rows(), x.cols(), "external");
  Matrix out(1, 1);
  out(0, 0) = value;
  return make(std::move(out), {x}, [gradient = std::move(gradient)](Node& n) {
    in(n, 0).accumulate(n.grad(0, 0) * gradient);
  });
}

Var add_scalars(const std::vector<Var>& terms) {
  Matrix out = Matrix::Zero(1, 1);
  for (const auto& t : terms) {
    if (t.rows() != 1 || t.cols() != 1) throw ShapeError("add_scalars: terms must be 1x1");
    out(0, 0) += t.scalar();
  }
  return make(std::move(out), terms, [](Node& n) {
    for (auto& input : n.inputs) input->accumulate(n.grad);
  });
}

namespace {

struct AttentionBlockCache {
  Matrix weights;  // nq x nk
};

Matrix gather(const Matrix& src, const std::vector<int>& rows, Eigen::Index col, Eigen::Index width) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = src.block(rows[r], col, 1, width);
  return out;
}

void scatter_add(Matrix& dst, const std::vector<int>& rows, Eigen::Index col, const Matrix& block) {
  for (std::size_t r = 0; r < rows.size(); ++r) {
    dst.block(rows[r], col, 1, block.cols()) += block.row(static_cast<Eigen::Index>(r));
  }
}

}  // namespace

Var grouped_attention(const AttentionInputs& a, std::shared_ptr<const std::vector<AttentionGroup>> groups,
                      AttentionTrace* trace) {
  const Eigen::Index width = a.q.cols();
  if (a.heads <= 0 || width % a.heads != 0) throw ConfigError("attention width must split evenly over heads");
  if (a.k.cols() != width || a.v.cols() != width || a.k.rows() != a.v.rows()) {
    throw ShapeError("attention: key/value shapes do not match the queries");
  }
  const bool relational = static_cast<bool>(a.relation_q);
  if (relational != static_cast<bool>(a.relation_k)) throw ShapeError("attention: relation embeddings come in pairs");
  if (relational && (a.relation_q.cols() != width || a.relation_k.cols() != width ||
                     a.relation_q.rows() != a.relation_k.rows())) {
    throw ShapeError("attention: relation embedding shape mismatch");
  }
  const Eigen::Index dh = width / a.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index nq_total = a.q.rows();
  const Eigen::Index nk_total = a.k.rows();
  const int relation_count = relational ? static_cast<int>(a.relation_q.rows()) : 0;

  for (const auto& g : *groups) {
    const std::size_t cells = g.queries.size() * g.keys.size();
    if (!g.allowed.empty() && g.allowed.size() != cells) throw ShapeError("attention: mask size mismatch");
    if (!g.codes.empty() && (g.codes.size() != cells || !relational)) {
      throw ShapeError("attention: relation codes need matching embeddings");
    }
    for (int r : g.queries) {
      if (r < 0 || r >= nq_total) throw ShapeError("attention: query row out of range");
    }
    for (int r : g.keys) {
      if (r < 0 || r >= nk_total) throw ShapeError("attention: key row out of range");
    }
    for (auto c : g.codes) {
      if (c >= relation_count) throw DomainError("relation code " + std::to_string(c) + " out of range");
    }
  }

  const Matrix& Q = a.q.value();
  const Matrix& K = a.k.value();
  const Matrix& V = a.v.value();
  Matrix out = Matrix::Zero(nq_total, width);
  auto cache = std::make_shared<std::vector<AttentionBlockCache>>();
  cache->reserve(groups->size() * a.heads);
  constexpr double kHidden = -std::numeric_limits<double>::infinity();

  for (std::size_t gi = 0; gi < groups->size(); ++gi) {
    const auto& g = (*groups)[gi];
    const auto nq = static_cast<Eigen::Index>(g.queries.size());
    const auto nk = static_cast<Eigen::Index>(g.keys.size());
    for (int h = 0; h < a.heads; ++h) {
      const Eigen::Index col = h * dh;
      const Matrix qg = gather(Q, g.queries, col, dh);
      const Matrix kg = gather(K, g.keys, col, dh);
      const Matrix vg = gather(V, g.keys, col, dh);
      Matrix s = qg * kg.transpose();
      if (!g.codes.empty()) {
        const Matrix qe = qg * a.relation_q.value().middleCols(col, dh).transpose();  // nq x R
        const Matrix ke = kg * a.relation_k.value().middleCols(col, dh).transpose();  // nk x R
        for (Eigen::Index i = 0; i < nq; ++i) {
          for (Eigen::Index j = 0; j < nk; ++j) {
            const int c = g.codes[i * nk + j];
            s(i, j) += qe(i, c) + ke(j, c);
          }
        }
      }
      s *= inv_sqrt;
      Matrix p = Matrix::Zero(nq, nk);
      for (Eigen::Index i = 0; i < nq; ++i) {
        double top = kHidden;
        for (Eigen::Index j = 0; j < nk; ++j) {
          if (!g.allowed.empty() && !g.allowed[i * nk + j]) {
            s(i, j) = kHidden;
          } else {
            top = std::max(top, s(i, j));
          }
        }
        if (top == kHidden) continue;
        double total = 0.0;
        for (Eigen::Index j = 0; j < nk; ++j) {
          if (s(i, j) == kHidden) continue;
          p(i, j) = std::exp(s(i, j) - top);
          total += p(i, j);
        }
        p.row(i) /= total;
      }
      const Matrix og = p * vg;
      for (Eigen::Index i = 0; i < nq; ++i) out.block(g.queries[i], col, 1, dh) += og.row(i);
      if (trace) trace->blocks.push_back({static_cast<int>(gi), h, s, p});
      cache->push_back({std::move(p)});
    }
  }

  std::vector<Var> inputs{a.q, a.k, a.v};
  if (relational) {
    inputs.push_back(a.relation_q);
    inputs.push_back(a.relation_k);
  }
  const int heads = a.heads;
  return make(std::move(out), inputs, [groups, cache, heads, dh, inv_sqrt, relational](Node& n) {
    Node& qn = in(n, 0);
    Node& kn = in(n, 1);
    Node& vn = in(n, 2);
    Matrix dq = Matrix::Zero(qn.value.rows(), qn.value.cols());
    Matrix dk = Matrix::Zero(kn.value.rows(), kn.value.cols());
    Matrix dv = Matrix::Zero(vn.value.rows(), vn.value.cols());
    Matrix deq;
    Matrix dek;
    if (relational) {
      deq = Matrix::Zero(in(n, 3).value.rows(), in(n, 3).value.cols());
      dek = Matrix::Zero(in(n, 4).value.rows(), in(n, 4).value.cols());
    }
    std::size_t block = 0;
    for (const auto& g : *groups) {
      const auto nq = static_cast<Eigen::Index>(g.queries.size());
      const auto nk = static_cast<Eigen::Index>(g.keys.size());
      for (int h = 0; h < heads; ++h, ++block) {
        const Eigen::Index col = h * dh;
        const Matrix& p = (*cache)[block].weights;
        const Matrix dog = gather(n.grad, g.queries, col, dh);
        const Matrix qg = gather(qn.value, g.queries, col, dh);
        const Matrix kg = gather(kn.value, g.keys, col, dh);
        const Matrix vg = gather(vn.value, g.keys, col, dh);
        scatter_add(dv, g.keys, col, p.transpose() * dog);
        const Matrix dp = dog * vg.transpose();
        const Eigen::VectorXd inner = p.cwiseProduct(dp).rowwise().sum();
        Matrix ds = p.cwiseProduct(dp.colwise() - inner);
        ds *= inv_sqrt;
        Matrix dqg = ds * kg;
        Matrix dkg = ds.transpose() * qg;
        if (!g.codes.empty()) {
          const Eigen::Index rc = deq.rows();
          Matrix dqe = Matrix::Zero(nq, rc);
          Matrix dke = Matrix::Zero(nk, rc);
          for (Eigen::Index i = 0; i < nq; ++i) {
            for (Eigen::Index j = 0; j < nk; ++j) {
              const int c = g.codes[i * nk + j];
              dqe(i, c) += ds(i, j);
              dke(j, c) += ds(i, j);
            }
          }
          const auto eq = in(n, 3).value.middleCols(col, dh);
          const auto ek = in(n, 4).value.middleCols(col, dh);
          dqg += dqe * eq;
          dkg += dke * ek;
          deq.middleCols(col, dh) += dqe.transpose() * qg;
          dek.middleCols(col, dh) += dke.transpose() * kg;
        }
        scatter_add(dq, g.queries, col, dqg);
        scatter_add(dk, g.keys, col, dkg);
      }
    }
    qn.accumulate(dq);
    kn.accumulate(dk);
    vn.accumulate(dv);
    if (relational) {
      in(n, 3).accumulate(deq);
      in(n, 4).accumulate(dek);
    }
  });
}

}  // namespace gdream::ag
