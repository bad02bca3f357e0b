#pragma once

// Minimal tape-based reverse-mode differentiation over dense double matrices.
// Rows are tokens, columns are features.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace gdream {
class Rng;
}

namespace gdream::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_block(Eigen::Index row, Eigen::Index col, const Expr& g) {
    ensure_grad();
    grad.block(row, col, g.rows(), g.cols()) += g;
  }
  void ensure_grad();
};

/// Handle to a node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  /// Gradient after backward(); zeros if nothing reached this node.
  Matrix grad() const;
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  double scalar() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables tape recording in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
/// Leaf whose gradient is kept.
Var parameter(Matrix value);

/// Reverse pass from a 1x1 root; gradients accumulate into every reachable
/// node that requires them.
void backward(const Var& root);

Var matmul(const Var& a, const Var& b);
/// x W + b, with b a 1 x out row broadcast over rows.
Var linear(const Var& x, const Var& w, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Adds a 1 x cols row to every row.
Var add_row(const Var& a, const Var& row);
/// Elementwise product with a constant of the same shape.
Var mul_const(const Var& a, const Matrix& mask);
Var add_const(const Var& a, const Matrix& c);
/// Multiplies row r by mask[r].
Var mask_rows(const Var& a, const std::vector<std::uint8_t>& mask);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// tanh approximation.
Var gelu(const Var& x);
Var silu(const Var& x);
Var concat_cols(const std::vector<Var>& parts);
/// Inverted dropout with keep-probability 1 - p; identity when p == 0.
Var dropout(const Var& x, double p, Rng& rng);
/// sum_{r,c} w(r,c) (x(r,c) - target(r,c))^2 as a 1x1 value.
Var weighted_squared_error(const Var& x, const Matrix& target, const Matrix& weight);
/// 1x1 node with a fixed value whose derivative w.r.t. x is `gradient`.
Var external(const Var& x, double value, Matrix gradient);
Var add_scalars(const std::vector<Var>& terms);

/// One block of an attention call: the listed query rows attend to the listed
/// key rows. `allowed` (row-major |queries| x |keys|) hides pairs when given;
/// `codes` selects relation embedding rows when given.
struct AttentionGroup {
  std::vector<int> queries;
  std::vector<int> keys;
  std::vector<std::uint8_t> allowed;
  std::vector<std::uint8_t> codes;
};

/// Logits and weights of every (group, head) block, recorded on request.
struct AttentionTrace {
  struct Block {
    int group = 0;
    int head = 0;
    Matrix logits;   // -inf where hidden
    Matrix weights;  // rows sum to 1, or to 0 when every key is hidden
  };
  std::vector<Block> blocks;
};

struct AttentionInputs {
  Var q;  // Nq x (heads * head_dim)
  Var k;  // Nk x (heads * head_dim)
  Var v;  // Nk x (heads * head_dim)
  int heads = 1;
  /// Optional relation embeddings, relation_count x (heads * head_dim); head h
  /// reads its own column slice.
  Var relation_q;
  Var relation_k;
};

/// Multi-head scaled dot-product attention over groups:
/// S = (Q K^T + Q E_q[code]^T + K E_k[code]^T) / sqrt(head_dim), softmax over
/// allowed keys, output P V. Query rows outside every group, and rows whose
/// keys are all hidden, output zero.
Var grouped_attention(const AttentionInputs& in, std::shared_ptr<const std::vector<AttentionGroup>> groups,
                      AttentionTrace* trace = nullptr);

}  // namespace gdream::ag
