#pragma once

// Minimal reverse-mode autodiff over dense row-major matrices.
//
// Values are computed in double precision. Trainable parameters are kept on
// the float32 grid (see round_to_storage) so checkpoints written as 32-bit
// floats reload bit-exactly.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace retrikt::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
  void zero_grad() { grad.resize(0, 0); }
  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
};

using Tensor = std::shared_ptr<Node>;

// A contiguous run of rows belonging to one sequence in a stacked batch.
struct Segment {
  int start = 0;
  int length = 0;
};

Tensor constant(Matrix value);
Tensor parameter(Matrix value);

// Seeds d(loss)/d(loss) = 1 and propagates to every node that requires grad.
void backward(const Tensor& loss);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double factor);
Tensor gelu(const Tensor& a);
// tanh-approximated GELU without autograd; matches gelu() bit for bit.
Matrix gelu_value(const Matrix& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// out[i] = table[ids[i]]
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Copy of x where row dst is replaced by row src of source, for every (dst, src).
Tensor overwrite_rows(const Tensor& x, const Tensor& source,
                      const std::vector<std::pair<int, int>>& dst_src);

// Multi-head scaled dot-product attention evaluated independently per segment.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::vector<Segment>& segments, int num_heads, bool causal);

// Column vector of log softmax(logits[r])[targets[r]].
Tensor log_softmax_pick(const Tensor& logits, const std::vector<int>& targets);

// Row-mean of each segment; one output row per segment.
Tensor segment_mean(const Tensor& x, const std::vector<Segment>& segments);

Tensor sum(const Tensor& a);

// Scalar node whose value and gradient with respect to x were computed
// outside the graph.
Tensor external_loss(const Tensor& x, double value, Matrix dvalue_dx);

// Rounds every entry to the nearest float32.
void round_to_storage(Matrix& m);

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

// Adam with optional cosine learning-rate decay to zero over total_steps.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables
    long total_steps = 0;    // 0 disables decay
  };

  Adam(std::vector<Tensor> params, Options options);

  void zero_grad();
  // Returns the pre-clip global gradient norm.
  double step();
  double current_lr() const;
  long steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Matrix> m_, v_;
  Options opt_;
  long t_ = 0;
};

}  // namespace retrikt::nn
