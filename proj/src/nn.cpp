#include "retrikt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace retrikt::nn {

namespace {

Tensor make_node(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  node->requires_grad = rg;
  if (rg) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return node;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a->rows()) + "x" +
                                std::to_string(a->cols()) + " vs " + std::to_string(b->rows()) + "x" +
                                std::to_string(b->cols()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kLayerNormEps = 1e-5;

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Tensor parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

void backward(const Tensor& loss) {
  if (loss->rows() != 1 || loss->cols() != 1) {
    throw std::invalid_argument("backward: loss must be a 1x1 scalar");
  }
  if (!loss->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a->cols() != b->rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + std::to_string(a->cols()) + " vs " +
                                std::to_string(b->rows()));
  }
  return make_node(a->value * b->value, {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) a->accumulate(self.grad * b->value.transpose());
    if (b->requires_grad) b->accumulate(a->value.transpose() * self.grad);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_node(a->value + b->value, {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row->rows() != 1 || row->cols() != a->cols()) {
    throw std::invalid_argument("add_row: bias must be 1x" + std::to_string(a->cols()));
  }
  Matrix out = a->value.rowwise() + row->value.row(0);
  return make_node(std::move(out), {a, row}, [](Node& self) {
    auto& a = self.parents[0];
    auto& r = self.parents[1];
    if (a->requires_grad) a->accumulate(self.grad);
    if (r->requires_grad) r->accumulate(self.grad.colwise().sum());
  });
}

Tensor scale(const Tensor& a, double factor) {
  return make_node(a->value * factor, {a}, [factor](Node& self) {
    self.parents[0]->accumulate(self.grad * factor);
  });
}

static Matrix gelu_tanh(const Matrix& x) {
  // Padded to whole packets so every element takes the same vectorized exp.
  const Eigen::Index n = x.size(), padded = (n + 7) / 8 * 8;
  Eigen::ArrayXd u = Eigen::ArrayXd::Zero(padded);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = x.data()[i];
    u(i) = 2.0 * kGeluC * (v + 0.044715 * v * v * v);
  }
  Eigen::ArrayXd e = u.exp();
  Matrix t(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < n; ++i) t.data()[i] = 1.0 - 2.0 / (e(i) + 1.0);
  return t;
}

Matrix gelu_value(const Matrix& x) {
  return (0.5 * x.array() * (1.0 + gelu_tanh(x).array())).matrix();
}

Tensor gelu(const Tensor& a) {
  auto t = std::make_shared<Matrix>(gelu_tanh(a->value));
  Matrix out = (0.5 * a->value.array() * (1.0 + t->array())).matrix();
  return make_node(std::move(out), {a}, [t](Node& self) {
    const auto& x = self.parents[0]->value.array();
    Matrix d = (0.5 * (1.0 + t->array()) +
                0.5 * x * (1.0 - t->array().square()) * kGeluC * (1.0 + 3.0 * 0.044715 * x.square()))
                   .matrix();
    self.parents[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const Eigen::Index n = x->cols();
  if (gamma->cols() != n || beta->cols() != n) throw std::invalid_argument("layer_norm: affine size mismatch");
  Matrix xhat(x->rows(), n);
  Eigen::VectorXd rstd(x->rows());
  for (Eigen::Index r = 0; r < x->rows(); ++r) {
    double mu = x->value.row(r).mean();
    double var = (x->value.row(r).array() - mu).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(r) = (x->value.row(r).array() - mu) * rstd(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma->value.row(0).array()).rowwise() + beta->value.row(0).array();
  return make_node(std::move(out), {x, gamma, beta},
                   [xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                     auto& x = self.parents[0];
                     auto& g = self.parents[1];
                     auto& b = self.parents[2];
                     if (g->requires_grad) g->accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
                     if (b->requires_grad) b->accumulate(self.grad.colwise().sum());
                     if (x->requires_grad) {
                       Matrix dxhat = self.grad.array().rowwise() * g->value.row(0).array();
                       Matrix dx(dxhat.rows(), dxhat.cols());
                       for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                         double m1 = dxhat.row(r).mean();
                         double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                         dx.row(r) = rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                       }
                       x->accumulate(dx);
                     }
                   });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table->cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table->rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(table->rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = table->value.row(ids[i]);
  }
  return make_node(std::move(out), {table}, [ids](Node& self) {
    auto& t = self.parents[0];
    Matrix g = Matrix::Zero(t->rows(), t->cols());
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    t->accumulate(g);
  });
}

Tensor overwrite_rows(const Tensor& x, const Tensor& source, const std::vector<std::pair<int, int>>& dst_src) {
  if (x->cols() != source->cols()) throw std::invalid_argument("overwrite_rows: width mismatch");
  Matrix out = x->value;
  for (auto [d, s] : dst_src) out.row(d) = source->value.row(s);
  return make_node(std::move(out), {x, source}, [dst_src](Node& self) {
    auto& x = self.parents[0];
    auto& src = self.parents[1];
    if (x->requires_grad) {
      Matrix g = self.grad;
      for (auto [d, s] : dst_src) g.row(d).setZero();
      x->accumulate(g);
    }
    if (src->requires_grad) {
      Matrix g = Matrix::Zero(src->rows(), src->cols());
      for (auto [d, s] : dst_src) g.row(s) += self.grad.row(d);
      src->accumulate(g);
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<Segment>& segments,
                 int num_heads, bool causal) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const Eigen::Index width = q->cols();
  if (num_heads <= 0 || width % num_heads != 0) throw std::invalid_argument("attention: bad head count");
  const Eigen::Index dh = width / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out = Matrix::Zero(q->rows(), width);
  // probs[s * num_heads + h] is the attention matrix of segment s, head h.
  std::vector<Matrix> probs(segments.size() * static_cast<std::size_t>(num_heads));
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto [start, len] = segments[s];
    for (int h = 0; h < num_heads; ++h) {
      auto qs = q->value.block(start, h * dh, len, dh);
      auto ks = k->value.block(start, h * dh, len, dh);
      auto vs = v->value.block(start, h * dh, len, dh);
      Matrix scores = (qs * ks.transpose()) * inv_sqrt;
      for (int i = 0; i < len; ++i) {
        int limit = causal ? i + 1 : len;
        double mx = scores.row(i).head(limit).maxCoeff();
        double z = 0.0;
        for (int j = 0; j < len; ++j) {
          double e = j < limit ? std::exp(scores(i, j) - mx) : 0.0;
          scores(i, j) = e;
          z += e;
        }
        scores.row(i) /= z;
      }
      out.block(start, h * dh, len, dh) = scores * vs;
      probs[s * num_heads + h] = std::move(scores);
    }
  }
  return make_node(std::move(out), {q, k, v},
                   [segments, num_heads, dh, inv_sqrt, probs = std::move(probs)](Node& self) {
                     auto& q = self.parents[0];
                     auto& k = self.parents[1];
                     auto& v = self.parents[2];
                     Matrix dq = Matrix::Zero(q->rows(), q->cols());
                     Matrix dk = Matrix::Zero(k->rows(), k->cols());
                     Matrix dv = Matrix::Zero(v->rows(), v->cols());
                     for (std::size_t s = 0; s < segments.size(); ++s) {
                       const auto [start, len] = segments[s];
                       for (int h = 0; h < num_heads; ++h) {
                         const Matrix& p = probs[s * num_heads + h];
                         auto go = self.grad.block(start, h * dh, len, dh);
                         auto qs = q->value.block(start, h * dh, len, dh);
                         auto ks = k->value.block(start, h * dh, len, dh);
                         auto vs = v->value.block(start, h * dh, len, dh);
                         Matrix dp = go * vs.transpose();
                         dv.block(start, h * dh, len, dh) += p.transpose() * go;
                         Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
                         Matrix ds = p.cwiseProduct(dp.colwise() - rowdot) * inv_sqrt;
                         dq.block(start, h * dh, len, dh) += ds * ks;
                         dk.block(start, h * dh, len, dh) += ds.transpose() * qs;
                       }
                     }
                     if (q->requires_grad) q->accumulate(dq);
                     if (k->requires_grad) k->accumulate(dk);
                     if (v->requires_grad) v->accumulate(dv);
                   });
}

Tensor log_softmax_pick(const Tensor& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits->rows()) {
    throw std::invalid_argument("log_softmax_pick: one target per row required");
  }
  Matrix probs(logits->rows(), logits->cols());
  Matrix out(logits->rows(), 1);
  for (Eigen::Index r = 0; r < logits->rows(); ++r) {
    int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits->cols()) throw std::out_of_range("log_softmax_pick: target out of range");
    double mx = logits->value.row(r).maxCoeff();
    double lse = mx + std::log((logits->value.row(r).array() - mx).exp().sum());
    probs.row(r) = (logits->value.row(r).array() - lse).exp();
    out(r, 0) = logits->value(r, t) - lse;
  }
  return make_node(std::move(out), {logits}, [targets, probs = std::move(probs)](Node& self) {
    Matrix g = -(probs.array().colwise() * self.grad.col(0).array()).matrix();
    for (std::size_t r = 0; r < targets.size(); ++r) {
      g(static_cast<Eigen::Index>(r), targets[r]) += self.grad(static_cast<Eigen::Index>(r), 0);
    }
    self.parents[0]->accumulate(g);
  });
}

Tensor segment_mean(const Tensor& x, const std::vector<Segment>& segments) {
  Matrix out(static_cast<Eigen::Index>(segments.size()), x->cols());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].length <= 0) throw std::invalid_argument("segment_mean: empty segment");
    out.row(static_cast<Eigen::Index>(s)) = x->value.middleRows(segments[s].start, segments[s].length).colwise().mean();
  }
  return make_node(std::move(out), {x}, [segments](Node& self) {
    auto& x = self.parents[0];
    Matrix g = Matrix::Zero(x->rows(), x->cols());
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const auto [start, len] = segments[s];
      g.middleRows(start, len).rowwise() += self.grad.row(static_cast<Eigen::Index>(s)) / static_cast<double>(len);
    }
    x->accumulate(g);
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a->value.sum();
  return make_node(std::move(out), {a}, [](Node& self) {
    auto& a = self.parents[0];
    a->accumulate(Matrix::Constant(a->rows(), a->cols(), self.grad(0, 0)));
  });
}

Tensor external_loss(const Tensor& x, double value, Matrix dvalue_dx) {
  require_same_shape(x, constant(dvalue_dx), "external_loss");
  Matrix out(1, 1);
  out(0, 0) = value;
  return make_node(std::move(out), {x}, [d = std::move(dvalue_dx)](Node& self) {
    self.parents[0]->accumulate(d * self.grad(0, 0));
  });
}

void round_to_storage(Matrix& m) {
  m = m.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  round_to_storage(m);
  return m;
}

Adam::Adam(std::vector<Tensor> params, Options options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

double Adam::current_lr() const {
  if (opt_.total_steps <= 0) return opt_.lr;
  double progress = std::min(1.0, static_cast<double>(t_) / static_cast<double>(opt_.total_steps));
  return opt_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double Adam::step() {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (p->grad.size() != 0) sq += p->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw std::runtime_error("Adam: non-finite gradient norm");
  const double clip = (opt_.grad_clip > 0.0 && norm > opt_.grad_clip) ? opt_.grad_clip / norm : 1.0;
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p->grad.size() == 0) continue;
    Matrix g = p->grad * clip;
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    p->value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
    round_to_storage(p->value);
  }
  return norm;
}

}  // namespace retrikt::nn
