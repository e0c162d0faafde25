#include "doctest.h"
#include "grad_check.hpp"

#include "retrikt/nn.hpp"

#include <random>

using namespace retrikt;
using retrikt::testing::max_relative_grad_error;

namespace {

nn::Tensor random_param(int r, int c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> d(0.0, s);
  nn::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return nn::parameter(m);
}

// Weighted sum so that every output entry receives a distinct upstream gradient.
nn::Tensor probe(const nn::Tensor& x, const nn::Matrix& w) {
  return nn::sum(nn::matmul(nn::constant(nn::Matrix::Ones(1, x->rows())),
                            nn::matmul(x, nn::constant(w))));
}

}  // namespace

TEST_CASE("matmul, add_row, gelu and layer_norm gradients match finite differences") {
  std::mt19937_64 rng(1);
  auto a = random_param(4, 3, rng), b = random_param(3, 5, rng), bias = random_param(1, 5, rng);
  auto g = random_param(1, 5, rng), be = random_param(1, 5, rng);
  nn::Matrix w = nn::gaussian_matrix(5, 2, 1.0, rng);
  auto build = [&] {
    auto h = nn::gelu(nn::add_row(nn::matmul(a, b), bias));
    return probe(nn::layer_norm(h, g, be), w);
  };
  CHECK(max_relative_grad_error({a, b, bias, g, be}, build) < 1e-6);
}

TEST_CASE("segmented causal attention gradients match finite differences") {
  std::mt19937_64 rng(2);
  auto q = random_param(7, 4, rng), k = random_param(7, 4, rng), v = random_param(7, 4, rng);
  nn::Matrix w = nn::gaussian_matrix(4, 3, 1.0, rng);
  std::vector<nn::Segment> segs = {{0, 3}, {3, 4}};
  for (bool causal : {true, false}) {
    auto build = [&] { return probe(nn::attention(q, k, v, segs, 2, causal), w); };
    CHECK(max_relative_grad_error({q, k, v}, build) < 1e-6);
  }
}

TEST_CASE("causal attention ignores later rows and other segments") {
  std::mt19937_64 rng(3);
  auto q = random_param(5, 2, rng), k = random_param(5, 2, rng), v = random_param(5, 2, rng);
  std::vector<nn::Segment> segs = {{0, 2}, {2, 3}};
  auto before = nn::attention(q, k, v, segs, 1, true)->value;
  v->value.row(4).setConstant(100.0);
  k->value.row(4).setConstant(-3.0);
  auto after = nn::attention(q, k, v, segs, 1, true)->value;
  CHECK(before.topRows(4).isApprox(after.topRows(4), 0.0));
  CHECK(before.row(0).isApprox(v->value.row(0), 1e-12));  // first row attends only to itself
}

TEST_CASE("gather, overwrite, log_softmax_pick and segment_mean gradients") {
  std::mt19937_64 rng(4);
  auto table = random_param(6, 3, rng), src = random_param(2, 3, rng);
  nn::Matrix w = nn::gaussian_matrix(3, 4, 1.0, rng);
  auto build = [&] {
    auto x = nn::gather_rows(table, {1, 3, 3, 0, 5});
    x = nn::overwrite_rows(x, src, {{0, 1}, {4, 0}});
    auto logits = nn::matmul(x, nn::constant(w));
    auto lp = nn::log_softmax_pick(logits, {0, 3, 1, 2, 2});
    auto pooled = nn::segment_mean(x, {{0, 2}, {2, 3}});
    return nn::add(nn::sum(lp), probe(pooled, nn::Matrix::Ones(3, 1)));
  };
  CHECK(max_relative_grad_error({table, src}, build) < 1e-6);
}

TEST_CASE("overwrite_rows copies source rows exactly") {
  auto x = nn::constant(nn::Matrix::Zero(3, 2));
  nn::Matrix s(1, 2);
  s << 0.1, -7.25;
  auto out = nn::overwrite_rows(x, nn::constant(s), {{2, 0}});
  CHECK(out->value(2, 0) == 0.1);
  CHECK(out->value(2, 1) == -7.25);
  CHECK(out->value(0, 0) == 0.0);
}

TEST_CASE("frozen leaves receive no gradient") {
  std::mt19937_64 rng(5);
  auto frozen = nn::constant(nn::gaussian_matrix(3, 3, 1.0, rng));
  auto trained = random_param(2, 3, rng);
  nn::backward(nn::sum(nn::matmul(trained, frozen)));
  CHECK(frozen->grad.size() == 0);
  CHECK(trained->grad.size() == 6);
}

TEST_CASE("Adam keeps parameters on the float32 grid and decays the learning rate") {
  auto p = nn::parameter(nn::Matrix::Constant(2, 2, 0.5));
  nn::Adam opt({p}, {.lr = 0.1, .total_steps = 10});
  for (int i = 0; i < 10; ++i) {
    opt.zero_grad();
    nn::backward(nn::sum(nn::matmul(p, p)));
    opt.step();
    for (Eigen::Index e = 0; e < p->value.size(); ++e) {
      double v = p->value.data()[e];
      CHECK(v == static_cast<double>(static_cast<float>(v)));
    }
  }
  CHECK(opt.current_lr() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("external_loss routes the supplied gradient") {
  auto x = nn::parameter(nn::Matrix::Ones(2, 2));
  nn::Matrix g(2, 2);
  g << 1, 2, 3, 4;
  nn::backward(nn::scale(nn::external_loss(x, 5.0, g), 2.0));
  CHECK(x->grad.isApprox(2.0 * g));
}
