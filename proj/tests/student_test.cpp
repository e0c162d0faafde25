#include "doctest.h"

#include "grad_check.hpp"
#include "retrikt/prompt_tuning.hpp"
#include "retrikt/student.hpp"

#include <cmath>
#include <random>

using namespace retrikt;

namespace {

KnowledgeStore store_with(const std::vector<Eigen::VectorXd>& keys, const std::vector<std::vector<double>>& values) {
  KnowledgeStore s;
  s.embed_dim = static_cast<int>(keys.front().size());
  s.num_classes = static_cast<int>(values.front().size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    KnowledgeRecord r;
    r.text = "r" + std::to_string(i);
    r.key = keys[i];
    r.value = Eigen::Map<const Eigen::VectorXd>(values[i].data(), static_cast<Eigen::Index>(values[i].size()));
    s.records.push_back(r);
  }
  return s;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

nn::Matrix random_dists(std::mt19937_64& rng, int rows, int cols) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  nn::Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = u(rng) * u(rng);
    m.row(r) /= m.row(r).sum();
  }
  return m;
}

struct StudentFixture {
  SyntheticConfig syn;
  SyntheticTask task;
  Vocabulary vocab;
  EncoderConfig teacher_cfg, student_cfg;

  StudentFixture() {
    syn.train_size = 120;
    task = make_synthetic_task(6, syn);
    vocab = task_vocabulary(synthetic_vocabulary(syn), task.spec);
    teacher_cfg = {.num_layers = 1, .hidden_dim = 32, .num_heads = 2, .vocab_size = vocab.size(), .max_seq_len = 32,
                   .num_classes = task.spec.num_classes()};
    student_cfg = {.num_layers = 1, .hidden_dim = 16, .num_heads = 2, .vocab_size = vocab.size(), .max_seq_len = 32};
  }

  std::vector<std::string> texts(const std::vector<LabeledSample>& d) const {
    std::vector<std::string> out;
    for (const auto& s : d) out.push_back(s.text);
    return out;
  }
};

}  // namespace

TEST_CASE("relevance distribution") {
  auto eq = relevance_distribution(vec({0.3, 0.3}), 0.2);
  CHECK(eq(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(eq(1) == doctest::Approx(0.5).epsilon(1e-15));
  auto sharp = relevance_distribution(vec({1.0, 0.0}), 0.1);
  CHECK(sharp(0) == doctest::Approx(std::exp(10.0) / (std::exp(10.0) + 1.0)).epsilon(1e-12));
  CHECK(sharp(1) == doctest::Approx(1.0 / (std::exp(10.0) + 1.0)).epsilon(1e-9));
  CHECK_THROWS_AS(relevance_distribution(vec({1.0}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(relevance_distribution(vec({1.0}), -1.0), std::invalid_argument);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd s(7);
    for (int i = 0; i < 7; ++i) s(i) = u(rng);
    double tau = 0.05 + (u(rng) + 1.0);
    auto a = relevance_distribution(s, tau);
    auto b = relevance_distribution((s.array() + 3.7 * u(rng)).matrix(), tau);
    CHECK(a.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((a.array() >= 0.0).all());
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("listwise KL") {
  nn::Matrix q(1, 2), t(1, 2);
  q << 0.7, 0.3;
  t << 0.5, 0.5;
  CHECK(listwise_kl(q, t) == doctest::Approx(0.7 * std::log(1.4) + 0.3 * std::log(0.6)).epsilon(1e-12));
  CHECK(listwise_kl(q, t) == doctest::Approx(0.08228).epsilon(1e-4));
  CHECK(listwise_kl(q, q) == 0.0);
  std::mt19937_64 rng(2);
  int negative = 0;
  for (int i = 0; i < 10000; ++i) {
    auto a = random_dists(rng, 1, 5), b = random_dists(rng, 1, 5);
    negative += listwise_kl(a, b) < -1e-15;
  }
  CHECK(negative == 0);
  nn::Matrix zero_t(1, 2);
  zero_t << 1.0, 0.0;
  CHECK(std::isfinite(listwise_kl(q, zero_t)));
  CHECK(listwise_kl(q, zero_t) == doctest::Approx(0.7 * std::log(0.7) + 0.3 * std::log(0.3 / 1e-12)).epsilon(1e-12));
}

TEST_CASE("listwise loss gradient matches finite differences") {
  std::mt19937_64 rng(3);
  auto e = nn::parameter(nn::gaussian_matrix(6, 4, 1.0, rng));
  auto teacher = teacher_relevance(nn::gaussian_matrix(6, 5, 1.0, rng), 0.2);
  double err = testing::max_relative_grad_error({e}, [&] { return listwise_loss(e, teacher, 0.1); });
  MESSAGE("listwise gradient relative error " << err);
  CHECK(err <= 1e-4);

  nn::Matrix sims = cosine_matrix(e->value);
  nn::Matrix q(6, 5);
  for (int i = 0; i < 6; ++i) q.row(i) = relevance_distribution(off_diagonal_row(sims, i), 0.1).transpose();
  CHECK(listwise_loss(e, teacher, 0.1)->value(0, 0) == doctest::Approx(listwise_kl(q, teacher)).epsilon(1e-14));
}

TEST_CASE("distillation loss") {
  nn::Matrix logits(1, 3), onehot(1, 3);
  logits << 60.0, 0.0, 0.0;
  onehot << 1.0, 0.0, 0.0;
  CHECK(kd_loss_value(logits, onehot, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    auto z = nn::gaussian_matrix(4, 3, 2.0, rng);
    CHECK(kd_loss_value(z, random_dists(rng, 4, 3), 1.0 + i % 3) >= -1e-12);
  }
  auto z = nn::parameter(nn::gaussian_matrix(5, 3, 1.0, rng));
  auto p = random_dists(rng, 5, 3);
  for (double temp : {1.0, 2.0}) {
    double err = testing::max_relative_grad_error({z}, [&] { return kd_loss(z, p, temp); });
    MESSAGE("kd gradient relative error at T=" << temp << ": " << err);
    CHECK(err <= 1e-4);
  }
  CHECK_THROWS_AS(kd_loss_value(nn::Matrix::Zero(2, 3), nn::Matrix::Constant(2, 2, 0.5), 1.0), std::invalid_argument);
}

TEST_CASE("retrieval prediction") {
  auto one = store_with({vec({1, 0}), vec({0, 1})}, {{0.3, 0.7}, {0.9, 0.1}});
  auto r1 = predict_retrieval(vec({0.9, 0.1}), one, 1);
  CHECK(r1.class_scores == one.records[0].value);
  CHECK(r1.predicted_class == 1);
  REQUIRE(r1.retrieved.size() == 1);
  CHECK(r1.retrieved[0].weight == 1.0);

  auto tie = store_with({vec({1, 0}), vec({0, 1})}, {{1, 0}, {0, 1}});
  auto rt = predict_retrieval(vec({1, 1}), tie, 2);
  CHECK(rt.class_scores(0) == doctest::Approx(0.5));
  CHECK(rt.class_scores(1) == doctest::Approx(0.5));
  CHECK(rt.predicted_class == 0);

  auto three = store_with({vec({0.8, 0.6}), vec({0.6, 0.8}), vec({0.4, std::sqrt(0.84)})},
                          {{0.9, 0.1}, {0.2, 0.8}, {0.5, 0.5}});
  auto r3 = predict_retrieval(vec({1, 0}), three, 3);
  const double expected = 4.0 / 9 * 0.9 + 3.0 / 9 * 0.2 + 2.0 / 9 * 0.5;
  CHECK(r3.class_scores(0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(r3.class_scores(0) == doctest::Approx(0.5778).epsilon(1e-4));
  CHECK(r3.class_scores(1) == doctest::Approx(1.0 - expected).epsilon(1e-12));
  CHECK(r3.predicted_class == 0);
  CHECK(r3.retrieved[0].weight == doctest::Approx(4.0 / 9).epsilon(1e-12));

  auto mixed = store_with({vec({1, 0}), vec({-1, 0.1})}, {{1, 0}, {0, 1}});
  auto rm = predict_retrieval(vec({1, 0}), mixed, 2);
  CHECK(rm.class_scores(0) == doctest::Approx(1.0));
  auto rn = predict_retrieval(vec({0, -1}), store_with({vec({0.1, 1}), vec({-0.1, 1})}, {{1, 0}, {0, 1}}), 2);
  CHECK(rn.retrieved[0].weight == 0.5);
  CHECK(rn.predicted_class == 0);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<QueryHit> hits;
    std::vector<Eigen::VectorXd> keys;
    std::vector<std::vector<double>> values;
    for (int i = 0; i < 5; ++i) {
      hits.push_back({i, u(rng)});
      keys.push_back(vec({1, 0}));
      double a = u(rng);
      values.push_back({a, 1 - a});
    }
    auto store = store_with(keys, values);
    auto base = combine_retrieved(store, hits);
    for (auto& h : hits) h.similarity *= 3.5;
    auto scaled = combine_retrieved(store, hits);
    CHECK(base.predicted_class == scaled.predicted_class);
    CHECK(base.class_scores.sum() == doctest::Approx(1.0).epsilon(1e-12));
    double wsum = 0.0;
    for (const auto& r : base.retrieved) wsum += r.weight;
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(predict_retrieval(vec({1, 0}), KnowledgeStore{}, 1), std::invalid_argument);
}

TEST_CASE("metrics") {
  std::vector<int> gold{0, 0, 0, 0, 1, 1, 1, 1}, pred{0, 0, 0, 1, 1, 1, 1, 0};
  CHECK(matthews_correlation(gold, pred, 2) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(accuracy_score(gold, pred) == 0.75);
  CHECK(matthews_correlation(gold, gold, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(accuracy_score(gold, gold) == 1.0);
  CHECK(matthews_correlation(gold, std::vector<int>(8, 1), 2) == 0.0);
  CHECK_THROWS_AS(evaluate({}, {}, Metric::accuracy, 2), std::invalid_argument);
  // Inverted predictions.
  std::vector<int> inv;
  for (int g : gold) inv.push_back(1 - g);
  CHECK(matthews_correlation(gold, inv, 2) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("student embeddings") {
  StudentFixture f;
  Encoder s(f.student_cfg, 1);
  auto a = s.embed(f.vocab.encode("sentence: the cat"));
  CHECK(a.size() == f.student_cfg.hidden_dim);
  CHECK(a == s.embed(f.vocab.encode("sentence: the cat")));
  CHECK(cosine(a, a) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("retrieval training lowers the held-out listwise loss") {
  StudentFixture f;
  RewardModel teacher = train_classifier(f.task.train, {}, f.teacher_cfg, f.vocab, {.steps = 60, .lr = 3e-3}, 1);
  std::vector<nn::Matrix> teacher_before;
  for (const auto& p : teacher.encoder().parameters()) teacher_before.push_back(p.tensor->value);

  auto train_texts = f.texts(f.task.train);
  auto held = f.texts(f.task.test);
  nn::Matrix t_train = teacher.embed_all(train_texts), t_held = teacher.embed_all(held);
  auto held_loss = [&](const Encoder& s) {
    double total = 0.0;
    for (int b = 0; b < 4; ++b) {
      std::vector<std::vector<int>> batch;
      nn::Matrix t(32, t_held.cols());
      for (int i = 0; i < 32; ++i) {
        batch.push_back(f.vocab.encode(held[static_cast<std::size_t>(b * 32 + i)]));
        t.row(i) = t_held.row(b * 32 + i);
      }
      total += listwise_loss(nn::constant(s.pooled(batch)->value), teacher_relevance(t, 0.2), 0.1)->value(0, 0);
    }
    return total / 4;
  };
  StudentTrainConfig cfg{.steps = 80, .lr = 3e-3, .batch_size = 32};
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Encoder s(f.student_cfg, seed);
    double before = held_loss(s);
    StudentReport rep;
    train_retrieval_student(s, train_texts, t_train, f.vocab, cfg, seed, nullptr, &rep);
    double after = held_loss(s);
    MESSAGE("seed " << seed << ": held-out listwise loss " << before << " -> " << after);
    improved += after < before;
    CHECK(rep.loss_curve.size() == 80);
  }
  CHECK(improved >= 4);
  auto params = teacher.encoder().parameters();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i].tensor->value == teacher_before[i]);

  Encoder s0(f.student_cfg, 9);
  auto before = s0.embed(f.vocab.encode(train_texts[0]));
  train_retrieval_student(s0, train_texts, t_train, f.vocab, {.steps = 0}, 1);
  CHECK(s0.embed(f.vocab.encode(train_texts[0])) == before);
  CHECK_THROWS_AS(train_retrieval_student(s0, {train_texts[0]}, t_train.topRows(1), f.vocab, cfg, 1),
                  std::invalid_argument);

  Encoder x(f.student_cfg, 4), y(f.student_cfg, 4);
  train_retrieval_student(x, train_texts, t_train, f.vocab, {.steps = 5, .batch_size = 16}, 3);
  train_retrieval_student(y, train_texts, t_train, f.vocab, {.steps = 5, .batch_size = 16}, 3);
  CHECK(x.embed(f.vocab.encode(held[0])) == y.embed(f.vocab.encode(held[0])));
}

TEST_CASE("distillation baseline training") {
  StudentFixture f;
  RewardModel teacher = train_classifier(f.task.train, {}, f.teacher_cfg, f.vocab, {.steps = 60, .lr = 3e-3}, 1);
  auto texts = f.texts(f.task.train);
  nn::Matrix probs = teacher.predict_all(texts);
  EncoderConfig with_head = f.student_cfg;
  with_head.num_classes = f.task.spec.num_classes();
  Encoder s(with_head, 2);
  StudentReport rep;
  int dev_calls = 0;
  auto dev = [&](const Encoder& e) {
    ++dev_calls;
    return evaluate(f.task.dev, predict_head(e, f.vocab, f.texts(f.task.dev)), Metric::accuracy, 2);
  };
  train_kd_baseline(s, texts, probs, f.vocab, {.steps = 60, .lr = 3e-3, .batch_size = 32, .eval_every = 20}, 5, dev, &rep);
  CHECK(rep.loss_curve.back().second < rep.loss_curve.front().second);
  CHECK(dev_calls == 4);
  CHECK(rep.best_dev == doctest::Approx(dev(s)).epsilon(1e-15));

  Encoder no_head(f.student_cfg, 2);
  CHECK_THROWS_AS(train_kd_baseline(no_head, texts, probs, f.vocab, {}, 1), std::invalid_argument);
  EncoderConfig three = with_head;
  three.num_classes = 3;
  Encoder wrong(three, 2);
  CHECK_THROWS_AS(train_kd_baseline(wrong, texts, probs, f.vocab, {}, 1), std::invalid_argument);
}
