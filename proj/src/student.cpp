#include "retrikt/student.hpp"

#include "retrikt/prompt_tuning.hpp"

#include <cmath>
#include <stdexcept>

namespace retrikt {

using nn::Matrix;

Eigen::VectorXd relevance_distribution(const Eigen::VectorXd& similarities, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("relevance_distribution: temperature must be positive");
  if (similarities.size() < 1) throw std::invalid_argument("relevance_distribution: need at least one peer");
  return softmax_row(similarities / tau);
}

Eigen::VectorXd off_diagonal_row(const Matrix& sims, Eigen::Index i) {
  const Eigen::Index n = sims.cols();
  Eigen::VectorXd out(n - 1);
  for (Eigen::Index j = 0, c = 0; j < n; ++j) {
    if (j != i) out(c++) = sims(i, j);
  }
  return out;
}

double listwise_kl(const Matrix& student_dists, const Matrix& teacher_dists) {
  if (student_dists.rows() != teacher_dists.rows() || student_dists.cols() != teacher_dists.cols()) {
    throw std::invalid_argument("listwise_kl: shape mismatch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < student_dists.rows(); ++i) {
    for (Eigen::Index j = 0; j < student_dists.cols(); ++j) {
      const double q = student_dists(i, j);
      if (q <= 0.0) continue;
      total += q * (std::log(std::max(q, kKlFloor)) - std::log(std::max(teacher_dists(i, j), kKlFloor)));
    }
  }
  return total;
}

Matrix cosine_matrix(const Matrix& e) {
  Matrix unit = e;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const double n = e.row(i).norm();
    if (n > 0.0) unit.row(i) /= n;
  }
  return unit * unit.transpose();
}

Matrix teacher_relevance(const Matrix& teacher_embeddings, double tau_teacher) {
  const Eigen::Index n = teacher_embeddings.rows();
  if (n < 2) throw std::invalid_argument("teacher_relevance: need at least two samples");
  Matrix sims = cosine_matrix(teacher_embeddings);
  Matrix out(n, n - 1);
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) = relevance_distribution(off_diagonal_row(sims, i), tau_teacher).transpose();
  return out;
}

nn::Tensor listwise_loss(const nn::Tensor& student_embeddings, const Matrix& teacher_dists, double tau_student) {
  if (!(tau_student > 0.0)) throw std::invalid_argument("listwise_loss: temperature must be positive");
  const Matrix& e = student_embeddings->value;
  const Eigen::Index n = e.rows();
  if (n < 2) throw std::invalid_argument("listwise_loss: need at least two samples");
  if (teacher_dists.rows() != n || teacher_dists.cols() != n - 1) {
    throw std::invalid_argument("listwise_loss: teacher distributions do not match the batch");
  }
  Eigen::VectorXd norms(n);
  Matrix unit = e;
  for (Eigen::Index i = 0; i < n; ++i) {
    norms(i) = e.row(i).norm();
    if (norms(i) > 0.0) unit.row(i) /= norms(i);
  }
  Matrix sims = unit * unit.transpose();
  Matrix student(n, n - 1);
  Matrix g_sims = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd q = relevance_distribution(off_diagonal_row(sims, i), tau_student);
    student.row(i) = q.transpose();
    Eigen::VectorXd a(n - 1);
    double li = 0.0;
    for (Eigen::Index j = 0; j < n - 1; ++j) {
      a(j) = std::log(std::max(q(j), kKlFloor)) - std::log(std::max(teacher_dists(i, j), kKlFloor));
      li += q(j) * a(j);
    }
    for (Eigen::Index j = 0, c = 0; j < n; ++j) {
      if (j == i) continue;
      g_sims(i, j) = q(c) * (a(c) - li) / tau_student;
      ++c;
    }
  }
  const double value = listwise_kl(student, teacher_dists);
  Matrix g_unit = (g_sims + g_sims.transpose()) * unit;
  Matrix grad = Matrix::Zero(n, e.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (norms(i) == 0.0) continue;
    const double radial = g_unit.row(i).dot(unit.row(i));
    grad.row(i) = (g_unit.row(i) - radial * unit.row(i)) / norms(i);
  }
  return nn::external_loss(student_embeddings, value, std::move(grad));
}

namespace {

std::vector<Matrix> snapshot(const std::vector<nn::Tensor>& params) {
  std::vector<Matrix> v;
  for (const auto& p : params) v.push_back(p->value);
  return v;
}

std::vector<nn::Tensor> tensors_of(const Encoder& enc) {
  std::vector<nn::Tensor> out;
  for (const auto& p : enc.parameters()) out.push_back(p.tensor);
  return out;
}

// Shared loop: `step_loss` builds the loss for one batch of indices.
void run_student_training(Encoder& student, int size, const StudentTrainConfig& config, std::uint64_t seed,
                          const std::function<nn::Tensor(const std::vector<int>&)>& step_loss, const DevScore& dev,
                          StudentReport* report, const char* what) {
  if (config.steps < 0) throw std::invalid_argument(std::string(what) + ": negative step count");
  auto params = tensors_of(student);
  student.set_trainable(true);
  nn::Adam opt(params, {.lr = config.lr, .total_steps = config.steps});
  BatchSampler sampler(size, std::min(config.batch_size, size), seed);
  StudentReport local;
  std::vector<Matrix> best = snapshot(params);
  if (dev) local.best_dev = dev(student);
  for (int step = 1; step <= config.steps; ++step) {
    opt.zero_grad();
    nn::Tensor loss = step_loss(sampler.next());
    const double v = loss->value(0, 0);
    if (!std::isfinite(v)) throw std::runtime_error(std::string(what) + ": non-finite loss at step " + std::to_string(step));
    nn::backward(loss);
    opt.step();
    local.loss_curve.push_back({step, v});
    if (dev && (step % config.eval_every == 0 || step == config.steps)) {
      const double score = dev(student);
      if (score > local.best_dev) {
        local.best_dev = score;
        local.best_step = step;
        best = snapshot(params);
      }
    }
  }
  if (dev) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  } else {
    local.best_step = config.steps;
  }
  student.set_trainable(false);
  if (report) *report = std::move(local);
}

}  // namespace

void train_retrieval_student(Encoder& student, const std::vector<std::string>& store_texts,
                             const Matrix& teacher_embeddings, const Vocabulary& vocab,
                             const StudentTrainConfig& config, std::uint64_t seed, const DevScore& dev,
                             StudentReport* report) {
  const int n = static_cast<int>(store_texts.size());
  if (n < 2 || config.batch_size < 2) throw std::invalid_argument("train_retrieval_student: batches need at least two texts");
  if (teacher_embeddings.rows() != n) throw std::invalid_argument("train_retrieval_student: one teacher embedding per text");
  auto tokens = encode_texts(vocab, store_texts);
  auto step_loss = [&](const std::vector<int>& idx) {
    std::vector<std::vector<int>> batch;
    Matrix t(static_cast<Eigen::Index>(idx.size()), teacher_embeddings.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      batch.push_back(tokens[static_cast<std::size_t>(idx[r])]);
      t.row(static_cast<Eigen::Index>(r)) = teacher_embeddings.row(idx[r]);
    }
    return listwise_loss(student.pooled(batch), teacher_relevance(t, config.tau_teacher), config.tau_student);
  };
  run_student_training(student, n, config, seed, step_loss, dev, report, "train_retrieval_student");
}

namespace {

Matrix softened_teacher(const Matrix& teacher_probs, double temperature) {
  Matrix out(teacher_probs.rows(), teacher_probs.cols());
  for (Eigen::Index r = 0; r < teacher_probs.rows(); ++r) {
    Eigen::VectorXd logp(teacher_probs.cols());
    for (Eigen::Index c = 0; c < teacher_probs.cols(); ++c) {
      logp(c) = std::log(std::max(teacher_probs(r, c), kKlFloor)) / temperature;
    }
    out.row(r) = softmax_row(logp).transpose();
  }
  return out;
}

}  // namespace

double kd_loss_value(const Matrix& logits, const Matrix& teacher_probs, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("kd_loss: temperature must be positive");
  if (logits.rows() != teacher_probs.rows() || logits.cols() != teacher_probs.cols() || logits.rows() == 0) {
    throw std::invalid_argument("kd_loss: class-count or batch mismatch");
  }
  Matrix p = temperature == 1.0 ? teacher_probs : softened_teacher(teacher_probs, temperature);
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::VectorXd z = logits.row(r).transpose() / temperature;
    const double lse = z.maxCoeff() + std::log((z.array() - z.maxCoeff()).exp().sum());
    for (Eigen::Index c = 0; c < z.size(); ++c) {
      if (p(r, c) <= 0.0) continue;
      total += p(r, c) * (std::log(std::max(p(r, c), kKlFloor)) - (z(c) - lse));
    }
  }
  return temperature * temperature * total / static_cast<double>(logits.rows());
}

nn::Tensor kd_loss(const nn::Tensor& logits, const Matrix& teacher_probs, double temperature) {
  const double value = kd_loss_value(logits->value, teacher_probs, temperature);
  Matrix p = temperature == 1.0 ? teacher_probs : softened_teacher(teacher_probs, temperature);
  Matrix grad(logits->rows(), logits->cols());
  const double b = static_cast<double>(logits->rows());
  for (Eigen::Index r = 0; r < logits->rows(); ++r) {
    Eigen::VectorXd q = softmax_row(logits->value.row(r).transpose() / temperature);
    grad.row(r) = (temperature * (q - p.row(r).transpose()) / b).transpose();
  }
  return nn::external_loss(logits, value, std::move(grad));
}

void train_kd_baseline(Encoder& student, const std::vector<std::string>& texts, const Matrix& teacher_probs,
                       const Vocabulary& vocab, const StudentTrainConfig& config, std::uint64_t seed,
                       const DevScore& dev, StudentReport* report) {
  if (!student.has_head()) throw std::invalid_argument("train_kd_baseline: student needs a classification head");
  if (teacher_probs.cols() != student.config().num_classes) {
    throw std::invalid_argument("train_kd_baseline: teacher has " + std::to_string(teacher_probs.cols()) +
                                " classes, student " + std::to_string(student.config().num_classes));
  }
  if (texts.empty() || teacher_probs.rows() != static_cast<Eigen::Index>(texts.size())) {
    throw std::invalid_argument("train_kd_baseline: one teacher distribution per text");
  }
  auto tokens = encode_texts(vocab, texts);
  auto step_loss = [&](const std::vector<int>& idx) {
    std::vector<std::vector<int>> batch;
    Matrix p(static_cast<Eigen::Index>(idx.size()), teacher_probs.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      batch.push_back(tokens[static_cast<std::size_t>(idx[r])]);
      p.row(static_cast<Eigen::Index>(r)) = teacher_probs.row(idx[r]);
    }
    return kd_loss(student.logits(batch), p, config.kd_temperature);
  };
  run_student_training(student, static_cast<int>(texts.size()), config, seed, step_loss, dev, report,
                       "train_kd_baseline");
}

int argmax_lowest(const Eigen::VectorXd& scores) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < scores.size(); ++c) {
    if (scores(c) > scores(best)) best = c;
  }
  return static_cast<int>(best);
}

PredictionResult combine_retrieved(const KnowledgeStore& store, const std::vector<QueryHit>& hits) {
  if (hits.empty()) throw std::invalid_argument("combine_retrieved: nothing retrieved");
  PredictionResult out;
  double total = 0.0;
  for (const auto& h : hits) total += std::max(0.0, h.similarity);
  out.class_scores = ProbDist::Zero(store.num_classes);
  for (const auto& h : hits) {
    const double w = total > 0.0 ? std::max(0.0, h.similarity) / total : 1.0 / static_cast<double>(hits.size());
    out.retrieved.push_back({h.index, h.similarity, w});
    out.class_scores += w * store.records[static_cast<std::size_t>(h.index)].value;
  }
  out.predicted_class = argmax_lowest(out.class_scores);
  return out;
}

PredictionResult predict_retrieval(const Eigen::VectorXd& query_embedding, const KnowledgeStore& store, int k) {
  return combine_retrieved(store, query(store, query_embedding, k));
}

std::vector<PredictionResult> predict_retrieval_all(const Encoder& student, const Vocabulary& vocab,
                                                    const std::vector<std::string>& texts,
                                                    const KnowledgeStore& store, int k) {
  if (store.records.empty()) throw std::invalid_argument("predict_retrieval: empty knowledge store");
  Matrix q = student.embed_all(encode_texts(vocab, texts));
  std::vector<PredictionResult> out;
  out.reserve(texts.size());
  for (Eigen::Index i = 0; i < q.rows(); ++i) out.push_back(predict_retrieval(q.row(i).transpose(), store, k));
  return out;
}

double evaluate(const std::vector<LabeledSample>& dataset, const std::vector<int>& predictions, Metric metric,
                int num_classes) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<int> gold;
  for (const auto& s : dataset) gold.push_back(s.label_id);
  return metric_score(metric, gold, predictions, num_classes);
}

std::vector<int> predict_head(const Encoder& student, const Vocabulary& vocab, const std::vector<std::string>& texts) {
  Matrix probs = student.predict_all(encode_texts(vocab, texts));
  std::vector<int> out;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) out.push_back(argmax_lowest(probs.row(i).transpose()));
  return out;
}

}  // namespace retrikt
