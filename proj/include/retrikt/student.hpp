#pragma once

// Small student encoders: retrieval-transfer training with a listwise
// relevance KL, the response-distillation baseline, retrieval inference and
// task metrics.

#include "retrikt/knowledge_store.hpp"
#include "retrikt/metrics.hpp"
#include "retrikt/reward_model.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace retrikt {

inline constexpr double kKlFloor = 1e-12;

// Temperature softmax over a similarity list.
Eigen::VectorXd relevance_distribution(const Eigen::VectorXd& similarities, double tau);

// Row i of a similarity matrix without its diagonal entry.
Eigen::VectorXd off_diagonal_row(const nn::Matrix& sims, Eigen::Index i);

// Sum over rows of KL(student row || teacher row), logs floored at kKlFloor.
double listwise_kl(const nn::Matrix& student_dists, const nn::Matrix& teacher_dists);

// Pairwise cosine similarities of the rows of `e` (zero rows give 0).
nn::Matrix cosine_matrix(const nn::Matrix& e);

// Listwise loss of a batch of student embeddings against teacher relevance
// distributions (rows: anchors, columns: the other N-1 members in order), as a
// graph node with its analytic gradient.
nn::Tensor listwise_loss(const nn::Tensor& student_embeddings, const nn::Matrix& teacher_dists, double tau_student);

// Teacher relevance distributions of a batch of teacher embeddings.
nn::Matrix teacher_relevance(const nn::Matrix& teacher_embeddings, double tau_teacher);

struct StudentTrainConfig {
  int steps = 300;
  double lr = 1e-3;
  int batch_size = 128;
  double tau_teacher = 0.2;
  double tau_student = 0.1;
  double kd_temperature = 1.0;
  int eval_every = 50;
};

// Scores the current student on held-out data; higher is better.
using DevScore = std::function<double(const Encoder&)>;

struct StudentReport {
  std::vector<std::pair<int, double>> loss_curve;  // (step, loss)
  double best_dev = 0.0;
  int best_step = 0;
};

// The student is trained in place (copies of an Encoder share parameters).
// With a dev scorer, parameters of the best evaluation (first on ties,
// including step 0) are restored at the end.
void train_retrieval_student(Encoder& student, const std::vector<std::string>& store_texts,
                             const nn::Matrix& teacher_embeddings, const Vocabulary& vocab,
                             const StudentTrainConfig& config, std::uint64_t seed, const DevScore& dev = nullptr,
                             StudentReport* report = nullptr);

// Mean over the batch of T^2 * KL(teacher^(1/T) || softmax(logits / T)).
// Teacher rows are probability distributions.
double kd_loss_value(const nn::Matrix& logits, const nn::Matrix& teacher_probs, double temperature);
nn::Tensor kd_loss(const nn::Tensor& logits, const nn::Matrix& teacher_probs, double temperature);

void train_kd_baseline(Encoder& student, const std::vector<std::string>& texts, const nn::Matrix& teacher_probs,
                       const Vocabulary& vocab, const StudentTrainConfig& config, std::uint64_t seed,
                       const DevScore& dev = nullptr, StudentReport* report = nullptr);

struct RetrievedRecord {
  int index = 0;
  double similarity = 0.0;
  double weight = 0.0;
};

struct PredictionResult {
  ProbDist class_scores;
  int predicted_class = 0;
  std::vector<RetrievedRecord> retrieved;
};

// Weighted mixture of the values of the top-k records. Negative similarities
// count as 0; if all weights vanish the k records are weighted uniformly.
PredictionResult combine_retrieved(const KnowledgeStore& store, const std::vector<QueryHit>& hits);
PredictionResult predict_retrieval(const Eigen::VectorXd& query_embedding, const KnowledgeStore& store, int k);
std::vector<PredictionResult> predict_retrieval_all(const Encoder& student, const Vocabulary& vocab,
                                                    const std::vector<std::string>& texts,
                                                    const KnowledgeStore& store, int k);

// Lowest class index among the maxima.
int argmax_lowest(const Eigen::VectorXd& scores);

double evaluate(const std::vector<LabeledSample>& dataset, const std::vector<int>& predictions, Metric metric,
                int num_classes);

// Predictions of a student with a classification head.
std::vector<int> predict_head(const Encoder& student, const Vocabulary& vocab, const std::vector<std::string>& texts);

}  // namespace retrikt
