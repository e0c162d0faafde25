#pragma once

// Task classifier used as reward scorer, knowledge-store value provider and
// teacher sentence embedder.

#include "retrikt/data.hpp"
#include "retrikt/encoder.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace retrikt {

struct ClassifierTrainConfig {
  int steps = 400;
  double lr = 1e-3;
  int batch_size = 32;
  int eval_every = 50;  // dev evaluation period for best-checkpoint selection
};

struct ClassifierReport {
  double train_accuracy = 0.0;
  double dev_accuracy = 0.0;
  int best_step = 0;
};

class RewardModel {
 public:
  RewardModel(Encoder encoder, Vocabulary vocab) : encoder_(std::move(encoder)), vocab_(std::move(vocab)) {}

  const Encoder& encoder() const { return encoder_; }
  const Vocabulary& vocab() const { return vocab_; }
  int num_classes() const { return encoder_.config().num_classes; }

  ProbDist predict_dist(const std::string& text) const;
  Eigen::VectorXd embed_sentence(const std::string& text) const;
  nn::Matrix predict_all(const std::vector<std::string>& texts) const;
  nn::Matrix embed_all(const std::vector<std::string>& texts) const;

  int predict(const std::string& text) const;
  double accuracy(const std::vector<LabeledSample>& data) const;

 private:
  Encoder encoder_;
  Vocabulary vocab_;
};

// Cross-entropy training on the given labels. Keeps the parameters with the
// best dev accuracy (first best on ties); with an empty dev set, the last.
// `init`, when given, supplies the starting weights (same configuration).
RewardModel train_classifier(const std::vector<LabeledSample>& train, const std::vector<LabeledSample>& dev,
                             const EncoderConfig& config, const Vocabulary& vocab,
                             const ClassifierTrainConfig& train_config, std::uint64_t seed,
                             ClassifierReport* report = nullptr, const Encoder* init = nullptr);

std::vector<std::vector<int>> encode_texts(const Vocabulary& vocab, const std::vector<std::string>& texts);

}  // namespace retrikt
