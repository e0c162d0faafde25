#include "retrikt/reward_model.hpp"

#include "retrikt/prompt_tuning.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace retrikt {

std::vector<std::vector<int>> encode_texts(const Vocabulary& vocab, const std::vector<std::string>& texts) {
  std::vector<std::vector<int>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(vocab.encode(t));
  return out;
}

ProbDist RewardModel::predict_dist(const std::string& text) const { return encoder_.predict_dist(vocab_.encode(text)); }

Eigen::VectorXd RewardModel::embed_sentence(const std::string& text) const {
  return encoder_.embed(vocab_.encode(text));
}

nn::Matrix RewardModel::predict_all(const std::vector<std::string>& texts) const {
  return encoder_.predict_all(encode_texts(vocab_, texts));
}

nn::Matrix RewardModel::embed_all(const std::vector<std::string>& texts) const {
  return encoder_.embed_all(encode_texts(vocab_, texts));
}

int RewardModel::predict(const std::string& text) const {
  ProbDist p = predict_dist(text);
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < p.size(); ++c) {
    if (p(c) > p(best)) best = c;
  }
  return static_cast<int>(best);
}

double RewardModel::accuracy(const std::vector<LabeledSample>& data) const {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  std::vector<std::string> texts;
  for (const auto& s : data) texts.push_back(s.text);
  nn::Matrix probs = predict_all(texts);
  int correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c) {
      if (probs(static_cast<Eigen::Index>(i), c) > probs(static_cast<Eigen::Index>(i), best)) best = c;
    }
    correct += best == data[i].label_id;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

RewardModel train_classifier(const std::vector<LabeledSample>& train, const std::vector<LabeledSample>& dev,
                             const EncoderConfig& config, const Vocabulary& vocab,
                             const ClassifierTrainConfig& tc, std::uint64_t seed, ClassifierReport* report,
                             const Encoder* init) {
  if (config.num_classes < 2) throw std::invalid_argument("train_classifier: need at least two classes");
  std::set<int> present;
  for (const auto& s : train) {
    if (s.label_id < 0 || s.label_id >= config.num_classes) {
      throw std::invalid_argument("train_classifier: label of '" + s.id + "' outside the class range");
    }
    present.insert(s.label_id);
  }
  if (present.size() < 2) throw std::invalid_argument("train_classifier: training data has fewer than two classes");

  std::mt19937_64 rng(seed);
  Encoder enc(config, rng());
  std::vector<nn::Tensor> params;
  for (auto& p : enc.parameters()) params.push_back(p.tensor);
  if (init) {
    auto src = init->parameters();
    if (src.size() != params.size()) throw std::invalid_argument("train_classifier: initial weights do not match");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (src[i].tensor->value.rows() != params[i]->value.rows() || src[i].tensor->value.cols() != params[i]->value.cols()) {
        throw std::invalid_argument("train_classifier: initial weight '" + src[i].name + "' has a different shape");
      }
      params[i]->value = src[i].tensor->value;
    }
  }
  enc.set_trainable(true);
  nn::Adam opt(params, {.lr = tc.lr, .total_steps = tc.steps});
  BatchSampler sampler(static_cast<int>(train.size()), tc.batch_size, rng());

  std::vector<std::vector<int>> tokens;
  for (const auto& s : train) tokens.push_back(vocab.encode(s.text));

  RewardModel current(enc, vocab);
  auto snapshot = [&] {
    std::vector<nn::Matrix> v;
    for (auto& p : params) v.push_back(p->value);
    return v;
  };
  std::vector<nn::Matrix> best = snapshot();
  double best_dev = dev.empty() ? 0.0 : current.accuracy(dev);
  int best_step = 0;

  for (int step = 1; step <= tc.steps; ++step) {
    std::vector<std::vector<int>> batch;
    std::vector<int> labels;
    for (int i : sampler.next()) {
      batch.push_back(tokens[static_cast<std::size_t>(i)]);
      labels.push_back(train[static_cast<std::size_t>(i)].label_id);
    }
    opt.zero_grad();
    auto lp = nn::log_softmax_pick(enc.logits(batch), labels);
    auto loss = nn::scale(nn::sum(lp), -1.0 / static_cast<double>(labels.size()));
    if (!std::isfinite(loss->value(0, 0))) {
      throw std::runtime_error("train_classifier: non-finite loss at step " + std::to_string(step));
    }
    nn::backward(loss);
    opt.step();
    if (!dev.empty() && (step % tc.eval_every == 0 || step == tc.steps)) {
      double acc = current.accuracy(dev);
      if (acc > best_dev) {
        best_dev = acc;
        best = snapshot();
        best_step = step;
      }
    }
  }
  if (dev.empty()) {
    best = snapshot();
    best_step = tc.steps;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  enc.set_trainable(false);
  RewardModel rm(enc, vocab);
  if (report) {
    report->train_accuracy = rm.accuracy(train);
    report->dev_accuracy = dev.empty() ? 0.0 : best_dev;
    report->best_step = best_step;
  }
  return rm;
}

}  // namespace retrikt
