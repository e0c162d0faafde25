#pragma once

// Generation formats and supervised tuning of the input-view and output-view
// soft prompts, plus pretraining of the frozen base model.

#include "retrikt/data.hpp"
#include "retrikt/tiny_lm.hpp"
#include "retrikt/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace retrikt {

struct GenerationSample {
  std::vector<int> condition;
  std::vector<int> target;  // "label: Y | text: X" followed by end-of-sequence
  View view = View::input_view;
};

std::string keyword_condition(const std::vector<std::string>& keywords);  // "keywords: a, b"
std::string label_condition(const std::string& label);                    // "label: Y"
std::string serialize_target(const std::string& label, const std::string& text);

std::vector<int> encode_target(const Vocabulary& vocab, const std::string& label, const std::string& text);

std::vector<GenerationSample> build_generation_samples(const std::vector<LabeledSample>& dataset, View view,
                                                       const Vocabulary& vocab);

// Mean over the batch of the per-sequence target NLL, as a graph node.
nn::Tensor supervised_loss_node(const TinyLm& lm, const std::vector<GenerationSample>& batch,
                                const SoftPrompt& prompt);
double supervised_loss(const TinyLm& lm, const std::vector<GenerationSample>& batch, const SoftPrompt& prompt);
// Total target NLL divided by the number of target tokens.
double loss_per_token(const TinyLm& lm, const std::vector<GenerationSample>& batch, const SoftPrompt& prompt);

struct TuneConfig {
  int steps = 300;
  double lr = 1e-3;
  int batch_size = 64;
  int prompt_length = 8;
  double init_std = 0.02;
};

struct LossPoint {
  int step = 0;
  double loss = 0.0;
};

// Draws a fresh prompt from the seed and optimizes it with Adam and cosine decay.
SoftPrompt tune_prompts(const TinyLm& lm, const std::vector<GenerationSample>& samples, View view,
                        const TuneConfig& config, std::uint64_t seed, std::vector<LossPoint>* curve = nullptr);

void write_loss_curve(const std::vector<LossPoint>& curve, const std::filesystem::path& path);

// Cyclic minibatch sampler over a shuffled index order.
class BatchSampler {
 public:
  BatchSampler(int size, int batch_size, std::uint64_t seed);
  std::vector<int> next();

 private:
  std::vector<int> order_;
  std::size_t pos_ = 0;
  int batch_size_;
  std::mt19937_64 rng_;
};

// Vocabulary covering a task's words and label verbalizers.
Vocabulary task_vocabulary(const std::vector<std::string>& words, const TaskSpec& spec);

}  // namespace retrikt
