#include "retrikt/prompt_tuning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace retrikt {

std::string keyword_condition(const std::vector<std::string>& keywords) {
  std::string out = "keywords:";
  for (std::size_t i = 0; i < keywords.size(); ++i) out += (i ? ", " : " ") + keywords[i];
  return out;
}

std::string label_condition(const std::string& label) { return "label: " + label; }

std::string serialize_target(const std::string& label, const std::string& text) {
  return "label: " + label + " | text: " + text;
}

std::vector<int> encode_target(const Vocabulary& vocab, const std::string& label, const std::string& text) {
  auto ids = vocab.encode(serialize_target(label, text));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

std::vector<GenerationSample> build_generation_samples(const std::vector<LabeledSample>& dataset, View view,
                                                       const Vocabulary& vocab) {
  std::vector<GenerationSample> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) {
    if (view == View::input_view && s.keywords.empty()) {
      throw std::invalid_argument("sample '" + s.id + "' has no keywords");
    }
    GenerationSample g;
    g.view = view;
    g.condition = vocab.encode(view == View::input_view ? keyword_condition(s.keywords) : label_condition(s.label_text));
    g.target = encode_target(vocab, s.label_text, s.text);
    out.push_back(std::move(g));
  }
  return out;
}

namespace {

std::vector<ConditionedSequence> as_sequences(const std::vector<GenerationSample>& batch, View view) {
  std::vector<ConditionedSequence> seqs;
  seqs.reserve(batch.size());
  for (const auto& g : batch) {
    if (g.view != view) {
      throw std::invalid_argument("generation sample view " + view_name(g.view) + " does not match prompt view " +
                                  view_name(view));
    }
    seqs.push_back({g.condition, g.target});
  }
  return seqs;
}

}  // namespace

nn::Tensor supervised_loss_node(const TinyLm& lm, const std::vector<GenerationSample>& batch,
                                const SoftPrompt& prompt) {
  if (batch.empty()) throw std::invalid_argument("supervised_loss: empty batch");
  auto pass = lm.score_targets(as_sequences(batch, prompt.view), &prompt);
  return nn::scale(nn::sum(pass.log_probs), -1.0 / static_cast<double>(batch.size()));
}

double supervised_loss(const TinyLm& lm, const std::vector<GenerationSample>& batch, const SoftPrompt& prompt) {
  return supervised_loss_node(lm, batch, prompt)->value(0, 0);
}

double loss_per_token(const TinyLm& lm, const std::vector<GenerationSample>& batch, const SoftPrompt& prompt) {
  if (batch.empty()) throw std::invalid_argument("loss_per_token: empty batch");
  auto pass = lm.score_targets(as_sequences(batch, prompt.view), &prompt);
  return -pass.log_probs->value.sum() / static_cast<double>(pass.log_probs->rows());
}

BatchSampler::BatchSampler(int size, int batch_size, std::uint64_t seed) : batch_size_(batch_size), rng_(seed) {
  if (size <= 0) throw std::invalid_argument("BatchSampler: empty dataset");
  if (batch_size <= 0) throw std::invalid_argument("BatchSampler: batch size must be positive");
  order_.resize(static_cast<std::size_t>(size));
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::vector<int> BatchSampler::next() {
  const int n = std::min<int>(batch_size_, static_cast<int>(order_.size()));
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

SoftPrompt tune_prompts(const TinyLm& lm, const std::vector<GenerationSample>& samples, View view,
                        const TuneConfig& config, std::uint64_t seed, std::vector<LossPoint>* curve) {
  if (config.steps < 0) throw std::invalid_argument("tune_prompts: negative step count");
  std::mt19937_64 rng(seed);
  SoftPrompt prompt = SoftPrompt::gaussian(lm.config(), config.prompt_length, view, rng, config.init_std);
  if (config.steps == 0) return prompt;
  if (samples.empty()) throw std::invalid_argument("tune_prompts: no samples");

  BatchSampler sampler(static_cast<int>(samples.size()), config.batch_size, rng());
  nn::Adam opt(prompt.tensors(), {.lr = config.lr, .total_steps = config.steps});
  std::vector<GenerationSample> batch;
  for (int step = 0; step < config.steps; ++step) {
    batch.clear();
    for (int i : sampler.next()) batch.push_back(samples[static_cast<std::size_t>(i)]);
    opt.zero_grad();
    auto loss = supervised_loss_node(lm, batch, prompt);
    const double value = loss->value(0, 0);
    if (!std::isfinite(value)) {
      throw std::runtime_error("tune_prompts: non-finite loss at step " + std::to_string(step));
    }
    nn::backward(loss);
    opt.step();
    if (curve) curve->push_back({step, value});
  }
  return prompt;
}

void write_loss_curve(const std::vector<LossPoint>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss\n";
  out.precision(9);
  for (const auto& p : curve) out << p.step << ',' << p.loss << '\n';
}

Vocabulary task_vocabulary(const std::vector<std::string>& words, const TaskSpec& spec) {
  std::vector<std::string> all = words;
  all.insert(all.end(), spec.label_verbalizers.begin(), spec.label_verbalizers.end());
  return Vocabulary::build(all);
}

}  // namespace retrikt
