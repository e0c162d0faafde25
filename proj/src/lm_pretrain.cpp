#include "retrikt/lm_pretrain.hpp"

#include <cmath>
#include <stdexcept>

namespace retrikt {

std::vector<LabeledSample> noisy_task_samples(const SyntheticConfig& config, int size, double label_noise,
                                              const StopwordSet& stopwords, std::uint64_t seed) {
  if (size <= 0) throw std::invalid_argument("noisy_task_samples: size must be positive");
  if (label_noise < 0.0 || label_noise > 1.0) throw std::invalid_argument("noisy_task_samples: noise outside [0,1]");
  SyntheticConfig c = config;
  c.train_size = size;
  c.dev_size = c.test_size = 0;
  std::mt19937_64 rng(seed);
  auto task = make_synthetic_task(rng(), c);
  std::bernoulli_distribution flip(label_noise);
  std::uniform_int_distribution<int> pick(0, task.spec.num_classes() - 1);
  for (auto& s : task.train) {
    if (flip(rng)) {
      s.label_id = pick(rng);
      s.label_text = task.spec.label_verbalizers[static_cast<std::size_t>(s.label_id)];
    }
  }
  attach_keywords(task.train, stopwords);
  return task.train;
}

std::vector<GenerationSample> pretraining_corpus(const SyntheticConfig& config, int size, double label_noise,
                                                 const Vocabulary& vocab, const StopwordSet& stopwords,
                                                 std::uint64_t seed) {
  auto samples = noisy_task_samples(config, size, label_noise, stopwords, seed);
  std::vector<GenerationSample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    View v = i % 2 == 0 ? View::input_view : View::output_view;
    out.push_back(build_generation_samples({samples[i]}, v, vocab).front());
  }
  return out;
}

void pretrain_base_lm(TinyLm& lm, const std::vector<GenerationSample>& corpus, const PretrainConfig& config,
                      std::uint64_t seed, std::vector<LossPoint>* curve) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_base_lm: empty corpus");
  lm.set_trainable(true);
  std::vector<nn::Tensor> params;
  for (auto& p : lm.parameters()) params.push_back(p.tensor);
  nn::Adam opt(params, {.lr = config.lr, .total_steps = config.steps});
  BatchSampler sampler(static_cast<int>(corpus.size()), config.batch_size, seed);
  for (int step = 0; step < config.steps; ++step) {
    std::vector<ConditionedSequence> seqs;
    for (int i : sampler.next()) {
      const auto& g = corpus[static_cast<std::size_t>(i)];
      seqs.push_back({g.condition, g.target});
    }
    opt.zero_grad();
    auto pass = lm.score_targets(seqs, nullptr);
    auto loss = nn::scale(nn::sum(pass.log_probs), -1.0 / static_cast<double>(seqs.size()));
    const double value = loss->value(0, 0);
    if (!std::isfinite(value)) {
      lm.set_trainable(false);
      throw std::runtime_error("pretrain_base_lm: non-finite loss at step " + std::to_string(step));
    }
    nn::backward(loss);
    opt.step();
    if (curve) curve->push_back({step, value});
  }
  lm.set_trainable(false);
}

}  // namespace retrikt
