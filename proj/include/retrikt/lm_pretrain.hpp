#pragma once

// Pretraining of the base model that prompt tuning later keeps frozen. The
// corpus comes from the task's text generator under a seed disjoint from the
// task splits; a fraction of labels is redrawn uniformly so the model starts
// with partial knowledge of the label/text association.

#include "retrikt/prompt_tuning.hpp"

#include <cstdint>
#include <vector>

namespace retrikt {

// Generator samples under `seed` with a fraction of labels redrawn uniformly.
std::vector<LabeledSample> noisy_task_samples(const SyntheticConfig& config, int size, double label_noise,
                                              const StopwordSet& stopwords, std::uint64_t seed);

// Alternates keyword-conditioned and label-conditioned samples.
std::vector<GenerationSample> pretraining_corpus(const SyntheticConfig& config, int size, double label_noise,
                                                 const Vocabulary& vocab, const StopwordSet& stopwords,
                                                 std::uint64_t seed);

struct PretrainConfig {
  int steps = 1500;
  double lr = 3e-3;
  int batch_size = 32;
};

// Trains every base weight on the corpus and leaves the model frozen.
void pretrain_base_lm(TinyLm& lm, const std::vector<GenerationSample>& corpus, const PretrainConfig& config,
                      std::uint64_t seed, std::vector<LossPoint>* curve = nullptr);

}  // namespace retrikt
