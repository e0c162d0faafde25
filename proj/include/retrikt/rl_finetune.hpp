#pragma once

// Composite generation reward and PPO fine-tuning of soft prompts mixed with
// the supervised prompt loss.

#include "retrikt/knowledge_store.hpp"
#include "retrikt/prompt_tuning.hpp"
#include "retrikt/reward_model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace retrikt {

using TokenSeq = std::vector<std::string>;

// BLEU-3 of `sample` against `references`: clipped n-gram precisions (n=1..3),
// geometric mean, brevity penalty against the closest reference length (ties
// to the shorter). A zero precision is replaced by kBleuEpsilon.
inline constexpr double kBleuEpsilon = 1e-9;
double self_bleu3(const TokenSeq& sample, const std::vector<TokenSeq>& references);

// 1 if l >= l_min, else exp(1 - l_min / l).
double length_penalty(int l, int l_min);

struct RewardSettings {
  double alpha = 0.2;
  int l_min = 8;
  // Ablation switches.
  bool use_accuracy = true;
  bool use_diversity = true;
  bool use_brevity = true;
};

struct RewardBreakdown {
  double r_accuracy = 0.0;
  double r_diversity = 0.0;
  double brevity = 1.0;
  double total = 0.0;
  bool parse_failed = false;
};

RewardBreakdown compose_reward(double r_accuracy, double r_diversity, int length, const RewardSettings& settings);

// Scores each generation of a batch; diversity uses the other parseable texts
// of the batch as references. Unparseable generations get total 0.
std::vector<RewardBreakdown> compute_rewards(const std::vector<std::optional<ParsedGeneration>>& batch,
                                             const RewardModel& rm, const RewardSettings& settings);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// `values` holds one entry per step plus the bootstrap value.
GaeResult gae_advantages(const std::vector<double>& rewards, const std::vector<double>& values, double gamma,
                         double lambda);

// Clipped surrogate for one token: -min(ratio * A, clip(ratio, 1-eps, 1+eps) * A).
double ppo_token_loss(double ratio, double advantage, double clip);
// d(ppo_token_loss)/d(log ratio).
double ppo_token_grad(double ratio, double advantage, double clip);

struct PpoLosses {
  double policy = 0.0;
  double value = 0.0;
  double combined = 0.0;
};
// L_p is the token mean of ppo_token_loss, L_v the mean squared value error.
PpoLosses ppo_losses(const std::vector<double>& ratios, const std::vector<double>& advantages,
                     const std::vector<double>& values, const std::vector<double>& returns, double sft_loss,
                     double vf_coeff, double beta, double clip);

struct PpoConfig {
  double lr = 2e-3;
  int batch_size = 64;       // rollouts per epoch
  int mini_batch_size = 16;
  int epochs = 20;           // collect-and-update rounds
  int ppo_epochs = 4;
  int samples_per_prompt = 4;
  double init_kl_coeff = 0.001;
  double target_kl = 6.0;
  double kl_horizon = 10000.0;
  double vf_coeff = 0.5;
  double clip_ratio = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  double beta = 1.0;
  int sft_batch_size = 16;
  double top_p = 0.9;
  int max_new = 64;
  RewardSettings reward;

  void validate() const;
};

// Adaptive KL coefficient steering the measured KL toward a target.
class AdaptiveKl {
 public:
  AdaptiveKl(double init, double target, double horizon) : coef_(init), target_(target), horizon_(horizon) {}
  double value() const { return coef_; }
  void update(double measured_kl, int steps);

 private:
  double coef_, target_, horizon_;
};

struct RlEpochLog {
  int epoch = 0;
  double r_accuracy = 0.0;
  double r_diversity = 0.0;
  double brevity = 0.0;
  double total = 0.0;
  double kl = 0.0;
  double kl_coeff = 0.0;
  double parse_rate = 0.0;
};

struct RlResult {
  SoftPrompt prompt;
  std::vector<RlEpochLog> log;
};

// Conditions come from `dataset` in the prompt's view; the supervised term uses
// `sft_samples` of the same view.
RlResult rl_finetune_prompts(const TinyLm& lm, const SoftPrompt& prompt, const std::vector<LabeledSample>& dataset,
                             const std::vector<GenerationSample>& sft_samples, const RewardModel& rm,
                             const Vocabulary& vocab, const TaskSpec& spec, const PpoConfig& config,
                             std::uint64_t seed);

void write_rl_log(const std::vector<RlEpochLog>& log, const std::filesystem::path& path);

}  // namespace retrikt
