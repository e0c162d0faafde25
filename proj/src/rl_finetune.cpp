#include "retrikt/rl_finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>

namespace retrikt {

namespace {

using NgramCounts = std::map<std::string, int>;

NgramCounts ngram_counts(const TokenSeq& toks, int n) {
  NgramCounts out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      if (j) key += '\x1f';
      key += toks[i + static_cast<std::size_t>(j)];
    }
    ++out[key];
  }
  return out;
}

}  // namespace

double self_bleu3(const TokenSeq& sample, const std::vector<TokenSeq>& references) {
  if (references.empty()) throw std::invalid_argument("self_bleu3: no references");
  if (sample.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= 3; ++n) {
    NgramCounts hyp = ngram_counts(sample, n);
    NgramCounts max_ref;
    for (const auto& ref : references) {
      for (const auto& [g, c] : ngram_counts(ref, n)) {
        auto& slot = max_ref[g];
        slot = std::max(slot, c);
      }
    }
    long matched = 0, total = 0;
    for (const auto& [g, c] : hyp) {
      total += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    const double p = matched > 0 ? static_cast<double>(matched) / static_cast<double>(total) : kBleuEpsilon;
    log_sum += std::log(p);
  }
  const long c = static_cast<long>(sample.size());
  long r = -1;
  for (const auto& ref : references) {
    const long len = static_cast<long>(ref.size());
    if (r < 0 || std::labs(len - c) < std::labs(r - c) || (std::labs(len - c) == std::labs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * std::exp(log_sum / 3.0);
}

double length_penalty(int l, int l_min) {
  if (l < 1) throw std::invalid_argument("length_penalty: length must be positive");
  if (l_min < 1) throw std::invalid_argument("length_penalty: l_min must be positive");
  return l >= l_min ? 1.0 : std::exp(1.0 - static_cast<double>(l_min) / static_cast<double>(l));
}

RewardBreakdown compose_reward(double r_accuracy, double r_diversity, int length, const RewardSettings& s) {
  RewardBreakdown b;
  b.r_accuracy = r_accuracy;
  b.r_diversity = r_diversity;
  b.brevity = s.use_brevity ? length_penalty(length, s.l_min) : 1.0;
  const double acc = s.use_accuracy ? r_accuracy : 0.0;
  const double div = s.use_diversity ? s.alpha * r_diversity : 0.0;
  b.total = (acc + div) * b.brevity;
  return b;
}

std::vector<RewardBreakdown> compute_rewards(const std::vector<std::optional<ParsedGeneration>>& batch,
                                             const RewardModel& rm, const RewardSettings& settings) {
  std::vector<RewardBreakdown> out(batch.size());
  std::vector<std::size_t> ok;
  std::vector<TokenSeq> texts;
  std::vector<std::string> raw;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]) {
      ok.push_back(i);
      texts.push_back(tokenize(batch[i]->text));
      raw.push_back(batch[i]->text);
    } else {
      out[i].parse_failed = true;
      out[i].brevity = settings.use_brevity ? 0.0 : 1.0;
    }
  }
  if (ok.empty()) return out;
  nn::Matrix probs = rm.predict_all(raw);
  for (std::size_t a = 0; a < ok.size(); ++a) {
    const auto& g = *batch[ok[a]];
    double div = 0.0;
    if (ok.size() > 1) {
      std::vector<TokenSeq> refs;
      refs.reserve(ok.size() - 1);
      for (std::size_t b = 0; b < ok.size(); ++b) {
        if (b != a) refs.push_back(texts[b]);
      }
      div = 1.0 - self_bleu3(texts[a], refs);
    }
    const double acc = probs(static_cast<Eigen::Index>(a), g.label_id);
    out[ok[a]] = compose_reward(acc, div, static_cast<int>(texts[a].size()), settings);
  }
  return out;
}

GaeResult gae_advantages(const std::vector<double>& rewards, const std::vector<double>& values, double gamma,
                         double lambda) {
  if (values.size() != rewards.size() + 1) {
    throw std::invalid_argument("gae_advantages: expected " + std::to_string(rewards.size() + 1) + " values, got " +
                                std::to_string(values.size()));
  }
  GaeResult r;
  r.advantages.assign(rewards.size(), 0.0);
  r.returns.assign(rewards.size(), 0.0);
  double running = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const double delta = rewards[t] + gamma * values[t + 1] - values[t];
    running = delta + gamma * lambda * running;
    r.advantages[t] = running;
    r.returns[t] = running + values[t];
  }
  return r;
}

double ppo_token_loss(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return -std::min(ratio * advantage, clipped * advantage);
}

double ppo_token_grad(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return ratio * advantage <= clipped * advantage ? -ratio * advantage : 0.0;
}

PpoLosses ppo_losses(const std::vector<double>& ratios, const std::vector<double>& advantages,
                     const std::vector<double>& values, const std::vector<double>& returns, double sft_loss,
                     double vf_coeff, double beta, double clip) {
  if (ratios.size() != advantages.size() || values.size() != returns.size() || ratios.empty() || values.empty()) {
    throw std::invalid_argument("ppo_losses: mismatched or empty inputs");
  }
  PpoLosses l;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!std::isfinite(ratios[i])) throw std::runtime_error("ppo_losses: non-finite ratio at token " + std::to_string(i));
    l.policy += ppo_token_loss(ratios[i], advantages[i], clip);
  }
  l.policy /= static_cast<double>(ratios.size());
  for (std::size_t i = 0; i < values.size(); ++i) l.value += (values[i] - returns[i]) * (values[i] - returns[i]);
  l.value /= static_cast<double>(values.size());
  l.combined = l.policy + vf_coeff * l.value + beta * sft_loss;
  return l;
}

void PpoConfig::validate() const {
  if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw std::invalid_argument("PpoConfig: clip_ratio must be in (0,1)");
  if (!(gamma > 0.0 && gamma <= 1.0) || !(lambda > 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("PpoConfig: gamma and lambda must be in (0,1]");
  }
  if (lr <= 0.0 || batch_size <= 0 || mini_batch_size <= 0 || epochs < 0 || ppo_epochs <= 0 ||
      samples_per_prompt <= 0 || init_kl_coeff < 0.0 || target_kl <= 0.0 || vf_coeff < 0.0 || beta < 0.0 ||
      sft_batch_size <= 0 || max_new <= 0 || reward.alpha < 0.0 || reward.l_min <= 0) {
    throw std::invalid_argument("PpoConfig: hyperparameters must be positive");
  }
}

void AdaptiveKl::update(double measured_kl, int steps) {
  const double error = std::clamp(measured_kl / target_ - 1.0, -0.2, 0.2);
  coef_ *= 1.0 + error * static_cast<double>(steps) / horizon_;
}

namespace {

struct Rollout {
  std::vector<int> condition;
  std::vector<int> tokens;
  RewardBreakdown reward;
  std::vector<double> old_logp, ref_logp, values, advantages, returns;
};

}  // namespace

RlResult rl_finetune_prompts(const TinyLm& lm, const SoftPrompt& prompt, const std::vector<LabeledSample>& dataset,
                             const std::vector<GenerationSample>& sft_samples, const RewardModel& rm,
                             const Vocabulary& vocab, const TaskSpec& spec, const PpoConfig& config,
                             std::uint64_t seed) {
  config.validate();
  RlResult result{prompt.clone(), {}};
  if (config.epochs == 0) return result;
  if (dataset.empty()) throw std::invalid_argument("rl_finetune_prompts: empty dataset");
  if (sft_samples.empty() && config.beta > 0.0) throw std::invalid_argument("rl_finetune_prompts: no supervised samples");

  SoftPrompt& policy = result.prompt;
  const SoftPrompt reference = prompt.clone();
  const int d = lm.config().hidden_dim;
  nn::Tensor w_value = nn::parameter(nn::Matrix::Zero(d, 1));
  nn::Tensor b_value = nn::parameter(nn::Matrix::Zero(1, 1));

  std::vector<std::vector<int>> conditions;
  for (const auto& s : dataset) {
    conditions.push_back(vocab.encode(policy.view == View::input_view ? keyword_condition(s.keywords)
                                                                      : label_condition(s.label_text)));
  }

  std::mt19937_64 rng(seed);
  const int per_epoch_prompts = std::max(1, config.batch_size / config.samples_per_prompt);
  const int rollouts_per_epoch = per_epoch_prompts * config.samples_per_prompt;
  const int minibatches = (rollouts_per_epoch + config.mini_batch_size - 1) / config.mini_batch_size;
  std::vector<nn::Tensor> trainable = policy.tensors();
  trainable.push_back(w_value);
  trainable.push_back(b_value);
  nn::Adam opt(trainable, {.lr = config.lr, .total_steps = static_cast<long>(config.epochs) * config.ppo_epochs * minibatches});
  AdaptiveKl kl_ctl(config.init_kl_coeff, config.target_kl, config.kl_horizon);
  std::unique_ptr<BatchSampler> sft_sampler;
  if (!sft_samples.empty()) {
    sft_sampler = std::make_unique<BatchSampler>(static_cast<int>(sft_samples.size()), config.sft_batch_size, rng());
  }
  std::uniform_int_distribution<std::size_t> pick(0, conditions.size() - 1);

  auto values_of = [&](const nn::Tensor& hidden) {
    return nn::add_row(nn::matmul(hidden, w_value), b_value);
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<Rollout> rollouts;
    std::vector<std::optional<ParsedGeneration>> parsed;
    for (int c = 0; c < per_epoch_prompts; ++c) {
      const auto& cond = conditions[pick(rng)];
      for (int s = 0; s < config.samples_per_prompt; ++s) {
        Rollout r;
        r.condition = cond;
        r.tokens = sample_top_p(lm, &policy, cond, config.top_p, config.max_new, rng).tokens;
        parsed.push_back(parse_generated(r.tokens, vocab, spec));
        rollouts.push_back(std::move(r));
      }
    }
    auto rewards = compute_rewards(parsed, rm, config.reward);

    std::vector<ConditionedSequence> seqs;
    for (const auto& r : rollouts) seqs.push_back({r.condition, r.tokens});
    auto pass = lm.score_targets(seqs, &policy);
    auto ref_pass = lm.score_targets(seqs, &reference);
    nn::Matrix values = values_of(nn::constant(pass.hidden->value))->value;

    double kl_sum = 0.0;
    std::vector<double> all_adv;
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
      auto& r = rollouts[i];
      r.reward = rewards[i];
      const int begin = pass.offsets[i], end = pass.offsets[i + 1];
      std::vector<double> step_rewards;
      std::vector<double> v;
      for (int t = begin; t < end; ++t) {
        r.old_logp.push_back(pass.log_probs->value(t, 0));
        r.ref_logp.push_back(ref_pass.log_probs->value(t, 0));
        const double kl = r.old_logp.back() - r.ref_logp.back();
        kl_sum += kl;
        step_rewards.push_back(-kl_ctl.value() * kl);
        v.push_back(values(t, 0));
      }
      step_rewards.back() += r.reward.total;
      r.values = v;
      v.push_back(0.0);
      auto gae = gae_advantages(step_rewards, v, config.gamma, config.lambda);
      r.advantages = std::move(gae.advantages);
      r.returns = std::move(gae.returns);
      all_adv.insert(all_adv.end(), r.advantages.begin(), r.advantages.end());
    }
    const double mean_kl = kl_sum / static_cast<double>(rollouts.size());
    {
      const double mu = std::accumulate(all_adv.begin(), all_adv.end(), 0.0) / static_cast<double>(all_adv.size());
      double var = 0.0;
      for (double a : all_adv) var += (a - mu) * (a - mu);
      const double sd = std::sqrt(var / static_cast<double>(all_adv.size())) + 1e-8;
      for (auto& r : rollouts) {
        for (auto& a : r.advantages) a = (a - mu) / sd;
      }
    }

    std::vector<int> order(rollouts.size());
    std::iota(order.begin(), order.end(), 0);
    for (int pe = 0; pe < config.ppo_epochs; ++pe) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.mini_batch_size)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.mini_batch_size));
        std::vector<ConditionedSequence> mb;
        std::vector<double> old_lp, adv, ret;
        for (std::size_t k = start; k < stop; ++k) {
          const auto& r = rollouts[static_cast<std::size_t>(order[k])];
          mb.push_back({r.condition, r.tokens});
          old_lp.insert(old_lp.end(), r.old_logp.begin(), r.old_logp.end());
          adv.insert(adv.end(), r.advantages.begin(), r.advantages.end());
          ret.insert(ret.end(), r.returns.begin(), r.returns.end());
        }
        opt.zero_grad();
        auto cur = lm.score_targets(mb, &policy);
        auto vals = values_of(cur.hidden);
        const auto n_tok = static_cast<Eigen::Index>(old_lp.size());
        std::vector<double> ratios(old_lp.size()), vnow(old_lp.size());
        nn::Matrix dlp(n_tok, 1), dv(n_tok, 1);
        for (Eigen::Index t = 0; t < n_tok; ++t) {
          ratios[t] = std::exp(cur.log_probs->value(t, 0) - old_lp[t]);
          if (!std::isfinite(ratios[t])) {
            throw std::runtime_error("rl_finetune_prompts: non-finite ratio in epoch " + std::to_string(epoch));
          }
          vnow[t] = vals->value(t, 0);
          dlp(t, 0) = ppo_token_grad(ratios[t], adv[t], config.clip_ratio) / static_cast<double>(n_tok);
          dv(t, 0) = 2.0 * (vnow[t] - ret[t]) / static_cast<double>(n_tok);
        }
        auto losses = ppo_losses(ratios, adv, vnow, ret, 0.0, config.vf_coeff, 0.0, config.clip_ratio);
        nn::Tensor total = nn::add(nn::external_loss(cur.log_probs, losses.policy, dlp),
                                   nn::scale(nn::external_loss(vals, losses.value, dv), config.vf_coeff));
        if (config.beta > 0.0) {
          std::vector<GenerationSample> sft;
          for (int i : sft_sampler->next()) sft.push_back(sft_samples[static_cast<std::size_t>(i)]);
          total = nn::add(total, nn::scale(supervised_loss_node(lm, sft, policy), config.beta));
        }
        if (!std::isfinite(total->value(0, 0))) {
          throw std::runtime_error("rl_finetune_prompts: non-finite loss in epoch " + std::to_string(epoch));
        }
        nn::backward(total);
        opt.step();
      }
    }
    kl_ctl.update(mean_kl, rollouts_per_epoch);

    RlEpochLog entry;
    entry.epoch = epoch;
    int ok = 0;
    for (const auto& r : rollouts) {
      entry.r_accuracy += r.reward.r_accuracy;
      entry.r_diversity += r.reward.r_diversity;
      entry.brevity += r.reward.brevity;
      entry.total += r.reward.total;
      ok += !r.reward.parse_failed;
    }
    const double n = static_cast<double>(rollouts.size());
    entry.r_accuracy /= n;
    entry.r_diversity /= n;
    entry.brevity /= n;
    entry.total /= n;
    entry.kl = mean_kl;
    entry.kl_coeff = kl_ctl.value();
    entry.parse_rate = ok / n;
    if (!std::isfinite(entry.total)) throw std::runtime_error("rl_finetune_prompts: reward collapsed to NaN");
    result.log.push_back(entry);
  }
  return result;
}

void write_rl_log(const std::vector<RlEpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,r_accuracy,r_diversity,brevity,total,kl,kl_coeff,parse_rate\n";
  out.precision(9);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.r_accuracy << ',' << e.r_diversity << ',' << e.brevity << ',' << e.total << ','
        << e.kl << ',' << e.kl_coeff << ',' << e.parse_rate << '\n';
  }
}

}  // namespace retrikt
