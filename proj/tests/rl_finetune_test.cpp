#include "doctest.h"

#include "retrikt/lm_pretrain.hpp"
#include "retrikt/rl_finetune.hpp"
#include "bleu_oracle.hpp"

#include <cmath>
#include <map>
#include <random>

using namespace retrikt;
using retrikt::testing::oracle_bleu3;

namespace {

TokenSeq words(const std::string& s) { return tokenize(s); }

struct RlFixture {
  SyntheticConfig syn;
  SyntheticTask task;
  StopwordSet stopwords;
  Vocabulary vocab;
  LmConfig cfg;

  RlFixture() {
    syn.rule = SyntheticRule::marker;
    syn.train_size = 24;
    task = make_synthetic_task(3, syn);
    stopwords = load_stopwords(default_stopwords_path());
    attach_keywords(task.train, stopwords);
    vocab = task_vocabulary(synthetic_vocabulary(syn), task.spec);
    cfg.num_layers = 1;
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.vocab_size = vocab.size();
    cfg.max_seq_len = 40;
  }

  RewardModel reward_model() const {
    EncoderConfig e{.num_layers = 1, .hidden_dim = 16, .num_heads = 2, .vocab_size = vocab.size(), .max_seq_len = 32,
                    .num_classes = task.spec.num_classes()};
    return RewardModel(Encoder(e, 2), vocab);
  }

  PpoConfig small_config() const {
    PpoConfig c;
    c.batch_size = 8;
    c.mini_batch_size = 4;
    c.samples_per_prompt = 2;
    c.epochs = 2;
    c.ppo_epochs = 2;
    c.sft_batch_size = 4;
    c.max_new = 12;
    return c;
  }
};

}  // namespace

TEST_CASE("self-BLEU-3 examples") {
  CHECK(self_bleu3(words("a b c d"), {words("x y"), words("a b c d")}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(self_bleu3(words("a b c d"), {words("a b c e")}) == doctest::Approx(std::cbrt(0.25)).epsilon(1e-12));
  CHECK(self_bleu3(words("p q r s"), {words("a b c d")}) == doctest::Approx(kBleuEpsilon).epsilon(1e-9));
  CHECK(self_bleu3({}, {words("a")}) == 0.0);
  CHECK_THROWS_AS(self_bleu3(words("a"), {}), std::invalid_argument);
  // Brevity penalty: hypothesis shorter than the closest reference.
  CHECK(self_bleu3(words("a b c"), {words("a b c d e f")}) == doctest::Approx(std::exp(1.0 - 2.0)).epsilon(1e-12));
}

TEST_CASE("self-BLEU-3 agrees with an independent implementation") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> word(0, 6), len(1, 9);
  std::vector<TokenSeq> records(50);
  for (auto& r : records) {
    int n = len(rng);
    for (int i = 0; i < n; ++i) r.push_back("w" + std::to_string(word(rng)));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::vector<TokenSeq> refs;
    for (std::size_t j = 0; j < records.size(); ++j) {
      if (j != i) refs.push_back(records[j]);
    }
    worst = std::max(worst, std::abs(self_bleu3(records[i], refs) - oracle_bleu3(records[i], refs)));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("length penalty") {
  CHECK(length_penalty(8, 8) == 1.0);
  CHECK(length_penalty(16, 8) == 1.0);
  CHECK(length_penalty(5, 10) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  double prev = 0.0;
  for (int l = 1; l < 8; ++l) {
    double v = length_penalty(l, 8);
    CHECK(v > prev);
    CHECK(v < 1.0);
    prev = v;
  }
  CHECK_THROWS_AS(length_penalty(0, 8), std::invalid_argument);
}

TEST_CASE("reward composition") {
  RewardSettings s;
  CHECK(compose_reward(0.9, 0.5, 8, s).total == doctest::Approx(1.0).epsilon(1e-12));
  s.l_min = 10;
  CHECK(compose_reward(0.8, 0.0, 5, s).total == doctest::Approx(0.8 * std::exp(-1.0)).epsilon(1e-12));
  RewardSettings no_bp;
  no_bp.use_brevity = false;
  CHECK(compose_reward(0.8, 0.0, 1, no_bp).total == doctest::Approx(0.8));
  RewardSettings no_div;
  no_div.use_diversity = false;
  CHECK(compose_reward(0.5, 1.0, 9, no_div).total == doctest::Approx(0.5));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u;
  for (int i = 0; i < 200; ++i) {
    auto b = compose_reward(u(rng), u(rng), 1 + i % 12, RewardSettings{});
    CHECK(b.total == (b.r_accuracy + 0.2 * b.r_diversity) * b.brevity);
    CHECK(b.total >= 0.0);
    CHECK(b.total <= 1.2);
  }
}

TEST_CASE("batch rewards") {
  RlFixture f;
  auto rm = f.reward_model();
  auto g = parse_generated_text("label: alpha | text: sentence: the cat", f.vocab, f.task.spec);
  REQUIRE(g.has_value());
  std::vector<std::optional<ParsedGeneration>> batch{g, g, std::nullopt, g};
  auto r = compute_rewards(batch, rm, {});
  CHECK(r[2].parse_failed);
  CHECK(r[2].total == 0.0);
  for (int i : {0, 1, 3}) {
    CHECK(r[static_cast<std::size_t>(i)].r_diversity == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r[static_cast<std::size_t>(i)].r_accuracy == doctest::Approx(rm.predict_dist(g->text)(g->label_id)).epsilon(1e-12));
  }
  auto lone = compute_rewards({g}, rm, {});
  CHECK(lone[0].r_diversity == 0.0);
}

TEST_CASE("generalized advantage estimation") {
  auto one = gae_advantages({1.0}, {0.5, 0.0}, 0.99, 0.95);
  CHECK(one.advantages[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(one.returns[0] == doctest::Approx(1.0).epsilon(1e-12));
  auto zero = gae_advantages({0, 0, 0}, {0, 0, 0, 0}, 0.99, 0.95);
  for (double a : zero.advantages) CHECK(a == 0.0);

  std::vector<double> r{0.3, -1.2}, v{0.4, 0.1, 0.7};
  const double g = 0.9, l = 0.8;
  auto two = gae_advantages(r, v, g, l);
  double d0 = r[0] + g * v[1] - v[0], d1 = r[1] + g * v[2] - v[1];
  CHECK(std::abs(two.advantages[0] - (d0 + g * l * d1)) < 1e-12);
  CHECK(std::abs(two.advantages[1] - d1) < 1e-12);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<double> rr(7), vv(8);
  for (auto& x : rr) x = n(rng);
  for (auto& x : vv) x = n(rng);
  vv.back() = 0.0;
  auto mc = gae_advantages(rr, vv, 0.97, 1.0);
  for (std::size_t t = 0; t < rr.size(); ++t) {
    double ret = 0.0, disc = 1.0;
    for (std::size_t u = t; u < rr.size(); ++u, disc *= 0.97) ret += disc * rr[u];
    CHECK(std::abs(mc.advantages[t] - (ret - vv[t])) < 1e-12);
  }
  CHECK_THROWS_AS(gae_advantages({1.0}, {0.0}, 0.99, 0.95), std::invalid_argument);
}

TEST_CASE("clipped surrogate") {
  CHECK(ppo_token_loss(1.5, 1.0, 0.2) == doctest::Approx(-1.2).epsilon(1e-12));
  CHECK(ppo_token_loss(0.5, -1.0, 0.2) == doctest::Approx(0.8).epsilon(1e-12));
  auto l = ppo_losses({1, 1, 1}, {0.5, -1.0, 2.0}, {0.0, 1.0}, {1.0, 1.0}, 0.3, 0.5, 2.0, 0.2);
  CHECK(l.policy == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(l.value == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(l.combined == doctest::Approx(-0.5 + 0.25 + 0.6).epsilon(1e-12));
  CHECK_THROWS_AS(ppo_losses({std::nan("")}, {1.0}, {0.0}, {0.0}, 0, 0.5, 1, 0.2), std::runtime_error);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> lr(-0.6, 0.6), adv(-2, 2);
  for (int i = 0; i < 300; ++i) {
    double x = lr(rng), a = adv(rng);
    double ratio = std::exp(x);
    // The clipped surrogate never rewards more than the unclipped one.
    CHECK(-ppo_token_loss(ratio, a, 0.2) <= ratio * a + 1e-15);
    const double h = 1e-6;
    double fd = (ppo_token_loss(std::exp(x + h), a, 0.2) - ppo_token_loss(std::exp(x - h), a, 0.2)) / (2 * h);
    if (std::abs(std::abs(x) - std::log1p(0.2)) > 1e-4 && std::abs(x - std::log(0.8)) > 1e-4) {
      CHECK(ppo_token_grad(ratio, a, 0.2) == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("adaptive KL coefficient moves toward the target") {
  AdaptiveKl up(0.001, 6.0, 10000.0), down(0.001, 6.0, 10000.0), flat(0.001, 6.0, 10000.0);
  up.update(12.0, 64);
  down.update(0.0, 64);
  flat.update(6.0, 64);
  CHECK(up.value() == doctest::Approx(0.001 * (1 + 0.2 * 64 / 10000.0)).epsilon(1e-12));
  CHECK(down.value() == doctest::Approx(0.001 * (1 - 0.2 * 64 / 10000.0)).epsilon(1e-12));
  CHECK(flat.value() == 0.001);
}

TEST_CASE("PPO fine-tuning bookkeeping") {
  RlFixture f;
  TinyLm lm(f.cfg, 1);
  auto rm = f.reward_model();
  std::mt19937_64 rng(2);
  auto prompt = SoftPrompt::gaussian(f.cfg, 2, View::output_view, rng);
  auto sft = build_generation_samples(f.task.train, View::output_view, f.vocab);

  auto cfg = f.small_config();
  cfg.epochs = 0;
  CHECK(rl_finetune_prompts(lm, prompt, f.task.train, sft, rm, f.vocab, f.task.spec, cfg, 1).prompt.same_values(prompt));

  std::vector<nn::Matrix> base;
  for (const auto& p : lm.parameters()) base.push_back(p.tensor->value);
  cfg = f.small_config();
  auto a = rl_finetune_prompts(lm, prompt, f.task.train, sft, rm, f.vocab, f.task.spec, cfg, 7);
  auto b = rl_finetune_prompts(lm, prompt, f.task.train, sft, rm, f.vocab, f.task.spec, cfg, 7);
  CHECK(a.prompt.same_values(b.prompt));
  CHECK_FALSE(a.prompt.same_values(prompt));
  REQUIRE(a.log.size() == 2);
  for (const auto& e : a.log) {
    CHECK(std::isfinite(e.total));
    CHECK(e.parse_rate >= 0.0);
    CHECK(e.parse_rate <= 1.0);
  }
  auto params = lm.parameters();
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(params[i].tensor->value == base[i]);

  auto wrong = SoftPrompt::gaussian(f.cfg, 2, View::input_view, rng);
  cfg.ppo_epochs = 0;
  CHECK_THROWS_AS(rl_finetune_prompts(lm, prompt, f.task.train, sft, rm, f.vocab, f.task.spec, cfg, 1),
                  std::invalid_argument);
}

TEST_CASE("a dominant supervised term keeps the supervised loss") {
  RlFixture f;
  TinyLm lm(f.cfg, 1);
  auto corpus = pretraining_corpus(f.syn, 400, 0.3, f.vocab, f.stopwords, 5);
  pretrain_base_lm(lm, corpus, {.steps = 100, .lr = 1e-2, .batch_size = 16}, 1);
  auto rm = f.reward_model();
  auto sft = build_generation_samples(f.task.train, View::output_view, f.vocab);
  auto prompt = tune_prompts(lm, sft, View::output_view, {.steps = 30, .lr = 1e-2, .batch_size = 8, .prompt_length = 2}, 3);
  auto cfg = f.small_config();
  cfg.beta = 1e3;
  cfg.lr = 1e-6;
  double before = supervised_loss(lm, sft, prompt);
  auto out = rl_finetune_prompts(lm, prompt, f.task.train, sft, rm, f.vocab, f.task.spec, cfg, 4);
  double after = supervised_loss(lm, sft, out.prompt);
  CHECK(std::abs(after - before) <= 0.05 * before);
}
