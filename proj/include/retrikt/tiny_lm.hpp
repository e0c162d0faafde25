#pragma once

// Decoder-only pre-norm transformer with deep soft prompts.
//
// Layout of one sequence: k prompt rows followed by the token rows. The input
// of transformer layer j (j = 0..num_layers-1) has its first k rows replaced by
// the prompt block P^j; token rows of layer 0 are token + position embeddings.
// Prompt rows contribute keys and values to every later token.

#include "retrikt/io.hpp"
#include "retrikt/nn.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace retrikt {

struct LmConfig {
  int num_layers = 4;
  int hidden_dim = 128;
  int num_heads = 4;
  int vocab_size = 0;
  int max_seq_len = 128;
  int ff_mult = 4;

  void validate() const;
};

enum class View { input_view, output_view };

std::string view_name(View v);
View parse_view(const std::string& s);

struct SoftPrompt {
  int prompt_length = 0;
  View view = View::input_view;
  std::vector<nn::Tensor> layers;  // num_layers blocks of prompt_length x hidden_dim

  static SoftPrompt gaussian(const LmConfig& cfg, int prompt_length, View view, std::mt19937_64& rng,
                             double stddev = 0.02);
  SoftPrompt clone() const;
  std::vector<nn::Tensor> tensors() const { return layers; }
  bool same_values(const SoftPrompt& other) const;

  Checkpoint to_checkpoint() const;
  static SoftPrompt from_checkpoint(const Checkpoint& ckpt);
};

using TokenDistribution = Eigen::VectorXd;

struct PromptForward {
  std::vector<nn::Matrix> layer_inputs;  // H^0..H^{L-1}, (k + n) x hidden each
  nn::Matrix final_hidden;               // output of the last layer before the final norm
  nn::Matrix logits;                     // n x vocab, next-token logits at each token row
};

struct ConditionedSequence {
  std::vector<int> condition;
  std::vector<int> target;
};

// Output of a teacher-forced pass over target tokens, rows ordered by
// sequence then target position.
struct TargetPass {
  nn::Tensor log_probs;  // (total target tokens) x 1
  nn::Tensor hidden;     // (total target tokens) x hidden, final-norm state predicting each target
  std::vector<int> offsets;  // first row of each sequence; offsets.back() == total
};

class TinyLm {
 public:
  TinyLm(const LmConfig& cfg, std::uint64_t seed);

  const LmConfig& config() const { return cfg_; }
  nn::ParameterList parameters() const;
  // Base weights stop (or resume) receiving gradients.
  void set_trainable(bool trainable);

  PromptForward forward_with_prompt(const std::vector<int>& tokens, const SoftPrompt* prompt) const;

  TargetPass score_targets(const std::vector<ConditionedSequence>& batch, const SoftPrompt* prompt) const;

  struct NllResult {
    double nll = 0.0;
    std::vector<nn::Matrix> prompt_grads;  // d nll / d P^j
  };
  NllResult sequence_nll(const SoftPrompt& prompt, const std::vector<int>& condition,
                         const std::vector<int>& target) const;

  // Incremental decoding state with cached keys and values.
  struct DecodeState {
    std::vector<nn::Matrix> keys, values;  // per layer, rows = cached positions
    int prompt_rows = 0;
    int tokens = 0;
  };
  DecodeState start_decode(const SoftPrompt* prompt) const;
  // Consumes one token and returns the next-token logits.
  Eigen::VectorXd decode_step(DecodeState& state, int token) const;

  Checkpoint to_checkpoint() const;
  static TinyLm from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Layer {
    nn::Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  void check_prompt(const SoftPrompt* prompt) const;
  void check_tokens(const std::vector<int>& tokens, int prompt_length) const;

  struct Stacked {
    nn::Tensor final_norm;  // rows = all stacked rows
    std::vector<nn::Tensor> layer_inputs;
    std::vector<nn::Segment> segments;
  };
  Stacked run(const std::vector<std::vector<int>>& sequences, const SoftPrompt* prompt) const;

  LmConfig cfg_;
  nn::Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_, w_out_, b_out_;
  std::vector<Layer> layers_;
};

// Minimal prefix of tokens sorted by probability (ties: lower id first) whose
// cumulative mass strictly exceeds p. p >= 1 keeps the whole support.
std::vector<int> top_p_filter(const TokenDistribution& dist, double p);

TokenDistribution softmax(const Eigen::VectorXd& logits);

struct Generation {
  std::vector<int> tokens;  // includes the end-of-sequence token when emitted
  bool finished = false;    // emitted end-of-sequence before max_new
};

Generation sample_top_p(const TinyLm& lm, const SoftPrompt* prompt, const std::vector<int>& condition, double p,
                        int max_new, std::mt19937_64& rng);
Generation sample_top_p(const TinyLm& lm, const SoftPrompt* prompt, const std::vector<int>& condition, double p,
                        int max_new, std::uint64_t rng_seed);

}  // namespace retrikt
