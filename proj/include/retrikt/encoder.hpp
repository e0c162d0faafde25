#pragma once

// Bidirectional pre-norm transformer encoder with mean pooling and an optional
// softmax classification head. Serves as reward model, teacher embedder and
// student.

#include "retrikt/io.hpp"
#include "retrikt/nn.hpp"
#include "retrikt/vocab.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace retrikt {

struct EncoderConfig {
  int num_layers = 2;
  int hidden_dim = 128;
  int num_heads = 4;
  int vocab_size = 0;
  int max_seq_len = 64;
  int ff_mult = 4;
  int num_classes = 0;  // 0: no classification head

  void validate() const;
};

using ProbDist = Eigen::VectorXd;

// Copies share parameter storage.
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  bool has_head() const { return cfg_.num_classes > 0; }
  nn::ParameterList parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);

  // Longer sequences are truncated to max_seq_len; empty ones become a single unknown token.
  std::vector<int> prepare(const std::vector<int>& tokens) const;

  // Mean of final-norm token states, one row per sequence.
  nn::Tensor pooled(const std::vector<std::vector<int>>& batch) const;
  // Head logits, one row per sequence.
  nn::Tensor logits(const std::vector<std::vector<int>>& batch) const;
  nn::Tensor head(const nn::Tensor& pooled) const;

  // Inference helpers on single sequences.
  Eigen::VectorXd embed(const std::vector<int>& tokens) const;
  ProbDist predict_dist(const std::vector<int>& tokens) const;
  // Batched inference without gradients; rows follow the input order.
  nn::Matrix embed_all(const std::vector<std::vector<int>>& seqs, int chunk = 256) const;
  nn::Matrix predict_all(const std::vector<std::vector<int>>& seqs, int chunk = 256) const;

  Checkpoint to_checkpoint(const std::string& kind) const;
  static Encoder from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Layer {
    nn::Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  nn::Tensor final_states(const std::vector<std::vector<int>>& batch, std::vector<nn::Segment>& segments) const;

  EncoderConfig cfg_;
  nn::Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_, w_head_, b_head_;
  std::vector<Layer> layers_;
};

Eigen::VectorXd softmax_row(const Eigen::VectorXd& logits);
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace retrikt
