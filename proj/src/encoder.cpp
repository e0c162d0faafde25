#include "retrikt/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace retrikt {

using nn::Matrix;
using nn::Tensor;

void EncoderConfig::validate() const {
  if (num_layers <= 0 || hidden_dim <= 0 || num_heads <= 0 || vocab_size <= 0 || max_seq_len <= 0 || ff_mult <= 0) {
    throw std::invalid_argument("EncoderConfig: all dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) throw std::invalid_argument("EncoderConfig: hidden_dim not divisible by heads");
  if (num_classes < 0) throw std::invalid_argument("EncoderConfig: negative class count");
}

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.hidden_dim, f = d * cfg_.ff_mult;
  const double proj_std = 0.02 / std::sqrt(2.0 * cfg_.num_layers);
  auto ones = [](int n) { return nn::parameter(Matrix::Ones(1, n)); };
  auto zeros = [](int r, int c) { return nn::parameter(Matrix::Zero(r, c)); };
  auto gauss = [&](int r, int c, double s) { return nn::parameter(nn::gaussian_matrix(r, c, s, rng)); };
  tok_emb_ = gauss(cfg_.vocab_size, d, 0.02);
  pos_emb_ = gauss(cfg_.max_seq_len, d, 0.02);
  for (int j = 0; j < cfg_.num_layers; ++j) {
    Layer L;
    L.ln1_g = ones(d);
    L.ln1_b = zeros(1, d);
    L.wq = gauss(d, d, 0.02);
    L.wk = gauss(d, d, 0.02);
    L.wv = gauss(d, d, 0.02);
    L.wo = gauss(d, d, proj_std);
    L.ln2_g = ones(d);
    L.ln2_b = zeros(1, d);
    L.w1 = gauss(d, f, 0.02);
    L.b1 = zeros(1, f);
    L.w2 = gauss(f, d, proj_std);
    L.b2 = zeros(1, d);
    layers_.push_back(L);
  }
  lnf_g_ = ones(d);
  lnf_b_ = zeros(1, d);
  if (has_head()) {
    w_head_ = gauss(d, cfg_.num_classes, 0.02);
    b_head_ = zeros(1, cfg_.num_classes);
  }
}

nn::ParameterList Encoder::parameters() const {
  nn::ParameterList out = {{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
  for (std::size_t j = 0; j < layers_.size(); ++j) {
    const auto& L = layers_[j];
    std::string p = "layer" + std::to_string(j) + ".";
    for (auto [n, t] : std::initializer_list<std::pair<const char*, Tensor>>{
             {"ln1_g", L.ln1_g}, {"ln1_b", L.ln1_b}, {"wq", L.wq}, {"wk", L.wk}, {"wv", L.wv}, {"wo", L.wo},
             {"ln2_g", L.ln2_g}, {"ln2_b", L.ln2_b}, {"w1", L.w1}, {"b1", L.b1}, {"w2", L.w2}, {"b2", L.b2}}) {
      out.push_back({p + n, t});
    }
  }
  out.push_back({"lnf_g", lnf_g_});
  out.push_back({"lnf_b", lnf_b_});
  if (has_head()) {
    out.push_back({"w_head", w_head_});
    out.push_back({"b_head", b_head_});
  }
  return out;
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += static_cast<std::size_t>(p.tensor->value.size());
  return n;
}

void Encoder::set_trainable(bool trainable) {
  for (auto& p : parameters()) {
    p.tensor->requires_grad = trainable;
    p.tensor->zero_grad();
  }
}

std::vector<int> Encoder::prepare(const std::vector<int>& tokens) const {
  if (tokens.empty()) return {Vocabulary::kUnk};
  std::vector<int> out(tokens.begin(), tokens.begin() + std::min<std::size_t>(tokens.size(), cfg_.max_seq_len));
  for (int t : out) {
    if (t < 0 || t >= cfg_.vocab_size) throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
  }
  return out;
}

Tensor Encoder::final_states(const std::vector<std::vector<int>>& batch, std::vector<nn::Segment>& segments) const {
  if (batch.empty()) throw std::invalid_argument("Encoder: empty batch");
  std::vector<int> ids, pos;
  segments.clear();
  for (const auto& raw : batch) {
    auto seq = prepare(raw);
    segments.push_back({static_cast<int>(ids.size()), static_cast<int>(seq.size())});
    for (std::size_t i = 0; i < seq.size(); ++i) {
      ids.push_back(seq[i]);
      pos.push_back(static_cast<int>(i));
    }
  }
  Tensor h = nn::add(nn::gather_rows(tok_emb_, ids), nn::gather_rows(pos_emb_, pos));
  for (const auto& L : layers_) {
    Tensor a = nn::layer_norm(h, L.ln1_g, L.ln1_b);
    Tensor att = nn::attention(nn::matmul(a, L.wq), nn::matmul(a, L.wk), nn::matmul(a, L.wv), segments,
                               cfg_.num_heads, /*causal=*/false);
    h = nn::add(h, nn::matmul(att, L.wo));
    Tensor m = nn::layer_norm(h, L.ln2_g, L.ln2_b);
    h = nn::add(h, nn::add_row(nn::matmul(nn::gelu(nn::add_row(nn::matmul(m, L.w1), L.b1)), L.w2), L.b2));
  }
  return nn::layer_norm(h, lnf_g_, lnf_b_);
}

Tensor Encoder::pooled(const std::vector<std::vector<int>>& batch) const {
  std::vector<nn::Segment> segments;
  Tensor states = final_states(batch, segments);
  return nn::segment_mean(states, segments);
}

Tensor Encoder::head(const Tensor& pooled_rows) const {
  if (!has_head()) throw std::logic_error("Encoder has no classification head");
  return nn::add_row(nn::matmul(pooled_rows, w_head_), b_head_);
}

Tensor Encoder::logits(const std::vector<std::vector<int>>& batch) const { return head(pooled(batch)); }

Eigen::VectorXd Encoder::embed(const std::vector<int>& tokens) const {
  return pooled({tokens})->value.row(0).transpose();
}

ProbDist Encoder::predict_dist(const std::vector<int>& tokens) const {
  return softmax_row(logits({tokens})->value.row(0).transpose());
}

Matrix Encoder::embed_all(const std::vector<std::vector<int>>& seqs, int chunk) const {
  Matrix out(static_cast<Eigen::Index>(seqs.size()), cfg_.hidden_dim);
  for (std::size_t start = 0; start < seqs.size(); start += static_cast<std::size_t>(chunk)) {
    std::size_t end = std::min(seqs.size(), start + static_cast<std::size_t>(chunk));
    std::vector<std::vector<int>> part(seqs.begin() + static_cast<long>(start), seqs.begin() + static_cast<long>(end));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) = pooled(part)->value;
  }
  return out;
}

Matrix Encoder::predict_all(const std::vector<std::vector<int>>& seqs, int chunk) const {
  if (!has_head()) throw std::logic_error("Encoder has no classification head");
  Matrix out(static_cast<Eigen::Index>(seqs.size()), cfg_.num_classes);
  for (std::size_t start = 0; start < seqs.size(); start += static_cast<std::size_t>(chunk)) {
    std::size_t end = std::min(seqs.size(), start + static_cast<std::size_t>(chunk));
    std::vector<std::vector<int>> part(seqs.begin() + static_cast<long>(start), seqs.begin() + static_cast<long>(end));
    Matrix l = logits(part)->value;
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      out.row(static_cast<Eigen::Index>(start) + r) = softmax_row(l.row(r).transpose()).transpose();
    }
  }
  return out;
}

Checkpoint Encoder::to_checkpoint(const std::string& kind) const {
  Checkpoint c;
  c.kind = kind;
  c.header["num_layers"] = std::to_string(cfg_.num_layers);
  c.header["hidden_dim"] = std::to_string(cfg_.hidden_dim);
  c.header["num_heads"] = std::to_string(cfg_.num_heads);
  c.header["vocab_size"] = std::to_string(cfg_.vocab_size);
  c.header["max_seq_len"] = std::to_string(cfg_.max_seq_len);
  c.header["ff_mult"] = std::to_string(cfg_.ff_mult);
  c.header["num_classes"] = std::to_string(cfg_.num_classes);
  put_parameters(c, parameters());
  return c;
}

Encoder Encoder::from_checkpoint(const Checkpoint& ckpt) {
  EncoderConfig cfg;
  cfg.num_layers = ckpt.get_int("num_layers");
  cfg.hidden_dim = ckpt.get_int("hidden_dim");
  cfg.num_heads = ckpt.get_int("num_heads");
  cfg.vocab_size = ckpt.get_int("vocab_size");
  cfg.max_seq_len = ckpt.get_int("max_seq_len");
  cfg.ff_mult = ckpt.get_int("ff_mult");
  cfg.num_classes = ckpt.get_int("num_classes");
  Encoder e(cfg, 0);
  get_parameters(ckpt, e.parameters());
  return e;
}

Eigen::VectorXd softmax_row(const Eigen::VectorXd& logits) {
  Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace retrikt
