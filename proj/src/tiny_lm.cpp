#include "retrikt/tiny_lm.hpp"

#include "retrikt/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace retrikt {

using nn::Matrix;
using nn::Tensor;

void LmConfig::validate() const {
  if (num_layers <= 0 || hidden_dim <= 0 || num_heads <= 0 || vocab_size <= 0 || max_seq_len <= 0 || ff_mult <= 0) {
    throw std::invalid_argument("LmConfig: all dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    throw std::invalid_argument("LmConfig: hidden_dim " + std::to_string(hidden_dim) + " not divisible by " +
                                std::to_string(num_heads) + " heads");
  }
}

std::string view_name(View v) { return v == View::input_view ? "input_view" : "output_view"; }

View parse_view(const std::string& s) {
  if (s == "input_view" || s == "input") return View::input_view;
  if (s == "output_view" || s == "output") return View::output_view;
  throw std::invalid_argument("unknown view '" + s + "'");
}

SoftPrompt SoftPrompt::gaussian(const LmConfig& cfg, int prompt_length, View view, std::mt19937_64& rng,
                                double stddev) {
  if (prompt_length <= 0) throw std::invalid_argument("prompt length must be positive");
  SoftPrompt p;
  p.prompt_length = prompt_length;
  p.view = view;
  for (int j = 0; j < cfg.num_layers; ++j) {
    p.layers.push_back(nn::parameter(nn::gaussian_matrix(prompt_length, cfg.hidden_dim, stddev, rng)));
  }
  return p;
}

SoftPrompt SoftPrompt::clone() const {
  SoftPrompt p;
  p.prompt_length = prompt_length;
  p.view = view;
  for (const auto& t : layers) p.layers.push_back(nn::parameter(t->value));
  return p;
}

bool SoftPrompt::same_values(const SoftPrompt& other) const {
  if (prompt_length != other.prompt_length || view != other.view || layers.size() != other.layers.size()) {
    return false;
  }
  for (std::size_t j = 0; j < layers.size(); ++j) {
    if (layers[j]->value != other.layers[j]->value) return false;
  }
  return true;
}

Checkpoint SoftPrompt::to_checkpoint() const {
  Checkpoint c;
  c.kind = "prompt";
  c.header["prompt_length"] = std::to_string(prompt_length);
  c.header["view_tag"] = view_name(view);
  c.header["num_layers"] = std::to_string(layers.size());
  c.header["hidden_dim"] = std::to_string(layers.empty() ? 0 : layers[0]->cols());
  for (std::size_t j = 0; j < layers.size(); ++j) c.tensors.emplace_back("prompt." + std::to_string(j), layers[j]->value);
  return c;
}

SoftPrompt SoftPrompt::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "prompt") throw FormatError("expected a prompt checkpoint, got '" + ckpt.kind + "'");
  SoftPrompt p;
  p.prompt_length = ckpt.get_int("prompt_length");
  p.view = parse_view(ckpt.get("view_tag"));
  int layers = ckpt.get_int("num_layers");
  for (int j = 0; j < layers; ++j) {
    const auto& m = ckpt.tensor("prompt." + std::to_string(j));
    if (m.rows() != p.prompt_length) throw FormatError("prompt block has wrong length");
    if (!m.allFinite()) throw FormatError("prompt block contains non-finite values");
    p.layers.push_back(nn::parameter(m));
  }
  return p;
}

TinyLm::TinyLm(const LmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.hidden_dim, f = cfg_.hidden_dim * cfg_.ff_mult;
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
  w_out_ = gauss(d, cfg_.vocab_size, 0.02);
  b_out_ = zeros(1, cfg_.vocab_size);
  set_trainable(false);
}

nn::ParameterList TinyLm::parameters() const {
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
  out.push_back({"w_out", w_out_});
  out.push_back({"b_out", b_out_});
  return out;
}

void TinyLm::set_trainable(bool trainable) {
  for (auto& p : parameters()) {
    p.tensor->requires_grad = trainable;
    p.tensor->zero_grad();
  }
}

void TinyLm::check_prompt(const SoftPrompt* prompt) const {
  if (!prompt) return;
  if (static_cast<int>(prompt->layers.size()) != cfg_.num_layers) {
    throw std::invalid_argument("soft prompt has " + std::to_string(prompt->layers.size()) + " blocks, model has " +
                                std::to_string(cfg_.num_layers) + " layers");
  }
  for (const auto& t : prompt->layers) {
    if (t->rows() != prompt->prompt_length || t->cols() != cfg_.hidden_dim) {
      throw std::invalid_argument("soft prompt block has wrong shape");
    }
  }
}

void TinyLm::check_tokens(const std::vector<int>& tokens, int prompt_length) const {
  if (static_cast<int>(tokens.size()) + prompt_length > cfg_.max_seq_len) {
    throw std::length_error("sequence of " + std::to_string(tokens.size()) + " tokens plus prompt length " +
                            std::to_string(prompt_length) + " exceeds max_seq_len " +
                            std::to_string(cfg_.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
    }
  }
}

TinyLm::Stacked TinyLm::run(const std::vector<std::vector<int>>& sequences, const SoftPrompt* prompt) const {
  check_prompt(prompt);
  const int k = prompt ? prompt->prompt_length : 0;
  Stacked out;
  std::vector<int> ids, pos;
  std::vector<std::pair<int, int>> prompt_rows;
  int row = 0;
  for (const auto& seq : sequences) {
    check_tokens(seq, k);
    if (seq.empty()) throw std::invalid_argument("empty sequence");
    const int len = k + static_cast<int>(seq.size());
    out.segments.push_back({row, len});
    for (int i = 0; i < k; ++i) {
      ids.push_back(Vocabulary::kPad);
      pos.push_back(0);
      prompt_rows.emplace_back(row + i, i);
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
      ids.push_back(seq[i]);
      pos.push_back(static_cast<int>(i));
    }
    row += len;
  }

  Tensor h = nn::add(nn::gather_rows(tok_emb_, ids), nn::gather_rows(pos_emb_, pos));
  if (prompt) h = nn::overwrite_rows(h, prompt->layers[0], prompt_rows);
  for (int j = 0; j < cfg_.num_layers; ++j) {
    const auto& L = layers_[static_cast<std::size_t>(j)];
    out.layer_inputs.push_back(h);
    Tensor a = nn::layer_norm(h, L.ln1_g, L.ln1_b);
    Tensor att = nn::attention(nn::matmul(a, L.wq), nn::matmul(a, L.wk), nn::matmul(a, L.wv), out.segments,
                               cfg_.num_heads, /*causal=*/true);
    h = nn::add(h, nn::matmul(att, L.wo));
    Tensor m = nn::layer_norm(h, L.ln2_g, L.ln2_b);
    Tensor ff = nn::add_row(nn::matmul(nn::gelu(nn::add_row(nn::matmul(m, L.w1), L.b1)), L.w2), L.b2);
    h = nn::add(h, ff);
    if (prompt && j + 1 < cfg_.num_layers) h = nn::overwrite_rows(h, prompt->layers[j + 1], prompt_rows);
  }
  out.layer_inputs.push_back(h);  // last entry is the final layer output; popped by callers that need H^0..H^{L-1}
  out.final_norm = nn::layer_norm(h, lnf_g_, lnf_b_);
  return out;
}

PromptForward TinyLm::forward_with_prompt(const std::vector<int>& tokens, const SoftPrompt* prompt) const {
  Stacked s = run({tokens}, prompt);
  PromptForward out;
  for (int j = 0; j < cfg_.num_layers; ++j) out.layer_inputs.push_back(s.layer_inputs[static_cast<std::size_t>(j)]->value);
  out.final_hidden = s.layer_inputs.back()->value;
  Matrix tok_rows = s.final_norm->value.bottomRows(static_cast<Eigen::Index>(tokens.size()));
  out.logits = (tok_rows * w_out_->value).rowwise() + b_out_->value.row(0);
  return out;
}

TargetPass TinyLm::score_targets(const std::vector<ConditionedSequence>& batch, const SoftPrompt* prompt) const {
  const int k = prompt ? prompt->prompt_length : 0;
  std::vector<std::vector<int>> seqs;
  std::vector<int> rows, targets;
  TargetPass out;
  int stacked = 0;
  for (const auto& cs : batch) {
    if (cs.condition.empty()) throw std::invalid_argument("score_targets: condition must be non-empty");
    if (cs.target.empty()) throw std::invalid_argument("score_targets: target must be non-empty");
    std::vector<int> seq = cs.condition;
    seq.insert(seq.end(), cs.target.begin(), cs.target.end());
    out.offsets.push_back(static_cast<int>(targets.size()));
    const int c = static_cast<int>(cs.condition.size());
    for (std::size_t t = 0; t < cs.target.size(); ++t) {
      rows.push_back(stacked + k + c + static_cast<int>(t) - 1);
      targets.push_back(cs.target[t]);
    }
    stacked += k + static_cast<int>(seq.size());
    seqs.push_back(std::move(seq));
  }
  out.offsets.push_back(static_cast<int>(targets.size()));
  Stacked s = run(seqs, prompt);
  out.hidden = nn::gather_rows(s.final_norm, rows);
  Tensor logits = nn::add_row(nn::matmul(out.hidden, w_out_), b_out_);
  out.log_probs = nn::log_softmax_pick(logits, targets);
  return out;
}

TinyLm::NllResult TinyLm::sequence_nll(const SoftPrompt& prompt, const std::vector<int>& condition,
                                       const std::vector<int>& target) const {
  SoftPrompt local = prompt.clone();
  TargetPass pass = score_targets({{condition, target}}, &local);
  Tensor loss = nn::scale(nn::sum(pass.log_probs), -1.0);
  nn::backward(loss);
  NllResult r;
  r.nll = loss->value(0, 0);
  for (auto& t : local.layers) {
    r.prompt_grads.push_back(t->grad.size() ? t->grad : Matrix::Zero(t->rows(), t->cols()));
  }
  for (auto& p : parameters()) p.tensor->zero_grad();
  return r;
}

namespace {

Eigen::RowVectorXd layer_norm_row(const Eigen::RowVectorXd& x, const Matrix& g, const Matrix& b) {
  double mu = x.mean();
  double var = (x.array() - mu).square().mean();
  Eigen::RowVectorXd y = (x.array() - mu) / std::sqrt(var + 1e-5);
  return y.cwiseProduct(g.row(0)) + b.row(0);
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = layer_norm_row(x.row(r), g, b);
  return out;
}

}  // namespace

TinyLm::DecodeState TinyLm::start_decode(const SoftPrompt* prompt) const {
  check_prompt(prompt);
  DecodeState st;
  st.prompt_rows = prompt ? prompt->prompt_length : 0;
  const int cap = st.prompt_rows + cfg_.max_seq_len;
  for (int j = 0; j < cfg_.num_layers; ++j) {
    const auto& L = layers_[static_cast<std::size_t>(j)];
    Matrix kc(cap, cfg_.hidden_dim), vc(cap, cfg_.hidden_dim);
    if (prompt) {
      Matrix a = layer_norm_rows(prompt->layers[static_cast<std::size_t>(j)]->value, L.ln1_g->value, L.ln1_b->value);
      kc.topRows(st.prompt_rows) = a * L.wk->value;
      vc.topRows(st.prompt_rows) = a * L.wv->value;
    }
    st.keys.push_back(std::move(kc));
    st.values.push_back(std::move(vc));
  }
  return st;
}

Eigen::VectorXd TinyLm::decode_step(DecodeState& st, int token) const {
  if (st.tokens + st.prompt_rows >= cfg_.max_seq_len) {
    throw std::length_error("decode_step: sequence exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  if (token < 0 || token >= cfg_.vocab_size) throw std::out_of_range("decode_step: token outside vocabulary");
  const int d = cfg_.hidden_dim, heads = cfg_.num_heads, dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const int row = st.prompt_rows + st.tokens;
  Eigen::RowVectorXd x = tok_emb_->value.row(token) + pos_emb_->value.row(st.tokens);
  for (int j = 0; j < cfg_.num_layers; ++j) {
    const auto& L = layers_[static_cast<std::size_t>(j)];
    Eigen::RowVectorXd a = layer_norm_row(x, L.ln1_g->value, L.ln1_b->value);
    Eigen::RowVectorXd q = a * L.wq->value;
    st.keys[j].row(row) = a * L.wk->value;
    st.values[j].row(row) = a * L.wv->value;
    Eigen::RowVectorXd att(d);
    for (int h = 0; h < heads; ++h) {
      auto ks = st.keys[j].block(0, h * dh, row + 1, dh);
      auto vs = st.values[j].block(0, h * dh, row + 1, dh);
      Eigen::VectorXd s = (ks * q.segment(h * dh, dh).transpose()) * inv_sqrt;
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      att.segment(h * dh, dh) = s.transpose() * vs;
    }
    x += att * L.wo->value;
    Eigen::RowVectorXd m = layer_norm_row(x, L.ln2_g->value, L.ln2_b->value);
    Eigen::RowVectorXd hdn = nn::gelu_value(m * L.w1->value + L.b1->value.row(0));
    x += hdn * L.w2->value + L.b2->value.row(0);
  }
  ++st.tokens;
  Eigen::RowVectorXd out = layer_norm_row(x, lnf_g_->value, lnf_b_->value) * w_out_->value + b_out_->value.row(0);
  return out.transpose();
}

Checkpoint TinyLm::to_checkpoint() const {
  Checkpoint c;
  c.kind = "lm";
  c.header["num_layers"] = std::to_string(cfg_.num_layers);
  c.header["hidden_dim"] = std::to_string(cfg_.hidden_dim);
  c.header["num_heads"] = std::to_string(cfg_.num_heads);
  c.header["vocab_size"] = std::to_string(cfg_.vocab_size);
  c.header["max_seq_len"] = std::to_string(cfg_.max_seq_len);
  c.header["ff_mult"] = std::to_string(cfg_.ff_mult);
  put_parameters(c, parameters());
  return c;
}

TinyLm TinyLm::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "lm") throw FormatError("expected an lm checkpoint, got '" + ckpt.kind + "'");
  LmConfig cfg;
  cfg.num_layers = ckpt.get_int("num_layers");
  cfg.hidden_dim = ckpt.get_int("hidden_dim");
  cfg.num_heads = ckpt.get_int("num_heads");
  cfg.vocab_size = ckpt.get_int("vocab_size");
  cfg.max_seq_len = ckpt.get_int("max_seq_len");
  cfg.ff_mult = ckpt.get_int("ff_mult");
  TinyLm lm(cfg, 0);
  get_parameters(ckpt, lm.parameters());
  return lm;
}

TokenDistribution softmax(const Eigen::VectorXd& logits) {
  Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

std::vector<int> top_p_filter(const TokenDistribution& dist, double p) {
  std::vector<int> order(static_cast<std::size_t>(dist.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist(a) > dist(b); });
  double cum = 0.0;
  std::vector<int> keep;
  for (int t : order) {
    keep.push_back(t);
    cum += dist(t);
    if (cum > p) break;
  }
  return keep;
}

Generation sample_top_p(const TinyLm& lm, const SoftPrompt* prompt, const std::vector<int>& condition, double p,
                        int max_new, std::mt19937_64& rng) {
  if (condition.empty()) throw std::invalid_argument("sample_top_p: condition must be non-empty");
  if (max_new <= 0) throw std::invalid_argument("sample_top_p: max_new must be positive");
  const int k = prompt ? prompt->prompt_length : 0;
  const int room = lm.config().max_seq_len - k - static_cast<int>(condition.size());
  if (room <= 0) throw std::length_error("sample_top_p: condition leaves no room to generate");
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto st = lm.start_decode(prompt);
  Eigen::VectorXd logits;
  for (int t : condition) logits = lm.decode_step(st, t);
  Generation g;
  const int budget = std::min(max_new, room);
  for (int step = 0; step < budget; ++step) {
    TokenDistribution dist = softmax(logits);
    std::vector<int> keep = top_p_filter(dist, p);
    double mass = 0.0;
    for (int t : keep) mass += dist(t);
    double u = unif(rng) * mass;
    int chosen = keep.back();
    for (int t : keep) {
      u -= dist(t);
      if (u < 0.0) {
        chosen = t;
        break;
      }
    }
    g.tokens.push_back(chosen);
    if (chosen == Vocabulary::kEos) {
      g.finished = true;
      break;
    }
    if (step + 1 < budget) logits = lm.decode_step(st, chosen);
  }
  return g;
}

Generation sample_top_p(const TinyLm& lm, const SoftPrompt* prompt, const std::vector<int>& condition, double p,
                        int max_new, std::uint64_t rng_seed) {
  std::mt19937_64 rng(rng_seed);
  return sample_top_p(lm, prompt, condition, p, max_new, rng);
}

}  // namespace retrikt
