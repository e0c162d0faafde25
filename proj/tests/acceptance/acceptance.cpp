// Acceptance gate: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include "retrikt/io.hpp"
#include "retrikt/pipeline.hpp"
#include "bleu_oracle.hpp"
#include "grad_check.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

using namespace retrikt;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kExactTol = 1e-9;
constexpr double kBleuTol = 1e-9;
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr int kPpoSeedsNeeded = 4;
constexpr double kPlateauTol = 0.01;  // two test samples out of 200
constexpr double kBudgetC1 = 1.0, kBudgetC2 = 60.0, kBudgetC3 = 60.0, kBudgetC4 = 600.0, kBudgetC5 = 1800.0,
                 kBudgetC6 = 1800.0, kBudgetC7 = 2700.0, kBudgetC8 = 2700.0;

const std::vector<std::uint64_t> kSeeds = {1, 2, 3, 4, 5};
constexpr int kDiversitySeeds = 5;
constexpr int kGrowthSeeds = 5;
constexpr int kAblationSeeds = 3;
static_assert(kAblationSeeds <= kDiversitySeeds);
const std::vector<int> kMs = {1, 2, 4, 8};

using Clock = std::chrono::steady_clock;

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }

 private:
  Clock::time_point start_ = Clock::now();
};

struct Verdict {
  bool pass = true;
  std::string detail;
};

int failures = 0;

// budget <= 0: no time limit.
void report(const std::string& id, const std::string& name, const Verdict& v, double seconds, double budget) {
  const bool in_time = budget <= 0.0 || seconds <= budget;
  const bool ok = v.pass && in_time;
  failures += !ok;
  char timing[96];
  if (budget > 0.0) {
    std::snprintf(timing, sizeof timing, "%.1f s of %.0f s budget%s", seconds, budget, in_time ? "" : " (over budget)");
  } else {
    std::snprintf(timing, sizeof timing, "%.1f s, no time budget", seconds);
  }
  std::printf("%s %s %s: %s; %s\n", ok ? "PASS" : "FAIL", id.c_str(), name.c_str(), v.detail.c_str(), timing);
  std::fflush(stdout);
}

void log(const std::string& s) {
  std::cerr << s << std::endl;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// ---- criterion 1 -------------------------------------------------------------

Verdict formula_suite() {
  double worst = 0.0;
  auto cmp = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };

  cmp(length_penalty(5, 10), std::exp(-1.0));
  cmp(length_penalty(8, 8), 1.0);
  cmp(length_penalty(16, 8), 1.0);
  cmp(length_penalty(3, 8), std::exp(1.0 - 8.0 / 3.0));

  RewardSettings rs;
  cmp(compose_reward(0.9, 0.5, 8, rs).total, 1.0);
  cmp(compose_reward(0.8, 0.0, 4, rs).total, 0.8 * std::exp(-1.0));

  const double t = 0.2;
  Eigen::VectorXd s = vec({0.9, 0.5, 0.1});
  Eigen::VectorXd r = relevance_distribution(s, t);
  const double z = std::exp(0.9 / t) + std::exp(0.5 / t) + std::exp(0.1 / t);
  cmp(r(0), std::exp(0.9 / t) / z);
  cmp(r(1), std::exp(0.5 / t) / z);
  cmp(r(2), std::exp(0.1 / t) / z);

  nn::Matrix q(1, 2), p(1, 2);
  q << 0.7, 0.3;
  p << 0.5, 0.5;
  cmp(listwise_kl(q, p), 0.7 * std::log(1.4) + 0.3 * std::log(0.6));

  KnowledgeStore st;
  st.embed_dim = 2;
  st.num_classes = 2;
  const std::vector<Eigen::VectorXd> keys = {vec({0.8, 0.6}), vec({0.6, 0.8}), vec({0.4, std::sqrt(0.84)})};
  const std::vector<Eigen::VectorXd> vals = {vec({0.9, 0.1}), vec({0.2, 0.8}), vec({0.5, 0.5})};
  for (int i = 0; i < 3; ++i) st.records.push_back({"r" + std::to_string(i), "x", Provenance::original, keys[i], vals[i]});
  auto pr = predict_retrieval(vec({1, 0}), st, 3);
  cmp(pr.class_scores(0), 4.0 / 9 * 0.9 + 3.0 / 9 * 0.2 + 2.0 / 9 * 0.5);
  cmp(pr.class_scores(1), 4.0 / 9 * 0.1 + 3.0 / 9 * 0.8 + 2.0 / 9 * 0.5);

  // tp=1 fn=1 tn=2 fp=0
  cmp(matthews_correlation({1, 1, 0, 0}, {1, 0, 0, 0}, 2), 2.0 / std::sqrt(12.0));
  cmp(matthews_correlation({0, 0, 0, 0, 1, 1, 1, 1}, {0, 0, 0, 1, 1, 1, 1, 0}, 2), 0.5);

  // (1 + 4mn)|D| on a real generation run.
  SyntheticConfig syn;
  syn.train_size = 3;
  auto task = make_synthetic_task(4, syn);
  auto sw = load_stopwords(default_stopwords_path());
  attach_keywords(task.train, sw);
  auto vocab = task_vocabulary(synthetic_vocabulary(syn), task.spec);
  LmConfig lc{.num_layers = 1, .hidden_dim = 8, .num_heads = 2, .vocab_size = vocab.size(), .max_seq_len = 48};
  TinyLm lm(lc, 1);
  std::mt19937_64 rng(2);
  auto pi = SoftPrompt::gaussian(lc, 2, View::input_view, rng);
  auto po = SoftPrompt::gaussian(lc, 2, View::output_view, rng);
  const int m = 2, n = 3;
  auto sets = generate_sets(task.train, lm, pi, po, vocab, task.spec, sw, {.m = m, .n = n, .top_p = 0.9, .max_new = 6}, 3);
  const long kept = static_cast<long>(sets.d_i.size() + sets.d_o.size() + sets.d_io.size() + sets.d_oi.size());
  cmp(static_cast<double>(sets.total_attempts()), static_cast<double>((1 + 4 * m * n) * 3));
  cmp(static_cast<double>(kept + sets.dropped() + sets.originals), static_cast<double>((1 + 4 * m * n) * 3));

  return {worst <= kExactTol, "max |error| " + fmt(worst, 3) + " (tol " + fmt(kExactTol) + ")"};
}

// ---- criterion 2 -------------------------------------------------------------

Verdict oracle_suite() {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int top_p_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 2 + static_cast<int>(rng() % 12);
    TokenDistribution d(n);
    for (int i = 0; i < n; ++i) d(i) = trial % 2 ? std::floor(u(rng) * 4) + 1 : u(rng);
    d /= d.sum();
    double p = u(rng);
    // Enumerate all subsets: smallest size whose heaviest subset has mass > p
    // (the full support if none), heaviest ties broken toward lower ids.
    unsigned best = 0;
    double best_mass = -1.0;
    for (int size = 1; size <= n; ++size) {
      best_mass = -1.0;
      for (unsigned mask = 1; mask < (1u << n); ++mask) {
        if (std::popcount(mask) != size) continue;
        double mass = 0.0;
        for (int i = 0; i < n; ++i) mass += mask >> i & 1u ? d(i) : 0.0;
        const bool heavier = mass > best_mass + 1e-12;
        const bool tie_lower = std::abs(mass - best_mass) <= 1e-12 && (mask ^ best) && std::countr_zero(mask ^ best) ==
                                                                                            std::countr_zero(mask & (mask ^ best));
        if (heavier || tie_lower) {
          best = mask;
          best_mass = mass;
        }
      }
      if (best_mass > p) break;
    }
    std::vector<int> expect;
    for (int i = 0; i < n; ++i) {
      if (best >> i & 1u) expect.push_back(i);
    }
    std::stable_sort(expect.begin(), expect.end(), [&](int a, int b) { return d(a) > d(b); });
    top_p_bad += top_p_filter(d, p) != expect;
  }

  std::normal_distribution<double> g;
  KnowledgeStore store;
  store.embed_dim = 6;
  store.num_classes = 2;
  for (int i = 0; i < 500; ++i) {
    Eigen::VectorXd k(6);
    for (int j = 0; j < 6; ++j) k(j) = i % 3 ? g(rng) : std::round(g(rng));
    store.records.push_back({"r" + std::to_string(i), "x", Provenance::original, k, vec({0.5, 0.5})});
  }
  int query_bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd q(6);
    for (int j = 0; j < 6; ++j) q(j) = trial % 2 ? g(rng) : std::round(g(rng));
    std::vector<std::pair<double, int>> scan;
    for (int i = 0; i < 500; ++i) {
      const auto& k = store.records[static_cast<std::size_t>(i)].key;
      const double den = q.norm() * k.norm();
      scan.push_back({den == 0.0 ? 0.0 : q.dot(k) / den, i});
    }
    std::stable_sort(scan.begin(), scan.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    auto hits = query(store, q, 10);
    for (int j = 0; j < 10; ++j) {
      query_bad += hits[static_cast<std::size_t>(j)].index != scan[static_cast<std::size_t>(j)].second ||
                   hits[static_cast<std::size_t>(j)].similarity != scan[static_cast<std::size_t>(j)].first;
    }
  }

  const char* words[] = {"a", "b", "c", "Ab", "B", "cA"};
  std::vector<std::string> items;
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    int len = 1 + static_cast<int>(rng() % 3);
    for (int j = 0; j < len; ++j) s += (j ? std::string(1 + rng() % 2, ' ') : "") + words[rng() % 6];
    items.push_back(s);
  }
  std::set<std::string> seen;
  std::vector<std::string> expect;
  for (const auto& s : items) {
    std::istringstream is(s);
    std::string w, key;
    while (is >> w) {
      for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      key += (key.empty() ? "" : " ") + w;
    }
    if (seen.insert(key).second) expect.push_back(s);
  }
  const bool dedup_ok = dedup(items) == expect;

  const std::vector<std::string> pool = {"red", "blue", "green", "cat", "dog", "sun"};
  std::vector<TokenSeq> recs;
  for (int i = 0; i < 50; ++i) {
    TokenSeq t;
    int len = 1 + static_cast<int>(rng() % 9);
    for (int j = 0; j < len; ++j) t.push_back(pool[rng() % pool.size()]);
    recs.push_back(t);
  }
  double bleu_err = 0.0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    std::vector<TokenSeq> refs;
    for (std::size_t j = 0; j < recs.size(); ++j) {
      if (j != i) refs.push_back(recs[j]);
    }
    bleu_err = std::max(bleu_err, std::abs(self_bleu3(recs[i], refs) - retrikt::testing::oracle_bleu3(recs[i], refs)));
  }
  Verdict v;
  v.pass = top_p_bad == 0 && query_bad == 0 && dedup_ok && bleu_err <= kBleuTol;
  v.detail = "top-p mismatches " + std::to_string(top_p_bad) + "/1000, query mismatches " + std::to_string(query_bad) +
             ", dedup " + (dedup_ok ? "exact" : "differs") + ", self-BLEU max |error| " + fmt(bleu_err, 3);
  return v;
}

// ---- criterion 3 -------------------------------------------------------------

Verdict gradient_suite() {
  LmConfig cfg{.num_layers = 2, .hidden_dim = 16, .num_heads = 2, .vocab_size = 20, .max_seq_len = 24};
  TinyLm lm(cfg, 8);
  std::mt19937_64 rng(9);
  auto prompt = SoftPrompt::gaussian(cfg, 3, View::input_view, rng, 0.3);
  const std::vector<int> cond = {6, 4, 12}, target = {13, 14, 0};
  auto r = lm.sequence_nll(prompt, cond, target);
  double nll_err = 0.0;
  for (std::size_t j = 0; j < prompt.layers.size(); ++j) {
    auto& m = prompt.layers[j]->value;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + kGradStep;
      const double up = lm.sequence_nll(prompt, cond, target).nll;
      m.data()[i] = orig - kGradStep;
      const double down = lm.sequence_nll(prompt, cond, target).nll;
      m.data()[i] = orig;
      const double num = (up - down) / (2 * kGradStep), ana = r.prompt_grads[j].data()[i];
      nll_err = std::max(nll_err, std::abs(num - ana) / std::max(1e-6, std::max(std::abs(num), std::abs(ana))));
    }
  }
  auto e = nn::parameter(nn::gaussian_matrix(6, 4, 1.0, rng));
  auto teacher = teacher_relevance(nn::gaussian_matrix(6, 5, 1.0, rng), 0.2);
  const double list_err = retrikt::testing::max_relative_grad_error(
      {e}, [&] { return listwise_loss(e, teacher, 0.1); }, kGradStep);
  auto z = nn::parameter(nn::gaussian_matrix(5, 3, 1.0, rng));
  nn::Matrix probs(5, 3);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int i = 0; i < 5; ++i) {
    for (int c = 0; c < 3; ++c) probs(i, c) = u(rng);
    probs.row(i) /= probs.row(i).sum();
  }
  double kd_err = 0.0;
  for (double temp : {1.0, 2.0}) {
    kd_err = std::max(kd_err, retrikt::testing::max_relative_grad_error(
                                  {z}, [&] { return kd_loss(z, probs, temp); }, kGradStep));
  }
  Verdict v;
  v.pass = nll_err <= kGradTol && list_err <= kGradTol && kd_err <= kGradTol;
  v.detail = "max relative error: sequence NLL " + fmt(nll_err, 3) + ", listwise KL " + fmt(list_err, 3) + ", KD " +
             fmt(kd_err, 3) + " (tol " + fmt(kGradTol) + ")";
  return v;
}

// ---- desk-profile experiments ---------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::optional<RewardModel> rm;
  PromptPair sft;
  RlOutcome rl;
  GenerationSets sets;
  std::optional<KnowledgeStore> store;
  double retrieval = 0, kd = 0, finetune = 0;
  double t_rm = 0, t_sft = 0, t_rl = 0, t_gen = 0, t_store = 0, t_ret = 0, t_kd = 0, t_ft = 0;
};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double epoch_mean(const std::vector<RlEpochLog>& a, const std::vector<RlEpochLog>& b, bool last) {
  const std::size_t k = std::max<std::size_t>(1, a.size() / 10);
  double s = 0.0;
  for (const auto* log : {&a, &b}) {
    for (std::size_t i = 0; i < k; ++i) s += (*log)[last ? log->size() - 1 - i : i].total;
  }
  return s / static_cast<double>(2 * k);
}

struct StoreEval {
  double retrieval = 0, kd = 0;
  double t_ret = 0, t_kd = 0;
};

StoreEval eval_store(const RunConfig& c, const TaskData& data, const KnowledgeStore& store, const RewardModel& rm,
                     bool with_kd) {
  StoreEval out;
  Timer t;
  out.retrieval = retrieval_score(c, data, train_student(c, data, store, rm));
  out.t_ret = t.seconds();
  if (with_kd) {
    Timer tk;
    out.kd = head_score(data, train_kd_student(c, data, store));
    out.t_kd = tk.seconds();
  }
  return out;
}

bool bit_exact_roundtrips(const SeedOutcome& o, const SharedModels& shared, const TrainedStudent& st,
                          const fs::path& dir) {
  fs::create_directories(dir);
  bool ok = true;
  save_store(st.keyed_store, dir / "a.store");
  ok &= load_store(dir / "a.store") == st.keyed_store;
  save_store(load_store(dir / "a.store"), dir / "b.store");
  ok &= file_hash(dir / "a.store") == file_hash(dir / "b.store");
  std::vector<Checkpoint> ckpts = {shared.lm.to_checkpoint(), o.rm->encoder().to_checkpoint("teacher"),
                                   st.student.to_checkpoint("student"), o.rl.prompts.input.to_checkpoint()};
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    const fs::path a = dir / ("c" + std::to_string(i) + "a.ckpt"), b = dir / ("c" + std::to_string(i) + "b.ckpt");
    save_checkpoint(ckpts[i], a);
    Checkpoint back = load_checkpoint(a);
    for (std::size_t j = 0; j < ckpts[i].tensors.size(); ++j) {
      const auto& x = ckpts[i].tensors[j].second;
      const auto& y = back.tensors[j].second;
      ok &= x.rows() == y.rows() && x.cols() == y.cols() && (x.array() == y.array()).all();
    }
    save_checkpoint(back, b);
    ok &= file_hash(a) == file_hash(b);
  }
  TinyLm lm2 = TinyLm::from_checkpoint(load_checkpoint(dir / "c0a.ckpt"));
  ok &= lm2.to_checkpoint().tensors == shared.lm.to_checkpoint().tensors;
  Encoder s2 = Encoder::from_checkpoint(load_checkpoint(dir / "c2a.ckpt"));
  ok &= (s2.embed_all({{4, 5, 6}}).array() == st.student.embed_all({{4, 5, 6}}).array()).all();
  return ok;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small on-disk profile for the end-to-end rerun check.
RunConfig disk_profile() {
  RunConfig c = parse_config(R"(
task.words_per_group = 3
task.train_size = 60
task.dev_size = 30
task.test_size = 60
lm.layers = 1
lm.hidden = 32
pretrain.steps = 150
teacher.layers = 1
teacher.hidden = 32
teacher.steps = 60
teacher.pretrain_steps = 60
prompt.steps = 20
ppo.epochs = 3
ppo.batch_size = 16
ppo.mini_batch_size = 8
store.m = 2
store.n = 2
student.steps = 40
finetune.steps = 40
)");
  return c;
}

}  // namespace

int main() {
  std::printf("acceptance: desk profile config_hash %s\n", config_hash(RunConfig()).c_str());
  {
    Timer t;
    auto v = formula_suite();
    report("C1", "formula exactness", v, t.seconds(), kBudgetC1);
  }
  {
    Timer t;
    auto v = oracle_suite();
    report("C2", "oracle equivalence", v, t.seconds(), kBudgetC2);
  }
  {
    Timer t;
    auto v = gradient_suite();
    report("C3", "gradient checks", v, t.seconds(), kBudgetC3);
  }

  const RunConfig base;
  Timer t_shared_timer;
  log("shared: pretraining base LM and teacher");
  SharedModels shared = prepare_shared(base);
  const double t_shared = t_shared_timer.seconds();
  const TaskData& data = shared.data;
  log("shared done in " + fmt(t_shared) + " s");

  std::vector<SeedOutcome> runs;
  std::optional<TrainedStudent> first_student;
  for (std::uint64_t seed : kSeeds) {
    RunConfig c = base;
    c.seed = seed;
    SeedOutcome o;
    o.seed = seed;
    Timer t;
    o.rm.emplace(train_reward(c, data, &shared.teacher_init));
    o.t_rm = t.seconds();
    t = Timer();
    o.sft = tune_prompt_pair(c, data, shared.lm);
    o.t_sft = t.seconds();
    t = Timer();
    o.rl = rl_tune(c, data, shared.lm, o.sft, *o.rm);
    o.t_rl = t.seconds();
    t = Timer();
    o.sets = generate_store_sets(c, data, shared.lm, o.rl.prompts);
    o.t_gen = t.seconds();
    t = Timer();
    o.store.emplace(build_store(c, data, o.sets, *o.rm));
    o.t_store = t.seconds();
    t = Timer();
    TrainedStudent st = train_student(c, data, *o.store, *o.rm);
    o.retrieval = retrieval_score(c, data, st);
    o.t_ret = t.seconds();
    t = Timer();
    o.kd = head_score(data, train_kd_student(c, data, *o.store));
    o.t_kd = t.seconds();
    t = Timer();
    o.finetune = head_score(data, train_finetune_student(c, data));
    o.t_ft = t.seconds();
    if (seed == kSeeds.front()) first_student.emplace(std::move(st));
    log("seed " + std::to_string(seed) + ": retrieval " + fmt(o.retrieval) + " kd " + fmt(o.kd) + " finetune " +
        fmt(o.finetune) + " reward " + fmt(epoch_mean(o.rl.input_log, o.rl.output_log, false)) + " -> " +
        fmt(epoch_mean(o.rl.input_log, o.rl.output_log, true)) + " store " + std::to_string(o.store->records.size()));
    runs.push_back(std::move(o));
  }

  // C4
  {
    int improved = 0;
    double secs = t_shared;
    std::string per;
    for (const auto& o : runs) {
      const double first = epoch_mean(o.rl.input_log, o.rl.output_log, false);
      const double last = epoch_mean(o.rl.input_log, o.rl.output_log, true);
      improved += last > first;
      per += (per.empty() ? "" : " ") + fmt(first, 3) + "->" + fmt(last, 3);
      secs += o.t_rm + o.t_sft + o.t_rl;
    }
    report("C4", "PPO improvement",
           {improved >= kPpoSeedsNeeded, std::to_string(improved) + "/5 seeds improve (need " +
                                              std::to_string(kPpoSeedsNeeded) + "); first->last 10%: " + per},
           secs, kBudgetC4);
  }

  // C5
  {
    std::vector<double> ret, kd, ft;
    double secs = t_shared;
    for (const auto& o : runs) {
      ret.push_back(o.retrieval);
      kd.push_back(o.kd);
      ft.push_back(o.finetune);
      secs += o.t_rm + o.t_sft + o.t_rl + o.t_gen + o.t_store + o.t_ret + o.t_kd + o.t_ft;
    }
    const double r = mean(ret), k = mean(kd), f = mean(ft);
    report("C5", "variant ordering",
           {r >= k && k >= f && r - k > 0.0,
            "mean " + metric_name(data.task.spec.metric) + " Retrieval " + fmt(r) + " >= KD " + fmt(k) +
                " >= fine-tune " + fmt(f) + ", Retrieval-KD " + fmt(r - k) + " > 0 (2-layer student, " +
                std::to_string(runs.size()) + " seeds)"},
           secs, kBudgetC5);
  }

  // C6 and the w/o RL cell of C8
  std::vector<double> no_rl_retrieval;
  double t_no_rl_cells = 0.0;
  {
    std::vector<double> sb_rl, sb_no, ce_rl, ce_no;
    double secs = t_shared;
    for (int i = 0; i < kDiversitySeeds; ++i) {
      const auto& o = runs[static_cast<std::size_t>(i)];
      RunConfig c = ablated_config(base, Component::rl);
      c.seed = o.seed;
      Timer t;
      KnowledgeStore plain = build_store(c, data, generate_store_sets(c, data, shared.lm, o.sft), *o.rm);
      const double t_plain = t.seconds();
      Timer td;
      auto with_rl = diversity_accuracy_report(*o.store, *o.rm, data.task.spec);
      auto without = diversity_accuracy_report(plain, *o.rm, data.task.spec);
      secs += o.t_rm + o.t_sft + o.t_rl + o.t_gen + o.t_store + t_plain + td.seconds();
      sb_rl.push_back(with_rl.self_bleu);
      sb_no.push_back(without.self_bleu);
      ce_rl.push_back(with_rl.cross_entropy);
      ce_no.push_back(without.cross_entropy);
      auto ev = eval_store(c, data, plain, *o.rm, false);
      no_rl_retrieval.push_back(ev.retrieval);
      t_no_rl_cells += t_plain + ev.t_ret;
      log("seed " + std::to_string(o.seed) + ": self-BLEU " + fmt(with_rl.self_bleu) + " vs " + fmt(without.self_bleu) +
          ", cross-entropy " + fmt(with_rl.cross_entropy) + " vs " + fmt(without.cross_entropy) + ", w/o RL retrieval " +
          fmt(ev.retrieval));
    }
    const double a = mean(sb_rl), b = mean(sb_no), x = mean(ce_rl), y = mean(ce_no);
    report("C6", "diversity and accuracy with RL",
           {a < b && x < y, "mean Self-BLEU " + fmt(a) + " < " + fmt(b) + " and cross-entropy " + fmt(x) + " < " + fmt(y) +
                                " (with vs without RL, " + std::to_string(kDiversitySeeds) + " seeds)"},
           secs, kBudgetC6);
  }

  // C7
  {
    std::vector<double> adv(kMs.size(), 0.0);
    double secs = t_shared;
    for (int i = 0; i < kGrowthSeeds; ++i) {
      const auto& o = runs[static_cast<std::size_t>(i)];
      RunConfig c = base;
      c.seed = o.seed;
      secs += o.t_rm + o.t_sft + o.t_rl + o.t_gen;
      for (std::size_t j = 0; j < kMs.size(); ++j) {
        double r = o.retrieval, k = o.kd;
        if (kMs[j] == c.store.m) {
          secs += o.t_store + o.t_ret + o.t_kd;
        } else {
          Timer t;
          KnowledgeStore s = build_store(c, data, o.sets.first_repetitions(kMs[j]), *o.rm);
          auto ev = eval_store(c, data, s, *o.rm, true);
          secs += t.seconds();
          r = ev.retrieval;
          k = ev.kd;
        }
        adv[j] += (r - k) / kGrowthSeeds;
      }
    }
    std::size_t peak = 0;
    for (std::size_t j = 1; j < adv.size(); ++j) {
      if (adv[j] > adv[peak]) peak = j;
    }
    bool ok = true;
    for (std::size_t j = 1; j <= peak; ++j) ok &= adv[j] >= adv[j - 1];
    for (std::size_t j = peak + 1; j < adv.size(); ++j) ok &= adv[j] >= adv[peak] - kPlateauTol;
    std::string detail = "mean Retrieval-KD by m:";
    for (std::size_t j = 0; j < kMs.size(); ++j) detail += " m=" + std::to_string(kMs[j]) + ":" + fmt(adv[j], 3);
    detail += " (non-decreasing to the peak at m=" + std::to_string(kMs[peak]) + ", plateau tol " + fmt(kPlateauTol) + ")";
    report("C7", "advantage growth with m", {ok, detail}, secs, kBudgetC7);
  }

  // C8
  {
    std::vector<double> full;
    double secs = t_shared + t_no_rl_cells;
    for (int i = 0; i < kAblationSeeds; ++i) {
      const auto& o = runs[static_cast<std::size_t>(i)];
      full.push_back(o.retrieval);
      secs += o.t_rm + o.t_sft + o.t_rl + o.t_gen + o.t_store + o.t_ret;
    }
    const double f = mean(full);
    const double no_rl = mean({no_rl_retrieval.begin(), no_rl_retrieval.begin() + kAblationSeeds});
    bool ok = no_rl <= f;
    std::string detail = "mean Retrieval full " + fmt(f) + "; w/o RL " + fmt(no_rl);
    for (Component comp : {Component::r_accuracy, Component::r_diversity, Component::brevity}) {
      std::vector<double> vals;
      for (int i = 0; i < kAblationSeeds; ++i) {
        const auto& o = runs[static_cast<std::size_t>(i)];
        RunConfig c = ablated_config(base, comp);
        c.seed = o.seed;
        Timer t;
        RlOutcome rl = rl_tune(c, data, shared.lm, o.sft, *o.rm);
        KnowledgeStore s = build_store(c, data, generate_store_sets(c, data, shared.lm, rl.prompts), *o.rm);
        vals.push_back(eval_store(c, data, s, *o.rm, false).retrieval);
        secs += t.seconds();
        log("seed " + std::to_string(o.seed) + " w/o " + component_name(comp) + ": retrieval " + fmt(vals.back()));
      }
      ok &= mean(vals) <= f;
      detail += "; w/o " + component_name(comp) + " " + fmt(mean(vals));
    }
    report("C8", "ablation direction", {ok, detail + " (each <= full, " + std::to_string(kAblationSeeds) + " seeds)"}, secs,
           kBudgetC8);
  }

  // C9
  {
    Timer t;
    const fs::path dir = fs::temp_directory_path() / "retrikt_acceptance";
    fs::remove_all(dir);
    const bool roundtrip = bit_exact_roundtrips(runs.front(), shared, *first_student, dir / "roundtrip");

    RunConfig c = base;
    c.seed = runs.front().seed;
    SeedRun again = run_seed(c, shared);
    write_run_metrics(again.metrics, dir / "again.csv");
    SeedRun again2 = run_seed(c, shared);
    write_run_metrics(again2.metrics, dir / "again2.csv");
    const bool in_memory = slurp(dir / "again.csv") == slurp(dir / "again2.csv") &&
                           again.metrics.value("main", kVariantRetrieval, "accuracy") == runs.front().retrieval;

    const RunConfig disk = disk_profile();
    for (const char* run : {"first", "second"}) {
      for (Stage s : all_stages()) {
        if (s == Stage::report) break;
        run_stage(disk, s, dir / run / "seed1");
      }
      run_stage(disk, Stage::report, dir / run);
    }
    bool on_disk = true;
    for (const char* f : {artifacts::kReportText, artifacts::kReportCsv}) {
      on_disk &= slurp(dir / "first" / f) == slurp(dir / "second" / f) && !slurp(dir / "first" / f).empty();
    }
    for (const char* f : {artifacts::kMetrics, artifacts::kStore, artifacts::kKeyedStore, artifacts::kStudent}) {
      on_disk &= slurp(dir / "first" / "seed1" / f) == slurp(dir / "second" / "seed1" / f);
    }
    report("C9", "engineering",
           {roundtrip && in_memory && on_disk,
            std::string("store/checkpoint round trips ") + (roundtrip ? "bit-exact" : "differ") +
                ", desk-profile rerun metrics " + (in_memory ? "identical" : "differ") + ", on-disk pipeline reports " +
                (on_disk ? "byte-identical" : "differ")},
           t.seconds(), 0.0);
  }

  std::printf("acceptance: %d failing criteria\n", failures);
  return failures == 0 ? 0 : 1;
}
