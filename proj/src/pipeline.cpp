#include "retrikt/pipeline.hpp"

#include "retrikt/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

namespace retrikt {

namespace fs = std::filesystem;

// ---- configuration ---------------------------------------------------------

RunConfig::RunConfig() {
  task.words_per_group = 5;
  ppo.lr = 1e-2;
  ppo.batch_size = 64;
  ppo.epochs = 40;
  ppo.beta = 0.1;
  ppo.max_new = 40;
  ppo.reward.l_min = 5;
}

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid configuration: " + what);
  };
  check(task.num_classes >= 2, "task.num_classes must be at least 2");
  check(task.train_size > 0 && task.dev_size > 0 && task.test_size > 0, "task split sizes must be positive");
  check(task.words_per_group > 0, "task.words_per_group must be positive");
  check(task.min_fillers >= 0 && task.max_fillers >= task.min_fillers, "task filler range is empty");
  try {
    LmConfig l = lm;
    l.vocab_size = 1;
    l.validate();
    EncoderConfig t = teacher;
    t.vocab_size = 1;
    t.validate();
    EncoderConfig s = student;
    s.vocab_size = 1;
    s.validate();
    ppo.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  check(pretrain.steps >= 0 && pretrain.batch_size > 0 && pretrain_corpus > 0, "pretrain settings");
  check(pretrain_noise >= 0.0 && pretrain_noise <= 1.0, "pretrain.label_noise outside [0, 1]");
  check(teacher_pretrain_steps >= 0 && teacher_pretrain_corpus > 0, "teacher pretraining settings");
  check(teacher_pretrain_noise >= 0.0 && teacher_pretrain_noise <= 1.0, "teacher.pretrain_label_noise outside [0, 1]");
  check(teacher_train.steps >= 0 && teacher_train.batch_size > 0 && teacher_train.eval_every > 0, "teacher training");
  check(prompt.steps >= 0 && prompt.batch_size > 0 && prompt.prompt_length > 0, "prompt settings");
  check(store.m >= 1 && store.n >= 1, "store.m and store.n must be at least 1");
  check(store.top_p > 0.0 && store.top_p <= 1.0, "store.top_p outside (0, 1]");
  check(store.max_new > 0, "store.max_new must be positive");
  check(student_train.steps >= 0 && student_train.batch_size >= 2 && student_train.eval_every > 0, "student training");
  check(student_train.tau_teacher > 0.0 && student_train.tau_student > 0.0 && student_train.kd_temperature > 0.0,
        "temperatures must be positive");
  check(retrieval_k >= 1, "student.k must be at least 1");
  check(finetune.steps >= 0 && finetune.batch_size > 0 && finetune.eval_every > 0, "finetune settings");
}

namespace {

struct ConfigEntry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

template <typename F>
ConfigEntry int_entry(std::string key, F field) {
  return {key, [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); },
          [field, key](RunConfig& c, const std::string& v) { field(c) = parse_number<int>(key, v); }};
}

template <typename F>
ConfigEntry u64_entry(std::string key, F field) {
  return {key, [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); },
          [field, key](RunConfig& c, const std::string& v) { field(c) = parse_number<std::uint64_t>(key, v); }};
}

template <typename F>
ConfigEntry double_entry(std::string key, F field) {
  return {key, [field](const RunConfig& c) { return format_double(field(const_cast<RunConfig&>(c))); },
          [field, key](RunConfig& c, const std::string& v) { field(c) = parse_number<double>(key, v); }};
}

template <typename F>
ConfigEntry bool_entry(std::string key, F field) {
  return {key, [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [field, key](RunConfig& c, const std::string& v) { field(c) = parse_bool(key, v); }};
}

#define RK_FIELD(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<ConfigEntry>& registry() {
  static const std::vector<ConfigEntry> entries = [] {
    std::vector<ConfigEntry> e;
    e.push_back(u64_entry("task.seed", RK_FIELD(task_seed)));
    e.push_back({"task.rule",
                 [](const RunConfig& c) { return std::string(c.task.rule == SyntheticRule::marker ? "marker" : "pairwise"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "marker") c.task.rule = SyntheticRule::marker;
                   else if (v == "pairwise") c.task.rule = SyntheticRule::pairwise;
                   else throw ConfigError("config key 'task.rule': expected marker or pairwise, got '" + v + "'");
                 }});
    e.push_back(int_entry("task.num_classes", RK_FIELD(task.num_classes)));
    e.push_back(int_entry("task.train_size", RK_FIELD(task.train_size)));
    e.push_back(int_entry("task.dev_size", RK_FIELD(task.dev_size)));
    e.push_back(int_entry("task.test_size", RK_FIELD(task.test_size)));
    e.push_back(int_entry("task.words_per_group", RK_FIELD(task.words_per_group)));
    e.push_back(int_entry("task.neutral_words", RK_FIELD(task.neutral_words)));
    e.push_back(int_entry("task.max_neutral_in_text", RK_FIELD(task.max_neutral_in_text)));
    e.push_back(int_entry("task.min_fillers", RK_FIELD(task.min_fillers)));
    e.push_back(int_entry("task.max_fillers", RK_FIELD(task.max_fillers)));
    e.push_back(u64_entry("task.lexicon_seed", RK_FIELD(task.lexicon_seed)));

    e.push_back(int_entry("lm.layers", RK_FIELD(lm.num_layers)));
    e.push_back(int_entry("lm.hidden", RK_FIELD(lm.hidden_dim)));
    e.push_back(int_entry("lm.heads", RK_FIELD(lm.num_heads)));
    e.push_back(int_entry("lm.max_seq_len", RK_FIELD(lm.max_seq_len)));
    e.push_back(int_entry("lm.ff_mult", RK_FIELD(lm.ff_mult)));

    e.push_back(int_entry("pretrain.steps", RK_FIELD(pretrain.steps)));
    e.push_back(double_entry("pretrain.lr", RK_FIELD(pretrain.lr)));
    e.push_back(int_entry("pretrain.batch_size", RK_FIELD(pretrain.batch_size)));
    e.push_back(int_entry("pretrain.corpus_size", RK_FIELD(pretrain_corpus)));
    e.push_back(double_entry("pretrain.label_noise", RK_FIELD(pretrain_noise)));
    e.push_back(u64_entry("pretrain.seed", RK_FIELD(pretrain_seed)));

    e.push_back(int_entry("teacher.layers", RK_FIELD(teacher.num_layers)));
    e.push_back(int_entry("teacher.hidden", RK_FIELD(teacher.hidden_dim)));
    e.push_back(int_entry("teacher.heads", RK_FIELD(teacher.num_heads)));
    e.push_back(int_entry("teacher.max_seq_len", RK_FIELD(teacher.max_seq_len)));
    e.push_back(int_entry("teacher.steps", RK_FIELD(teacher_train.steps)));
    e.push_back(double_entry("teacher.lr", RK_FIELD(teacher_train.lr)));
    e.push_back(int_entry("teacher.batch_size", RK_FIELD(teacher_train.batch_size)));
    e.push_back(int_entry("teacher.eval_every", RK_FIELD(teacher_train.eval_every)));
    e.push_back(int_entry("teacher.pretrain_steps", RK_FIELD(teacher_pretrain_steps)));
    e.push_back(int_entry("teacher.pretrain_corpus_size", RK_FIELD(teacher_pretrain_corpus)));
    e.push_back(double_entry("teacher.pretrain_label_noise", RK_FIELD(teacher_pretrain_noise)));
    e.push_back(double_entry("teacher.pretrain_lr", RK_FIELD(teacher_pretrain_lr)));
    e.push_back(u64_entry("teacher.pretrain_seed", RK_FIELD(teacher_pretrain_seed)));

    e.push_back(int_entry("prompt.length", RK_FIELD(prompt.prompt_length)));
    e.push_back(int_entry("prompt.steps", RK_FIELD(prompt.steps)));
    e.push_back(double_entry("prompt.lr", RK_FIELD(prompt.lr)));
    e.push_back(int_entry("prompt.batch_size", RK_FIELD(prompt.batch_size)));
    e.push_back(double_entry("prompt.init_std", RK_FIELD(prompt.init_std)));

    e.push_back(bool_entry("rl.enabled", RK_FIELD(rl_enabled)));
    e.push_back(double_entry("ppo.lr", RK_FIELD(ppo.lr)));
    e.push_back(int_entry("ppo.batch_size", RK_FIELD(ppo.batch_size)));
    e.push_back(int_entry("ppo.mini_batch_size", RK_FIELD(ppo.mini_batch_size)));
    e.push_back(int_entry("ppo.epochs", RK_FIELD(ppo.epochs)));
    e.push_back(int_entry("ppo.ppo_epochs", RK_FIELD(ppo.ppo_epochs)));
    e.push_back(int_entry("ppo.samples_per_prompt", RK_FIELD(ppo.samples_per_prompt)));
    e.push_back(double_entry("ppo.init_kl_coeff", RK_FIELD(ppo.init_kl_coeff)));
    e.push_back(double_entry("ppo.target_kl", RK_FIELD(ppo.target_kl)));
    e.push_back(double_entry("ppo.kl_horizon", RK_FIELD(ppo.kl_horizon)));
    e.push_back(double_entry("ppo.vf_coeff", RK_FIELD(ppo.vf_coeff)));
    e.push_back(double_entry("ppo.clip_ratio", RK_FIELD(ppo.clip_ratio)));
    e.push_back(double_entry("ppo.gamma", RK_FIELD(ppo.gamma)));
    e.push_back(double_entry("ppo.lambda", RK_FIELD(ppo.lambda)));
    e.push_back(double_entry("ppo.beta", RK_FIELD(ppo.beta)));
    e.push_back(int_entry("ppo.sft_batch_size", RK_FIELD(ppo.sft_batch_size)));
    e.push_back(double_entry("ppo.top_p", RK_FIELD(ppo.top_p)));
    e.push_back(int_entry("ppo.max_new", RK_FIELD(ppo.max_new)));
    e.push_back(double_entry("reward.alpha", RK_FIELD(ppo.reward.alpha)));
    e.push_back(int_entry("reward.l_min", RK_FIELD(ppo.reward.l_min)));
    e.push_back(bool_entry("reward.use_accuracy", RK_FIELD(ppo.reward.use_accuracy)));
    e.push_back(bool_entry("reward.use_diversity", RK_FIELD(ppo.reward.use_diversity)));
    e.push_back(bool_entry("reward.use_brevity", RK_FIELD(ppo.reward.use_brevity)));

    e.push_back(int_entry("store.m", RK_FIELD(store.m)));
    e.push_back(int_entry("store.n", RK_FIELD(store.n)));
    e.push_back(double_entry("store.top_p", RK_FIELD(store.top_p)));
    e.push_back(int_entry("store.max_new", RK_FIELD(store.max_new)));

    e.push_back(int_entry("student.layers", RK_FIELD(student.num_layers)));
    e.push_back(int_entry("student.hidden", RK_FIELD(student.hidden_dim)));
    e.push_back(int_entry("student.heads", RK_FIELD(student.num_heads)));
    e.push_back(int_entry("student.max_seq_len", RK_FIELD(student.max_seq_len)));
    e.push_back(int_entry("student.steps", RK_FIELD(student_train.steps)));
    e.push_back(double_entry("student.lr", RK_FIELD(student_train.lr)));
    e.push_back(int_entry("student.batch_size", RK_FIELD(student_train.batch_size)));
    e.push_back(double_entry("student.tau_teacher", RK_FIELD(student_train.tau_teacher)));
    e.push_back(double_entry("student.tau_student", RK_FIELD(student_train.tau_student)));
    e.push_back(double_entry("student.kd_temperature", RK_FIELD(student_train.kd_temperature)));
    e.push_back(int_entry("student.eval_every", RK_FIELD(student_train.eval_every)));
    e.push_back(int_entry("student.k", RK_FIELD(retrieval_k)));

    e.push_back(int_entry("finetune.steps", RK_FIELD(finetune.steps)));
    e.push_back(double_entry("finetune.lr", RK_FIELD(finetune.lr)));
    e.push_back(int_entry("finetune.batch_size", RK_FIELD(finetune.batch_size)));
    e.push_back(int_entry("finetune.eval_every", RK_FIELD(finetune.eval_every)));

    e.push_back(u64_entry("run.seed", RK_FIELD(seed)));
    return e;
  }();
  return entries;
}

#undef RK_FIELD

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& e : registry()) out.push_back(e.key);
  return out;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& e : registry()) {
    if (e.key == key) {
      e.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& e : registry()) out += e.key + " = " + e.get(config) + "\n";
  return out;
}

std::string config_hash(const RunConfig& config) { return hex64(fnv1a64(serialize_config(config))); }

// ---- stages and seeds ------------------------------------------------------

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s = {Stage::prepare_data, Stage::pretrain_lm,   Stage::train_reward,
                                       Stage::tune_prompts, Stage::rl_tune,       Stage::build_store,
                                       Stage::train_student, Stage::train_kd_baseline, Stage::evaluate,
                                       Stage::report};
  return s;
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::prepare_data: return "prepare-data";
    case Stage::pretrain_lm: return "pretrain-lm";
    case Stage::train_reward: return "train-reward";
    case Stage::tune_prompts: return "tune-prompts";
    case Stage::rl_tune: return "rl-tune";
    case Stage::build_store: return "build-store";
    case Stage::train_student: return "train-student";
    case Stage::train_kd_baseline: return "train-kd-baseline";
    case Stage::evaluate: return "evaluate";
    case Stage::report: return "report";
  }
  throw std::invalid_argument("invalid stage");
}

Stage parse_stage(const std::string& s) {
  for (Stage st : all_stages()) {
    if (stage_name(st) == s) return st;
  }
  throw std::invalid_argument("unknown stage '" + s + "'");
}

std::uint64_t stage_seed(std::uint64_t run_seed, Stage stage) {
  std::uint64_t z = run_seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(stage) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- in-memory steps -------------------------------------------------------

TaskData prepare_task(const RunConfig& config) {
  TaskData d{make_synthetic_task(config.task_seed, config.task), Vocabulary(), load_stopwords(default_stopwords_path())};
  attach_keywords(d.task.train, d.stopwords);
  attach_keywords(d.task.dev, d.stopwords);
  attach_keywords(d.task.test, d.stopwords);
  d.vocab = task_vocabulary(synthetic_vocabulary(config.task), d.task.spec);
  return d;
}

namespace {

LmConfig lm_config(const RunConfig& config, const TaskData& data) {
  LmConfig c = config.lm;
  c.vocab_size = data.vocab.size();
  return c;
}

EncoderConfig teacher_config(const RunConfig& config, const TaskData& data) {
  EncoderConfig c = config.teacher;
  c.vocab_size = data.vocab.size();
  c.num_classes = data.task.spec.num_classes();
  return c;
}

EncoderConfig student_config(const RunConfig& config, const TaskData& data, bool with_head) {
  EncoderConfig c = config.student;
  c.vocab_size = data.vocab.size();
  c.num_classes = with_head ? data.task.spec.num_classes() : 0;
  return c;
}

std::vector<std::string> texts_of(const std::vector<LabeledSample>& samples) {
  std::vector<std::string> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.text);
  return out;
}

}  // namespace

TinyLm pretrain_lm(const RunConfig& config, const TaskData& data) {
  TinyLm lm(lm_config(config, data), config.pretrain_seed);
  auto corpus = pretraining_corpus(config.task, config.pretrain_corpus, config.pretrain_noise, data.vocab,
                                   data.stopwords, config.pretrain_seed);
  pretrain_base_lm(lm, corpus, config.pretrain, config.pretrain_seed + 1);
  return lm;
}

Encoder pretrain_teacher(const RunConfig& config, const TaskData& data) {
  auto noisy = noisy_task_samples(config.task, config.teacher_pretrain_corpus, config.teacher_pretrain_noise,
                                  data.stopwords, config.teacher_pretrain_seed);
  ClassifierTrainConfig tc{.steps = config.teacher_pretrain_steps, .lr = config.teacher_pretrain_lr,
                           .batch_size = config.teacher_train.batch_size, .eval_every = config.teacher_train.eval_every};
  return train_classifier(noisy, {}, teacher_config(config, data), data.vocab, tc, config.teacher_pretrain_seed + 1)
      .encoder();
}

RewardModel train_reward(const RunConfig& config, const TaskData& data, const Encoder* pretrained,
                         ClassifierReport* report) {
  return train_classifier(data.task.train, data.task.dev, teacher_config(config, data), data.vocab,
                          config.teacher_train, stage_seed(config.seed, Stage::train_reward), report, pretrained);
}

PromptPair tune_prompt_pair(const RunConfig& config, const TaskData& data, const TinyLm& lm) {
  const std::uint64_t s = stage_seed(config.seed, Stage::tune_prompts);
  auto si = build_generation_samples(data.task.train, View::input_view, data.vocab);
  auto so = build_generation_samples(data.task.train, View::output_view, data.vocab);
  return {tune_prompts(lm, si, View::input_view, config.prompt, s),
          tune_prompts(lm, so, View::output_view, config.prompt, s + 1)};
}

RlOutcome rl_tune(const RunConfig& config, const TaskData& data, const TinyLm& lm, const PromptPair& sft,
                  const RewardModel& rm) {
  if (!config.rl_enabled) return {{sft.input.clone(), sft.output.clone()}, {}, {}};
  const std::uint64_t s = stage_seed(config.seed, Stage::rl_tune);
  auto si = build_generation_samples(data.task.train, View::input_view, data.vocab);
  auto so = build_generation_samples(data.task.train, View::output_view, data.vocab);
  auto ri = rl_finetune_prompts(lm, sft.input, data.task.train, si, rm, data.vocab, data.task.spec, config.ppo, s);
  auto ro = rl_finetune_prompts(lm, sft.output, data.task.train, so, rm, data.vocab, data.task.spec, config.ppo, s + 1);
  return {{ri.prompt, ro.prompt}, ri.log, ro.log};
}

GenerationSets generate_store_sets(const RunConfig& config, const TaskData& data, const TinyLm& lm,
                                   const PromptPair& prompts) {
  return generate_sets(data.task.train, lm, prompts.input, prompts.output, data.vocab, data.task.spec, data.stopwords,
                       config.store, stage_seed(config.seed, Stage::build_store));
}

KnowledgeStore build_store(const RunConfig& config, const TaskData& data, const GenerationSets& sets,
                           const RewardModel& rm) {
  KnowledgeStore store = assemble_store(data.task.train, sets, rm, data.task.spec);
  store.manifest["config_hash"] = config_hash(config);
  store.manifest["m"] = std::to_string(sets.m);
  store.manifest["n"] = std::to_string(sets.n);
  store.manifest["attempts"] = std::to_string(sets.total_attempts());
  store.manifest["dropped"] = std::to_string(sets.dropped());
  return store;
}

std::vector<std::string> store_texts(const KnowledgeStore& store) {
  std::vector<std::string> out;
  out.reserve(store.records.size());
  for (const auto& r : store.records) out.push_back(r.text);
  return out;
}

std::vector<int> retrieval_predictions(const RunConfig& config, const TaskData& data, const TrainedStudent& student,
                                       const std::vector<LabeledSample>& samples) {
  std::vector<int> out;
  for (const auto& r : predict_retrieval_all(student.student, data.vocab, texts_of(samples), student.keyed_store,
                                             config.retrieval_k)) {
    out.push_back(r.predicted_class);
  }
  return out;
}

double retrieval_score(const RunConfig& config, const TaskData& data, const TrainedStudent& student) {
  return evaluate(data.task.test, retrieval_predictions(config, data, student, data.task.test), data.task.spec.metric,
                  data.task.spec.num_classes());
}

double head_score(const TaskData& data, const Encoder& student) {
  return evaluate(data.task.test, predict_head(student, data.vocab, texts_of(data.task.test)), data.task.spec.metric,
                  data.task.spec.num_classes());
}

TrainedStudent train_student(const RunConfig& config, const TaskData& data, const KnowledgeStore& store,
                             const RewardModel& rm) {
  const std::uint64_t s = stage_seed(config.seed, Stage::train_student);
  auto texts = store_texts(store);
  nn::Matrix teacher_emb = rm.embed_all(texts);
  TrainedStudent out{Encoder(student_config(config, data, false), s), store, {}};
  const auto dev_texts = texts_of(data.task.dev);
  DevScore dev = [&](const Encoder& e) {
    KnowledgeStore keyed = store;
    rebuild_keys(keyed, e, data.vocab);
    std::vector<int> pred;
    for (const auto& r : predict_retrieval_all(e, data.vocab, dev_texts, keyed, config.retrieval_k)) {
      pred.push_back(r.predicted_class);
    }
    return evaluate(data.task.dev, pred, data.task.spec.metric, data.task.spec.num_classes());
  };
  train_retrieval_student(out.student, texts, teacher_emb, data.vocab, config.student_train, s + 1, dev, &out.report);
  rebuild_keys(out.keyed_store, out.student, data.vocab);
  return out;
}

Encoder train_kd_student(const RunConfig& config, const TaskData& data, const KnowledgeStore& store,
                         StudentReport* report) {
  const std::uint64_t s = stage_seed(config.seed, Stage::train_kd_baseline);
  Encoder student(student_config(config, data, true), s);
  nn::Matrix probs(static_cast<Eigen::Index>(store.records.size()), store.num_classes);
  for (std::size_t i = 0; i < store.records.size(); ++i) {
    probs.row(static_cast<Eigen::Index>(i)) = store.records[i].value.transpose();
  }
  const auto dev_texts = texts_of(data.task.dev);
  DevScore dev = [&](const Encoder& e) {
    return evaluate(data.task.dev, predict_head(e, data.vocab, dev_texts), data.task.spec.metric,
                    data.task.spec.num_classes());
  };
  train_kd_baseline(student, store_texts(store), probs, data.vocab, config.student_train, s + 1, dev, report);
  return student;
}

Encoder train_finetune_student(const RunConfig& config, const TaskData& data, ClassifierReport* report) {
  const std::uint64_t s = stage_seed(config.seed, Stage::train_kd_baseline) + 2;
  return train_classifier(data.task.train, data.task.dev, student_config(config, data, true), data.vocab,
                          config.finetune, s, report)
      .encoder();
}

DiversityAccuracy diversity_accuracy_report(const KnowledgeStore& store, const RewardModel& rm, const TaskSpec& spec,
                                            int cap, std::uint64_t sample_seed) {
  if (cap < 2) throw std::invalid_argument("diversity_accuracy_report: cap must be at least 2");
  std::vector<std::string> texts;
  std::vector<int> labels;
  for (const auto& r : store.records) {
    if (r.provenance == Provenance::original) continue;
    int c = spec.label_id(r.label_text);
    if (c < 0) throw std::invalid_argument("diversity_accuracy_report: unknown label '" + r.label_text + "'");
    texts.push_back(r.text);
    labels.push_back(c);
  }
  if (texts.empty()) throw std::invalid_argument("diversity_accuracy_report: store has no generated records");
  if (texts.size() < 2) throw std::invalid_argument("diversity_accuracy_report: Self-BLEU needs two generated records");

  DiversityAccuracy out;
  out.generated = static_cast<int>(texts.size());
  nn::Matrix probs = rm.predict_all(texts);
  double ce = 0.0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    ce -= std::log(std::max(probs(static_cast<Eigen::Index>(i), labels[i]), kKlFloor));
  }
  out.cross_entropy = ce / static_cast<double>(texts.size());

  std::vector<std::size_t> idx(texts.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > static_cast<std::size_t>(cap)) {
    std::mt19937_64 rng(sample_seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(cap));
    std::sort(idx.begin(), idx.end());
  }
  std::vector<TokenSeq> toks;
  for (auto i : idx) toks.push_back(tokenize(texts[i]));
  double total = 0.0;
  std::vector<TokenSeq> refs;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    refs.clear();
    for (std::size_t j = 0; j < toks.size(); ++j) {
      if (j != i) refs.push_back(toks[j]);
    }
    total += self_bleu3(toks[i], refs);
  }
  out.self_bleu_sample = static_cast<int>(toks.size());
  out.self_bleu = total / static_cast<double>(toks.size());
  return out;
}

// ---- reports ---------------------------------------------------------------

double MetricRow::mean() const {
  if (per_seed.empty()) throw std::logic_error("MetricRow '" + name + "' has no values");
  double s = 0.0;
  for (const auto& [label, v] : per_seed) s += v;
  return s / static_cast<double>(per_seed.size());
}

const MetricRow* ExperimentReport::find(const std::string& section, const std::string& name,
                                        const std::string& metric) const {
  for (const auto& r : rows) {
    if (r.section == section && r.name == name && r.metric == metric) return &r;
  }
  return nullptr;
}

double RunMetrics::value(const std::string& section, const std::string& name, const std::string& metric) const {
  for (const auto& e : entries) {
    if (e.section == section && e.name == name && e.metric == metric) return e.value;
  }
  throw std::out_of_range("no metric " + section + "/" + name + "/" + metric);
}

namespace {

const char* direction(bool higher) { return higher ? "higher" : "lower"; }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(line);
  while (std::getline(is, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void check_csv_field(const std::string& s) {
  if (s.find_first_of(",\n") != std::string::npos) throw std::invalid_argument("metric field '" + s + "' contains a comma");
}

}  // namespace

void write_run_metrics(const RunMetrics& metrics, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# config_hash " << metrics.config_hash << "\n";
  out << "section,name,metric,direction,value\n";
  for (const auto& e : metrics.entries) {
    for (const auto* f : {&e.section, &e.name, &e.metric}) check_csv_field(*f);
    out << e.section << ',' << e.name << ',' << e.metric << ',' << direction(e.higher_is_better) << ','
        << format_double(e.value) << '\n';
  }
}

RunMetrics read_run_metrics(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  RunMetrics m;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      const std::string prefix = "# config_hash ";
      if (line.rfind(prefix, 0) != 0) fail("missing config hash line");
      m.config_hash = line.substr(prefix.size());
      continue;
    }
    if (lineno == 2) {
      if (line != "section,name,metric,direction,value") fail("unexpected header");
      continue;
    }
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != 5) fail("expected 5 fields");
    if (f[3] != "higher" && f[3] != "lower") fail("direction must be higher or lower");
    double v = 0.0;
    try {
      v = parse_number<double>("value", f[4]);
    } catch (const ConfigError&) {
      fail("bad value '" + f[4] + "'");
    }
    m.entries.push_back({f[0], f[1], f[2], f[3] == "higher", v});
  }
  if (lineno < 2) fail("truncated metrics file");
  return m;
}

ExperimentReport aggregate_runs(const std::string& title, const std::vector<std::pair<std::string, RunMetrics>>& runs) {
  ExperimentReport rep;
  rep.title = title;
  for (const auto& [label, metrics] : runs) {
    for (const auto& e : metrics.entries) {
      auto it = std::find_if(rep.rows.begin(), rep.rows.end(), [&](const MetricRow& r) {
        return r.section == e.section && r.name == e.name && r.metric == e.metric;
      });
      if (it == rep.rows.end()) {
        rep.rows.push_back({e.section, e.name, e.metric, e.higher_is_better, {}});
        it = rep.rows.end() - 1;
      } else if (it->higher_is_better != e.higher_is_better) {
        throw std::invalid_argument("aggregate_runs: direction of " + e.name + "/" + e.metric + " differs across runs");
      }
      it->per_seed.emplace_back(label, e.value);
    }
  }
  return rep;
}

namespace {

std::vector<std::string> run_labels(const ExperimentReport& report) {
  std::vector<std::string> labels;
  for (const auto& r : report.rows) {
    for (const auto& [label, v] : r.per_seed) {
      if (std::find(labels.begin(), labels.end(), label) == labels.end()) labels.push_back(label);
    }
  }
  return labels;
}

std::optional<double> value_for(const MetricRow& row, const std::string& label) {
  for (const auto& [l, v] : row.per_seed) {
    if (l == label) return v;
  }
  return std::nullopt;
}

}  // namespace

std::string format_report_table(const ExperimentReport& report) {
  const auto labels = run_labels(report);
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"section", "name", "metric", "better", "mean"};
  for (const auto& l : labels) header.push_back(l);
  cells.push_back(header);
  char buf[64];
  for (const auto& r : report.rows) {
    std::vector<std::string> row = {r.section, r.name, r.metric, r.higher_is_better ? "higher" : "lower"};
    std::snprintf(buf, sizeof buf, "%.4f", r.mean());
    row.emplace_back(buf);
    for (const auto& l : labels) {
      if (auto v = value_for(r, l)) {
        std::snprintf(buf, sizeof buf, "%.4f", *v);
        row.emplace_back(buf);
      } else {
        row.emplace_back("-");
      }
    }
    cells.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out = report.title + "\n";
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const bool numeric = c >= 4;
      std::string pad(width[c] - row[c].size(), ' ');
      line += (c ? "  " : "") + (numeric ? pad + row[c] : row[c] + pad);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

std::string format_report_csv(const ExperimentReport& report) {
  const auto labels = run_labels(report);
  std::string out = "section,name,metric,direction,mean";
  for (const auto& l : labels) out += "," + l;
  out += "\n";
  for (const auto& r : report.rows) {
    out += r.section + "," + r.name + "," + r.metric + "," + direction(r.higher_is_better) + "," + format_double(r.mean());
    for (const auto& l : labels) {
      auto v = value_for(r, l);
      out += "," + (v ? format_double(*v) : std::string());
    }
    out += "\n";
  }
  return out;
}

// ---- ablations -------------------------------------------------------------

std::string component_name(Component c) {
  switch (c) {
    case Component::rl: return "RL";
    case Component::r_accuracy: return "R_accuracy";
    case Component::r_diversity: return "R_diversity";
    case Component::brevity: return "BP";
  }
  throw std::invalid_argument("invalid component");
}

Component parse_component(const std::string& s) {
  for (Component c : {Component::rl, Component::r_accuracy, Component::r_diversity, Component::brevity}) {
    if (component_name(c) == s) return c;
  }
  throw std::invalid_argument("unknown ablation component '" + s + "' (expected RL, R_accuracy, R_diversity or BP)");
}

RunConfig ablated_config(const RunConfig& base, Component c) {
  RunConfig out = base;
  switch (c) {
    case Component::rl: out.rl_enabled = false; break;
    case Component::r_accuracy: out.ppo.reward.use_accuracy = false; break;
    case Component::r_diversity: out.ppo.reward.use_diversity = false; break;
    case Component::brevity: out.ppo.reward.use_brevity = false; break;
  }
  return out;
}

SharedModels prepare_shared(const RunConfig& config) {
  config.validate();
  TaskData data = prepare_task(config);
  TinyLm lm = pretrain_lm(config, data);
  Encoder teacher = pretrain_teacher(config, data);
  return {std::move(data), std::move(lm), std::move(teacher)};
}

RunMetrics collect_metrics(const RunConfig& config, const TaskData& data, const RewardModel& rm,
                           const KnowledgeStore& store, const TrainedStudent& retrieval, const Encoder& kd,
                           const Encoder& finetune) {
  RunMetrics m;
  m.config_hash = config_hash(config);
  const std::string metric = metric_name(data.task.spec.metric);
  m.entries.push_back({"main", kVariantFinetune, metric, true, head_score(data, finetune)});
  m.entries.push_back({"main", kVariantKd, metric, true, head_score(data, kd)});
  m.entries.push_back({"main", kVariantRetrieval, metric, true, retrieval_score(config, data, retrieval)});
  m.entries.push_back({"teacher", "reward model",  metric, true,
                       evaluate(data.task.test, [&] {
                         std::vector<int> p;
                         nn::Matrix probs = rm.predict_all(texts_of(data.task.test));
                         for (Eigen::Index i = 0; i < probs.rows(); ++i) p.push_back(argmax_lowest(probs.row(i).transpose()));
                         return p;
                       }(), data.task.spec.metric, data.task.spec.num_classes())});
  auto da = diversity_accuracy_report(store, rm, data.task.spec);
  m.entries.push_back({"diversity", "store", "self-bleu", false, da.self_bleu});
  m.entries.push_back({"diversity", "store", "cross-entropy", false, da.cross_entropy});
  return m;
}

SeedRun run_seed(const RunConfig& config, const SharedModels& shared, bool train_students) {
  config.validate();
  const TaskData& data = shared.data;
  RewardModel rm = train_reward(config, data, &shared.teacher_init);
  PromptPair sft = tune_prompt_pair(config, data, shared.lm);
  RlOutcome rl = rl_tune(config, data, shared.lm, sft, rm);
  GenerationSets sets = generate_store_sets(config, data, shared.lm, rl.prompts);
  KnowledgeStore store = build_store(config, data, sets, rm);
  SeedRun run{std::move(rm), std::move(sft), std::move(rl), std::move(sets), std::move(store), {}, {}, {}, {}};
  if (train_students) {
    run.retrieval = train_student(config, data, run.store, run.rm);
    run.kd = train_kd_student(config, data, run.store);
    run.finetune = train_finetune_student(config, data);
    run.metrics = collect_metrics(config, data, run.rm, run.store, *run.retrieval, *run.kd, *run.finetune);
  }
  return run;
}

ExperimentReport ablation_matrix(const RunConfig& config, const std::vector<Component>& components,
                                 const std::vector<std::uint64_t>& seeds, const SharedModels* shared) {
  if (seeds.empty()) throw std::invalid_argument("ablation_matrix: no seeds");
  std::optional<SharedModels> own;
  if (!shared) {
    own.emplace(prepare_shared(config));
    shared = &*own;
  }
  const TaskData& data = shared->data;
  const std::string metric = metric_name(data.task.spec.metric);
  std::vector<std::pair<std::string, RunConfig>> cells = {{"full", config}};
  std::set<Component> seen;
  for (Component c : components) {
    if (seen.insert(c).second) cells.emplace_back("w/o " + component_name(c), ablated_config(config, c));
  }
  ExperimentReport rep;
  rep.title = "ablation";
  for (std::uint64_t seed : seeds) {
    RunConfig base = config;
    base.seed = seed;
    base.validate();
    RewardModel rm = train_reward(base, data, &shared->teacher_init);
    PromptPair sft = tune_prompt_pair(base, data, shared->lm);
    for (const auto& [name, cell_config] : cells) {
      RunConfig cfg = cell_config;
      cfg.seed = seed;
      RlOutcome rl = rl_tune(cfg, data, shared->lm, sft, rm);
      KnowledgeStore store = build_store(cfg, data, generate_store_sets(cfg, data, shared->lm, rl.prompts), rm);
      TrainedStudent ret = train_student(cfg, data, store, rm);
      Encoder kd = train_kd_student(cfg, data, store);
      const std::string label = "seed" + std::to_string(seed);
      for (const auto& [variant, value] :
           {std::pair{kVariantKd, head_score(data, kd)}, std::pair{kVariantRetrieval, retrieval_score(cfg, data, ret)}}) {
        MetricRow* row = nullptr;
        for (auto& r : rep.rows) {
          if (r.name == name && r.metric == variant + " " + metric) row = &r;
        }
        if (!row) {
          rep.rows.push_back({"ablation", name, variant + " " + metric, true, {}});
          row = &rep.rows.back();
        }
        row->per_seed.emplace_back(label, value);
      }
    }
  }
  return rep;
}

// ---- on-disk stages --------------------------------------------------------

namespace {

struct Requirement {
  const char* file;
  Stage producer;
};

void require(Stage stage, const fs::path& dir, std::initializer_list<Requirement> reqs) {
  for (const auto& r : reqs) {
    if (!fs::exists(dir / r.file)) {
      throw StageError(stage_name(stage), "missing artifact " + (dir / r.file).string() + "; run stage " +
                                              stage_name(r.producer) + " first");
    }
  }
}

constexpr Requirement kNeedData[] = {{artifacts::kTaskSpec, Stage::prepare_data},
                                     {artifacts::kTrain, Stage::prepare_data},
                                     {artifacts::kDev, Stage::prepare_data},
                                     {artifacts::kTest, Stage::prepare_data},
                                     {artifacts::kVocab, Stage::prepare_data}};

void require_data(Stage stage, const fs::path& dir) {
  for (const auto& r : kNeedData) require(stage, dir, {r});
}

TaskData load_task_data(const RunConfig& config, const fs::path& dir) {
  TaskData d;
  d.stopwords = load_stopwords(default_stopwords_path());
  d.task.spec = load_task_spec(dir / artifacts::kTaskSpec);
  d.task.train = load_dataset(dir / artifacts::kTrain, d.task.spec, d.stopwords);
  d.task.dev = load_dataset(dir / artifacts::kDev, d.task.spec, d.stopwords);
  d.task.test = load_dataset(dir / artifacts::kTest, d.task.spec, d.stopwords);
  d.vocab = Vocabulary::load(dir / artifacts::kVocab);
  (void)config;
  return d;
}

Checkpoint stamped(Checkpoint c, const RunConfig& config) {
  c.header["config_hash"] = config_hash(config);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// "<stage>.manifest": config hash, stage seed and hashes of the files read and written.
void write_manifest(const RunConfig& config, Stage stage, const fs::path& dir, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  std::string text = "stage=" + stage_name(stage) + "\nconfig_hash=" + config_hash(config) +
                     "\nseed=" + std::to_string(config.seed) +
                     "\nstage_seed=" + std::to_string(stage_seed(config.seed, stage)) +
                     "\nstopwords=" + file_hash(default_stopwords_path()) + "\n";
  for (const auto& f : inputs) text += "input " + f + "=" + file_hash(dir / f) + "\n";
  for (const auto& f : outputs) text += "output " + f + "=" + file_hash(dir / f) + "\n";
  write_text(dir / (stage_name(stage) + ".manifest"), text);
}

RewardModel load_teacher(const TaskData& data, const fs::path& dir) {
  return RewardModel(Encoder::from_checkpoint(load_checkpoint(dir / artifacts::kTeacher)), data.vocab);
}

PromptPair load_prompts(const fs::path& dir, const char* input, const char* output) {
  return {SoftPrompt::from_checkpoint(load_checkpoint(dir / input)),
          SoftPrompt::from_checkpoint(load_checkpoint(dir / output))};
}

void write_predictions(const fs::path& path, const std::vector<LabeledSample>& samples, const std::vector<int>& pred,
                       const TaskSpec& spec) {
  std::string text = "id\tgold\tpredicted\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    text += samples[i].id + "\t" + samples[i].label_text + "\t" +
            spec.label_verbalizers[static_cast<std::size_t>(pred[i])] + "\n";
  }
  write_text(path, text);
}

void write_rl_logs(const RlOutcome& rl, const fs::path& dir) {
  write_rl_log(rl.input_log, dir / "rl_log_input.csv");
  write_rl_log(rl.output_log, dir / "rl_log_output.csv");
}

void run_report(const RunConfig& config, const fs::path& dir) {
  std::vector<fs::path> runs;
  if (fs::is_directory(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_directory() && fs::exists(entry.path() / artifacts::kMetrics)) runs.push_back(entry.path());
    }
  }
  if (runs.empty()) {
    throw StageError(stage_name(Stage::report), "no run directory with " + std::string(artifacts::kMetrics) + " under " +
                                                    dir.string() + "; run stage evaluate first");
  }
  std::sort(runs.begin(), runs.end());
  std::vector<std::pair<std::string, RunMetrics>> loaded;
  std::string hashes;
  for (const auto& r : runs) {
    loaded.emplace_back(r.filename().string(), read_run_metrics(r / artifacts::kMetrics));
    hashes += " " + r.filename().string() + "=" + loaded.back().second.config_hash;
  }
  ExperimentReport rep = aggregate_runs("report config_hash=" + config_hash(config) + " runs:" + hashes, loaded);
  write_text(dir / artifacts::kReportText, format_report_table(rep));
  write_text(dir / artifacts::kReportCsv, "# " + rep.title + "\n" + format_report_csv(rep));
}

}  // namespace

void run_stage(const RunConfig& config, Stage stage, const fs::path& dir) {
  const std::string name = stage_name(stage);
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw StageError(name, e.what());
  }
  if (stage == Stage::report) {
    run_report(config, dir);
    return;
  }
  if (stage == Stage::prepare_data) {
    fs::create_directories(dir);
    TaskData d = prepare_task(config);
    save_task_spec(d.task.spec, dir / artifacts::kTaskSpec);
    save_dataset(d.task.train, dir / artifacts::kTrain);
    save_dataset(d.task.dev, dir / artifacts::kDev);
    save_dataset(d.task.test, dir / artifacts::kTest);
    d.vocab.save(dir / artifacts::kVocab);
    write_manifest(config, stage, dir, {},
                   {artifacts::kTaskSpec, artifacts::kTrain, artifacts::kDev, artifacts::kTest, artifacts::kVocab});
    return;
  }
  require_data(stage, dir);
  TaskData data = load_task_data(config, dir);
  switch (stage) {
    case Stage::pretrain_lm: {
      TinyLm lm = pretrain_lm(config, data);
      save_checkpoint(stamped(lm.to_checkpoint(), config), dir / artifacts::kBaseLm);
      write_manifest(config, stage, dir, {artifacts::kVocab}, {artifacts::kBaseLm});
      break;
    }
    case Stage::train_reward: {
      Encoder init = pretrain_teacher(config, data);
      ClassifierReport report;
      RewardModel rm = train_reward(config, data, &init, &report);
      save_checkpoint(stamped(rm.encoder().to_checkpoint("teacher"), config), dir / artifacts::kTeacher);
      write_text(dir / "teacher_report.txt", "train_accuracy=" + format_double(report.train_accuracy) +
                                                 "\ndev_accuracy=" + format_double(report.dev_accuracy) +
                                                 "\nbest_step=" + std::to_string(report.best_step) + "\n");
      write_manifest(config, stage, dir, {artifacts::kTrain, artifacts::kDev}, {artifacts::kTeacher});
      break;
    }
    case Stage::tune_prompts: {
      require(stage, dir, {{artifacts::kBaseLm, Stage::pretrain_lm}});
      TinyLm lm = TinyLm::from_checkpoint(load_checkpoint(dir / artifacts::kBaseLm));
      PromptPair p = tune_prompt_pair(config, data, lm);
      save_checkpoint(stamped(p.input.to_checkpoint(), config), dir / artifacts::kPromptInput);
      save_checkpoint(stamped(p.output.to_checkpoint(), config), dir / artifacts::kPromptOutput);
      write_manifest(config, stage, dir, {artifacts::kBaseLm, artifacts::kTrain},
                     {artifacts::kPromptInput, artifacts::kPromptOutput});
      break;
    }
    case Stage::rl_tune: {
      require(stage, dir,
              {{artifacts::kBaseLm, Stage::pretrain_lm},
               {artifacts::kTeacher, Stage::train_reward},
               {artifacts::kPromptInput, Stage::tune_prompts},
               {artifacts::kPromptOutput, Stage::tune_prompts}});
      TinyLm lm = TinyLm::from_checkpoint(load_checkpoint(dir / artifacts::kBaseLm));
      RewardModel rm = load_teacher(data, dir);
      PromptPair sft = load_prompts(dir, artifacts::kPromptInput, artifacts::kPromptOutput);
      RlOutcome rl = rl_tune(config, data, lm, sft, rm);
      save_checkpoint(stamped(rl.prompts.input.to_checkpoint(), config), dir / artifacts::kRlPromptInput);
      save_checkpoint(stamped(rl.prompts.output.to_checkpoint(), config), dir / artifacts::kRlPromptOutput);
      write_rl_logs(rl, dir);
      write_manifest(config, stage, dir,
                     {artifacts::kBaseLm, artifacts::kTeacher, artifacts::kPromptInput, artifacts::kPromptOutput},
                     {artifacts::kRlPromptInput, artifacts::kRlPromptOutput});
      break;
    }
    case Stage::build_store: {
      require(stage, dir,
              {{artifacts::kBaseLm, Stage::pretrain_lm},
               {artifacts::kTeacher, Stage::train_reward},
               {artifacts::kRlPromptInput, Stage::rl_tune},
               {artifacts::kRlPromptOutput, Stage::rl_tune}});
      TinyLm lm = TinyLm::from_checkpoint(load_checkpoint(dir / artifacts::kBaseLm));
      RewardModel rm = load_teacher(data, dir);
      PromptPair prompts = load_prompts(dir, artifacts::kRlPromptInput, artifacts::kRlPromptOutput);
      GenerationSets sets = generate_store_sets(config, data, lm, prompts);
      save_store(build_store(config, data, sets, rm), dir / artifacts::kStore);
      write_manifest(config, stage, dir,
                     {artifacts::kBaseLm, artifacts::kTeacher, artifacts::kRlPromptInput, artifacts::kRlPromptOutput},
                     {artifacts::kStore});
      break;
    }
    case Stage::train_student: {
      require(stage, dir, {{artifacts::kTeacher, Stage::train_reward}, {artifacts::kStore, Stage::build_store}});
      RewardModel rm = load_teacher(data, dir);
      KnowledgeStore store = load_store(dir / artifacts::kStore);
      TrainedStudent st = train_student(config, data, store, rm);
      save_checkpoint(stamped(st.student.to_checkpoint("student"), config), dir / artifacts::kStudent);
      save_store(st.keyed_store, dir / artifacts::kKeyedStore);
      std::string curve = "step,loss\n";
      for (const auto& [step, loss] : st.report.loss_curve) curve += std::to_string(step) + "," + format_double(loss) + "\n";
      write_text(dir / "student_loss.csv", curve);
      write_manifest(config, stage, dir, {artifacts::kTeacher, artifacts::kStore},
                     {artifacts::kStudent, artifacts::kKeyedStore});
      break;
    }
    case Stage::train_kd_baseline: {
      require(stage, dir, {{artifacts::kStore, Stage::build_store}});
      KnowledgeStore store = load_store(dir / artifacts::kStore);
      Encoder kd = train_kd_student(config, data, store);
      Encoder ft = train_finetune_student(config, data);
      save_checkpoint(stamped(kd.to_checkpoint("kd_student"), config), dir / artifacts::kKdStudent);
      save_checkpoint(stamped(ft.to_checkpoint("finetune_student"), config), dir / artifacts::kFinetuneStudent);
      write_manifest(config, stage, dir, {artifacts::kStore, artifacts::kTrain},
                     {artifacts::kKdStudent, artifacts::kFinetuneStudent});
      break;
    }
    case Stage::evaluate: {
      require(stage, dir,
              {{artifacts::kTeacher, Stage::train_reward},
               {artifacts::kStore, Stage::build_store},
               {artifacts::kStudent, Stage::train_student},
               {artifacts::kKeyedStore, Stage::train_student},
               {artifacts::kKdStudent, Stage::train_kd_baseline},
               {artifacts::kFinetuneStudent, Stage::train_kd_baseline}});
      RewardModel rm = load_teacher(data, dir);
      KnowledgeStore store = load_store(dir / artifacts::kStore);
      TrainedStudent st{Encoder::from_checkpoint(load_checkpoint(dir / artifacts::kStudent)),
                        load_store(dir / artifacts::kKeyedStore), {}};
      Encoder kd = Encoder::from_checkpoint(load_checkpoint(dir / artifacts::kKdStudent));
      Encoder ft = Encoder::from_checkpoint(load_checkpoint(dir / artifacts::kFinetuneStudent));
      write_run_metrics(collect_metrics(config, data, rm, store, st, kd, ft), dir / artifacts::kMetrics);
      const auto test_texts = texts_of(data.task.test);
      write_predictions(dir / "predictions_retrieval.tsv", data.task.test,
                        retrieval_predictions(config, data, st, data.task.test), data.task.spec);
      write_predictions(dir / "predictions_kd.tsv", data.task.test, predict_head(kd, data.vocab, test_texts),
                        data.task.spec);
      write_predictions(dir / "predictions_finetune.tsv", data.task.test, predict_head(ft, data.vocab, test_texts),
                        data.task.spec);
      write_manifest(config, stage, dir,
                     {artifacts::kTeacher, artifacts::kStore, artifacts::kStudent, artifacts::kKeyedStore,
                      artifacts::kKdStudent, artifacts::kFinetuneStudent},
                     {artifacts::kMetrics});
      break;
    }
    default:
      break;
  }
}

}  // namespace retrikt
