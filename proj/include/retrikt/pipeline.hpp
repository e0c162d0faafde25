#pragma once

// Run configuration, per-stage seeding, in-memory pipeline steps, on-disk
// stages and experiment reports.

#include "retrikt/knowledge_store.hpp"
#include "retrikt/lm_pretrain.hpp"
#include "retrikt/rl_finetune.hpp"
#include "retrikt/student.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace retrikt {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by run_stage; the message starts with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what) : std::runtime_error(stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunConfig {
  std::uint64_t task_seed = 2;
  SyntheticConfig task;

  LmConfig lm{.num_layers = 2, .hidden_dim = 64, .num_heads = 4, .vocab_size = 0, .max_seq_len = 64};
  PretrainConfig pretrain{.steps = 5000, .lr = 3e-3, .batch_size = 32};
  int pretrain_corpus = 4000;
  double pretrain_noise = 0.3;
  std::uint64_t pretrain_seed = 99;

  EncoderConfig teacher{.num_layers = 2, .hidden_dim = 64, .num_heads = 4, .vocab_size = 0, .max_seq_len = 64};
  ClassifierTrainConfig teacher_train{.steps = 400, .lr = 1e-3, .batch_size = 32, .eval_every = 50};
  int teacher_pretrain_steps = 3000;
  int teacher_pretrain_corpus = 4000;
  double teacher_pretrain_noise = 0.3;
  double teacher_pretrain_lr = 1e-3;
  std::uint64_t teacher_pretrain_seed = 98;

  TuneConfig prompt{.steps = 300, .lr = 1e-2, .batch_size = 32, .prompt_length = 8};

  bool rl_enabled = true;
  PpoConfig ppo;

  GenerateConfig store{.m = 8, .n = 5, .top_p = 0.9, .max_new = 40};

  EncoderConfig student{.num_layers = 2, .hidden_dim = 8, .num_heads = 2, .vocab_size = 0, .max_seq_len = 64};
  StudentTrainConfig student_train;
  int retrieval_k = 16;

  ClassifierTrainConfig finetune{.steps = 300, .lr = 1e-3, .batch_size = 32, .eval_every = 50};

  std::uint64_t seed = 1;

  RunConfig();
  void validate() const;
};

// Flat "section.key = value" text; '#' starts a comment. Keys absent from the
// text keep their defaults; unknown keys and malformed values are errors.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Every key in registry order, one per line.
std::string serialize_config(const RunConfig& config);
std::vector<std::string> config_keys();
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string config_hash(const RunConfig& config);

enum class Stage {
  prepare_data,
  pretrain_lm,
  train_reward,
  tune_prompts,
  rl_tune,
  build_store,
  train_student,
  train_kd_baseline,
  evaluate,
  report,
};

std::string stage_name(Stage s);
Stage parse_stage(const std::string& s);
const std::vector<Stage>& all_stages();

// splitmix64 of the run seed and the stage index; independent of which other
// stages ran.
std::uint64_t stage_seed(std::uint64_t run_seed, Stage stage);

// ---- in-memory steps -------------------------------------------------------

struct TaskData {
  SyntheticTask task;
  Vocabulary vocab;
  StopwordSet stopwords;
};

TaskData prepare_task(const RunConfig& config);

// Base model shared by every run seed (its seed is pretrain_seed).
TinyLm pretrain_lm(const RunConfig& config, const TaskData& data);

// Noisy-corpus pretraining of the teacher encoder, independent of the run seed.
Encoder pretrain_teacher(const RunConfig& config, const TaskData& data);
RewardModel train_reward(const RunConfig& config, const TaskData& data, const Encoder* pretrained,
                         ClassifierReport* report = nullptr);

struct PromptPair {
  SoftPrompt input;
  SoftPrompt output;
};

PromptPair tune_prompt_pair(const RunConfig& config, const TaskData& data, const TinyLm& lm);

struct RlOutcome {
  PromptPair prompts;
  std::vector<RlEpochLog> input_log, output_log;
};

// With RL disabled the prompts are returned unchanged and the logs are empty.
RlOutcome rl_tune(const RunConfig& config, const TaskData& data, const TinyLm& lm, const PromptPair& sft,
                  const RewardModel& rm);

GenerationSets generate_store_sets(const RunConfig& config, const TaskData& data, const TinyLm& lm,
                                   const PromptPair& prompts);
// Store without keys (embed_dim 0).
KnowledgeStore build_store(const RunConfig& config, const TaskData& data, const GenerationSets& sets,
                           const RewardModel& rm);

std::vector<std::string> store_texts(const KnowledgeStore& store);

struct TrainedStudent {
  Encoder student;
  KnowledgeStore keyed_store;
  StudentReport report;
};

TrainedStudent train_student(const RunConfig& config, const TaskData& data, const KnowledgeStore& store,
                             const RewardModel& rm);
Encoder train_kd_student(const RunConfig& config, const TaskData& data, const KnowledgeStore& store,
                         StudentReport* report = nullptr);
Encoder train_finetune_student(const RunConfig& config, const TaskData& data, ClassifierReport* report = nullptr);

inline const std::string kVariantFinetune = "fine-tune-only";
inline const std::string kVariantKd = "RetriKT-KD";
inline const std::string kVariantRetrieval = "RetriKT-Retrieval";

std::vector<int> retrieval_predictions(const RunConfig& config, const TaskData& data, const TrainedStudent& student,
                                       const std::vector<LabeledSample>& samples);
double retrieval_score(const RunConfig& config, const TaskData& data, const TrainedStudent& student);
double head_score(const TaskData& data, const Encoder& student);

struct DiversityAccuracy {
  double self_bleu = 0.0;
  double cross_entropy = 0.0;
  int generated = 0;
  int self_bleu_sample = 0;
};

inline constexpr int kSelfBleuCap = 1000;
inline constexpr std::uint64_t kSelfBleuSeed = 20240229;

// Self-BLEU of each generated record against the other sampled generated
// records (at most `cap`, drawn with a fixed seed) and the mean of
// -log rm(label of the record | text) over all generated records.
DiversityAccuracy diversity_accuracy_report(const KnowledgeStore& store, const RewardModel& rm, const TaskSpec& spec,
                                            int cap = kSelfBleuCap, std::uint64_t sample_seed = kSelfBleuSeed);

// ---- reports ---------------------------------------------------------------

struct MetricRow {
  std::string section;
  std::string name;
  std::string metric;
  bool higher_is_better = true;
  std::vector<std::pair<std::string, double>> per_seed;  // (run label, value)

  double mean() const;
};

struct ExperimentReport {
  std::string title;
  std::vector<MetricRow> rows;

  const MetricRow* find(const std::string& section, const std::string& name, const std::string& metric) const;
};

// metrics.csv of one run: rows "section,name,metric,direction,value".
struct MetricEntry {
  std::string section;
  std::string name;
  std::string metric;
  bool higher_is_better = true;
  double value = 0.0;
};

struct RunMetrics {
  std::string config_hash;
  std::vector<MetricEntry> entries;

  // Value of an entry; throws when absent.
  double value(const std::string& section, const std::string& name, const std::string& metric) const;
};

void write_run_metrics(const RunMetrics& metrics, const std::filesystem::path& path);
RunMetrics read_run_metrics(const std::filesystem::path& path);

// Pools the metrics of several runs (label, metrics) into one report.
ExperimentReport aggregate_runs(const std::string& title,
                                const std::vector<std::pair<std::string, RunMetrics>>& runs);

std::string format_report_table(const ExperimentReport& report);
std::string format_report_csv(const ExperimentReport& report);

enum class Component { rl, r_accuracy, r_diversity, brevity };

std::string component_name(Component c);  // RL, R_accuracy, R_diversity, BP
Component parse_component(const std::string& s);

// Configuration with one component disabled.
RunConfig ablated_config(const RunConfig& base, Component c);

// Models that do not depend on the run seed.
struct SharedModels {
  TaskData data;
  TinyLm lm;
  Encoder teacher_init;
};

SharedModels prepare_shared(const RunConfig& config);

// Everything one run seed produces in memory.
struct SeedRun {
  RewardModel rm;
  PromptPair sft;
  RlOutcome rl;
  GenerationSets sets;
  KnowledgeStore store;
  std::optional<TrainedStudent> retrieval;
  std::optional<Encoder> kd;
  std::optional<Encoder> finetune;
  RunMetrics metrics;
};

// Runs every stage after the shared ones; students are skipped when
// `train_students` is false.
SeedRun run_seed(const RunConfig& config, const SharedModels& shared, bool train_students = true);

// Test-set metrics of the student variants and the store diversity numbers.
RunMetrics collect_metrics(const RunConfig& config, const TaskData& data, const RewardModel& rm,
                           const KnowledgeStore& store, const TrainedStudent& retrieval, const Encoder& kd,
                           const Encoder& finetune);

// For each seed: the base row and one row per disabled component, each with
// both student variants. A row is one name ("full", "w/o RL", ...) with one
// metric per variant.
ExperimentReport ablation_matrix(const RunConfig& config, const std::vector<Component>& components,
                                 const std::vector<std::uint64_t>& seeds, const SharedModels* shared = nullptr);

// ---- on-disk stages --------------------------------------------------------

// Files of a run directory.
namespace artifacts {
inline constexpr const char* kTaskSpec = "task.spec";
inline constexpr const char* kTrain = "train.tsv";
inline constexpr const char* kDev = "dev.tsv";
inline constexpr const char* kTest = "test.tsv";
inline constexpr const char* kVocab = "vocab.txt";
inline constexpr const char* kBaseLm = "base_lm.ckpt";
inline constexpr const char* kTeacher = "teacher.ckpt";
inline constexpr const char* kPromptInput = "prompt_input.ckpt";
inline constexpr const char* kPromptOutput = "prompt_output.ckpt";
inline constexpr const char* kRlPromptInput = "rl_prompt_input.ckpt";
inline constexpr const char* kRlPromptOutput = "rl_prompt_output.ckpt";
inline constexpr const char* kStore = "store.bin";
inline constexpr const char* kStudent = "student.ckpt";
inline constexpr const char* kKeyedStore = "store_keyed.bin";
inline constexpr const char* kKdStudent = "kd_student.ckpt";
inline constexpr const char* kFinetuneStudent = "finetune_student.ckpt";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kReportText = "report.txt";
inline constexpr const char* kReportCsv = "report.csv";
}  // namespace artifacts

// Runs one stage in `out_dir`. The report stage aggregates every immediate
// subdirectory of `out_dir` holding a metrics.csv.
void run_stage(const RunConfig& config, Stage stage, const std::filesystem::path& out_dir);

}  // namespace retrikt
