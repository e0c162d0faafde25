#pragma once

// Dataset records, task descriptions, preprocessing templates, RAKE keyword
// extraction, synthetic low-resource tasks and the line-oriented dataset file.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace retrikt {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Metric { accuracy, matthews_correlation };

std::string metric_name(Metric m);
Metric parse_metric(const std::string& s);

struct TaskSpec {
  std::string name;
  std::vector<std::string> label_verbalizers;  // index = class id
  Metric metric = Metric::accuracy;
  std::vector<std::string> template_fields;  // "sentence1", "sentence2", ...

  int num_classes() const { return static_cast<int>(label_verbalizers.size()); }
  // Class id of a verbalized label, or -1.
  int label_id(const std::string& verbalizer) const;
  void validate() const;
};

struct LabeledSample {
  std::string id;
  std::string text;  // processed single-sentence input
  int label_id = 0;
  std::string label_text;
  std::vector<std::string> keywords;

  bool operator==(const LabeledSample&) const = default;
};

struct KeywordPhrase {
  std::string phrase;
  double score = 0.0;
};

using KeywordSet = std::vector<KeywordPhrase>;
using StopwordSet = std::unordered_set<std::string>;

inline constexpr int kDefaultMaxPhrases = 5;

// Template application: "field1: value1 field2: value2 ...", label from raw_fields["label"].
LabeledSample preprocess_record(const std::map<std::string, std::string>& raw_fields, const TaskSpec& spec);

StopwordSet load_stopwords(const std::filesystem::path& path);
// Stopword list shipped with the project (data/stopwords.txt).
std::filesystem::path default_stopwords_path();

// RAKE: candidates are maximal runs of non-stopword words, split additionally at
// punctuation and "field:" prefixes; word score = degree / frequency.
KeywordSet extract_keywords(const std::string& text, const StopwordSet& stopwords,
                            int max_phrases = kDefaultMaxPhrases);

// Phrases of extract_keywords, or the first non-stopword word, or "text".
std::vector<std::string> keywords_with_fallback(const std::string& text, const StopwordSet& stopwords,
                                                int max_phrases = kDefaultMaxPhrases);

// Fills sample.keywords for every sample.
void attach_keywords(std::vector<LabeledSample>& samples, const StopwordSet& stopwords,
                     int max_phrases = kDefaultMaxPhrases);

enum class SyntheticRule {
  // Label = class of the single marker-family word present (linearly separable).
  marker,
  // Label = (group(left word) + group(right word)) mod num_classes (XOR-like).
  pairwise,
};

struct SyntheticConfig {
  int num_classes = 2;
  int train_size = 200;
  int dev_size = 100;
  int test_size = 200;
  int words_per_group = 3;
  int neutral_words = 8;
  int max_neutral_in_text = 1;
  int min_fillers = 3;
  int max_fillers = 5;
  SyntheticRule rule = SyntheticRule::pairwise;
  // Nonzero: reassigns the same word pool to different groups.
  std::uint64_t lexicon_seed = 0;
};

struct SyntheticTask {
  TaskSpec spec;
  std::vector<LabeledSample> train, dev, test;
};

// Deterministic in (seed, config). Keywords are not attached.
SyntheticTask make_synthetic_task(std::uint64_t seed, const SyntheticConfig& config);

// Unlabeled texts from the same generator as make_synthetic_task.
std::vector<std::string> synthetic_texts(std::uint64_t seed, const SyntheticConfig& config, int count);

// Rule oracle: the label the generator assigns to a text, or -1 if the text
// does not contain the words the rule needs.
int synthetic_rule_label(const std::string& text, const SyntheticConfig& config);

// Group membership spelled out as tokens: for each group g, the verbalizer of
// class g followed by its left-side then right-side words.
std::string synthetic_rule_description(const SyntheticConfig& config);

// All words the synthetic generator can emit, in a fixed order.
std::vector<std::string> synthetic_vocabulary(const SyntheticConfig& config);

// Tab-separated: id, label_text, processed text. Keywords are re-extracted on load.
void save_dataset(const std::vector<LabeledSample>& samples, const std::filesystem::path& path);
std::vector<LabeledSample> load_dataset(const std::filesystem::path& path, const TaskSpec& spec,
                                        const StopwordSet& stopwords);

void save_task_spec(const TaskSpec& spec, const std::filesystem::path& path);
TaskSpec load_task_spec(const std::filesystem::path& path);

// Whitespace tokenization with commas split off as separate tokens.
std::vector<std::string> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::string>& tokens);

// Lowercase + whitespace collapse.
std::string normalize_text(const std::string& text);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);
std::string hex64(std::uint64_t v);

}  // namespace retrikt
