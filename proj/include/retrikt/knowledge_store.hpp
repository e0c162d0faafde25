#pragma once

// Knowledge store: generated and original samples keyed by student sentence
// embeddings and valued by reward-model class distributions.

#include "retrikt/data.hpp"
#include "retrikt/encoder.hpp"
#include "retrikt/reward_model.hpp"
#include "retrikt/tiny_lm.hpp"
#include "retrikt/vocab.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace retrikt {

struct ParsedGeneration {
  int label_id = -1;
  std::string label_text;
  std::vector<int> text_tokens;
  std::string text;
};

// Inverts "label: Y | text: X" (a trailing end-of-sequence token is ignored).
// Fails on a malformed prefix, an unknown label or an empty text.
std::optional<ParsedGeneration> parse_generated(const std::vector<int>& tokens, const Vocabulary& vocab,
                                                const TaskSpec& spec);
std::optional<ParsedGeneration> parse_generated_text(const std::string& text, const Vocabulary& vocab,
                                                     const TaskSpec& spec);

enum class Provenance : std::uint8_t { original = 0, input_view = 1, output_view = 2, input_output = 3, output_input = 4 };

std::string provenance_name(Provenance p);  // D, D_I, D_O, D_IO, D_OI

struct GeneratedSample {
  std::string label_text;
  std::string text;
  Provenance provenance = Provenance::input_view;
  int source = 0;      // index of the originating sample in D
  int repetition = 0;  // 0..m-1
};

struct GenerateConfig {
  int m = 8;
  int n = 5;
  double top_p = 0.9;
  int max_new = 64;
};

struct GenerationSets {
  std::vector<GeneratedSample> d_i, d_o, d_io, d_oi;
  int originals = 0;
  int m = 0;
  int n = 0;

  // Attempts per set. A second-stage attempt whose parent failed to parse
  // still counts as an attempt, and as a drop.
  long attempts_per_set() const { return static_cast<long>(originals) * m * n; }
  long total_attempts() const { return originals + 4 * attempts_per_set(); }
  long dropped() const {
    return 4 * attempts_per_set() - static_cast<long>(d_i.size() + d_o.size() + d_io.size() + d_oi.size());
  }
  // Sets that generate_sets would have produced with a smaller m.
  GenerationSets first_repetitions(int m) const;
};

// Every (source, repetition) pair draws from its own random stream, so results
// for a smaller m are a subset of those for a larger one.
GenerationSets generate_sets(const std::vector<LabeledSample>& dataset, const TinyLm& lm, const SoftPrompt& input_prompt,
                             const SoftPrompt& output_prompt, const Vocabulary& vocab, const TaskSpec& spec,
                             const StopwordSet& stopwords, const GenerateConfig& config, std::uint64_t seed);

// Keeps the first occurrence of every normalized text; order is stable.
template <typename T, typename TextOf>
std::vector<T> dedup(const std::vector<T>& items, TextOf text_of);
std::vector<std::string> dedup(const std::vector<std::string>& texts);

struct KnowledgeRecord {
  std::string text;
  std::string label_text;
  Provenance provenance = Provenance::original;
  Eigen::VectorXd key;
  ProbDist value;

  bool operator==(const KnowledgeRecord&) const = default;
};

struct KnowledgeStore {
  std::string task;
  int embed_dim = 0;
  int num_classes = 0;
  std::map<std::string, std::string> manifest;
  std::vector<KnowledgeRecord> records;

  std::uint64_t manifest_hash() const;
  bool operator==(const KnowledgeStore&) const = default;
};

// Union D, D_I, D_O, D_IO, D_OI in that order, deduplicated, valued by the reward model.
KnowledgeStore assemble_store(const std::vector<LabeledSample>& dataset, const GenerationSets& sets,
                              const RewardModel& rm, const TaskSpec& spec);

void rebuild_keys(KnowledgeStore& store, const Encoder& student, const Vocabulary& vocab);

struct QueryHit {
  int index = 0;
  double similarity = 0.0;
};

// Exact top-k by cosine similarity, ties by insertion order.
std::vector<QueryHit> query(const KnowledgeStore& store, const Eigen::VectorXd& q, int k);

void save_store(const KnowledgeStore& store, const std::filesystem::path& path);
KnowledgeStore load_store(const std::filesystem::path& path);

template <typename T, typename TextOf>
std::vector<T> dedup(const std::vector<T>& items, TextOf text_of) {
  std::unordered_set<std::string> seen;
  std::vector<T> out;
  for (const auto& it : items) {
    if (seen.insert(normalize_text(text_of(it))).second) out.push_back(it);
  }
  return out;
}

}  // namespace retrikt
