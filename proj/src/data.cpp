#include "retrikt/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

#ifndef RETRIKT_DATA_DIR
#define RETRIKT_DATA_DIR "data"
#endif

namespace retrikt {

std::string metric_name(Metric m) { return m == Metric::accuracy ? "accuracy" : "matthews_correlation"; }

Metric parse_metric(const std::string& s) {
  if (s == "accuracy" || s == "acc") return Metric::accuracy;
  if (s == "matthews_correlation" || s == "mcc") return Metric::matthews_correlation;
  throw DataError("unknown metric '" + s + "'");
}

int TaskSpec::label_id(const std::string& verbalizer) const {
  auto it = std::find(label_verbalizers.begin(), label_verbalizers.end(), verbalizer);
  return it == label_verbalizers.end() ? -1 : static_cast<int>(it - label_verbalizers.begin());
}

void TaskSpec::validate() const {
  if (label_verbalizers.empty()) throw DataError("task '" + name + "' has no classes");
  std::set<std::string> seen(label_verbalizers.begin(), label_verbalizers.end());
  if (seen.size() != label_verbalizers.size()) throw DataError("task '" + name + "' has duplicate verbalizers");
  for (const auto& v : label_verbalizers) {
    if (v.empty() || v.find_first_of(" \t\n|") != std::string::npos) {
      throw DataError("verbalizer '" + v + "' must be a single token");
    }
  }
  if (template_fields.empty()) throw DataError("task '" + name + "' has an empty template");
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

LabeledSample preprocess_record(const std::map<std::string, std::string>& raw_fields, const TaskSpec& spec) {
  std::string text;
  for (const auto& field : spec.template_fields) {
    auto it = raw_fields.find(field);
    if (it == raw_fields.end()) throw DataError("record is missing field '" + field + "'");
    if (!text.empty()) text += ' ';
    text += field + ": " + it->second;
  }
  auto lab = raw_fields.find("label");
  if (lab == raw_fields.end()) throw DataError("record is missing field 'label'");
  int id = spec.label_id(lab->second);
  if (id < 0) throw DataError("unknown label '" + lab->second + "' for task '" + spec.name + "'");

  LabeledSample s;
  s.text = std::move(text);
  s.label_id = id;
  s.label_text = lab->second;
  auto idf = raw_fields.find("id");
  s.id = idf != raw_fields.end() ? idf->second : "rec-" + hex64(fnv1a64(s.label_text + '\t' + s.text));
  return s;
}

std::filesystem::path default_stopwords_path() {
  return std::filesystem::path(RETRIKT_DATA_DIR) / "stopwords.txt";
}

StopwordSet load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open stopword file " + path.string());
  StopwordSet out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

namespace {

std::string lowercase(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_phrase_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) && c != '-' && c != '\''; }

// Splits text into words and phrase boundaries (represented as empty strings).
std::vector<std::string> rake_stream(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    if (tok.back() == ':') {  // field prefix such as "sentence1:"
      out.emplace_back();
      continue;
    }
    std::size_t b = 0, e = tok.size();
    bool lead = false, trail = false;
    while (b < e && is_phrase_punct(tok[b])) ++b, lead = true;
    while (e > b && is_phrase_punct(tok[e - 1])) --e, trail = true;
    if (lead) out.emplace_back();
    if (b < e) out.push_back(lowercase(tok.substr(b, e - b)));
    if (trail) out.emplace_back();
  }
  return out;
}

}  // namespace

KeywordSet extract_keywords(const std::string& text, const StopwordSet& stopwords, int max_phrases) {
  if (max_phrases <= 0) throw std::invalid_argument("extract_keywords: max_phrases must be positive");
  std::vector<std::vector<std::string>> phrases;
  std::vector<std::string> cur;
  auto flush = [&] {
    if (!cur.empty()) phrases.push_back(std::move(cur));
    cur.clear();
  };
  for (auto& w : rake_stream(text)) {
    if (w.empty() || stopwords.count(w)) {
      flush();
    } else {
      cur.push_back(w);
    }
  }
  flush();

  std::unordered_map<std::string, double> degree, freq;
  for (const auto& p : phrases) {
    for (const auto& w : p) {
      degree[w] += static_cast<double>(p.size());
      freq[w] += 1.0;
    }
  }

  KeywordSet out;
  std::unordered_set<std::string> seen;
  for (const auto& p : phrases) {
    std::string joined;
    double score = 0.0;
    for (const auto& w : p) {
      if (!joined.empty()) joined += ' ';
      joined += w;
      score += degree[w] / freq[w];
    }
    if (seen.insert(joined).second) out.push_back({joined, score});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (static_cast<int>(out.size()) > max_phrases) out.resize(static_cast<std::size_t>(max_phrases));
  return out;
}

std::vector<std::string> keywords_with_fallback(const std::string& text, const StopwordSet& stopwords,
                                                int max_phrases) {
  std::vector<std::string> out;
  for (auto& kp : extract_keywords(text, stopwords, max_phrases)) out.push_back(kp.phrase);
  if (!out.empty()) return out;
  for (auto& w : rake_stream(text)) {
    if (!w.empty() && !stopwords.count(w)) return {w};
  }
  return {"text"};
}

void attach_keywords(std::vector<LabeledSample>& samples, const StopwordSet& stopwords, int max_phrases) {
  for (auto& s : samples) s.keywords = keywords_with_fallback(s.text, stopwords, max_phrases);
}

// ---------------------------------------------------------------------------
// Synthetic tasks

namespace {

const std::vector<std::string>& verbalizer_pool() {
  static const std::vector<std::string> pool = {"alpha", "beta", "gamma", "delta",
                                                "epsilon", "zeta", "eta", "theta"};
  return pool;
}

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> f = {"the", "a", "of", "and", "to", "in", "with", "on", "for", "by"};
  return f;
}

struct SyntheticLexicon {
  std::vector<std::vector<std::string>> left, right;  // [group][word]
  std::vector<std::string> neutral;
  std::unordered_map<std::string, int> left_group, right_group;
};

SyntheticLexicon build_lexicon(const SyntheticConfig& c) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::vector<std::string> words;
  for (char c1 : consonants)
    for (char v1 : vowels)
      for (char c2 : consonants)
        for (char v2 : vowels) words.push_back(std::string{c1, v1, c2, v2});
  // Fixed permutation independent of the task seed: the lexicon is part of the task definition.
  std::mt19937_64 rng(0x5eed1e55ULL);
  std::shuffle(words.begin(), words.end(), rng);

  const std::size_t pool = static_cast<std::size_t>(2 * c.num_classes * c.words_per_group + c.neutral_words);
  words.resize(pool);
  if (c.lexicon_seed != 0) {
    std::mt19937_64 reassign(c.lexicon_seed);
    std::shuffle(words.begin(), words.end(), reassign);
  }

  SyntheticLexicon lex;
  std::size_t next = 0;
  auto take = [&] { return words.at(next++); };
  lex.left.resize(static_cast<std::size_t>(c.num_classes));
  lex.right.resize(static_cast<std::size_t>(c.num_classes));
  for (int g = 0; g < c.num_classes; ++g) {
    for (int w = 0; w < c.words_per_group; ++w) {
      lex.left[g].push_back(take());
      lex.left_group[lex.left[g].back()] = g;
    }
  }
  for (int g = 0; g < c.num_classes; ++g) {
    for (int w = 0; w < c.words_per_group; ++w) {
      lex.right[g].push_back(take());
      lex.right_group[lex.right[g].back()] = g;
    }
  }
  for (int w = 0; w < c.neutral_words; ++w) lex.neutral.push_back(take());
  return lex;
}

void validate_config(const SyntheticConfig& c) {
  if (c.num_classes < 1) throw DataError("synthetic task needs at least one class");
  if (c.num_classes > static_cast<int>(verbalizer_pool().size())) {
    throw DataError("synthetic task supports at most " + std::to_string(verbalizer_pool().size()) + " classes");
  }
  if (c.words_per_group < 1) throw DataError("synthetic task needs words_per_group >= 1");
  if (c.train_size < 0 || c.dev_size < 0 || c.test_size < 0) throw DataError("negative split size");
  if (c.min_fillers < 0 || c.max_fillers < c.min_fillers) throw DataError("bad filler range");
  if (c.max_neutral_in_text < 0 || (c.max_neutral_in_text > 0 && c.neutral_words < 1)) {
    throw DataError("bad neutral-word settings");
  }
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

struct Draw {
  std::string text;
  int label;
};

Draw draw_text(const SyntheticConfig& c, const SyntheticLexicon& lex, std::mt19937_64& rng, int label) {
  const int C = c.num_classes;
  std::vector<std::string> content;
  if (c.rule == SyntheticRule::pairwise) {
    int ga = uniform_int(rng, 0, C - 1);
    int gb = ((label - ga) % C + C) % C;
    content.push_back(lex.left[ga][uniform_int(rng, 0, c.words_per_group - 1)]);
    content.push_back(lex.right[gb][uniform_int(rng, 0, c.words_per_group - 1)]);
  } else {
    content.push_back(lex.left[label][uniform_int(rng, 0, c.words_per_group - 1)]);
    int g = uniform_int(rng, 0, C - 1);
    content.push_back(lex.right[g][uniform_int(rng, 0, c.words_per_group - 1)]);
  }
  int neutrals = c.max_neutral_in_text > 0 ? uniform_int(rng, 0, c.max_neutral_in_text) : 0;
  for (int i = 0; i < neutrals; ++i) {
    content.push_back(lex.neutral[uniform_int(rng, 0, static_cast<int>(lex.neutral.size()) - 1)]);
  }
  std::shuffle(content.begin(), content.end(), rng);

  // gaps[0] before the first word, gaps[n] after the last; inner gaps hold >= 1 filler.
  const int n = static_cast<int>(content.size());
  std::vector<int> gaps(static_cast<std::size_t>(n + 1), 0);
  for (int g = 1; g < n; ++g) gaps[g] = 1;
  int fillers = std::max(uniform_int(rng, c.min_fillers, c.max_fillers), n - 1);
  for (int extra = fillers - (n - 1); extra > 0; --extra) gaps[uniform_int(rng, 0, n)] += 1;

  const auto& fw = filler_words();
  std::string text = "sentence:";
  for (int g = 0; g <= n; ++g) {
    for (int f = 0; f < gaps[g]; ++f) text += " " + fw[uniform_int(rng, 0, static_cast<int>(fw.size()) - 1)];
    if (g < n) text += " " + content[g];
  }
  return {text, label};
}

}  // namespace

std::vector<std::string> synthetic_vocabulary(const SyntheticConfig& config) {
  validate_config(config);
  auto lex = build_lexicon(config);
  std::vector<std::string> out = {"sentence:"};
  for (auto& g : lex.left) out.insert(out.end(), g.begin(), g.end());
  for (auto& g : lex.right) out.insert(out.end(), g.begin(), g.end());
  out.insert(out.end(), lex.neutral.begin(), lex.neutral.end());
  out.insert(out.end(), filler_words().begin(), filler_words().end());
  for (int c = 0; c < config.num_classes; ++c) out.push_back(verbalizer_pool()[c]);
  return out;
}

std::string synthetic_rule_description(const SyntheticConfig& config) {
  validate_config(config);
  auto lex = build_lexicon(config);
  std::string out;
  for (int g = 0; g < config.num_classes; ++g) {
    out += (g ? " " : "") + verbalizer_pool()[g];
    for (const auto& w : lex.left[g]) out += " " + w;
    for (const auto& w : lex.right[g]) out += " " + w;
  }
  return out;
}

SyntheticTask make_synthetic_task(std::uint64_t seed, const SyntheticConfig& config) {
  validate_config(config);
  auto lex = build_lexicon(config);
  SyntheticTask task;
  task.spec.name = config.rule == SyntheticRule::pairwise ? "synthetic-pairwise" : "synthetic-marker";
  task.spec.label_verbalizers.assign(verbalizer_pool().begin(), verbalizer_pool().begin() + config.num_classes);
  task.spec.metric = Metric::accuracy;
  task.spec.template_fields = {"sentence"};

  std::mt19937_64 rng(seed);
  auto make_split = [&](const std::string& prefix, int count) {
    std::vector<LabeledSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      int label = uniform_int(rng, 0, config.num_classes - 1);
      Draw d = draw_text(config, lex, rng, label);
      LabeledSample s;
      std::ostringstream id;
      id << prefix << '-' << std::setw(5) << std::setfill('0') << i;
      s.id = id.str();
      s.text = std::move(d.text);
      s.label_id = label;
      s.label_text = task.spec.label_verbalizers[label];
      out.push_back(std::move(s));
    }
    return out;
  };
  task.train = make_split("train", config.train_size);
  task.dev = make_split("dev", config.dev_size);
  task.test = make_split("test", config.test_size);
  return task;
}

std::vector<std::string> synthetic_texts(std::uint64_t seed, const SyntheticConfig& config, int count) {
  validate_config(config);
  auto lex = build_lexicon(config);
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) {
    int label = uniform_int(rng, 0, config.num_classes - 1);
    out.push_back(draw_text(config, lex, rng, label).text);
  }
  return out;
}

int synthetic_rule_label(const std::string& text, const SyntheticConfig& config) {
  validate_config(config);
  static thread_local std::map<std::tuple<int, int, int, std::uint64_t>, SyntheticLexicon> cache;
  auto key = std::make_tuple(config.num_classes, config.words_per_group, config.neutral_words, config.lexicon_seed);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, build_lexicon(config)).first;
  const auto& lex = it->second;

  int ga = -1, gb = -1;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    if (ga < 0) {
      auto l = lex.left_group.find(w);
      if (l != lex.left_group.end()) ga = l->second;
    }
    if (gb < 0) {
      auto r = lex.right_group.find(w);
      if (r != lex.right_group.end()) gb = r->second;
    }
  }
  if (config.rule == SyntheticRule::marker) return ga;
  if (ga < 0 || gb < 0) return -1;
  return (ga + gb) % config.num_classes;
}

// ---------------------------------------------------------------------------
// Files

void save_dataset(const std::vector<LabeledSample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& s : samples) {
    for (const auto* f : {&s.id, &s.label_text, &s.text}) {
      if (f->find_first_of("\t\n") != std::string::npos) {
        throw DataError("sample '" + s.id + "' contains a tab or newline");
      }
    }
    out << s.id << '\t' << s.label_text << '\t' << s.text << '\n';
  }
}

std::vector<LabeledSample> load_dataset(const std::filesystem::path& path, const TaskSpec& spec,
                                        const StopwordSet& stopwords) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::vector<LabeledSample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated columns");
    }
    LabeledSample s;
    s.id = line.substr(0, t1);
    s.label_text = line.substr(t1 + 1, t2 - t1 - 1);
    s.text = line.substr(t2 + 1);
    if (s.text.empty()) throw DataError(path.string() + ":" + std::to_string(lineno) + ": empty text");
    s.label_id = spec.label_id(s.label_text);
    if (s.label_id < 0) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": unknown label '" + s.label_text + "'");
    }
    s.keywords = keywords_with_fallback(s.text, stopwords);
    out.push_back(std::move(s));
  }
  return out;
}

void save_task_spec(const TaskSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write task file " + path.string());
  out << "name=" << spec.name << "\nmetric=" << metric_name(spec.metric) << "\nlabels=";
  for (std::size_t i = 0; i < spec.label_verbalizers.size(); ++i) out << (i ? "," : "") << spec.label_verbalizers[i];
  out << "\ntemplate=";
  for (std::size_t i = 0; i < spec.template_fields.size(); ++i) out << (i ? "," : "") << spec.template_fields[i];
  out << "\n";
}

TaskSpec load_task_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open task file " + path.string());
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) out.push_back(item);
    return out;
  };
  TaskSpec spec;
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "name") spec.name = val;
    else if (key == "metric") spec.metric = parse_metric(val);
    else if (key == "labels") spec.label_verbalizers = split(val);
    else if (key == "template") spec.template_fields = split(val);
    else throw DataError("unknown key '" + key + "' in task file " + path.string());
  }
  spec.validate();
  return spec;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    std::size_t e = tok.size();
    int trailing = 0;
    while (e > 0 && tok[e - 1] == ',') --e, ++trailing;
    if (e > 0) out.push_back(tok.substr(0, e));
    for (int i = 0; i < trailing; ++i) out.emplace_back(",");
  }
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty() && t != ",") out += ' ';
    out += t;
  }
  return out;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    if (!out.empty()) out += ' ';
    out += lowercase(tok);
  }
  return out;
}

}  // namespace retrikt
