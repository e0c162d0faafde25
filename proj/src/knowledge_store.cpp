#include "retrikt/knowledge_store.hpp"

#include "retrikt/io.hpp"
#include "retrikt/prompt_tuning.hpp"

#include <algorithm>
#include <unordered_set>
#include <stdexcept>

namespace retrikt {

namespace {

constexpr char kStoreMagic[] = "RKTSTORE";
constexpr std::uint32_t kStoreVersion = 1;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::string key = std::to_string(seed) + ":" + std::to_string(a) + ":" + std::to_string(b) + ":" + std::to_string(c);
  return fnv1a64(key);
}

std::string serialize_manifest(const std::map<std::string, std::string>& manifest) {
  std::string out;
  for (const auto& [k, v] : manifest) out += k + "=" + v + "\n";
  return out;
}

}  // namespace

std::optional<ParsedGeneration> parse_generated(const std::vector<int>& tokens, const Vocabulary& vocab,
                                                const TaskSpec& spec) {
  std::size_t end = tokens.size();
  if (end > 0 && tokens[end - 1] == Vocabulary::kEos) --end;
  if (end < 5) return std::nullopt;
  if (tokens[0] != Vocabulary::kLabelTag || tokens[2] != Vocabulary::kSeparator || tokens[3] != Vocabulary::kTextTag) {
    return std::nullopt;
  }
  if (tokens[1] < 0 || tokens[1] >= vocab.size()) return std::nullopt;
  ParsedGeneration p;
  p.label_text = vocab.token(tokens[1]);
  p.label_id = spec.label_id(p.label_text);
  if (p.label_id < 0) return std::nullopt;
  p.text_tokens.assign(tokens.begin() + 4, tokens.begin() + static_cast<long>(end));
  for (int t : p.text_tokens) {
    if (t == Vocabulary::kEos) return std::nullopt;
  }
  p.text = vocab.decode(p.text_tokens);
  return p;
}

std::optional<ParsedGeneration> parse_generated_text(const std::string& text, const Vocabulary& vocab,
                                                     const TaskSpec& spec) {
  return parse_generated(vocab.encode(text), vocab, spec);
}

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::original: return "D";
    case Provenance::input_view: return "D_I";
    case Provenance::output_view: return "D_O";
    case Provenance::input_output: return "D_IO";
    case Provenance::output_input: return "D_OI";
  }
  throw std::invalid_argument("invalid provenance");
}

GenerationSets GenerationSets::first_repetitions(int m) const {
  if (m < 1) throw std::invalid_argument("first_repetitions: m must be at least 1");
  GenerationSets out;
  auto keep = [m](const std::vector<GeneratedSample>& in, std::vector<GeneratedSample>& dst) {
    for (const auto& s : in) {
      if (s.repetition < m) dst.push_back(s);
    }
  };
  keep(d_i, out.d_i);
  keep(d_o, out.d_o);
  keep(d_io, out.d_io);
  keep(d_oi, out.d_oi);
  out.originals = originals;
  out.n = n;
  out.m = std::min(m, this->m);
  return out;
}

GenerationSets generate_sets(const std::vector<LabeledSample>& dataset, const TinyLm& lm, const SoftPrompt& input_prompt,
                             const SoftPrompt& output_prompt, const Vocabulary& vocab, const TaskSpec& spec,
                             const StopwordSet& stopwords, const GenerateConfig& config, std::uint64_t seed) {
  if (config.m < 1 || config.n < 1) throw std::invalid_argument("generate_sets: m and n must be at least 1");
  if (input_prompt.view != View::input_view || output_prompt.view != View::output_view) {
    throw std::invalid_argument("generate_sets: prompts must be the input-view and output-view prompts");
  }
  GenerationSets sets;
  sets.originals = static_cast<int>(dataset.size());
  sets.m = config.m;
  sets.n = config.n;
  auto run = [&](const SoftPrompt& prompt, const std::string& condition, std::mt19937_64& rng) {
    auto g = sample_top_p(lm, &prompt, vocab.encode(condition), config.top_p, config.max_new, rng);
    return parse_generated(g.tokens, vocab, spec);
  };
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    if (s.keywords.empty()) throw std::invalid_argument("generate_sets: sample '" + s.id + "' has no keywords");
    for (int r = 0; r < config.m; ++r) {
      std::mt19937_64 rng_i(stream_seed(seed, i, static_cast<std::uint64_t>(r), 0));
      std::mt19937_64 rng_o(stream_seed(seed, i, static_cast<std::uint64_t>(r), 1));
      for (int j = 0; j < config.n; ++j) {
        auto gi = run(input_prompt, keyword_condition(s.keywords), rng_i);
        if (!gi) continue;
        sets.d_i.push_back({gi->label_text, gi->text, Provenance::input_view, static_cast<int>(i), r});
        auto gio = run(output_prompt, label_condition(gi->label_text), rng_i);
        if (gio) sets.d_io.push_back({gio->label_text, gio->text, Provenance::input_output, static_cast<int>(i), r});
      }
      for (int j = 0; j < config.n; ++j) {
        auto go = run(output_prompt, label_condition(s.label_text), rng_o);
        if (!go) continue;
        sets.d_o.push_back({go->label_text, go->text, Provenance::output_view, static_cast<int>(i), r});
        auto goi = run(input_prompt, keyword_condition(keywords_with_fallback(go->text, stopwords)), rng_o);
        if (goi) sets.d_oi.push_back({goi->label_text, goi->text, Provenance::output_input, static_cast<int>(i), r});
      }
    }
  }
  return sets;
}

std::vector<std::string> dedup(const std::vector<std::string>& texts) {
  return dedup(texts, [](const std::string& s) -> const std::string& { return s; });
}

std::uint64_t KnowledgeStore::manifest_hash() const { return fnv1a64(serialize_manifest(manifest)); }

KnowledgeStore assemble_store(const std::vector<LabeledSample>& dataset, const GenerationSets& sets,
                              const RewardModel& rm, const TaskSpec& spec) {
  std::vector<KnowledgeRecord> all;
  for (const auto& s : dataset) all.push_back({s.text, s.label_text, Provenance::original, {}, {}});
  for (const auto* set : {&sets.d_i, &sets.d_o, &sets.d_io, &sets.d_oi}) {
    for (const auto& g : *set) all.push_back({g.text, g.label_text, g.provenance, {}, {}});
  }
  KnowledgeStore store;
  store.task = spec.name;
  store.num_classes = spec.num_classes();
  store.records = dedup(all, [](const KnowledgeRecord& r) -> const std::string& { return r.text; });
  if (rm.num_classes() != store.num_classes) throw std::invalid_argument("assemble_store: reward model class count mismatch");
  std::vector<std::string> texts;
  for (const auto& r : store.records) texts.push_back(r.text);
  nn::Matrix values = texts.empty() ? nn::Matrix(0, store.num_classes) : rm.predict_all(texts);
  for (std::size_t i = 0; i < store.records.size(); ++i) {
    nn::Matrix row = values.row(static_cast<Eigen::Index>(i));
    nn::round_to_storage(row);
    store.records[i].value = row.row(0).transpose();
  }
  return store;
}

void rebuild_keys(KnowledgeStore& store, const Encoder& student, const Vocabulary& vocab) {
  std::vector<std::string> texts;
  for (const auto& r : store.records) texts.push_back(r.text);
  store.embed_dim = student.config().hidden_dim;
  if (texts.empty()) return;
  nn::Matrix keys = student.embed_all(encode_texts(vocab, texts));
  nn::round_to_storage(keys);
  for (std::size_t i = 0; i < store.records.size(); ++i) {
    store.records[i].key = keys.row(static_cast<Eigen::Index>(i)).transpose();
  }
}

std::vector<QueryHit> query(const KnowledgeStore& store, const Eigen::VectorXd& q, int k) {
  if (store.records.empty()) throw std::invalid_argument("query: empty knowledge store");
  if (k < 1) throw std::invalid_argument("query: k must be at least 1");
  if (q.size() != store.embed_dim) throw std::invalid_argument("query: vector dimension differs from store keys");
  std::vector<QueryHit> hits;
  hits.reserve(store.records.size());
  for (std::size_t i = 0; i < store.records.size(); ++i) {
    hits.push_back({static_cast<int>(i), cosine(q, store.records[i].key)});
  }
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), hits.size());
  auto before = [](const QueryHit& a, const QueryHit& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.index < b.index);
  };
  std::partial_sort(hits.begin(), hits.begin() + static_cast<long>(take), hits.end(), before);
  hits.resize(take);
  return hits;
}

void save_store(const KnowledgeStore& store, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes(std::string_view(kStoreMagic, 8));
  w.u32(kStoreVersion);
  w.str(store.task);
  w.u64(store.records.size());
  w.u32(static_cast<std::uint32_t>(store.embed_dim));
  w.u32(static_cast<std::uint32_t>(store.num_classes));
  w.str(serialize_manifest(store.manifest));
  w.u64(store.manifest_hash());
  for (const auto& r : store.records) {
    if (r.key.size() != store.embed_dim || r.value.size() != store.num_classes) {
      throw std::invalid_argument("save_store: record dimensions differ from the store header");
    }
    w.str(r.text);
    w.str(r.label_text);
    w.u8(static_cast<std::uint8_t>(r.provenance));
    for (Eigen::Index j = 0; j < r.key.size(); ++j) w.f32(static_cast<float>(r.key(j)));
    for (Eigen::Index j = 0; j < r.value.size(); ++j) w.f32(static_cast<float>(r.value(j)));
  }
  w.u64(fnv1a64(w.buffer()));
  w.write_file(path);
}

KnowledgeStore load_store(const std::filesystem::path& path) {
  auto r = BinaryReader::from_file(path);
  if (r.bytes(8) != std::string(kStoreMagic, 8)) r.fail("bad store magic");
  if (std::uint32_t version = r.u32(); version != kStoreVersion) r.fail("unsupported store version " + std::to_string(version));
  KnowledgeStore store;
  store.task = r.str();
  const std::uint64_t count = r.u64();
  store.embed_dim = static_cast<int>(r.u32());
  store.num_classes = static_cast<int>(r.u32());
  std::string manifest = r.str();
  for (std::size_t pos = 0; pos < manifest.size();) {
    auto nl = manifest.find('\n', pos);
    if (nl == std::string::npos) r.fail("unterminated manifest line");
    std::string line = manifest.substr(pos, nl - pos);
    auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("malformed manifest line '" + line + "'");
    store.manifest[line.substr(0, eq)] = line.substr(eq + 1);
    pos = nl + 1;
  }
  if (r.u64() != store.manifest_hash()) r.fail("manifest hash mismatch");
  for (std::uint64_t i = 0; i < count; ++i) {
    KnowledgeRecord rec;
    rec.text = r.str();
    rec.label_text = r.str();
    std::uint8_t prov = r.u8();
    if (prov > 4) r.fail("invalid provenance byte " + std::to_string(prov));
    rec.provenance = static_cast<Provenance>(prov);
    rec.key.resize(store.embed_dim);
    for (int j = 0; j < store.embed_dim; ++j) rec.key(j) = r.f32();
    rec.value.resize(store.num_classes);
    for (int j = 0; j < store.num_classes; ++j) rec.value(j) = r.f32();
    store.records.push_back(std::move(rec));
  }
  const std::size_t body = r.offset();
  if (r.u64() != fnv1a64(std::string_view(r.data()).substr(0, body))) r.fail("checksum mismatch");
  if (r.offset() != r.size()) r.fail("trailing bytes");
  return store;
}

}  // namespace retrikt
