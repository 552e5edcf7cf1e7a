#pragma once

// QA corpora: SQuAD v1.1 / MRQA readers, wh-word question typing,
// tokenization and packing, question-type-matched parallel batch sampling,
// and the synthetic domain-shift benchmark generator.

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "domaininv/qa_model.hpp"
#include "domaininv/rng.hpp"

namespace domaininv {

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class QuestionType : int { What = 0, Who, When, Where, Why, How, Which, Other };
inline constexpr std::size_t kNumQuestionTypes = 8;

inline const char* question_type_name(QuestionType t) {
  static constexpr std::array<const char*, kNumQuestionTypes> names{"WHAT", "WHO",  "WHEN",  "WHERE",
                                                                    "WHY",  "HOW",  "WHICH", "OTHER"};
  return names[static_cast<std::size_t>(t)];
}

struct QASample {
  std::string id;
  std::string context;
  std::string question;
  std::optional<std::string> answer_text;
  std::optional<std::size_t> answer_char_start;
  std::vector<std::string> all_answers;  // every reference answer, for scoring
  QuestionType question_type = QuestionType::Other;

  bool has_answer() const { return answer_text.has_value(); }
};

struct Corpus {
  std::vector<QASample> samples;
  std::string domain_tag;
  // question type -> sample indices; partitions [0, samples.size())
  std::array<std::vector<std::size_t>, kNumQuestionTypes> by_type;

  std::size_t size() const { return samples.size(); }
  void reindex() {
    for (auto& v : by_type) v.clear();
    for (std::size_t i = 0; i < samples.size(); ++i)
      by_type[static_cast<std::size_t>(samples[i].question_type)].push_back(i);
  }
  void strip_answers() {
    for (auto& s : samples) {
      s.answer_text.reset();
      s.answer_char_start.reset();
      s.all_answers.clear();
    }
  }
};

struct ReadReport {
  std::size_t records = 0;
  std::size_t multi_answer_questions = 0;
  std::size_t skipped_blank_lines = 0;
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Question typing

inline std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::vector<std::string> split_whitespace(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// First wh-word (case-insensitive, punctuation stripped) decides the type.
inline QuestionType tag_question_type(const std::string& question) {
  static const std::unordered_map<std::string, QuestionType> table{
      {"what", QuestionType::What},   {"who", QuestionType::Who},     {"whom", QuestionType::Who},
      {"whose", QuestionType::Who},   {"when", QuestionType::When},   {"where", QuestionType::Where},
      {"why", QuestionType::Why},     {"how", QuestionType::How},     {"which", QuestionType::Which}};
  for (const auto& raw : split_whitespace(question)) {
    std::string w;
    for (unsigned char c : raw)
      if (std::isalnum(c)) w += static_cast<char>(std::tolower(c));
    if (auto it = table.find(w); it != table.end()) return it->second;
  }
  return QuestionType::Other;
}

// ---------------------------------------------------------------------------
// Readers

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace detail {
inline void check_answer_offset(const QASample& s) {
  if (!s.answer_text) return;
  const std::size_t start = *s.answer_char_start;
  if (start > s.context.size() || s.context.compare(start, s.answer_text->size(), *s.answer_text) != 0)
    throw DataError("record " + s.id + ": answer '" + *s.answer_text + "' does not occur at offset " +
                    std::to_string(start));
}
}  // namespace detail

// SQuAD v1.1: data -> paragraphs -> qas -> answers. The first answer is kept.
inline Corpus read_squad_json(const std::filesystem::path& path, ReadReport* report = nullptr,
                              const std::string& domain_tag = "squad") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
  if (!doc.contains("data") || !doc["data"].is_array()) throw DataError(path.string() + ": missing 'data' array");
  Corpus corpus;
  corpus.domain_tag = domain_tag;
  ReadReport local;
  ReadReport& rep = report ? *report : local;
  for (const auto& article : doc["data"]) {
    if (!article.contains("paragraphs")) throw DataError(path.string() + ": article without 'paragraphs'");
    for (const auto& para : article["paragraphs"]) {
      if (!para.contains("context") || !para.contains("qas"))
        throw DataError(path.string() + ": paragraph without 'context'/'qas'");
      const std::string context = para["context"].get<std::string>();
      for (const auto& qa : para["qas"]) {
        const std::string id = qa.contains("id") ? qa["id"].get<std::string>() : std::string("<missing id>");
        if (!qa.contains("question") || !qa.contains("answers") || !qa["answers"].is_array())
          throw DataError("record " + id + ": missing 'question' or 'answers'");
        QASample s;
        s.id = id;
        s.context = context;
        s.question = qa["question"].get<std::string>();
        s.question_type = tag_question_type(s.question);
        const auto& answers = qa["answers"];
        if (!answers.empty()) {
          if (!answers[0].contains("text") || !answers[0].contains("answer_start"))
            throw DataError("record " + id + ": answer missing 'text' or 'answer_start'");
          s.answer_text = answers[0]["text"].get<std::string>();
          s.answer_char_start = answers[0]["answer_start"].get<std::size_t>();
          for (const auto& a : answers) s.all_answers.push_back(a["text"].get<std::string>());
          if (answers.size() > 1) ++rep.multi_answer_questions;
          detail::check_answer_offset(s);
        }
        ++rep.records;
        corpus.samples.push_back(std::move(s));
      }
    }
  }
  corpus.reindex();
  return corpus;
}

// MRQA shared-task JSONL: an optional header line, then one paragraph per line
// with "context" and "qas" (qid, question, answers, detected_answers).
inline Corpus read_mrqa_jsonl(const std::filesystem::path& path, bool drop_answers, ReadReport* report = nullptr,
                              const std::string& domain_tag = "mrqa") {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Corpus corpus;
  corpus.domain_tag = domain_tag;
  ReadReport local;
  ReadReport& rep = report ? *report : local;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      ++rep.skipped_blank_lines;
      rep.warnings.push_back(path.string() + ":" + std::to_string(lineno) + ": blank line skipped");
      continue;
    }
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    if (rec.contains("header")) {
      if (!rec["header"].is_null() && rec["header"].contains("dataset") && domain_tag == "mrqa")
        corpus.domain_tag = rec["header"]["dataset"].get<std::string>();
      continue;
    }
    if (!rec.contains("context") || !rec.contains("qas") || !rec["qas"].is_array())
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": record lacks 'context' or 'qas'");
    const std::string context = rec["context"].get<std::string>();
    for (const auto& qa : rec["qas"]) {
      if (!qa.contains("qid") || !qa.contains("question"))
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": qa lacks 'qid' or 'question'");
      QASample s;
      s.id = qa["qid"].get<std::string>();
      s.context = context;
      s.question = qa["question"].get<std::string>();
      s.question_type = tag_question_type(s.question);
      if (!drop_answers) {
        if (qa.contains("answers"))
          for (const auto& a : qa["answers"]) s.all_answers.push_back(a.get<std::string>());
        if (qa.contains("detected_answers") && !qa["detected_answers"].empty()) {
          const auto& det = qa["detected_answers"][0];
          const auto& cs = det.at("char_spans").at(0);
          const std::size_t a = cs.at(0).get<std::size_t>(), b = cs.at(1).get<std::size_t>();
          if (b < a || b >= context.size())
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": char span out of range for " + s.id);
          s.answer_char_start = a;
          s.answer_text = context.substr(a, b - a + 1);
          if (s.all_answers.empty()) s.all_answers.push_back(*s.answer_text);
        } else if (!s.all_answers.empty()) {
          const auto pos = context.find(s.all_answers.front());
          if (pos != std::string::npos) {
            s.answer_char_start = pos;
            s.answer_text = s.all_answers.front();
          }
        }
        if (s.all_answers.size() > 1) ++rep.multi_answer_questions;
      }
      ++rep.records;
      corpus.samples.push_back(std::move(s));
    }
  }
  corpus.reindex();
  return corpus;
}

// Sidecar gold answers: {"qid": {"answers": [...], "char_start": n}}.
inline void attach_gold(Corpus& corpus, const std::filesystem::path& sidecar) {
  const auto doc = nlohmann::json::parse(read_file(sidecar));
  for (auto& s : corpus.samples) {
    auto it = doc.find(s.id);
    if (it == doc.end()) throw DataError("gold sidecar " + sidecar.string() + " lacks " + s.id);
    s.all_answers = (*it)["answers"].get<std::vector<std::string>>();
    if (!s.all_answers.empty()) {
      s.answer_text = s.all_answers.front();
      s.answer_char_start = (*it)["char_start"].get<std::size_t>();
      detail::check_answer_offset(s);
    }
  }
}

// ---------------------------------------------------------------------------
// Writers (MRQA-style JSONL + gold sidecar)

inline nlohmann::json mrqa_record(const QASample& s, bool with_answers) {
  nlohmann::json qa = {{"qid", s.id}, {"question", s.question}};
  if (with_answers && s.answer_text) {
    qa["answers"] = s.all_answers;
    const std::size_t a = *s.answer_char_start;
    qa["detected_answers"] = nlohmann::json::array(
        {{{"text", *s.answer_text}, {"char_spans", {{a, a + s.answer_text->size() - 1}}}}});
  }
  return {{"context", s.context}, {"qas", nlohmann::json::array({qa})}};
}

inline void write_mrqa_jsonl(const Corpus& corpus, const std::filesystem::path& path, bool with_answers) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json{{"header", {{"dataset", corpus.domain_tag}, {"split", "synthetic"}}}}.dump() << '\n';
  for (const auto& s : corpus.samples) out << mrqa_record(s, with_answers).dump() << '\n';
}

inline void write_gold_sidecar(const Corpus& corpus, const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& s : corpus.samples)
    if (s.answer_text) doc[s.id] = {{"answers", s.all_answers}, {"char_start", *s.answer_char_start}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Vocabulary and packing

struct Vocabulary {
  static constexpr std::size_t kPad = 0, kUnk = 1, kCls = 2, kSep = 3;
  std::vector<std::string> id_to_token{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  std::unordered_map<std::string, std::size_t> token_to_id{{"[PAD]", 0}, {"[UNK]", 1}, {"[CLS]", 2}, {"[SEP]", 3}};

  std::size_t size() const { return id_to_token.size(); }
  std::size_t id(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }
  void add(const std::string& token) {
    if (token_to_id.emplace(token, id_to_token.size()).second) id_to_token.push_back(token);
  }
};

// Lowercased whitespace tokens from every question and context, sorted.
inline Vocabulary build_vocabulary(const std::vector<const Corpus*>& corpora) {
  std::set<std::string> words;
  for (const Corpus* c : corpora)
    for (const auto& s : c->samples) {
      for (auto& w : split_whitespace(s.question)) words.insert(lowercase(w));
      for (auto& w : split_whitespace(s.context)) words.insert(lowercase(w));
    }
  Vocabulary v;
  for (const auto& w : words) v.add(w);
  return v;
}

inline void save_vocabulary(const Vocabulary& v, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : v.id_to_token) out << t << '\n';
}

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Vocabulary v;
  v.id_to_token.clear();
  v.token_to_id.clear();
  for (std::string line; std::getline(in, line);) {
    v.token_to_id.emplace(line, v.id_to_token.size());
    v.id_to_token.push_back(line);
  }
  if (v.size() < 4 || v.id_to_token[Vocabulary::kPad] != "[PAD]" || v.id_to_token[Vocabulary::kSep] != "[SEP]")
    throw DataError(path.string() + ": vocabulary lacks reserved tokens");
  return v;
}

struct WordPiece {
  std::string text;
  std::size_t char_begin;
  std::size_t char_end;  // exclusive
};

inline std::vector<WordPiece> split_with_offsets(const std::string& s) {
  std::vector<WordPiece> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.push_back({s.substr(b, i - b), b, i});
  }
  return out;
}

enum class PackStatus { Ok, Unlabeled, AnswerTruncated, AnswerTooLong, AnswerNotAligned };

struct PackResult {
  TokenizedExample example;
  PackStatus status = PackStatus::Ok;
};

// [CLS] question [SEP] context [SEP], padded to max_seq_len. The context is
// truncated to fit; questions are capped at half the sequence.
inline PackResult pack_example(const QASample& s, const Vocabulary& vocab, const ModelConfig& cfg) {
  PackResult r;
  TokenizedExample& ex = r.example;
  ex.id = s.id;
  ex.question_type = static_cast<int>(s.question_type);
  const std::size_t n = cfg.max_seq_len;
  if (n < 5) throw ConfigError("pack_example: max_seq_len too small");
  auto q_words = split_whitespace(s.question);
  const std::size_t q_cap = std::max<std::size_t>(1, n / 2 - 2);
  if (q_words.size() > q_cap) q_words.resize(q_cap);
  const auto c_words = split_with_offsets(s.context);
  if (c_words.empty()) throw DataError("record " + s.id + ": empty context");
  ex.token_ids.push_back(Vocabulary::kCls);
  ex.groups.push_back(TokenGroup::Special);
  for (const auto& w : q_words) {
    ex.token_ids.push_back(vocab.id(lowercase(w)));
    ex.groups.push_back(TokenGroup::Question);
  }
  ex.token_ids.push_back(Vocabulary::kSep);
  ex.groups.push_back(TokenGroup::Special);
  ex.context_first = ex.token_ids.size();
  const std::size_t room = n - ex.context_first - 1;
  const std::size_t c_len = std::min(room, c_words.size());
  for (std::size_t i = 0; i < c_len; ++i) {
    ex.token_ids.push_back(vocab.id(lowercase(c_words[i].text)));
    ex.groups.push_back(TokenGroup::Context);
    ex.context_words.push_back(c_words[i].text);
  }
  ex.context_last = ex.context_first + c_len - 1;
  ex.token_ids.push_back(Vocabulary::kSep);
  ex.groups.push_back(TokenGroup::Special);
  while (ex.token_ids.size() < n) {
    ex.token_ids.push_back(Vocabulary::kPad);
    ex.groups.push_back(TokenGroup::Pad);
  }
  if (!s.answer_text) {
    r.status = PackStatus::Unlabeled;
    return r;
  }
  const std::size_t a_begin = *s.answer_char_start, a_end = a_begin + s.answer_text->size();
  std::optional<std::size_t> first, last;
  for (std::size_t i = 0; i < c_words.size(); ++i)
    if (c_words[i].char_end > a_begin && c_words[i].char_begin < a_end) {
      if (!first) first = i;
      last = i;
    }
  if (!first) {
    r.status = PackStatus::AnswerNotAligned;
    return r;
  }
  if (*last >= c_len) {
    r.status = PackStatus::AnswerTruncated;
    return r;
  }
  if (*last - *first + 1 > cfg.max_answer_len) {
    r.status = PackStatus::AnswerTooLong;
    return r;
  }
  ex.span = Span{ex.context_first + *first, ex.context_first + *last};
  for (std::size_t p = ex.span->start; p <= ex.span->end; ++p) ex.groups[p] = TokenGroup::Answer;
  return r;
}

struct PackedCorpus {
  std::vector<TokenizedExample> examples;
  std::vector<std::size_t> sample_index;  // examples[i] came from corpus.samples[sample_index[i]]
  std::array<std::vector<std::size_t>, kNumQuestionTypes> by_type;  // indices into examples
  std::map<PackStatus, std::size_t> dropped;
};

// Packs every sample. With require_span, samples whose answer cannot be
// represented are dropped (counted in `dropped`).
inline PackedCorpus pack_corpus(const Corpus& corpus, const Vocabulary& vocab, const ModelConfig& cfg,
                                bool require_span) {
  PackedCorpus out;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    PackResult r = pack_example(corpus.samples[i], vocab, cfg);
    if (require_span && r.status != PackStatus::Ok) {
      ++out.dropped[r.status];
      continue;
    }
    if (!require_span) {
      // Unlabeled use: no trace of a gold answer survives packing.
      r.example.span.reset();
      for (auto& g : r.example.groups)
        if (g == TokenGroup::Answer) g = TokenGroup::Context;
    }
    out.by_type[static_cast<std::size_t>(r.example.question_type)].push_back(out.examples.size());
    out.examples.push_back(std::move(r.example));
    out.sample_index.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parallel batch sampling

enum class PairTier : std::uint8_t { TypeMatched = 0, OtherFallback = 1, AnyFallback = 2 };

struct ParallelBatch {
  std::vector<std::size_t> source;  // indices into the source pool
  std::vector<std::size_t> target;  // indices into the target pool, target[i] paired with source[i]
  std::vector<PairTier> tier;

  std::size_t size() const { return source.size(); }
  std::size_t fallbacks() const {
    return static_cast<std::size_t>(std::count_if(tier.begin(), tier.end(), [](PairTier t) {
      return t != PairTier::TypeMatched;
    }));
  }
};

using TypeIndex = std::array<std::vector<std::size_t>, kNumQuestionTypes>;

inline std::size_t steps_per_epoch(std::size_t source_size, std::size_t batch_size) {
  return batch_size == 0 ? 0 : source_size / batch_size;
}

// Slice `step` of the epoch-seeded permutation of [0, n); the trailing
// partial batch of each epoch is dropped.
inline std::vector<std::size_t> epoch_batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::uint64_t step) {
  if (batch_size == 0 || batch_size > n)
    throw DataError("batch_size " + std::to_string(batch_size) + " exceeds pool size " + std::to_string(n));
  const std::size_t per_epoch = steps_per_epoch(n, batch_size);
  const std::uint64_t epoch = step / per_epoch, in_epoch = step % per_epoch;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng shuffle_rng = make_rng(seed, streams::kShuffle, epoch);
  std::shuffle(perm.begin(), perm.end(), shuffle_rng);
  return std::vector<std::size_t>(perm.begin() + static_cast<std::ptrdiff_t>(in_epoch * batch_size),
                                  perm.begin() + static_cast<std::ptrdiff_t>((in_epoch + 1) * batch_size));
}

// Source examples: an epoch-seeded permutation sliced by the step. Target
// partners: uniform within the same question type, falling back to OTHER,
// then to any type. Deterministic per (seed, step).
inline ParallelBatch sample_parallel_batch(const std::vector<int>& source_types, const TypeIndex& target_by_type,
                                           std::size_t batch_size, std::uint64_t seed, std::uint64_t step) {
  if (source_types.empty()) throw DataError("sample_parallel_batch: empty source");
  std::size_t target_total = 0;
  for (const auto& v : target_by_type) target_total += v.size();
  if (target_total == 0) throw DataError("sample_parallel_batch: empty target");
  if (batch_size == 0 || batch_size > source_types.size())
    throw DataError("sample_parallel_batch: batch_size " + std::to_string(batch_size) + " exceeds source size " +
                    std::to_string(source_types.size()));
  const auto chosen = epoch_batch_indices(source_types.size(), batch_size, seed, step);
  std::vector<std::size_t> all_targets;
  for (const auto& v : target_by_type) all_targets.insert(all_targets.end(), v.begin(), v.end());
  std::sort(all_targets.begin(), all_targets.end());

  Rng rng = make_rng(seed, streams::kSampler, step);
  auto pick = [&rng](const std::vector<std::size_t>& pool) {
    std::uniform_int_distribution<std::size_t> u(0, pool.size() - 1);
    return pool[u(rng)];
  };
  ParallelBatch b;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t s = chosen[i];
    const auto& same = target_by_type.at(static_cast<std::size_t>(source_types[s]));
    const auto& other = target_by_type[static_cast<std::size_t>(QuestionType::Other)];
    b.source.push_back(s);
    if (!same.empty()) {
      b.target.push_back(pick(same));
      b.tier.push_back(PairTier::TypeMatched);
    } else if (!other.empty()) {
      b.target.push_back(pick(other));
      b.tier.push_back(PairTier::OtherFallback);
    } else {
      b.target.push_back(pick(all_targets));
      b.tier.push_back(PairTier::AnyFallback);
    }
  }
  return b;
}

inline ParallelBatch sample_parallel_batch(const PackedCorpus& source, const PackedCorpus& target,
                                           std::size_t batch_size, std::uint64_t seed, std::uint64_t step) {
  std::vector<int> types;
  for (const auto& e : source.examples) types.push_back(e.question_type);
  return sample_parallel_batch(types, target.by_type, batch_size, seed, step);
}

inline ParallelBatch sample_parallel_batch(const Corpus& source, const Corpus& target, std::size_t batch_size,
                                           std::uint64_t seed, std::uint64_t step) {
  std::vector<int> types;
  for (const auto& s : source.samples) types.push_back(static_cast<int>(s.question_type));
  return sample_parallel_batch(types, target.by_type, batch_size, seed, step);
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
//
// Contexts are lists of facts "<entity> <relation> <value...> ." and each
// question asks for the value of one (entity, relation) pair. All corpora
// generated from the same world_seed share one lexicon; the shift knobs
// change how a domain renders it.

enum class TemplateStyle : int { Canonical = 0, Inverted = 1, Terse = 2 };

struct DomainShift {
  TemplateStyle template_style = TemplateStyle::Canonical;
  double surface_permutation_fraction = 0.0;  // fraction of lexicon words given a domain-specific surface form
  double distractor_rate = 0.0;               // chance per fact of an extra same-relation distractor fact
};

struct SynthConfig {
  std::size_t vocab_size = 240;  // content lexicon size (entities + values)
  std::size_t context_len = 5;   // facts per context
  std::size_t num_samples = 1000;
  DomainShift shift;
  std::uint64_t world_seed = 0;
  std::uint64_t seed = 0;
  std::string domain_tag = "synthetic";

  void validate() const {
    const double f = shift.surface_permutation_fraction, r = shift.distractor_rate;
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("synth config: surface_permutation_fraction outside [0,1]");
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("synth config: distractor_rate outside [0,1]");
    if (vocab_size < 40) throw ConfigError("synth config: vocab_size must be >= 40");
    if (context_len < 1) throw ConfigError("synth config: context_len must be >= 1");
    if (num_samples < 1) throw ConfigError("synth config: num_samples must be >= 1");
    const int style = static_cast<int>(shift.template_style);
    if (style < 0 || style > 2) throw ConfigError("synth config: unknown template_style");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"context_len", c.context_len},
       {"num_samples", c.num_samples},
       {"shift",
        {{"template_style", static_cast<int>(c.shift.template_style)},
         {"surface_permutation_fraction", c.shift.surface_permutation_fraction},
         {"distractor_rate", c.shift.distractor_rate}}},
       {"world_seed", c.world_seed},
       {"seed", c.seed},
       {"domain_tag", c.domain_tag}};
}
inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.context_len = j.value("context_len", c.context_len);
  c.num_samples = j.value("num_samples", c.num_samples);
  if (j.contains("shift")) {
    const auto& s = j["shift"];
    c.shift.template_style = static_cast<TemplateStyle>(s.value("template_style", 0));
    c.shift.surface_permutation_fraction = s.value("surface_permutation_fraction", 0.0);
    c.shift.distractor_rate = s.value("distractor_rate", 0.0);
  }
  c.world_seed = j.value("world_seed", c.world_seed);
  c.seed = j.value("seed", c.seed);
  c.domain_tag = j.value("domain_tag", c.domain_tag);
}

namespace synth {

struct Relation {
  std::string word;
  QuestionType type;
  std::string wh;          // question word
  std::size_t value_pool;  // index into World::values
  std::size_t value_len;   // tokens per value
};

struct World {
  std::vector<std::string> entities;
  std::vector<std::vector<std::string>> values;  // pools of value words
  std::vector<Relation> relations;
  // Words eligible for domain-specific surface forms, and those forms in
  // permutation order: the first round(f * n) of `order` are renamed.
  std::vector<std::string> order;
  std::unordered_map<std::string, std::string> alias;
};

inline std::string make_word(Rng& rng, std::size_t syllables) {
  static constexpr std::array<const char*, 20> onset{"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                     "s", "t", "v", "z", "br", "dr", "kl", "st", "tr", "sh"};
  static constexpr std::array<const char*, 6> vowel{"a", "e", "i", "o", "u", "ai"};
  std::uniform_int_distribution<std::size_t> o(0, onset.size() - 1), v(0, vowel.size() - 1);
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += onset[o(rng)];
    w += vowel[v(rng)];
  }
  return w;
}

inline World build_world(std::size_t lexicon_size, std::uint64_t world_seed) {
  Rng rng = make_rng(world_seed, streams::kSynth, 0);
  std::set<std::string> used;
  auto fresh = [&](std::size_t syl) {
    for (;;) {
      std::string w = make_word(rng, syl);
      if (used.insert(w).second) return w;
    }
  };
  World w;
  // Relation words are fixed English-like tokens so question typing stays meaningful.
  const std::vector<std::tuple<std::string, QuestionType, std::string, std::size_t>> rels{
      {"founder", QuestionType::Who, "who", 2},    {"author", QuestionType::Who, "who", 2},
      {"founded", QuestionType::When, "when", 1},  {"opened", QuestionType::When, "when", 1},
      {"located", QuestionType::Where, "where", 1}, {"origin", QuestionType::Where, "where", 1},
      {"product", QuestionType::What, "what", 1},  {"motto", QuestionType::What, "what", 2},
      {"league", QuestionType::Which, "which", 1}, {"rival", QuestionType::Which, "which", 1},
      {"members", QuestionType::How, "how", 1},    {"reason", QuestionType::Why, "why", 2},
  };
  for (const auto& r : rels) used.insert(std::get<0>(r));
  const std::size_t n_entities = lexicon_size / 3;
  const std::size_t per_pool = std::max<std::size_t>(8, (lexicon_size - n_entities) / rels.size());
  for (std::size_t i = 0; i < n_entities; ++i) w.entities.push_back(fresh(3));
  for (std::size_t r = 0; r < rels.size(); ++r) {
    std::vector<std::string> pool;
    for (std::size_t i = 0; i < per_pool; ++i) pool.push_back(fresh(2));
    w.values.push_back(std::move(pool));
    const auto& [word, type, wh, len] = rels[r];
    w.relations.push_back({word, type, wh, r, len});
  }
  w.order = w.entities;
  for (const auto& pool : w.values) w.order.insert(w.order.end(), pool.begin(), pool.end());
  for (const auto& r : w.relations) w.order.push_back(r.word);
  std::shuffle(w.order.begin(), w.order.end(), rng);
  for (const auto& word : w.order) w.alias[word] = fresh(3);
  return w;
}

}  // namespace synth

// Generates a corpus; answers are retained (strip them for unlabeled use).
inline Corpus generate_synthetic_corpus(const SynthConfig& cfg) {
  cfg.validate();
  const synth::World world = synth::build_world(cfg.vocab_size, cfg.world_seed);
  const std::size_t n_renamed = static_cast<std::size_t>(
      std::llround(cfg.shift.surface_permutation_fraction * static_cast<double>(world.order.size())));
  std::unordered_map<std::string, std::string> surface;
  for (std::size_t i = 0; i < n_renamed; ++i) surface[world.order[i]] = world.alias.at(world.order[i]);
  auto render = [&](const std::string& w) {
    auto it = surface.find(w);
    return it == surface.end() ? w : it->second;
  };

  Rng rng = make_rng(cfg.seed, streams::kSynth, 1);
  std::uniform_int_distribution<std::size_t> pick_rel(0, world.relations.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_ent(0, world.entities.size() - 1);
  std::bernoulli_distribution distract(cfg.shift.distractor_rate);

  Corpus corpus;
  corpus.domain_tag = cfg.domain_tag;
  for (std::size_t n = 0; n < cfg.num_samples; ++n) {
    struct Fact {
      std::size_t entity, relation;
      std::vector<std::string> value;
    };
    auto make_value = [&](std::size_t rel) {
      const auto& r = world.relations[rel];
      const auto& pool = world.values[r.value_pool];
      std::uniform_int_distribution<std::size_t> pv(0, pool.size() - 1);
      std::vector<std::string> v;
      for (std::size_t t = 0; t < r.value_len; ++t) v.push_back(pool[pv(rng)]);
      return v;
    };
    std::vector<Fact> facts;
    std::set<std::size_t> used_entities;
    while (facts.size() < cfg.context_len) {
      const std::size_t e = pick_ent(rng);
      if (!used_entities.insert(e).second) continue;
      const std::size_t r = pick_rel(rng);
      facts.push_back({e, r, make_value(r)});
    }
    const std::size_t asked = std::uniform_int_distribution<std::size_t>(0, facts.size() - 1)(rng);
    // Distractors share the asked relation but name another entity.
    std::vector<Fact> all = facts;
    for (std::size_t i = 0; i < facts.size(); ++i) {
      if (!distract(rng)) continue;
      std::size_t e = pick_ent(rng);
      while (used_entities.count(e)) e = pick_ent(rng);
      used_entities.insert(e);
      all.push_back({e, facts[asked].relation, make_value(facts[asked].relation)});
    }
    const Fact target = facts[asked];
    std::shuffle(all.begin(), all.end(), rng);

    std::string context;
    std::size_t answer_start = 0;
    std::string answer;
    for (const Fact& f : all) {
      if (!context.empty()) context += ' ';
      context += render(world.entities[f.entity]) + ' ' + render(world.relations[f.relation].word) + ' ';
      const bool is_answer = f.entity == target.entity && f.relation == target.relation;
      std::string value;
      for (std::size_t t = 0; t < f.value.size(); ++t) value += (t ? " " : "") + render(f.value[t]);
      if (is_answer) {
        answer_start = context.size();
        answer = value;
      }
      context += value + " .";
    }
    const auto& rel = world.relations[target.relation];
    const std::string ent = render(world.entities[target.entity]);
    const std::string rw = render(rel.word);
    std::string question;
    switch (cfg.shift.template_style) {
      case TemplateStyle::Canonical: question = rel.wh + " is the " + rw + " of " + ent + " ?"; break;
      case TemplateStyle::Inverted: question = "for " + ent + " , " + rel.wh + " was its " + rw + " ?"; break;
      case TemplateStyle::Terse: question = ent + " " + rw + " " + rel.wh + " ?"; break;
    }
    QASample s;
    s.id = cfg.domain_tag + "-" + std::to_string(cfg.seed) + "-" + std::to_string(n);
    s.context = std::move(context);
    s.question = std::move(question);
    s.answer_text = answer;
    s.answer_char_start = answer_start;
    s.all_answers = {answer};
    s.question_type = tag_question_type(s.question);
    corpus.samples.push_back(std::move(s));
  }
  corpus.reindex();
  return corpus;
}

}  // namespace domaininv
