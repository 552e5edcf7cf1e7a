#pragma once

// Run configuration shared by the command-line tool and the acceptance
// harness: one JSON document merging model, training, shift, discrepancy and
// benchmark settings, plus the synthetic benchmark splits and corpus loading.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include "json.hpp"

#include "domaininv/adaptation.hpp"
#include "domaininv/data.hpp"

namespace domaininv {

// Source and target splits of the synthetic benchmark. Both domains share one
// world; the target renders it with `target_shift`.
struct BenchmarkConfig {
  SynthConfig base;  // lexicon size, facts per context; its shift applies to the source
  DomainShift target_shift{TemplateStyle::Canonical, 0.5, 0.0};
  std::size_t train_samples = 3000;
  std::size_t dev_samples = 400;

  void validate() const {
    SynthConfig t = base;
    t.shift = target_shift;
    base.validate();
    t.validate();
    if (train_samples == 0 || dev_samples == 0) throw ConfigError("benchmark config: split sizes must be positive");
  }
};

inline void to_json(nlohmann::json& j, const BenchmarkConfig& c) {
  SynthConfig t = c.base;
  t.shift = c.target_shift;
  j = {{"base", c.base},
       {"target_shift", nlohmann::json(t)["shift"]},
       {"train_samples", c.train_samples},
       {"dev_samples", c.dev_samples}};
}

inline void from_json(const nlohmann::json& j, BenchmarkConfig& c) {
  if (j.contains("base")) c.base = j["base"].get<SynthConfig>();
  if (j.contains("target_shift")) {
    SynthConfig t;
    t.shift = c.target_shift;
    nlohmann::json wrapped = nlohmann::json(t);
    wrapped["shift"].update(j["target_shift"]);
    c.target_shift = wrapped.get<SynthConfig>().shift;
  }
  c.train_samples = j.value("train_samples", c.train_samples);
  c.dev_samples = j.value("dev_samples", c.dev_samples);
}

// Corpus files. `.json` is read as SQuAD, anything else as MRQA JSONL; a
// sibling `<stem>.gold.json` supplies held-back answers for evaluation.
struct DataPaths {
  std::string source_train;
  std::string source_dev;
  std::string target_train;
  std::string target_dev;

  static DataPaths in_dir(const std::filesystem::path& dir) {
    return {(dir / "source_train.jsonl").string(), (dir / "source_dev.jsonl").string(),
            (dir / "target_train.jsonl").string(), (dir / "target_dev.jsonl").string()};
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataPaths, source_train, source_dev, target_train, target_dev)

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  ShiftConfig shift;
  SWDConfig swd;
  BenchmarkConfig benchmark;
  DataPaths data;
  std::string run_dir;
  std::uint64_t seed = 0;

  // Propagates the run seed to every component that draws random numbers.
  void apply_seed() {
    train.seed = seed;
    swd.seed = seed;
    benchmark.base.world_seed = seed;
  }

  void validate() const {
    model.validate();
    train.validate();
    shift.validate(model.hidden_dim);
    swd.validate();
    benchmark.validate();
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model}, {"train", c.train},     {"shift", c.shift},     {"swd", c.swd},
       {"benchmark", c.benchmark}, {"data", c.data}, {"run_dir", c.run_dir}, {"seed", c.seed}};
}

// Merges `j` over `c`: absent keys keep their current values.
inline void merge_json(const nlohmann::json& j, RunConfig& c) {
  static const std::set<std::string> known{"model", "train", "shift", "swd", "benchmark", "data", "run_dir", "seed"};
  if (!j.is_object()) throw ConfigError("run config: top level must be an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("run config: unknown key '" + key + "'");
  auto check_keys = [](const std::string& where, const nlohmann::json& base, const nlohmann::json& over) {
    if (!over.is_object()) throw ConfigError("run config: '" + where + "' must be an object");
    for (const auto& [key, _] : over.items())
      if (!base.contains(key)) throw ConfigError("run config: unknown key '" + where + "." + key + "'");
  };
  auto merged = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    nlohmann::json base = field;
    check_keys(key, base, j[key]);
    base.update(j[key]);
    field = base.get<std::remove_reference_t<decltype(field)>>();
  };
  try {
    merged("model", c.model);
    merged("train", c.train);
    merged("shift", c.shift);
    merged("swd", c.swd);
    if (j.contains("benchmark")) {
      nlohmann::json base = c.benchmark;
      check_keys("benchmark", base, j["benchmark"]);
      for (const auto& [k, v] : j["benchmark"].items()) {
        if (v.is_object() && base.contains(k))
          base[k].update(v);
        else
          base[k] = v;
      }
      c.benchmark = base.get<BenchmarkConfig>();
    }
    merged("data", c.data);
    c.run_dir = j.value("run_dir", c.run_dir);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

inline void from_json(const nlohmann::json& j, RunConfig& c) { merge_json(j, c); }

// Desk-scale settings for the synthetic benchmark. The defaults of the
// individual config types stay at the full-scale values.
inline RunConfig toy_preset() {
  RunConfig c;
  c.model.num_layers = 2;
  c.model.hidden_dim = 32;
  c.model.num_heads = 2;
  c.model.ffn_dim = 64;
  c.model.max_seq_len = 26;
  c.model.max_answer_len = 4;
  c.model.dropout_rate = 0.0;
  c.train.source_lr = 3e-3;
  c.train.adapt_lr = 1e-4;
  c.train.adversarial_lr = 3e-5;
  c.train.batch_size = 16;
  c.train.source_epochs = 12;
  c.train.invariant_epochs = 3;
  c.train.adapt_epochs = 8;
  c.shift.k = 16;
  c.swd.num_projections = 128;
  c.benchmark.base.vocab_size = 240;
  c.benchmark.base.context_len = 3;
  c.benchmark.train_samples = 3000;
  c.benchmark.dev_samples = 400;
  c.benchmark.target_shift.surface_permutation_fraction = 0.5;
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct Benchmark {
  Corpus source_train;
  Corpus source_dev;
  Corpus target_train;  // answers retained; strip before adaptation
  Corpus target_dev;
};

inline Benchmark make_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  auto split = [&](bool target, bool dev, std::uint64_t tag) {
    SynthConfig s = cfg.base;
    if (target) s.shift = cfg.target_shift;
    s.num_samples = dev ? cfg.dev_samples : cfg.train_samples;
    s.seed = s.world_seed * 10 + tag;
    s.domain_tag = std::string(target ? "target" : "source") + (dev ? "_dev" : "_train");
    return generate_synthetic_corpus(s);
  };
  return {split(false, false, 1), split(false, true, 2), split(true, false, 3), split(true, true, 4)};
}

inline std::filesystem::path gold_sidecar_path(const std::filesystem::path& corpus) {
  std::filesystem::path p = corpus;
  p.replace_extension(".gold.json");
  return p;
}

// Writes the four splits as MRQA-style JSONL. Only the source training split
// carries answers inline; the others get a gold sidecar.
inline void write_benchmark(const Benchmark& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const DataPaths p = DataPaths::in_dir(dir);
  write_mrqa_jsonl(b.source_train, p.source_train, true);
  for (const auto& [corpus, path] : {std::pair{&b.source_dev, p.source_dev}, std::pair{&b.target_train, p.target_train},
                                     std::pair{&b.target_dev, p.target_dev}}) {
    write_mrqa_jsonl(*corpus, path, false);
    write_gold_sidecar(*corpus, gold_sidecar_path(path));
  }
}

// Reads a corpus. With `with_gold` a sidecar, when present, restores answers.
inline Corpus load_corpus(const std::filesystem::path& path, bool with_gold) {
  if (!std::filesystem::exists(path)) throw DataError("corpus not found: " + path.string());
  Corpus c = path.extension() == ".json" ? read_squad_json(path, nullptr, path.stem().string())
                                         : read_mrqa_jsonl(path, !with_gold, nullptr, path.stem().string());
  if (with_gold && std::filesystem::exists(gold_sidecar_path(path))) attach_gold(c, gold_sidecar_path(path));
  return c;
}

}  // namespace domaininv
