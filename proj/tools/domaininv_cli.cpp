// domaininv: synthesize corpora, fine-tune on source, adapt to target,
// evaluate and report.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "domaininv/domaininv.hpp"

namespace fs = std::filesystem;
using namespace domaininv;
using nlohmann::json;

namespace {

constexpr const char* kRunRootEnv = "DOMAININV_RUN_ROOT";

// Bad invocation or precondition; maps to exit code 1.
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Options shared by every subcommand that resolves a RunConfig.
struct CommonFlags {
  std::optional<std::string> config_file;
  bool toy = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  std::optional<std::string> data_dir;
  std::optional<double> source_lr, adapt_lr, adversarial_lr, fraction;
  std::optional<std::size_t> batch_size, source_epochs, invariant_epochs, adapt_epochs, patience, k, projections;
  std::optional<std::size_t> train_samples, dev_samples;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON run config merged over the defaults")->check(CLI::ExistingFile);
    app->add_flag("--toy", toy, "start from the desk-scale preset instead of the full-scale defaults");
    app->add_option("--seed", seed, "run seed; component seeds derive from it");
    app->add_option("--run-dir", run_dir, std::string("run directory (default $") + kRunRootEnv + "/run-<seed>)");
    app->add_option("--data", data_dir, "directory holding source_/target_ train/dev splits");
    app->add_option("--source-lr", source_lr);
    app->add_option("--adapt-lr", adapt_lr, "Step 1 learning rate");
    app->add_option("--adversarial-lr", adversarial_lr, "Step 2 / Step 3 learning rate");
    app->add_option("--batch-size", batch_size);
    app->add_option("--source-epochs", source_epochs);
    app->add_option("--invariant-epochs", invariant_epochs);
    app->add_option("--adapt-epochs", adapt_epochs);
    app->add_option("--patience", patience);
    app->add_option("--k", k, "pooled shift dimension of the transformation layer");
    app->add_option("--projections", projections, "slicing directions per discrepancy estimate");
    app->add_option("--fraction", fraction, "target surface permutation fraction (synth)");
    app->add_option("--train-samples", train_samples, "synthetic training split size");
    app->add_option("--dev-samples", dev_samples, "synthetic dev split size");
  }

  // defaults -> preset -> file -> flags; the seed then fans out.
  RunConfig resolve() const {
    RunConfig c = toy ? toy_preset() : RunConfig{};
    if (config_file) {
      json j;
      try {
        j = json::parse(read_file(*config_file));
      } catch (const json::parse_error& e) {
        throw ConfigError(*config_file + ": invalid JSON: " + e.what());
      }
      merge_json(j, c);
    }
    auto set = [](auto& field, const auto& flag) {
      if (flag) field = *flag;
    };
    set(c.seed, seed);
    set(c.run_dir, run_dir);
    if (data_dir) c.data = DataPaths::in_dir(*data_dir);
    set(c.train.source_lr, source_lr);
    set(c.train.adapt_lr, adapt_lr);
    set(c.train.adversarial_lr, adversarial_lr);
    set(c.train.batch_size, batch_size);
    set(c.train.source_epochs, source_epochs);
    set(c.train.invariant_epochs, invariant_epochs);
    set(c.train.adapt_epochs, adapt_epochs);
    set(c.train.patience, patience);
    set(c.shift.k, k);
    set(c.swd.num_projections, projections);
    set(c.benchmark.target_shift.surface_permutation_fraction, fraction);
    set(c.benchmark.train_samples, train_samples);
    set(c.benchmark.dev_samples, dev_samples);
    c.apply_seed();
    if (c.run_dir.empty()) {
      const char* root = std::getenv(kRunRootEnv);
      c.run_dir = (fs::path(root && *root ? root : "runs") / ("run-" + std::to_string(c.seed))).string();
    }
    c.validate();
    return c;
  }
};

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("no such file: " + path.string());
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError(path.string() + ": invalid JSON: " + e.what());
  }
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("no ") + what + " corpus configured (use --data or the config file)");
  if (!fs::exists(path)) throw UsageError(std::string(what) + " corpus not found: " + path);
}

fs::path checkpoint_dir(const RunConfig& c, Stage s) { return fs::path(c.run_dir) / "checkpoints" / stage_name(s); }

Stage stage_of(const fs::path& ckpt) {
  if (!fs::exists(ckpt / "manifest.json")) throw UsageError("no checkpoint at " + ckpt.string());
  try {
    return parse_stage(read_manifest(ckpt).at("stage").get<std::string>());
  } catch (const std::exception& e) {
    throw UsageError("unreadable checkpoint manifest in " + ckpt.string() + ": " + e.what());
  }
}

// Metrics of G + C1 on the dev splits that have answers available.
json evaluate_splits(ModelState& m, const RunConfig& c) {
  json out = json::object();
  for (const auto& [name, path] : {std::pair{"source_dev", c.data.source_dev}, std::pair{"target_dev", c.data.target_dev}}) {
    if (path.empty() || !fs::exists(path)) continue;
    const Corpus corpus = load_corpus(path, true);
    const PackedCorpus packed = pack_corpus(corpus, m.vocab, m.config, false);
    out[name] = evaluate(m, corpus, packed, c.train.eval_batch_size);
  }
  return out;
}

void record_metrics(const RunConfig& c, Stage stage, const json& results) {
  const fs::path path = fs::path(c.run_dir) / "metrics.json";
  json doc = fs::exists(path) ? read_json(path) : json{{"stages", json::object()}};
  doc["stages"][stage_name(stage)] = results;
  write_json(path, doc);
}

void print_results(const std::string& label, const json& results) {
  std::vector<std::string> cols;
  ReportRow row{label, {}};
  for (const auto& [name, m] : results.items()) {
    cols.push_back(name);
    row.cells.push_back(m.get<Metrics>());
  }
  if (!cols.empty()) std::cout << render_table(cols, {row});
}

struct LogFile {
  std::ofstream out;
  explicit LogFile(const RunConfig& c) {
    fs::create_directories(c.run_dir);
    out.open(fs::path(c.run_dir) / "losslog.jsonl", std::ios::app | std::ios::binary);
    if (!out) throw std::runtime_error("cannot open loss log in " + c.run_dir);
  }
};

// ---------------------------------------------------------------------------

int cmd_synth(const CommonFlags& flags, const std::string& out_dir) {
  const RunConfig c = flags.resolve();
  const Benchmark b = make_benchmark(c.benchmark);
  write_benchmark(b, out_dir);
  write_json(fs::path(out_dir) / "benchmark.json", c.benchmark);
  std::cout << "wrote " << b.source_train.size() << "/" << b.source_dev.size() << " source and "
            << b.target_train.size() << "/" << b.target_dev.size() << " target samples to " << out_dir << "\n";
  return 0;
}

int cmd_finetune(const CommonFlags& flags, const std::optional<std::string>& from, bool dry_run) {
  RunConfig c = flags.resolve();
  require_file(c.data.source_train, "source training");
  std::optional<ModelState> resumed;
  if (from) {
    const Stage s = stage_of(*from);
    if (s != Stage::Initialized && s != Stage::SourceFinetuned)
      throw UsageError(std::string("finetune resumes only from initialized or source_finetuned, found ") +
                       stage_name(s));
  }
  const Corpus source = load_corpus(c.data.source_train, true);
  std::vector<const Corpus*> texts{&source};
  Corpus target;
  if (!c.data.target_train.empty() && fs::exists(c.data.target_train)) {
    target = load_corpus(c.data.target_train, false);
    texts.push_back(&target);
  }
  ModelState m;
  if (from) {
    m = load_checkpoint(*from);
    c.model = m.config;
    c.shift = m.shift_config;
  } else {
    m = make_model_state(c.model, c.shift, build_vocabulary(texts), c.seed);
    c.model = m.config;
  }
  const PackedCorpus packed = pack_corpus(source, m.vocab, m.config, true);
  std::size_t dropped = 0;
  for (const auto& [_, n] : packed.dropped) dropped += n;
  std::cout << "source: " << packed.examples.size() << " packed, " << dropped << " dropped; vocabulary "
            << m.vocab.size() << "\n";
  if (packed.examples.empty()) throw UsageError("no usable source examples in " + c.data.source_train);
  if (dry_run) {
    std::cout << json(c).dump(2) << "\n";
    return 0;
  }
  write_json(fs::path(c.run_dir) / "config.json", c);
  LogFile lf(c);
  LossLog log;
  log.jsonl = &lf.out;
  train_source_baseline(m, packed, c.train, log);
  save_checkpoint(m, checkpoint_dir(c, Stage::SourceFinetuned));
  const json results = evaluate_splits(m, c);
  record_metrics(c, Stage::SourceFinetuned, results);
  print_results("source_finetuned", results);
  return 0;
}

int cmd_adapt(const CommonFlags& flags, const std::optional<std::string>& from, bool no_label_correction) {
  RunConfig c = flags.resolve();
  if (no_label_correction) c.train.label_correction = false;
  const fs::path ckpt = from ? fs::path(*from) : checkpoint_dir(c, Stage::SourceFinetuned);
  const Stage s = stage_of(ckpt);
  if (s != Stage::SourceFinetuned)
    throw UsageError(std::string("adapt needs a source_finetuned checkpoint, found ") + stage_name(s) + " at " +
                     ckpt.string());
  require_file(c.data.source_train, "source training");
  require_file(c.data.target_train, "target training");
  ModelState m = load_checkpoint(ckpt);
  c.model = m.config;
  if (c.shift.k != m.shift_config.k || c.shift.placement != m.shift_config.placement) {
    m.shift_config = c.shift;
    m.shift = init_shift_projection(c.shift, m.config.hidden_dim, c.seed);
  }
  const Corpus source = load_corpus(c.data.source_train, true);
  Corpus target = load_corpus(c.data.target_train, false);
  target.strip_answers();
  const PackedCorpus ps = pack_corpus(source, m.vocab, m.config, true);
  const PackedCorpus pt = pack_corpus(target, m.vocab, m.config, false);

  write_json(fs::path(c.run_dir) / "config.json", c);
  LogFile lf(c);
  LossLog log;
  log.jsonl = &lf.out;
  std::size_t skipped_ce = 0;
  log.notes = [&](const std::string& msg) {
    if (msg.find("CE term skipped") != std::string::npos)
      ++skipped_ce;
    else
      std::cerr << "note: " << msg << "\n";
  };
  log.on_epoch_end = [&](const std::string& stage, std::size_t epoch) {
    if (stage != "domain_invariant" || epoch + 1 != c.train.invariant_epochs) return;
    ModelState snapshot = m;
    snapshot.stage = Stage::DomainInvariant;
    save_checkpoint(snapshot, checkpoint_dir(c, Stage::DomainInvariant));
  };
  const AdaptResult r = run_adaptation(m, ps, pt, c.train, c.swd, log);
  if (m.stage == Stage::Adapted) save_checkpoint(m, checkpoint_dir(c, Stage::Adapted));
  std::cout << "domain-invariant steps " << r.invariant_steps << ", adversarial steps " << r.adversarial_steps
            << (r.stopped_early ? " (stopped early)" : "") << "; " << skipped_ce
            << " classifier steps had no inconsistent pairs\n";
  const json results = evaluate_splits(m, c);
  record_metrics(c, m.stage, results);
  print_results(stage_name(m.stage), results);
  return 0;
}

// Eval output: {"model": label, "stage": ..., "results": {split: metrics}}.
int cmd_eval(const CommonFlags& flags, std::optional<std::string> ckpt_arg, const std::vector<std::string>& corpora,
             const std::optional<std::string>& out, const std::optional<std::string>& label) {
  const RunConfig c = flags.resolve();
  fs::path ckpt;
  if (ckpt_arg) {
    ckpt = *ckpt_arg;
  } else {
    for (Stage s : {Stage::Adapted, Stage::DomainInvariant, Stage::SourceFinetuned})
      if (fs::exists(checkpoint_dir(c, s) / "manifest.json")) {
        ckpt = checkpoint_dir(c, s);
        break;
      }
    if (ckpt.empty()) throw UsageError("no checkpoint under " + c.run_dir + "; pass --checkpoint");
  }
  const Stage stage = stage_of(ckpt);
  std::vector<std::string> paths = corpora;
  if (paths.empty())
    for (const auto& p : {c.data.source_dev, c.data.target_dev})
      if (!p.empty() && fs::exists(p)) paths.push_back(p);
  if (paths.empty()) throw UsageError("nothing to evaluate: pass corpora or --data");
  for (const auto& p : paths) require_file(p, "evaluation");
  ModelState m = load_checkpoint(ckpt);
  json results = json::object();
  for (const auto& p : paths) {
    const Corpus corpus = load_corpus(p, true);
    const PackedCorpus packed = pack_corpus(corpus, m.vocab, m.config, false);
    results[fs::path(p).stem().string()] = evaluate(m, corpus, packed, c.train.eval_batch_size);
  }
  const json doc{{"model", label.value_or(stage_name(stage))},
                 {"stage", stage_name(stage)},
                 {"checkpoint", ckpt.string()},
                 {"results", results}};
  write_json(out ? fs::path(*out) : fs::path(c.run_dir) / ("eval_" + std::string(stage_name(stage)) + ".json"), doc);
  print_results(doc["model"].get<std::string>(), results);
  return 0;
}

// Rows from an eval document, or one row per stage of a run's metrics.json.
std::vector<std::pair<std::string, json>> rows_of(const fs::path& path) {
  const json doc = read_json(path);
  std::vector<std::pair<std::string, json>> rows;
  if (doc.contains("results")) {
    rows.emplace_back(doc.value("model", path.stem().string()), doc["results"]);
  } else if (doc.contains("stages")) {
    for (const auto& [stage, results] : doc["stages"].items()) rows.emplace_back(stage, results);
  } else {
    throw UsageError(path.string() + ": not a metrics file");
  }
  return rows;
}

std::pair<std::vector<std::string>, std::vector<ReportRow>> table_of(const std::vector<std::string>& files) {
  std::vector<std::pair<std::string, json>> raw;
  for (const auto& f : files)
    for (auto& r : rows_of(f)) raw.push_back(std::move(r));
  std::vector<std::string> columns;
  for (const auto& [_, results] : raw)
    for (const auto& [name, __] : results.items())
      if (std::find(columns.begin(), columns.end(), name) == columns.end()) columns.push_back(name);
  std::vector<ReportRow> rows;
  for (const auto& [model, results] : raw) {
    ReportRow row{model, {}};
    for (const auto& col : columns) {
      if (!results.contains(col)) throw UsageError("row " + model + " has no result for " + col);
      row.cells.push_back(results[col].get<Metrics>());
    }
    rows.push_back(std::move(row));
  }
  return {columns, rows};
}

int cmd_compare(const std::vector<std::string>& files) {
  if (files.size() != 2) throw UsageError("--compare takes exactly two metrics files");
  const auto [columns, rows] = table_of(files);
  if (rows.size() != 2) throw UsageError("--compare needs one row per file");
  std::cout << render_delta(columns, rows[0], rows[1]);
  return 0;
}

int cmd_report(const std::vector<std::string>& files, bool csv) {
  const auto [columns, rows] = table_of(files);
  std::cout << (csv ? render_csv(columns, rows) : render_table(columns, rows));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DomainInv: unsupervised domain adaptation for extractive QA"};
  app.require_subcommand(1);

  CommonFlags synth_flags, ft_flags, adapt_flags, eval_flags;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate the synthetic source/target benchmark");
  synth_flags.attach(synth);
  synth->add_option("--out", synth_out, "output directory (created if missing)")->required();

  std::optional<std::string> ft_from;
  bool dry_run = false;
  auto* finetune = app.add_subcommand("finetune", "fine-tune encoder and C1 on the labeled source");
  ft_flags.attach(finetune);
  finetune->add_option("--from", ft_from, "continue from this checkpoint");
  finetune->add_flag("--dry-run", dry_run, "validate config and data, then stop");

  std::optional<std::string> adapt_from;
  bool no_lc = false;
  auto* adapt = app.add_subcommand("adapt", "domain-invariant fine-tuning and adversarial label correction");
  adapt_flags.attach(adapt);
  adapt->add_option("--from", adapt_from, "source_finetuned checkpoint (default <run-dir>/checkpoints/source_finetuned)");
  adapt->add_flag("--no-label-correction", no_lc, "stop after domain-invariant fine-tuning");

  std::optional<std::string> eval_ckpt, eval_out, eval_label;
  std::vector<std::string> eval_corpora, compare;
  auto* eval = app.add_subcommand("eval", "score G + C1 on corpora, or compare two metrics files");
  eval_flags.attach(eval);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory (default: latest stage in the run dir)");
  eval->add_option("corpora", eval_corpora, "corpora to score (default: dev splits of --data)");
  eval->add_option("--out", eval_out, "metrics file to write");
  eval->add_option("--label", eval_label, "row label in reports");
  eval->add_option("--compare", compare, "two metrics files to render as a delta table")->expected(2);

  std::vector<std::string> report_files;
  bool csv = false;
  auto* report = app.add_subcommand("report", "render metrics files as an EM / F1 table");
  report->add_option("metrics", report_files, "eval outputs or run metrics.json files")->required();
  report->add_flag("--csv", csv, "comma-separated output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(synth_flags, synth_out);
    if (*finetune) return cmd_finetune(ft_flags, ft_from, dry_run);
    if (*adapt) return cmd_adapt(adapt_flags, adapt_from, no_lc);
    if (*eval) return compare.empty() ? cmd_eval(eval_flags, eval_ckpt, eval_corpora, eval_out, eval_label)
                                      : cmd_compare(compare);
    if (*report) return cmd_report(report_files, csv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
