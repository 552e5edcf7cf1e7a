#pragma once

// Complete model state and its on-disk archive.
//
// A checkpoint is a directory:
//   manifest.json     format tag, version, model/shift config, seed, stage,
//                     code version, and one entry per array
//                     {name, file, rows, cols, fnv1a}
//   vocab.txt         one token per line, line number = id
//   <name>.bin        one file per parameter array:
//                       bytes 0..7   magic "DIARRAY1"
//                       bytes 8..15  rows, uint64 little-endian
//                       bytes 16..23 cols, uint64 little-endian
//                       then rows*cols IEEE-754 float64, little-endian, row-major
// Directories are written to a sibling temp path and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "domaininv/data.hpp"
#include "domaininv/domain_transform.hpp"
#include "domaininv/qa_model.hpp"

#ifndef DOMAININV_GIT_DESCRIBE
#define DOMAININV_GIT_DESCRIBE "unknown"
#endif

namespace domaininv {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class Stage { Initialized, SourceFinetuned, DomainInvariant, Adapted };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Initialized: return "initialized";
    case Stage::SourceFinetuned: return "source_finetuned";
    case Stage::DomainInvariant: return "domain_invariant";
    case Stage::Adapted: return "adapted";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "initialized") return Stage::Initialized;
  if (s == "source_finetuned") return Stage::SourceFinetuned;
  if (s == "domain_invariant") return Stage::DomainInvariant;
  if (s == "adapted") return Stage::Adapted;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

struct ModelState {
  ModelConfig config;
  ShiftConfig shift_config;
  EncoderParams encoder;
  ClassifierHead c1;
  ClassifierHead c2;
  ShiftProjection shift;
  Vocabulary vocab;
  std::uint64_t seed = 0;
  Stage stage = Stage::Initialized;

  template <typename F>
  void visit_arrays(F&& f) {
    encoder.visit([&](const std::string& n, Parameter& p) { f("encoder." + n, p.value()); });
    f("encoder.batchnorm.running_mean", encoder.bn_running.mean);
    f("encoder.batchnorm.running_var", encoder.bn_running.var);
    c1.visit("c1.", [&](const std::string& n, Parameter& p) { f(n, p.value()); });
    c2.visit("c2.", [&](const std::string& n, Parameter& p) { f(n, p.value()); });
    f("shift.w", shift.w.value());
  }
};

// Fresh state: encoder, C1 (C2 a copy of it) and W from one seed.
inline ModelState make_model_state(ModelConfig cfg, const ShiftConfig& shift_cfg, Vocabulary vocab,
                                   std::uint64_t seed) {
  cfg.vocab_size = vocab.size();
  cfg.validate();
  ModelState s;
  s.config = cfg;
  s.shift_config = shift_cfg;
  auto init = init_model(cfg, seed);
  s.encoder = std::move(init.encoder);
  s.c1 = std::move(init.c1);
  s.c2 = std::move(init.c2);
  s.shift = init_shift_projection(shift_cfg, cfg.hidden_dim, seed);
  s.vocab = std::move(vocab);
  s.seed = seed;
  return s;
}

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointFormat = "domaininv-checkpoint";
inline constexpr int kCheckpointVersion = 1;
inline constexpr char kArrayMagic[8] = {'D', 'I', 'A', 'R', 'R', 'A', 'Y', '1'};

inline void write_array(const Matrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  const std::uint64_t r = m.rows, c = m.cols;
  out.write(kArrayMagic, 8);
  out.write(reinterpret_cast<const char*>(&r), 8);
  out.write(reinterpret_cast<const char*>(&c), 8);
  out.write(reinterpret_cast<const char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * 8));
  if (!out) throw CheckpointError("short write to " + path.string());
}

inline Matrix read_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing array file " + path.string());
  char magic[8];
  std::uint64_t r = 0, c = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&r), 8);
  in.read(reinterpret_cast<char*>(&c), 8);
  if (!in || std::memcmp(magic, kArrayMagic, 8) != 0) throw CheckpointError("corrupt array header in " + path.string());
  Matrix m(r, c);
  in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size() * 8));
  if (!in) throw CheckpointError("truncated array data in " + path.string());
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes in " + path.string());
  return m;
}

inline std::string manifest_diff(const nlohmann::json& expected, const nlohmann::json& found) {
  std::string out;
  for (const auto& op : nlohmann::json::diff(expected, found))
    out += "\n  " + op.value("op", std::string()) + " " + op.value("path", std::string()) +
           (op.contains("value") ? " -> " + op["value"].dump() : std::string());
  return out;
}

inline void save_checkpoint(ModelState& state, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"version", kCheckpointVersion},
                             {"config", state.config},
                             {"shift_config", state.shift_config},
                             {"seed", state.seed},
                             {"stage", stage_name(state.stage)},
                             {"git_describe", DOMAININV_GIT_DESCRIBE},
                             {"arrays", nlohmann::json::array()}};
  state.visit_arrays([&](const std::string& name, const Matrix& m) {
    const std::string file = name + ".bin";
    write_array(m, tmp / file);
    manifest["arrays"].push_back(
        {{"name", name}, {"file", file}, {"rows", m.rows}, {"cols", m.cols}, {"fnv1a", checksum(m)}});
  });
  save_vocabulary(state.vocab, tmp / "vocab.txt");
  {
    std::ofstream out(tmp / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
    if (!out) throw CheckpointError("cannot write manifest in " + tmp.string());
  }
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw CheckpointError("no manifest.json in " + dir.string());
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
}

// Loads a checkpoint; when `expected` is given its model config must match
// the manifest exactly.
inline ModelState load_checkpoint(const std::filesystem::path& dir, const std::optional<ModelConfig>& expected = {}) {
  const nlohmann::json manifest = read_manifest(dir);
  if (manifest.value("format", std::string()) != kCheckpointFormat ||
      manifest.value("version", -1) != kCheckpointVersion) {
    const nlohmann::json want = {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}};
    const nlohmann::json got = {{"format", manifest.value("format", nlohmann::json())},
                                {"version", manifest.value("version", nlohmann::json())}};
    throw CheckpointError("checkpoint " + dir.string() + " has an unsupported format:" + manifest_diff(want, got));
  }
  ModelState s;
  s.config = manifest.at("config").get<ModelConfig>();
  if (expected && !(*expected == s.config))
    throw CheckpointError("checkpoint " + dir.string() + " config mismatch:" +
                          manifest_diff(nlohmann::json(*expected), manifest.at("config")));
  s.config.validate();
  s.shift_config = manifest.at("shift_config").get<ShiftConfig>();
  s.seed = manifest.at("seed").get<std::uint64_t>();
  s.stage = parse_stage(manifest.at("stage").get<std::string>());
  s.vocab = load_vocabulary(dir / "vocab.txt");
  if (s.vocab.size() != s.config.vocab_size)
    throw CheckpointError("checkpoint " + dir.string() + ": vocabulary size " + std::to_string(s.vocab.size()) +
                          " does not match config vocab_size " + std::to_string(s.config.vocab_size));
  // Shapes come from a freshly initialized model; values from the archive.
  ModelState shaped = make_model_state(s.config, s.shift_config, s.vocab, 0);
  s.encoder = std::move(shaped.encoder);
  s.c1 = std::move(shaped.c1);
  s.c2 = std::move(shaped.c2);
  s.shift = std::move(shaped.shift);
  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("arrays")) entries[e.at("name").get<std::string>()] = e;
  s.visit_arrays([&](const std::string& name, Matrix& m) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("checkpoint " + dir.string() + " lacks array " + name);
    Matrix loaded = read_array(dir / it->second.at("file").get<std::string>());
    if (!loaded.same_shape(m))
      throw CheckpointError("array " + name + " has shape " + shape_str(loaded) + ", expected " + shape_str(m));
    if (checksum(loaded) != it->second.at("fnv1a").get<std::uint64_t>())
      throw CheckpointError("array " + name + " fails its checksum");
    m = std::move(loaded);
  });
  return s;
}

}  // namespace domaininv
