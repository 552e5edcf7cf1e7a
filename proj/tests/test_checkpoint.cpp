#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace domaininv;
namespace fs = std::filesystem;

namespace {

std::string raw(const fs::path& p) { return read_file(p); }

void overwrite(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

std::uint64_t le64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

Matrix eval_logits(ModelState& m, const std::vector<TokenizedExample>& ex) {
  const EncodedBatch b = encode_batch(ex, m.config);
  const EncoderOutput h = forward_encoder(m.encoder, m.config, b, ForwardOptions{});
  return classify_spans(m.c1, h.final_hidden, b).start.value();
}

ModelState saved_state(const fs::path& dir) {
  ModelState m = testutil::tiny_state(5);
  m.encoder.bn_running.mean.data[0] = 0.25;
  save_checkpoint(m, dir);
  return m;
}

}  // namespace

TEST(ArrayFile, ByteLayout) {
  const auto dir = testutil::temp_dir("ckpt-layout");
  Matrix m(2, 3);
  for (std::size_t i = 0; i < 6; ++i) m.data[i] = 0.5 * static_cast<double>(i) - 1.0;
  write_array(m, dir / "a.bin");
  const std::string bytes = raw(dir / "a.bin");
  ASSERT_EQ(bytes.size(), 24u + 6 * 8);
  EXPECT_EQ(bytes.substr(0, 8), "DIARRAY1");
  EXPECT_EQ(le64(bytes, 8), 2u);
  EXPECT_EQ(le64(bytes, 16), 3u);
  for (std::size_t i = 0; i < 6; ++i) {
    const std::uint64_t bits = le64(bytes, 24 + 8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    EXPECT_EQ(v, m.data[i]);
  }
  EXPECT_EQ(read_array(dir / "a.bin"), m);
}

TEST(ArrayFile, RejectsDamagedFiles) {
  const auto dir = testutil::temp_dir("ckpt-damage");
  write_array(Matrix(2, 2), dir / "a.bin");
  const std::string good = raw(dir / "a.bin");
  overwrite(dir / "a.bin", "XIARRAY1" + good.substr(8));
  EXPECT_THROW(read_array(dir / "a.bin"), CheckpointError);
  overwrite(dir / "a.bin", good.substr(0, good.size() - 3));
  EXPECT_THROW(read_array(dir / "a.bin"), CheckpointError);
  overwrite(dir / "a.bin", good + "z");
  EXPECT_THROW(read_array(dir / "a.bin"), CheckpointError);
  EXPECT_THROW(read_array(dir / "missing.bin"), CheckpointError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = testutil::temp_dir("ckpt-roundtrip") / "ckpt";
  ModelState m = saved_state(dir);
  m.stage = Stage::DomainInvariant;
  save_checkpoint(m, dir);
  EXPECT_FALSE(fs::exists(dir.string() + ".tmp"));
  ModelState back = load_checkpoint(dir, m.config);
  EXPECT_EQ(back.stage, Stage::DomainInvariant);
  EXPECT_EQ(back.seed, m.seed);
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.shift_config.k, m.shift_config.k);
  EXPECT_EQ(back.vocab.size(), m.vocab.size());
  const Checksums a = checksums(m), b = checksums(back);
  EXPECT_EQ(a.encoder, b.encoder);
  EXPECT_EQ(a.c1, b.c1);
  EXPECT_EQ(a.c2, b.c2);
  EXPECT_EQ(a.shift, b.shift);
  const auto ex = testutil::tiny_examples(3, m.config, 9);
  EXPECT_EQ(eval_logits(m, ex), eval_logits(back, ex));
}

TEST(Checkpoint, ManifestListsEveryArray) {
  const auto dir = testutil::temp_dir("ckpt-manifest") / "ckpt";
  ModelState m = saved_state(dir);
  const auto manifest = read_manifest(dir);
  EXPECT_EQ(manifest["format"], "domaininv-checkpoint");
  EXPECT_EQ(manifest["version"], 1);
  EXPECT_EQ(manifest["stage"], "source_finetuned");
  std::size_t n = 0;
  m.visit_arrays([&](const std::string&, Matrix&) { ++n; });
  EXPECT_EQ(manifest["arrays"].size(), n);
  for (const auto& e : manifest["arrays"]) EXPECT_TRUE(fs::exists(dir / e["file"].get<std::string>()));
}

TEST(Checkpoint, ConfigMismatchNamesTheField) {
  const auto dir = testutil::temp_dir("ckpt-mismatch") / "ckpt";
  ModelState m = saved_state(dir);
  ModelConfig other = m.config;
  other.hidden_dim = 16;
  try {
    load_checkpoint(dir, other);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("/hidden_dim"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RejectsWrongVersionAndDamagedArrays) {
  const auto dir = testutil::temp_dir("ckpt-corrupt") / "ckpt";
  saved_state(dir);
  const std::string manifest = raw(dir / "manifest.json");
  auto j = nlohmann::json::parse(manifest);
  j["version"] = 2;
  overwrite(dir / "manifest.json", j.dump());
  try {
    load_checkpoint(dir);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("/version"), std::string::npos) << e.what();
  }
  overwrite(dir / "manifest.json", "{not json");
  EXPECT_THROW(load_checkpoint(dir), CheckpointError);
  overwrite(dir / "manifest.json", manifest);
  EXPECT_NO_THROW(load_checkpoint(dir));

  const fs::path arr = dir / "c1.start.w.bin";
  std::string bytes = raw(arr);
  bytes[30] = static_cast<char>(bytes[30] ^ 0x40);
  overwrite(arr, bytes);
  EXPECT_THROW(load_checkpoint(dir), CheckpointError);
  fs::remove(arr);
  EXPECT_THROW(load_checkpoint(dir), CheckpointError);
  fs::remove(dir / "manifest.json");
  EXPECT_THROW(load_checkpoint(dir), CheckpointError);
}

TEST(Stage, NamesRoundTrip) {
  for (Stage s : {Stage::Initialized, Stage::SourceFinetuned, Stage::DomainInvariant, Stage::Adapted})
    EXPECT_EQ(parse_stage(stage_name(s)), s);
  EXPECT_STREQ(stage_name(Stage::SourceFinetuned), "source_finetuned");
  EXPECT_THROW(parse_stage("finished"), std::invalid_argument);
}
