#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fuseseg/checkpoint.hpp"
#include "fuseseg/config.hpp"
#include "fuseseg/rng.hpp"
#include "support/testutil.hpp"

using namespace fuseseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int c = 0;
    path = fs::temp_directory_path() / ("fuseseg_io_" + std::to_string(::getpid()) + "_" + std::to_string(c++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

ParamSet sample_params(uint64_t seed) {
  Rng rng(seed);
  ParamSet ps;
  ps.add(Tensor::from({3, 2}, testutil::random_vec(rng, 6), true, "a.w"));
  ps.add(Tensor::from({4}, testutil::random_vec(rng, 4), true, "a.b"));
  ps.add(Tensor::from({2, 2, 3, 3}, testutil::random_vec(rng, 36), true, "conv.w"));
  return ps;
}

}  // namespace

TEST_CASE("checkpoint: save -> load -> save is byte identical") {
  TempDir tmp;
  ParamSet ps = sample_params(1);
  fs::path p1 = tmp.path / "a.ckpt";
  io::save_checkpoint(p1.string(), ps);

  ParamSet fresh = sample_params(2);  // different values, same structure
  io::load_checkpoint(p1.string(), fresh);
  fs::path p2 = tmp.path / "b.ckpt";
  io::save_checkpoint(p2.string(), fresh);
  CHECK(slurp(p1) == slurp(p2));

  // loaded values equal the f32-rounded originals
  for (std::size_t i = 0; i < ps.items().size(); ++i) {
    const auto& orig = ps.items()[i];
    const auto& got = fresh.items()[i];
    for (std::size_t j = 0; j < orig.size(); ++j) {
      CHECK(got.values()[j] == static_cast<double>(static_cast<float>(orig.values()[j])));
    }
  }
}

TEST_CASE("checkpoint: corrupted CRC and wrong magic are rejected loudly") {
  TempDir tmp;
  ParamSet ps = sample_params(3);
  fs::path p = tmp.path / "c.ckpt";
  io::save_checkpoint(p.string(), ps);

  std::string bytes = slurp(p);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x5a);
  fs::path bad = tmp.path / "bad.ckpt";
  std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK_THROWS_WITH_AS(io::read_checkpoint(bad.string()),
                       doctest::Contains("CRC"), std::runtime_error);

  std::string magic = slurp(p);
  magic[0] = 'X';
  fs::path badmagic = tmp.path / "badmagic.ckpt";
  std::ofstream(badmagic, std::ios::binary).write(magic.data(), static_cast<std::streamsize>(magic.size()));
  CHECK_THROWS_WITH_AS(io::read_checkpoint(badmagic.string()),
                       doctest::Contains("magic"), std::runtime_error);
}

TEST_CASE("checkpoint: missing parameters raise, extra entries are tolerated") {
  TempDir tmp;
  ParamSet big = sample_params(4);
  fs::path p = tmp.path / "big.ckpt";
  io::save_checkpoint(p.string(), big);

  ParamSet small;
  Rng rng(5);
  small.add(Tensor::from({3, 2}, testutil::random_vec(rng, 6), true, "a.w"));
  io::load_checkpoint(p.string(), small);  // extra file entries are fine
  CHECK(small.get("a.w").values()[0] ==
        static_cast<double>(static_cast<float>(big.get("a.w").values()[0])));

  ParamSet mismatched;
  mismatched.add(Tensor::zeros({9}, true, "not.there"));
  CHECK_THROWS_WITH_AS(io::load_checkpoint(p.string(), mismatched),
                       doctest::Contains("not.there"), std::runtime_error);
}

TEST_CASE("config: defaults, echo round-trip, unknown keys rejected") {
  RunConfig def;
  CHECK(def.seed == 42);
  CHECK(def.patch == 32);
  CHECK(def.epochs_pretrain == 10);
  CHECK(def.epochs_fusion == 20);
  CHECK(def.lr_fusion == doctest::Approx(1e-4));
  CHECK(def.seg_input == "fused");

  RunConfig parsed = RunConfig::from_text("");
  CHECK(parsed.serialize() == def.serialize());

  RunConfig override_cfg = RunConfig::from_text("seed=7\nlambda_adv=0.2\nno_decoder=true\n");
  CHECK(override_cfg.seed == 7);
  CHECK(override_cfg.lambda_adv == doctest::Approx(0.2));
  CHECK(override_cfg.no_decoder);

  RunConfig echoed = RunConfig::from_text(override_cfg.serialize());
  CHECK(echoed.serialize() == override_cfg.serialize());

  CHECK_THROWS_WITH_AS(RunConfig::from_text("learning_rate=1\n"),
                       doctest::Contains("unknown key"), std::runtime_error);
  CHECK_THROWS_AS(RunConfig::from_text("patch=30\n"), std::runtime_error);
  CHECK_THROWS_AS(RunConfig::from_text("sigma=1.5\n"), std::runtime_error);
  CHECK_THROWS_AS(RunConfig::from_text("seg_input=both\n"), std::runtime_error);
}
