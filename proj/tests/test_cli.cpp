#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "kvmix/profiler.hpp"

// end-to-end checks against the installed binary; KVMIX_CLI_PATH comes from
// the build system

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(KVMIX_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("/tmp/kvmix_cli_" + name) {
    const int rc = std::system(("rm -rf " + path + " && mkdir -p " + path).c_str());
    REQUIRE(rc == 0);
  }
};

}  // namespace

TEST_CASE("profile emits a parseable config with the documented averages") {
  TempDir dir("profile");
  REQUIRE(run("profile --seed 42 --out " + dir.path) == 0);

  std::ifstream cfg_file(dir.path + "/quant_config.txt");
  const kvmix::ModelQuantConfig cfg = kvmix::read_config(cfg_file);
  CHECK(cfg.layers.size() == 32);
  CHECK(cfg.provenance == kvmix::Provenance::kGradientGuided);
  const auto [ka, va] = kvmix::average_bits(cfg);
  CHECK(ka == 2.1875);
  CHECK(va == 2.375);

  CHECK(slurp(dir.path + "/importance.csv").rfind("layer,prompt,", 0) == 0);
  CHECK(slurp(dir.path + "/weight_stats.csv").rfind("layer,norm_k,", 0) == 0);
  CHECK(slurp(dir.path + "/manifest.json").find("\"command\": \"profile\"") !=
        std::string::npos);
}

TEST_CASE("profile with high-fraction 0 yields the uniform 2-bit plan") {
  TempDir dir("profile0");
  REQUIRE(run("profile --seed 1 --layers 8 --prompts 4 --high-fraction 0 --out " + dir.path) ==
          0);
  std::ifstream cfg_file(dir.path + "/quant_config.txt");
  const kvmix::ModelQuantConfig cfg = kvmix::read_config(cfg_file);
  for (const auto& lc : cfg.layers) {
    CHECK(lc.key_bits == 2);
    CHECK(lc.value_bits == 2);
    CHECK(lc.key_rpc_ratio == 0.1f);
  }
}

TEST_CASE("reruns with the same flags are byte-identical") {
  TempDir a("det_a"), b("det_b");
  const std::string flags = "profile --seed 7 --layers 8 --prompts 6 --prompt-len 32 --out ";
  REQUIRE(run(flags + a.path) == 0);
  REQUIRE(run(flags + b.path) == 0);
  for (const char* name :
       {"quant_config.txt", "importance.csv", "weight_stats.csv", "manifest.json"}) {
    CHECK(slurp(a.path + "/" + name) == slurp(b.path + "/" + name));
  }
}

TEST_CASE("bench-memory runs end to end and reports per-layer rows") {
  TempDir dir("bm");
  REQUIRE(run("profile --seed 3 --layers 4 --prompts 2 --out " + dir.path) == 0);
  REQUIRE(run("bench-memory --config " + dir.path + "/quant_config.txt" +
              " --prefill 256 --decode-steps 64 --head-dim 32 --emit-every 16 --out " +
              dir.path) == 0);
  const std::string csv = slurp(dir.path + "/memory.csv");
  CHECK(csv.rfind("layer,step,payload_bits,metadata_bits,tail_bits,ratio,manifest\n", 0) == 0);
  CHECK(csv.find("\n-1,64,") != std::string::npos);  // aggregate rows present
}

TEST_CASE("bench-attention and generate run end to end") {
  TempDir dir("ba");
  REQUIRE(run("bench-attention --trials 3 --tokens 128 --out " + dir.path) == 0);
  CHECK(slurp(dir.path + "/attention_bench.csv").rfind("bits,trial,", 0) == 0);

  TempDir gen("gen");
  REQUIRE(run("generate --seed 5 --layers 2 --prompt 1,2,3 --max-new 5 --out " + gen.path) == 0);
  std::istringstream tokens(slurp(gen.path + "/tokens.txt"));
  int count = 0, tok;
  while (tokens >> tok) ++count;
  CHECK(count == 8);  // prompt plus generated
}

TEST_CASE("exit codes distinguish config errors from runtime errors") {
  TempDir dir("err");
  // missing config file
  CHECK(run("bench-memory --config /nonexistent/cfg.txt --out " + dir.path) == 2);
  // malformed config file
  std::ofstream bad(dir.path + "/bad.txt");
  bad << "not a config\n";
  bad.close();
  CHECK(run("bench-memory --config " + dir.path + "/bad.txt --out " + dir.path) == 2);
  // unreadable checkpoint
  CHECK(run("profile --checkpoint /nonexistent/model.bin --out " + dir.path) == 2);
  // invalid parameter combination
  CHECK(run("generate --prompt 1,999 --layers 2 --max-new 2 --out " + dir.path) == 2);
  // unwritable output location is a runtime failure
  REQUIRE(run("profile --seed 3 --layers 2 --prompts 2 --out " + dir.path) == 0);
  CHECK(run("bench-attention --trials 1 --tokens 32 --out /dev/null/bogus") == 3);
}
