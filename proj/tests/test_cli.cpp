#include <doctest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/temp_dir.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Run cli(const cmsei::testing::TempDir& tmp, const std::string& args) {
  const fs::path out = tmp.path() / "stdout.txt", err = tmp.path() / "stderr.txt";
  const std::string cmd = "cd '" + tmp.path().string() + "' && '" CMSEI_CLI_PATH "' " + args + " >'" + out.string() +
                          "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::vector<nlohmann::json> events(const std::string& out, const std::string& kind) {
  std::vector<nlohmann::json> found;
  std::istringstream in(out);
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("event") == kind) found.push_back(j);
  }
  return found;
}

const std::string kSmall = "--images 12 --captions 2 --k 5 --n 4 --visual-dim 16 --text-dim 12 --latent-dim 4";
const std::string kFast = "--embed-dim 8 --batch-size 8 --lr 1e-3";

}  // namespace

TEST_CASE("cli: gen-data is deterministic and validates") {
  cmsei::testing::TempDir tmp;
  REQUIRE(cli(tmp, "gen-data " + kSmall + " --seed 1 --out a").code == 0);
  REQUIRE(cli(tmp, "gen-data " + kSmall + " --seed 1 --out b").code == 0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(tmp.path() / "a")) {
    CHECK(slurp(e.path()) == slurp(tmp.path() / "b" / e.path().filename()));
    ++files;
  }
  CHECK(files == 1 + 12 + 24);
  const Run v = cli(tmp, "validate a");
  CHECK(v.code == 0);
  CHECK(events(v.out, "validate").at(0).at("valid") == true);
  const auto manifest = nlohmann::json::parse(slurp(tmp.path() / "a" / "manifest.json"));
  CHECK(manifest.at("provenance").at("tool") == "cmsei");
  CHECK(manifest.at("provenance").contains("version"));
}

TEST_CASE("cli: usage and data errors map to exit codes") {
  cmsei::testing::TempDir tmp;
  const Run bad = cli(tmp, "gen-data --images -4 --out x");
  CHECK(bad.code == 1);
  CHECK(bad.err.find("--images") != std::string::npos);
  CHECK(bad.err.find("Usage") != std::string::npos);

  CHECK(cli(tmp, "").code == 1);
  CHECK(cli(tmp, "train --data d --out o --direction sideways").code != 0);

  const Run missing = cli(tmp, "train --data no_such_dir --out o");
  CHECK(missing.code == 2);
  CHECK(missing.err.find("no_such_dir") != std::string::npos);
  CHECK(cli(tmp, "validate no_such_dir").code == 2);
  CHECK(cli(tmp, "--help").code == 0);
}

TEST_CASE("cli: train records ablations, resume continues exactly") {
  cmsei::testing::TempDir tmp;
  REQUIRE(cli(tmp, "gen-data " + kSmall + " --seed 1 --out d").code == 0);

  const Run full = cli(tmp, "train --data d --out full --epochs 2 --seed 3 --ablate no-llii " + kFast);
  REQUIRE(full.code == 0);
  const auto header = nlohmann::json::parse(slurp(tmp.path() / "full" / "last.ckpt" / "manifest.json"));
  CHECK(header.at("model_config").at("ablations") == "no-llii");
  CHECK(header.at("run_config").at("tool") == "cmsei");

  REQUIRE(cli(tmp, "train --data d --out part --epochs 1 --seed 3 --ablate no-llii " + kFast).code == 0);
  const Run resumed = cli(tmp, "train --data d --out part --resume part/last.ckpt --epochs 2");
  REQUIRE(resumed.code == 0);
  const auto a = events(full.out, "epoch"), b = events(resumed.out, "epoch");
  REQUIRE(a.size() == 2);
  REQUIRE(b.size() == 1);
  CHECK(b[0].at("epoch") == 2);
  CHECK(b[0].at("loss").get<double>() == a[1].at("loss").get<double>());
  CHECK(slurp(tmp.path() / "full" / "last.ckpt" / "param.gate.weight.f64") ==
        slurp(tmp.path() / "part" / "last.ckpt" / "param.gate.weight.f64"));
}

TEST_CASE("cli: config file values yield to flags") {
  cmsei::testing::TempDir tmp;
  REQUIRE(cli(tmp, "gen-data " + kSmall + " --seed 2 --out d").code == 0);
  std::ofstream(tmp.path() / "run.ini") << "[train]\nlr = 0.005\nmargin = 0.3\nepochs = 1\n";
  const Run r = cli(tmp, "--config run.ini train --data d --out o --margin 0.25 " + kFast);
  REQUIRE(r.code == 0);
  const auto cfg = events(r.out, "config").at(0).at("run_config").at("train");
  CHECK(cfg.at("margin") == 0.25);
  CHECK(cfg.at("lr") == 1e-3);
  CHECK(cfg.at("max_epochs") == 1);
}

TEST_CASE("cli: eval, self-ensemble and graph dumps") {
  cmsei::testing::TempDir tmp;
  REQUIRE(cli(tmp, "gen-data " + kSmall + " --seed 1 --out d").code == 0);
  REQUIRE(cli(tmp, "gen-data " + kSmall + " --seed 2 --out v").code == 0);
  REQUIRE(cli(tmp, "train --data d --val v --out m --epochs 1 " + kFast).code == 0);

  const Run single = cli(tmp, "eval --data v --checkpoint m/best.ckpt --report single.json --dump-graphs g");
  REQUIRE(single.code == 0);
  CHECK(single.err.find("rSum") != std::string::npos);
  const auto rep = events(single.out, "report").at(0);
  CHECK(rep.at("tool") == "cmsei");
  CHECK(rep.contains("run_config"));
  CHECK(nlohmann::json::parse(slurp(tmp.path() / "single.json")).at("report") == rep.at("report"));

  const Run both = cli(tmp, "eval --data v --ensemble m/best.ckpt m/best.ckpt");
  REQUIRE(both.code == 0);
  CHECK(events(both.out, "report").at(0).at("report") == rep.at("report"));
  const Run ens = cli(tmp, "ensemble --data v m/best.ckpt m/best.ckpt");
  REQUIRE(ens.code == 0);
  CHECK(events(ens.out, "report").at(0).at("report") == rep.at("report"));

  const auto g = nlohmann::json::parse(slurp(tmp.path() / "g" / "img_00003.json"));
  CHECK(g.at("graphs").size() == 2);
  CHECK(fs::exists(tmp.path() / "g" / "img_00003_s1.json"));
  CHECK(cli(tmp, "eval --data v").code == 1);
}

TEST_CASE("cli: gradcheck reports every parameter group") {
  cmsei::testing::TempDir tmp;
  const Run r = cli(tmp, "gradcheck --seed 7 --direction i2t");
  CHECK(r.code == 0);
  const auto rep = events(r.out, "gradcheck").at(0);
  CHECK(rep.at("passed") == true);
  std::vector<std::string> groups;
  for (const auto& g : rep.at("groups")) {
    groups.push_back(g.at("group"));
    CHECK(g.at("max_rel_error").get<double>() < 1e-3);
  }
  CHECK(groups == std::vector<std::string>{"projection", "spatial", "semantic", "textual", "fusion", "gate"});
  CHECK(r.err.find("PASS fusion") != std::string::npos);
}
