#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>

#include "msdet/dataset_io.hpp"

using namespace msdet;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

// Runs the CLI with `args`, capturing stdout and stderr together.
Run cli(const std::string& args, const fs::path& cwd) {
  const fs::path log = cwd / "cli_output.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && '" + MSDET_CLI + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = read_file(log);
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("msdet_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

}  // namespace

TEST_CASE("help and argument errors use distinct exit codes") {
  const fs::path dir = scratch("args");
  const Run help = cli("--help", dir);
  CHECK(help.code == 0);
  CHECK(help.output.find("gen-data") != std::string::npos);
  CHECK(cli("train --help", dir).code == 0);
  CHECK(cli("analyze --no-such-flag", dir).code == 1);
  CHECK(cli("analyze --profile giant", dir).code == 1);
  write_file(dir / "bad.cfg", "model.width = 3\n");
  const Run bad_key = cli("analyze --config bad.cfg", dir);
  CHECK(bad_key.code == 1);
  CHECK(bad_key.output.find("model.width") != std::string::npos);
  write_file(dir / "typo.cfg", "trian.lr = 0.1\n");
  CHECK(cli("train --config typo.cfg --train x.tsv", dir).code == 1);
  CHECK(cli("eval --checkpoint missing.msdt --data missing.tsv", dir).code == 2);
  fs::remove_all(dir);
}

TEST_CASE("analyze reports the paper-640 head shapes") {
  const fs::path dir = scratch("analyze");
  const Run r = cli("analyze --profile paper-640 --out rep", dir);
  CHECK(r.code == 0);
  CHECK(r.output.find("160x160x18") != std::string::npos);
  CHECK(fs::exists(dir / "rep" / "rf_report.csv"));
  CHECK(fs::exists(dir / "rep" / "run_manifest.json"));
  const Run file = cli("analyze --config '" + std::string(MSDET_SOURCE_DIR) + "/configs/paper640.arch' --out f", dir);
  CHECK(file.code == 0);
  CHECK(file.output.find("160x160x18") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gen-data is reproducible from its seed") {
  const fs::path dir = scratch("gen");
  write_file(dir / "small.cfg", "data.size = 48\n");
  REQUIRE(cli("gen-data --config small.cfg --seed 7 --train 3 --val 2 --out a", dir).code == 0);
  REQUIRE(cli("gen-data --config small.cfg --seed 7 --train 3 --val 2 --out b", dir).code == 0);
  const auto a = tree(dir / "a"), b = tree(dir / "b");
  CHECK(a.size() == b.size());
  CHECK(a == b);
  CHECK(a.count("train/manifest.tsv") == 1);
  CHECK(a.count("val/scene0001.pgm") == 1);
  REQUIRE(cli("gen-data --config small.cfg --seed 8 --train 3 --val 2 --out c", dir).code == 0);
  CHECK(tree(dir / "c").at("train/scene0000.raw") != a.at("train/scene0000.raw"));

  REQUIRE(cli("preprocess --input a/train --out pre", dir).code == 0);
  CHECK(read_file(dir / "pre" / "scene0002.pgm") == a.at("train/scene0002.pgm"));
  fs::remove_all(dir);
}

TEST_CASE("gradcheck runs a named op and rejects unknown names") {
  const fs::path dir = scratch("grad");
  const Run ok = cli("gradcheck --op matmul --op conv2d_r2 --out g", dir);
  CHECK(ok.code == 0);
  CHECK(ok.output.find("matmul") != std::string::npos);
  CHECK(read_file(dir / "g" / "gradcheck.csv").find("conv2d_r2,") != std::string::npos);
  CHECK(cli("gradcheck --op no_such_op", dir).code == 1);
  const Run list = cli("gradcheck --list", dir);
  CHECK(list.output.find("desk_model_loss") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("train, eval and infer chain through the checkpoint") {
  const fs::path dir = scratch("chain");
  write_file(dir / "run.cfg", "data.size = 48\nmodel.input = 48\ntrain.batch = 2\n");
  REQUIRE(cli("gen-data --config run.cfg --train 4 --val 2 --out d", dir).code == 0);
  const Run tr = cli("train --config run.cfg --train d/train/manifest.tsv --val d/val/manifest.tsv --epochs 1 --out t", dir);
  INFO(tr.output);
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(dir / "t" / "last.msdt"));
  CHECK(fs::exists(dir / "t" / "model.cfg"));
  CHECK(fs::exists(dir / "t" / "val_metrics.csv"));

  const Run ev = cli("eval --checkpoint t/last.msdt --data d/val/manifest.tsv --out e", dir);
  CHECK(ev.code == 0);
  CHECK(read_file(dir / "e" / "metrics.csv").rfind("metric,value\n", 0) == 0);

  // A blank image has nothing to report.
  Plane8 blank(48, 48);
  write_pgm(dir / "blank.pgm", blank);
  const Run inf = cli("infer --checkpoint t/last.msdt --input blank.pgm --threshold 0.99 --out i", dir);
  CHECK(inf.code == 0);
  REQUIRE(fs::exists(dir / "i" / "blank.det"));
  CHECK(read_file(dir / "i" / "blank.det").empty());
  CHECK(cli("infer --checkpoint t/last.msdt --input d/val --threshold 0.0 --out j", dir).code == 0);
  CHECK(fs::exists(dir / "j" / "scene0000.det"));
  fs::remove_all(dir);
}
