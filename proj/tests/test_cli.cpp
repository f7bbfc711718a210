#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "defeat_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd =
      "cd '" + work_dir().string() + "' && '" + DEFEAT_CLI_PATH + "' " + args + " > last.out 2> last.err";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(work_dir() / p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kTiny = "--epochs 1 --batch-size 2 --log-every 0";

// Dataset and teacher shared by the tests below.
void ensure_fixtures() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("gen-data --num-images 6 --image-size 64 --seed 4 --out data") == 0);
  REQUIRE(run("train --data data --out teacher " + kTiny) == 0);
  done = true;
}

}  // namespace

TEST_CASE("cli gen-data") {
  CHECK(run("gen-data --num-images 10 --seed 1 --out d") == 0);
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(work_dir() / "d")) pngs += e.path().extension() == ".png";
  CHECK(pngs == 10);
  const auto first = slurp("d/annotations.json");
  CHECK(run("gen-data --num-images 10 --seed 1 --out d") == 0);
  CHECK(slurp("d/annotations.json") == first);
  const auto manifest = nlohmann::json::parse(slurp("d/manifest.json"));
  CHECK(manifest.at("command") == "gen-data");
  CHECK(manifest.at("checksums").contains("annotations"));

  CHECK(run("gen-data --num-images 10 --seed 1") == 2);
  CHECK(slurp("last.err").find("--out") != std::string::npos);
  CHECK(run("gen-data --num-images 10 --classes 12 --out bad") == 2);
  CHECK(run("gen-data --bogus 1 --out bad") == 2);
}

TEST_CASE("cli config file precedence") {
  std::ofstream(work_dir() / "gen.json") << R"({"num-images": 3, "image-size": 64, "out": "cfg_data"})";
  CHECK(run("gen-data --config gen.json --num-images 2") == 0);
  const auto j = nlohmann::json::parse(slurp("cfg_data/annotations.json"));
  CHECK(j.at("images").size() == 2);
  CHECK(run("gen-data --config missing.json --out x") == 3);
  std::ofstream(work_dir() / "broken.json") << "{ nope";
  CHECK(run("gen-data --config broken.json --out x") == 2);
}

TEST_CASE("cli train and distill") {
  ensure_fixtures();
  CHECK(fs::exists(work_dir() / "teacher/model.bin"));
  CHECK(fs::exists(work_dir() / "teacher/train_log.csv"));
  CHECK(fs::exists(work_dir() / "teacher/train_log.json"));
  const auto manifest = nlohmann::json::parse(slurp("teacher/manifest.json"));
  CHECK(manifest.at("checksums").at("weights").get<std::string>().size() == 64);

  // Distillation with every mode off reproduces plain training.
  REQUIRE(run("train --arch student --data data --out base " + kTiny) == 0);
  REQUIRE(run("distill --data data --teacher teacher/model.json --out none --distill-neck none --distill-cls none " +
              kTiny) == 0);
  CHECK(slurp("base/model.bin") == slurp("none/model.bin"));
  CHECK(slurp("base/train_log.csv") == slurp("none/train_log.csv"));

  REQUIRE(run("distill --data data --teacher teacher/model.json --out dec --distill-neck decoupled --alpha-obj 4 "
              "--alpha-bg 16 " +
              kTiny) == 0);
  const auto dec = nlohmann::json::parse(slurp("dec/manifest.json"));
  const auto& distill = dec.at("config").at("train").at("distill");
  CHECK(distill.at("alpha_obj") == 4.0);
  CHECK(distill.at("alpha_bg") == 16.0);
  CHECK(distill.at("neck") == "decoupled");

  CHECK(run("distill --data data --teacher teacher/model.json --out x --distill-neck sideways") == 2);
  CHECK(run("distill --data data --teacher missing.json --out x " + kTiny) == 3);
  CHECK(run("distill --data data --teacher base/model.json --arch teacher --out x " + kTiny) == 5);
  CHECK(run("train --data data --out x --epochs 2 --lr 1e300 --warmup-iters 0 --log-every 0") == 4);
}

TEST_CASE("cli eval and analyze") {
  ensure_fixtures();
  REQUIRE(run("train --arch student --data data --out fresh --epochs 1 --lr 1e-9 --log-every 0") == 0);
  CHECK(run("eval --model fresh/model.json --data data --out ev") == 0);
  const auto summary = nlohmann::json::parse(slurp("ev/summary.json"));
  CHECK(summary.at("map50").get<double>() < 0.1);

  CHECK(run("analyze errors --model teacher/model.json --data data --out er --error-min-score 0") == 0);
  const auto errors = nlohmann::json::parse(slurp("er/summary.json"));
  const auto& e = errors.at("errors");
  CHECK(e.at("Cor").get<long>() + e.at("Loc").get<long>() + e.at("Sim").get<long>() + e.at("Oth").get<long>() +
            e.at("BG").get<long>() ==
        e.at("detections").get<long>());
  CHECK(e.at("detections") == errors.at("detections"));

  CHECK(run("analyze distance --model teacher/model.json --teacher teacher/model.json --data data --out dist") == 0);
  std::istringstream rows(slurp("dist/channel_distance.csv"));
  std::string line;
  std::getline(rows, line);
  CHECK(line == "channel,d_obj,d_bg");
  int n = 0;
  while (std::getline(rows, line)) {
    CHECK(line.substr(line.find(',')) == ",0,0");
    ++n;
  }
  CHECK(n > 0);

  CHECK(run("analyze grad-norms --model teacher/model.json --data data --out gn") == 0);
  CHECK(slurp("gn/grad_norms.csv").rfind("region,mean_l2\n", 0) == 0);

  CHECK(run("eval --model nowhere.json --data data --out x") == 3);
  CHECK(run("eval --model teacher/model.json --data nowhere --out x") == 3);
  CHECK(run("analyze") == 2);
  CHECK(run("analyze sweep --data data --val data --teacher teacher/model.json --out sw --param zeta --values 1") == 2);
}
