#include <doctest.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "defeat/data_synth.hpp"
#include "defeat/errors.hpp"

using namespace defeat;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generation is deterministic and per-sample") {
  DatasetSpec spec;
  spec.num_images = 6;
  spec.seed = 3;
  const auto a = generate_dataset(spec), b = generate_dataset(spec);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.data == b[i].image.data);
    CHECK(a[i].annotations == b[i].annotations);
    // A sample depends only on (seed, id), not on how many images precede it.
    const auto single = generate_sample(spec, static_cast<int>(i));
    CHECK(single.image.data == a[i].image.data);
  }
  spec.seed = 4;
  CHECK(generate_dataset(spec)[0].image.data != a[0].image.data);
}

TEST_CASE("generated samples satisfy the annotation invariants") {
  DatasetSpec spec;
  spec.num_images = 200;
  spec.seed = 11;
  for (const auto& s : generate_dataset(spec)) {
    CHECK(s.image.h == 128);
    CHECK(s.image.c == 3);
    CHECK(static_cast<int>(s.annotations.size()) <= spec.max_objects);
    for (const auto& a : s.annotations) {
      CHECK(a.box.valid());
      CHECK(a.box.inside_image(128, 128));
      CHECK(a.class_id >= 1);
      CHECK(a.class_id <= 8);
      CHECK(a.supercategory_id == supercategory_of(a.class_id));
    }
    for (double v : s.image.data) {
      const double k = v * 255.0;
      CHECK(std::abs(k - std::round(k)) < 1e-9);
    }
  }
}

TEST_CASE("degenerate counts and invalid specs") {
  DatasetSpec spec;
  spec.num_images = 1;
  spec.max_objects = 0;
  const auto d = generate_dataset(spec);
  REQUIRE(d.size() == 1);
  CHECK(d[0].annotations.empty());

  DatasetSpec bad;
  bad.max_box_side = 200;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.num_classes = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.num_classes = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("class table has four supercategories of two classes") {
  const auto t = class_table(8);
  REQUIRE(t.size() == 8);
  for (const auto& c : t) CHECK(c.supercategory_id == (c.id - 1) / 2 + 1);
  CHECK(t[0].supercategory_id == t[1].supercategory_id);
  CHECK(t[1].supercategory_id != t[2].supercategory_id);
}

TEST_CASE("class histogram fixture") {
  DatasetSpec spec;
  spec.num_images = 2000;
  spec.seed = 7;
  std::array<long, 8> hist{};
  long total = 0;
  for (int id = 0; id < spec.num_images; ++id)
    for (const auto& a : generate_sample(spec, id).annotations) ++hist[static_cast<std::size_t>(a.class_id - 1)], ++total;
  const double uniform = static_cast<double>(total) / 8.0;
  for (long h : hist) {
    CHECK(static_cast<double>(h) >= 0.8 * uniform);
    CHECK(static_cast<double>(h) <= 1.2 * uniform);
  }
  // Regression pin on the exact counts.
  const std::array<long, 8> pinned{639, 650, 598, 626, 628, 638, 602, 621};
  CHECK(hist == pinned);
}

TEST_CASE("dataset round trip") {
  const auto dir = fresh_dir("defeat_data_rt");
  DatasetSpec spec;
  spec.num_images = 10;
  spec.seed = 5;
  const auto samples = generate_dataset(spec);
  const auto manifest = write_dataset(samples, spec, dir);
  CHECK(manifest.filename() == "annotations.json");
  CHECK(std::filesystem::exists(dir / "img_000009.png"));
  const auto back = read_dataset(dir);
  REQUIRE(back.samples.size() == 10);
  CHECK(back.classes.size() == 8);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(back.samples[i].sample_id == samples[i].sample_id);
    CHECK(back.samples[i].annotations == samples[i].annotations);
    CHECK(back.samples[i].image.data == samples[i].image.data);
  }
  const auto bytes = slurp(manifest);
  write_dataset(samples, spec, dir);
  CHECK(slurp(manifest) == bytes);

  // Annotation order is preserved in the JSON record.
  const auto j = nlohmann::json::parse(bytes);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& anns = j.at("images")[i].at("annotations");
    REQUIRE(anns.size() == samples[i].annotations.size());
    for (std::size_t k = 0; k < anns.size(); ++k)
      CHECK(anns[k].at("class_id").get<int>() == samples[i].annotations[k].class_id);
  }

  const auto empty = fresh_dir("defeat_data_empty");
  write_dataset({}, spec, empty);
  CHECK(read_dataset(empty).samples.empty());
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(empty);
}

TEST_CASE("dataset load errors name the record") {
  const auto dir = fresh_dir("defeat_data_bad");
  DatasetSpec spec;
  spec.num_images = 3;
  spec.min_objects = 1;
  const auto samples = generate_dataset(spec);
  const auto manifest = write_dataset(samples, spec, dir);
  auto j = nlohmann::json::parse(slurp(manifest));

  auto expect_error = [&](const nlohmann::json& doc, const std::string& needle) {
    std::ofstream(manifest) << doc.dump();
    try {
      read_dataset(dir);
      FAIL("expected a load error");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  auto bad_box = j;
  bad_box["images"][1]["annotations"][0]["box"] = {5, 5, 2, 9};
  expect_error(bad_box, "images[1]");
  auto missing = j;
  missing["images"][2]["file"] = "nope.png";
  expect_error(missing, "images[2]");
  auto bad_class = j;
  bad_class["images"][0]["annotations"][0]["class_id"] = 42;
  expect_error(bad_class, "images[0]");
  std::ofstream(manifest) << "{ not json";
  CHECK_THROWS_AS(read_dataset(dir), LoadError);
  std::filesystem::remove_all(dir);
}
