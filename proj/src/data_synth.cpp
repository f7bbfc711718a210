#include "defeat/data_synth.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "defeat/errors.hpp"
#include "defeat/png_io.hpp"

namespace defeat {

namespace {

using json = nlohmann::json;

constexpr std::array<const char*, kMaxClasses> kClassNames = {
    "triangle_up", "triangle_down", "disc", "ring", "square", "frame", "plus", "x_cross"};
constexpr std::array<const char*, 4> kSuperNames = {"triangle", "ellipse", "rectangle", "cross"};

std::mt19937_64 sample_rng(std::uint64_t seed, int sample_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample_id), 0x5eedu};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh);
  const double f = hh - sector;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Shape membership in box-normalised coordinates (u, v) in (0, 1).
bool shape_contains(int class_id, double u, double v) {
  const double du = 2 * u - 1, dv = 2 * v - 1;
  switch (class_id) {
    case 1: return std::abs(u - 0.5) <= 0.5 * v;
    case 2: return std::abs(u - 0.5) <= 0.5 * (1 - v);
    case 3: return du * du + dv * dv <= 1.0;
    case 4: {
      const double r2 = du * du + dv * dv;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case 5: return true;
    case 6: return std::max(std::abs(du), std::abs(dv)) >= 0.55;
    case 7: return std::abs(du) <= 0.3 || std::abs(dv) <= 0.3;
    case 8: return std::abs(u - v) <= 0.16 || std::abs(u + v - 1) <= 0.16;
    default: return false;
  }
}

void paint_background(Tensor& img, const DatasetSpec& spec, std::mt19937_64& rng) {
  const double base = uniform(rng, 0.25, 0.55);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = base + uniform(rng, -0.05, 0.05);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = tint[c] + noise(rng);

  if (spec.background != BackgroundMode::clutter) return;
  const int size = spec.image_size;

  // Low-contrast textured patches.
  const int patches = uniform_int(rng, 2, 5);
  for (int p = 0; p < patches; ++p) {
    const int pw = uniform_int(rng, size / 8, size / 2), ph = uniform_int(rng, size / 8, size / 2);
    const int px = uniform_int(rng, 0, size - pw), py = uniform_int(rng, 0, size - ph);
    const int kind = uniform_int(rng, 0, 3);
    const int period = uniform_int(rng, 2, 6);
    const double amp = uniform(rng, 0.04, 0.10);
    for (int y = py; y < py + ph; ++y) {
      for (int x = px; x < px + pw; ++x) {
        int phase = 0;
        switch (kind) {
          case 0: phase = (y / period) % 2; break;
          case 1: phase = (x / period) % 2; break;
          case 2: phase = ((x + y) / period) % 2; break;
          default: phase = ((x / period) + (y / period)) % 2; break;
        }
        const double delta = phase ? amp : -amp;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) += delta;
      }
    }
  }

  // Non-class marks: short strokes and blobs in arbitrary colours.
  const int marks = uniform_int(rng, 1, 4);
  for (int m = 0; m < marks; ++m) {
    const auto color = hsv_to_rgb(uniform(rng, 0, 1), uniform(rng, 0.2, 0.9), uniform(rng, 0.3, 0.9));
    if (uniform_int(rng, 0, 1) == 0) {
      const double x0 = uniform(rng, 0, size), y0 = uniform(rng, 0, size);
      const double angle = uniform(rng, 0, 2 * M_PI);
      const double len = uniform(rng, size / 12.0, size / 4.0);
      const int steps = static_cast<int>(len * 2);
      for (int s = 0; s <= steps; ++s) {
        const int x = static_cast<int>(x0 + std::cos(angle) * len * s / steps);
        const int y = static_cast<int>(y0 + std::sin(angle) * len * s / steps);
        if (x < 0 || y < 0 || x >= size || y >= size) continue;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
      }
    } else {
      const double cx = uniform(rng, 0, size), cy = uniform(rng, 0, size);
      const double r = uniform(rng, 1.0, size / 32.0 + 1.5);
      for (int y = std::max(0, int(cy - r)); y <= std::min(size - 1, int(cy + r)); ++y)
        for (int x = std::max(0, int(cx - r)); x <= std::min(size - 1, int(cx + r)); ++x)
          if ((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy) <= r * r)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
    }
  }
}

json box_json(const BBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

}  // namespace

void DatasetSpec::validate() const {
  if (num_images < 0) throw ConfigError("num_images must be >= 0");
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  if (num_classes < 2 || num_classes > kMaxClasses)
    throw ConfigError("num_classes must be in [2, " + std::to_string(kMaxClasses) + "]");
  if (min_objects < 0 || max_objects < 0) throw ConfigError("object counts must be >= 0");
  if (min_box_side < 2) throw ConfigError("min_box_side must be >= 2");
  if (max_box_side < min_box_side) throw ConfigError("max_box_side < min_box_side");
  if (max_box_side > image_size) throw ConfigError("max_box_side > image_size");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = json{{"num_images", s.num_images},
           {"image_size", s.image_size},
           {"num_classes", s.num_classes},
           {"min_objects", s.min_objects},
           {"max_objects", s.max_objects},
           {"min_box_side", s.min_box_side},
           {"max_box_side", s.max_box_side},
           {"background", s.background == BackgroundMode::clutter ? "clutter" : "plain"},
           {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  j.at("num_images").get_to(s.num_images);
  j.at("image_size").get_to(s.image_size);
  j.at("num_classes").get_to(s.num_classes);
  j.at("min_objects").get_to(s.min_objects);
  j.at("max_objects").get_to(s.max_objects);
  j.at("min_box_side").get_to(s.min_box_side);
  j.at("max_box_side").get_to(s.max_box_side);
  const auto bg = j.at("background").get<std::string>();
  if (bg == "clutter") s.background = BackgroundMode::clutter;
  else if (bg == "plain") s.background = BackgroundMode::plain;
  else throw ConfigError("unknown background mode '" + bg + "'");
  j.at("seed").get_to(s.seed);
}

std::vector<ClassInfo> class_table(int num_classes) {
  if (num_classes < 1 || num_classes > kMaxClasses) throw ConfigError("unsupported class count");
  std::vector<ClassInfo> out;
  for (int id = 1; id <= num_classes; ++id) out.push_back({id, kClassNames[id - 1], supercategory_of(id)});
  return out;
}

int supercategory_of(int class_id) { return (class_id - 1) / 2 + 1; }

DetectionSample generate_sample(const DatasetSpec& spec, int sample_id) {
  auto rng = sample_rng(spec.seed, sample_id);
  const int size = spec.image_size;
  DetectionSample sample;
  sample.sample_id = sample_id;
  sample.image = Tensor(size, size, 3);
  paint_background(sample.image, spec, rng);

  // max_objects < min_objects degrades to exactly max_objects.
  const int lo = std::min(spec.min_objects, spec.max_objects);
  const int count = uniform_int(rng, lo, spec.max_objects);
  std::vector<BBox> placed;
  for (int k = 0; k < count; ++k) {
    const int class_id = uniform_int(rng, 1, spec.num_classes);
    const auto color = hsv_to_rgb(uniform(rng, 0, 1), uniform(rng, 0.7, 1.0), uniform(rng, 0.75, 1.0));
    const int w = uniform_int(rng, spec.min_box_side, spec.max_box_side);
    const int h = std::clamp(static_cast<int>(std::lround(w * uniform(rng, 0.8, 1.25))), spec.min_box_side,
                             spec.max_box_side);
    BBox intended;
    bool ok = false;
    for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
      const int x1 = uniform_int(rng, 0, size - w), y1 = uniform_int(rng, 0, size - h);
      intended = {double(x1), double(y1), double(x1 + w), double(y1 + h)};
      ok = std::none_of(placed.begin(), placed.end(), [&](const BBox& b) { return iou(b, intended) > 0.3; });
    }
    if (!ok) continue;

    int minx = size, miny = size, maxx = -1, maxy = -1;
    for (int y = int(intended.y1); y < int(intended.y2); ++y) {
      for (int x = int(intended.x1); x < int(intended.x2); ++x) {
        const double u = (x + 0.5 - intended.x1) / w, v = (y + 0.5 - intended.y1) / h;
        if (!shape_contains(class_id, u, v)) continue;
        for (int c = 0; c < 3; ++c) sample.image.at(y, x, c) = color[c];
        minx = std::min(minx, x), miny = std::min(miny, y);
        maxx = std::max(maxx, x), maxy = std::max(maxy, y);
      }
    }
    if (maxx < 0) continue;
    const BBox painted{double(minx), double(miny), double(maxx + 1), double(maxy + 1)};
    placed.push_back(intended);
    sample.annotations.push_back({painted, class_id, supercategory_of(class_id)});
  }

  for (auto& v : sample.image.data) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return sample;
}

std::vector<DetectionSample> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<DetectionSample> out;
  out.reserve(spec.num_images);
  for (int id = 0; id < spec.num_images; ++id) out.push_back(generate_sample(spec, id));
  return out;
}

std::string image_file_name(int sample_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%06d.png", sample_id);
  return buf;
}

std::filesystem::path write_dataset(const std::vector<DetectionSample>& samples, const DatasetSpec& spec,
                                    const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json classes = json::array();
  for (const auto& c : class_table(spec.num_classes))
    classes.push_back({{"id", c.id}, {"name", c.name}, {"supercategory_id", c.supercategory_id},
                       {"supercategory", kSuperNames[c.supercategory_id - 1]}});
  json images = json::array();
  for (const auto& s : samples) {
    write_png(dir / image_file_name(s.sample_id), s.image);
    json anns = json::array();
    for (const auto& a : s.annotations) anns.push_back({{"class_id", a.class_id}, {"box", box_json(a.box)}});
    images.push_back({{"id", s.sample_id},
                      {"file", image_file_name(s.sample_id)},
                      {"width", s.image.w},
                      {"height", s.image.h},
                      {"annotations", std::move(anns)}});
  }
  const json manifest{{"spec", spec}, {"classes", std::move(classes)}, {"images", std::move(images)}};
  const auto path = dir / "annotations.json";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
  return path;
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "annotations.json";
  std::ifstream in(path);
  if (!in) throw LoadError("missing manifest " + path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("annotations.json: malformed JSON: " + std::string(e.what()));
  }

  Dataset ds;
  try {
    ds.spec = manifest.at("spec").get<DatasetSpec>();
    for (const auto& c : manifest.at("classes"))
      ds.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(),
                            c.at("supercategory_id").get<int>()});
  } catch (const std::exception& e) {
    throw LoadError("annotations.json: bad spec/classes record: " + std::string(e.what()));
  }

  const auto& images = manifest.at("images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& rec = images[i];
    const std::string where = "annotations.json: images[" + std::to_string(i) + "]";
    DetectionSample s;
    int width = 0, height = 0;
    std::string file;
    try {
      s.sample_id = rec.at("id").get<int>();
      file = rec.at("file").get<std::string>();
      width = rec.at("width").get<int>();
      height = rec.at("height").get<int>();
      const auto& anns = rec.at("annotations");
      for (std::size_t k = 0; k < anns.size(); ++k) {
        const auto& a = anns[k];
        const auto box = a.at("box").get<std::vector<double>>();
        if (box.size() != 4) throw LoadError(where + " annotation " + std::to_string(k) + ": box needs 4 values");
        Annotation ann{{box[0], box[1], box[2], box[3]}, a.at("class_id").get<int>(), 0};
        if (!ann.box.valid() || !ann.box.inside_image(width, height))
          throw LoadError(where + " (id " + std::to_string(s.sample_id) + ") annotation " + std::to_string(k) +
                          ": box violates invariants");
        if (ann.class_id < 1 || ann.class_id > static_cast<int>(ds.classes.size()))
          throw LoadError(where + " (id " + std::to_string(s.sample_id) + ") annotation " + std::to_string(k) +
                          ": class_id out of range");
        ann.supercategory_id = ds.classes[ann.class_id - 1].supercategory_id;
        s.annotations.push_back(ann);
      }
    } catch (const LoadError&) {
      throw;
    } catch (const std::exception& e) {
      throw LoadError(where + ": " + e.what());
    }
    const auto img_path = dir / file;
    if (!std::filesystem::exists(img_path)) throw LoadError(where + ": missing image file " + file);
    try {
      s.image = read_png(img_path);
    } catch (const IoError& e) {
      throw LoadError(where + ": " + e.what());
    }
    if (s.image.w != width || s.image.h != height) throw LoadError(where + ": image size mismatch");
    ds.samples.push_back(std::move(s));
  }
  std::sort(ds.samples.begin(), ds.samples.end(),
            [](const DetectionSample& a, const DetectionSample& b) { return a.sample_id < b.sample_id; });
  return ds;
}

}  // namespace defeat
