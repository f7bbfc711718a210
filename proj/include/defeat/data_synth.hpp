#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "defeat/bbox.hpp"
#include "defeat/tensor.hpp"

namespace defeat {

struct Annotation {
  BBox box;
  int class_id = 0;          // 1..C
  int supercategory_id = 0;  // fixed by the class table
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// One image (H x W x 3, values k/255) with its ground truth.
struct DetectionSample {
  Tensor image;
  std::vector<Annotation> annotations;
  int sample_id = 0;
};

struct ClassInfo {
  int id = 0;
  std::string name;
  int supercategory_id = 0;
};

enum class BackgroundMode { plain, clutter };

struct DatasetSpec {
  int num_images = 100;
  int image_size = 128;
  int num_classes = 8;
  int min_objects = 1;
  int max_objects = 4;
  int min_box_side = 12;
  int max_box_side = 48;
  BackgroundMode background = BackgroundMode::clutter;
  std::uint64_t seed = 0;

  /// Throws ConfigError when the spec cannot be generated.
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Number of distinct renderable classes (shape variants).
inline constexpr int kMaxClasses = 8;

/// Fixed class table: supercategories are shape families of two variants each.
std::vector<ClassInfo> class_table(int num_classes);
int supercategory_of(int class_id);

/// Renders one sample. Depends only on (spec, sample_id).
DetectionSample generate_sample(const DatasetSpec& spec, int sample_id);
std::vector<DetectionSample> generate_dataset(const DatasetSpec& spec);

struct Dataset {
  DatasetSpec spec;
  std::vector<ClassInfo> classes;
  std::vector<DetectionSample> samples;
};

/// Writes img_{id:06d}.png files plus annotations.json; returns the manifest path.
std::filesystem::path write_dataset(const std::vector<DetectionSample>& samples, const DatasetSpec& spec,
                                    const std::filesystem::path& dir);
/// Loads and validates a dataset directory; samples come back sorted by id.
Dataset read_dataset(const std::filesystem::path& dir);

std::string image_file_name(int sample_id);

}  // namespace defeat
