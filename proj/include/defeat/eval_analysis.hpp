#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "defeat/data_synth.hpp"
#include "defeat/detector.hpp"
#include "defeat/region_masks.hpp"
#include "defeat/train_loop.hpp"

namespace defeat {

using ImageDetections = std::vector<Detection>;
using ImageGroundTruth = std::vector<Annotation>;

struct MapResult {
  std::vector<double> thresholds;
  /// ap[class_id - 1][t]; NaN where the class has no ground truth.
  std::vector<std::vector<double>> ap;
  double map = 0;  // mean over defined (class, threshold) entries

  /// Mean over classes at one of `thresholds`.
  double map_at(double threshold) const;
};

/// COCO-style greedy matching per class and all-points interpolated AP.
MapResult compute_map(const std::vector<ImageDetections>& detections, const std::vector<ImageGroundTruth>& gts,
                      std::span<const double> iou_thresholds, int num_classes);

std::vector<double> coco_thresholds();  // 0.50:0.05:0.95

enum ErrorKind { kCor = 0, kLoc, kSim, kOth, kBG, kFN, kErrorKinds };
inline constexpr std::array<const char*, kErrorKinds> kErrorNames{"Cor", "Loc", "Sim", "Oth", "BG", "FN"};

struct ErrorBreakdown {
  /// counts[class_id - 1][kind]; detections are counted under their predicted
  /// class, false negatives under the ground-truth class.
  std::vector<std::array<long, kErrorKinds>> counts;

  long total(ErrorKind kind) const;
  long detections() const;  // Cor + Loc + Sim + Oth + BG
};

/// Assigns every detection with score >= min_score to exactly one of
/// Cor/Loc/Sim/Oth/BG, then counts unmatched ground truth as FN.
ErrorBreakdown categorize_errors(const std::vector<ImageDetections>& detections,
                                 const std::vector<ImageGroundTruth>& gts, const std::vector<ClassInfo>& classes,
                                 double min_score = 0.0);

struct ChannelDistance {
  std::vector<double> d_obj, d_bg;
  bool has_obj = false, has_bg = false;
};

/// Mean |S - T| per channel over mask-1 and mask-0 cells.
ChannelDistance per_channel_distance(const Tensor& teacher, const Tensor& student_adapted, const BinaryMask& mask);

/// Averages per-image distances; an image contributes to a region only when
/// that region is non-empty.
class ChannelDistanceAverager {
 public:
  void add(const ChannelDistance& d);
  ChannelDistance result() const;

 private:
  std::vector<double> sum_obj_, sum_bg_;
  long n_obj_ = 0, n_bg_ = 0;
};

struct GradNormResult {
  std::vector<Tensor> norm_maps;  // per level H x W x 1
  double avg_obj = 0;
  double avg_bg = 0;
  long cells_obj = 0, cells_bg = 0;
};

/// Per-location L2 norm over channels, averaged over mask-1 / mask-0 cells
/// pooled across levels.
GradNormResult gradient_norm_stats(const std::vector<Tensor>& d_neck, const std::vector<BinaryMask>& masks);

/// Gradient of the student's detection loss (no distillation) w.r.t. the neck,
/// summarised with the ground-truth masks of each level.
GradNormResult feature_gradient_norms(const Detector& student, const DetectionSample& sample,
                                      const StepSettings& step = {});

/// Adds the per-level distances of one image between the teacher neck and the
/// adapted student neck.
void accumulate_neck_distance(const Detector& teacher, const Detector& student, const DetectionSample& sample,
                              ChannelDistanceAverager& acc);

struct InferenceSettings {
  int proposals = 64;
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;
  int workers = 1;  // images are split across threads; results keep image order
};

std::vector<ImageDetections> run_detector(const Detector& det, std::span<const DetectionSample> samples,
                                          const InferenceSettings& settings = {});

struct EvalSummary {
  MapResult map50;
  MapResult map_coco;
  ErrorBreakdown errors;
  long num_detections = 0;
};

/// Error taxonomy uses detections scoring at least `error_min_score`.
EvalSummary evaluate(const Detector& det, std::span<const DetectionSample> samples, const std::vector<ClassInfo>& classes,
                     const InferenceSettings& settings = {}, double error_min_score = 0.3);

struct ReportData {
  std::vector<ClassInfo> classes;
  std::optional<MapResult> map50, map_coco;
  std::optional<ErrorBreakdown> errors;
  std::optional<ChannelDistance> distance;
  std::optional<GradNormResult> grad_norms;
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes map.csv, errors.csv, channel_distance.csv, grad_norms.csv and
/// summary.json (sections without data get a header-only CSV).
void emit_report(const std::filesystem::path& dir, const ReportData& data);

std::string format_number(double v);

}  // namespace defeat
