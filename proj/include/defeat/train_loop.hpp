#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "defeat/data_synth.hpp"
#include "defeat/detector.hpp"
#include "defeat/distill_losses.hpp"

namespace defeat {

/// Teacher and student cannot be paired (anchor grid, level rule or width).
class TeacherStudentMismatch : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct StepSettings {
  int train_proposals = 32;    // student proposals for its own head loss
  int distill_proposals = 64;  // K proposals shared for classification distillation
  double rpn_nms_iou = 0.7;
  bool add_gt_proposals = true;
  ProposalSource proposal_source = ProposalSource::teacher;
  LossConfig loss;
};

struct TrainConfig {
  int epochs = 12;
  int batch_size = 8;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> lr_decay_epochs{8, 11};
  double lr_decay_factor = 0.1;
  int warmup_iters = 100;
  double warmup_ratio = 0.001;
  std::uint64_t seed = 0;
  DistillConfig distill;
  std::string teacher_checkpoint;
  StepSettings step;

  /// Throws ConfigError.
  void validate() const;
  double lr_at(int epoch, long iter) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainRecord {
  long iter = 0;
  double cls_gt = 0, reg = 0, rpn = 0;
  double fea_obj = 0, fea_bg = 0;
  double cls_pos = 0, cls_neg = 0;
  double lr = 0;
  double k_obj = 0, k_bg = 0;  // mean proposal counts per image
};

struct TrainLog {
  std::vector<TrainRecord> records;

  static const std::vector<std::string>& columns();
  void write_csv(const std::filesystem::path& path) const;
};

/// Frozen teacher outputs for one image.
struct TeacherOutputs {
  std::vector<FeatureMap> neck;
  FeatureMap backbone_final;
  std::vector<Proposal> proposals;  // post-NMS, unlabelled
  std::vector<int> kept;            // proposals surviving RoI pooling
  MatrixRM logits;                  // teacher head on `kept`
};

TeacherOutputs teacher_outputs(const Detector& teacher, const DetectionSample& sample, const StepSettings& step);

/// Per-image loss values of one training step (before batch averaging).
struct SampleLosses {
  double cls_gt = 0, reg = 0, rpn = 0;
  double fea_obj = 0, fea_bg = 0;
  double cls_pos = 0, cls_neg = 0;
  int k_obj = 0, k_bg = 0;
  double total() const { return cls_gt + reg + rpn + fea_obj + fea_bg + cls_pos + cls_neg; }
};

/// Forward + backward for one image; gradients are added into `grads`.
/// `teacher` may be null (no distillation). `mask_seed` drives random masks.
/// `fixed_proposals` replaces the student's RPN proposals (before ground-truth
/// boxes are appended), which makes the loss a smooth function of the weights.
SampleLosses accumulate_sample_gradients(const Detector& student, const DetectionSample& sample,
                                         const Detector* teacher, const TeacherOutputs* teacher_out,
                                         const TrainConfig& cfg, ParamStore& grads, std::uint64_t mask_seed = 0,
                                         std::vector<Tensor>* neck_grads_out = nullptr,
                                         const std::vector<Proposal>* fixed_proposals = nullptr);

/// Gradient of the student's own detection loss w.r.t. each neck level.
std::vector<Tensor> detection_neck_gradients(const Detector& student, const DetectionSample& sample,
                                             const StepSettings& step = {},
                                             const std::vector<Proposal>* fixed_proposals = nullptr);

/// Per-level distillation masks for one image.
std::vector<BinaryMask> distill_masks(const DetectorConfig& cfg, const DistillConfig& distill,
                                      std::span<const Annotation> gt, std::uint64_t seed);

struct TrainResult {
  Detector model;
  TrainLog log;
};

using ProgressFn = std::function<void(int epoch, long iter, const TrainRecord&)>;

/// Adds the adaptation layers a distillation mode needs.
DetectorConfig configure_student(DetectorConfig student, const DetectorConfig& teacher, const DistillConfig& distill);

/// Shared SGD loop. `teacher` null trains without distillation.
TrainResult train_detector(const DetectorConfig& cfg, const TrainConfig& train_cfg,
                           std::span<const DetectionSample> train, const Detector* teacher = nullptr,
                           const ProgressFn& progress = {});

TrainResult train_teacher(const DetectorConfig& cfg, const TrainConfig& train_cfg,
                          std::span<const DetectionSample> train, const ProgressFn& progress = {});

/// Throws TeacherStudentMismatch when the pair is incompatible.
TrainResult distill_student(const DetectorConfig& student_cfg, const TrainConfig& train_cfg,
                            std::span<const DetectionSample> train, const Detector& teacher,
                            const ProgressFn& progress = {});

DetectorConfig teacher_preset(int image_size);
DetectorConfig student_preset(int image_size);

/// Sets a numeric DistillConfig field by name (gamma, lambda, alpha_obj, ...).
void set_distill_param(DistillConfig& cfg, const std::string& name, double value);

struct SweepRow {
  double value = 0;
  std::uint64_t seed = 0;
  double map50 = 0;
};

std::vector<SweepRow> sweep_coefficient(const DetectorConfig& student_cfg, const TrainConfig& base,
                                        const std::string& parameter, std::span<const double> values,
                                        std::span<const std::uint64_t> seeds, std::span<const DetectionSample> train,
                                        std::span<const DetectionSample> val, const Detector& teacher);

/// Rows (value, seed, map50) followed by per-value means.
void write_sweep_csv(const std::filesystem::path& path, const std::string& parameter, std::span<const SweepRow> rows);

}  // namespace defeat
